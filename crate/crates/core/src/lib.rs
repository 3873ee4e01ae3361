pub mod baseline;
pub mod ingest;
pub mod model;
pub mod numops;
pub mod pipeline;
pub mod synth;
pub mod train;
