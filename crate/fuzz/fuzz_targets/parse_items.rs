#![no_main]

use libfuzzer_sys::fuzz_target;
use sfcnn::ingest::parse_items;

fuzz_target!(|data: &[u8]| {
    let _ = parse_items(data);
});
