#![no_main]

use libfuzzer_sys::fuzz_target;
use sfcnn::pipeline::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = RunConfig::from_json(text) {
        let _ = config.validate();
        let echoed = serde_json::to_string(&config).expect("config serializes");
        assert_eq!(RunConfig::from_json(&echoed).expect("echo parses"), config);
    }
});
