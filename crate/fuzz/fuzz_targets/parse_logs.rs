#![no_main]

use libfuzzer_sys::fuzz_target;
use sfcnn::ingest::{parse_logs, parse_logs_with_header_names};

// Input is `logs.csv`, a NUL byte, then `items.csv`.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let (logs, items) = data.split_at(split);
    let items = items.get(1..).unwrap_or_default();
    if let Ok(table) = parse_logs_with_header_names(logs, items) {
        let names = table.indicator_names().to_vec();
        let again = parse_logs(logs, items, &names).expect("header names must parse");
        assert_eq!(again.num_days(), table.num_days());
        for record in table.records() {
            assert!(record.indicators.iter().all(|v| v.is_finite()));
        }
    }
});
