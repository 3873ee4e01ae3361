#![no_main]

use libfuzzer_sys::fuzz_target;
use sfcnn::model::{model_from_bytes, model_to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = model_from_bytes(data) {
        let bytes = model_to_bytes(&model).expect("a decoded model re-encodes");
        let again = model_from_bytes(&bytes).expect("re-encoded model decodes");
        assert_eq!(again, model);
    }
});
