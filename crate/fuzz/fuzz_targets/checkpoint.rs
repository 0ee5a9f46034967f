#![no_main]

use gemirec::checkpoint::{dictionary_from_bytes, from_bytes, to_bytes, LoadOptions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = dictionary_from_bytes(data);
    if let Ok(model) = from_bytes(data, LoadOptions::default()) {
        assert_eq!(to_bytes(&model), data);
    }
});
