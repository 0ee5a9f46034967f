#![no_main]

use gemirec::data::{parse_user_side, MAX_FEATURE_VALUE};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(users) = parse_user_side(text) {
        assert!(users.values().flatten().all(|&x| x < MAX_FEATURE_VALUE));
    }
});
