#![no_main]

use gemirec::data::parse_item_side;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(items) = parse_item_side(text) {
        assert!(items.values().flat_map(|(_, f)| f).all(|x| x.is_finite()));
    }
});
