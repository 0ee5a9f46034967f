#![no_main]

use gemirec::data::{ingest_str, write_events};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(stream) = ingest_str(text, 1) {
        // Whatever parses must survive a write/ingest round trip unchanged.
        let again = ingest_str(&write_events(&stream), 1).expect("written events parse");
        assert_eq!(again, stream);
    }
});
