#![no_main]

use dtcsim::linalg::{dump_dense, parse_dense};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_dense(text) {
            let _ = parse_dense(&dump_dense(&m)).expect("round trip");
        }
    }
});
