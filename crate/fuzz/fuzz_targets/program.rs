#![no_main]

use dtcsim::sequence::PulseProgram;
use libfuzzer_sys::fuzz_target;

// accepted programs must survive a text round trip
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(p) = PulseProgram::parse_text(text) {
            let again = PulseProgram::parse_text(&p.to_text()).expect("round trip");
            assert_eq!(again.to_text(), p.to_text());
        }
    }
});
