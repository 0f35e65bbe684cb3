#![no_main]

use dtcsim::analysis::{spectrum, SpectrumOptions};
use dtcsim::engine::EvolutionRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(r) = EvolutionRecord::parse_csv(text) {
            let _ = spectrum(&r, &SpectrumOptions::default());
        }
    }
});
