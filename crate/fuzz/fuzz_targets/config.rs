#![no_main]

use dtcsim::harness::{load_config, Preset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = load_config(Preset::Custom, Some(text), &[]) {
            let _ = cfg.points();
        }
    }
});
