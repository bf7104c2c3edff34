#![no_main]

use farecontrast::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::parse(text) {
            let again = serde_json::to_string(&cfg).unwrap();
            assert_eq!(ExperimentConfig::parse(&again).unwrap(), cfg);
        }
    }
});
