#![no_main]

use farecontrast::harness::ModelParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = ModelParams::from_json(text) {
        let again = ModelParams::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(again, model);
    }
});
