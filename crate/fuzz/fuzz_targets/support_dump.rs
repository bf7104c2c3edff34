#![no_main]

use farecontrast::sparse::SupportSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(s) = SupportSet::parse_dump(&text) {
        assert_eq!(SupportSet::parse_dump(&s.dump()).unwrap(), s);
        for i in 0..s.len() {
            assert!(s.contains(i, i));
        }
    }
});
