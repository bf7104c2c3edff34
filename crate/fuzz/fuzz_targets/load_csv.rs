#![no_main]

use farecontrast::data::{read_csv, write_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(records) = read_csv(data, "fuzz") else {
        return;
    };
    // Anything accepted must survive a write/read cycle unchanged.
    let mut buf = Vec::new();
    write_csv(&records, &mut buf).unwrap();
    assert_eq!(read_csv(buf.as_slice(), "fuzz").unwrap(), records);
});
