#![no_main]
use libfuzzer_sys::fuzz_target;
use scai::sim::{decode_payload, encode_payload};

fuzz_target!(|data: &[u8]| {
    if let Ok((split, features)) = decode_payload(data) {
        assert_eq!(encode_payload(split, &features), data);
    }
});
