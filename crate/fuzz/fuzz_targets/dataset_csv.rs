#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = scai::synth::parse_csv(data, "fuzz", 12) {
        assert!(set.curves.iter().all(|c| c.values.len() == set.width && c.label < 12));
    }
});
