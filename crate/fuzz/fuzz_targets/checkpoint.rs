#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(model) = scai::checkpoint::parse(text, "fuzz") {
            // Whatever parses must also survive a round trip.
            let again = scai::checkpoint::to_string(&model);
            scai::checkpoint::parse(&again, "fuzz").expect("re-parse of serialized checkpoint");
        }
    }
});
