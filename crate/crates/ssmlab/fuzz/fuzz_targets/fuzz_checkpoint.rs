#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = ssmlab::checkpoint::from_bytes(data) {
        // The decoder accepts only the canonical layout with no trailing
        // bytes, so re-encoding must reproduce the input exactly.
        let encoded = ssmlab::checkpoint::to_bytes(&model);
        assert_eq!(encoded, data, "checkpoint round-trip");
    }
});
