#![no_main]

use libfuzzer_sys::fuzz_target;
use ssmlab::steering::SteeringSpec;

fuzz_target!(|data: &str| {
    if let Ok(spec) = serde_json::from_str::<SteeringSpec>(data) {
        let text = serde_json::to_string(&spec).expect("accepted specs serialize");
        let again: SteeringSpec =
            serde_json::from_str(&text).expect("round-tripped spec parses");
        assert_eq!(again.layer, spec.layer);
        assert_eq!(again.factors.len(), spec.factors.len());
    }
});
