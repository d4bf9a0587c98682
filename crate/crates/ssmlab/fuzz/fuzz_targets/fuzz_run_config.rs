#![no_main]

use libfuzzer_sys::fuzz_target;
use ssmlab::cli::RunConfig;

fuzz_target!(|data: &str| {
    if let Ok(config) = serde_json::from_str::<RunConfig>(data) {
        // Anything we accept must survive a serialize/parse round trip.
        let text = serde_json::to_string(&config).expect("accepted configs serialize");
        serde_json::from_str::<RunConfig>(&text).expect("round-tripped config parses");
    }
});
