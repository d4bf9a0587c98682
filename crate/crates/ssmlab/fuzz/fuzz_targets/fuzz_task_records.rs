#![no_main]

use libfuzzer_sys::fuzz_target;
use ssmlab::tasks::{records_from_ndjson, records_to_ndjson};

fuzz_target!(|data: &str| {
    if let Ok(records) = records_from_ndjson(data) {
        if records.is_empty() {
            return;
        }
        let text = records_to_ndjson(&records).expect("accepted records serialize");
        let again = records_from_ndjson(&text).expect("round-tripped records parse");
        assert_eq!(again, records, "task-record round-trip");
    }
});
