#![no_main]

use libfuzzer_sys::fuzz_target;
use mtaw::data::pickle::parse_two_lists;

fuzz_target!(|data: &[u8]| {
    if let Ok(lists) = parse_two_lists(data) {
        assert_eq!(lists.sequences.len(), lists.labels.len());
    }
});
