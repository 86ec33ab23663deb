#![no_main]

use layerbench_core::formats::{parse_observations, write_observations};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(obs) = parse_observations(text) {
        let again = parse_observations(&write_observations(&obs)).expect("written observations parse");
        assert_eq!(again.len(), obs.len());
    }
});
