#![no_main]

use layerbench_core::formats::{decode_annotations, encode_annotations};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = decode_annotations(text) {
        let again = decode_annotations(&encode_annotations(&set)).expect("encoded annotations decode");
        assert_eq!(again.annotations.len(), set.annotations.len());
    }
});
