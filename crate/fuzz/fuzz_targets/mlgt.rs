//! Ground-truth planes: decoding must not panic, and whatever decodes must
//! re-encode to a stable byte string.

#![no_main]

use layerbench_core::formats::{decode_mlgt, encode_mlgt};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(planes) = decode_mlgt(data) {
        let bytes = encode_mlgt(&planes);
        let again = decode_mlgt(&bytes).expect("re-encoded planes decode");
        assert_eq!(encode_mlgt(&again), bytes);
    }
});
