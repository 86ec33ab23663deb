#![no_main]

use layerbench_core::formats::{decode_mlfl, encode_mlfl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(pred) = decode_mlfl(data) {
        let bytes = encode_mlfl(&pred);
        let again = decode_mlfl(&bytes).expect("re-encoded prediction decodes");
        assert_eq!(encode_mlfl(&again), bytes);
    }
});
