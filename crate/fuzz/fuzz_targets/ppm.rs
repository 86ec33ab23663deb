#![no_main]

use layerbench_core::formats::{decode_ppm, encode_ppm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Headers can claim huge images; the decoder checks the payload length
    // before allocating, so no size cap is needed here.
    if let Ok(img) = decode_ppm(data) {
        // Re-encoding quantizes to 8 bits, so only the second pass is exact.
        let bytes = encode_ppm(&img);
        assert_eq!(encode_ppm(&decode_ppm(&bytes).expect("round trip")), bytes);
    }
});
