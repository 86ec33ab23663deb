#![no_main]

use layerbench_core::calibration::rectify;
use layerbench_core::formats::parse_calibration;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(Some(rig)) = parse_calibration(text).map(|c| c.rig) {
        let _ = rectify(&rig);
    }
});
