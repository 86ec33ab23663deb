#![no_main]

use layerbench_core::annotation::match_tags;
use layerbench_core::formats::parse_detections;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_detections(text) {
        let _ = match_tags(&file.detections);
    }
});
