//! Scene files come straight from users, so anything that passes validation
//! must be safe to hand to the renderer's setup code.

#![no_main]

use layerbench_core::scene::SceneSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(scene) = serde_json::from_slice::<SceneSpec>(data) else { return };
    if scene.validate().is_ok() {
        let back: SceneSpec = serde_json::from_str(&scene.to_json()).expect("scene round trip");
        assert!(back.validate().is_ok());
    }
});
