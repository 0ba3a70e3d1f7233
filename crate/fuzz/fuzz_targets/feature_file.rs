#![no_main]
use libfuzzer_sys::fuzz_target;
use nstasr::frontend::FeatureSequence;

fuzz_target!(|data: &[u8]| {
    let Ok(f) = FeatureSequence::from_bytes(data) else {
        return;
    };
    assert!(f.valid_length <= f.frames.shape()[0]);
    let bytes = f.to_bytes();
    let again = FeatureSequence::from_bytes(&bytes).expect("re-encoded features must parse");
    assert_eq!(again.to_bytes(), bytes);
});
