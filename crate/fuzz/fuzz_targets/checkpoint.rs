#![no_main]
use libfuzzer_sys::fuzz_target;
use numcore::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = Checkpoint::from_bytes(data) else {
        return;
    };
    // Re-encoding is stable even when tensors hold NaN.
    let bytes = ck.to_bytes();
    let again = Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint must parse");
    assert_eq!(again.to_bytes(), bytes);
    let _ = nstasr::transducer::AsrModel::from_checkpoint(&ck);
    let _ = nstasr::pretrain::PretrainModel::from_checkpoint(&ck);
});
