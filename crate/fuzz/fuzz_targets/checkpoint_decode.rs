#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = gaitfield::checkpoint::Checkpoint::decode(data) {
        let again = gaitfield::checkpoint::Checkpoint::decode(&ckpt.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again, ckpt);
    }
});
