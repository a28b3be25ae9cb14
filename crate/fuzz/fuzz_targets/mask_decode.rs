#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = gaitfield::sequence::decode_mask_bytes(data) {
        assert_eq!(m.c(), 1);
        let _ = gaitfield::sequence::MaskSequence::new(m);
    }
});
