#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = gaitfield::gff::decode(data) {
        // Anything that decodes must survive a re-encode unchanged.
        let bytes = gaitfield::gff::encode(&t).expect("decoded tensor re-encodes");
        let back = gaitfield::gff::decode(&bytes).expect("re-encoded tensor decodes");
        assert_eq!(back.dims(), t.dims());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
});
