#![no_main]
use gaitfield::synth::SyntheticWalkerSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = SyntheticWalkerSpec::parse(text) {
        let back = SyntheticWalkerSpec::parse(&spec.to_spec_string()).expect("rendered spec parses");
        assert_eq!(back.to_spec_string(), spec.to_spec_string());
    }
});
