#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(run) = gaitfield::config::parse_run_config(text) {
        // The rendered form of a valid config parses back.
        let back = gaitfield::config::parse_run_config(&run.to_text()).expect("rendered config parses");
        assert_eq!(back, run);
    }
    let _ = gaitfield::config::parse_model_config(text);
});
