#![no_main]

use libfuzzer_sys::fuzz_target;
use neural_duel::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = ExperimentConfig::from_json(text) else {
        return;
    };
    let valid = cfg.validate().is_ok();
    let back = ExperimentConfig::from_json(&cfg.to_json()).expect("serialised config parses");
    assert_eq!(back, cfg);
    assert_eq!(back.validate().is_ok(), valid);
});
