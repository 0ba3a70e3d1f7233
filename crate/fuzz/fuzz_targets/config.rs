#![no_main]
use libfuzzer_sys::fuzz_target;
use nstasr::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::parse(text, &[]) {
        cfg.validate().expect("parsed configs are validated");
    }
    // The same bytes read as command-line overrides on a minimal config.
    let overrides: Vec<String> = text.lines().map(str::to_string).collect();
    let _ = ExperimentConfig::parse("seed = 1", &overrides);
    let _ = nstasr::ablate::parse_grid(&overrides);
});
