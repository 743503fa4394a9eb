#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = btf::pipeline::ExperimentConfig::from_toml_str(text) {
        // parse -> serialise -> parse is the identity on accepted configs
        let toml = config.to_toml_string().unwrap();
        let again = btf::pipeline::ExperimentConfig::from_toml_str(&toml).unwrap();
        assert_eq!(config, again);
    }
});
