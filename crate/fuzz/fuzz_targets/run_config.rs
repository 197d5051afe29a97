#![no_main]

use libfuzzer_sys::fuzz_target;
use refinegan::config::RunConfig;

// First line is an override, the rest the config text.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (first, rest) = text.split_once('\n').unwrap_or(("", text));
    let overrides: Vec<String> = if first.contains('=') { vec![first.to_string()] } else { Vec::new() };
    if let Ok(cfg) = RunConfig::parse(rest, &overrides) {
        assert_eq!(RunConfig::parse(&cfg.to_toml(), &[]).expect("resolved config reparses"), cfg);
    }
});
