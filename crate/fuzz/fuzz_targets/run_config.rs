#![no_main]

use libfuzzer_sys::fuzz_target;
use selfrefine::pipeline::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // an accepted configuration survives a write/read round trip
    if let Ok(cfg) = RunConfig::from_toml(text) {
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).expect("round trip"), cfg);
    }
});
