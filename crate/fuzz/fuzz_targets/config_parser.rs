#![no_main]

use libfuzzer_sys::fuzz_target;
use mtaw::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_text(text) {
        if cfg.validate().is_ok() {
            let again = RunConfig::from_text(&cfg.to_text()).expect("snapshot reparses");
            assert_eq!(again.to_text(), cfg.to_text());
        }
    }
});
