#![no_main]

use libfuzzer_sys::fuzz_target;
use mtaw::data::Vocab;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(vocab) = Vocab::parse(text) {
        assert_eq!(Vocab::parse(&vocab.to_text()).ok(), Some(vocab));
    }
});
