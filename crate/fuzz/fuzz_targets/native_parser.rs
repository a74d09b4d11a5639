#![no_main]

use libfuzzer_sys::fuzz_target;
use mtaw::data::{decode_dataset, Format, Split, Vocab, VocabPolicy};

fuzz_target!(|data: &[u8]| {
    let mut vocab = Vocab::new();
    if let Ok(ds) = decode_dataset(data, Format::Native, &mut vocab, VocabPolicy::Extend, Some(50), Split::Train) {
        assert_eq!(ds.num_items(), vocab.len());
        assert!(ds.sessions().iter().all(|s| !s.items.is_empty() && s.items.len() <= 50));
    }
});
