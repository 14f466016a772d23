#![no_main]

use libfuzzer_sys::fuzz_target;
use selfrefine::policy::{Vocabulary, UNK};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let Some((train, probe)) = text.split_once('\u{0}') else {
        return;
    };
    let Ok(vocab) = Vocabulary::build([train], 128) else {
        return;
    };
    for source in [train, probe] {
        let encoded = vocab.encode(source);
        // text without unknown pieces decodes back to itself
        if !encoded.ids.contains(&UNK) {
            assert_eq!(vocab.decode(&encoded.ids), source);
        }
        let _ = vocab.encode_prompt(source);
        let _ = vocab.encode_answer(source);
    }
});
