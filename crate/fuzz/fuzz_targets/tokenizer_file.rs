#![no_main]
use libfuzzer_sys::fuzz_target;
use nstasr::textkit::TokenizerModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(tok) = TokenizerModel::from_text(text) else {
        return;
    };
    let saved = tok.to_text();
    let again = TokenizerModel::from_text(&saved).expect("saved tokenizer must load");
    assert_eq!(again.to_text(), saved);
    let ids = tok.encode("the quick brown fox");
    assert!(ids.iter().all(|&i| (i as usize) < tok.vocab_size()));
    let _ = tok.decode(&ids);
});
