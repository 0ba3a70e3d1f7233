use nstasr::synth::{synth_generate, SyntheticTaskSpec};
use nstasr::textkit::*;
use proptest::prelude::*;

fn lm_config(vocab: usize) -> LmConfig {
    LmConfig {
        n_layers: 2,
        model_dim: 16,
        n_heads: 2,
        relative_positional: true,
        context_len: 16,
        vocab_size: vocab,
    }
}

fn desk_corpus() -> Vec<String> {
    let (_, ds) = synth_generate(&SyntheticTaskSpec::default(), 11).unwrap();
    ds.supervised
        .iter()
        .map(|u| u.text.clone())
        .chain(ds.lm_corpus)
        .collect()
}

#[test]
fn frequent_pair_becomes_a_piece() {
    let tok = train_wpm(&["aaab".into(), "aab".into()], 10).unwrap();
    assert!(tok.id("aa").is_some());
}

#[test]
fn training_lines_round_trip() {
    let corpus = desk_corpus();
    let tok = train_wpm(&corpus, 64).unwrap();
    for line in &corpus {
        let ids = tok.encode(line);
        assert!(!ids.contains(&UNK));
        assert_eq!(tok.decode(&ids), *line);
    }
}

#[test]
fn vocabulary_respects_budget() {
    let corpus = desk_corpus();
    let tok = train_wpm(&corpus, 1024).unwrap();
    assert!(tok.vocab_size() <= 1024);
    let small = train_wpm(&corpus, 20).unwrap();
    assert!(small.vocab_size() <= 20);
}

#[test]
fn budget_below_character_inventory_is_rejected() {
    assert!(train_wpm(&["abcdefgh".into()], 5).is_err());
    assert!(train_wpm(&["   ".into()], 50).is_err());
}

#[test]
fn training_is_deterministic() {
    let corpus = desk_corpus();
    assert_eq!(
        train_wpm(&corpus, 40).unwrap(),
        train_wpm(&corpus, 40).unwrap()
    );
}

#[test]
fn tokenizer_file_round_trips_and_rejects_garbage() {
    let tok = train_wpm(&desk_corpus(), 40).unwrap();
    assert_eq!(TokenizerModel::from_text(&tok.to_text()).unwrap(), tok);
    assert!(TokenizerModel::from_text("").is_err());
    assert!(TokenizerModel::from_text("not a tokenizer\n").is_err());
    let text = tok.to_text();
    let cut = &text[..text.len() / 2];
    let truncated = &cut[..cut.rfind('\n').unwrap_or(0)];
    assert!(TokenizerModel::from_text(truncated).map_or(true, |t| t != tok));
}

#[test]
fn wer_examples() {
    assert_eq!(wer_str("a b c", "a b c").unwrap(), 0.0);
    assert!((wer_str("a b c", "a x c").unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(wer_str("a b c d", "b c e").unwrap(), 0.5);
    assert!(wer_str("", "a").is_err());
}

/// Edit distance by plain recursion over the three moves.
fn naive_edits(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive_edits(ra, rb) + usize::from(x != y);
            sub.min(naive_edits(ra, b) + 1).min(naive_edits(a, rb) + 1)
        }
    }
}

proptest! {
    #[test]
    fn edit_distance_matches_recursion(a in prop::collection::vec(0u8..3, 0..7), b in prop::collection::vec(0u8..3, 0..7)) {
        prop_assert_eq!(edit_distance(&a, &b), naive_edits(&a, &b));
    }

    #[test]
    fn edit_distance_is_symmetric(a in prop::collection::vec(0u8..4, 0..10), b in prop::collection::vec(0u8..4, 0..10)) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
    }

    #[test]
    fn edit_distance_triangle(
        a in prop::collection::vec(0u8..3, 0..8),
        b in prop::collection::vec(0u8..3, 0..8),
        c in prop::collection::vec(0u8..3, 0..8),
    ) {
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
    }
}

#[test]
fn uniform_lm_gives_log_vocab() {
    let v = 11;
    let lm = LanguageModel::uniform(lm_config(v), 1).unwrap();
    let toks = [3, 4, 5, 2, 9];
    for lp in lm.token_log_probs(&toks).unwrap() {
        assert!((lp + (v as f64).ln()).abs() < 1e-12);
    }
    let one = log_perplexity(&lm, &toks).unwrap();
    let twice: Vec<u32> = toks.iter().chain(&toks).copied().collect();
    assert!((one - (v as f64).ln()).abs() < 1e-12);
    assert!((log_perplexity(&lm, &twice).unwrap() - one).abs() < 1e-12);
}

#[test]
fn incremental_scoring_equals_full() {
    for relative in [true, false] {
        let cfg = LmConfig {
            relative_positional: relative,
            ..lm_config(9)
        };
        let lm = LanguageModel::new(cfg, 4).unwrap();
        let toks = [2, 5, 5, 8, 1, 3, 7, 2];
        let full = lm_score(&lm, &toks).unwrap();
        let inc = lm.score_incremental(&toks).unwrap();
        assert!((full - inc).abs() < 1e-10, "{full} vs {inc}");
    }
}

#[test]
fn next_token_distribution_sums_to_one() {
    let lm = LanguageModel::new(lm_config(13), 2).unwrap();
    let mut st = lm.start().unwrap();
    for t in [4, 7, 1, 12] {
        let s: f64 = st.log_probs().iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
        st = lm.advance(&st, t).unwrap();
    }
}

#[test]
fn relative_lm_is_shift_invariant() {
    let lm = LanguageModel::new(lm_config(10), 6).unwrap();
    let toks = [3, 4, 9, 2, 6];
    let a = lm.token_log_probs_at(&toks, 0).unwrap();
    let b = lm.token_log_probs_at(&toks, 7).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn out_of_vocabulary_token_is_rejected() {
    let lm = LanguageModel::new(lm_config(5), 1).unwrap();
    assert!(lm_score(&lm, &[1, 5]).is_err());
    assert!(log_perplexity(&lm, &[]).is_err());
}

#[test]
fn overfit_sentence_beats_its_shuffle() {
    let mut lm = LanguageModel::new(lm_config(10), 3).unwrap();
    let sentence = vec![2, 7, 3, 9, 4, 5];
    let cfg = LmTrainConfig {
        steps: 150,
        batch_size: 2,
        peak_lr: 1e-2,
        warmup_steps: 10,
    };
    train_lm(&mut lm, std::slice::from_ref(&sentence), &cfg, 5).unwrap();
    let shuffled = vec![5, 4, 9, 3, 7, 2];
    assert!(lm_score(&lm, &sentence).unwrap() > lm_score(&lm, &shuffled).unwrap());
    assert!(log_perplexity(&lm, &sentence).unwrap() < 0.05);
}

#[test]
fn checkpoint_round_trip() {
    let lm = LanguageModel::new(lm_config(7), 8).unwrap();
    let back = LanguageModel::from_checkpoint(
        &numcore::Checkpoint::from_bytes(&lm.to_checkpoint().unwrap().to_bytes()).unwrap(),
    )
    .unwrap();
    assert_eq!(
        lm_score(&lm, &[1, 2, 3]).unwrap(),
        lm_score(&back, &[1, 2, 3]).unwrap()
    );
}

#[test]
fn mismatched_heads_are_rejected() {
    let cfg = LmConfig {
        model_dim: 10,
        n_heads: 3,
        ..lm_config(5)
    };
    assert!(LanguageModel::new(cfg, 0).is_err());
}
