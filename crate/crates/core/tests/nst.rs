use nstasr::experiment::{ExperimentConfig, ModelSize};
use nstasr::frontend::FeatureSequence;
use nstasr::nst::*;
use nstasr::synth::{synth_generate, SyntheticTaskSpec};
use nstasr::textkit::{train_lm, train_wpm, LanguageModel, LmConfig, LmTrainConfig};
use nstasr::transducer::{AsrModel, FusionParams, SearchConfig};
use numcore::SeedRng;
use proptest::prelude::*;

fn lm_config(vocab: usize) -> LmConfig {
    LmConfig {
        n_layers: 1,
        model_dim: 16,
        n_heads: 2,
        relative_positional: true,
        context_len: 16,
        vocab_size: vocab,
    }
}

/// LM fitted to a handful of fixed sentences over tokens 1..=8.
fn memorizing_lm() -> (LanguageModel, Vec<Vec<u32>>) {
    let sentences: Vec<Vec<u32>> = vec![
        vec![1, 2, 3, 4],
        vec![5, 6, 7],
        vec![1, 2, 5, 6, 7, 8],
        vec![3, 4, 8],
        vec![2, 3, 4, 5, 6],
    ];
    let mut lm = LanguageModel::new(lm_config(9), 1).unwrap();
    let cfg = LmTrainConfig {
        steps: 200,
        batch_size: 4,
        peak_lr: 1e-2,
        warmup_steps: 10,
    };
    train_lm(&mut lm, &sentences, &cfg, 2).unwrap();
    (lm, sentences)
}

#[test]
fn filter_keeps_sixty_of_a_hundred_and_drops_junk() {
    let (lm, sentences) = memorizing_lm();
    for junk_seed in 0..5u64 {
        let mut rng = SeedRng::new(junk_seed);
        let mut pool: Vec<Vec<u32>> = (0..99)
            .map(|i| sentences[i % sentences.len()].clone())
            .collect();
        let junk_at = rng.index(100);
        let len = 3 + rng.index(4);
        pool.insert(junk_at, (0..len).map(|_| 1 + rng.index(8) as u32).collect());
        let r = lm_filter(&pool, &lm, 0.4).unwrap();
        assert_eq!(r.kept.len(), 60);
        assert!(!r.kept.contains(&junk_at));
        let worst = (0..100)
            .max_by(|&a, &b| r.normalized[a].total_cmp(&r.normalized[b]))
            .unwrap();
        assert_eq!(worst, junk_at, "junk {:?}", pool[junk_at]);
        assert_eq!(lm_filter(&pool, &lm, 0.4).unwrap(), r);
    }
}

#[test]
fn zero_fraction_keeps_everything() {
    let (lm, sentences) = memorizing_lm();
    let r = lm_filter(&sentences, &lm, 0.0).unwrap();
    assert_eq!(r.kept, (0..sentences.len()).collect::<Vec<_>>());
    assert!(lm_filter(&sentences, &lm, 1.0).is_err());
    assert!(lm_filter(&sentences, &lm, -0.1).is_err());
}

#[test]
fn empty_transcripts_are_dropped_first() {
    let (lm, sentences) = memorizing_lm();
    let mut pool = sentences.clone();
    pool.push(vec![]);
    let r = lm_filter(&pool, &lm, 0.2).unwrap();
    assert_eq!(r.kept.len(), pool.len() - 1);
    assert!(!r.kept.contains(&(pool.len() - 1)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn filter_keeps_ceiling_count(n in 1usize..40, fraction in 0.0f64..0.99, seed in any::<u64>()) {
        let lm = LanguageModel::uniform(lm_config(6), 0).unwrap();
        let mut rng = SeedRng::new(seed);
        let pool: Vec<Vec<u32>> = (0..n).map(|_| (0..1 + rng.index(5)).map(|_| 1 + rng.index(5) as u32).collect()).collect();
        let r = lm_filter(&pool, &lm, fraction).unwrap();
        prop_assert_eq!(r.kept.len(), ((1.0 - fraction) * n as f64).ceil() as usize);
    }

    #[test]
    fn balance_trace_never_rises(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = SeedRng::new(seed);
        let pool: Vec<Vec<u32>> = (0..n).map(|_| (0..rng.index(6)).map(|_| rng.index(7) as u32).collect()).collect();
        let reference: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
        let cfg = BalanceConfig { n_batches: 60, mini_pool: 8, smoothing: 0.5 };
        let r = balance(&pool, &reference, &cfg, seed).unwrap();
        prop_assert_eq!(r.kl_trace.len(), 61);
        for w in r.kl_trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!((r.weights.iter().sum::<f64>() - n as f64).abs() < 1e-9);
        prop_assert!(r.weights.iter().all(|&w| w > 0.0));
    }
}

#[test]
fn two_cluster_pool_moves_toward_reference() {
    let mut rng = SeedRng::new(3);
    let mut pool = Vec::new();
    for i in 0..200 {
        let base = if i % 2 == 0 { 1 } else { 5 };
        pool.push(
            (0..4)
                .map(|_| base + rng.index(3) as u32)
                .collect::<Vec<u32>>(),
        );
    }
    let mut reference = vec![0.0; 8];
    for t in pool.iter().step_by(2).flatten() {
        reference[*t as usize] += 1.0;
    }
    let cfg = BalanceConfig {
        n_batches: 1000,
        mini_pool: 64,
        smoothing: 0.5,
    };
    let r = balance(&pool, &reference, &cfg, 4).unwrap();
    let start = r.kl_trace[0];
    let end = *r.kl_trace.last().unwrap();
    assert!(end < 0.5 * start, "KL {start} -> {end}");
    let even: f64 = r.weights.iter().step_by(2).sum();
    let odd: f64 = r.weights.iter().skip(1).step_by(2).sum();
    assert!(even > 5.0 * odd, "{even} vs {odd}");
}

#[test]
fn matching_pool_keeps_uniform_weights() {
    let pool: Vec<Vec<u32>> = (0..30).map(|_| vec![0, 1, 2]).collect();
    let reference = vec![1.0, 1.0, 1.0];
    let r = balance(
        &pool,
        &reference,
        &BalanceConfig {
            n_batches: 50,
            mini_pool: 10,
            smoothing: 0.5,
        },
        5,
    )
    .unwrap();
    assert!(r.kl_trace[0].abs() < 1e-12);
    assert!(
        r.weights.iter().all(|&w| (w - 1.0).abs() < 1e-12),
        "{:?}",
        r.weights
    );
}

#[test]
fn balance_rejects_empty_pool() {
    assert!(balance(&[], &[1.0], &BalanceConfig::default(), 0).is_err());
}

fn count_supervised(b: &[MixItem]) -> usize {
    b.iter()
        .filter(|i| matches!(i, MixItem::Supervised(_)))
        .count()
}

#[test]
fn batchwise_mixing_holds_exact_counts() {
    for (ratio, want) in [("1:9", 1), ("2:8", 2)] {
        let policy = MixPolicy::batchwise(ratio.parse().unwrap());
        let batches = mix_batches(50, 500, policy, None, 10_000, 9).unwrap();
        assert_eq!(batches.len(), 10_000);
        for b in &batches {
            assert_eq!(b.len(), 10);
            assert_eq!(count_supervised(b), want);
        }
    }
}

#[test]
fn pooled_mixing_follows_pool_sizes() {
    let policy = MixPolicy::pooled("1:9".parse().unwrap());
    let (ns, np) = (50, 500);
    let batches = mix_batches(ns, np, policy, None, 10_000, 10).unwrap();
    let sup: usize = batches.iter().map(|b| count_supervised(b)).sum();
    let frac = sup as f64 / (10 * batches.len()) as f64;
    let want = ns as f64 / (ns + np) as f64;
    assert!((frac - want).abs() < 0.01, "{frac} vs {want}");
    assert!(batches.iter().any(|b| count_supervised(b) != 1));
}

#[test]
fn supervised_items_cycle_through_epochs() {
    let policy = MixPolicy::batchwise("2:3".parse().unwrap());
    let batches = mix_batches(6, 4, policy, None, 3, 11).unwrap();
    let mut seen: Vec<usize> = batches
        .iter()
        .flatten()
        .filter_map(|i| match i {
            MixItem::Supervised(j) => Some(*j),
            _ => None,
        })
        .collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..6).collect::<Vec<_>>());
}

#[test]
fn weighted_pseudo_draws_follow_weights() {
    let policy = MixPolicy::batchwise("0:10".parse().unwrap());
    let weights = [1.0, 3.0, 0.0, 4.0];
    let batches = mix_batches(0, 4, policy, Some(&weights), 2000, 12).unwrap();
    let mut counts = [0usize; 4];
    for i in batches.iter().flatten() {
        if let MixItem::Pseudo(j) = i {
            counts[*j] += 1;
        }
    }
    assert_eq!(counts[2], 0);
    for (c, w) in counts.iter().zip(weights) {
        assert!((*c as f64 / 20_000.0 - w / 8.0).abs() < 0.01);
    }
}

#[test]
fn mixing_rejects_missing_pools_and_bad_ratios() {
    assert!(mix_batches(
        0,
        5,
        MixPolicy::batchwise("1:9".parse().unwrap()),
        None,
        1,
        0
    )
    .is_err());
    assert!(mix_batches(
        5,
        0,
        MixPolicy::batchwise("1:9".parse().unwrap()),
        None,
        1,
        0
    )
    .is_err());
    assert!("0:0".parse::<MixRatio>().is_err());
    assert!("1-9".parse::<MixRatio>().is_err());
    assert_eq!("1:9".parse::<MixRatio>().unwrap().to_string(), "1:9");
}

fn teacher() -> (
    AsrModel,
    nstasr::textkit::TokenizerModel,
    Vec<FeatureSequence>,
) {
    let spec = SyntheticTaskSpec {
        n_supervised: 10,
        n_unlabeled: 6,
        n_dev: 1,
        ..Default::default()
    };
    let (_, ds) = synth_generate(&spec, 2).unwrap();
    let texts: Vec<String> = ds.supervised.iter().map(|u| u.text.clone()).collect();
    let tok = train_wpm(&texts, 24).unwrap();
    let cfg = ExperimentConfig::with_seed(2);
    let model = AsrModel::new(cfg.model_config(ModelSize::Small, tok.vocab_size()), 3).unwrap();
    (model, tok, ds.unlabeled)
}

#[test]
fn pseudo_labels_come_from_unaugmented_features() {
    let (model, tok, unlabeled) = teacher();
    let fusion = FusionParams::default();
    let search = SearchConfig {
        beam: 2,
        ..Default::default()
    };
    let labels = pseudo_label(&model, None, &fusion, &search, &unlabeled, &tok);
    assert!(labels.failures.is_empty());
    assert_eq!(labels.records.len(), unlabeled.len());
    for (r, f) in labels.records.iter().zip(&unlabeled) {
        let h = model.decode(f, None, &fusion, &search).unwrap();
        assert_eq!(r.id, f.source_id);
        assert_eq!(r.tokens, h.tokens);
        assert_eq!(r.asr_logp.to_bits(), h.asr_logp.to_bits());
    }
    assert_eq!(
        pseudo_label(&model, None, &fusion, &search, &unlabeled, &tok),
        labels
    );
}

#[test]
fn empty_pool_and_failures_are_reported() {
    let (model, tok, unlabeled) = teacher();
    let fusion = FusionParams::default();
    let search = SearchConfig::default();
    assert_eq!(
        pseudo_label(&model, None, &fusion, &search, &[], &tok),
        PseudoLabels::default()
    );
    let short = FeatureSequence::new(unlabeled[0].frames.clone(), 1, "short")
        .unwrap()
        .slice(0..1)
        .unwrap();
    let mixed = vec![unlabeled[1].clone(), short];
    let labels = pseudo_label(&model, None, &fusion, &search, &mixed, &tok);
    assert_eq!(labels.records.len(), 1);
    assert_eq!(labels.failures.len(), 1);
    assert_eq!(labels.failures[0].0, "short");
}
