use nstasr::experiment::{ExperimentConfig, ModelSize};
use nstasr::frontend::FeatureSequence;
use nstasr::nst::{MixMode, MixPolicy};
use nstasr::synth::{synth_generate, SyntheticTaskSpec};
use nstasr::textkit::{corpus_wer, train_wpm, TokenizerModel};
use nstasr::train::{run_finetune, tokenize_labeled, FineTuneRunConfig};
use nstasr::transducer::*;
use numcore::optim::transformer_lr;
use numcore::Checkpoint;
use proptest::prelude::*;

struct Setup {
    tokenizer: TokenizerModel,
    train: Vec<(FeatureSequence, Vec<u32>)>,
    texts: Vec<String>,
    model: AsrModel,
}

fn setup(n: usize, seed: u64) -> Setup {
    let spec = SyntheticTaskSpec {
        n_supervised: n,
        n_unlabeled: 1,
        n_dev: 1,
        ..Default::default()
    };
    let (_, ds) = synth_generate(&spec, seed).unwrap();
    let cfg = ExperimentConfig::with_seed(seed);
    let texts: Vec<String> = ds.supervised.iter().map(|u| u.text.clone()).collect();
    let tokenizer = train_wpm(&texts, cfg.tokenizer.vocab_budget).unwrap();
    let train = tokenize_labeled(&ds.supervised, &tokenizer);
    let model = AsrModel::new(
        cfg.model_config(ModelSize::Small, tokenizer.vocab_size()),
        seed,
    )
    .unwrap();
    Setup {
        tokenizer,
        train,
        texts,
        model,
    }
}

fn non_buffers(model: &AsrModel) -> Vec<(&String, &numcore::Tensor)> {
    model
        .params
        .iter()
        .filter(|(p, _)| !p.ends_with("running_mean") && !p.ends_with("running_var"))
        .collect()
}

#[test]
fn encoder_and_decoder_follow_their_own_schedules() {
    let cfg = FineTuneConfig::default();
    let enc = transformer_lr(5000, cfg.encoder.peak_lr, cfg.encoder.warmup_steps).unwrap();
    let dec = transformer_lr(5000, cfg.decoder.peak_lr, cfg.decoder.warmup_steps).unwrap();
    assert!((enc - 3e-4).abs() < 1e-18);
    assert!(dec < 1e-3);
    assert!((dec - 1e-3 * (1500f64 / 5000.0).sqrt()).abs() < 1e-15);
    let before = transformer_lr(4999, cfg.decoder.peak_lr, cfg.decoder.warmup_steps).unwrap();
    assert!(dec < before, "decoder past warmup should decay");
}

/// Full-scale schedules with the SpecAugment policy of the 16-bin desk task.
fn desk() -> FineTuneConfig {
    FineTuneConfig {
        spec_augment: FineTuneRunConfig::default().spec_augment,
        ..FineTuneConfig::default()
    }
}

#[test]
fn decoder_parameters_are_split_by_prefix() {
    let s = setup(4, 1);
    for (p, _) in s.model.params.iter() {
        assert_eq!(is_decoder_param(p), p.starts_with("decoder/"), "{p}");
    }
    assert!(!is_decoder_param("decoderish/x"));
}

#[test]
fn zero_learning_rates_leave_parameters_alone() {
    let s = setup(4, 2);
    let cfg = FineTuneConfig {
        encoder: GroupSchedule {
            peak_lr: 0.0,
            warmup_steps: 10,
            grad_norm_cap: 20.0,
        },
        decoder: GroupSchedule {
            peak_lr: 0.0,
            warmup_steps: 10,
            grad_norm_cap: 20.0,
        },
        ..desk()
    };
    let mut state = FineTuneState::new(s.model.clone(), &cfg).unwrap();
    for step in 0..3 {
        assert!(finetune_step(&mut state, &s.train[..2], &cfg, step)
            .unwrap()
            .is_finite());
    }
    assert_eq!(state.step, 3);
    for (p, t) in non_buffers(&s.model) {
        assert_eq!(state.model.params.get(p).unwrap(), t, "{p}");
    }
}

#[test]
fn non_finite_loss_rolls_back() {
    let mut s = setup(4, 3);
    s.model
        .params
        .get_mut("decoder/joint/output/bias")
        .unwrap()
        .data_mut()[0] = f64::NAN;
    let cfg = desk();
    let mut state = FineTuneState::new(s.model.clone(), &cfg).unwrap();
    let err = finetune_step(&mut state, &s.train[..2], &cfg, 0).unwrap_err();
    assert!(matches!(err, nstasr::Error::NonFinite(_)), "{err}");
    assert_eq!(state.step, 0);
    assert_eq!(
        state.model.params.get("decoder/embedding").unwrap(),
        s.model.params.get("decoder/embedding").unwrap()
    );
}

#[test]
fn spec_augment_changes_the_training_loss() {
    let s = setup(4, 4);
    let policy = nstasr::frontend::SpecAugmentPolicy {
        n_freq_masks: 2,
        freq_mask_param: 5,
        n_time_masks: 3,
        max_time_ratio: 0.1,
    };
    let (plain, _, _) = batch_gradients(&s.model, &s.train[..2], None, 0).unwrap();
    let (aug, _, _) = batch_gradients(&s.model, &s.train[..2], Some(&policy), 0).unwrap();
    let (again, _, _) = batch_gradients(&s.model, &s.train[..2], Some(&policy), 0).unwrap();
    assert_ne!(plain, aug);
    assert_eq!(aug, again);
}

#[test]
fn ema_tracks_the_live_weights() {
    let s = setup(4, 5);
    let frozen = FineTuneConfig {
        ema_decay: 1.0,
        ..desk()
    };
    let mut state = FineTuneState::new(s.model.clone(), &frozen).unwrap();
    finetune_step(&mut state, &s.train[..2], &frozen, 0).unwrap();
    assert_eq!(state.ema_model().params, s.model.params);
    assert_ne!(state.model.params, s.model.params);

    let follow = FineTuneConfig {
        ema_decay: 0.0,
        ..desk()
    };
    let mut state = FineTuneState::new(s.model.clone(), &follow).unwrap();
    finetune_step(&mut state, &s.train[..2], &follow, 0).unwrap();
    assert_eq!(state.ema_model().params, state.model.params);
}

fn training_wer(model: &AsrModel, s: &Setup) -> f64 {
    let search = SearchConfig {
        beam: 1,
        ..Default::default()
    };
    let hyps: Vec<String> = s
        .train
        .iter()
        .map(|(f, _)| {
            s.tokenizer
                .decode(&model.greedy(f, &search).unwrap().tokens)
        })
        .collect();
    corpus_wer(
        s.texts
            .iter()
            .zip(&hyps)
            .map(|(r, h)| (r.as_str(), h.as_str())),
    )
    .unwrap()
}

#[test]
fn three_hundred_steps_halve_training_wer() {
    let s = setup(50, 6);
    let before = training_wer(&s.model, &s);
    let cfg = FineTuneRunConfig {
        steps: 300,
        ..Default::default()
    };
    let mix = MixPolicy {
        mode: MixMode::Batchwise,
        supervised_per_batch: 4,
        pseudo_per_batch: 0,
    };
    let run = run_finetune(s.model.clone(), &s.train, &[], None, &mix, &cfg, 7).unwrap();
    assert!(run.losses.iter().all(|l| l.is_finite()));
    let after = training_wer(&run.model, &s);
    assert!(after < 0.5 * before, "WER {before} -> {after}");
}

#[test]
fn checkpoint_round_trip_and_strict_load() {
    let s = setup(4, 8);
    let ck = s.model.to_checkpoint().unwrap();
    let back = AsrModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    assert_eq!(back, s.model);
    let mut extra = s.model.params.clone();
    extra.insert("decoder/stray", numcore::Tensor::zeros(&[2]));
    let mut ck = Checkpoint::from_params(&extra);
    ck.metadata = s.model.to_checkpoint().unwrap().metadata;
    assert!(AsrModel::from_checkpoint(&ck).is_err());
}

#[test]
fn tuning_ties_go_to_the_smallest_point() {
    let grid = [
        FusionParams {
            lm_weight: 0.5,
            nonblank_reward: 0.0,
        },
        FusionParams {
            lm_weight: 0.0,
            nonblank_reward: 1.0,
        },
        FusionParams {
            lm_weight: 0.0,
            nonblank_reward: 0.5,
        },
    ];
    let refs = vec!["a b".to_string()];
    let (best, rows) = tune_fusion_with(&grid, &refs, |_, _| Ok("a c".into())).unwrap();
    assert_eq!(best, grid[2]);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.wer == 0.5));
    assert!(tune_fusion_with(&[], &refs, |_, _| Ok(String::new())).is_err());
}

proptest! {
    #[test]
    fn reward_favours_longer_hypotheses(
        a in -30.0f64..0.0, la in -30.0f64..0.0, b in -30.0f64..0.0, lb in -30.0f64..0.0,
        short in 0usize..5, extra in 1usize..5, lambda in 0.0f64..2.0, beta in 0.0f64..3.0, delta in 0.0f64..3.0,
    ) {
        let h = |asr, lm, n| Hypothesis { tokens: vec![1; n], asr_logp: asr, lm_logp: lm, n_nonblank: n, lm_state: None };
        let (s, l) = (h(a, la, short), h(b, lb, short + extra));
        let gap = |beta| {
            let p = FusionParams { lm_weight: lambda, nonblank_reward: beta };
            fused_score(&l, &p) - fused_score(&s, &p)
        };
        prop_assert!(gap(beta + delta) >= gap(beta) - 1e-12);
    }
}
