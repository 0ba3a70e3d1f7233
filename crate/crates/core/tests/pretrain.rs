use nstasr::encoder::{EncoderConfig, Variant};
use nstasr::frontend::FeatureSequence;
use nstasr::pretrain::*;
use nstasr::synth::{synth_generate, SyntheticTaskSpec};
use nstasr::train::{run_pretraining, PretrainRunConfig};
use numcore::{grad_check, grad_check_params, Graph, OptimizerConfig, SeedRng, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeedRng::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

#[test]
fn mask_coverage_matches_independent_start_model() {
    let policy = PretrainMaskPolicy::default();
    let expected = 1.0 - (1.0f64 - 0.065).powi(10);
    assert!((expected - 0.4891).abs() < 1e-3);
    let (t, draws) = (300, 40_000u64);
    let mut hits = vec![0u32; t];
    for seed in 0..draws {
        for &p in &sample_masks(t, &policy, seed).unwrap().positions {
            hits[p] += 1;
        }
    }
    let freq: Vec<f64> = hits.iter().map(|&h| h as f64 / draws as f64).collect();
    let interior = &freq[10..t];
    let mean = interior.iter().sum::<f64>() / interior.len() as f64;
    assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
    for (j, f) in interior.iter().enumerate() {
        assert!((f - expected).abs() < 0.01, "position {}: {f}", j + 10);
    }
    // Near the start only the first j+1 positions can open a span over j.
    for (j, &f) in freq.iter().enumerate().take(10).skip(1) {
        let edge = 1.0 - (1.0f64 - 0.065).powi(j as i32 + 1);
        assert!((f - edge).abs() < 0.01, "position {j}: {f} vs {edge}");
    }
}

#[test]
fn single_step_sequence_masks_position_zero() {
    for seed in 0..20 {
        assert_eq!(
            sample_masks(1, &PretrainMaskPolicy::default(), seed)
                .unwrap()
                .positions,
            vec![0]
        );
    }
}

#[test]
fn masks_are_deterministic_and_validated() {
    let p = PretrainMaskPolicy::default();
    assert_eq!(
        sample_masks(500, &p, 3).unwrap(),
        sample_masks(500, &p, 3).unwrap()
    );
    assert_ne!(
        sample_masks(500, &p, 3).unwrap(),
        sample_masks(500, &p, 4).unwrap()
    );
    assert!(sample_masks(0, &p, 0).is_err());
    assert!(sample_masks(
        5,
        &PretrainMaskPolicy {
            start_prob: 0.0,
            span: 10
        },
        0
    )
    .is_err());
    assert!(sample_masks(
        5,
        &PretrainMaskPolicy {
            start_prob: 0.5,
            span: 0
        },
        0
    )
    .is_err());
}

#[test]
fn feature_mask_replaces_only_masked_rows() {
    let g = Graph::inference();
    let x = random(&[6, 4], 1);
    let mv = Tensor::vector(vec![9.0, 8.0, 7.0, 6.0]);
    let xv = g.constant(x.clone());
    let m = g.constant(mv.clone());
    let empty = MaskSet::new(6, vec![]).unwrap();
    assert_eq!(g.value(apply_feature_mask(&g, xv, &empty, m).unwrap()), x);
    let all = MaskSet::new(6, (0..6).collect()).unwrap();
    let y = g.value(apply_feature_mask(&g, xv, &all, m).unwrap());
    for r in 0..6 {
        assert_eq!(y.row(r), mv.data());
    }
    let some = MaskSet::new(6, vec![4, 1]).unwrap();
    let y = g.value(apply_feature_mask(&g, xv, &some, m).unwrap());
    for r in 0..6 {
        assert_eq!(
            y.row(r),
            if r == 1 || r == 4 {
                mv.data()
            } else {
                x.row(r)
            }
        );
    }
    assert!(MaskSet::new(3, vec![3]).is_err());
}

#[test]
fn mask_embedding_gradient_comes_from_masked_rows() {
    let x = random(&[5, 3], 2);
    let w = random(&[5, 3], 3);
    let mask = MaskSet::new(5, vec![0, 3]).unwrap();
    let f = |g: &Graph, m: numcore::Var| {
        let y = apply_feature_mask(g, g.constant(x.clone()), &mask, m)
            .map_err(|e| numcore::NumError::InvalidArgument(e.to_string()))?;
        let y = g.mul(y, g.constant(w.clone()))?;
        Ok(g.sum(g.square(y)))
    };
    let point = random(&[3], 4);
    assert!(grad_check(f, &point, 1e-5).unwrap() < 1e-6);
    // d/dm sum((w*m)^2) over masked rows = sum_r 2 w_r^2 m.
    let g = Graph::new();
    let m = g.leaf(point.clone());
    let loss = f(&g, m).unwrap();
    let grad = g.backward(loss).unwrap().get(m).unwrap().clone();
    for c in 0..3 {
        let want: f64 = [0, 3]
            .iter()
            .map(|&r| 2.0 * w.at2(r, c).powi(2) * point.data()[c])
            .sum();
        assert!((grad.data()[c] - want).abs() < 1e-12);
    }
}

fn cfg(k: usize, tau: f64) -> ContrastiveConfig {
    ContrastiveConfig {
        n_distractors: k,
        temperature: tau,
        target_dim: 4,
        cap_to_available: true,
    }
}

fn loss_value(c: &Tensor, q: &Tensor, mask: &MaskSet, cc: &ContrastiveConfig, seed: u64) -> f64 {
    let g = Graph::inference();
    let out = contrastive_loss(
        &g,
        g.constant(c.clone()),
        g.constant(q.clone()),
        mask,
        cc,
        seed,
    )
    .unwrap();
    g.scalar(out.loss)
}

#[test]
fn uniform_similarity_gives_log_k_plus_one() {
    for k in [1, 4, 9] {
        let t = k + 3;
        let row = [0.3, -1.0, 2.0, 0.5];
        let v = Tensor::from_fn(&[t, 4], |i| row[i % 4]);
        let mask = MaskSet::new(t, (0..t).collect()).unwrap();
        let l = loss_value(&v, &v, &mask, &cfg(k, 0.1), 7);
        let want = ((k + 1) as f64).ln();
        assert!((l - want).abs() < 1e-15, "K={k}: {l} vs {want}");
    }
    assert!((5f64.ln() - 1.609).abs() < 1e-3);
}

#[test]
fn saturated_similarity_drives_loss_to_zero() {
    let t = 5;
    let e = Tensor::from_fn(&[t, 5], |i| f64::from(i / 5 == i % 5));
    let mask = MaskSet::new(t, (0..t).collect()).unwrap();
    let mut prev = f64::INFINITY;
    for tau in [1.0, 0.1, 0.01] {
        let l = loss_value(&e, &e, &mask, &cfg(4, tau), 1);
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-40, "{prev}");
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Softmax cross-entropy written out term by term for the drawn
/// distractors.
fn oracle(c: &Tensor, q: &Tensor, mask: &MaskSet, cc: &ContrastiveConfig, seed: u64) -> f64 {
    let draw = sample_distractors(mask.len(), cc, seed).unwrap();
    let mut total = 0.0;
    for (i, &t) in mask.positions.iter().enumerate() {
        let pos = (cosine(c.row(t), q.row(t)) / cc.temperature).exp();
        let mut denom = pos;
        for &j in &draw.indices[i] {
            assert_ne!(j, i);
            denom += (cosine(c.row(t), q.row(mask.positions[j])) / cc.temperature).exp();
        }
        total += -(pos / denom).ln();
    }
    total / mask.len() as f64
}

#[test]
fn matches_explicit_softmax_oracle() {
    let c = random(&[7, 4], 10);
    let q = random(&[7, 4], 11);
    let mask = MaskSet::new(7, vec![1, 4, 5]).unwrap();
    for seed in 0..10 {
        let cc = cfg(1, 0.1);
        let l = loss_value(&c, &q, &mask, &cc, seed);
        assert!((l - oracle(&c, &q, &mask, &cc, seed)).abs() < 1e-10);
    }
    let mask = MaskSet::new(7, (0..7).collect()).unwrap();
    for k in [2, 6] {
        let cc = cfg(k, 0.5);
        assert!((loss_value(&c, &q, &mask, &cc, 3) - oracle(&c, &q, &mask, &cc, 3)).abs() < 1e-10);
    }
}

#[test]
fn distractors_never_repeat_the_anchor() {
    let cc = cfg(3, 0.1);
    for seed in 0..50 {
        let d = sample_distractors(6, &cc, seed).unwrap();
        assert!(!d.with_replacement);
        for (i, row) in d.indices.iter().enumerate() {
            let mut sorted = row.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 3);
            assert!(row.iter().all(|&j| j != i && j < 6));
        }
    }
    let capped = sample_distractors(3, &cfg(10, 0.1), 0).unwrap();
    assert_eq!(capped.indices[0].len(), 2);
    let flagged = sample_distractors(
        3,
        &ContrastiveConfig {
            cap_to_available: false,
            ..cfg(10, 0.1)
        },
        0,
    )
    .unwrap();
    assert!(flagged.with_replacement);
    assert_eq!(flagged.indices[0].len(), 10);
    assert!(sample_distractors(1, &cc, 0).is_err());
}

#[test]
fn loss_is_scale_invariant_and_ignores_unmasked_rows() {
    let c = random(&[8, 4], 12);
    let q = random(&[8, 4], 13);
    let mask = MaskSet::new(8, vec![0, 2, 3, 7]).unwrap();
    let cc = cfg(2, 0.1);
    let base = loss_value(&c, &q, &mask, &cc, 5);
    let scaled = |t: &Tensor| Tensor::from_fn(t.shape(), |i| 3.0 * t.data()[i]);
    assert!((loss_value(&scaled(&c), &scaled(&q), &mask, &cc, 5) - base).abs() < 1e-9);
    let noise = random(&[8, 4], 14);
    let perturb = |t: &Tensor| {
        Tensor::from_fn(t.shape(), |i| {
            if mask.contains(i / 4) {
                t.data()[i]
            } else {
                t.data()[i] + noise.data()[i]
            }
        })
    };
    assert_eq!(
        loss_value(&perturb(&c), &perturb(&q), &mask, &cc, 5).to_bits(),
        base.to_bits()
    );
}

fn tiny_config() -> PretrainConfig {
    PretrainConfig {
        encoder: EncoderConfig {
            n_layers: 2,
            enc_dim: 8,
            n_heads: 2,
            conv_kernel: 3,
            n_mels: 8,
            subsample_channels: [2, 3],
            ..EncoderConfig::preset(Variant::Custom)
        },
        mask: PretrainMaskPolicy {
            start_prob: 0.3,
            span: 3,
        },
        contrastive: ContrastiveConfig {
            n_distractors: 3,
            temperature: 0.5,
            target_dim: 4,
            cap_to_available: true,
        },
    }
}

#[test]
fn end_to_end_gradient_check() {
    let model = PretrainModel::new(tiny_config(), 3).unwrap();
    let mut params = model.params.clone();
    for (i, (_, t)) in params.iter_mut().enumerate() {
        let n = random(t.shape(), 50 + i as u64);
        for (v, e) in t.data_mut().iter_mut().zip(n.data()) {
            *v += 0.1 * e;
        }
    }
    let batch = [
        FeatureSequence::new(random(&[24, 8], 20), 22, "a").unwrap(),
        FeatureSequence::new(random(&[18, 8], 21), 18, "b").unwrap(),
    ];
    let err = grad_check_params(
        &params,
        |g, s| {
            let ctx = numcore::nn::Ctx::new(g, s, true);
            let m = PretrainModel {
                config: model.config.clone(),
                params: s.clone(),
            };
            let losses = m
                .batch_loss(&ctx, &batch, &[8, 9])
                .map_err(|e| numcore::NumError::InvalidArgument(e.to_string()))?;
            let terms: Vec<numcore::Var> = losses
                .into_iter()
                .map(|u| u.expect("both utterances masked").loss)
                .collect();
            g.add_all(&terms)
        },
        1e-5,
        Some(3),
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn unlabeled(n: usize) -> Vec<FeatureSequence> {
    let spec = SyntheticTaskSpec {
        n_supervised: 1,
        n_unlabeled: n,
        n_dev: 1,
        ..Default::default()
    };
    synth_generate(&spec, 4).unwrap().1.unlabeled
}

fn toy_model(seed: u64) -> PretrainModel {
    let config = PretrainConfig {
        encoder: EncoderConfig::preset(Variant::Custom),
        mask: PretrainMaskPolicy::default(),
        contrastive: ContrastiveConfig::default(),
    };
    PretrainModel::new(config, seed).unwrap()
}

#[test]
fn two_hundred_steps_reduce_loss() {
    let data = unlabeled(40);
    let run = PretrainRunConfig {
        steps: 200,
        batch_size: 4,
        ..Default::default()
    };
    let (_, losses) = run_pretraining(toy_model(1), &data, &run, 2).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let start = mean(&losses[..10]);
    let end = mean(&losses[180..]);
    assert!(end <= 0.8 * start, "start {start}, end {end}");
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let data = unlabeled(8);
    let model = toy_model(3);
    let opt = OptimizerConfig::adam(0.0, 10);
    let mut state = PretrainState::new(model.clone(), opt).unwrap();
    let r = pretrain_step(&mut state, &data[..4], 1).unwrap();
    assert!(r.loss.is_finite());
    for (path, t) in model.params.iter() {
        if !path.ends_with("running_mean") && !path.ends_with("running_var") {
            assert_eq!(state.model.params.get(path).unwrap(), t, "{path}");
        }
    }
}

#[test]
fn same_seed_same_trajectory() {
    let data = unlabeled(12);
    let run = PretrainRunConfig {
        steps: 15,
        batch_size: 3,
        ..Default::default()
    };
    let (a, la) = run_pretraining(toy_model(5), &data, &run, 6).unwrap();
    let (b, lb) = run_pretraining(toy_model(5), &data, &run, 6).unwrap();
    assert_eq!(
        la.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        lb.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a, b);
}

#[test]
fn non_finite_loss_rolls_back() {
    let data = unlabeled(4);
    let mut model = toy_model(7);
    model
        .params
        .get_mut("pretrain_head/mask_embedding")
        .unwrap()
        .data_mut()[0] = f64::NAN;
    let mut state = PretrainState::new(model.clone(), OptimizerConfig::adam(1e-3, 10)).unwrap();
    let err = pretrain_step(&mut state, &data, 0).unwrap_err();
    assert!(matches!(err, nstasr::Error::NonFinite(_)), "{err}");
    assert_eq!(state.step, 0);
    assert_eq!(
        state
            .model
            .params
            .get("context_network/input_linear/weight")
            .unwrap(),
        model
            .params
            .get("context_network/input_linear/weight")
            .unwrap()
    );
}

#[test]
fn checkpoint_round_trip_and_encoder_split() {
    let model = toy_model(8);
    let bytes = model.to_checkpoint().unwrap().to_bytes();
    let back =
        PretrainModel::from_checkpoint(&numcore::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, model);
    let enc = model.encoder_params();
    assert!(enc.iter().all(|(p, _)| nstasr::encoder::is_pretrainable(p)));
    assert_eq!(enc.len(), model.config.encoder.layout().len());
}
