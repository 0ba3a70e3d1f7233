use std::collections::HashMap;

use nstasr::textkit::{lm_score, LanguageModel, LmConfig};
use nstasr::transducer::*;
use numcore::{Graph, ParamStore, SeedRng, Tensor};
use proptest::prelude::*;

fn random_lattice(t: usize, u: usize, v: usize, seed: u64) -> Lattice {
    let mut rng = SeedRng::new(seed);
    let mut data = Vec::with_capacity(t * (u + 1) * v);
    for _ in 0..t * (u + 1) {
        let logits: Vec<f64> = (0..v).map(|_| 2.0 * rng.normal()).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
        data.extend(logits.iter().map(|x| x - m - z.ln()));
    }
    Lattice::new(Tensor::from_vec(&[t * (u + 1), v], data), t, u).unwrap()
}

fn random_labels(u: usize, v: usize, seed: u64) -> Vec<u32> {
    let mut rng = SeedRng::new(seed ^ 0x5555);
    (0..u).map(|_| 1 + rng.index(v - 1) as u32).collect()
}

/// Log-probabilities of every monotonic alignment path, listed one by one.
fn path_log_probs(lat: &Lattice, labels: &[u32], t: usize, u: usize, acc: f64, out: &mut Vec<f64>) {
    let u_len = labels.len();
    if u < u_len {
        path_log_probs(lat, labels, t, u + 1, acc + lat.at(t, u, labels[u]), out);
    }
    let blank = acc + lat.at(t, u, 0);
    if t + 1 < lat.t_len {
        path_log_probs(lat, labels, t + 1, u, blank, out);
    } else if u == u_len {
        out.push(blank);
    }
}

fn brute_force_nll(lat: &Lattice, labels: &[u32]) -> f64 {
    let mut paths = Vec::new();
    path_log_probs(lat, labels, 0, 0, 0.0, &mut paths);
    -paths.iter().map(|p| p.exp()).sum::<f64>().ln()
}

#[test]
fn no_labels_is_sum_of_blanks() {
    let lat = random_lattice(4, 0, 3, 1);
    let want: f64 = -(0..4).map(|t| lat.at(t, 0, 0)).sum::<f64>();
    assert!((rnnt_loss_value(&lat, &[]).unwrap() - want).abs() < 1e-12);
}

#[test]
fn two_frames_one_label_has_two_paths() {
    let lat = random_lattice(2, 1, 2, 7);
    let y = 1;
    let p1 = lat.at(0, 0, y) + lat.at(0, 1, 0) + lat.at(1, 1, 0);
    let p2 = lat.at(0, 0, 0) + lat.at(1, 0, y) + lat.at(1, 1, 0);
    let want = -(p1.exp() + p2.exp()).ln();
    assert!((rnnt_loss_value(&lat, &[y]).unwrap() - want).abs() < 1e-12);
}

#[test]
fn labels_without_frames_are_rejected() {
    let g = Graph::new();
    let lp = g.leaf(Tensor::zeros(&[0, 3]));
    assert!(rnnt_loss(&g, lp, 0, &[1]).is_err());
}

#[test]
fn blank_label_is_rejected() {
    let lat = random_lattice(2, 1, 3, 3);
    assert!(rnnt_loss_value(&lat, &[0]).is_err());
}

#[test]
fn gradient_matches_central_differences() {
    for seed in 0..4 {
        let (t, u, v) = (3, 2, 3);
        let lat = random_lattice(t, u, v, seed);
        let labels = random_labels(u, v, seed);
        let grad = rnnt_loss_grad(&lat, &labels).unwrap();
        let h = 1e-5;
        for i in 0..lat.log_probs.numel() {
            let mut plus = lat.clone();
            plus.log_probs.data_mut()[i] += h;
            let mut minus = lat.clone();
            minus.log_probs.data_mut()[i] -= h;
            let fd = (rnnt_loss_value(&plus, &labels).unwrap()
                - rnnt_loss_value(&minus, &labels).unwrap())
                / (2.0 * h);
            assert!(
                (fd - grad.data()[i]).abs() < 1e-5,
                "entry {i}: {fd} vs {}",
                grad.data()[i]
            );
        }
    }
}

#[test]
fn graph_node_backpropagates_lattice_gradient() {
    let lat = random_lattice(3, 2, 3, 11);
    let labels = random_labels(2, 3, 11);
    let g = Graph::new();
    let lp = g.leaf(lat.log_probs.clone());
    let loss = g.scale(rnnt_loss(&g, lp, 3, &labels).unwrap(), 2.0);
    let grads = g.backward(loss).unwrap();
    let mut want = rnnt_loss_grad(&lat, &labels).unwrap();
    want.scale_in_place(2.0);
    assert!(grads.get(lp).unwrap().max_abs_diff(&want) < 1e-12);
}

proptest! {
    #[test]
    fn loss_matches_alignment_enumeration(t in 1usize..=4, u in 0usize..=3, v in 2usize..=3, seed in any::<u64>()) {
        let lat = random_lattice(t, u, v, seed);
        let labels = random_labels(u, v, seed);
        let got = rnnt_loss_value(&lat, &labels).unwrap();
        prop_assert!((got - brute_force_nll(&lat, &labels)).abs() < 1e-8);
    }

    #[test]
    fn forward_and_backward_agree(t in 1usize..=6, u in 0usize..=4, v in 2usize..=4, seed in any::<u64>()) {
        let lat = random_lattice(t, u, v, seed);
        let labels = random_labels(u, v, seed);
        let (a, b) = log_likelihoods(&lat, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn fused_argmax_ignores_asr_offset(scores in prop::collection::vec((-20.0f64..0.0, -20.0f64..0.0, 0usize..6), 1..8), c in -50.0f64..50.0) {
        let params = FusionParams { lm_weight: 0.4, nonblank_reward: 0.7 };
        let hyps: Vec<Hypothesis> = scores.iter().enumerate().map(|(i, &(a, l, n))| Hypothesis {
            tokens: vec![i as u32 + 1; n],
            asr_logp: a,
            lm_logp: l,
            n_nonblank: n,
            lm_state: None,
        }).collect();
        let best = |hs: &[Hypothesis]| hs.iter().enumerate().min_by(|a, b| search::rank(a.1, b.1, &params)).unwrap().0;
        let shifted: Vec<Hypothesis> = hyps.iter().cloned().map(|mut h| { h.asr_logp += c; h }).collect();
        prop_assert_eq!(best(&hyps), best(&shifted));
    }
}

fn hyp(asr: f64, lm: f64, n: usize) -> Hypothesis {
    Hypothesis {
        tokens: vec![1; n],
        asr_logp: asr,
        lm_logp: lm,
        n_nonblank: n,
        lm_state: None,
    }
}

#[test]
fn fused_score_examples() {
    let zero = FusionParams::default();
    assert_eq!(fused_score(&hyp(-3.5, -9.0, 2), &zero), -3.5);
    let p = FusionParams {
        lm_weight: 0.5,
        nonblank_reward: 1.0,
    };
    assert_eq!(fused_score(&hyp(-10.0, -4.0, 3), &p), -9.0);
    let (long, short) = (hyp(-12.0, -6.0, 5), hyp(-8.0, -3.0, 2));
    let gap = |beta: f64| {
        let p = FusionParams {
            lm_weight: 0.3,
            nonblank_reward: beta,
        };
        fused_score(&long, &p) - fused_score(&short, &p)
    };
    for b in [0.0, 0.5, 1.0, 2.0, 4.0] {
        assert!(gap(b + 0.25) >= gap(b));
    }
}

struct Toy {
    params: ParamStore,
    config: DecoderConfig,
    enc: Tensor,
}

impl Toy {
    fn new(t: usize, vocab: usize, seed: u64) -> Toy {
        let config = DecoderConfig {
            n_lstm_layers: 2,
            dim: 6,
            vocab_size: vocab,
            joint_dim: 5,
        };
        let mut params = config.layout(4).instantiate(seed);
        let w = params.get_mut("decoder/joint/output/weight").unwrap();
        w.scale_in_place(3.0);
        let mut rng = SeedRng::new(seed + 99);
        let enc = Tensor::from_fn(&[t, 5], |_| 1.5 * rng.normal());
        Toy {
            params,
            config,
            enc,
        }
    }

    fn net(&self) -> PredictionNetwork<'_> {
        PredictionNetwork {
            params: &self.params,
            config: &self.config,
        }
    }

    /// Lattice for `labels` assembled from the incremental joint outputs.
    fn lattice(&self, labels: &[u32]) -> Lattice {
        let net = self.net();
        let mut states = vec![net.start().unwrap()];
        for &y in labels {
            let s = net.advance(states.last().unwrap(), y).unwrap();
            states.push(s);
        }
        let t = self.enc.rows();
        let mut data = Vec::new();
        for ti in 0..t {
            for s in &states {
                data.extend(net.joint_log_probs(self.enc.row(ti), s).unwrap());
            }
        }
        Lattice::new(
            Tensor::from_vec(&[t * (labels.len() + 1), self.config.vocab_size], data),
            t,
            labels.len(),
        )
        .unwrap()
    }
}

fn small_lm(vocab: usize, seed: u64) -> LanguageModel {
    let cfg = LmConfig {
        n_layers: 1,
        model_dim: 8,
        n_heads: 2,
        relative_positional: true,
        context_len: 8,
        vocab_size: vocab,
    };
    let mut lm = LanguageModel::new(cfg, seed).unwrap();
    lm.params
        .get_mut("lm/output/weight")
        .unwrap()
        .scale_in_place(4.0);
    lm
}

fn all_sequences(vocab: u32, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for y in 1..vocab {
                let mut n: Vec<u32> = s.clone();
                n.push(y);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn wide_beam_matches_exhaustive_decode() {
    let cfg = SearchConfig {
        beam: 16,
        max_symbols_per_frame: 2,
        max_output_len: 2,
    };
    for seed in 0..12 {
        let toy = Toy::new(3, 3, seed);
        let lm = small_lm(3, seed);
        for (lm_ref, fusion) in [
            (None, FusionParams::default()),
            (
                Some(&lm),
                FusionParams {
                    lm_weight: 0.6,
                    nonblank_reward: 0.8,
                },
            ),
        ] {
            let mut best: Option<(f64, Vec<u32>)> = None;
            for y in all_sequences(3, 2) {
                let lat = toy.lattice(&y);
                let lm_lp = match lm_ref {
                    Some(lm) => lm_score(lm, &y).unwrap(),
                    None => 0.0,
                };
                let s = -brute_force_nll(&lat, &y)
                    + fusion.lm_weight * lm_lp
                    + fusion.nonblank_reward * y.len() as f64;
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, y));
                }
            }
            let (want_score, want) = best.unwrap();
            let got = beam_search(&toy.enc, &toy.net(), lm_ref, &fusion, &cfg).unwrap();
            assert_eq!(got.tokens, want, "seed {seed}");
            assert!((fused_score(&got, &fusion) - want_score).abs() < 1e-9);
        }
    }
}

#[test]
fn unit_beam_is_greedy() {
    let cfg = SearchConfig {
        beam: 1,
        max_symbols_per_frame: 3,
        max_output_len: 50,
    };
    for seed in 0..20 {
        let toy = Toy::new(7, 5, seed);
        let g = greedy_decode(&toy.enc, &toy.net(), &cfg).unwrap();
        let b = beam_search(&toy.enc, &toy.net(), None, &FusionParams::default(), &cfg).unwrap();
        assert_eq!(g.tokens, b.tokens);
        assert!((g.asr_logp - b.asr_logp).abs() < 1e-12);
    }
}

#[test]
fn beam_search_is_deterministic() {
    let toy = Toy::new(6, 4, 5);
    let lm = small_lm(4, 5);
    let p = FusionParams {
        lm_weight: 0.3,
        nonblank_reward: 0.2,
    };
    let cfg = SearchConfig::default();
    let a = beam_search(&toy.enc, &toy.net(), Some(&lm), &p, &cfg).unwrap();
    let b = beam_search(&toy.enc, &toy.net(), Some(&lm), &p, &cfg).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.asr_logp.to_bits(), b.asr_logp.to_bits());
    assert_eq!(a.lm_logp.to_bits(), b.lm_logp.to_bits());
}

#[test]
fn hypothesis_lm_score_matches_lm() {
    let toy = Toy::new(6, 4, 8);
    let lm = small_lm(4, 8);
    let p = FusionParams {
        lm_weight: 0.5,
        nonblank_reward: 1.5,
    };
    let h = beam_search(
        &toy.enc,
        &toy.net(),
        Some(&lm),
        &p,
        &SearchConfig::default(),
    )
    .unwrap();
    assert_eq!(h.n_nonblank, h.tokens.len());
    assert!((h.lm_logp - lm_score(&lm, &h.tokens).unwrap()).abs() < 1e-10);
}

#[test]
fn best_score_does_not_drop_as_beam_widens() {
    let p = FusionParams {
        lm_weight: 0.3,
        nonblank_reward: 0.5,
    };
    for seed in 0..10 {
        let toy = Toy::new(5, 4, seed);
        let lm = small_lm(4, seed);
        let mut last = f64::NEG_INFINITY;
        for beam in 1..=8 {
            let cfg = SearchConfig {
                beam,
                max_symbols_per_frame: 2,
                max_output_len: 10,
            };
            let s = fused_score(
                &beam_search(&toy.enc, &toy.net(), Some(&lm), &p, &cfg).unwrap(),
                &p,
            );
            assert!(s >= last - 1e-12, "seed {seed} beam {beam}: {s} < {last}");
            last = s;
        }
    }
}

#[test]
fn mismatched_lm_vocabulary_is_rejected() {
    let toy = Toy::new(3, 4, 1);
    let lm = small_lm(5, 1);
    let r = beam_search(
        &toy.enc,
        &toy.net(),
        Some(&lm),
        &FusionParams::default(),
        &SearchConfig::default(),
    );
    assert!(r.is_err());
}

#[test]
fn single_point_grid_is_returned() {
    let refs = vec!["a b".to_string()];
    let (p, rows) =
        tune_fusion_with(&[FusionParams::default()], &refs, |_, _| Ok("a".into())).unwrap();
    assert_eq!(p, FusionParams::default());
    assert_eq!(rows.len(), 1);
    assert!((rows[0].wer - 0.5).abs() < 1e-12);
}

/// Joint network that ignores its inputs and slightly prefers token 2 over
/// token 1; an LM that strongly prefers token 1 fixes the substitution.
#[test]
fn lm_fusion_fixes_constructed_substitution() {
    let mut toy = Toy::new(6, 3, 3);
    *toy.params.get_mut("decoder/joint/output/weight").unwrap() = Tensor::zeros(&[5, 3]);
    *toy.params.get_mut("decoder/joint/output/bias").unwrap() = Tensor::vector(vec![1.0, 0.6, 0.8]);
    let mut lm = LanguageModel::uniform(small_lm(3, 0).config, 0).unwrap();
    *lm.params.get_mut("lm/output/bias").unwrap() = Tensor::vector(vec![0.0, 3.0, 0.0]);
    let words: HashMap<u32, &str> = [(1, "a"), (2, "b")].into_iter().collect();
    let cfg = SearchConfig {
        beam: 4,
        max_symbols_per_frame: 1,
        max_output_len: 1,
    };
    let decode = |p: &FusionParams, _: usize| -> nstasr::Result<String> {
        let h = beam_search(&toy.enc, &toy.net(), Some(&lm), p, &cfg)?;
        Ok(h.tokens
            .iter()
            .map(|t| words[t])
            .collect::<Vec<_>>()
            .join(" "))
    };
    assert_eq!(decode(&FusionParams::default(), 0).unwrap(), "b");
    let grid: Vec<FusionParams> = [0.0, 0.5, 1.0]
        .iter()
        .map(|&l| FusionParams {
            lm_weight: l,
            nonblank_reward: 0.0,
        })
        .collect();
    let (best, rows) = tune_fusion_with(&grid, &["a".to_string()], decode).unwrap();
    assert!(best.lm_weight > 0.0);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].wer, 1.0);
}
