//! Individual noisy-student stages: pseudo-labeling, LM filtering, token
//! balancing and batch mixing.

use std::fmt;
use std::str::FromStr;

use numcore::SeedRng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{config, invalid, Error, Result};
use crate::frontend::FeatureSequence;
use crate::textkit::{log_perplexity, LanguageModel, TokenizerModel};
use crate::transducer::{AsrModel, DecodeRecord, FusionParams, SearchConfig};

/// Pseudo-labels plus the utterances whose decoding failed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabels {
    pub records: Vec<DecodeRecord>,
    pub failures: Vec<(String, String)>,
}

/// Decodes every unlabeled utterance with the fused teacher. Features go to
/// the decoder as given: this call takes no augmentation policy.
pub fn pseudo_label(
    teacher: &AsrModel,
    lm: Option<&LanguageModel>,
    fusion: &FusionParams,
    search: &SearchConfig,
    unlabeled: &[FeatureSequence],
    tokenizer: &TokenizerModel,
) -> PseudoLabels {
    let mut out = PseudoLabels::default();
    for f in unlabeled {
        match teacher.decode(f, lm, fusion, search) {
            Ok(h) => out
                .records
                .push(DecodeRecord::new(&f.source_id, &h, tokenizer, fusion)),
            Err(e) => out.failures.push((f.source_id.clone(), e.to_string())),
        }
    }
    out
}

/// Per-transcript scores behind a filtering decision.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    /// Indices of kept transcripts, ascending.
    pub kept: Vec<usize>,
    pub log_perplexity: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Length normalization was unusable and raw scores were ranked.
    pub fell_back: bool,
}

/// Least-squares `a + b * x`; a flat fit when all `x` coincide.
fn affine_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return (my, 0.0);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

/// Length-normalized LM score `(s - μ(l)) / σ(l)` with `μ` fitted to the
/// log-perplexities and `σ` to their absolute residuals (scaled to a
/// standard deviation), both affine in token length. Keeps the best
/// `ceil((1 - fraction) * N)`; ties keep the earlier transcript. Empty
/// transcripts score worst.
pub fn lm_filter(tokens: &[Vec<u32>], lm: &LanguageModel, fraction: f64) -> Result<FilterResult> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid(format!(
            "filter fraction {fraction} outside [0, 1)"
        )));
    }
    let n = tokens.len();
    let scores: Vec<f64> = tokens
        .iter()
        .map(|t| {
            if t.is_empty() {
                Ok(f64::INFINITY)
            } else {
                log_perplexity(lm, t)
            }
        })
        .collect::<Result<_>>()?;
    let finite: Vec<usize> = (0..n).filter(|&i| scores[i].is_finite()).collect();
    let mut normalized = scores.clone();
    let mut fell_back = false;
    if !finite.is_empty() {
        let ls: Vec<f64> = finite.iter().map(|&i| tokens[i].len() as f64).collect();
        let ss: Vec<f64> = finite.iter().map(|&i| scores[i]).collect();
        let (a, b) = affine_fit(&ls, &ss);
        let resid: Vec<f64> = ls
            .iter()
            .zip(&ss)
            .map(|(l, s)| (s - a - b * l).abs() * (std::f64::consts::PI / 2.0).sqrt())
            .collect();
        let (c, d) = affine_fit(&ls, &resid);
        if ls.iter().any(|l| c + d * l <= 0.0) {
            fell_back = true;
        } else {
            for (&i, &l) in finite.iter().zip(&ls) {
                normalized[i] = (scores[i] - a - b * l) / (c + d * l);
            }
        }
    }
    let keep = ((1.0 - fraction) * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| normalized[i].total_cmp(&normalized[j]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = order.into_iter().take(keep.min(n)).collect();
    kept.sort_unstable();
    Ok(FilterResult {
        kept,
        log_perplexity: scores,
        normalized,
        fell_back,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    /// Greedy steps; each adds one unit of weight to one transcript.
    pub n_batches: usize,
    /// Candidates examined per step.
    pub mini_pool: usize,
    /// Add-`smoothing` counts in both distributions.
    pub smoothing: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            n_batches: 1000,
            mini_pool: 256,
            smoothing: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalanceResult {
    /// Sampling weights, normalized to sum to the pool size.
    pub weights: Vec<f64>,
    /// KL after each greedy step, starting with the uniform-weight value.
    pub kl_trace: Vec<f64>,
}

/// `KL(p || q)` for distributions given as a normalized `p` and raw
/// positive counts for `q`; entries where `p` is zero are skipped.
pub fn kl_to_counts(p: &[f64], counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    p.iter()
        .zip(counts)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &c)| pv * (pv * total / c).ln())
        .sum()
}

/// Greedy reweighting that lowers `KL(reference || weighted pool tokens)`.
/// Each step draws a mini-pool of candidates and adds one unit of weight to
/// the candidate that lowers KL most, or does nothing if none lowers it.
/// Tokens outside `reference`'s support still count towards the total.
pub fn balance(
    tokens: &[Vec<u32>],
    reference: &[f64],
    cfg: &BalanceConfig,
    seed: u64,
) -> Result<BalanceResult> {
    if tokens.is_empty() {
        return Err(invalid("cannot balance an empty transcript pool"));
    }
    if cfg.mini_pool == 0 || !(cfg.smoothing > 0.0) {
        return Err(config(
            "nst.balance",
            "mini_pool must be positive and smoothing > 0",
        ));
    }
    let v = reference.len();
    let rsum: f64 = reference.iter().sum();
    if v == 0 || !(rsum > 0.0) || reference.iter().any(|&x| !(x >= 0.0)) {
        return Err(invalid(
            "reference distribution must be non-negative with positive mass",
        ));
    }
    let p: Vec<f64> = reference.iter().map(|x| x / rsum).collect();
    let per: Vec<Vec<(usize, f64)>> = tokens
        .iter()
        .map(|t| {
            let mut c: Vec<(usize, f64)> = Vec::new();
            for &tok in t {
                let k = tok as usize;
                if k >= v {
                    continue;
                }
                match c.iter_mut().find(|(j, _)| *j == k) {
                    Some((_, n)) => *n += 1.0,
                    None => c.push((k, 1.0)),
                }
            }
            c
        })
        .collect();
    let mut weights = vec![1.0; tokens.len()];
    let mut counts = vec![cfg.smoothing; v];
    for c in &per {
        for &(k, n) in c {
            counts[k] += n;
        }
    }
    let mut total: f64 = counts.iter().sum();
    // KL = sum p log p - sum p log c + log total
    let neg_entropy: f64 = p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum();
    let mut cross: f64 = p
        .iter()
        .zip(&counts)
        .filter(|(&x, _)| x > 0.0)
        .map(|(x, c)| x * c.ln())
        .sum();
    let kl = |cross: f64, total: f64| neg_entropy - cross + total.ln();
    let mut trace = vec![kl(cross, total)];
    let mut rng = SeedRng::derive(seed, "balance");
    for _ in 0..cfg.n_batches {
        let cands = rng.sample_without_replacement(tokens.len(), cfg.mini_pool);
        let mut best: Option<(f64, usize, f64)> = None;
        for &i in &cands {
            let len: f64 = per[i].iter().map(|(_, n)| n).sum();
            if len == 0.0 {
                continue;
            }
            let d_cross: f64 = per[i]
                .iter()
                .map(|&(k, n)| p[k] * ((counts[k] + n).ln() - counts[k].ln()))
                .sum();
            let value = kl(cross + d_cross, total + len);
            if best.is_none_or(|(b, j, _)| value < b || (value == b && i < j)) {
                best = Some((value, i, d_cross));
            }
        }
        let current = *trace.last().expect("trace starts non-empty");
        match best {
            Some((value, i, d_cross)) if value < current => {
                weights[i] += 1.0;
                for &(k, n) in &per[i] {
                    counts[k] += n;
                    total += n;
                }
                cross += d_cross;
                trace.push(value);
            }
            _ => trace.push(current),
        }
    }
    let wsum: f64 = weights.iter().sum();
    let n = tokens.len() as f64;
    weights.iter_mut().for_each(|w| *w *= n / wsum);
    Ok(BalanceResult {
        weights,
        kl_trace: trace,
    })
}

/// Supervised and pseudo-labeled utterance counts per batch, written `s:p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixRatio {
    pub supervised: usize,
    pub pseudo: usize,
}

impl FromStr for MixRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            config(
                "nst.mix_ratio",
                format!("expected `supervised:pseudo` counts, got {s:?}"),
            )
        };
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let r = MixRatio {
            supervised: a.trim().parse().map_err(|_| bad())?,
            pseudo: b.trim().parse().map_err(|_| bad())?,
        };
        if r.supervised + r.pseudo == 0 {
            return Err(bad());
        }
        Ok(r)
    }
}

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.supervised, self.pseudo)
    }
}

impl Serialize for MixRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MixRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(|e: Error| match e {
            Error::Config { msg, .. } => serde::de::Error::custom(msg),
            other => serde::de::Error::custom(other),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    /// Fixed counts from each pool in every batch.
    Batchwise,
    /// One shuffled pool; batch composition follows pool sizes.
    Pooled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixPolicy {
    pub mode: MixMode,
    pub supervised_per_batch: usize,
    pub pseudo_per_batch: usize,
}

impl MixPolicy {
    pub fn batchwise(ratio: MixRatio) -> Self {
        MixPolicy {
            mode: MixMode::Batchwise,
            supervised_per_batch: ratio.supervised,
            pseudo_per_batch: ratio.pseudo,
        }
    }

    /// Pooled batches of the same total size as `ratio`.
    pub fn pooled(ratio: MixRatio) -> Self {
        MixPolicy {
            mode: MixMode::Pooled,
            ..Self::batchwise(ratio)
        }
    }

    pub fn batch_size(&self) -> usize {
        self.supervised_per_batch + self.pseudo_per_batch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixItem {
    Supervised(usize),
    Pseudo(usize),
}

/// Epoch-wise shuffled indices, reshuffled whenever exhausted.
#[derive(Clone, Debug)]
struct Shuffler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Shuffler {
    fn new(n: usize) -> Self {
        Shuffler {
            n,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self, rng: &mut SeedRng) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.n).collect();
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Infinite batch stream over a supervised and a pseudo-labeled pool.
/// Pseudo items are drawn proportionally to `weights` when given.
#[derive(Clone, Debug)]
pub struct MixStream {
    policy: MixPolicy,
    rng: SeedRng,
    sup: Shuffler,
    pseudo: Shuffler,
    pooled: Shuffler,
    n_sup: usize,
    cumulative: Option<Vec<f64>>,
}

impl MixStream {
    pub fn new(
        n_sup: usize,
        n_pseudo: usize,
        policy: MixPolicy,
        weights: Option<&[f64]>,
        seed: u64,
    ) -> Result<Self> {
        if policy.batch_size() == 0 {
            return Err(config("nst.mix_ratio", "batch size must be positive"));
        }
        match policy.mode {
            MixMode::Batchwise => {
                if policy.supervised_per_batch > 0 && n_sup == 0 {
                    return Err(invalid(
                        "supervised pool is empty but the mix asks for supervised items",
                    ));
                }
                if policy.pseudo_per_batch > 0 && n_pseudo == 0 {
                    return Err(invalid(
                        "pseudo-labeled pool is empty but the mix asks for pseudo items",
                    ));
                }
            }
            MixMode::Pooled => {
                if n_sup + n_pseudo == 0 {
                    return Err(invalid("both pools are empty"));
                }
            }
        }
        let cumulative = match weights {
            Some(w) => {
                if w.len() != n_pseudo
                    || w.iter().any(|x| !(*x >= 0.0))
                    || !(w.iter().sum::<f64>() > 0.0)
                {
                    return Err(invalid(
                        "pseudo weights must be non-negative, one per item, with positive sum",
                    ));
                }
                let mut acc = 0.0;
                Some(
                    w.iter()
                        .map(|x| {
                            acc += x;
                            acc
                        })
                        .collect(),
                )
            }
            None => None,
        };
        Ok(MixStream {
            policy,
            rng: SeedRng::derive(seed, "mix_batches"),
            sup: Shuffler::new(n_sup),
            pseudo: Shuffler::new(n_pseudo),
            pooled: Shuffler::new(n_sup + n_pseudo),
            n_sup,
            cumulative,
        })
    }

    fn draw_pseudo(&mut self) -> usize {
        match &self.cumulative {
            Some(c) => {
                let total = *c.last().expect("weights are non-empty");
                let x = self.rng.uniform() * total;
                c.partition_point(|&v| v <= x).min(c.len() - 1)
            }
            None => self.pseudo.next(&mut self.rng),
        }
    }

    pub fn next_batch(&mut self) -> Vec<MixItem> {
        let mut batch = Vec::with_capacity(self.policy.batch_size());
        match self.policy.mode {
            MixMode::Batchwise => {
                for _ in 0..self.policy.supervised_per_batch {
                    batch.push(MixItem::Supervised(self.sup.next(&mut self.rng)));
                }
                for _ in 0..self.policy.pseudo_per_batch {
                    let i = self.draw_pseudo();
                    batch.push(MixItem::Pseudo(i));
                }
            }
            MixMode::Pooled => {
                for _ in 0..self.policy.batch_size() {
                    let i = self.pooled.next(&mut self.rng);
                    batch.push(if i < self.n_sup {
                        MixItem::Supervised(i)
                    } else {
                        MixItem::Pseudo(i - self.n_sup)
                    });
                }
            }
        }
        batch
    }
}

/// The first `n` batches of a mix stream.
pub fn mix_batches(
    n_sup: usize,
    n_pseudo: usize,
    policy: MixPolicy,
    weights: Option<&[f64]>,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<MixItem>>> {
    let mut s = MixStream::new(n_sup, n_pseudo, policy, weights, seed)?;
    Ok((0..n).map(|_| s.next_batch()).collect())
}
