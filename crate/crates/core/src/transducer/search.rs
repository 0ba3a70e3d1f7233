//! Greedy and time-synchronous beam search with shallow LM fusion.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::rc::Rc;

use numcore::tensor::log_add;
use numcore::Tensor;
use serde::{Deserialize, Serialize};

use super::network::{PredState, PredictionNetwork};
use crate::error::{invalid, Result};
use crate::textkit::{LanguageModel, LmState, BLANK};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionParams {
    /// LM weight λ.
    pub lm_weight: f64,
    /// Per-token reward β.
    pub nonblank_reward: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub beam: usize,
    /// Emission rounds per frame; a hypothesis that used them all must emit
    /// blank.
    pub max_symbols_per_frame: usize,
    pub max_output_len: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam: 8,
            max_symbols_per_frame: 4,
            max_output_len: 256,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(invalid("beam must be at least 1"));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(invalid("max_symbols_per_frame must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub asr_logp: f64,
    pub lm_logp: f64,
    pub n_nonblank: usize,
    pub lm_state: Option<Rc<LmState>>,
}

impl Hypothesis {
    fn empty(lm_state: Option<Rc<LmState>>) -> Self {
        Hypothesis {
            tokens: Vec::new(),
            asr_logp: 0.0,
            lm_logp: 0.0,
            n_nonblank: 0,
            lm_state,
        }
    }
}

pub fn fused_score(hyp: &Hypothesis, params: &FusionParams) -> f64 {
    hyp.asr_logp + params.lm_weight * hyp.lm_logp + params.nonblank_reward * hyp.n_nonblank as f64
}

/// Ranking used everywhere: higher fused score first, then lexicographically
/// smaller tokens, then the shorter hypothesis.
pub fn rank(a: &Hypothesis, b: &Hypothesis, params: &FusionParams) -> Ordering {
    fused_score(b, params)
        .total_cmp(&fused_score(a, params))
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
}

/// Per-utterance caches: prediction states and LM states keyed by prefix,
/// joint outputs keyed by frame and prefix.
struct Caches<'a> {
    pred: &'a PredictionNetwork<'a>,
    lm: Option<&'a LanguageModel>,
    pred_states: HashMap<Vec<u32>, Rc<PredState>>,
    lm_states: HashMap<Vec<u32>, Rc<LmState>>,
    joint: HashMap<(usize, Vec<u32>), Rc<Vec<f64>>>,
}

impl<'a> Caches<'a> {
    fn new(pred: &'a PredictionNetwork<'a>, lm: Option<&'a LanguageModel>) -> Result<Self> {
        let mut pred_states = HashMap::new();
        pred_states.insert(Vec::new(), Rc::new(pred.start()?));
        Ok(Caches {
            pred,
            lm,
            pred_states,
            lm_states: HashMap::new(),
            joint: HashMap::new(),
        })
    }

    fn pred_state(&mut self, tokens: &[u32]) -> Result<Rc<PredState>> {
        if let Some(s) = self.pred_states.get(tokens) {
            return Ok(s.clone());
        }
        let (last, prefix) = tokens.split_last().expect("empty prefix is always cached");
        let parent = self.pred_state(prefix)?;
        let s = Rc::new(self.pred.advance(&parent, *last)?);
        self.pred_states.insert(tokens.to_vec(), s.clone());
        Ok(s)
    }

    fn joint(&mut self, enc: &Tensor, t: usize, tokens: &[u32]) -> Result<Rc<Vec<f64>>> {
        let key = (t, tokens.to_vec());
        if let Some(v) = self.joint.get(&key) {
            return Ok(v.clone());
        }
        let state = self.pred_state(tokens)?;
        let lp = Rc::new(self.pred.joint_log_probs(enc.row(t), &state)?);
        self.joint.insert(key, lp.clone());
        Ok(lp)
    }

    fn extend(&mut self, h: &Hypothesis, y: u32, asr_lp: f64) -> Result<Hypothesis> {
        let mut tokens = h.tokens.clone();
        tokens.push(y);
        let (lm_logp, lm_state) = match (self.lm, &h.lm_state) {
            (Some(lm), Some(st)) => {
                let next = match self.lm_states.get(&tokens) {
                    Some(n) => n.clone(),
                    None => {
                        let n = Rc::new(lm.advance(st, y)?);
                        self.lm_states.insert(tokens.clone(), n.clone());
                        n
                    }
                };
                (h.lm_logp + st.log_probs()[y as usize], Some(next))
            }
            _ => (h.lm_logp, None),
        };
        Ok(Hypothesis {
            tokens,
            asr_logp: h.asr_logp + asr_lp,
            lm_logp,
            n_nonblank: h.n_nonblank + 1,
            lm_state,
        })
    }
}

fn check_inputs(enc: &Tensor, pred: &PredictionNetwork, lm: Option<&LanguageModel>) -> Result<()> {
    if enc.rank() != 2 {
        return Err(invalid(
            "encoder projection must be a [T, joint_dim] matrix",
        ));
    }
    if let Some(lm) = lm {
        if lm.config.vocab_size != pred.config.vocab_size {
            return Err(invalid(format!(
                "LM vocabulary {} differs from the transducer's {}",
                lm.config.vocab_size, pred.config.vocab_size
            )));
        }
    }
    Ok(())
}

/// Per-step argmax (lowest id on ties) with a forced blank after
/// `max_symbols_per_frame` emissions in one frame.
pub fn greedy_decode(
    enc: &Tensor,
    pred: &PredictionNetwork,
    cfg: &SearchConfig,
) -> Result<Hypothesis> {
    check_inputs(enc, pred, None)?;
    let mut caches = Caches::new(pred, None)?;
    let mut h = Hypothesis::empty(None);
    for t in 0..enc.rows() {
        for round in 0..=cfg.max_symbols_per_frame {
            let lp = caches.joint(enc, t, &h.tokens)?;
            let forced = round == cfg.max_symbols_per_frame || h.tokens.len() >= cfg.max_output_len;
            let best = if forced {
                BLANK as usize
            } else {
                lp.iter()
                    .enumerate()
                    .fold(0, |best, (k, &v)| if v > lp[best] { k } else { best })
            };
            if best == BLANK as usize {
                h.asr_logp += lp[BLANK as usize];
                break;
            }
            h = caches.extend(&h, best as u32, lp[best])?;
        }
    }
    Ok(h)
}

/// Adds `h` to `pool`, log-adding the ASR score into an existing entry with
/// the same tokens.
fn merge_into(pool: &mut Vec<Hypothesis>, h: Hypothesis) {
    match pool.iter_mut().find(|p| p.tokens == h.tokens) {
        Some(p) => p.asr_logp = log_add(p.asr_logp, h.asr_logp),
        None => pool.push(h),
    }
}

/// Time-synchronous beam search. At each frame the beam goes through up to
/// `max_symbols_per_frame` emission rounds; in every round each live
/// hypothesis either closes the frame with blank (merged by token sequence
/// into the next beam) or extends by one non-blank token. After each round
/// the closed and open hypotheses together are cut to the `beam` best.
///
/// Plain beam search can return a worse hypothesis at a wider beam, so width
/// `B` returns the best final hypothesis over passes of width `1..=B`. The
/// passes share prediction, joint and LM caches.
pub fn beam_search(
    enc: &Tensor,
    pred: &PredictionNetwork,
    lm: Option<&LanguageModel>,
    params: &FusionParams,
    cfg: &SearchConfig,
) -> Result<Hypothesis> {
    cfg.validate()?;
    check_inputs(enc, pred, lm)?;
    let mut caches = Caches::new(pred, lm)?;
    let mut best: Option<Hypothesis> = None;
    for width in 1..=cfg.beam {
        let h = beam_pass(&mut caches, enc, params, cfg, width)?;
        if best
            .as_ref()
            .is_none_or(|b| rank(&h, b, params) == Ordering::Less)
        {
            best = Some(h);
        }
    }
    Ok(best.expect("beam is at least 1"))
}

fn beam_pass(
    caches: &mut Caches,
    enc: &Tensor,
    params: &FusionParams,
    cfg: &SearchConfig,
    width: usize,
) -> Result<Hypothesis> {
    let start_lm = match caches.lm {
        Some(lm) => Some(Rc::new(lm.start()?)),
        None => None,
    };
    let mut beam = vec![Hypothesis::empty(start_lm)];
    let v = caches.pred.config.vocab_size;
    for t in 0..enc.rows() {
        let mut closed: Vec<Hypothesis> = Vec::new();
        let mut open = std::mem::take(&mut beam);
        for round in 0..=cfg.max_symbols_per_frame {
            let mut grown = Vec::new();
            for h in &open {
                let lp = caches.joint(enc, t, &h.tokens)?;
                let mut b = h.clone();
                b.asr_logp += lp[BLANK as usize];
                merge_into(&mut closed, b);
                if round < cfg.max_symbols_per_frame && h.tokens.len() < cfg.max_output_len {
                    for y in (0..v as u32).filter(|&y| y != BLANK) {
                        grown.push(caches.extend(h, y, lp[y as usize])?);
                    }
                }
            }
            let mut pool: Vec<(bool, Hypothesis)> = closed
                .drain(..)
                .map(|h| (true, h))
                .chain(grown.into_iter().map(|h| (false, h)))
                .collect();
            pool.sort_by(|a, b| rank(&a.1, &b.1, params).then(b.0.cmp(&a.0)));
            pool.truncate(width);
            open.clear();
            for (is_closed, h) in pool {
                if is_closed {
                    closed.push(h);
                } else {
                    open.push(h);
                }
            }
            if open.is_empty() {
                break;
            }
        }
        closed.sort_by(|a, b| rank(a, b, params));
        closed.truncate(width);
        beam = closed;
    }
    beam.sort_by(|a, b| rank(a, b, params));
    Ok(beam.into_iter().next().expect("beam never empties"))
}
