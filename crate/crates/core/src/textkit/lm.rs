//! Causal transformer language model over word-piece ids.
//!
//! Sequences are scored after an implicit start token (the blank id); no
//! end-of-sentence token is predicted. Two evaluation paths exist: the
//! graph path used for training and batch scoring, and an incremental
//! key/value-cached path used during beam search. They agree to rounding.

use numcore::nn::{self, rel_index, AttentionSpec, Ctx, LN_EPS};
use numcore::tensor::log_sum_exp;
use numcore::{
    Checkpoint, Graph, Init, Layout, Optimizer, OptimizerConfig, ParamStore, SeedRng, Tensor, Var,
};
use serde::{Deserialize, Serialize};

use super::tokenizer::BLANK;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub relative_positional: bool,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            n_layers: 2,
            model_dim: 64,
            n_heads: 4,
            relative_positional: true,
            context_len: 64,
            vocab_size: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(invalid("LM model_dim must be divisible by n_heads"));
        }
        if self.context_len == 0 || self.vocab_size < 2 {
            return Err(invalid("LM needs a context length and at least two tokens"));
        }
        Ok(())
    }

    fn attention(&self) -> AttentionSpec {
        AttentionSpec {
            n_heads: self.n_heads,
            causal: true,
            rel_radius: self.relative_positional.then_some(self.context_len),
            window: Some(self.context_len),
        }
    }

    pub fn layout(&self) -> Layout {
        let d = self.model_dim;
        let mut l = Layout::new();
        l.push("lm/embedding", &[self.vocab_size, d], Init::Normal(1.0));
        if !self.relative_positional {
            l.push("lm/position", &[self.context_len, d], Init::Normal(0.1));
        }
        for i in 0..self.n_layers {
            let p = format!("lm/layer_{i}");
            nn::layer_norm_layout(&mut l, &format!("{p}/ln_att"), d);
            nn::attention_layout(&mut l, &format!("{p}/att"), d, self.attention());
            nn::layer_norm_layout(&mut l, &format!("{p}/ln_ff"), d);
            nn::linear_layout(&mut l, &format!("{p}/ff1"), d, 4 * d, true);
            nn::linear_layout(&mut l, &format!("{p}/ff2"), 4 * d, d, true);
        }
        nn::layer_norm_layout(&mut l, "lm/final_ln", d);
        nn::linear_layout(&mut l, "lm/output", d, self.vocab_size, true);
        l
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub params: ParamStore,
}

/// Per-hypothesis incremental state: cached keys and values for every layer
/// and the next-token log-distribution.
#[derive(Clone, Debug)]
pub struct LmState {
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    log_probs: Vec<f64>,
}

impl LmState {
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// Tokens consumed so far, the start token included.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layer_norm_raw(params: &ParamStore, prefix: &str, x: &[f64]) -> Result<Vec<f64>> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let is = 1.0 / (var + LN_EPS).sqrt();
    let gamma = params.get(&format!("{prefix}/gamma"))?.data();
    let beta = params.get(&format!("{prefix}/beta"))?.data();
    Ok(x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * is * g + b)
        .collect())
}

impl LanguageModel {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config.layout().instantiate(seed);
        Ok(LanguageModel { config, params })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_params(&self.params);
        ck.metadata.insert("kind".into(), "lm".into());
        ck.metadata
            .insert("config".into(), serde_json::to_string(&self.config)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.metadata.get("config").ok_or_else(|| Error::Format {
            what: "checkpoint",
            msg: "missing LM config".into(),
        })?;
        let config: LmConfig = serde_json::from_str(cfg)?;
        config.validate()?;
        let params = ck.params()?;
        let layout = config.layout();
        for (path, shape) in layout.iter() {
            params.get(path)?.expect_shape("checkpoint load", shape)?;
        }
        if params.len() != layout.len() {
            return Err(invalid(
                "checkpoint holds parameters the LM config does not describe",
            ));
        }
        Ok(LanguageModel { config, params })
    }

    /// Model whose output layer is zeroed, so every next-token distribution is
    /// uniform.
    pub fn uniform(config: LmConfig, seed: u64) -> Result<Self> {
        let mut lm = Self::new(config, seed)?;
        for p in ["lm/output/weight", "lm/output/bias"] {
            let t = lm.params.get_mut(p)?;
            *t = Tensor::zeros(t.shape());
        }
        Ok(lm)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            Some(t) => Err(invalid(format!(
                "token id {t} outside LM vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Next-token log-probabilities `[n, V]` for `inputs`, with rows before
    /// `offset` excluded from attention (their outputs are meaningless).
    pub fn forward(&self, ctx: &Ctx, inputs: &[u32], offset: usize) -> Result<Var> {
        self.check_tokens(inputs)?;
        let g = ctx.graph;
        let cfg = &self.config;
        let idx: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let mut x = g.gather_rows(ctx.p("lm/embedding")?, &idx)?;
        if !cfg.relative_positional {
            let pos: Vec<usize> = (0..inputs.len())
                .map(|i| i.saturating_sub(offset).min(cfg.context_len - 1))
                .collect();
            x = g.add(x, g.gather_rows(ctx.p("lm/position")?, &pos)?)?;
        }
        for i in 0..cfg.n_layers {
            let p = format!("lm/layer_{i}");
            let h = nn::layer_norm(ctx, &format!("{p}/ln_att"), x)?;
            let a = nn::self_attention(
                ctx,
                &format!("{p}/att"),
                h,
                offset..inputs.len(),
                cfg.attention(),
            )?;
            x = g.add(x, a)?;
            let h = nn::layer_norm(ctx, &format!("{p}/ln_ff"), x)?;
            let f = g.relu(nn::linear(ctx, &format!("{p}/ff1"), h)?);
            x = g.add(x, nn::linear(ctx, &format!("{p}/ff2"), f)?)?;
        }
        let h = nn::layer_norm(ctx, "lm/final_ln", x)?;
        Ok(g.log_softmax_rows(nn::linear(ctx, "lm/output", h)?))
    }

    /// Per-token log-probabilities of `tokens` on the graph path.
    pub fn token_log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.token_log_probs_at(tokens, 0)
    }

    /// Same as [`Self::token_log_probs`] but with the sequence placed after
    /// `offset` masked filler positions.
    pub fn token_log_probs_at(&self, tokens: &[u32], offset: usize) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &self.params, false);
        let mut inputs = vec![BLANK; offset];
        inputs.push(BLANK);
        inputs.extend_from_slice(&tokens[..tokens.len() - 1]);
        let lp = g.value(self.forward(&ctx, &inputs, offset)?);
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| lp.at2(offset + i, t as usize))
            .collect())
    }

    /// Mean negative log-likelihood of a batch of sequences, as a graph node.
    pub fn batch_loss(&self, ctx: &Ctx, batch: &[Vec<u32>]) -> Result<Var> {
        let g = ctx.graph;
        let mut terms = Vec::new();
        let mut n_tokens = 0;
        for seq in batch.iter().filter(|s| !s.is_empty()) {
            let mut inputs = vec![BLANK];
            inputs.extend_from_slice(&seq[..seq.len() - 1]);
            let lp = self.forward(ctx, &inputs, 0)?;
            let coords: Vec<(usize, usize)> = seq
                .iter()
                .enumerate()
                .map(|(i, &t)| (i, t as usize))
                .collect();
            terms.push(g.sum(g.pick(lp, &coords)?));
            n_tokens += seq.len();
        }
        if n_tokens == 0 {
            return Err(invalid("LM batch has no tokens"));
        }
        Ok(g.scale(g.add_all(&terms)?, -1.0 / n_tokens as f64))
    }

    /// State after consuming the start token.
    pub fn start(&self) -> Result<LmState> {
        let empty = LmState {
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            log_probs: Vec::new(),
        };
        self.advance(&empty, BLANK)
    }

    /// State after additionally consuming `token`.
    pub fn advance(&self, state: &LmState, token: u32) -> Result<LmState> {
        self.check_tokens(&[token])?;
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.model_dim;
        let pos = state.len();
        let mut next = state.clone();
        let emb = p.get("lm/embedding")?;
        let mut x = emb.row(token as usize).to_vec();
        if !cfg.relative_positional {
            let pe = p.get("lm/position")?;
            for (a, b) in x.iter_mut().zip(pe.row(pos.min(cfg.context_len - 1))) {
                *a += b;
            }
        }
        let spec = cfg.attention();
        let dh = d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            let pre = format!("lm/layer_{l}");
            let h = layer_norm_raw(p, &format!("{pre}/ln_att"), &x)?;
            let q = nn::linear_raw(p, &format!("{pre}/att/q"), &h)?;
            next.keys[l].push(nn::linear_raw(p, &format!("{pre}/att/k"), &h)?);
            next.values[l].push(nn::linear_raw(p, &format!("{pre}/att/v"), &h)?);
            let visible: Vec<usize> = (0..=pos)
                .filter(|&j| nn::key_visible(pos, j, &(0..pos + 1), &spec))
                .collect();
            let rel = match spec.rel_radius {
                Some(_) => Some(p.get(&format!("{pre}/att/rel_bias"))?),
                None => None,
            };
            let mut cat = vec![0.0; d];
            for hd in 0..cfg.n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = visible
                    .iter()
                    .map(|&j| {
                        let k = &next.keys[l][j][cols.clone()];
                        let mut s = q[cols.clone()]
                            .iter()
                            .zip(k)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * scale;
                        if let (Some(r), Some(radius)) = (rel, spec.rel_radius) {
                            s += r.at2(hd, rel_index(pos, j, radius));
                        }
                        s
                    })
                    .collect();
                let lse = log_sum_exp(&scores);
                for (&j, s) in visible.iter().zip(&scores) {
                    let w = (s - lse).exp();
                    for (o, v) in cat[cols.clone()]
                        .iter_mut()
                        .zip(&next.values[l][j][cols.clone()])
                    {
                        *o += w * v;
                    }
                }
            }
            let a = nn::linear_raw(p, &format!("{pre}/att/out"), &cat)?;
            x.iter_mut().zip(&a).for_each(|(xv, av)| *xv += av);
            let h = layer_norm_raw(p, &format!("{pre}/ln_ff"), &x)?;
            let f: Vec<f64> = nn::linear_raw(p, &format!("{pre}/ff1"), &h)?
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let f = nn::linear_raw(p, &format!("{pre}/ff2"), &f)?;
            x.iter_mut().zip(&f).for_each(|(xv, fv)| *xv += fv);
        }
        let h = layer_norm_raw(p, "lm/final_ln", &x)?;
        let logits = nn::linear_raw(p, "lm/output", &h)?;
        let lse = log_sum_exp(&logits);
        next.log_probs = logits.iter().map(|v| v - lse).collect();
        Ok(next)
    }

    /// Total log-probability by incremental evaluation.
    pub fn score_incremental(&self, tokens: &[u32]) -> Result<f64> {
        let mut st = self.start()?;
        let mut total = 0.0;
        for &t in tokens {
            self.check_tokens(&[t])?;
            total += st.log_probs[t as usize];
            st = self.advance(&st, t)?;
        }
        Ok(total)
    }
}

/// Sum of per-token conditional log-probabilities.
pub fn lm_score(lm: &LanguageModel, tokens: &[u32]) -> Result<f64> {
    Ok(lm.token_log_probs(tokens)?.iter().sum())
}

/// Negative mean per-token log-probability.
pub fn log_perplexity(lm: &LanguageModel, tokens: &[u32]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(invalid("cannot compute perplexity of an empty transcript"));
    }
    Ok(-lm_score(lm, tokens)? / tokens.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 300,
            batch_size: 8,
            peak_lr: 3e-3,
            warmup_steps: 30,
        }
    }
}

/// Adam training on random mini-batches; returns the per-step loss.
pub fn train_lm(
    lm: &mut LanguageModel,
    corpus: &[Vec<u32>],
    cfg: &LmTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let corpus: Vec<&Vec<u32>> = corpus.iter().filter(|s| !s.is_empty()).collect();
    if corpus.is_empty() {
        return Err(invalid("LM corpus is empty"));
    }
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.peak_lr, cfg.warmup_steps.max(1)))?;
    let mut rng = SeedRng::derive(seed, "train_lm");
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let batch: Vec<Vec<u32>> = (0..cfg.batch_size.max(1))
            .map(|_| corpus[rng.index(corpus.len())].clone())
            .collect();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &lm.params, true);
        let loss = lm.batch_loss(&ctx, &batch)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("LM training loss".into()));
        }
        let grads = g.backward(loss)?.into_params();
        opt.step(&mut lm.params, &grads)?;
        losses.push(value);
    }
    Ok(losses)
}
