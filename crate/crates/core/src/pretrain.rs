//! Contrastive masked pre-training of the feature encoder and context
//! network. Targets come from a linear layer over the unmasked
//! feature-encoder output; there is no quantizer and no diversity term.

use std::path::PathBuf;

use numcore::nn::{self, Ctx};
use numcore::{
    Checkpoint, Graph, Init, Layout, Optimizer, OptimizerConfig, ParamStore, SeedRng, Var,
};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig};
use crate::error::{config, invalid, Error, Result};
use crate::frontend::FeatureSequence;

pub const PRETRAIN_HEAD: &str = "pretrain_head";
const COS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainMaskPolicy {
    pub start_prob: f64,
    pub span: usize,
}

impl Default for PretrainMaskPolicy {
    fn default() -> Self {
        PretrainMaskPolicy {
            start_prob: 0.065,
            span: 10,
        }
    }
}

impl PretrainMaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.start_prob > 0.0 && self.start_prob <= 1.0) {
            return Err(config(
                "mask.start_prob",
                format!("{} is outside (0, 1]", self.start_prob),
            ));
        }
        if self.span == 0 {
            return Err(config("mask.span", "span must be at least 1"));
        }
        Ok(())
    }

    /// Masked fraction far from the sequence edges.
    pub fn expected_fraction(&self) -> f64 {
        1.0 - (1.0 - self.start_prob).powi(self.span as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub t_len: usize,
    /// Sorted masked positions.
    pub positions: Vec<usize>,
    /// No span start was drawn and position 0 was masked instead.
    pub forced: bool,
}

impl MaskSet {
    pub fn new(t_len: usize, mut positions: Vec<usize>) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if positions.last().is_some_and(|&p| p >= t_len) {
            return Err(invalid(format!(
                "mask position outside sequence of {t_len}"
            )));
        }
        Ok(MaskSet {
            t_len,
            positions,
            forced: false,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.positions.binary_search(&t).is_ok()
    }
}

/// Independent span starts with probability `start_prob`, each masking
/// `span` steps clipped to the sequence. An empty draw masks position 0.
pub fn sample_masks(t_len: usize, policy: &PretrainMaskPolicy, seed: u64) -> Result<MaskSet> {
    policy.validate()?;
    if t_len == 0 {
        return Err(invalid("cannot mask an empty sequence"));
    }
    let mut rng = SeedRng::derive(seed, "pretrain_mask");
    let mut masked = vec![false; t_len];
    for start in 0..t_len {
        if rng.bernoulli(policy.start_prob) {
            masked[start..(start + policy.span).min(t_len)].fill(true);
        }
    }
    let mut positions: Vec<usize> = (0..t_len).filter(|&t| masked[t]).collect();
    let forced = positions.is_empty();
    if forced {
        positions.push(0);
    }
    Ok(MaskSet {
        t_len,
        positions,
        forced,
    })
}

/// Replaces masked rows of `features[T, D]` with the shared `mask_vector[D]`.
pub fn apply_feature_mask(
    g: &Graph,
    features: Var,
    mask: &MaskSet,
    mask_vector: Var,
) -> Result<Var> {
    let t = g.shape(features)[0];
    if mask.t_len > t {
        return Err(invalid(format!(
            "mask covers {} steps but features have {t}",
            mask.t_len
        )));
    }
    if mask.is_empty() {
        return Ok(features);
    }
    Ok(g.replace_rows(features, &mask.positions, mask_vector)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub n_distractors: usize,
    pub temperature: f64,
    pub target_dim: usize,
    /// Use `min(n_distractors, masked - 1)` distractors instead of sampling
    /// with replacement when too few masked positions exist.
    pub cap_to_available: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            n_distractors: 10,
            temperature: 0.1,
            target_dim: 16,
            cap_to_available: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_distractors == 0 {
            return Err(config(
                "contrastive.n_distractors",
                "need at least one distractor",
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(config(
                "contrastive.temperature",
                "temperature must be positive",
            ));
        }
        if self.target_dim == 0 {
            return Err(config("contrastive.target_dim", "must be positive"));
        }
        Ok(())
    }
}

/// Distractor draws for `m` masked positions: row `i` lists indices into the
/// masked set, never `i` itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistractorDraw {
    pub indices: Vec<Vec<usize>>,
    pub with_replacement: bool,
}

pub fn sample_distractors(m: usize, cfg: &ContrastiveConfig, seed: u64) -> Result<DistractorDraw> {
    cfg.validate()?;
    if m < 2 {
        return Err(invalid(format!(
            "contrastive loss needs two masked positions, got {m}"
        )));
    }
    let available = m - 1;
    let (k, with_replacement) = if available >= cfg.n_distractors {
        (cfg.n_distractors, false)
    } else if cfg.cap_to_available {
        (available, false)
    } else {
        (cfg.n_distractors, true)
    };
    let mut rng = SeedRng::derive(seed, "distractors");
    let indices = (0..m)
        .map(|i| {
            let others = |j: usize| if j >= i { j + 1 } else { j };
            if with_replacement {
                (0..k).map(|_| others(rng.index(available))).collect()
            } else {
                rng.sample_without_replacement(available, k)
                    .into_iter()
                    .map(others)
                    .collect()
            }
        })
        .collect();
    Ok(DistractorDraw {
        indices,
        with_replacement,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveOutput {
    pub loss: Var,
    pub n_distractors: usize,
    pub with_replacement: bool,
}

/// Mean over masked positions of the softmax cross-entropy that picks the
/// true target among itself and distractors, on cosine similarities over
/// `temperature`. `contexts` and `targets` are full `[T, D]` sequences; only
/// masked rows enter the loss.
pub fn contrastive_loss(
    g: &Graph,
    contexts: Var,
    targets: Var,
    mask: &MaskSet,
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<ContrastiveOutput> {
    let draw = sample_distractors(mask.len(), cfg, seed)?;
    let c = g.l2_normalize_rows(g.gather_rows(contexts, &mask.positions)?, COS_EPS);
    let q = g.l2_normalize_rows(g.gather_rows(targets, &mask.positions)?, COS_EPS);
    let sims = g.scale(g.matmul_nt(c, q)?, 1.0 / cfg.temperature);
    let m = mask.len();
    let k = draw.indices[0].len();
    let mut flat = Vec::with_capacity(m * (k + 1));
    for (i, row) in draw.indices.iter().enumerate() {
        flat.push(i * m + i);
        flat.extend(row.iter().map(|&j| i * m + j));
    }
    let logits = g.gather_flat(sims, &flat, &[m, k + 1])?;
    let lp = g.log_softmax_rows(logits);
    let picked = g.pick(lp, &(0..m).map(|i| (i, 0)).collect::<Vec<_>>())?;
    Ok(ContrastiveOutput {
        loss: g.scale(g.sum(picked), -1.0 / m as f64),
        n_distractors: k,
        with_replacement: draw.with_replacement,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub mask: PretrainMaskPolicy,
    pub contrastive: ContrastiveConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mask.validate()?;
        self.contrastive.validate()
    }

    /// Encoder plus the pre-training head (mask embedding, context
    /// projection, target linear layer).
    pub fn layout(&self) -> Layout {
        let mut l = self.encoder.layout();
        let fd = self.encoder.feature_dim();
        l.push(
            format!("{PRETRAIN_HEAD}/mask_embedding"),
            &[fd],
            Init::Normal(1.0),
        );
        let td = self.contrastive.target_dim;
        nn::linear_layout(
            &mut l,
            &format!("{PRETRAIN_HEAD}/context_proj"),
            self.encoder.enc_dim,
            td,
            true,
        );
        nn::linear_layout(
            &mut l,
            &format!("{PRETRAIN_HEAD}/target_linear"),
            fd,
            td,
            true,
        );
        l
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainModel {
    pub config: PretrainConfig,
    pub params: ParamStore,
}

/// Loss of one utterance together with what the masking did.
#[derive(Clone, Copy, Debug)]
pub struct UtteranceLoss {
    pub loss: Var,
    pub masked: usize,
    pub with_replacement: bool,
}

impl PretrainModel {
    pub fn new(config: PretrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config.layout().instantiate(seed);
        Ok(PretrainModel { config, params })
    }

    /// Masks the subsampled features, runs the context network and scores
    /// masked positions against linear targets. `Ok(None)` when fewer than
    /// two positions are masked.
    pub fn loss(
        &self,
        ctx: &Ctx,
        features: &FeatureSequence,
        seed: u64,
    ) -> Result<Option<UtteranceLoss>> {
        Ok(self
            .batch_loss(ctx, std::slice::from_ref(features), &[seed])?
            .remove(0))
    }

    /// [`PretrainModel::loss`] over a batch whose context network runs
    /// together (batch norm statistics are shared). Skipped utterances do
    /// not enter the context network.
    pub fn batch_loss(
        &self,
        ctx: &Ctx,
        features: &[FeatureSequence],
        seeds: &[u64],
    ) -> Result<Vec<Option<UtteranceLoss>>> {
        let g = ctx.graph;
        let enc = &self.config.encoder;
        if features.len() != seeds.len() {
            return Err(invalid("one seed per utterance is required"));
        }
        let mut kept = Vec::new();
        for (i, (f, &seed)) in features.iter().zip(seeds).enumerate() {
            let (z, valid) = encoder::subsample(ctx, enc, f)?;
            let mask = sample_masks(
                valid,
                &self.config.mask,
                SeedRng::child_seed(seed, "mask", 0),
            )?;
            if mask.len() >= 2 {
                kept.push((i, z, valid, mask, seed));
            }
        }
        let mut out: Vec<Option<UtteranceLoss>> = (0..features.len()).map(|_| None).collect();
        if kept.is_empty() {
            return Ok(out);
        }
        let mask_vector = ctx.p(&format!("{PRETRAIN_HEAD}/mask_embedding"))?;
        let zms = kept
            .iter()
            .map(|(_, z, _, mask, _)| apply_feature_mask(g, *z, mask, mask_vector))
            .collect::<Result<Vec<_>>>()?;
        let valids: Vec<usize> = kept.iter().map(|k| k.2).collect();
        let cs = encoder::context_network_batch(ctx, enc, &zms, &valids)?;
        for ((i, z, _, mask, seed), c) in kept.into_iter().zip(cs) {
            let c = nn::linear(ctx, &format!("{PRETRAIN_HEAD}/context_proj"), c)?;
            let q = nn::linear(ctx, &format!("{PRETRAIN_HEAD}/target_linear"), z)?;
            let r = contrastive_loss(
                g,
                c,
                q,
                &mask,
                &self.config.contrastive,
                SeedRng::child_seed(seed, "distractors", 0),
            )?;
            out[i] = Some(UtteranceLoss {
                loss: r.loss,
                masked: mask.len(),
                with_replacement: r.with_replacement,
            });
        }
        Ok(out)
    }

    /// Encoder parameters only, as consumed by transplanting.
    pub fn encoder_params(&self) -> ParamStore {
        self.params.filtered(encoder::is_pretrainable)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_params(&self.params);
        ck.metadata.insert("kind".into(), "pretrain".into());
        ck.metadata
            .insert("config".into(), serde_json::to_string(&self.config)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.metadata.get("config").ok_or_else(|| Error::Format {
            what: "checkpoint",
            msg: "missing pre-training config".into(),
        })?;
        let config: PretrainConfig = serde_json::from_str(cfg)?;
        config.validate()?;
        let params = ck.params()?;
        for (path, shape) in config.layout().iter() {
            params.get(path)?.expect_shape("checkpoint load", shape)?;
        }
        Ok(PretrainModel { config, params })
    }
}

#[derive(Clone, Debug)]
pub struct PretrainState {
    pub model: PretrainModel,
    pub optimizer: Optimizer,
    pub step: u64,
}

impl PretrainState {
    pub fn new(model: PretrainModel, optimizer: OptimizerConfig) -> Result<Self> {
        Ok(PretrainState {
            model,
            optimizer: Optimizer::new(optimizer)?,
            step: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainStepReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Utterances left out because fewer than two positions were masked.
    pub skipped: usize,
    /// Some utterance needed distractors drawn with replacement.
    pub with_replacement: bool,
}

/// One clipped optimizer step on the mean contrastive loss of `batch`.
/// A non-finite loss or gradient leaves `state` untouched, as does a batch
/// in which every utterance was skipped (reported with a NaN loss).
pub fn pretrain_step(
    state: &mut PretrainState,
    batch: &[FeatureSequence],
    seed: u64,
) -> Result<PretrainStepReport> {
    if batch.is_empty() {
        return Err(invalid("empty pre-training batch"));
    }
    let g = Graph::new();
    let ctx = Ctx::new(&g, &state.model.params, true);
    let seeds: Vec<u64> = (0..batch.len() as u64)
        .map(|i| SeedRng::child_seed(seed, "utterance", i))
        .collect();
    let mut terms = Vec::new();
    let mut skipped = 0;
    let mut with_replacement = false;
    for u in state.model.batch_loss(&ctx, batch, &seeds)? {
        match u {
            Some(u) => {
                with_replacement |= u.with_replacement;
                terms.push(u.loss);
            }
            None => skipped += 1,
        }
    }
    if terms.is_empty() {
        return Ok(PretrainStepReport {
            loss: f64::NAN,
            grad_norm: 0.0,
            lr: state.optimizer.current_lr()?,
            skipped,
            with_replacement,
        });
    }
    let loss = g.scale(g.add_all(&terms)?, 1.0 / terms.len() as f64);
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "pre-training loss {value} at step {}",
            state.step + 1
        )));
    }
    let grads = g.backward(loss)?.into_params();
    if let Some((path, _)) = grads.iter().find(|(_, t)| t.first_non_finite().is_some()) {
        return Err(Error::NonFinite(format!(
            "gradient of {path} at step {}",
            state.step + 1
        )));
    }
    let buffers = ctx.take_buffer_updates();
    drop(ctx);
    let mut params = state.model.params.clone();
    let mut opt = state.optimizer.clone();
    let report = opt.step(&mut params, &grads)?;
    nn::apply_buffer_updates(&mut params, buffers)?;
    state.model.params = params;
    state.optimizer = opt;
    state.step += 1;
    Ok(PretrainStepReport {
        loss: value,
        grad_norm: report.grad_norm,
        lr: report.lr,
        skipped,
        with_replacement,
    })
}

/// Mean loss over `batch` without updating anything.
pub fn pretrain_eval(model: &PretrainModel, batch: &[FeatureSequence], seed: u64) -> Result<f64> {
    let g = Graph::inference();
    let ctx = Ctx::new(&g, &model.params, false);
    let mut total = 0.0;
    let mut n = 0;
    for (i, f) in batch.iter().enumerate() {
        if let Some(u) = model.loss(&ctx, f, SeedRng::child_seed(seed, "utterance", i as u64))? {
            total += g.scalar(u.loss);
            n += 1;
        }
    }
    if n == 0 {
        return Err(invalid("no utterance had two masked positions"));
    }
    Ok(total / n as f64)
}

/// One line of the pre-training dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainManifestEntry {
    pub path: PathBuf,
    pub n_frames: usize,
    pub duration_s: f64,
}
