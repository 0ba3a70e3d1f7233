//! Complete transducer model: training step with separate encoder and decoder
//! optimizers, decoding, fusion tuning and the decode manifest.

use numcore::nn::{self, Ctx};
use numcore::{
    Checkpoint, EmaState, Graph, Optimizer, OptimizerConfig, ParamStore, SeedRng, Tensor, TensorMap,
};
use serde::{Deserialize, Serialize};

use super::loss::rnnt_loss;
use super::network::{self, AsrModelConfig, PredictionNetwork, DECODER};
use super::search::{
    beam_search, fused_score, greedy_decode, FusionParams, Hypothesis, SearchConfig,
};
use crate::encoder::{checkpoint_transplant, TransplantReport};
use crate::error::{invalid, Error, Result};
use crate::frontend::{spec_augment, FeatureSequence, SpecAugmentPolicy};
use crate::textkit::{corpus_wer, LanguageModel, TokenizerModel};

#[derive(Clone, Debug, PartialEq)]
pub struct AsrModel {
    pub config: AsrModelConfig,
    pub params: ParamStore,
}

impl AsrModel {
    pub fn new(config: AsrModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config.layout().instantiate(seed);
        Ok(AsrModel { config, params })
    }

    /// Fresh model whose feature encoder and context network come from a
    /// pre-trained checkpoint.
    pub fn from_pretrained(
        config: AsrModelConfig,
        pretrained: &ParamStore,
        seed: u64,
        partial: bool,
    ) -> Result<(Self, TransplantReport)> {
        config.validate()?;
        let (params, report) = checkpoint_transplant(pretrained, &config.layout(), seed, partial)?;
        Ok((AsrModel { config, params }, report))
    }

    pub fn with_params(&self, params: ParamStore) -> Self {
        AsrModel {
            config: self.config.clone(),
            params,
        }
    }

    pub fn prediction(&self) -> PredictionNetwork<'_> {
        PredictionNetwork {
            params: &self.params,
            config: &self.config.decoder,
        }
    }

    pub fn encoder_projection(&self, features: &FeatureSequence) -> Result<Tensor> {
        network::encoder_joint_projection(&self.params, &self.config, features)
    }

    /// Transducer loss of one utterance on `ctx`'s graph.
    pub fn loss(
        &self,
        ctx: &Ctx,
        features: &FeatureSequence,
        labels: &[u32],
    ) -> Result<numcore::Var> {
        Ok(self
            .batch_loss(ctx, &[(features.clone(), labels.to_vec())])?
            .remove(0))
    }

    /// Per-utterance transducer losses of a batch encoded together, so that
    /// training-mode batch norm sees the whole batch.
    pub fn batch_loss(
        &self,
        ctx: &Ctx,
        batch: &[(FeatureSequence, Vec<u32>)],
    ) -> Result<Vec<numcore::Var>> {
        let features: Vec<FeatureSequence> = batch.iter().map(|(f, _)| f.clone()).collect();
        let encoded = network::encode_valid_batch(ctx, &self.config, &features)?;
        encoded
            .into_iter()
            .zip(batch)
            .map(|((enc, t_len), (features, labels))| {
                if t_len == 0 {
                    return Err(invalid(format!(
                        "utterance {} has no valid encoder frames",
                        features.source_id
                    )));
                }
                let pred = network::predict(ctx, &self.config.decoder, labels)?;
                let lattice = network::joint(ctx, enc, pred)?;
                rnnt_loss(ctx.graph, lattice, t_len, labels)
            })
            .collect()
    }

    pub fn loss_value(&self, features: &FeatureSequence, labels: &[u32]) -> Result<f64> {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &self.params, false);
        let l = self.loss(&ctx, features, labels)?;
        Ok(g.scalar(l))
    }

    pub fn greedy(&self, features: &FeatureSequence, search: &SearchConfig) -> Result<Hypothesis> {
        greedy_decode(
            &self.encoder_projection(features)?,
            &self.prediction(),
            search,
        )
    }

    pub fn decode(
        &self,
        features: &FeatureSequence,
        lm: Option<&LanguageModel>,
        fusion: &FusionParams,
        search: &SearchConfig,
    ) -> Result<Hypothesis> {
        beam_search(
            &self.encoder_projection(features)?,
            &self.prediction(),
            lm,
            fusion,
            search,
        )
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_params(&self.params);
        ck.metadata.insert("kind".into(), "asr".into());
        ck.metadata
            .insert("config".into(), serde_json::to_string(&self.config)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.metadata.get("config").ok_or_else(|| Error::Format {
            what: "checkpoint",
            msg: "missing model config".into(),
        })?;
        let config: AsrModelConfig = serde_json::from_str(cfg)?;
        let params = ck.params()?;
        let layout = config.layout();
        for (path, shape) in layout.iter() {
            params.get(path)?.expect_shape("checkpoint load", shape)?;
        }
        if params.len() != layout.len() {
            return Err(invalid(
                "checkpoint holds parameters the model config does not describe",
            ));
        }
        Ok(AsrModel { config, params })
    }
}

/// Peak learning rate and warmup of one parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub grad_norm_cap: f64,
}

impl GroupSchedule {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            grad_norm_cap: self.grad_norm_cap,
            ..OptimizerConfig::adam(self.peak_lr, self.warmup_steps)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    pub encoder: GroupSchedule,
    pub decoder: GroupSchedule,
    pub ema_decay: f64,
    pub spec_augment: Option<SpecAugmentPolicy>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            encoder: GroupSchedule {
                peak_lr: 3e-4,
                warmup_steps: 5000,
                grad_norm_cap: 20.0,
            },
            decoder: GroupSchedule {
                peak_lr: 1e-3,
                warmup_steps: 1500,
                grad_norm_cap: 20.0,
            },
            ema_decay: 0.9999,
            spec_augment: Some(SpecAugmentPolicy::default()),
        }
    }
}

pub fn is_decoder_param(path: &str) -> bool {
    path.strip_prefix(DECODER)
        .is_some_and(|r| r.starts_with('/'))
}

/// Model plus the two optimizers and the EMA shadow used for evaluation.
#[derive(Clone, Debug)]
pub struct FineTuneState {
    pub model: AsrModel,
    pub encoder_opt: Optimizer,
    pub decoder_opt: Optimizer,
    pub ema: EmaState,
    pub step: u64,
}

impl FineTuneState {
    pub fn new(model: AsrModel, cfg: &FineTuneConfig) -> Result<Self> {
        let ema = EmaState::new(cfg.ema_decay, &model.params)?;
        Ok(FineTuneState {
            encoder_opt: Optimizer::new(cfg.encoder.optimizer())?,
            decoder_opt: Optimizer::new(cfg.decoder.optimizer())?,
            ema,
            model,
            step: 0,
        })
    }

    pub fn ema_model(&self) -> AsrModel {
        self.model.with_params(self.ema.shadow.clone())
    }
}

/// Mean per-utterance loss over `batch` and its parameter gradients, with
/// the batch norm running-statistics updates of the batch.
pub fn batch_gradients(
    model: &AsrModel,
    batch: &[(FeatureSequence, Vec<u32>)],
    augment: Option<&SpecAugmentPolicy>,
    seed: u64,
) -> Result<(f64, TensorMap, Vec<(String, Tensor)>)> {
    if batch.is_empty() {
        return Err(invalid("empty fine-tuning batch"));
    }
    let inputs: Vec<(FeatureSequence, Vec<u32>)> = match augment {
        Some(p) => batch
            .iter()
            .enumerate()
            .map(|(i, (f, y))| {
                Ok((
                    spec_augment(f, p, SeedRng::child_seed(seed, "spec_augment", i as u64))?.0,
                    y.clone(),
                ))
            })
            .collect::<Result<_>>()?,
        None => batch.to_vec(),
    };
    let g = Graph::new();
    let ctx = Ctx::new(&g, &model.params, true);
    let losses = model.batch_loss(&ctx, &inputs)?;
    for ((f, _), &l) in inputs.iter().zip(&losses) {
        if !g.scalar(l).is_finite() {
            return Err(Error::NonFinite(format!(
                "loss of utterance {}",
                f.source_id
            )));
        }
    }
    let loss = g.scale(g.add_all(&losses)?, 1.0 / batch.len() as f64);
    let total = g.scalar(loss);
    let grads = g.backward(loss)?.into_params();
    if let Some((path, _)) = grads.iter().find(|(_, g)| g.first_non_finite().is_some()) {
        return Err(Error::NonFinite(format!("gradient of {path}")));
    }
    Ok((total, grads, ctx.take_buffer_updates()))
}

/// One update: SpecAugment on the inputs, transducer loss, encoder and
/// decoder parameters stepped by their own optimizers, EMA refreshed. Any
/// non-finite loss or gradient leaves the state untouched.
pub fn finetune_step(
    state: &mut FineTuneState,
    batch: &[(FeatureSequence, Vec<u32>)],
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<f64> {
    let (loss, grads, buffers) =
        batch_gradients(&state.model, batch, cfg.spec_augment.as_ref(), seed)?;
    let enc_grads = numcore::optim::split_grads(&grads, |p| !is_decoder_param(p));
    let dec_grads = numcore::optim::split_grads(&grads, is_decoder_param);
    let mut params = state.model.params.clone();
    let (mut enc_opt, mut dec_opt) = (state.encoder_opt.clone(), state.decoder_opt.clone());
    enc_opt.step(&mut params, &enc_grads)?;
    dec_opt.step(&mut params, &dec_grads)?;
    nn::apply_buffer_updates(&mut params, buffers)?;
    if let Some((path, _)) = params.iter().find(|(_, t)| t.first_non_finite().is_some()) {
        return Err(Error::NonFinite(format!("parameter {path} after update")));
    }
    state.model.params = params;
    state.encoder_opt = enc_opt;
    state.decoder_opt = dec_opt;
    state.ema.update(&state.model.params)?;
    state.step += 1;
    Ok(loss)
}

/// One decoded utterance, as consumed by confidence filtering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRecord {
    pub id: String,
    pub text: String,
    pub tokens: Vec<u32>,
    pub asr_logp: f64,
    pub lm_logp: f64,
    pub n_nonblank: usize,
    pub fused_score: f64,
}

impl DecodeRecord {
    pub fn new(
        id: &str,
        hyp: &Hypothesis,
        tokenizer: &TokenizerModel,
        fusion: &FusionParams,
    ) -> Self {
        DecodeRecord {
            id: id.to_string(),
            text: tokenizer.decode(&hyp.tokens),
            tokens: hyp.tokens.clone(),
            asr_logp: hyp.asr_logp,
            lm_logp: hyp.lm_logp,
            n_nonblank: hyp.n_nonblank,
            fused_score: fused_score(hyp, fusion),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub lm_weight: f64,
    pub nonblank_reward: f64,
    pub wer: f64,
}

/// Dev-set WER at every grid point; picks the lowest, ties going to the
/// lexicographically smaller `(λ, β)`.
pub fn tune_fusion(
    model: &AsrModel,
    lm: Option<&LanguageModel>,
    dev: &[(FeatureSequence, String)],
    grid: &[FusionParams],
    search: &SearchConfig,
    tokenizer: &TokenizerModel,
) -> Result<(FusionParams, Vec<TuningRow>)> {
    let encodings = dev
        .iter()
        .map(|(f, _)| model.encoder_projection(f))
        .collect::<Result<Vec<_>>>()?;
    let pred = model.prediction();
    let references: Vec<String> = dev.iter().map(|(_, r)| r.clone()).collect();
    tune_fusion_with(grid, &references, |p, i| {
        let h = beam_search(&encodings[i], &pred, lm, p, search)?;
        Ok(tokenizer.decode(&h.tokens))
    })
}

/// Grid search over fusion parameters given a per-utterance decoder
/// `decode(params, index) -> text`.
pub fn tune_fusion_with(
    grid: &[FusionParams],
    references: &[String],
    mut decode: impl FnMut(&FusionParams, usize) -> Result<String>,
) -> Result<(FusionParams, Vec<TuningRow>)> {
    if grid.is_empty() || references.is_empty() {
        return Err(invalid("fusion tuning needs a non-empty grid and dev set"));
    }
    let mut points = grid.to_vec();
    points.sort_by(|a, b| {
        a.lm_weight
            .total_cmp(&b.lm_weight)
            .then(a.nonblank_reward.total_cmp(&b.nonblank_reward))
    });
    let mut rows = Vec::with_capacity(points.len());
    let mut best: Option<(FusionParams, f64)> = None;
    for p in points {
        let hyps = (0..references.len())
            .map(|i| decode(&p, i))
            .collect::<Result<Vec<_>>>()?;
        let wer = corpus_wer(
            references
                .iter()
                .zip(&hyps)
                .map(|(r, h)| (r.as_str(), h.as_str())),
        )?;
        rows.push(TuningRow {
            lm_weight: p.lm_weight,
            nonblank_reward: p.nonblank_reward,
            wer,
        });
        if best.is_none_or(|(_, w)| wer < w) {
            best = Some((p, wer));
        }
    }
    Ok((best.expect("grid is non-empty").0, rows))
}
