//! Training loops around the single-step functions, plus dev-set scoring.

use numcore::{OptimizerConfig, SeedRng};
use serde::{Deserialize, Serialize};

use crate::data::LabeledUtterance;
use crate::error::{config, invalid, Error, Result};
use crate::frontend::{sample_chunk, FeatureSequence, SpecAugmentPolicy};
use crate::nst::{MixItem, MixPolicy, MixStream};
use crate::pretrain::{pretrain_step, PretrainModel, PretrainState};
use crate::textkit::{corpus_wer, LanguageModel, TokenizerModel};
use crate::transducer::{
    finetune_step, AsrModel, FineTuneConfig, FineTuneState, FusionParams, GroupSchedule,
    SearchConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainRunConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub grad_norm_cap: f64,
    /// Frames per training crop; 0 keeps whole utterances.
    pub chunk_frames: usize,
}

impl Default for PretrainRunConfig {
    fn default() -> Self {
        PretrainRunConfig {
            steps: 1000,
            batch_size: 8,
            peak_lr: 2e-3,
            warmup_steps: 60,
            grad_norm_cap: 5.0,
            chunk_frames: 0,
        }
    }
}

impl PretrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("pretrain.batch_size", "must be positive"));
        }
        if !(self.peak_lr >= 0.0) || self.warmup_steps == 0 {
            return Err(config(
                "pretrain.peak_lr",
                "needs a non-negative peak and a positive warmup",
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            grad_norm_cap: self.grad_norm_cap,
            ..OptimizerConfig::adam(self.peak_lr, self.warmup_steps)
        }
    }
}

/// Indices in epoch-wise shuffled order, reshuffled when exhausted.
fn epoch_order(n: usize, count: usize, rng: &mut SeedRng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut order: Vec<usize> = Vec::new();
    while out.len() < count {
        if order.is_empty() {
            order = (0..n).collect();
            rng.shuffle(&mut order);
            order.reverse();
        }
        out.push(order.pop().expect("refilled above"));
    }
    out
}

/// Contrastive pre-training on unlabeled features. Returns the trained model
/// and the per-step losses. Steps whose loss or gradient is non-finite are
/// skipped and recorded as NaN.
pub fn run_pretraining(
    model: PretrainModel,
    data: &[FeatureSequence],
    cfg: &PretrainRunConfig,
    seed: u64,
) -> Result<(PretrainModel, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("pre-training needs at least one utterance"));
    }
    let mut state = PretrainState::new(model, cfg.optimizer())?;
    let mut rng = SeedRng::derive(seed, "pretrain_batches");
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch: Vec<FeatureSequence> = epoch_order(data.len(), cfg.batch_size, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                let f = &data[k];
                let crop = sample_chunk(
                    0..f.valid_length,
                    cfg.chunk_frames,
                    SeedRng::child_seed(seed, "chunk", step * cfg.batch_size as u64 + i as u64),
                );
                f.slice(crop)
            })
            .collect::<Result<_>>()?;
        match pretrain_step(
            &mut state,
            &batch,
            SeedRng::child_seed(seed, "pretrain_step", step),
        ) {
            Ok(r) => losses.push(r.loss),
            Err(Error::NonFinite(_)) => losses.push(f64::NAN),
            Err(e) => return Err(e),
        }
    }
    Ok((state.model, losses))
}

/// Fine-tuning budget and optimizer settings. The defaults are sized for
/// the desk-scale synthetic task; [`FineTuneConfig::default`] holds the
/// full-scale schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneRunConfig {
    pub steps: u64,
    /// Batch size for supervised-only training; mixed training takes its
    /// batch size from the mix policy.
    pub batch_size: usize,
    pub encoder: GroupSchedule,
    pub decoder: GroupSchedule,
    pub ema_decay: f64,
    pub spec_augment: Option<SpecAugmentPolicy>,
}

impl Default for FineTuneRunConfig {
    fn default() -> Self {
        FineTuneRunConfig {
            steps: 1500,
            batch_size: 4,
            encoder: GroupSchedule {
                peak_lr: 2e-3,
                warmup_steps: 50,
                grad_norm_cap: 20.0,
            },
            decoder: GroupSchedule {
                peak_lr: 3e-3,
                warmup_steps: 30,
                grad_norm_cap: 20.0,
            },
            ema_decay: 0.98,
            spec_augment: Some(SpecAugmentPolicy {
                n_freq_masks: 1,
                freq_mask_param: 3,
                n_time_masks: 2,
                max_time_ratio: 0.05,
            }),
        }
    }
}

impl FineTuneRunConfig {
    pub fn optim(&self) -> FineTuneConfig {
        FineTuneConfig {
            encoder: self.encoder,
            decoder: self.decoder,
            ema_decay: self.ema_decay,
            spec_augment: self.spec_augment.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneRun {
    /// The EMA weights, used for evaluation and as the next teacher.
    pub model: AsrModel,
    pub losses: Vec<f64>,
}

/// Seed of the batch stream of a fine-tuning run with seed `seed`.
pub fn mix_seed(seed: u64) -> u64 {
    SeedRng::child_seed(seed, "mix", 0)
}

/// Supervised or mixed fine-tuning. With an empty pseudo pool the batches
/// are `batch_size` supervised utterances; otherwise they follow `mix`.
/// Steps with a non-finite loss are skipped and recorded as NaN.
pub fn run_finetune(
    init: AsrModel,
    supervised: &[(FeatureSequence, Vec<u32>)],
    pseudo: &[(FeatureSequence, Vec<u32>)],
    weights: Option<&[f64]>,
    mix: &MixPolicy,
    cfg: &FineTuneRunConfig,
    seed: u64,
) -> Result<FineTuneRun> {
    if cfg.batch_size == 0 {
        return Err(config("finetune.batch_size", "must be positive"));
    }
    let policy = if pseudo.is_empty() {
        MixPolicy {
            mode: crate::nst::MixMode::Batchwise,
            supervised_per_batch: cfg.batch_size,
            pseudo_per_batch: 0,
        }
    } else {
        *mix
    };
    let mut stream = MixStream::new(
        supervised.len(),
        pseudo.len(),
        policy,
        weights,
        mix_seed(seed),
    )?;
    let optim = cfg.optim();
    let mut state = FineTuneState::new(init, &optim)?;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch: Vec<(FeatureSequence, Vec<u32>)> = stream
            .next_batch()
            .into_iter()
            .map(|item| match item {
                MixItem::Supervised(i) => supervised[i].clone(),
                MixItem::Pseudo(i) => pseudo[i].clone(),
            })
            .collect();
        match finetune_step(
            &mut state,
            &batch,
            &optim,
            SeedRng::child_seed(seed, "finetune_step", step),
        ) {
            Ok(l) => losses.push(l),
            Err(Error::NonFinite(_)) => losses.push(f64::NAN),
            Err(e) => return Err(e),
        }
    }
    Ok(FineTuneRun {
        model: state.ema_model(),
        losses,
    })
}

/// Tokenized copies of labeled utterances.
pub fn tokenize_labeled(
    utts: &[LabeledUtterance],
    tokenizer: &TokenizerModel,
) -> Vec<(FeatureSequence, Vec<u32>)> {
    utts.iter()
        .map(|u| (u.features.clone(), tokenizer.encode(&u.text)))
        .collect()
}

/// Decodes every utterance and returns the hypotheses' texts.
pub fn decode_all(
    model: &AsrModel,
    features: &[&FeatureSequence],
    lm: Option<&LanguageModel>,
    fusion: &FusionParams,
    search: &SearchConfig,
    tokenizer: &TokenizerModel,
) -> Result<Vec<String>> {
    features
        .iter()
        .map(|f| Ok(tokenizer.decode(&model.decode(f, lm, fusion, search)?.tokens)))
        .collect()
}

/// Corpus WER of `model` on labeled utterances.
pub fn evaluate_wer(
    model: &AsrModel,
    dev: &[LabeledUtterance],
    lm: Option<&LanguageModel>,
    fusion: &FusionParams,
    search: &SearchConfig,
    tokenizer: &TokenizerModel,
) -> Result<f64> {
    let feats: Vec<&FeatureSequence> = dev.iter().map(|u| &u.features).collect();
    let hyps = decode_all(model, &feats, lm, fusion, search, tokenizer)?;
    corpus_wer(
        dev.iter()
            .zip(&hyps)
            .map(|(u, h)| (u.text.as_str(), h.as_str())),
    )
}
