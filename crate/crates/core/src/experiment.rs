//! Experiment configuration: one TOML file with a section per stage, plus
//! command-line overrides written as dotted keys (`nst.mix_ratio=1:9`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ProjectionBlockConfig, ProjectionKind};
use crate::error::{config, Error, Result};
use crate::frontend::FrontendConfig;
use crate::nst::{BalanceConfig, MixMode, MixPolicy, MixRatio};
use crate::pretrain::{ContrastiveConfig, PretrainConfig, PretrainMaskPolicy};
use crate::synth::SyntheticTaskSpec;
use crate::textkit::{LmConfig, LmTrainConfig};
use crate::train::{FineTuneRunConfig, PretrainRunConfig};
use crate::transducer::{AsrModelConfig, DecoderConfig, FusionParams, SearchConfig};

/// Manifests read by the training commands. Relative paths are taken from
/// the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub supervised: PathBuf,
    pub unlabeled: PathBuf,
    pub dev: PathBuf,
    /// Extra LM training text, one sentence per line.
    pub lm_corpus: Option<PathBuf>,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            supervised: "data/supervised.jsonl".into(),
            unlabeled: "data/unlabeled.jsonl".into(),
            dev: "data/dev.jsonl".into(),
            lm_corpus: Some("data/lm_corpus.txt".into()),
        }
    }
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.supervised);
        fix(&mut self.unlabeled);
        fix(&mut self.dev);
        if let Some(p) = self.lm_corpus.as_mut() {
            fix(p);
        }
    }

    pub fn check_exist(&self) -> Result<()> {
        let mut paths = vec![
            ("data.supervised", &self.supervised),
            ("data.unlabeled", &self.unlabeled),
            ("data.dev", &self.dev),
        ];
        if let Some(p) = &self.lm_corpus {
            paths.push(("data.lm_corpus", p));
        }
        for (field, p) in paths {
            if !p.is_file() {
                return Err(config(field, format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_budget: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { vocab_budget: 24 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    /// `vocab_size` is taken from the tokenizer.
    pub model: LmConfig,
    pub train: LmTrainConfig,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            model: LmConfig {
                model_dim: 32,
                n_heads: 2,
                ..LmConfig::default()
            },
            train: LmTrainConfig::default(),
        }
    }
}

/// Decoder sizes; the vocabulary comes from the tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub n_lstm_layers: usize,
    pub dim: usize,
    pub joint_dim: usize,
}

impl Default for DecoderSection {
    fn default() -> Self {
        DecoderSection {
            n_lstm_layers: 1,
            dim: 32,
            joint_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Off: every generation fine-tunes from random initialization.
    pub enabled: bool,
    pub mask: PretrainMaskPolicy,
    pub contrastive: ContrastiveConfig,
    pub run: PretrainRunConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            enabled: true,
            mask: PretrainMaskPolicy::default(),
            contrastive: ContrastiveConfig::default(),
            run: PretrainRunConfig::default(),
        }
    }
}

/// Model sizes a generation can train. `LargePlus` shares the large
/// encoder and its pre-trained weights but adds the stacking projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    Small,
    Large,
    LargePlus,
}

impl ModelSize {
    pub fn name(self) -> &'static str {
        match self {
            ModelSize::Small => "small",
            ModelSize::Large => "large",
            ModelSize::LargePlus => "large_plus",
        }
    }

    /// The size whose pre-trained checkpoint initializes this one.
    pub fn pretrain_source(self) -> ModelSize {
        match self {
            ModelSize::LargePlus => ModelSize::Large,
            s => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionGrid {
    pub lm_weights: Vec<f64>,
    pub nonblank_rewards: Vec<f64>,
}

impl Default for FusionGrid {
    fn default() -> Self {
        FusionGrid {
            lm_weights: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            nonblank_rewards: vec![0.0, 0.5, 1.0, 1.5],
        }
    }
}

impl FusionGrid {
    pub fn points(&self) -> Vec<FusionParams> {
        self.lm_weights
            .iter()
            .flat_map(|&lm_weight| {
                self.nonblank_rewards
                    .iter()
                    .map(move |&nonblank_reward| FusionParams {
                        lm_weight,
                        nonblank_reward,
                    })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NstSection {
    pub generations: usize,
    /// Model sizes trained at each generation; the last entry repeats.
    /// When a generation trains several, the one with the best fused dev
    /// WER becomes the next teacher.
    pub schedule: Vec<Vec<ModelSize>>,
    pub mix_ratio: MixRatio,
    pub mix_mode: MixMode,
    /// Fraction of pseudo-labels dropped by the LM filter; 0 disables it.
    pub filter_fraction: f64,
    pub balance: bool,
    pub balance_config: BalanceConfig,
    /// Fine-tuning steps for generations after the first, which see more data.
    pub student_steps: u64,
    pub fusion_grid: FusionGrid,
    pub search: SearchConfig,
}

impl Default for NstSection {
    fn default() -> Self {
        NstSection {
            generations: 2,
            schedule: vec![vec![ModelSize::Small]],
            mix_ratio: MixRatio {
                supervised: 1,
                pseudo: 9,
            },
            mix_mode: MixMode::Batchwise,
            filter_fraction: 0.0,
            balance: false,
            balance_config: BalanceConfig::default(),
            student_steps: 2000,
            fusion_grid: FusionGrid::default(),
            search: SearchConfig {
                beam: 2,
                max_symbols_per_frame: 3,
                max_output_len: 64,
            },
        }
    }
}

impl NstSection {
    pub fn sizes_for(&self, generation: usize) -> &[ModelSize] {
        let i = generation.min(self.schedule.len().saturating_sub(1));
        &self.schedule[i]
    }

    pub fn mix_policy(&self) -> MixPolicy {
        match self.mix_mode {
            MixMode::Batchwise => MixPolicy::batchwise(self.mix_ratio),
            MixMode::Pooled => MixPolicy::pooled(self.mix_ratio),
        }
    }
}

fn large_encoder() -> EncoderConfig {
    EncoderConfig {
        n_layers: 3,
        enc_dim: 48,
        subsample_channels: [4, 12],
        ..EncoderConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub synth: SyntheticTaskSpec,
    #[serde(default)]
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "large_encoder")]
    pub encoder_large: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FineTuneRunConfig,
    #[serde(default)]
    pub nst: NstSection,
}

impl ExperimentConfig {
    /// Default settings with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            out: None,
            data: DataPaths::default(),
            synth: SyntheticTaskSpec::default(),
            frontend: FrontendConfig::default(),
            tokenizer: TokenizerSection::default(),
            lm: LmSection::default(),
            encoder: EncoderConfig::default(),
            encoder_large: large_encoder(),
            decoder: DecoderSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FineTuneRunConfig::default(),
            nst: NstSection::default(),
        }
    }

    /// Parses TOML text after applying `key=value` overrides. Data paths stay
    /// as written.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Format {
            what: "config",
            msg: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| {
                let path = e.path().to_string();
                config(
                    if path == "." {
                        "<root>".to_string()
                    } else {
                        path
                    },
                    e.into_inner().message().to_string(),
                )
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths become relative to its
    /// directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_at(&text, overrides, path.parent().unwrap_or(Path::new(".")))
    }

    /// [`parse`](Self::parse), with relative data paths resolved against
    /// `base`.
    pub fn parse_at(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut cfg = Self::parse(text, overrides)?;
        cfg.data.resolve(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let enc = |field: &str, e: &EncoderConfig| {
            e.validate().map_err(|err| match err {
                Error::Config { field: f, msg } => {
                    config(format!("{field}.{}", f.trim_start_matches("encoder.")), msg)
                }
                other => other,
            })
        };
        enc("encoder", &self.encoder)?;
        enc("encoder_large", &self.encoder_large)?;
        if self.encoder.n_mels != self.synth.n_mels
            || self.encoder_large.n_mels != self.synth.n_mels
        {
            return Err(config("encoder.n_mels", "must match synth.n_mels"));
        }
        if self.decoder.n_lstm_layers == 0 || self.decoder.dim == 0 || self.decoder.joint_dim == 0 {
            return Err(config("decoder", "layer count and widths must be positive"));
        }
        self.synth.validate()?;
        self.pretrain.mask.validate()?;
        self.pretrain.contrastive.validate()?;
        self.pretrain.run.validate()?;
        if self.finetune.batch_size == 0 {
            return Err(config("finetune.batch_size", "must be positive"));
        }
        if let Some(p) = &self.finetune.spec_augment {
            p.validate(self.encoder.n_mels)?;
        }
        if self.tokenizer.vocab_budget < 3 {
            return Err(config(
                "tokenizer.vocab_budget",
                "needs room for blank, unknown and one piece",
            ));
        }
        let nst = &self.nst;
        if nst.generations == 0 {
            return Err(config("nst.generations", "must be at least 1"));
        }
        if nst.schedule.is_empty() || nst.schedule.iter().any(|s| s.is_empty()) {
            return Err(config(
                "nst.schedule",
                "every generation needs at least one model size",
            ));
        }
        if !(0.0..1.0).contains(&nst.filter_fraction) {
            return Err(config("nst.filter_fraction", "must lie in [0, 1)"));
        }
        if nst.fusion_grid.points().is_empty() {
            return Err(config("nst.fusion_grid", "grid is empty"));
        }
        nst.search.validate()?;
        Ok(())
    }

    pub fn encoder_for(&self, size: ModelSize) -> &EncoderConfig {
        match size {
            ModelSize::Small => &self.encoder,
            ModelSize::Large | ModelSize::LargePlus => &self.encoder_large,
        }
    }

    pub fn pretrain_config(&self, size: ModelSize) -> PretrainConfig {
        PretrainConfig {
            encoder: self.encoder_for(size.pretrain_source()).clone(),
            mask: self.pretrain.mask,
            contrastive: self.pretrain.contrastive,
        }
    }

    pub fn model_config(&self, size: ModelSize, vocab_size: usize) -> AsrModelConfig {
        let encoder = self.encoder_for(size).clone();
        let kind = if size == ModelSize::LargePlus {
            ProjectionKind::ConformerPlusStack
        } else {
            ProjectionKind::Linear
        };
        AsrModelConfig {
            projection: ProjectionBlockConfig {
                kind,
                out_dim: encoder.enc_dim,
            },
            encoder,
            decoder: DecoderConfig {
                n_lstm_layers: self.decoder.n_lstm_layers,
                dim: self.decoder.dim,
                vocab_size,
                joint_dim: self.decoder.joint_dim,
            },
        }
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            ..self.lm.model.clone()
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a plain string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config(assignment, "override must look like `section.key=value`"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config(key, "empty key segment"));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
