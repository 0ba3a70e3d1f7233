//! File-backed experiment stages. Every stage writes into its own directory
//! under the output root together with a `stage.json` record of the hash of
//! its inputs and of each output file; rerunning a stage whose record
//! matches is a no-op.

use std::path::{Path, PathBuf};

use numcore::{Checkpoint, SeedRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_labeled, load_unlabeled, write_jsonl, LabeledUtterance};
use crate::error::{invalid, Error, Result};
use crate::experiment::{ExperimentConfig, ModelSize};
use crate::frontend::FeatureSequence;
use crate::nst::MixPolicy;
use crate::pretrain::PretrainModel;
use crate::textkit::{train_lm, train_wpm, LanguageModel, TokenizerModel};
use crate::train::{evaluate_wer, run_finetune, run_pretraining, tokenize_labeled};
use crate::transducer::{tune_fusion, AsrModel, FusionParams, TuningRow};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Hash of a value's JSON form.
pub fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    pub input_hash: String,
    /// Output files relative to the stage directory, with their hashes.
    pub outputs: Vec<(PathBuf, String)>,
}

impl StageRecord {
    /// Hash standing for the stage's outputs, used as an input hash
    /// downstream.
    pub fn output_hash(&self) -> Result<String> {
        sha256_json(&self.outputs)
    }
}

fn record_is_current(dir: &Path, stage: &str, input_hash: &str) -> Option<StageRecord> {
    let text = std::fs::read_to_string(dir.join("stage.json")).ok()?;
    let rec: StageRecord = serde_json::from_str(&text).ok()?;
    if rec.stage != stage || rec.input_hash != input_hash {
        return None;
    }
    rec.outputs
        .iter()
        .all(|(p, h)| sha256_file(&dir.join(p)).is_ok_and(|x| &x == h))
        .then_some(rec)
}

/// Runs `produce` in `dir` unless a matching record is already there.
/// `produce` returns the output files it wrote, relative to `dir`.
pub fn cached_stage(
    dir: &Path,
    stage: &str,
    input_hash: &str,
    produce: impl FnOnce(&Path) -> Result<Vec<PathBuf>>,
) -> Result<(StageRecord, bool)> {
    if let Some(rec) = record_is_current(dir, stage, input_hash) {
        return Ok((rec, false));
    }
    std::fs::create_dir_all(dir)?;
    let _ = std::fs::remove_file(dir.join("stage.json"));
    let files = produce(dir)?;
    let outputs = files
        .into_iter()
        .map(|p| {
            let h = sha256_file(&dir.join(&p))?;
            Ok((p, h))
        })
        .collect::<Result<Vec<_>>>()?;
    let rec = StageRecord {
        stage: stage.to_string(),
        input_hash: input_hash.to_string(),
        outputs,
    };
    std::fs::write(dir.join("stage.json"), serde_json::to_string_pretty(&rec)?)?;
    Ok((rec, true))
}

/// The three data splits plus LM text, with hashes of the files they came
/// from.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub supervised: Vec<LabeledUtterance>,
    pub unlabeled: Vec<FeatureSequence>,
    pub dev: Vec<LabeledUtterance>,
    pub lm_text: Vec<String>,
    pub hash: String,
}

fn hash_manifest_and_features(manifest: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(std::fs::read(manifest)?);
    for rec in crate::data::load_records(manifest)? {
        let p = if rec.features.is_absolute() {
            rec.features.clone()
        } else {
            manifest
                .parent()
                .unwrap_or(Path::new("."))
                .join(&rec.features)
        };
        h.update(std::fs::read(p)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let paths = &cfg.data;
    paths.check_exist()?;
    let lm_text = match &paths.lm_corpus {
        Some(p) => std::fs::read_to_string(p)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };
    let mut parts = vec![
        hash_manifest_and_features(&paths.supervised)?,
        hash_manifest_and_features(&paths.unlabeled)?,
        hash_manifest_and_features(&paths.dev)?,
    ];
    parts.push(sha256_json(&lm_text)?);
    let data = LoadedData {
        supervised: load_labeled(&paths.supervised)?,
        unlabeled: load_unlabeled(&paths.unlabeled)?,
        dev: load_labeled(&paths.dev)?,
        lm_text,
        hash: sha256_json(&parts)?,
    };
    if data.supervised.is_empty() || data.dev.is_empty() {
        return Err(invalid("supervised and dev manifests must not be empty"));
    }
    Ok(data)
}

/// Output root plus everything every generation shares.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub data: LoadedData,
    pub tokenizer: TokenizerModel,
    pub lm: LanguageModel,
    /// Hash covering the config, data, tokenizer and LM.
    pub base_hash: String,
}

impl Workspace {
    pub fn open(cfg: ExperimentConfig, out: &Path) -> Result<Self> {
        let data = load_data(&cfg)?;
        let tokenizer = tokenizer_stage(&cfg, &data, out)?;
        let lm = lm_stage(&cfg, &data, &tokenizer, out)?;
        let mut hashed = cfg.clone();
        hashed.out = None;
        hashed.data = Default::default();
        hashed.nst.generations = 0;
        let base_hash = sha256_json(&(
            &hashed,
            &data.hash,
            tokenizer.to_text(),
            sha256_hex(&lm.to_checkpoint()?.to_bytes()),
        ))?;
        Ok(Workspace {
            cfg,
            out: out.to_path_buf(),
            data,
            tokenizer,
            lm,
            base_hash,
        })
    }

    pub fn supervised_tokens(&self) -> Vec<(FeatureSequence, Vec<u32>)> {
        tokenize_labeled(&self.data.supervised, &self.tokenizer)
    }

    pub fn dev_pairs(&self) -> Vec<(FeatureSequence, String)> {
        self.data
            .dev
            .iter()
            .map(|u| (u.features.clone(), u.text.clone()))
            .collect()
    }
}

fn tokenizer_corpus(data: &LoadedData) -> Vec<String> {
    data.supervised
        .iter()
        .map(|u| u.text.clone())
        .chain(data.lm_text.iter().cloned())
        .collect()
}

/// Word-piece model on the supervised transcripts and LM text.
pub fn tokenizer_stage(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    out: &Path,
) -> Result<TokenizerModel> {
    let corpus = tokenizer_corpus(data);
    let hash = sha256_json(&("tokenizer", &cfg.tokenizer, &corpus))?;
    let dir = out.join("tokenizer");
    cached_stage(&dir, "tokenizer", &hash, |d| {
        train_wpm(&corpus, cfg.tokenizer.vocab_budget)?.save(&d.join("tokenizer.txt"))?;
        Ok(vec!["tokenizer.txt".into()])
    })?;
    TokenizerModel::load(&dir.join("tokenizer.txt"))
}

/// Transformer LM on the LM text and supervised transcripts.
pub fn lm_stage(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    tokenizer: &TokenizerModel,
    out: &Path,
) -> Result<LanguageModel> {
    let corpus: Vec<Vec<u32>> = tokenizer_corpus(data)
        .iter()
        .map(|s| tokenizer.encode(s))
        .collect();
    let lm_cfg = cfg.lm_config(tokenizer.vocab_size());
    let hash = sha256_json(&("lm", &lm_cfg, &cfg.lm.train, &corpus, cfg.seed))?;
    let dir = out.join("lm");
    cached_stage(&dir, "lm", &hash, |d| {
        let mut lm =
            LanguageModel::new(lm_cfg.clone(), SeedRng::child_seed(cfg.seed, "lm_init", 0))?;
        let losses = train_lm(
            &mut lm,
            &corpus,
            &cfg.lm.train,
            SeedRng::child_seed(cfg.seed, "lm_train", 0),
        )?;
        lm.to_checkpoint()?.save(&d.join("lm.ckpt"))?;
        write_losses(&d.join("losses.jsonl"), &losses)?;
        Ok(vec!["lm.ckpt".into(), "losses.jsonl".into()])
    })?;
    LanguageModel::from_checkpoint(&Checkpoint::load(&dir.join("lm.ckpt"))?)
}

#[derive(Serialize)]
struct LossLine {
    step: usize,
    loss: Option<f64>,
}

/// Per-step losses as JSONL; non-finite (skipped) steps are written as null.
pub fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let rows: Vec<LossLine> = losses
        .iter()
        .enumerate()
        .map(|(i, &l)| LossLine {
            step: i + 1,
            loss: l.is_finite().then_some(l),
        })
        .collect();
    write_jsonl(path, &rows)
}

/// Contrastive pre-training of one encoder size on the unlabeled split.
/// Returns `None` when pre-training is disabled.
pub fn pretrain_stage(ws: &Workspace, size: ModelSize) -> Result<Option<(PretrainModel, PathBuf)>> {
    if !ws.cfg.pretrain.enabled {
        return Ok(None);
    }
    let size = size.pretrain_source();
    let pcfg = ws.cfg.pretrain_config(size);
    let hash = sha256_json(&(
        "pretrain",
        &pcfg,
        &ws.cfg.pretrain.run,
        &ws.data.hash,
        ws.cfg.seed,
    ))?;
    let dir = ws.out.join("pretrain").join(size.name());
    cached_stage(&dir, "pretrain", &hash, |d| {
        let model = PretrainModel::new(
            pcfg.clone(),
            SeedRng::child_seed(ws.cfg.seed, &format!("pretrain_init/{}", size.name()), 0),
        )?;
        let (model, losses) = run_pretraining(
            model,
            &ws.data.unlabeled,
            &ws.cfg.pretrain.run,
            SeedRng::child_seed(ws.cfg.seed, &format!("pretrain/{}", size.name()), 0),
        )?;
        model.to_checkpoint()?.save(&d.join("pretrain.ckpt"))?;
        write_losses(&d.join("losses.jsonl"), &losses)?;
        Ok(vec!["pretrain.ckpt".into(), "losses.jsonl".into()])
    })?;
    let path = dir.join("pretrain.ckpt");
    Ok(Some((
        PretrainModel::from_checkpoint(&Checkpoint::load(&path)?)?,
        path,
    )))
}

/// Seed for fine-tuning `size` at `generation`.
pub fn finetune_seed(seed: u64, generation: usize, size: ModelSize) -> u64 {
    SeedRng::child_seed(
        seed,
        &format!("finetune/{}", size.name()),
        generation as u64,
    )
}

/// Initializes a student (from the pre-trained encoder when given) and
/// fine-tunes it on the supervised data plus optional pseudo-labels.
#[allow(clippy::too_many_arguments)]
pub fn finetune_stage(
    ws: &Workspace,
    generation: usize,
    size: ModelSize,
    pretrained: Option<&PretrainModel>,
    pseudo: &[(FeatureSequence, Vec<u32>)],
    weights: Option<&[f64]>,
    mix: &MixPolicy,
) -> Result<(AsrModel, Vec<f64>)> {
    let cfg = ws.cfg.model_config(size, ws.tokenizer.vocab_size());
    let seed = finetune_seed(ws.cfg.seed, generation, size);
    let init_seed = SeedRng::child_seed(seed, "init", 0);
    let init = match pretrained {
        Some(p) => AsrModel::from_pretrained(cfg, &p.encoder_params(), init_seed, false)?.0,
        None => AsrModel::new(cfg, init_seed)?,
    };
    let mut run_cfg = ws.cfg.finetune.clone();
    if generation > 0 {
        run_cfg.steps = ws.cfg.nst.student_steps;
    }
    let sup = ws.supervised_tokens();
    let run = run_finetune(init, &sup, pseudo, weights, mix, &run_cfg, seed)?;
    if run.losses.iter().all(|l| !l.is_finite()) && !run.losses.is_empty() {
        return Err(Error::NonFinite("every fine-tuning step diverged".into()));
    }
    Ok((run.model, run.losses))
}

/// Dev WER without LM, then the fusion grid search with the LM.
pub struct DevEvaluation {
    pub wer: f64,
    pub wer_fused: f64,
    pub fusion: FusionParams,
    pub tuning: Vec<TuningRow>,
}

pub fn evaluate_stage(ws: &Workspace, model: &AsrModel) -> Result<DevEvaluation> {
    let search = &ws.cfg.nst.search;
    let wer = evaluate_wer(
        model,
        &ws.data.dev,
        None,
        &FusionParams::default(),
        search,
        &ws.tokenizer,
    )?;
    let grid = ws.cfg.nst.fusion_grid.points();
    let (fusion, tuning) = tune_fusion(
        model,
        Some(&ws.lm),
        &ws.dev_pairs(),
        &grid,
        search,
        &ws.tokenizer,
    )?;
    let wer_fused = tuning
        .iter()
        .find(|r| r.lm_weight == fusion.lm_weight && r.nonblank_reward == fusion.nonblank_reward)
        .map(|r| r.wer)
        .ok_or_else(|| invalid("tuned fusion point missing from its grid"))?;
    Ok(DevEvaluation {
        wer,
        wer_fused,
        fusion,
        tuning,
    })
}
