//! The generation loop: fine-tune, tune fusion, label the unlabeled split
//! with the fused model, and train the next student from a fresh
//! pre-trained encoder on the mixture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use numcore::{Checkpoint, SeedRng};
use serde::{Deserialize, Serialize};

use super::stages::{balance, lm_filter, pseudo_label, MixMode, MixRatio, PseudoLabels};
use crate::data::{read_jsonl, write_jsonl};
use crate::error::{invalid, Result};
use crate::experiment::ModelSize;
use crate::frontend::FeatureSequence;
use crate::pipeline::{
    evaluate_stage, finetune_stage, pretrain_stage, sha256_file, sha256_json, write_losses,
    Workspace,
};
use crate::pretrain::PretrainModel;
use crate::transducer::{AsrModel, DecodeRecord, FusionParams};

pub const MANIFEST_FILE: &str = "generations.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const PLOT_FILE: &str = "generation_metrics.csv";

/// One trained model of a generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub model_size: ModelSize,
    /// Relative to the output root.
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub dev_wer: f64,
    pub dev_wer_fused: f64,
    /// Dev-tuned fusion parameters, used when this model teaches.
    pub fusion: FusionParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Completed,
    Failed,
}

/// Record of one generation, one JSON object per line of
/// `generations.jsonl`. Paths are relative to the output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationManifest {
    pub generation: usize,
    pub stage: GenerationStatus,
    /// Stage that failed, with its error.
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub input_hash: String,
    pub teacher_ckpt: Option<PathBuf>,
    pub teacher_fusion: Option<FusionParams>,
    pub pretrained_ckpt: BTreeMap<ModelSize, PathBuf>,
    pub student_ckpt: Option<PathBuf>,
    pub model_size: Option<ModelSize>,
    /// The student's own dev-tuned fusion.
    pub fusion: Option<FusionParams>,
    pub pseudo_manifest: Option<PathBuf>,
    pub n_pseudo: usize,
    pub n_pseudo_failed: usize,
    pub filter_fraction: f64,
    pub filter_fell_back: bool,
    pub balance: bool,
    pub mix_mode: MixMode,
    pub mix_ratio: MixRatio,
    pub dev_wer: Option<f64>,
    pub dev_wer_fused: Option<f64>,
    pub candidates: Vec<CandidateRecord>,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub dataset: String,
    pub metric: String,
    pub value: f64,
    pub generation: Option<usize>,
}

pub fn read_manifests(out: &Path) -> Result<Vec<GenerationManifest>> {
    let p = out.join(MANIFEST_FILE);
    if !p.exists() {
        return Ok(Vec::new());
    }
    read_jsonl(&p, "generation manifest")
}

fn rel(out: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(out)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| p.to_path_buf())
}

/// Stored manifest for `generation` if it completed with this input hash
/// and its student checkpoint is intact.
fn completed(out: &Path, generation: usize, input_hash: &str) -> Option<GenerationManifest> {
    let m = read_manifests(out)
        .ok()?
        .into_iter()
        .find(|m| m.generation == generation)?;
    if m.stage != GenerationStatus::Completed || m.input_hash != input_hash {
        return None;
    }
    let ok = m
        .candidates
        .iter()
        .all(|c| sha256_file(&out.join(&c.checkpoint)).is_ok_and(|h| h == c.checkpoint_sha256));
    ok.then_some(m)
}

/// Replaces (or appends) the manifest line for `m.generation`, dropping any
/// later generations, which were built on an older run of this one.
fn store_manifest(out: &Path, m: &GenerationManifest) -> Result<()> {
    let mut all: Vec<GenerationManifest> = read_manifests(out)?
        .into_iter()
        .filter(|x| x.generation < m.generation)
        .collect();
    all.push(m.clone());
    write_jsonl(&out.join(MANIFEST_FILE), &all)
}

/// Hash of everything a generation depends on.
pub fn generation_input_hash(
    ws: &Workspace,
    generation: usize,
    prev: Option<&GenerationManifest>,
) -> Result<String> {
    sha256_json(&(
        "generation",
        generation,
        &ws.base_hash,
        prev.map(|p| (&p.input_hash, &p.candidates)),
    ))
}

pub fn load_model(path: &Path) -> Result<AsrModel> {
    AsrModel::from_checkpoint(&Checkpoint::load(path)?)
}

/// Runs generation `generation`, reusing the stored result when its inputs
/// are unchanged. A failing stage is recorded in the manifest (earlier
/// artifacts stay on disk) and returned as the error.
pub fn run_generation(
    ws: &Workspace,
    generation: usize,
    prev: Option<&GenerationManifest>,
) -> Result<GenerationManifest> {
    if generation > 0
        && prev.is_none_or(|p| {
            p.stage != GenerationStatus::Completed || p.generation + 1 != generation
        })
    {
        return Err(invalid(format!(
            "generation {generation} needs the completed generation {}",
            generation.wrapping_sub(1)
        )));
    }
    let input_hash = generation_input_hash(ws, generation, prev)?;
    if let Some(m) = completed(&ws.out, generation, &input_hash) {
        return Ok(m);
    }
    let nst = &ws.cfg.nst;
    let mut m = GenerationManifest {
        generation,
        stage: GenerationStatus::Failed,
        failed_stage: None,
        error: None,
        input_hash,
        teacher_ckpt: None,
        teacher_fusion: None,
        pretrained_ckpt: BTreeMap::new(),
        student_ckpt: None,
        model_size: None,
        fusion: None,
        pseudo_manifest: None,
        n_pseudo: 0,
        n_pseudo_failed: 0,
        filter_fraction: if generation > 0 {
            nst.filter_fraction
        } else {
            0.0
        },
        filter_fell_back: false,
        balance: generation > 0 && nst.balance,
        mix_mode: nst.mix_mode,
        mix_ratio: nst.mix_ratio,
        dev_wer: None,
        dev_wer_fused: None,
        candidates: Vec::new(),
    };
    let mut stage = "setup";
    let result = generation_body(ws, prev, &mut m, &mut stage);
    match result {
        Ok(()) => {
            m.stage = GenerationStatus::Completed;
            store_manifest(&ws.out, &m)?;
            Ok(m)
        }
        Err(e) => {
            m.failed_stage = Some(stage.to_string());
            m.error = Some(e.to_string());
            store_manifest(&ws.out, &m)?;
            Err(e)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FilterLine {
    id: String,
    log_perplexity: Option<f64>,
    normalized: Option<f64>,
    kept: bool,
}

/// One line of a weights file written by [`balance_stage`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightRecord {
    pub id: String,
    pub weight: f64,
}

#[derive(Serialize)]
struct FailureLine<'a> {
    id: &'a str,
    error: &'a str,
}

pub const PSEUDO_FILE: &str = "pseudo.jsonl";
pub const KEPT_FILE: &str = "pseudo_kept.jsonl";
pub const WEIGHTS_FILE: &str = "weights.jsonl";

/// Decodes the unlabeled split with the fused teacher and writes
/// `pseudo.jsonl` plus `pseudo_failures.jsonl` into `dir`.
pub fn pseudo_label_stage(
    ws: &Workspace,
    teacher: &AsrModel,
    fusion: &FusionParams,
    dir: &Path,
) -> Result<PseudoLabels> {
    std::fs::create_dir_all(dir)?;
    let labels = pseudo_label(
        teacher,
        Some(&ws.lm),
        fusion,
        &ws.cfg.nst.search,
        &ws.data.unlabeled,
        &ws.tokenizer,
    );
    write_jsonl(&dir.join(PSEUDO_FILE), &labels.records)?;
    let failures: Vec<FailureLine> = labels
        .failures
        .iter()
        .map(|(id, e)| FailureLine { id, error: e })
        .collect();
    write_jsonl(&dir.join("pseudo_failures.jsonl"), &failures)?;
    Ok(labels)
}

/// LM filtering of decoded records. Writes the per-record scores to
/// `filter.jsonl` and the survivors to `pseudo_kept.jsonl`. Returns the
/// survivors and whether the length normalization fell back to raw scores.
pub fn filter_stage(
    ws: &Workspace,
    records: Vec<DecodeRecord>,
    fraction: f64,
    dir: &Path,
) -> Result<(Vec<DecodeRecord>, bool)> {
    std::fs::create_dir_all(dir)?;
    let tokens: Vec<Vec<u32>> = records.iter().map(|r| r.tokens.clone()).collect();
    let f = lm_filter(&tokens, &ws.lm, fraction)?;
    let lines: Vec<FilterLine> = records
        .iter()
        .enumerate()
        .map(|(i, r)| FilterLine {
            id: r.id.clone(),
            log_perplexity: f.log_perplexity[i]
                .is_finite()
                .then_some(f.log_perplexity[i]),
            normalized: f.normalized[i].is_finite().then_some(f.normalized[i]),
            kept: f.kept.binary_search(&i).is_ok(),
        })
        .collect();
    write_jsonl(&dir.join("filter.jsonl"), &lines)?;
    let mut slots: Vec<Option<DecodeRecord>> = records.into_iter().map(Some).collect();
    let kept: Vec<DecodeRecord> = f.kept.iter().filter_map(|&i| slots[i].take()).collect();
    write_jsonl(&dir.join(KEPT_FILE), &kept)?;
    Ok((kept, f.fell_back))
}

/// Seed of the balancing step of `generation`.
pub fn balance_seed(seed: u64, generation: usize) -> u64 {
    SeedRng::child_seed(seed, "balance", generation as u64)
}

/// Sampling weights pulling the records' token distribution towards the
/// supervised transcripts'. Writes `weights.jsonl` and the KL trace.
pub fn balance_stage(
    ws: &Workspace,
    records: &[DecodeRecord],
    generation: usize,
    dir: &Path,
) -> Result<Vec<f64>> {
    std::fs::create_dir_all(dir)?;
    let sup: Vec<Vec<u32>> = ws
        .data
        .supervised
        .iter()
        .map(|u| ws.tokenizer.encode(&u.text))
        .collect();
    let reference = ws.tokenizer.token_distribution(&sup, 0.0);
    let tokens: Vec<Vec<u32>> = records.iter().map(|r| r.tokens.clone()).collect();
    let b = balance(
        &tokens,
        &reference,
        &ws.cfg.nst.balance_config,
        balance_seed(ws.cfg.seed, generation),
    )?;
    let lines: Vec<WeightRecord> = records
        .iter()
        .zip(&b.weights)
        .map(|(r, &weight)| WeightRecord {
            id: r.id.clone(),
            weight,
        })
        .collect();
    write_jsonl(&dir.join(WEIGHTS_FILE), &lines)?;
    write_losses(&dir.join("balance_kl.jsonl"), &b.kl_trace)?;
    Ok(b.weights)
}

/// Features of the unlabeled utterances paired with their pseudo-labels.
pub fn pseudo_pairs(
    ws: &Workspace,
    records: &[DecodeRecord],
) -> Result<Vec<(FeatureSequence, Vec<u32>)>> {
    let by_id: BTreeMap<&str, usize> = ws
        .data
        .unlabeled
        .iter()
        .enumerate()
        .map(|(i, f)| (f.source_id.as_str(), i))
        .collect();
    records
        .iter()
        .map(|r| {
            let i = *by_id
                .get(r.id.as_str())
                .ok_or_else(|| invalid(format!("pseudo-label for unknown utterance {}", r.id)))?;
            Ok((ws.data.unlabeled[i].clone(), r.tokens.clone()))
        })
        .collect()
}

/// Weights from a weights file, in the order of `records`.
pub fn weights_for(records: &[DecodeRecord], weights: &[WeightRecord]) -> Result<Vec<f64>> {
    let by_id: BTreeMap<&str, f64> = weights.iter().map(|w| (w.id.as_str(), w.weight)).collect();
    records
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .copied()
                .ok_or_else(|| invalid(format!("no weight for utterance {}", r.id)))
        })
        .collect()
}

/// Dev-set results of one trained model, as written to `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub dev_wer: f64,
    pub dev_wer_fused: f64,
    pub fusion: FusionParams,
}

/// Fine-tunes and evaluates one student, writing its checkpoint, losses,
/// fusion tuning table and `eval.json` into `dir`.
#[allow(clippy::too_many_arguments)]
pub fn train_candidate(
    ws: &Workspace,
    generation: usize,
    size: ModelSize,
    pretrained: Option<&PretrainModel>,
    pseudo: &[(FeatureSequence, Vec<u32>)],
    weights: Option<&[f64]>,
    dir: &Path,
) -> Result<(AsrModel, EvalReport)> {
    let (model, losses) = finetune_stage(
        ws,
        generation,
        size,
        pretrained,
        pseudo,
        weights,
        &ws.cfg.nst.mix_policy(),
    )?;
    std::fs::create_dir_all(dir)?;
    model.to_checkpoint()?.save(&dir.join("student.ckpt"))?;
    write_losses(&dir.join("finetune_losses.jsonl"), &losses)?;
    let eval = evaluate_stage(ws, &model)?;
    write_jsonl(&dir.join("fusion_tuning.jsonl"), &eval.tuning)?;
    let report = EvalReport {
        dev_wer: eval.wer,
        dev_wer_fused: eval.wer_fused,
        fusion: eval.fusion,
    };
    std::fs::write(
        dir.join("eval.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok((model, report))
}

fn generation_body(
    ws: &Workspace,
    prev: Option<&GenerationManifest>,
    m: &mut GenerationManifest,
    stage: &mut &'static str,
) -> Result<()> {
    let k = m.generation;
    let nst = &ws.cfg.nst;
    let dir = ws.out.join(format!("gen{k}"));
    std::fs::create_dir_all(&dir)?;

    let mut pseudo = Vec::new();
    let mut weights: Option<Vec<f64>> = None;
    if let Some(prev) = prev {
        *stage = "pseudo_label";
        let teacher_path = prev
            .student_ckpt
            .as_ref()
            .ok_or_else(|| invalid("previous generation has no student"))?;
        let fusion = prev
            .fusion
            .ok_or_else(|| invalid("previous generation has no tuned fusion"))?;
        let teacher = load_model(&ws.out.join(teacher_path))?;
        m.teacher_ckpt = Some(teacher_path.clone());
        m.teacher_fusion = Some(fusion);
        let labels = pseudo_label_stage(ws, &teacher, &fusion, &dir)?;
        m.pseudo_manifest = Some(rel(&ws.out, &dir.join(PSEUDO_FILE)));
        m.n_pseudo_failed = labels.failures.len();
        let mut records = labels.records;

        *stage = "lm_filter";
        if nst.filter_fraction > 0.0 {
            let (kept, fell_back) = filter_stage(ws, records, nst.filter_fraction, &dir)?;
            m.filter_fell_back = fell_back;
            records = kept;
        } else {
            write_jsonl(&dir.join(KEPT_FILE), &records)?;
        }

        if nst.balance {
            *stage = "balance";
            weights = Some(balance_stage(ws, &records, k, &dir)?);
        }
        pseudo = pseudo_pairs(ws, &records)?;
        m.n_pseudo = pseudo.len();
    }

    let mut pretrained: BTreeMap<ModelSize, PretrainModel> = BTreeMap::new();
    for &size in nst.sizes_for(k) {
        *stage = "pretrain";
        let src = size.pretrain_source();
        if let std::collections::btree_map::Entry::Vacant(e) = pretrained.entry(src) {
            if let Some((model, path)) = pretrain_stage(ws, src)? {
                m.pretrained_ckpt.insert(src, rel(&ws.out, &path));
                e.insert(model);
            }
        }

        *stage = "finetune";
        let cdir = dir.join(size.name());
        let (_, eval) = train_candidate(
            ws,
            k,
            size,
            pretrained.get(&src),
            &pseudo,
            weights.as_deref(),
            &cdir,
        )?;
        let ckpt = cdir.join("student.ckpt");
        m.candidates.push(CandidateRecord {
            model_size: size,
            checkpoint: rel(&ws.out, &ckpt),
            checkpoint_sha256: sha256_file(&ckpt)?,
            dev_wer: eval.dev_wer,
            dev_wer_fused: eval.dev_wer_fused,
            fusion: eval.fusion,
        });
    }
    let best = m
        .candidates
        .iter()
        .min_by(|a, b| a.dev_wer_fused.total_cmp(&b.dev_wer_fused))
        .ok_or_else(|| invalid("generation trained no model"))?
        .clone();
    m.student_ckpt = Some(best.checkpoint);
    m.model_size = Some(best.model_size);
    m.fusion = Some(best.fusion);
    m.dev_wer = Some(best.dev_wer);
    m.dev_wer_fused = Some(best.dev_wer_fused);
    Ok(())
}

/// Metric lines for a list of generations.
pub fn generation_metrics(manifests: &[GenerationManifest]) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for m in manifests {
        for (metric, v) in [("wer", m.dev_wer), ("wer_fused", m.dev_wer_fused)] {
            if let Some(value) = v {
                out.push(MetricRecord {
                    dataset: "dev".into(),
                    metric: metric.into(),
                    value,
                    generation: Some(m.generation),
                });
            }
        }
    }
    out
}

fn write_plot(path: &Path, manifests: &[GenerationManifest]) -> Result<()> {
    let mut s = String::from("generation,model_size,dev_wer,dev_wer_fused\n");
    for m in manifests {
        for c in &m.candidates {
            s.push_str(&format!(
                "{},{},{},{}\n",
                m.generation,
                c.model_size.name(),
                c.dev_wer,
                c.dev_wer_fused
            ));
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Runs generations `0..n` in order, then writes `metrics.jsonl` and the
/// per-generation plot table.
pub fn nst_run(ws: &Workspace, n: usize) -> Result<Vec<GenerationManifest>> {
    if n == 0 {
        return Err(invalid("at least one generation is required"));
    }
    let mut done: Vec<GenerationManifest> = Vec::with_capacity(n);
    for k in 0..n {
        let m = run_generation(ws, k, done.last())?;
        done.push(m);
    }
    write_jsonl(&ws.out.join(METRICS_FILE), &generation_metrics(&done))?;
    write_plot(&ws.out.join(PLOT_FILE), &done)?;
    Ok(done)
}
