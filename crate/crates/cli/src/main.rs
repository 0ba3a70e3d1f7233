use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nstasr::ablate::{ablation_table, parse_grid, run_ablation};
use nstasr::data::{load_records, manifest_wer, read_jsonl, read_transcripts, write_jsonl};
use nstasr::experiment::{ExperimentConfig, ModelSize};
use nstasr::nst::{
    balance_stage, filter_stage, load_model, mix_batches, nst_run, pseudo_label_stage,
    pseudo_pairs, train_candidate, weights_for, GenerationManifest, MetricRecord, WeightRecord,
    KEPT_FILE, PSEUDO_FILE, WEIGHTS_FILE,
};
use nstasr::pipeline::{
    finetune_seed, lm_stage, load_data, pretrain_stage, tokenizer_stage, Workspace,
};
use nstasr::synth::{synth_generate, write_dataset};
use nstasr::train::{decode_all, mix_seed};
use nstasr::transducer::{DecodeRecord, FusionParams};
use nstasr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nstasr",
    version,
    about = "Pre-training, fine-tuning and noisy student training for speech recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides as dotted keys, e.g. nst.mix_ratio=1:9.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic supervised, unlabeled and dev splits into --out.
    Synth(Common),
    /// Train the word-piece tokenizer.
    TokenizerTrain(Common),
    /// Train the language model used for fusion and filtering.
    LmTrain(Common),
    /// Contrastive pre-training on the unlabeled split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "small", value_parser = parse_size)]
        size: ModelSize,
    },
    /// Fine-tune a student on supervised data plus optional pseudo-labels.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        generation: usize,
        #[arg(long, default_value = "small", value_parser = parse_size)]
        size: ModelSize,
        /// Pseudo-label file as written by pseudolabel or filter.
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// Sampling weights as written by balance.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Transcribe the unlabeled split with a fused teacher.
    Pseudolabel {
        #[command(flatten)]
        common: Common,
        /// Generation the labels are for; output goes to <out>/gen<N>.
        #[arg(long, default_value_t = 1)]
        generation: usize,
        #[arg(long)]
        teacher: PathBuf,
        /// Fusion parameters: an eval.json or a {lm_weight, nonblank_reward} object.
        #[arg(long)]
        fusion: PathBuf,
    },
    /// Drop the pseudo-labels with the worst length-normalized LM score.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        generation: usize,
        /// Defaults to <out>/gen<N>/pseudo.jsonl.
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// Defaults to nst.filter_fraction.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Weight pseudo-labels towards the supervised token distribution.
    Balance {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        generation: usize,
        /// Defaults to <out>/gen<N>/pseudo_kept.jsonl.
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// Show the composition of the first training batches.
    MixPreview {
        #[command(flatten)]
        common: Common,
        /// Pseudo-label file; its line count sizes the pseudo pool.
        #[arg(long)]
        pseudo: PathBuf,
        /// Generation and size whose fine-tuning stream to reproduce.
        #[arg(long, default_value_t = 1)]
        generation: usize,
        #[arg(long, default_value = "small", value_parser = parse_size)]
        size: ModelSize,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        batches: usize,
    },
    /// Decode a manifest with a trained model.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Fusion parameters; decoding is without the LM when absent.
        #[arg(long)]
        fusion: Option<PathBuf>,
        /// Defaults to <out>/decode.jsonl.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// WER of a hypothesis manifest, or of a model on the dev split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "hyp", conflicts_with = "model")]
        r#ref: Option<PathBuf>,
        #[arg(long, requires = "ref")]
        hyp: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the noisy student loop.
    NstRun {
        #[command(flatten)]
        common: Common,
        /// Defaults to nst.generations.
        #[arg(long)]
        generations: Option<usize>,
    },
    /// Generation-0 runs over a grid of settings, e.g. reduction=2x,4x segment=16,32.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        grid: Vec<String>,
    },
}

fn parse_size(s: &str) -> std::result::Result<ModelSize, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown model size {s:?}"))
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &c.config {
        Some(p) => ExperimentConfig::load(p, &overrides),
        None => ExperimentConfig::parse_at("", &overrides, Path::new(".")),
    }
}

fn out_dir(c: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = c.out.clone().or_else(|| cfg.out.clone()).ok_or_else(|| {
        nstasr::error::config("out", "no output directory; pass --out or set `out`")
    })?;
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

fn setup(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = load_config(c)?;
    let out = out_dir(c, &cfg)?;
    Ok((cfg, out))
}

fn workspace(c: &Common) -> Result<Workspace> {
    let (cfg, out) = setup(c)?;
    Workspace::open(cfg, &out)
}

fn emit(metrics: &[MetricRecord]) -> Result<()> {
    for m in metrics {
        println!("{}", serde_json::to_string(m)?);
    }
    Ok(())
}

fn metric(dataset: &str, metric: &str, value: f64, generation: Option<usize>) -> MetricRecord {
    MetricRecord {
        dataset: dataset.into(),
        metric: metric.into(),
        value,
        generation,
    }
}

fn read_fusion(path: &Path) -> Result<FusionParams> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let v = v.get("fusion").cloned().unwrap_or(v);
    Ok(serde_json::from_value(v)?)
}

fn read_records(path: &Path) -> Result<Vec<DecodeRecord>> {
    read_jsonl(path, "pseudo-label file")
}

fn gen_dir(out: &Path, generation: usize) -> PathBuf {
    out.join(format!("gen{generation}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let (cfg, out) = setup(&c)?;
            let (_, ds) = synth_generate(&cfg.synth, cfg.seed)?;
            write_dataset(&out, &ds)?;
            emit(&[
                metric("supervised", "utterances", ds.supervised.len() as f64, None),
                metric("unlabeled", "utterances", ds.unlabeled.len() as f64, None),
                metric("dev", "utterances", ds.dev.len() as f64, None),
            ])
        }
        Command::TokenizerTrain(c) => {
            let (cfg, out) = setup(&c)?;
            let data = load_data(&cfg)?;
            let tok = tokenizer_stage(&cfg, &data, &out)?;
            emit(&[metric(
                "tokenizer",
                "vocab_size",
                tok.vocab_size() as f64,
                None,
            )])
        }
        Command::LmTrain(c) => {
            let (cfg, out) = setup(&c)?;
            let data = load_data(&cfg)?;
            let tok = tokenizer_stage(&cfg, &data, &out)?;
            let lm = lm_stage(&cfg, &data, &tok, &out)?;
            let dev: Vec<Vec<u32>> = data.dev.iter().map(|u| tok.encode(&u.text)).collect();
            let lp: Vec<f64> = dev
                .iter()
                .map(|t| nstasr::textkit::log_perplexity(&lm, t))
                .collect::<Result<_>>()?;
            let mean = lp.iter().sum::<f64>() / lp.len().max(1) as f64;
            emit(&[metric("dev", "lm_log_perplexity", mean, None)])
        }
        Command::Pretrain { common, size } => {
            let ws = workspace(&common)?;
            match pretrain_stage(&ws, size)? {
                Some((_, path)) => {
                    eprintln!("pre-trained encoder at {}", path.display());
                    Ok(())
                }
                None => Err(nstasr::error::config(
                    "pretrain.enabled",
                    "pre-training is disabled",
                )),
            }
        }
        Command::Finetune {
            common,
            generation,
            size,
            pseudo,
            weights,
        } => {
            let ws = workspace(&common)?;
            let records = match &pseudo {
                Some(p) => read_records(p)?,
                None => Vec::new(),
            };
            let w = match &weights {
                Some(p) => Some(weights_for(
                    &records,
                    &read_jsonl::<WeightRecord>(p, "weights file")?,
                )?),
                None => None,
            };
            let pairs = pseudo_pairs(&ws, &records)?;
            let pretrained = pretrain_stage(&ws, size)?.map(|(m, _)| m);
            let dir = gen_dir(&ws.out, generation).join(size.name());
            let (_, eval) = train_candidate(
                &ws,
                generation,
                size,
                pretrained.as_ref(),
                &pairs,
                w.as_deref(),
                &dir,
            )?;
            eprintln!("student at {}", dir.join("student.ckpt").display());
            emit(&[
                metric("dev", "wer", eval.dev_wer, Some(generation)),
                metric("dev", "wer_fused", eval.dev_wer_fused, Some(generation)),
            ])
        }
        Command::Pseudolabel {
            common,
            generation,
            teacher,
            fusion,
        } => {
            let ws = workspace(&common)?;
            let teacher = load_model(&teacher)?;
            let fusion = read_fusion(&fusion)?;
            let labels = pseudo_label_stage(&ws, &teacher, &fusion, &gen_dir(&ws.out, generation))?;
            for (id, e) in &labels.failures {
                eprintln!("warning: {id} not labeled: {e}");
            }
            emit(&[
                metric(
                    "unlabeled",
                    "pseudo_labels",
                    labels.records.len() as f64,
                    Some(generation),
                ),
                metric(
                    "unlabeled",
                    "pseudo_label_failures",
                    labels.failures.len() as f64,
                    Some(generation),
                ),
            ])
        }
        Command::Filter {
            common,
            generation,
            pseudo,
            fraction,
        } => {
            let ws = workspace(&common)?;
            let dir = gen_dir(&ws.out, generation);
            let records = read_records(&pseudo.unwrap_or_else(|| dir.join(PSEUDO_FILE)))?;
            let fraction = fraction.unwrap_or(ws.cfg.nst.filter_fraction);
            let (kept, fell_back) = if fraction > 0.0 {
                filter_stage(&ws, records, fraction, &dir)?
            } else {
                write_jsonl(&dir.join(KEPT_FILE), &records)?;
                (records, false)
            };
            if fell_back {
                eprintln!(
                    "warning: length normalization degenerate; filtered on raw log-perplexity"
                );
            }
            emit(&[metric(
                "unlabeled",
                "pseudo_labels_kept",
                kept.len() as f64,
                Some(generation),
            )])
        }
        Command::Balance {
            common,
            generation,
            pseudo,
        } => {
            let ws = workspace(&common)?;
            let dir = gen_dir(&ws.out, generation);
            let records = read_records(&pseudo.unwrap_or_else(|| dir.join(KEPT_FILE)))?;
            let w = balance_stage(&ws, &records, generation, &dir)?;
            eprintln!("weights at {}", dir.join(WEIGHTS_FILE).display());
            let max = w.iter().cloned().fold(0.0, f64::max);
            emit(&[metric("unlabeled", "max_weight", max, Some(generation))])
        }
        Command::MixPreview {
            common,
            pseudo,
            generation,
            size,
            weights,
            batches,
        } => {
            let (cfg, out) = setup(&common)?;
            let n_sup = load_records(&cfg.data.supervised)?.len();
            let records = read_records(&pseudo)?;
            let w = match &weights {
                Some(p) => Some(weights_for(
                    &records,
                    &read_jsonl::<WeightRecord>(p, "weights file")?,
                )?),
                None => None,
            };
            let policy = cfg.nst.mix_policy();
            let seed = mix_seed(finetune_seed(cfg.seed, generation, size));
            let b = mix_batches(n_sup, records.len(), policy, w.as_deref(), batches, seed)?;
            write_jsonl(&out.join("mix_preview.jsonl"), &b)?;
            let total: usize = b.iter().map(Vec::len).sum();
            let sup = b
                .iter()
                .flatten()
                .filter(|i| matches!(i, nstasr::nst::MixItem::Supervised(_)))
                .count();
            emit(&[metric(
                "mix",
                "supervised_fraction",
                sup as f64 / total.max(1) as f64,
                None,
            )])
        }
        Command::Decode {
            common,
            model,
            manifest,
            fusion,
            output,
        } => {
            let ws = workspace(&common)?;
            let model = load_model(&model)?;
            let feats = nstasr::data::load_unlabeled(&manifest)?;
            let refs: Vec<&nstasr::frontend::FeatureSequence> = feats.iter().collect();
            let (lm, fusion) = match &fusion {
                Some(p) => (Some(&ws.lm), read_fusion(p)?),
                None => (None, FusionParams::default()),
            };
            let texts = decode_all(
                &model,
                &refs,
                lm,
                &fusion,
                &ws.cfg.nst.search,
                &ws.tokenizer,
            )?;
            let rows: Vec<nstasr::data::TranscriptRecord> = feats
                .iter()
                .zip(texts)
                .map(|(f, text)| nstasr::data::TranscriptRecord {
                    id: f.source_id.clone(),
                    text,
                })
                .collect();
            let path = output.unwrap_or_else(|| ws.out.join("decode.jsonl"));
            write_jsonl(&path, &rows)?;
            eprintln!("hypotheses at {}", path.display());
            Ok(())
        }
        Command::Evaluate {
            common,
            r#ref,
            hyp,
            model,
        } => match (r#ref, hyp, model) {
            (Some(r), Some(h), None) => {
                let wer = manifest_wer(&read_transcripts(&r)?, &read_transcripts(&h)?)?;
                emit(&[metric(&r.display().to_string(), "wer", wer, None)])
            }
            (None, None, Some(m)) => {
                let ws = workspace(&common)?;
                let model = load_model(&m)?;
                let eval = nstasr::pipeline::evaluate_stage(&ws, &model)?;
                let report = nstasr::nst::EvalReport {
                    dev_wer: eval.wer,
                    dev_wer_fused: eval.wer_fused,
                    fusion: eval.fusion,
                };
                std::fs::write(
                    ws.out.join("eval.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
                emit(&[
                    metric("dev", "wer", eval.wer, None),
                    metric("dev", "wer_fused", eval.wer_fused, None),
                ])
            }
            _ => Err(nstasr::error::invalid(
                "evaluate needs either --ref and --hyp, or --model",
            )),
        },
        Command::NstRun {
            common,
            generations,
        } => {
            let ws = workspace(&common)?;
            let n = generations.unwrap_or(ws.cfg.nst.generations);
            let done: Vec<GenerationManifest> = nst_run(&ws, n)?;
            emit(&nstasr::nst::generation_metrics(&done))
        }
        Command::Ablate { common, grid } => {
            let axes = parse_grid(&grid)?;
            let (text, base) = match &common.config {
                Some(p) => (
                    std::fs::read_to_string(p)?,
                    p.parent().unwrap_or(Path::new(".")).to_path_buf(),
                ),
                None => (String::new(), PathBuf::from(".")),
            };
            let mut overrides = common.overrides.clone();
            if let Some(seed) = common.seed {
                overrides.push(format!("seed={seed}"));
            }
            let cfg = ExperimentConfig::parse_at(&text, &overrides, &base)?;
            let out = out_dir(&common, &cfg)?;
            let rows = run_ablation(&text, &base, &overrides, &axes, &out)?;
            write_jsonl(&out.join("ablation.jsonl"), &rows)?;
            std::fs::write(
                out.join("ablation_wer.csv"),
                ablation_table(&axes, &rows, false),
            )?;
            std::fs::write(
                out.join("ablation_wer_fused.csv"),
                ablation_table(&axes, &rows, true),
            )?;
            print!("{}", ablation_table(&axes, &rows, false));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Format { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
