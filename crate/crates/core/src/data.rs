//! Utterance manifests: JSONL files whose lines point at feature files and,
//! for labeled splits, carry the transcript.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledUtterance {
    pub features: FeatureSequence,
    pub text: String,
}

/// One manifest line. Unlabeled manifests omit `text`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    /// Feature file, relative to the manifest's directory unless absolute.
    pub features: PathBuf,
    pub n_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Transcript-only line, as produced by decoding or pseudo-labeling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptRecord {
    pub id: String,
    pub text: String,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Parses one value per non-blank line, reporting the first bad line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, what: &'static str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                what,
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    parse_jsonl(&std::fs::read_to_string(path)?, what)
}

fn resolve(manifest: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Writes each utterance's features next to the manifest under `feats/` and
/// the manifest itself. `labeled` controls whether transcripts are kept.
pub fn write_split(manifest: &Path, utts: &[(&FeatureSequence, Option<&str>)]) -> Result<()> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir.join("feats"))?;
    let mut rows = Vec::with_capacity(utts.len());
    for (f, text) in utts {
        let rel = PathBuf::from("feats").join(format!("{}.feat", f.source_id));
        f.save(&dir.join(&rel))?;
        rows.push(UtteranceRecord {
            id: f.source_id.clone(),
            features: rel,
            n_frames: f.n_frames(),
            text: text.map(str::to_string),
        });
    }
    write_jsonl(manifest, &rows)
}

pub fn load_records(manifest: &Path) -> Result<Vec<UtteranceRecord>> {
    read_jsonl(manifest, "utterance manifest")
}

pub fn load_features(manifest: &Path, rec: &UtteranceRecord) -> Result<FeatureSequence> {
    let f = FeatureSequence::load(&resolve(manifest, &rec.features))?;
    if f.source_id != rec.id {
        return Err(Error::Format {
            what: "utterance manifest",
            msg: format!("feature file for {} carries id {}", rec.id, f.source_id),
        });
    }
    Ok(f)
}

pub fn load_labeled(manifest: &Path) -> Result<Vec<LabeledUtterance>> {
    load_records(manifest)?
        .iter()
        .map(|r| {
            let text = r.text.clone().ok_or_else(|| Error::Format {
                what: "utterance manifest",
                msg: format!("utterance {} has no transcript", r.id),
            })?;
            Ok(LabeledUtterance {
                features: load_features(manifest, r)?,
                text,
            })
        })
        .collect()
}

pub fn load_unlabeled(manifest: &Path) -> Result<Vec<FeatureSequence>> {
    load_records(manifest)?
        .iter()
        .map(|r| load_features(manifest, r))
        .collect()
}

#[derive(Deserialize)]
struct AnyTranscript {
    id: String,
    text: Option<String>,
}

/// `(id, text)` pairs from any manifest whose lines carry `id` and `text`:
/// labeled utterance manifests, decode output or pseudo-label files.
pub fn read_transcripts(path: &Path) -> Result<Vec<TranscriptRecord>> {
    read_jsonl::<AnyTranscript>(path, "transcript manifest")?
        .into_iter()
        .map(|r| match r.text {
            Some(text) => Ok(TranscriptRecord { id: r.id, text }),
            None => Err(Error::Format {
                what: "transcript manifest",
                msg: format!("utterance {} has no text", r.id),
            }),
        })
        .collect()
}

/// Corpus WER of `hyp` against `ref`, matched by id. Every reference id must
/// have exactly one hypothesis.
pub fn manifest_wer(reference: &[TranscriptRecord], hyp: &[TranscriptRecord]) -> Result<f64> {
    let mut by_id = std::collections::BTreeMap::new();
    for h in hyp {
        if by_id.insert(h.id.as_str(), h.text.as_str()).is_some() {
            return Err(crate::error::invalid(format!(
                "duplicate hypothesis for {}",
                h.id
            )));
        }
    }
    if by_id.len() != reference.len() {
        return Err(crate::error::invalid(format!(
            "{} hypotheses for {} references",
            by_id.len(),
            reference.len()
        )));
    }
    let pairs = reference
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .map(|h| (r.text.as_str(), *h))
                .ok_or_else(|| crate::error::invalid(format!("no hypothesis for {}", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    crate::textkit::corpus_wer(pairs)
}
