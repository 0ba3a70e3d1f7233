//! Synthetic desk-scale speech task. Words are spelled with a small
//! alphabet; every letter has a fixed spectral signature and each frame of a
//! letter segment is that signature plus noise. Sentences come from a sparse
//! word bigram grammar so a language model has something to learn.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use numcore::{SeedRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{write_jsonl, write_split, LabeledUtterance, TranscriptRecord};
use crate::error::{config, Result};
use crate::frontend::FeatureSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub alphabet: String,
    pub n_words: usize,
    pub word_len: [usize; 2],
    /// Successors per word in the bigram grammar.
    pub branching: usize,
    pub words_per_utterance: [usize; 2],
    pub frames_per_letter: [usize; 2],
    pub gap_frames: [usize; 2],
    pub n_mels: usize,
    /// Standard deviation of additive frame noise.
    pub noise: f64,
    /// Per-utterance standard deviation of a random spectral tilt.
    pub channel_noise: f64,
    /// Seeds the word list, grammar and signatures; fixed across datasets.
    pub signature_seed: u64,
    pub n_supervised: usize,
    pub n_unlabeled: usize,
    pub n_dev: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            alphabet: "abcdefgh".into(),
            n_words: 20,
            word_len: [2, 4],
            branching: 4,
            words_per_utterance: [3, 5],
            frames_per_letter: [3, 5],
            gap_frames: [2, 3],
            n_mels: 16,
            noise: 0.6,
            channel_noise: 0.3,
            signature_seed: 7,
            n_supervised: 50,
            n_unlabeled: 500,
            n_dev: 100,
        }
    }
}

fn check_range(field: &str, r: [usize; 2], min: usize) -> Result<()> {
    if r[0] < min || r[0] > r[1] {
        return Err(config(
            field,
            format!("range {r:?} must satisfy {min} <= lo <= hi"),
        ));
    }
    Ok(())
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let letters: BTreeSet<char> = self.alphabet.chars().collect();
        if letters.len() < 2 || letters.len() != self.alphabet.chars().count() {
            return Err(config(
                "synth.alphabet",
                "need at least two distinct letters",
            ));
        }
        if letters.iter().any(|c| !c.is_alphanumeric()) {
            return Err(config("synth.alphabet", "letters must be alphanumeric"));
        }
        check_range("synth.word_len", self.word_len, 1)?;
        check_range("synth.words_per_utterance", self.words_per_utterance, 1)?;
        check_range("synth.frames_per_letter", self.frames_per_letter, 1)?;
        check_range("synth.gap_frames", self.gap_frames, 1)?;
        if self.n_words < 2 {
            return Err(config("synth.n_words", "need at least two words"));
        }
        if self.branching == 0 || self.branching > self.n_words {
            return Err(config("synth.branching", "must be in 1..=n_words"));
        }
        if self.n_mels < 4 {
            return Err(config("synth.n_mels", "need at least 4 mel bins"));
        }
        if !(self.noise >= 0.0 && self.channel_noise >= 0.0) {
            return Err(config("synth.noise", "noise levels must be non-negative"));
        }
        Ok(())
    }
}

/// Fixed part of the task: words, grammar and letter signatures.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub words: Vec<String>,
    /// `successors[w]` lists the words that may follow word `w`.
    pub successors: Vec<Vec<usize>>,
    pub signatures: HashMap<char, Vec<f64>>,
    /// Frame used between words.
    pub silence: Vec<f64>,
}

/// Two Gaussian bumps at random bins, scaled to a peak of 3.
fn signature(n_mels: usize, rng: &mut SeedRng) -> Vec<f64> {
    let centers = [rng.uniform() * n_mels as f64, rng.uniform() * n_mels as f64];
    let width = 0.6 + rng.uniform() * 1.2;
    let v: Vec<f64> = (0..n_mels)
        .map(|m| {
            centers
                .iter()
                .map(|c| (-(m as f64 - c).powi(2) / (2.0 * width * width)).exp())
                .sum::<f64>()
        })
        .collect();
    let peak = v.iter().cloned().fold(0.0, f64::max);
    v.into_iter().map(|x| 3.0 * x / peak).collect()
}

impl SyntheticTask {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeedRng::derive(spec.signature_seed, "synthetic_task");
        let letters: Vec<char> = spec.alphabet.chars().collect();
        let mut words = Vec::with_capacity(spec.n_words);
        let mut seen = BTreeSet::new();
        let mut attempts = 0;
        while words.len() < spec.n_words {
            attempts += 1;
            if attempts > 100_000 {
                return Err(config(
                    "synth.n_words",
                    "cannot draw that many distinct words from the alphabet",
                ));
            }
            let len = rng.int_inclusive(spec.word_len[0], spec.word_len[1]);
            let mut w = String::new();
            let mut prev = None;
            for _ in 0..len {
                let c = loop {
                    let c = letters[rng.index(letters.len())];
                    if Some(c) != prev {
                        break c;
                    }
                };
                w.push(c);
                prev = Some(c);
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let successors = (0..spec.n_words)
            .map(|_| {
                let mut s = rng.sample_without_replacement(spec.n_words, spec.branching);
                s.sort_unstable();
                s
            })
            .collect();
        let signatures = letters
            .iter()
            .map(|&c| (c, signature(spec.n_mels, &mut rng)))
            .collect();
        Ok(SyntheticTask {
            silence: vec![0.0; spec.n_mels],
            spec,
            words,
            successors,
            signatures,
        })
    }

    pub fn sample_sentence(&self, rng: &mut SeedRng) -> Vec<usize> {
        let [lo, hi] = self.spec.words_per_utterance;
        let n = rng.int_inclusive(lo, hi);
        let mut w = rng.index(self.words.len());
        let mut out = vec![w];
        while out.len() < n {
            let s = &self.successors[w];
            w = s[rng.index(s.len())];
            out.push(w);
        }
        out
    }

    pub fn text(&self, sentence: &[usize]) -> String {
        sentence
            .iter()
            .map(|&w| self.words[w].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Frames for a sentence: a gap, then each word's letter segments
    /// followed by a gap.
    pub fn render(&self, sentence: &[usize], id: &str, seed: u64) -> Result<FeatureSequence> {
        let spec = &self.spec;
        let mut rng = SeedRng::derive(seed, "render");
        let tilt = spec.channel_noise * rng.normal();
        let gain = spec.channel_noise * rng.normal();
        let mut frames: Vec<&[f64]> = Vec::new();
        let gap = |rng: &mut SeedRng| rng.int_inclusive(spec.gap_frames[0], spec.gap_frames[1]);
        for _ in 0..gap(&mut rng) {
            frames.push(&self.silence);
        }
        for &w in sentence {
            for c in self.words[w].chars() {
                let n = rng.int_inclusive(spec.frames_per_letter[0], spec.frames_per_letter[1]);
                for _ in 0..n {
                    frames.push(&self.signatures[&c]);
                }
            }
            for _ in 0..gap(&mut rng) {
                frames.push(&self.silence);
            }
        }
        let m = spec.n_mels;
        let mut data = Vec::with_capacity(frames.len() * m);
        for f in &frames {
            for (b, &v) in f.iter().enumerate() {
                let channel = gain + tilt * (b as f64 / (m - 1) as f64 - 0.5);
                data.push(v + channel + spec.noise * rng.normal());
            }
        }
        let t = frames.len();
        FeatureSequence::new(Tensor::from_vec(&[t, m], data), t, id)
    }

    /// Reference decoder: labels each frame with the nearest signature (or
    /// silence), collapses runs, and maps letter strings back to words.
    pub fn nearest_signature_decode(&self, features: &FeatureSequence) -> String {
        let mut letters: Vec<(char, &Vec<f64>)> =
            self.signatures.iter().map(|(c, s)| (*c, s)).collect();
        letters.sort_by_key(|(c, _)| *c);
        let dist =
            |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut labels: Vec<Option<char>> = Vec::new();
        for t in 0..features.valid_length {
            let row = features.frames.row(t);
            let mut best = (dist(row, &self.silence), None);
            for (c, s) in &letters {
                let d = dist(row, s);
                if d < best.0 {
                    best = (d, Some(*c));
                }
            }
            if labels.last() != Some(&best.1) {
                labels.push(best.1);
            }
        }
        let mut words = Vec::new();
        let mut cur = String::new();
        for l in labels {
            match l {
                Some(c) => cur.push(c),
                None if !cur.is_empty() => words.push(std::mem::take(&mut cur)),
                None => {}
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub supervised: Vec<LabeledUtterance>,
    pub unlabeled: Vec<FeatureSequence>,
    pub dev: Vec<LabeledUtterance>,
    /// Ground truth for the unlabeled set; never written to its manifest.
    pub unlabeled_truth: Vec<String>,
    /// Text of a further sample of grammatical sentences for LM training.
    pub lm_corpus: Vec<String>,
}

/// Draws the three splits. Dev sentences never occur verbatim in the
/// training splits.
pub fn synth_generate(
    spec: &SyntheticTaskSpec,
    seed: u64,
) -> Result<(SyntheticTask, SyntheticDataset)> {
    let task = SyntheticTask::new(spec.clone())?;
    let mut rng = SeedRng::derive(seed, "synth_sentences");
    let render = |prefix: &str, i: usize, s: &[usize]| {
        let id = format!("{prefix}-{i:05}");
        let f = task.render(s, &id, SeedRng::child_seed(seed, prefix, i as u64))?;
        Ok::<_, crate::Error>((f, task.text(s)))
    };
    let mut train_texts = BTreeSet::new();
    let mut supervised = Vec::with_capacity(spec.n_supervised);
    for i in 0..spec.n_supervised {
        let s = task.sample_sentence(&mut rng);
        let (features, text) = render("sup", i, &s)?;
        train_texts.insert(text.clone());
        supervised.push(LabeledUtterance { features, text });
    }
    let mut unlabeled = Vec::with_capacity(spec.n_unlabeled);
    let mut unlabeled_truth = Vec::with_capacity(spec.n_unlabeled);
    for i in 0..spec.n_unlabeled {
        let s = task.sample_sentence(&mut rng);
        let (features, text) = render("unl", i, &s)?;
        train_texts.insert(text.clone());
        unlabeled.push(features);
        unlabeled_truth.push(text);
    }
    let mut dev = Vec::with_capacity(spec.n_dev);
    let mut attempts = 0;
    while dev.len() < spec.n_dev {
        attempts += 1;
        if attempts > 100 * spec.n_dev + 1000 {
            return Err(config(
                "synth.n_dev",
                "grammar too small for a disjoint dev set",
            ));
        }
        let s = task.sample_sentence(&mut rng);
        if train_texts.contains(&task.text(&s)) {
            continue;
        }
        let (features, text) = render("dev", dev.len(), &s)?;
        dev.push(LabeledUtterance { features, text });
    }
    let dev_texts: BTreeSet<&str> = dev.iter().map(|u| u.text.as_str()).collect();
    let mut lm_corpus = Vec::new();
    while lm_corpus.len() < 20 * spec.n_supervised.max(50) {
        let t = task.text(&task.sample_sentence(&mut rng));
        if !dev_texts.contains(t.as_str()) {
            lm_corpus.push(t);
        }
    }
    Ok((
        task,
        SyntheticDataset {
            supervised,
            unlabeled,
            dev,
            unlabeled_truth,
            lm_corpus,
        },
    ))
}

pub const SUPERVISED_MANIFEST: &str = "supervised.jsonl";
pub const UNLABELED_MANIFEST: &str = "unlabeled.jsonl";
pub const DEV_MANIFEST: &str = "dev.jsonl";
pub const LM_CORPUS: &str = "lm_corpus.txt";
/// Kept apart from the unlabeled manifest, for measuring pseudo-label
/// quality only.
pub const UNLABELED_TRUTH: &str = "unlabeled_truth.jsonl";

/// Writes the three manifests with their feature files, the LM text and the
/// unlabeled ground truth into `dir`.
pub fn write_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    fn labeled(u: &[LabeledUtterance]) -> Vec<(&FeatureSequence, Option<&str>)> {
        u.iter()
            .map(|x| (&x.features, Some(x.text.as_str())))
            .collect()
    }
    write_split(&dir.join(SUPERVISED_MANIFEST), &labeled(&ds.supervised))?;
    write_split(&dir.join(DEV_MANIFEST), &labeled(&ds.dev))?;
    let unl: Vec<(&FeatureSequence, Option<&str>)> =
        ds.unlabeled.iter().map(|f| (f, None)).collect();
    write_split(&dir.join(UNLABELED_MANIFEST), &unl)?;
    let truth: Vec<TranscriptRecord> = ds
        .unlabeled
        .iter()
        .zip(&ds.unlabeled_truth)
        .map(|(f, t)| TranscriptRecord {
            id: f.source_id.clone(),
            text: t.clone(),
        })
        .collect();
    write_jsonl(&dir.join(UNLABELED_TRUTH), &truth)?;
    let mut text = ds.lm_corpus.join("\n");
    text.push('\n');
    std::fs::write(dir.join(LM_CORPUS), text)?;
    Ok(())
}
