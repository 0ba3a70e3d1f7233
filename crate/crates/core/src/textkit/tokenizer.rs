//! Word-piece vocabulary learned by greedy pair merges.
//!
//! Words are prefixed with [`WORD_MARK`] so that word boundaries survive
//! tokenization and decoding is a plain concatenation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const BLANK: u32 = 0;
pub const UNK: u32 = 1;
pub const BLANK_PIECE: &str = "<blank>";
pub const UNK_PIECE: &str = "<unk>";
pub const WORD_MARK: char = '\u{2581}';
const HEADER: &str = "#nstasr-wordpiece v1";

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerModel {
    pieces: Vec<String>,
    scores: Vec<f64>,
    /// Merge rules in the order they were learned.
    merges: Vec<(String, String)>,
    index: HashMap<String, u32>,
    rank: HashMap<(String, String), usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    std::iter::once(WORD_MARK)
        .chain(word.chars())
        .map(String::from)
        .collect()
}

/// Replaces every non-overlapping `(left, right)` occurrence, scanning left
/// to right.
fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Learns a vocabulary of at most `vocab_budget` entries (specials and single
/// characters included). Pairs are merged by descending corpus frequency,
/// ties broken by the lexicographically smaller `(left, right)`.
pub fn train_wpm(corpus: &[String], vocab_budget: usize) -> Result<TokenizerModel> {
    if corpus.iter().all(|l| l.split_whitespace().next().is_none()) {
        return Err(invalid("tokenizer corpus is empty"));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> =
        counts.iter().map(|(w, &c)| (word_symbols(w), c)).collect();
    let mut chars: Vec<String> = words
        .iter()
        .flat_map(|(s, _)| s.iter().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    chars.sort();
    let base = 2 + chars.len();
    if vocab_budget < base {
        return Err(invalid(format!(
            "vocab budget {vocab_budget} is smaller than the {base} specials and characters"
        )));
    }
    let mut pieces = vec![BLANK_PIECE.to_string(), UNK_PIECE.to_string()];
    pieces.extend(chars);
    let mut scores = vec![0.0; pieces.len()];
    let mut merges = Vec::new();
    let mut known: std::collections::HashSet<String> = pieces.iter().cloned().collect();
    while pieces.len() < vocab_budget {
        let mut pair_counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pair_counts
                    .entry((w[0].as_str(), w[1].as_str()))
                    .or_default() += c;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let Some(((l, r), _)) =
            pair_counts
                .iter()
                .fold(None::<(&(&str, &str), u64)>, |best, (k, &v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((k, v)),
                })
        else {
            break;
        };
        let (l, r) = (l.to_string(), r.to_string());
        for (syms, _) in &mut words {
            merge_pair(syms, &l, &r);
        }
        let piece = format!("{l}{r}");
        if known.insert(piece.clone()) {
            pieces.push(piece);
            scores.push(-(merges.len() as f64 + 1.0));
        }
        merges.push((l, r));
    }
    TokenizerModel::from_parts(pieces, scores, merges)
}

impl TokenizerModel {
    fn from_parts(
        pieces: Vec<String>,
        scores: Vec<f64>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        if pieces.len() < 2
            || pieces[BLANK as usize] != BLANK_PIECE
            || pieces[UNK as usize] != UNK_PIECE
        {
            return Err(invalid(
                "vocabulary must start with the blank and unknown pieces",
            ));
        }
        let mut index = HashMap::new();
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(invalid(format!("duplicate piece {p:?}")));
            }
        }
        let mut rank = HashMap::new();
        for (i, (l, r)) in merges.iter().enumerate() {
            rank.entry((l.clone(), r.clone())).or_insert(i);
        }
        Ok(TokenizerModel {
            pieces,
            scores,
            merges,
            index,
            rank,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.rank.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(r) = best else { break };
            let (l, rt) = &self.merges[r];
            merge_pair(&mut syms, l, rt);
        }
        syms.iter().map(|s| self.id(s).unwrap_or(UNK)).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// Concatenates pieces, turning word marks into spaces. Blank ids are
    /// skipped and unknown ids render as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == BLANK {
                continue;
            }
            match self.piece(id) {
                Some(p) => s.push_str(p),
                None => s.push_str(UNK_PIECE),
            }
        }
        s.replace(WORD_MARK, " ").trim().to_string()
    }

    /// One entry per line: `piece<TAB>score` for specials and characters,
    /// then one `piece<TAB>score<TAB>left<TAB>right` line per merge in the
    /// order merges were learned. A merge that rebuilds an existing piece
    /// repeats that piece's line with its own parts.
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for (p, s) in self.pieces.iter().zip(&self.scores) {
            if *s == 0.0 {
                out.push_str(&format!("{p}\t{s}\n"));
            }
        }
        for (i, (l, r)) in self.merges.iter().enumerate() {
            out.push_str(&format!("{l}{r}\t{}\t{l}\t{r}\n", -(i as f64 + 1.0)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format {
            what: "tokenizer file",
            msg: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad(1, "missing header"));
        }
        let mut pieces: Vec<String> = Vec::new();
        let mut seen: std::collections::HashSet<String> = std::collections::HashSet::new();
        let mut scores = Vec::new();
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let fields: Vec<&str> = line.split('\t').collect();
            let score: f64 = fields
                .get(1)
                .and_then(|s| s.parse().ok())
                .filter(|s: &f64| s.is_finite())
                .ok_or_else(|| bad(n, "expected piece and finite score"))?;
            let piece = fields[0];
            if piece.is_empty() || piece.chars().any(char::is_whitespace) {
                return Err(bad(n, "empty piece or piece with whitespace"));
            }
            match fields.len() {
                2 => {
                    if !merges.is_empty() {
                        return Err(bad(n, "base piece after merge rules"));
                    }
                    if score != 0.0 {
                        return Err(bad(n, "base pieces carry score 0"));
                    }
                }
                4 => {
                    if format!("{}{}", fields[2], fields[3]) != piece {
                        return Err(bad(n, "merge parts do not concatenate to the piece"));
                    }
                    if !seen.contains(fields[2]) || !seen.contains(fields[3]) {
                        return Err(bad(n, "merge refers to an undefined piece"));
                    }
                    if score >= 0.0 {
                        return Err(bad(n, "merge lines carry negative scores"));
                    }
                    merges.push((fields[2].to_string(), fields[3].to_string()));
                    if seen.contains(piece) {
                        continue;
                    }
                }
                _ => return Err(bad(n, "expected 2 or 4 tab-separated fields")),
            }
            if !seen.insert(piece.to_string()) {
                return Err(bad(n, "duplicate piece"));
            }
            pieces.push(piece.to_string());
            scores.push(score);
        }
        Self::from_parts(pieces, scores, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Unigram token distribution of `lines` (add-`smoothing` counts) over the
    /// full vocabulary, blank and unknown excluded.
    pub fn token_distribution(&self, lines: &[Vec<u32>], smoothing: f64) -> Vec<f64> {
        let mut counts = vec![smoothing; self.vocab_size()];
        counts[BLANK as usize] = 0.0;
        counts[UNK as usize] = 0.0;
        for l in lines {
            for &t in l {
                if let Some(c) = counts.get_mut(t as usize) {
                    *c += 1.0;
                }
            }
        }
        let total: f64 = counts.iter().sum();
        if total > 0.0 {
            counts.iter_mut().for_each(|c| *c /= total);
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_frequent_pair() {
        let tok = train_wpm(&["aaab".into(), "aab".into()], 10).unwrap();
        assert!(tok.id("aa").is_some());
        assert!(tok.vocab_size() <= 10);
    }

    #[test]
    fn text_round_trip() {
        let tok = train_wpm(&["the cat sat".into(), "the hat".into()], 20).unwrap();
        let back = TokenizerModel::from_text(&tok.to_text()).unwrap();
        assert_eq!(back, tok);
    }
}
