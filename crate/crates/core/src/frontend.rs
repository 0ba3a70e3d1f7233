//! Log-mel features, random segmentation and chunking, and SpecAugment.

use std::ops::Range;
use std::path::Path;

use numcore::checkpoint::Reader;
use numcore::{SeedRng, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            n_mels: 80,
            window_ms: 25.0,
            hop_ms: 10.0,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(invalid("n_mels must be at least 1"));
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.window_ms) {
            return Err(invalid(
                "hop must be positive and no longer than the window",
            ));
        }
        if self.sample_rate == 0 || !(self.log_floor > 0.0) {
            return Err(invalid("sample_rate and log_floor must be positive"));
        }
        if self.window_samples() < 2 {
            return Err(invalid("window shorter than two samples"));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        ((self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize).max(1)
    }

    pub fn n_fft(&self) -> usize {
        self.window_samples().next_power_of_two()
    }
}

/// Time-major `[T, n_mels]` features; rows at or beyond `valid_length` are
/// padding.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor,
    pub valid_length: usize,
    pub source_id: String,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, valid_length: usize, source_id: impl Into<String>) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(invalid("feature frames must be a matrix"));
        }
        if valid_length > frames.rows() {
            return Err(invalid(format!(
                "valid_length {valid_length} exceeds {} frames",
                frames.rows()
            )));
        }
        if let Some(i) = frames.first_non_finite() {
            return Err(Error::NonFinite(format!("feature value at flat index {i}")));
        }
        Ok(FeatureSequence {
            frames,
            valid_length,
            source_id: source_id.into(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }

    /// Copy restricted to frames `range` (all of which become valid up to the
    /// original validity boundary).
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.n_frames() || range.start > range.end {
            return Err(invalid("frame range out of bounds"));
        }
        let d = self.n_mels();
        let data = self.frames.data()[range.start * d..range.end * d].to_vec();
        let valid = self.valid_length.clamp(range.start, range.end) - range.start;
        FeatureSequence::new(
            Tensor::from_vec(&[range.len(), d], data),
            valid,
            self.source_id.clone(),
        )
    }

    /// Appends zero rows up to `total` frames without touching validity.
    pub fn padded_to(&self, total: usize) -> Self {
        let d = self.n_mels();
        let mut data = self.frames.data().to_vec();
        data.resize(total.max(self.n_frames()) * d, 0.0);
        FeatureSequence {
            frames: Tensor::from_vec(&[data.len() / d.max(1), d], data),
            valid_length: self.valid_length,
            source_id: self.source_id.clone(),
        }
    }
}

pub const FEATURE_MAGIC: &[u8; 8] = b"NSTFEAT1";

impl FeatureSequence {
    /// Binary layout: magic, u32 n_mels, u32 T, u32 valid_length, u32 id
    /// length, id bytes, then `T * n_mels` little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.source_id.len() + 8 * self.frames.numel());
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [
            self.n_mels(),
            self.n_frames(),
            self.valid_length,
            self.source_id.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(self.source_id.as_bytes());
        for x in self.frames.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            what: "feature file",
            msg,
        };
        let mut r = Reader::new(bytes);
        if r.take(8).map_err(|e| bad(e.to_string()))? != FEATURE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let n_mels = r.u32()? as usize;
        let t = r.u32()? as usize;
        let valid = r.u32()? as usize;
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| bad("source id is not UTF-8".into()))?
            .to_string();
        let numel = n_mels
            .checked_mul(t)
            .ok_or_else(|| bad("size overflow".into()))?;
        if n_mels == 0 {
            return Err(bad("zero mel bins".into()));
        }
        if numel.saturating_mul(8) != r.remaining() {
            return Err(bad(format!(
                "payload has {} bytes, header implies {}",
                r.remaining(),
                numel.saturating_mul(8)
            )));
        }
        let data = (0..numel)
            .map(|_| r.f64())
            .collect::<numcore::Result<Vec<f64>>>()?;
        FeatureSequence::new(Tensor::from_vec(&[t, n_mels], data), valid, id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` triangular filters, spaced
/// evenly on the mel scale between 0 and Nyquist.
pub fn mel_centers(config: &FrontendConfig) -> Vec<f64> {
    let top = hz_to_mel(config.sample_rate as f64 / 2.0);
    (1..=config.n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (config.n_mels + 1) as f64))
        .collect()
}

/// Triangular filters with unit peak, `[n_mels, n_fft/2 + 1]`.
pub fn mel_filterbank(config: &FrontendConfig) -> Tensor {
    let n_fft = config.n_fft();
    let n_bins = n_fft / 2 + 1;
    let top = hz_to_mel(config.sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = config.sample_rate as f64 / n_fft as f64;
    Tensor::from_fn(&[config.n_mels, n_bins], |idx| {
        let (m, k) = (idx / n_bins, idx % n_bins);
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    })
}

/// Number of frames produced for `n_samples` of audio.
pub fn frame_count(n_samples: usize, config: &FrontendConfig) -> usize {
    let win = config.window_samples();
    if n_samples <= win {
        1
    } else {
        (n_samples - win) / config.hop_samples() + 1
    }
}

/// Hann-windowed power spectrum projected onto the mel filterbank, then
/// `ln(max(energy, log_floor))`. Audio shorter than one window yields a
/// single zero-padded frame.
pub fn log_mel(
    waveform: &[f64],
    config: &FrontendConfig,
    source_id: &str,
) -> Result<FeatureSequence> {
    config.validate()?;
    if waveform.is_empty() {
        return Err(invalid("empty waveform"));
    }
    let win = config.window_samples();
    let hop = config.hop_samples();
    let n_fft = config.n_fft();
    let n_bins = n_fft / 2 + 1;
    let t = frame_count(waveform.len(), config);
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos())
        .collect();
    let bank = mel_filterbank(config);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut out = Vec::with_capacity(t * config.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_bins];
    for f in 0..t {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = if i < win {
                waveform.get(start + i).copied().unwrap_or(0.0) * hann[i]
            } else {
                0.0
            };
            *b = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..config.n_mels {
            let e: f64 = bank.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(config.log_floor).ln());
        }
    }
    FeatureSequence::new(Tensor::from_vec(&[t, config.n_mels], out), t, source_id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationPolicy {
    pub min_len: f64,
    pub max_len: f64,
    pub chunk_len: f64,
}

impl Default for SegmentationPolicy {
    fn default() -> Self {
        SegmentationPolicy {
            min_len: 32.0,
            max_len: 64.0,
            chunk_len: 32.0,
        }
    }
}

impl SegmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_len > 0.0
            && self.min_len <= self.max_len
            && self.chunk_len > 0.0
            && self.chunk_len <= self.max_len)
        {
            return Err(invalid(
                "segmentation requires 0 < min_len <= max_len and 0 < chunk_len <= max_len",
            ));
        }
        Ok(())
    }
}

/// Cuts `len` units (samples or frames at `units_per_second`) into
/// consecutive segments. Every segment but the last is between `min_len`
/// and `max_len` seconds long; the last is whatever remains once at most
/// `max_len` is left.
pub fn random_segment(
    len: usize,
    units_per_second: f64,
    policy: &SegmentationPolicy,
    seed: u64,
) -> Result<Vec<Range<usize>>> {
    policy.validate()?;
    let lo = ((policy.min_len * units_per_second).ceil() as usize).max(1);
    let hi = (policy.max_len * units_per_second).floor() as usize;
    if hi < lo {
        return Err(invalid("segment length range is empty at this resolution"));
    }
    let mut rng = SeedRng::derive(seed, "random_segment");
    let mut out = Vec::new();
    let mut pos = 0;
    while len - pos > hi {
        let n = rng.int_inclusive(lo, hi);
        out.push(pos..pos + n);
        pos += n;
    }
    if pos < len || out.is_empty() {
        out.push(pos..len);
    }
    Ok(out)
}

/// Uniformly positioned window of `chunk` units, or the whole segment when
/// it is shorter.
pub fn sample_chunk(segment: Range<usize>, chunk: usize, seed: u64) -> Range<usize> {
    if chunk == 0 || segment.len() <= chunk {
        return segment;
    }
    let mut rng = SeedRng::derive(seed, "sample_chunk");
    let offset = rng.int_inclusive(0, segment.len() - chunk);
    segment.start + offset..segment.start + offset + chunk
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugmentPolicy {
    pub n_freq_masks: usize,
    /// Largest frequency-mask width in bins.
    pub freq_mask_param: usize,
    pub n_time_masks: usize,
    /// Largest time-mask width as a fraction of the valid length.
    pub max_time_ratio: f64,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        SpecAugmentPolicy {
            n_freq_masks: 2,
            freq_mask_param: 27,
            n_time_masks: 10,
            max_time_ratio: 0.05,
        }
    }
}

impl SpecAugmentPolicy {
    pub fn validate(&self, n_mels: usize) -> Result<()> {
        if self.freq_mask_param > n_mels {
            return Err(invalid(format!(
                "frequency mask parameter {} exceeds {n_mels} bins",
                self.freq_mask_param
            )));
        }
        if !(0.0..=1.0).contains(&self.max_time_ratio) {
            return Err(invalid("time-mask ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn max_time_width(&self, valid_length: usize) -> usize {
        (self.max_time_ratio * valid_length as f64).floor() as usize
    }
}

/// Mask spans drawn for one utterance, with the seed that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentMasks {
    pub seed: u64,
    pub freq: Vec<Range<usize>>,
    pub time: Vec<Range<usize>>,
}

pub fn sample_augment_masks(
    n_mels: usize,
    valid_length: usize,
    policy: &SpecAugmentPolicy,
    seed: u64,
) -> Result<AugmentMasks> {
    policy.validate(n_mels)?;
    let mut rng = SeedRng::derive(seed, "spec_augment");
    let mut freq = Vec::with_capacity(policy.n_freq_masks);
    for _ in 0..policy.n_freq_masks {
        let w = rng.int_inclusive(0, policy.freq_mask_param);
        let s = rng.int_inclusive(0, n_mels - w);
        freq.push(s..s + w);
    }
    let max_w = policy.max_time_width(valid_length);
    let mut time = Vec::with_capacity(policy.n_time_masks);
    for _ in 0..policy.n_time_masks {
        let w = rng.int_inclusive(0, max_w);
        let s = rng.int_inclusive(0, valid_length - w);
        time.push(s..s + w);
    }
    Ok(AugmentMasks { seed, freq, time })
}

/// Zeroes the sampled frequency bands and time spans inside the valid
/// region; everything else is left bit-identical.
pub fn spec_augment(
    features: &FeatureSequence,
    policy: &SpecAugmentPolicy,
    seed: u64,
) -> Result<(FeatureSequence, AugmentMasks)> {
    let masks = sample_augment_masks(features.n_mels(), features.valid_length, policy, seed)?;
    let mut out = features.clone();
    let d = features.n_mels();
    let data = out.frames.data_mut();
    for band in &masks.freq {
        for t in 0..features.valid_length {
            data[t * d + band.start..t * d + band.end].fill(0.0);
        }
    }
    for span in &masks.time {
        data[span.start * d..span.end * d].fill(0.0);
    }
    Ok((out, masks))
}

/// Probability that index `j` of `n` is covered by one mask whose width is
/// uniform on `0..=max_w` and whose start is uniform over valid positions.
pub fn single_mask_coverage(n: usize, max_w: usize, j: usize) -> f64 {
    let mut p = 0.0;
    for w in 0..=max_w.min(n) {
        let starts = n - w + 1;
        let lo = (j + 1).saturating_sub(w);
        let hi = j.min(n - w);
        if w > 0 && hi >= lo {
            p += (hi - lo + 1) as f64 / starts as f64;
        }
    }
    p / (max_w.min(n) + 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_of_full_width_mask() {
        // width in {0, 1} on 1 cell: covered half the time
        assert!((single_mask_coverage(1, 1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn chunk_of_short_segment_is_whole() {
        assert_eq!(sample_chunk(5..35, 32, 1), 5..35);
        assert_eq!(sample_chunk(0..64, 32, 1).len(), 32);
    }
}
