//! Conformer encoder: convolutional subsampling ("feature encoder"), a linear
//! layer plus conformer blocks ("context network"), and the projection block
//! added at fine-tuning.

use std::collections::BTreeSet;
use std::str::FromStr;

use numcore::nn::{self, AttentionSpec, Ctx};
use numcore::{ConvPadding, Init, Layout, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Error, Result};
use crate::frontend::FeatureSequence;

pub const FEATURE_ENCODER: &str = "feature_encoder";
pub const CONTEXT_NETWORK: &str = "context_network";
pub const PROJECTION: &str = "projection";

/// Path prefixes that make up the pre-trainable sub-model.
pub const PRETRAINABLE: [&str; 2] = [FEATURE_ENCODER, CONTEXT_NETWORK];

pub fn is_pretrainable(path: &str) -> bool {
    PRETRAINABLE.iter().any(|p| {
        path.strip_prefix(p)
            .is_some_and(|rest| rest.starts_with('/'))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    L,
    XL,
    XXL,
    #[serde(rename = "XXL+")]
    XXLPlus,
    #[serde(rename = "custom")]
    Custom,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Variant::L),
            "XL" => Ok(Variant::XL),
            "XXL" => Ok(Variant::XXL),
            "XXL+" => Ok(Variant::XXLPlus),
            "custom" => Ok(Variant::Custom),
            _ => Err(invalid(format!("unknown encoder variant {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    #[serde(rename = "2x")]
    X2,
    #[serde(rename = "4x")]
    X4,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2x" => Ok(Reduction::X2),
            "4x" => Ok(Reduction::X4),
            _ => Err(invalid(format!("unknown time reduction {s:?}"))),
        }
    }
}

impl Reduction {
    pub fn output_len(self, t: usize) -> usize {
        match self {
            Reduction::X2 => t.div_ceil(2),
            Reduction::X4 => t.div_ceil(2).div_ceil(2),
        }
    }

    fn min_input(self) -> usize {
        match self {
            Reduction::X2 => 2,
            Reduction::X4 => 4,
        }
    }

    fn second_stride(self) -> (usize, usize) {
        match self {
            Reduction::X2 => (1, 2),
            Reduction::X4 => (2, 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub enc_dim: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub relative_attention: bool,
    /// Clipping distance of the learned relative-position bias.
    pub rel_radius: usize,
    pub time_reduction: Reduction,
    pub n_mels: usize,
    /// Output channels of the two subsampling convolutions.
    pub subsample_channels: [usize; 2],
    pub ff_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::preset(Variant::Custom)
    }
}

impl EncoderConfig {
    /// Table sizes for the named variants; `Custom` is the small desk-scale
    /// encoder used with the synthetic task.
    pub fn preset(variant: Variant) -> Self {
        if variant == Variant::Custom {
            return EncoderConfig {
                variant,
                n_layers: 2,
                enc_dim: 32,
                n_heads: 2,
                conv_kernel: 5,
                relative_attention: false,
                rel_radius: 16,
                time_reduction: Reduction::X2,
                n_mels: 16,
                subsample_channels: [4, 8],
                ff_mult: 2,
            };
        }
        let (n_layers, enc_dim, conv_kernel, relative_attention) = match variant {
            Variant::L => (17, 512, 32, true),
            Variant::XL => (24, 1024, 5, false),
            Variant::XXL | Variant::XXLPlus => (42, 1024, 5, false),
            Variant::Custom => unreachable!("handled above"),
        };
        EncoderConfig {
            variant,
            n_layers,
            enc_dim,
            n_heads: 8,
            conv_kernel,
            relative_attention,
            rel_radius: 64,
            time_reduction: Reduction::X4,
            n_mels: 80,
            subsample_channels: [enc_dim / 4, enc_dim],
            ff_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.enc_dim == 0 {
            return Err(config(
                "encoder.n_layers",
                "encoder needs at least one layer and a positive width",
            ));
        }
        if self.n_heads == 0 || !self.enc_dim.is_multiple_of(self.n_heads) {
            return Err(config(
                "encoder.n_heads",
                format!(
                    "enc_dim {} is not divisible by {} heads",
                    self.enc_dim, self.n_heads
                ),
            ));
        }
        if self.conv_kernel == 0 {
            return Err(config(
                "encoder.conv_kernel",
                "kernel size must be positive",
            ));
        }
        if self.subsample_channels.contains(&0) || self.n_mels == 0 || self.ff_mult == 0 {
            return Err(config(
                "encoder.subsample_channels",
                "channel counts, n_mels and ff_mult must be positive",
            ));
        }
        Ok(())
    }

    /// Frequency extent after the two stride-2 (frequency) convolutions.
    pub fn subsampled_freq(&self) -> usize {
        self.n_mels.div_ceil(2).div_ceil(2)
    }

    /// Width of the feature-encoder output (the vectors that get masked).
    pub fn feature_dim(&self) -> usize {
        self.subsample_channels[1] * self.subsampled_freq()
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.enc_dim,
            n_heads: self.n_heads,
            kernel: self.conv_kernel,
            ff_mult: self.ff_mult,
            rel_radius: self.relative_attention.then_some(self.rel_radius),
            padding: ConvPadding::Zero,
        }
    }

    /// Feature encoder plus context network.
    pub fn layout(&self) -> Layout {
        let mut l = Layout::new();
        let [c1, c2] = self.subsample_channels;
        l.push(
            format!("{FEATURE_ENCODER}/conv1/weight"),
            &[c1, 1, 3, 3],
            Init::FanIn(9),
        );
        l.push(format!("{FEATURE_ENCODER}/conv1/bias"), &[c1], Init::Zeros);
        l.push(
            format!("{FEATURE_ENCODER}/conv2/weight"),
            &[c2, c1, 3, 3],
            Init::FanIn(9 * c1),
        );
        l.push(format!("{FEATURE_ENCODER}/conv2/bias"), &[c2], Init::Zeros);
        nn::linear_layout(
            &mut l,
            &format!("{CONTEXT_NETWORK}/input_linear"),
            self.feature_dim(),
            self.enc_dim,
            true,
        );
        let block = self.block();
        for i in 0..self.n_layers {
            block_layout(&mut l, &format!("{CONTEXT_NETWORK}/block_{i}"), &block);
        }
        l
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionKind {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "conformer_plus_stack")]
    ConformerPlusStack,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionBlockConfig {
    pub kind: ProjectionKind,
    pub out_dim: usize,
}

impl ProjectionBlockConfig {
    pub fn for_variant(variant: Variant, out_dim: usize) -> Self {
        ProjectionBlockConfig {
            kind: if variant == Variant::XXLPlus {
                ProjectionKind::ConformerPlusStack
            } else {
                ProjectionKind::Linear
            },
            out_dim,
        }
    }

    pub fn layout(&self, enc: &EncoderConfig) -> Layout {
        let mut l = Layout::new();
        let mut d_in = enc.enc_dim;
        if self.kind == ProjectionKind::ConformerPlusStack {
            block_layout(&mut l, &format!("{PROJECTION}/block"), &enc.block());
            d_in *= 2;
        }
        nn::linear_layout(
            &mut l,
            &format!("{PROJECTION}/linear"),
            d_in,
            self.out_dim,
            true,
        );
        nn::batch_norm_layout(&mut l, &format!("{PROJECTION}/bn"), self.out_dim);
        l
    }

    /// Time-length factor applied by the projection block.
    pub fn output_len(&self, t: usize) -> usize {
        match self.kind {
            ProjectionKind::Linear => t,
            ProjectionKind::ConformerPlusStack => t.div_ceil(2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub kernel: usize,
    pub ff_mult: usize,
    pub rel_radius: Option<usize>,
    pub padding: ConvPadding,
}

impl BlockConfig {
    fn attention(&self) -> AttentionSpec {
        AttentionSpec {
            n_heads: self.n_heads,
            causal: false,
            rel_radius: self.rel_radius,
            window: None,
        }
    }
}

pub fn block_layout(l: &mut Layout, prefix: &str, cfg: &BlockConfig) {
    let d = cfg.dim;
    for ff in ["ff1", "ff2"] {
        nn::layer_norm_layout(l, &format!("{prefix}/{ff}/ln"), d);
        nn::linear_layout(l, &format!("{prefix}/{ff}/w1"), d, cfg.ff_mult * d, true);
        nn::linear_layout(l, &format!("{prefix}/{ff}/w2"), cfg.ff_mult * d, d, true);
    }
    nn::layer_norm_layout(l, &format!("{prefix}/mhsa/ln"), d);
    nn::attention_layout(l, &format!("{prefix}/mhsa/att"), d, cfg.attention());
    nn::layer_norm_layout(l, &format!("{prefix}/conv/ln"), d);
    nn::linear_layout(l, &format!("{prefix}/conv/pw1"), d, 2 * d, true);
    l.push(
        format!("{prefix}/conv/depthwise/weight"),
        &[cfg.kernel, d],
        Init::FanIn(cfg.kernel),
    );
    l.push(format!("{prefix}/conv/depthwise/bias"), &[d], Init::Zeros);
    nn::batch_norm_layout(l, &format!("{prefix}/conv/bn"), d);
    nn::linear_layout(l, &format!("{prefix}/conv/pw2"), d, d, true);
    nn::layer_norm_layout(l, &format!("{prefix}/final_ln"), d);
}

fn feed_forward(ctx: &Ctx, prefix: &str, x: Var) -> Result<Var> {
    let g = ctx.graph;
    let h = nn::layer_norm(ctx, &format!("{prefix}/ln"), x)?;
    let h = g.swish(nn::linear(ctx, &format!("{prefix}/w1"), h)?);
    Ok(nn::linear(ctx, &format!("{prefix}/w2"), h)?)
}

/// One conformer block on `x[T, dim]` whose first `valid` rows are real.
/// Rows at or beyond `valid` are zero on output.
pub fn conformer_block(
    ctx: &Ctx,
    prefix: &str,
    cfg: &BlockConfig,
    x: Var,
    valid: usize,
) -> Result<Var> {
    Ok(conformer_block_batch(ctx, prefix, cfg, &[x], &[valid])?.remove(0))
}

/// [`conformer_block`] over a batch; the convolution module's batch norm
/// pools its statistics over every sequence's valid rows.
pub fn conformer_block_batch(
    ctx: &Ctx,
    prefix: &str,
    cfg: &BlockConfig,
    xs: &[Var],
    valids: &[usize],
) -> Result<Vec<Var>> {
    let g = ctx.graph;
    let mut mid = Vec::with_capacity(xs.len());
    let mut pre_bn = Vec::with_capacity(xs.len());
    for (&x, &valid) in xs.iter().zip(valids) {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != cfg.dim {
            return Err(invalid(format!(
                "conformer block expects [T, {}], got {shape:?}",
                cfg.dim
            )));
        }
        let t_len = shape[0];
        if valid == 0 || valid > t_len {
            return Err(invalid(format!("valid length {valid} outside 1..={t_len}")));
        }
        let x = g.add(
            x,
            g.scale(feed_forward(ctx, &format!("{prefix}/ff1"), x)?, 0.5),
        )?;

        let h = nn::layer_norm(ctx, &format!("{prefix}/mhsa/ln"), x)?;
        let a = nn::self_attention(
            ctx,
            &format!("{prefix}/mhsa/att"),
            h,
            0..valid,
            cfg.attention(),
        )?;
        let x = g.add(x, a)?;

        let h = nn::layer_norm(ctx, &format!("{prefix}/conv/ln"), x)?;
        let h = g.glu(nn::linear(ctx, &format!("{prefix}/conv/pw1"), h)?)?;
        let h = g.zero_rows_from(h, valid)?;
        let h = g.depthwise_conv1d(
            h,
            ctx.p(&format!("{prefix}/conv/depthwise/weight"))?,
            ctx.p(&format!("{prefix}/conv/depthwise/bias"))?,
            cfg.padding,
        )?;
        mid.push(x);
        pre_bn.push(h);
    }
    let normed = nn::batch_norm_group(ctx, &format!("{prefix}/conv/bn"), &pre_bn, valids)?;
    let mut out = Vec::with_capacity(xs.len());
    for ((x, h), &valid) in mid.into_iter().zip(normed).zip(valids) {
        let h = nn::linear(ctx, &format!("{prefix}/conv/pw2"), g.swish(h))?;
        let x = g.add(x, h)?;

        let x = g.add(
            x,
            g.scale(feed_forward(ctx, &format!("{prefix}/ff2"), x)?, 0.5),
        )?;
        let x = nn::layer_norm(ctx, &format!("{prefix}/final_ln"), x)?;
        out.push(g.zero_rows_from(x, valid)?);
    }
    Ok(out)
}

/// `[T, C] -> [ceil(T/2), 2C]`, concatenating adjacent frames; an odd
/// length gets one zero frame appended first.
pub fn stacking_layer(ctx: &Ctx, x: Var) -> Result<Var> {
    let g = ctx.graph;
    let shape = g.shape(x);
    if shape.len() != 2 {
        return Err(invalid("stacking layer expects a matrix"));
    }
    let (t, c) = (shape[0], shape[1]);
    let x = if t % 2 == 1 {
        g.concat_rows(&[x, g.constant(Tensor::zeros(&[1, c]))])?
    } else {
        x
    };
    Ok(g.reshape(x, &[t.div_ceil(2), 2 * c])?)
}

/// Inverse of [`stacking_layer`] on plain tensors.
pub fn unstack(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || !x.cols().is_multiple_of(2) {
        return Err(invalid("unstack expects [T, 2C]"));
    }
    Ok(x.clone().reshape(vec![x.rows() * 2, x.cols() / 2])?)
}

/// Zeroes time steps `>= valid` of a `[C, T, F]` activation.
fn mask_time(ctx: &Ctx, x: Var, valid: usize) -> Result<Var> {
    let g = ctx.graph;
    let s = g.shape(x);
    if valid >= s[1] {
        return Ok(x);
    }
    let (t, f) = (s[1], s[2]);
    let mask = Tensor::from_fn(&s, |i| if (i / f) % t < valid { 1.0 } else { 0.0 });
    Ok(g.mul(x, g.constant(mask))?)
}

/// Two 3x3 convolutions with ReLU. Returns `[T', C2 * F']` and the
/// subsampled valid length.
pub fn subsample(
    ctx: &Ctx,
    cfg: &EncoderConfig,
    features: &FeatureSequence,
) -> Result<(Var, usize)> {
    let g = ctx.graph;
    let t = features.n_frames();
    if t < cfg.time_reduction.min_input() {
        return Err(invalid(format!(
            "{t} frames is too short for {:?} subsampling",
            cfg.time_reduction
        )));
    }
    if features.n_mels() != cfg.n_mels {
        return Err(invalid(format!(
            "expected {} mel bins, got {}",
            cfg.n_mels,
            features.n_mels()
        )));
    }
    if features.valid_length == 0 {
        return Err(invalid("utterance has no valid frames"));
    }
    let x = g.constant(features.frames.clone().reshape(vec![1, t, cfg.n_mels])?);
    let x = mask_time(ctx, x, features.valid_length)?;
    let p = |n: &str| ctx.p(&format!("{FEATURE_ENCODER}/{n}"));
    let h = g.relu(g.conv2d(x, p("conv1/weight")?, p("conv1/bias")?, (2, 2))?);
    let v1 = features.valid_length.div_ceil(2);
    let h = mask_time(ctx, h, v1)?;
    let stride = cfg.time_reduction.second_stride();
    let h = g.relu(g.conv2d(h, p("conv2/weight")?, p("conv2/bias")?, stride)?);
    let v2 = if stride.0 == 2 { v1.div_ceil(2) } else { v1 };
    let h = mask_time(ctx, h, v2)?;
    let s = g.shape(h);
    let h = g.swap_axes01(h)?;
    let h = g.reshape(h, &[s[1], s[0] * s[2]])?;
    Ok((h, v2))
}

/// Input linear layer followed by the conformer stack.
pub fn context_network(ctx: &Ctx, cfg: &EncoderConfig, z: Var, valid: usize) -> Result<Var> {
    Ok(context_network_batch(ctx, cfg, &[z], &[valid])?.remove(0))
}

pub fn context_network_batch(
    ctx: &Ctx,
    cfg: &EncoderConfig,
    zs: &[Var],
    valids: &[usize],
) -> Result<Vec<Var>> {
    let g = ctx.graph;
    let mut xs = zs
        .iter()
        .zip(valids)
        .map(|(&z, &valid)| {
            g.zero_rows_from(
                nn::linear(ctx, &format!("{CONTEXT_NETWORK}/input_linear"), z)?,
                valid,
            )
        })
        .collect::<numcore::Result<Vec<_>>>()?;
    let block = cfg.block();
    for i in 0..cfg.n_layers {
        xs = conformer_block_batch(
            ctx,
            &format!("{CONTEXT_NETWORK}/block_{i}"),
            &block,
            &xs,
            valids,
        )?;
    }
    Ok(xs)
}

pub fn projection_block(
    ctx: &Ctx,
    enc: &EncoderConfig,
    proj: &ProjectionBlockConfig,
    x: Var,
    valid: usize,
) -> Result<(Var, usize)> {
    let (mut v, mut valids) = projection_block_batch(ctx, enc, proj, &[x], &[valid])?;
    Ok((v.remove(0), valids.remove(0)))
}

pub fn projection_block_batch(
    ctx: &Ctx,
    enc: &EncoderConfig,
    proj: &ProjectionBlockConfig,
    xs: &[Var],
    valids: &[usize],
) -> Result<(Vec<Var>, Vec<usize>)> {
    let g = ctx.graph;
    let (xs, valids): (Vec<Var>, Vec<usize>) = match proj.kind {
        ProjectionKind::Linear => (xs.to_vec(), valids.to_vec()),
        ProjectionKind::ConformerPlusStack => {
            let ys = conformer_block_batch(
                ctx,
                &format!("{PROJECTION}/block"),
                &enc.block(),
                xs,
                valids,
            )?;
            (
                ys.into_iter()
                    .map(|y| stacking_layer(ctx, y))
                    .collect::<Result<_>>()?,
                valids.iter().map(|v| v.div_ceil(2)).collect(),
            )
        }
    };
    let hs = xs
        .iter()
        .map(|&x| nn::linear(ctx, &format!("{PROJECTION}/linear"), x))
        .collect::<numcore::Result<Vec<_>>>()?;
    let hs = nn::batch_norm_group(ctx, &format!("{PROJECTION}/bn"), &hs, &valids)?;
    let out = hs
        .into_iter()
        .zip(&valids)
        .map(|(h, &valid)| g.zero_rows_from(g.swish(h), valid))
        .collect::<numcore::Result<Vec<_>>>()?;
    Ok((out, valids))
}

/// Full fine-tuning encoder: features to projected encodings.
pub fn encode(
    ctx: &Ctx,
    enc: &EncoderConfig,
    proj: &ProjectionBlockConfig,
    features: &FeatureSequence,
) -> Result<(Var, usize)> {
    let (mut v, mut valids) = encode_batch(ctx, enc, proj, std::slice::from_ref(features))?;
    Ok((v.remove(0), valids.remove(0)))
}

/// [`encode`] over a batch, with batch norm statistics shared across it.
pub fn encode_batch(
    ctx: &Ctx,
    enc: &EncoderConfig,
    proj: &ProjectionBlockConfig,
    features: &[FeatureSequence],
) -> Result<(Vec<Var>, Vec<usize>)> {
    let (zs, valids): (Vec<Var>, Vec<usize>) = features
        .iter()
        .map(|f| subsample(ctx, enc, f))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let cs = context_network_batch(ctx, enc, &zs, &valids)?;
    projection_block_batch(ctx, enc, proj, &cs, &valids)
}

/// Which paths a transplant copies and which it leaves freshly initialized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransplantReport {
    pub transplanted: Vec<String>,
    pub fresh: Vec<String>,
    /// Source paths with no counterpart in the target (partial loads only).
    pub dropped: Vec<String>,
}

impl TransplantReport {
    /// Fraction of the source's pre-trainable paths that were copied.
    pub fn pretrainable_coverage(&self, source: &Layout) -> f64 {
        let src: Vec<&str> = source
            .iter()
            .map(|(p, _)| p)
            .filter(|p| is_pretrainable(p))
            .collect();
        if src.is_empty() {
            return 0.0;
        }
        let copied: BTreeSet<&str> = self.transplanted.iter().map(String::as_str).collect();
        src.iter().filter(|p| copied.contains(*p)).count() as f64 / src.len() as f64
    }
}

/// Decides the transplant from shapes alone, so it can be checked on
/// configurations too large to allocate. Pre-trainable paths must match in
/// both directions unless `partial` is set; shapes must always agree.
pub fn plan_transplant(
    source: impl IntoIterator<Item = (String, Vec<usize>)>,
    target: &Layout,
    partial: bool,
) -> Result<TransplantReport> {
    let source: Vec<(String, Vec<usize>)> = source
        .into_iter()
        .filter(|(p, _)| is_pretrainable(p))
        .collect();
    let source_paths: BTreeSet<&str> = source.iter().map(|(p, _)| p.as_str()).collect();
    let mut report = TransplantReport::default();
    for (path, shape) in &source {
        match target.shape_of(path) {
            Some(t) if t == shape.as_slice() => report.transplanted.push(path.clone()),
            Some(t) => {
                return Err(invalid(format!(
                    "shape conflict at {path}: checkpoint {shape:?}, model {t:?}"
                )))
            }
            None if partial => report.dropped.push(path.clone()),
            None => {
                return Err(invalid(format!(
                    "checkpoint path {path} has no counterpart in the model"
                )))
            }
        }
    }
    for (path, _) in target.iter() {
        if source_paths.contains(path) {
            continue;
        }
        if is_pretrainable(path) && !partial {
            return Err(invalid(format!(
                "model path {path} is missing from the checkpoint"
            )));
        }
        report.fresh.push(path.to_string());
    }
    Ok(report)
}

/// Initializes `target` freshly from `seed`, then copies the pre-trained
/// feature encoder and context network from `pretrained`.
pub fn checkpoint_transplant(
    pretrained: &ParamStore,
    target: &Layout,
    seed: u64,
    partial: bool,
) -> Result<(ParamStore, TransplantReport)> {
    let report = plan_transplant(
        pretrained
            .iter()
            .map(|(p, t)| (p.clone(), t.shape().to_vec())),
        target,
        partial,
    )?;
    let mut store = target.instantiate(seed);
    for path in &report.transplanted {
        store.insert(path.clone(), pretrained.get(path)?.clone());
    }
    Ok((store, report))
}

pub fn layout_shapes(l: &Layout) -> Vec<(String, Vec<usize>)> {
    l.iter().map(|(p, s)| (p.to_string(), s.to_vec())).collect()
}
