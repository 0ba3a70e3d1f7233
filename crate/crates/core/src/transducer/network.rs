//! Prediction network (embedding + LSTM stack) and joint network.

use numcore::nn::{self, Ctx};
use numcore::tensor::log_sum_exp;
use numcore::{Graph, Init, Layout, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, ProjectionBlockConfig};
use crate::error::{config, Result};
use crate::frontend::FeatureSequence;
use crate::textkit::BLANK;

pub const DECODER: &str = "decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_lstm_layers: usize,
    pub dim: usize,
    /// Output vocabulary including blank.
    pub vocab_size: usize,
    pub joint_dim: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lstm_layers == 0 || self.dim == 0 || self.joint_dim == 0 {
            return Err(config(
                "decoder.dim",
                "decoder needs at least one layer and positive widths",
            ));
        }
        if self.vocab_size < 2 {
            return Err(config(
                "decoder.vocab_size",
                "vocabulary must contain blank and one token",
            ));
        }
        Ok(())
    }

    /// Prediction and joint networks; the joint's encoder-side input is
    /// `enc_out` wide.
    pub fn layout(&self, enc_out: usize) -> Layout {
        let mut l = Layout::new();
        l.push(
            format!("{DECODER}/embedding"),
            &[self.vocab_size, self.dim],
            Init::Normal(1.0),
        );
        for i in 0..self.n_lstm_layers {
            nn::lstm_layout(&mut l, &format!("{DECODER}/lstm_{i}"), self.dim, self.dim);
        }
        nn::linear_layout(
            &mut l,
            &format!("{DECODER}/joint/enc"),
            enc_out,
            self.joint_dim,
            true,
        );
        nn::linear_layout(
            &mut l,
            &format!("{DECODER}/joint/pred"),
            self.dim,
            self.joint_dim,
            false,
        );
        nn::linear_layout(
            &mut l,
            &format!("{DECODER}/joint/output"),
            self.joint_dim,
            self.vocab_size,
            true,
        );
        l
    }
}

/// Encoder, projection block and decoder together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrModelConfig {
    pub encoder: EncoderConfig,
    pub projection: ProjectionBlockConfig,
    pub decoder: DecoderConfig,
}

impl AsrModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.projection.out_dim == 0 {
            return Err(config("projection.out_dim", "must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let mut l = self.encoder.layout();
        l.extend(self.projection.layout(&self.encoder));
        l.extend(self.decoder.layout(self.projection.out_dim));
        l
    }
}

/// Prediction-network outputs `[U+1, dim]` for the label prefix inputs
/// `[blank, y_1, ..., y_U]`.
pub fn predict(ctx: &Ctx, cfg: &DecoderConfig, labels: &[u32]) -> Result<Var> {
    let g = ctx.graph;
    let mut inputs = vec![BLANK as usize];
    inputs.extend(labels.iter().map(|&y| y as usize));
    let emb = g.gather_rows(ctx.p(&format!("{DECODER}/embedding"))?, &inputs)?;
    let mut h: Vec<Var> = (0..cfg.n_lstm_layers)
        .map(|_| g.constant(Tensor::zeros(&[1, cfg.dim])))
        .collect();
    let mut c = h.clone();
    let mut outs = Vec::with_capacity(inputs.len());
    for u in 0..inputs.len() {
        let mut x = g.slice_rows(emb, u, u + 1)?;
        for l in 0..cfg.n_lstm_layers {
            let (hn, cn) = nn::lstm_cell(ctx, &format!("{DECODER}/lstm_{l}"), x, h[l], c[l])?;
            h[l] = hn;
            c[l] = cn;
            x = hn;
        }
        outs.push(x);
    }
    Ok(g.concat_rows(&outs)?)
}

/// Joint network over every `(t, u)` pair: `[T * (U+1), V]` log-probs.
pub fn joint(ctx: &Ctx, enc: Var, pred: Var) -> Result<Var> {
    let g = ctx.graph;
    let e = nn::linear(ctx, &format!("{DECODER}/joint/enc"), enc)?;
    let p = nn::linear(ctx, &format!("{DECODER}/joint/pred"), pred)?;
    let h = g.tanh(g.outer_add(e, p)?);
    let logits = nn::linear(ctx, &format!("{DECODER}/joint/output"), h)?;
    Ok(g.log_softmax_rows(logits))
}

/// Encoder output restricted to valid frames.
pub fn encode_valid(
    ctx: &Ctx,
    cfg: &AsrModelConfig,
    features: &FeatureSequence,
) -> Result<(Var, usize)> {
    Ok(encode_valid_batch(ctx, cfg, std::slice::from_ref(features))?.remove(0))
}

pub fn encode_valid_batch(
    ctx: &Ctx,
    cfg: &AsrModelConfig,
    features: &[FeatureSequence],
) -> Result<Vec<(Var, usize)>> {
    let (hs, valids) = encoder::encode_batch(ctx, &cfg.encoder, &cfg.projection, features)?;
    hs.into_iter()
        .zip(valids)
        .map(|(h, valid)| Ok((ctx.graph.slice_rows(h, 0, valid)?, valid)))
        .collect()
}

/// Per-frame encoder projection into the joint space, computed once per
/// utterance for decoding: `[T, joint_dim]`.
pub fn encoder_joint_projection(
    params: &ParamStore,
    cfg: &AsrModelConfig,
    features: &FeatureSequence,
) -> Result<Tensor> {
    let g = Graph::inference();
    let ctx = Ctx::new(&g, params, false);
    let (h, _) = encode_valid(&ctx, cfg, features)?;
    let e = nn::linear(&ctx, &format!("{DECODER}/joint/enc"), h)?;
    Ok(g.value(e))
}

/// Incremental prediction-network state for one label prefix.
#[derive(Clone, Debug)]
pub struct PredState {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    /// Prediction output projected into the joint space.
    pub joint_in: Vec<f64>,
}

pub struct PredictionNetwork<'a> {
    pub params: &'a ParamStore,
    pub config: &'a DecoderConfig,
}

impl PredictionNetwork<'_> {
    pub fn start(&self) -> Result<PredState> {
        let zeros = vec![vec![0.0; self.config.dim]; self.config.n_lstm_layers];
        self.step_from(zeros.clone(), zeros, BLANK)
    }

    pub fn advance(&self, state: &PredState, token: u32) -> Result<PredState> {
        self.step_from(state.h.clone(), state.c.clone(), token)
    }

    fn step_from(
        &self,
        mut h: Vec<Vec<f64>>,
        mut c: Vec<Vec<f64>>,
        token: u32,
    ) -> Result<PredState> {
        let emb = self.params.get(&format!("{DECODER}/embedding"))?;
        let mut x = emb.row(token as usize).to_vec();
        for l in 0..self.config.n_lstm_layers {
            let (hn, cn) = nn::lstm_step_raw(
                self.params,
                &format!("{DECODER}/lstm_{l}"),
                &x,
                &h[l],
                &c[l],
            )?;
            h[l] = hn.clone();
            c[l] = cn;
            x = hn;
        }
        let joint_in = nn::linear_raw(self.params, &format!("{DECODER}/joint/pred"), &x)?;
        Ok(PredState { h, c, joint_in })
    }

    /// Joint log-distribution for encoder frame projection `enc` and state.
    pub fn joint_log_probs(&self, enc: &[f64], state: &PredState) -> Result<Vec<f64>> {
        let h: Vec<f64> = enc
            .iter()
            .zip(&state.joint_in)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let logits = nn::linear_raw(self.params, &format!("{DECODER}/joint/output"), &h)?;
        let lse = log_sum_exp(&logits);
        Ok(logits.into_iter().map(|v| v - lse).collect())
    }
}
