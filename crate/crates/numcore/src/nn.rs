//! Shared layers: each comes as a `*_layout` that declares parameters and a
//! forward function that reads them through a [`Ctx`].

use std::cell::RefCell;
use std::ops::Range;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Init, Layout, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
/// Large negative logit used to exclude attention keys.
pub const MASK_LOGIT: f64 = -1e30;

/// Forward-pass context: graph, parameters, mode, and pending buffer updates.
pub struct Ctx<'a> {
    pub graph: &'a Graph,
    pub store: &'a ParamStore,
    pub train: bool,
    pub bn_momentum: f64,
    updates: RefCell<Vec<(String, Tensor)>>,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a Graph, store: &'a ParamStore, train: bool) -> Self {
        Ctx {
            graph,
            store,
            train,
            bn_momentum: 0.9,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn p(&self, path: &str) -> Result<Var> {
        self.graph.param(self.store, path)
    }

    /// Buffer read as an untracked constant.
    pub fn buffer(&self, path: &str) -> Result<Var> {
        Ok(self.graph.constant(self.store.get(path)?.clone()))
    }

    /// Buffer values computed during this forward pass, to be written back
    /// with [`apply_buffer_updates`].
    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(String, Tensor)>) -> Result<()> {
    for (path, t) in updates {
        *store.get_mut(&path)? = t;
    }
    Ok(())
}

pub fn linear_layout(l: &mut Layout, prefix: &str, d_in: usize, d_out: usize, bias: bool) {
    l.push(
        format!("{prefix}/weight"),
        &[d_in, d_out],
        Init::FanIn(d_in),
    );
    if bias {
        l.push(format!("{prefix}/bias"), &[d_out], Init::Zeros);
    }
}

/// `x[n, d_in] · W + b`.
pub fn linear(ctx: &Ctx, prefix: &str, x: Var) -> Result<Var> {
    let g = ctx.graph;
    let y = g.matmul(x, ctx.p(&format!("{prefix}/weight"))?)?;
    let bias = format!("{prefix}/bias");
    if ctx.store.contains(&bias) {
        g.add_row(y, ctx.p(&bias)?)
    } else {
        Ok(y)
    }
}

pub fn layer_norm_layout(l: &mut Layout, prefix: &str, d: usize) {
    l.push(format!("{prefix}/gamma"), &[d], Init::Ones);
    l.push(format!("{prefix}/beta"), &[d], Init::Zeros);
}

pub fn layer_norm(ctx: &Ctx, prefix: &str, x: Var) -> Result<Var> {
    let g = ctx.graph;
    let n = g.layer_norm_rows(x, LN_EPS);
    let y = g.mul_row(n, ctx.p(&format!("{prefix}/gamma"))?)?;
    g.add_row(y, ctx.p(&format!("{prefix}/beta"))?)
}

pub fn batch_norm_layout(l: &mut Layout, prefix: &str, d: usize) {
    l.push(format!("{prefix}/gamma"), &[d], Init::Ones);
    l.push(format!("{prefix}/beta"), &[d], Init::Zeros);
    l.push_buffer(format!("{prefix}/running_mean"), &[d], Init::Zeros);
    l.push_buffer(format!("{prefix}/running_var"), &[d], Init::Ones);
}

/// Batch normalization over the first `valid` rows. Training mode uses the
/// statistics of those rows and queues a running-average update; evaluation
/// mode uses the running statistics. Rows beyond `valid` come out zero.
pub fn batch_norm(ctx: &Ctx, prefix: &str, x: Var, valid: usize) -> Result<Var> {
    Ok(batch_norm_group(ctx, prefix, &[x], &[valid])?.remove(0))
}

/// Batch normalization of several sequences sharing one set of statistics:
/// in training mode the mean and variance are taken over the valid rows of
/// all of `xs` together.
pub fn batch_norm_group(ctx: &Ctx, prefix: &str, xs: &[Var], valids: &[usize]) -> Result<Vec<Var>> {
    let g = ctx.graph;
    if xs.is_empty() || xs.len() != valids.len() {
        return Err(crate::NumError::InvalidArgument(
            "batch norm needs one valid length per sequence".into(),
        ));
    }
    let mean_path = format!("{prefix}/running_mean");
    let var_path = format!("{prefix}/running_var");
    let gamma = ctx.p(&format!("{prefix}/gamma"))?;
    let beta = ctx.p(&format!("{prefix}/beta"))?;
    let affine = |y: Var, valid: usize| -> Result<Var> {
        let y = g.mul_row(y, gamma)?;
        let y = g.add_row(y, beta)?;
        g.zero_rows_from(y, valid)
    };
    if !ctx.train {
        let rm = ctx.store.get(&mean_path)?;
        let rv = ctx.store.get(&var_path)?;
        let scale = Tensor::vector(
            rv.data()
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect(),
        );
        let shift = Tensor::vector(
            rm.data()
                .iter()
                .zip(scale.data())
                .map(|(m, s)| -m * s)
                .collect(),
        );
        return xs
            .iter()
            .zip(valids)
            .map(|(&x, &valid)| {
                let y = g.mul_row(x, g.constant(scale.clone()))?;
                let y = g.add_row(y, g.constant(shift.clone()))?;
                affine(g.zero_rows_from(y, valid)?, valid)
            })
            .collect();
    }
    let (stats_in, total) = if xs.len() == 1 {
        (xs[0], valids[0])
    } else {
        let parts = xs
            .iter()
            .zip(valids)
            .map(|(&x, &v)| g.slice_rows(x, 0, v))
            .collect::<Result<Vec<_>>>()?;
        (g.concat_rows(&parts)?, valids.iter().sum())
    };
    let (y, mean, var) = g.batch_norm_rows(stats_in, total, BN_EPS)?;
    let m = ctx.bn_momentum;
    let rm = ctx.store.get(&mean_path)?;
    let rv = ctx.store.get(&var_path)?;
    let new_mean = Tensor::vector(
        rm.data()
            .iter()
            .zip(&mean)
            .map(|(r, b)| m * r + (1.0 - m) * b)
            .collect(),
    );
    let new_var = Tensor::vector(
        rv.data()
            .iter()
            .zip(&var)
            .map(|(r, b)| m * r + (1.0 - m) * b)
            .collect(),
    );
    {
        let mut u = ctx.updates.borrow_mut();
        u.push((mean_path, new_mean));
        u.push((var_path, new_var));
    }
    if xs.len() == 1 {
        return Ok(vec![affine(y, valids[0])?]);
    }
    let mut out = Vec::with_capacity(xs.len());
    let mut offset = 0;
    for (&x, &v) in xs.iter().zip(valids) {
        let shape = g.shape(x);
        let mut part = g.slice_rows(y, offset, offset + v)?;
        if shape[0] > v {
            part = g.concat_rows(&[part, g.constant(Tensor::zeros(&[shape[0] - v, shape[1]]))])?;
        }
        out.push(affine(part, v)?);
        offset += v;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionSpec {
    pub n_heads: usize,
    pub causal: bool,
    /// Clipping radius of the learned relative-position bias; `None` for
    /// attention without positional information.
    pub rel_radius: Option<usize>,
    /// Queries see at most this many most recent keys (including their own
    /// position).
    pub window: Option<usize>,
}

pub fn attention_layout(l: &mut Layout, prefix: &str, d: usize, spec: AttentionSpec) {
    for name in ["q", "k", "v", "out"] {
        linear_layout(l, &format!("{prefix}/{name}"), d, d, true);
    }
    if let Some(r) = spec.rel_radius {
        l.push(
            format!("{prefix}/rel_bias"),
            &[spec.n_heads, 2 * r + 1],
            Init::Zeros,
        );
    }
}

/// Index of the relative-bias entry for query `i`, key `j`.
pub fn rel_index(i: usize, j: usize, radius: usize) -> usize {
    let d = j as isize - i as isize;
    (d.clamp(-(radius as isize), radius as isize) + radius as isize) as usize
}

/// Whether query `i` may attend to key `j`.
pub fn key_visible(i: usize, j: usize, keys: &Range<usize>, spec: &AttentionSpec) -> bool {
    keys.contains(&j) && !(spec.causal && j > i) && spec.window.is_none_or(|w| i < j + w)
}

/// Multi-head self-attention over `x[T, d]`; only rows in `keys` act as keys.
pub fn self_attention(
    ctx: &Ctx,
    prefix: &str,
    x: Var,
    keys: Range<usize>,
    spec: AttentionSpec,
) -> Result<Var> {
    let g = ctx.graph;
    let shape = g.shape(x);
    let (t_len, d) = (shape[0], shape[1]);
    let dh = d / spec.n_heads;
    let q = linear(ctx, &format!("{prefix}/q"), x)?;
    let k = linear(ctx, &format!("{prefix}/k"), x)?;
    let v = linear(ctx, &format!("{prefix}/v"), x)?;
    let mask = Tensor::from_fn(&[t_len, t_len], |idx| {
        if key_visible(idx / t_len, idx % t_len, &keys, &spec) {
            0.0
        } else {
            MASK_LOGIT
        }
    });
    let mask = g.constant(mask);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(spec.n_heads);
    for h in 0..spec.n_heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        let mut scores = g.scale(g.matmul_nt(qh, kh)?, scale);
        if let Some(r) = spec.rel_radius {
            let width = 2 * r + 1;
            let idx: Vec<usize> = (0..t_len * t_len)
                .map(|n| h * width + rel_index(n / t_len, n % t_len, r))
                .collect();
            let bias =
                g.gather_flat(ctx.p(&format!("{prefix}/rel_bias"))?, &idx, &[t_len, t_len])?;
            scores = g.add(scores, bias)?;
        }
        let probs = g.softmax_rows(g.add(scores, mask)?);
        heads.push(g.matmul(probs, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(ctx, &format!("{prefix}/out"), cat)
}

pub fn lstm_layout(l: &mut Layout, prefix: &str, d_in: usize, hidden: usize) {
    l.push(
        format!("{prefix}/w_ih"),
        &[d_in, 4 * hidden],
        Init::FanIn(d_in),
    );
    l.push(
        format!("{prefix}/w_hh"),
        &[hidden, 4 * hidden],
        Init::FanIn(hidden),
    );
    l.push(format!("{prefix}/bias"), &[4 * hidden], Init::Zeros);
}

/// One LSTM step on row vectors `x[1, d_in]`, `h[1, H]`, `c[1, H]`.
/// Gate order: input, forget, cell, output.
pub fn lstm_cell(ctx: &Ctx, prefix: &str, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let g = ctx.graph;
    let hidden = g.shape(h)[1];
    let gates = g.add(
        g.matmul(x, ctx.p(&format!("{prefix}/w_ih"))?)?,
        g.matmul(h, ctx.p(&format!("{prefix}/w_hh"))?)?,
    )?;
    let gates = g.add_row(gates, ctx.p(&format!("{prefix}/bias"))?)?;
    let i = g.sigmoid(g.slice_cols(gates, 0, hidden)?);
    let f = g.sigmoid(g.slice_cols(gates, hidden, 2 * hidden)?);
    let cand = g.tanh(g.slice_cols(gates, 2 * hidden, 3 * hidden)?);
    let o = g.sigmoid(g.slice_cols(gates, 3 * hidden, 4 * hidden)?);
    let c_new = g.add(g.mul(f, c)?, g.mul(i, cand)?)?;
    let h_new = g.mul(o, g.tanh(c_new))?;
    Ok((h_new, c_new))
}

/// Plain-array LSTM step used by incremental decoding; mirrors [`lstm_cell`].
pub fn lstm_step_raw(
    store: &ParamStore,
    prefix: &str,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let w_ih = store.get(&format!("{prefix}/w_ih"))?;
    let w_hh = store.get(&format!("{prefix}/w_hh"))?;
    let bias = store.get(&format!("{prefix}/bias"))?;
    let hidden = h.len();
    let mut gates = bias.data().to_vec();
    vec_mat_acc(x, w_ih, &mut gates);
    vec_mat_acc(h, w_hh, &mut gates);
    let sig = crate::tensor::sigmoid;
    let mut h_new = vec![0.0; hidden];
    let mut c_new = vec![0.0; hidden];
    for j in 0..hidden {
        let i = sig(gates[j]);
        let f = sig(gates[hidden + j]);
        let cand = gates[2 * hidden + j].tanh();
        let o = sig(gates[3 * hidden + j]);
        c_new[j] = f * c[j] + i * cand;
        h_new[j] = o * c_new[j].tanh();
    }
    Ok((h_new, c_new))
}

/// `out += x · W` for a row vector `x` and matrix `W[len(x), len(out)]`.
pub fn vec_mat_acc(x: &[f64], w: &Tensor, out: &mut [f64]) {
    let m = w.cols();
    debug_assert_eq!(w.rows(), x.len());
    debug_assert_eq!(out.len(), m);
    for (p, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w.data()[p * m..(p + 1) * m]) {
            *o += xv * wv;
        }
    }
}

/// Plain-array `x · W + b` for a row vector.
pub fn linear_raw(store: &ParamStore, prefix: &str, x: &[f64]) -> Result<Vec<f64>> {
    let w = store.get(&format!("{prefix}/weight"))?;
    let bias = format!("{prefix}/bias");
    let mut out = if store.contains(&bias) {
        store.get(&bias)?.data().to_vec()
    } else {
        vec![0.0; w.cols()]
    };
    vec_mat_acc(x, w, &mut out);
    Ok(out)
}
