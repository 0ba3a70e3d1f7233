//! Differentiable primitives recorded on a [`Graph`].
//!
//! Matrices are rank-2 `[rows, cols]`. Row-wise ops (softmax, layer norm)
//! normalize along the last dimension.

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, sigmoid, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NumError::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(NumError::ShapeMismatch {
            op,
            expected: vec![0, 0],
            got: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// How the depthwise convolution treats frames outside `[0, T)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPadding {
    Zero,
    /// Wraps around; used by shift-equivariance tests.
    Circular,
}

impl Graph {
    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let out = self.compute(&[a], |v| v[0].map(&f));
        self.op(out, &[a], move |g, ins, out| {
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(ins[0].data())
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::raw(g.shape().to_vec(), d))]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.compute(&[a, b], |v| {
            same_shape("add", v[0], v[1])?;
            v[0].zip_map(v[1], |x, y| x + y)
        })?;
        Ok(self.op(out, &[a, b], |g, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.compute(&[a, b], |v| {
            same_shape("sub", v[0], v[1])?;
            v[0].zip_map(v[1], |x, y| x - y)
        })?;
        Ok(self.op(out, &[a, b], |g, _, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.compute(&[a, b], |v| {
            same_shape("mul", v[0], v[1])?;
            v[0].zip_map(v[1], |x, y| x * y)
        })?;
        Ok(self.op(out, &[a, b], |g, ins, _| {
            vec![
                Some(g.zip_map(ins[1], |g, y| g * y).unwrap()),
                Some(g.zip_map(ins[0], |g, x| g * x).unwrap()),
            ]
        }))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = self.compute(&[a], |v| Tensor::scalar(v[0].sum()));
        self.op(out, &[a], |g, ins, _| {
            vec![Some(Tensor::full(ins[0].shape(), g.item()))]
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.with_value(a, |t| t.numel()).max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of several scalars (or same-shape tensors).
    pub fn add_all(&self, vars: &[Var]) -> Result<Var> {
        let mut it = vars.iter();
        let first = *it
            .next()
            .ok_or_else(|| NumError::invalid("add_all of an empty list"))?;
        it.try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.compute(&[a], |v| v[0].clone().reshape(shape.to_vec()))?;
        Ok(self.op(out, &[a], |g, ins, _| {
            vec![Some(g.clone().reshape(ins[0].shape().to_vec()).unwrap())]
        }))
    }

    /// `a[n,k] · b[k,m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, n, k, m) = self.compute(&[a, b], |v| {
            let (n, k) = dims2("matmul", v[0])?;
            let (k2, m) = dims2("matmul", v[1])?;
            if k != k2 {
                return Err(NumError::ShapeMismatch {
                    op: "matmul",
                    expected: vec![k, m],
                    got: v[1].shape().to_vec(),
                });
            }
            Ok((
                Tensor::raw(vec![n, m], matmul_raw(v[0].data(), v[1].data(), n, k, m)),
                n,
                k,
                m,
            ))
        })?;
        Ok(self.op(out, &[a, b], move |g, ins, _| {
            let ga = matmul_nt_raw(g.data(), ins[1].data(), n, m, k);
            let gb = matmul_tn_raw(ins[0].data(), g.data(), n, k, m);
            vec![
                Some(Tensor::raw(vec![n, k], ga)),
                Some(Tensor::raw(vec![k, m], gb)),
            ]
        }))
    }

    /// `a[n,k] · b[m,k]ᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (out, n, k, m) = self.compute(&[a, b], |v| {
            let (n, k) = dims2("matmul_nt", v[0])?;
            let (m, k2) = dims2("matmul_nt", v[1])?;
            if k != k2 {
                return Err(NumError::ShapeMismatch {
                    op: "matmul_nt",
                    expected: vec![m, k],
                    got: v[1].shape().to_vec(),
                });
            }
            Ok((
                Tensor::raw(vec![n, m], matmul_nt_raw(v[0].data(), v[1].data(), n, k, m)),
                n,
                k,
                m,
            ))
        })?;
        Ok(self.op(out, &[a, b], move |g, ins, _| {
            let ga = matmul_raw(g.data(), ins[1].data(), n, m, k);
            let gb = matmul_tn_raw(g.data(), ins[0].data(), n, m, k);
            vec![
                Some(Tensor::raw(vec![n, k], ga)),
                Some(Tensor::raw(vec![m, k], gb)),
            ]
        }))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.compute(&[a], |v| dims2("transpose", v[0]).map(|_| v[0].transpose()))?;
        Ok(self.op(out, &[a], |g, _, _| vec![Some(g.transpose())]))
    }

    /// Adds the vector `b[d]` to every row of `a[n,d]`.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.compute(&[a, b], |v| {
            let d = v[0].cols();
            if v[1].numel() != d {
                return Err(NumError::ShapeMismatch {
                    op: "add_row",
                    expected: vec![d],
                    got: v[1].shape().to_vec(),
                });
            }
            let mut out = v[0].clone();
            for r in 0..out.rows() {
                for (x, &y) in out.row_mut(r).iter_mut().zip(v[1].data()) {
                    *x += y;
                }
            }
            Ok(out)
        })?;
        Ok(self.op(out, &[a, b], |g, ins, _| {
            let d = g.cols();
            let mut gb = vec![0.0; d];
            for r in 0..g.rows() {
                for (s, &x) in gb.iter_mut().zip(g.row(r)) {
                    *s += x;
                }
            }
            vec![
                Some(g.clone()),
                Some(Tensor::raw(ins[1].shape().to_vec(), gb)),
            ]
        }))
    }

    /// Multiplies every row of `a[n,d]` elementwise by `b[d]`.
    pub fn mul_row(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.compute(&[a, b], |v| {
            let d = v[0].cols();
            if v[1].numel() != d {
                return Err(NumError::ShapeMismatch {
                    op: "mul_row",
                    expected: vec![d],
                    got: v[1].shape().to_vec(),
                });
            }
            let mut out = v[0].clone();
            for r in 0..out.rows() {
                for (x, &y) in out.row_mut(r).iter_mut().zip(v[1].data()) {
                    *x *= y;
                }
            }
            Ok(out)
        })?;
        Ok(self.op(out, &[a, b], |g, ins, _| {
            let d = g.cols();
            let mut ga = g.clone();
            let mut gb = vec![0.0; d];
            for r in 0..g.rows() {
                let xr = ins[0].row(r);
                for c in 0..d {
                    gb[c] += g.row(r)[c] * xr[c];
                }
                for (x, &y) in ga.row_mut(r).iter_mut().zip(ins[1].data()) {
                    *x *= y;
                }
            }
            vec![Some(ga), Some(Tensor::raw(ins[1].shape().to_vec(), gb))]
        }))
    }

    /// Multiplies row `r` of `a[n,d]` by `b[r]`.
    pub fn mul_col(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.compute(&[a, b], |v| {
            let n = v[0].rows();
            if v[1].numel() != n {
                return Err(NumError::ShapeMismatch {
                    op: "mul_col",
                    expected: vec![n],
                    got: v[1].shape().to_vec(),
                });
            }
            let mut out = v[0].clone();
            for r in 0..n {
                let s = v[1].data()[r];
                for x in out.row_mut(r) {
                    *x *= s;
                }
            }
            Ok(out)
        })?;
        Ok(self.op(out, &[a, b], |g, ins, _| {
            let n = g.rows();
            let mut ga = g.clone();
            let mut gb = vec![0.0; n];
            for r in 0..n {
                let s = ins[1].data()[r];
                gb[r] = g.row(r).iter().zip(ins[0].row(r)).map(|(x, y)| x * y).sum();
                for x in ga.row_mut(r) {
                    *x *= s;
                }
            }
            vec![Some(ga), Some(Tensor::raw(ins[1].shape().to_vec(), gb))]
        }))
    }

    /// Zeroes rows `valid..` of a matrix.
    pub fn zero_rows_from(&self, a: Var, valid: usize) -> Result<Var> {
        let n = self.with_value(a, |t| t.rows());
        let mask = Tensor::from_fn(&[n], |r| if r < valid { 1.0 } else { 0.0 });
        let m = self.constant(mask);
        self.mul_col(a, m)
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = self.compute(&[a], |v| softmax_rows_raw(v[0]));
        self.op(out, &[a], |g, _, y| {
            let mut gx = g.clone();
            for r in 0..g.rows() {
                let yr = y.row(r);
                let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                for (x, &yv) in gx.row_mut(r).iter_mut().zip(yr) {
                    *x = yv * (*x - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let out = self.compute(&[a], |v| log_softmax_rows_raw(v[0]));
        self.op(out, &[a], |g, _, y| {
            let mut gx = g.clone();
            for r in 0..g.rows() {
                let s: f64 = g.row(r).iter().sum();
                for (x, &ly) in gx.row_mut(r).iter_mut().zip(y.row(r)) {
                    *x -= ly.exp() * s;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Row normalization to zero mean / unit variance without affine terms.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Var {
        let (out, inv_std) = self.compute(&[a], |v| {
            let t = v[0];
            let d = t.cols();
            let mut out = t.clone();
            let mut inv = Vec::with_capacity(t.rows());
            for r in 0..t.rows() {
                let row = out.row_mut(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * is;
                }
                inv.push(is);
            }
            (out, inv)
        });
        self.op(out, &[a], move |g, _, xhat| {
            let d = g.cols() as f64;
            let mut gx = g.clone();
            for r in 0..g.rows() {
                let gr = g.row(r);
                let xr = xhat.row(r);
                let mg = gr.iter().sum::<f64>() / d;
                let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d;
                for ((o, &gv), &xv) in gx.row_mut(r).iter_mut().zip(gr).zip(xr) {
                    *o = inv_std[r] * (gv - mg - xv * mgx);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Column normalization over the first `valid` rows (training-mode batch
    /// norm without affine terms). Rows at or beyond `valid` come out zero.
    /// Returns the normalized matrix with the per-column mean and variance.
    pub fn batch_norm_rows(
        &self,
        a: Var,
        valid: usize,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (out, mean, var) = self.compute(&[a], |v| {
            let t = v[0];
            let (n, d) = dims2("batch_norm_rows", t)?;
            if valid == 0 || valid > n {
                return Err(NumError::invalid(format!(
                    "batch norm over {valid} of {n} rows"
                )));
            }
            let mut mean = vec![0.0; d];
            for r in 0..valid {
                for (m, x) in mean.iter_mut().zip(t.row(r)) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= valid as f64);
            let mut var = vec![0.0; d];
            for r in 0..valid {
                for ((s, x), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                    *s += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= valid as f64);
            let mut out = Tensor::zeros(&[n, d]);
            for r in 0..valid {
                let src = t.row(r);
                for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                    *o = (src[c] - mean[c]) / (var[c] + eps).sqrt();
                }
            }
            Ok((out, mean, var))
        })?;
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = self.op(out, &[a], move |g, _, xhat| {
            let d = g.cols();
            let nv = valid as f64;
            let mut mg = vec![0.0; d];
            let mut mgx = vec![0.0; d];
            for r in 0..valid {
                for c in 0..d {
                    mg[c] += g.row(r)[c];
                    mgx[c] += g.row(r)[c] * xhat.row(r)[c];
                }
            }
            let mut gx = Tensor::zeros(g.shape());
            for r in 0..valid {
                for c in 0..d {
                    gx.row_mut(r)[c] =
                        inv[c] * (g.row(r)[c] - mg[c] / nv - xhat.row(r)[c] * mgx[c] / nv);
                }
            }
            vec![Some(gx)]
        });
        Ok((y, mean, var))
    }

    /// Gated linear unit over the last dim: `a[:, :d] ⊙ σ(a[:, d:])`.
    pub fn glu(&self, a: Var) -> Result<Var> {
        let out = self.compute(&[a], |v| {
            let (n, d2) = dims2("glu", v[0])?;
            if d2 % 2 != 0 {
                return Err(NumError::invalid("glu needs an even width"));
            }
            let d = d2 / 2;
            let mut out = Tensor::zeros(&[n, d]);
            for r in 0..n {
                let src = v[0].row(r);
                for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                    *o = src[c] * sigmoid(src[c + d]);
                }
            }
            Ok(out)
        })?;
        Ok(self.op(out, &[a], |g, ins, _| {
            let d = g.cols();
            let mut gx = Tensor::zeros(ins[0].shape());
            for r in 0..g.rows() {
                let src = ins[0].row(r);
                let gr = g.row(r);
                let dst = gx.row_mut(r);
                for c in 0..d {
                    let s = sigmoid(src[c + d]);
                    dst[c] = gr[c] * s;
                    dst[c + d] = gr[c] * src[c] * s * (1.0 - s);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Depthwise 1-D convolution over time: `x[T,C]`, `w[K,C]`, `b[C]`.
    /// Output frame `t` sees inputs `t - (K-1)/2 ..= t + K/2`.
    pub fn depthwise_conv1d(&self, x: Var, w: Var, b: Var, padding: ConvPadding) -> Result<Var> {
        let out = self.compute(&[x, w, b], |v| {
            let (t_len, c) = dims2("depthwise_conv1d", v[0])?;
            let (k, c2) = dims2("depthwise_conv1d", v[1])?;
            if c != c2 || v[2].numel() != c {
                return Err(NumError::ShapeMismatch {
                    op: "depthwise_conv1d",
                    expected: vec![k, c],
                    got: v[1].shape().to_vec(),
                });
            }
            let left = (k - 1) / 2;
            let mut out = Tensor::zeros(&[t_len, c]);
            for t in 0..t_len {
                let o = out.row_mut(t);
                o.copy_from_slice(v[2].data());
                for j in 0..k {
                    let Some(src) = conv_src(t, j, left, t_len, padding) else {
                        continue;
                    };
                    let xr = v[0].row(src);
                    let wr = v[1].row(j);
                    for ch in 0..c {
                        o[ch] += wr[ch] * xr[ch];
                    }
                }
            }
            Ok(out)
        })?;
        Ok(self.op(out, &[x, w, b], move |g, ins, _| {
            let (t_len, c) = (g.rows(), g.cols());
            let k = ins[1].rows();
            let left = (k - 1) / 2;
            let mut gx = Tensor::zeros(ins[0].shape());
            let mut gw = Tensor::zeros(ins[1].shape());
            let mut gb = vec![0.0; c];
            for t in 0..t_len {
                let gr = g.row(t).to_vec();
                for ch in 0..c {
                    gb[ch] += gr[ch];
                }
                for j in 0..k {
                    let Some(src) = conv_src(t, j, left, t_len, padding) else {
                        continue;
                    };
                    let xr = ins[0].row(src).to_vec();
                    let wr = ins[1].row(j).to_vec();
                    let gxr = gx.row_mut(src);
                    for ch in 0..c {
                        gxr[ch] += gr[ch] * wr[ch];
                    }
                    let gwr = gw.row_mut(j);
                    for ch in 0..c {
                        gwr[ch] += gr[ch] * xr[ch];
                    }
                }
            }
            vec![Some(gx), Some(gw), Some(Tensor::vector(gb))]
        }))
    }

    /// Strided 2-D convolution. `x[Cin,H,W]`, `w[Cout,Cin,KH,KW]`, `b[Cout]`.
    /// Leading padding is `(K-1)/2` per axis and the output extent is
    /// `ceil(H/stride)`, so the alignment of early outputs never depends on
    /// the input length.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let (out, geo) = self.compute(&[x, w, b], |v| {
            let geo = Conv2dGeometry::new(v[0].shape(), v[1].shape(), stride)?;
            if v[2].numel() != geo.cout {
                return Err(NumError::ShapeMismatch {
                    op: "conv2d",
                    expected: vec![geo.cout],
                    got: v[2].shape().to_vec(),
                });
            }
            Ok((geo.forward(v[0].data(), v[1].data(), v[2].data()), geo))
        })?;
        Ok(self.op(out, &[x, w, b], move |g, ins, _| {
            let (gx, gw, gb) = geo.backward(g.data(), ins[0].data(), ins[1].data());
            vec![
                Some(Tensor::raw(ins[0].shape().to_vec(), gx)),
                Some(Tensor::raw(ins[1].shape().to_vec(), gw)),
                Some(Tensor::vector(gb)),
            ]
        }))
    }

    /// `[A,B,C] -> [B,A,C]`.
    pub fn swap_axes01(&self, a: Var) -> Result<Var> {
        let out = self.compute(&[a], |v| {
            let s = v[0].shape();
            if s.len() != 3 {
                return Err(NumError::invalid("swap_axes01 needs rank 3"));
            }
            Ok(swap01(v[0], s[0], s[1], s[2]))
        })?;
        Ok(self.op(out, &[a], |g, _, _| {
            let s = g.shape();
            vec![Some(swap01(g, s[0], s[1], s[2]))]
        }))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.compute(&[a], |v| {
            let (n, d) = dims2("slice_cols", v[0])?;
            if start > end || end > d {
                return Err(NumError::invalid(format!("columns {start}..{end} of {d}")));
            }
            let w = end - start;
            let mut data = Vec::with_capacity(n * w);
            for r in 0..n {
                data.extend_from_slice(&v[0].row(r)[start..end]);
            }
            Ok(Tensor::raw(vec![n, w], data))
        })?;
        Ok(self.op(out, &[a], move |g, ins, _| {
            let mut gx = Tensor::zeros(ins[0].shape());
            for r in 0..g.rows() {
                gx.row_mut(r)[start..end].copy_from_slice(g.row(r));
            }
            vec![Some(gx)]
        }))
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.compute(&[a], |v| {
            let (n, d) = dims2("slice_rows", v[0])?;
            if start > end || end > n {
                return Err(NumError::invalid(format!("rows {start}..{end} of {n}")));
            }
            Ok(Tensor::raw(
                vec![end - start, d],
                v[0].data()[start * d..end * d].to_vec(),
            ))
        })?;
        Ok(self.op(out, &[a], move |g, ins, _| {
            let d = g.cols();
            let mut gx = Tensor::zeros(ins[0].shape());
            gx.data_mut()[start * d..end * d].copy_from_slice(g.data());
            vec![Some(gx)]
        }))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let (out, widths) = self.compute(parts, |v| {
            let n = v.first().map(|t| t.rows()).unwrap_or(0);
            let mut widths = Vec::new();
            for t in v {
                let (r, w) = dims2("concat_cols", t)?;
                if r != n {
                    return Err(NumError::ShapeMismatch {
                        op: "concat_cols",
                        expected: vec![n, w],
                        got: t.shape().to_vec(),
                    });
                }
                widths.push(w);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(n * total);
            for r in 0..n {
                for t in v {
                    data.extend_from_slice(t.row(r));
                }
            }
            Ok((Tensor::raw(vec![n, total], data), widths))
        })?;
        Ok(self.op(out, parts, move |g, _, _| {
            let n = g.rows();
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut data = Vec::with_capacity(n * w);
                    for r in 0..n {
                        data.extend_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    Some(Tensor::raw(vec![n, w], data))
                })
                .collect()
        }))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let (out, heights) = self.compute(parts, |v| {
            let d = v.first().map(|t| t.cols()).unwrap_or(0);
            let mut heights = Vec::new();
            let mut data = Vec::new();
            for t in v {
                let (r, w) = dims2("concat_rows", t)?;
                if w != d {
                    return Err(NumError::ShapeMismatch {
                        op: "concat_rows",
                        expected: vec![r, d],
                        got: t.shape().to_vec(),
                    });
                }
                heights.push(r);
                data.extend_from_slice(t.data());
            }
            Ok((Tensor::raw(vec![heights.iter().sum(), d], data), heights))
        })?;
        Ok(self.op(out, parts, move |g, _, _| {
            let d = g.cols();
            let mut off = 0;
            heights
                .iter()
                .map(|&h| {
                    let t = Tensor::raw(vec![h, d], g.data()[off * d..(off + h) * d].to_vec());
                    off += h;
                    Some(t)
                })
                .collect()
        }))
    }

    /// Selects rows of `a[n,d]` by index (embedding lookup).
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let idx = idx.to_vec();
        let out = self.compute(&[a], |v| {
            let (n, d) = dims2("gather_rows", v[0])?;
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in &idx {
                if i >= n {
                    return Err(NumError::invalid(format!("row {i} of {n}")));
                }
                data.extend_from_slice(v[0].row(i));
            }
            Ok(Tensor::raw(vec![idx.len(), d], data))
        })?;
        Ok(self.op(out, &[a], move |g, ins, _| {
            let mut gx = Tensor::zeros(ins[0].shape());
            for (k, &i) in idx.iter().enumerate() {
                for (o, &x) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                    *o += x;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Gathers flat elements of `a` into a tensor of `shape`.
    pub fn gather_flat(&self, a: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let idx = idx.to_vec();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(NumError::invalid(
                "gather_flat: index count does not fill shape",
            ));
        }
        let out = self.compute(&[a], |v| -> Result<Tensor> {
            let src = v[0].data();
            let data = idx
                .iter()
                .map(|&i| {
                    src.get(i)
                        .copied()
                        .ok_or_else(|| NumError::invalid("gather_flat index"))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(Tensor::raw(shape.to_vec(), data))
        })?;
        Ok(self.op(out, &[a], move |g, ins, _| {
            let mut gx = Tensor::zeros(ins[0].shape());
            for (k, &i) in idx.iter().enumerate() {
                gx.data_mut()[i] += g.data()[k];
            }
            vec![Some(gx)]
        }))
    }

    /// Replaces the listed rows of `a[n,d]` with the vector `v[d]`.
    pub fn replace_rows(&self, a: Var, rows: &[usize], v: Var) -> Result<Var> {
        let rows = rows.to_vec();
        let out = self.compute(&[a, v], |t| {
            let (n, d) = dims2("replace_rows", t[0])?;
            if t[1].numel() != d {
                return Err(NumError::ShapeMismatch {
                    op: "replace_rows",
                    expected: vec![d],
                    got: t[1].shape().to_vec(),
                });
            }
            let mut out = t[0].clone();
            for &r in &rows {
                if r >= n {
                    return Err(NumError::invalid(format!("row {r} of {n}")));
                }
                out.row_mut(r).copy_from_slice(t[1].data());
            }
            Ok(out)
        })?;
        Ok(self.op(out, &[a, v], move |g, ins, _| {
            let d = g.cols();
            let mut ga = g.clone();
            let mut gv = vec![0.0; d];
            let mut seen = vec![false; g.rows()];
            for &r in &rows {
                if seen[r] {
                    continue;
                }
                seen[r] = true;
                for (s, x) in gv.iter_mut().zip(g.row(r)) {
                    *s += x;
                }
                ga.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
            }
            vec![Some(ga), Some(Tensor::raw(ins[1].shape().to_vec(), gv))]
        }))
    }

    /// Picks `a[r, c]` for each `(r, c)` pair into a vector.
    pub fn pick(&self, a: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let cols = self.with_value(a, |t| t.cols());
        let flat: Vec<usize> = coords.iter().map(|&(r, c)| r * cols + c).collect();
        self.gather_flat(a, &flat, &[coords.len()])
    }

    /// Row-wise L2 normalization.
    pub fn l2_normalize_rows(&self, a: Var, eps: f64) -> Var {
        let (out, norms) = self.compute(&[a], |v| {
            let mut out = v[0].clone();
            let mut norms = Vec::with_capacity(out.rows());
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
                row.iter_mut().for_each(|x| *x /= nrm);
                norms.push(nrm);
            }
            (out, norms)
        });
        self.op(out, &[a], move |g, _, y| {
            let mut gx = g.clone();
            for r in 0..g.rows() {
                let yr = y.row(r);
                let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                for (o, &yv) in gx.row_mut(r).iter_mut().zip(yr) {
                    *o = (*o - yv * dot) / norms[r];
                }
            }
            vec![Some(gx)]
        })
    }

    /// `out[t*U + u, :] = a[t, :] + b[u, :]` for `a[T,J]`, `b[U,J]`.
    pub fn outer_add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, t_len, u_len) = self.compute(&[a, b], |v| {
            let (t_len, j) = dims2("outer_add", v[0])?;
            let (u_len, j2) = dims2("outer_add", v[1])?;
            if j != j2 {
                return Err(NumError::ShapeMismatch {
                    op: "outer_add",
                    expected: vec![u_len, j],
                    got: v[1].shape().to_vec(),
                });
            }
            let mut data = Vec::with_capacity(t_len * u_len * j);
            for t in 0..t_len {
                for u in 0..u_len {
                    data.extend(v[0].row(t).iter().zip(v[1].row(u)).map(|(x, y)| x + y));
                }
            }
            Ok((Tensor::raw(vec![t_len * u_len, j], data), t_len, u_len))
        })?;
        Ok(self.op(out, &[a, b], move |g, ins, _| {
            let mut ga = Tensor::zeros(ins[0].shape());
            let mut gb = Tensor::zeros(ins[1].shape());
            for t in 0..t_len {
                for u in 0..u_len {
                    let gr = g.row(t * u_len + u);
                    for (o, x) in ga.row_mut(t).iter_mut().zip(gr) {
                        *o += x;
                    }
                    for (o, x) in gb.row_mut(u).iter_mut().zip(gr) {
                        *o += x;
                    }
                }
            }
            vec![Some(ga), Some(gb)]
        }))
    }
}

fn conv_src(t: usize, j: usize, left: usize, t_len: usize, padding: ConvPadding) -> Option<usize> {
    let pos = t as isize + j as isize - left as isize;
    match padding {
        ConvPadding::Zero => (pos >= 0 && (pos as usize) < t_len).then_some(pos as usize),
        ConvPadding::Circular => Some(pos.rem_euclid(t_len as isize) as usize),
    }
}

fn swap01(t: &Tensor, a: usize, b: usize, c: usize) -> Tensor {
    let mut out = vec![0.0; a * b * c];
    let src = t.data();
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * c..(j * a + i + 1) * c]
                .copy_from_slice(&src[(i * b + j) * c..(i * b + j + 1) * c]);
        }
    }
    Tensor::raw(vec![b, a, c], out)
}

pub(crate) fn softmax_rows_raw(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

pub(crate) fn log_softmax_rows_raw(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Conv2dGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ho: usize,
    wo: usize,
}

impl Conv2dGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: (usize, usize)) -> Result<Self> {
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || stride.0 == 0 || stride.1 == 0 {
            return Err(NumError::ShapeMismatch {
                op: "conv2d",
                expected: vec![ws.get(1).copied().unwrap_or(0), 0, 0],
                got: xs.to_vec(),
            });
        }
        let (h, w) = (xs[1], xs[2]);
        Ok(Conv2dGeometry {
            cin: xs[0],
            h,
            w,
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            ho: h.div_ceil(stride.0),
            wo: w.div_ceil(stride.1),
        })
    }

    fn src(
        &self,
        o: usize,
        k: usize,
        stride: usize,
        kernel: usize,
        extent: usize,
    ) -> Option<usize> {
        let pos = (o * stride + k) as isize - ((kernel - 1) / 2) as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn forward(&self, x: &[f64], wt: &[f64], b: &[f64]) -> Tensor {
        let mut out = vec![0.0; self.cout * self.ho * self.wo];
        for o in 0..self.cout {
            for i in 0..self.ho {
                for j in 0..self.wo {
                    let mut acc = b[o];
                    for c in 0..self.cin {
                        for p in 0..self.kh {
                            let Some(hi) = self.src(i, p, self.sh, self.kh, self.h) else {
                                continue;
                            };
                            for q in 0..self.kw {
                                let Some(wi) = self.src(j, q, self.sw, self.kw, self.w) else {
                                    continue;
                                };
                                acc += wt[((o * self.cin + c) * self.kh + p) * self.kw + q]
                                    * x[(c * self.h + hi) * self.w + wi];
                            }
                        }
                    }
                    out[(o * self.ho + i) * self.wo + j] = acc;
                }
            }
        }
        Tensor::raw(vec![self.cout, self.ho, self.wo], out)
    }

    fn backward(&self, g: &[f64], x: &[f64], wt: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; self.cout];
        for o in 0..self.cout {
            for i in 0..self.ho {
                for j in 0..self.wo {
                    let gv = g[(o * self.ho + i) * self.wo + j];
                    gb[o] += gv;
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..self.cin {
                        for p in 0..self.kh {
                            let Some(hi) = self.src(i, p, self.sh, self.kh, self.h) else {
                                continue;
                            };
                            for q in 0..self.kw {
                                let Some(wi) = self.src(j, q, self.sw, self.kw, self.w) else {
                                    continue;
                                };
                                let wi_idx = ((o * self.cin + c) * self.kh + p) * self.kw + q;
                                let xi_idx = (c * self.h + hi) * self.w + wi;
                                gw[wi_idx] += gv * x[xi_idx];
                                gx[xi_idx] += gv * wt[wi_idx];
                            }
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}
