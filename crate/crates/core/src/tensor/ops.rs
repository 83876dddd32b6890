//! Primitive differentiable operations.
//!
//! Every op validates shapes, computes the forward value, and (when the tape
//! is recording and an input requires gradients) registers a backward closure.
//! Reductions over the batch run in a fixed serial order inside each parallel
//! task, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use super::{out_grad, Tape, Tensor};
use crate::error::{Error, Result};

/// Output of a training-mode batch normalization: the normalized tensor plus
/// the per-channel batch statistics (mean and sigma = sqrt(var + xi)) needed
/// by the caller to maintain running estimates.
pub struct BatchNormOut {
    pub out: Tensor,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Tape {
    // ---- binary elementwise -------------------------------------------------

    fn elementwise2(
        &self,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        // (dy, a, b) -> (da, db)
        back: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
        name: &str,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        let out_data: Vec<f64> = {
            let av = a.data();
            let bv = b.data();
            av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let track = self.track(&[a, b]);
        let out = Tensor::build(a.shape().to_vec(), out_data, track);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                let av = a.data();
                let bv = b.data();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..av.len() {
                    let (ga, gb) = back(dy[i], av[i], bv[i]);
                    da[i] = ga;
                    db[i] = gb;
                }
                drop(av);
                drop(bv);
                if a.requires_grad() {
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise2(a, b, |x, y| x + y, |dy, _, _| (dy, dy), "add")
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise2(a, b, |x, y| x - y, |dy, _, _| (dy, -dy), "sub")
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise2(a, b, |x, y| x * y, |dy, x, y| (dy * y, dy * x), "mul")
    }

    // ---- unary elementwise --------------------------------------------------

    fn elementwise1(
        &self,
        x: &Tensor,
        f: impl Fn(f64) -> f64,
        // (dy, x) -> dx
        back: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let out_data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        let track = self.track(&[x]);
        let out = Tensor::build(x.shape().to_vec(), out_data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                let xv = x.data();
                let dx: Vec<f64> = dy.iter().zip(xv.iter()).map(|(&g, &v)| back(g, v)).collect();
                drop(xv);
                x.accumulate_grad(&dx);
            });
        }
        out
    }

    /// `scale * x + shift`, covering negation, scalar multiply and
    /// expressions like `1 - x`.
    pub fn affine(&self, x: &Tensor, scale: f64, shift: f64) -> Tensor {
        self.elementwise1(x, |v| scale * v + shift, move |dy, _| dy * scale)
    }

    /// Natural logarithm. Inputs must be strictly positive; feed probabilities
    /// through [`Tape::clamp`] first.
    pub fn log(&self, x: &Tensor) -> Tensor {
        self.elementwise1(x, f64::ln, |dy, v| dy / v)
    }

    pub fn exp(&self, x: &Tensor) -> Tensor {
        self.elementwise1(x, f64::exp, |dy, v| dy * v.exp())
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        self.elementwise1(x, |v| v.max(0.0), |dy, v| if v > 0.0 { dy } else { 0.0 })
    }

    /// Clamp into `[lo, hi]`; the gradient passes only strictly inside the range.
    pub fn clamp(&self, x: &Tensor, lo: f64, hi: f64) -> Tensor {
        self.elementwise1(
            x,
            move |v| v.clamp(lo, hi),
            move |dy, v| if v > lo && v < hi { dy } else { 0.0 },
        )
    }

    // ---- matrix ops ---------------------------------------------------------

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d(a, "matmul lhs")?;
        let (k2, n) = as_2d(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner extents disagree ({m}x{k} vs {k2}x{n})"
            )));
        }
        let out_data = {
            let av = a.data();
            let bv = b.data();
            matmul_raw(&av, &bv, m, k, n)
        };
        let track = self.track(&[a, b]);
        let out = Tensor::build(vec![m, n], out_data, track);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                if a.requires_grad() {
                    // da = dy . b^T
                    let bv = b.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = dy[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += g * bv[p * n + j];
                            }
                        }
                    }
                    drop(bv);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // db = a^T . dy
                    let av = a.data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let dyrow = &dy[i * n..(i + 1) * n];
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbrow[j] += x * dyrow[j];
                            }
                        }
                    }
                    drop(av);
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// Broadcast-add a bias row vector over every row of a 2-D tensor.
    pub fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = as_2d(x, "add_bias input")?;
        if bias.shape() != [n] {
            return Err(Error::Shape(format!(
                "add_bias: bias shape {:?} does not match row width {n}",
                bias.shape()
            )));
        }
        let out_data = {
            let xv = x.data();
            let bv = bias.data();
            let mut out = xv.clone();
            for row in out.chunks_mut(n) {
                for (o, &b) in row.iter_mut().zip(bv.iter()) {
                    *o += b;
                }
            }
            out
        };
        let track = self.track(&[x, bias]);
        let out = Tensor::build(vec![m, n], out_data, track);
        if track {
            let (x, bias, o) = (x.clone(), bias.clone(), out.clone());
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                if x.requires_grad() {
                    x.accumulate_grad(&dy);
                }
                if bias.requires_grad() {
                    let mut db = vec![0.0; n];
                    for row in dy.chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row.iter()) {
                            *d += g;
                        }
                    }
                    bias.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    // ---- convolution ----------------------------------------------------------

    /// 2-D cross-correlation of an NCHW batch with OxCx3x3 kernels.
    ///
    /// Lowered to a per-sample im2col plus a row-major matrix product, so the
    /// inner loops run over contiguous output rows. The column buffers are
    /// kept for the backward pass.
    pub fn conv2d(&self, x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let xs = x.shape();
        let ks = kernel.shape();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("conv2d: input must be NCHW, got {xs:?}")));
        }
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::Shape(format!("conv2d: kernel must be Ox Cx 3x3, got {ks:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kc) = (ks[0], ks[1]);
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, kernel expects {kc}"
            )));
        }
        if stride < 1 {
            return Err(Error::Shape("conv2d: stride must be >= 1".into()));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < 3 || wp < 3 {
            return Err(Error::Shape(format!(
                "conv2d: padded spatial extent {hp}x{wp} smaller than 3x3 kernel"
            )));
        }
        let oh = (hp - 3) / stride + 1;
        let ow = (wp - 3) / stride + 1;
        let ohw = oh * ow;
        let c9 = c * 9;

        let cols: Vec<Vec<f64>> = {
            let xv = x.data();
            let xslice: &[f64] = &xv;
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let xpad =
                        pad_sample(&xslice[i * c * h * w..(i + 1) * c * h * w], c, h, w, pad);
                    im2col(&xpad, c, hp, wp, oh, ow, stride)
                })
                .collect()
        };

        let mut out_data = vec![0.0; n * oc * ohw];
        {
            let kv = kernel.data();
            let kslice: &[f64] = &kv;
            let cols_ref: &[Vec<f64>] = &cols;
            out_data.par_chunks_mut(oc * ohw).enumerate().for_each(|(i, out_i)| {
                matmul_into(kslice, &cols_ref[i], out_i, oc, c9, ohw);
            });
        }

        let track = self.track(&[x, kernel]);
        let out = Tensor::build(vec![n, oc, oh, ow], out_data, track);
        if track {
            let (x, kernel, o) = (x.clone(), kernel.clone(), out.clone());
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                let dy_slice: &[f64] = &dy;
                let cols_ref: &[Vec<f64>] = &cols;
                if x.requires_grad() {
                    let kv = kernel.data();
                    let kslice: &[f64] = &kv;
                    let mut dx = vec![0.0; n * c * h * w];
                    dx.par_chunks_mut(c * h * w).enumerate().for_each(|(i, dx_i)| {
                        // dcol = k^T . dy, then fold the columns back into the image
                        let dy_i = &dy_slice[i * oc * ohw..(i + 1) * oc * ohw];
                        let mut dcol = vec![0.0; c9 * ohw];
                        for co in 0..oc {
                            let dyrow = &dy_i[co * ohw..(co + 1) * ohw];
                            for q in 0..c9 {
                                let kval = kslice[co * c9 + q];
                                if kval == 0.0 {
                                    continue;
                                }
                                let drow = &mut dcol[q * ohw..(q + 1) * ohw];
                                for (d, &g) in drow.iter_mut().zip(dyrow) {
                                    *d += kval * g;
                                }
                            }
                        }
                        col2im(&dcol, dx_i, c, h, w, pad, oh, ow, stride);
                    });
                    drop(kv);
                    x.accumulate_grad(&dx);
                }
                if kernel.requires_grad() {
                    let mut dk = vec![0.0; oc * c9];
                    dk.par_chunks_mut(c9).enumerate().for_each(|(co, dk_o)| {
                        for (i, col) in cols_ref.iter().enumerate() {
                            let dyrow =
                                &dy_slice[(i * oc + co) * ohw..(i * oc + co + 1) * ohw];
                            for (q, dk_q) in dk_o.iter_mut().enumerate() {
                                let crow = &col[q * ohw..(q + 1) * ohw];
                                let mut acc = 0.0;
                                for (&a, &b) in dyrow.iter().zip(crow) {
                                    acc += a * b;
                                }
                                *dk_q += acc;
                            }
                        }
                    });
                    kernel.accumulate_grad(&dk);
                }
            });
        }
        Ok(out)
    }

    /// Average every spatial plane: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&self, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool: input must be NCHW, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let out_data: Vec<f64> = {
            let xv = x.data();
            (0..n * c)
                .map(|pc| xv[pc * plane..(pc + 1) * plane].iter().sum::<f64>() / plane as f64)
                .collect()
        };
        let track = self.track(&[x]);
        let out = Tensor::build(vec![n, c], out_data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                let mut dx = vec![0.0; n * c * plane];
                for pc in 0..n * c {
                    let g = dy[pc] / plane as f64;
                    for v in &mut dx[pc * plane..(pc + 1) * plane] {
                        *v = g;
                    }
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Copy into a new shape with the same element count.
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != x.len() {
            return Err(Error::Shape(format!(
                "reshape: {:?} ({} elems) cannot become {shape:?}",
                x.shape(),
                x.len()
            )));
        }
        let track = self.track(&[x]);
        let out = Tensor::build(shape.to_vec(), x.to_vec(), track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                x.accumulate_grad(&dy);
            });
        }
        Ok(out)
    }

    // ---- gathers / selections -------------------------------------------------

    /// Pick `x[rows[i], cols[i]]` for each pair, producing a vector.
    pub fn gather_pairs(&self, x: &Tensor, rows: &[usize], cols: &[usize]) -> Result<Tensor> {
        let (m, n) = as_2d(x, "gather_pairs input")?;
        if rows.len() != cols.len() {
            return Err(Error::Shape("gather_pairs: rows/cols length mismatch".into()));
        }
        for (&r, &c) in rows.iter().zip(cols) {
            if r >= m || c >= n {
                return Err(Error::Shape(format!(
                    "gather_pairs: index ({r},{c}) outside {m}x{n}"
                )));
            }
        }
        let out_data: Vec<f64> = {
            let xv = x.data();
            rows.iter().zip(cols).map(|(&r, &c)| xv[r * n + c]).collect()
        };
        let track = self.track(&[x]);
        let out = Tensor::build(vec![rows.len().max(1)], out_data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            let rows = rows.to_vec();
            let cols = cols.to_vec();
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                let mut dx = vec![0.0; m * n];
                for (i, (&r, &c)) in rows.iter().zip(&cols).enumerate() {
                    dx[r * n + c] += dy[i];
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Select whole rows of a 2-D tensor.
    pub fn row_select(&self, x: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let (m, n) = as_2d(x, "row_select input")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Shape(format!("row_select: row {bad} outside {m} rows")));
        }
        let out_data: Vec<f64> = {
            let xv = x.data();
            rows.iter().flat_map(|&r| xv[r * n..(r + 1) * n].to_vec()).collect()
        };
        let track = self.track(&[x]);
        let out = Tensor::build(vec![rows.len().max(1), n], out_data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            let rows = rows.to_vec();
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                let mut dx = vec![0.0; m * n];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx[r * n + j] += dy[i * n + j];
                    }
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Multiply column `j` of a 2-D tensor by the constant `weights[j]`.
    pub fn scale_cols(&self, x: &Tensor, weights: &[f64]) -> Result<Tensor> {
        let (m, n) = as_2d(x, "scale_cols input")?;
        if weights.len() != n {
            return Err(Error::Shape(format!(
                "scale_cols: {} weights for {n} columns",
                weights.len()
            )));
        }
        let out_data: Vec<f64> = {
            let xv = x.data();
            xv.chunks(n)
                .flat_map(|row| row.iter().zip(weights).map(|(&v, &w)| v * w).collect::<Vec<_>>())
                .collect()
        };
        let track = self.track(&[x]);
        let out = Tensor::build(vec![m, n], out_data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            let weights = weights.to_vec();
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                let dx: Vec<f64> = dy
                    .chunks(n)
                    .flat_map(|row| {
                        row.iter().zip(&weights).map(|(&g, &w)| g * w).collect::<Vec<_>>()
                    })
                    .collect();
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    // ---- reductions -------------------------------------------------------------

    pub fn sum(&self, x: &Tensor) -> Tensor {
        let total: f64 = x.data().iter().sum();
        let track = self.track(&[x]);
        let out = Tensor::build(vec![1], vec![total], track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                x.accumulate_grad(&vec![dy[0]; x.len()]);
            });
        }
        out
    }

    pub fn mean(&self, x: &Tensor) -> Tensor {
        let len = x.len() as f64;
        let total: f64 = x.data().iter().sum();
        let track = self.track(&[x]);
        let out = Tensor::build(vec![1], vec![total / len], track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                x.accumulate_grad(&vec![dy[0] / len; x.len()]);
            });
        }
        out
    }

    // ---- row-wise softmax family --------------------------------------------------

    /// Softmax over the last axis of a 2-D tensor; each output row sums to 1.
    pub fn softmax(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = as_2d(x, "softmax input")?;
        let mut out_data = vec![0.0; m * n];
        {
            let xv = x.data();
            for (row_out, row_in) in out_data.chunks_mut(n).zip(xv.chunks(n)) {
                softmax_row(row_in, row_out);
            }
        }
        let track = self.track(&[x]);
        let out = Tensor::build(vec![m, n], out_data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                let sv = o.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let s = &sv[r * n..(r + 1) * n];
                    let g = &dy[r * n..(r + 1) * n];
                    let dot: f64 = s.iter().zip(g).map(|(&si, &gi)| si * gi).sum();
                    for j in 0..n {
                        dx[r * n + j] = s[j] * (g[j] - dot);
                    }
                }
                drop(sv);
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Numerically stable log-softmax over the last axis of a 2-D tensor.
    pub fn log_softmax(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = as_2d(x, "log_softmax input")?;
        let mut out_data = vec![0.0; m * n];
        {
            let xv = x.data();
            for (row_out, row_in) in out_data.chunks_mut(n).zip(xv.chunks(n)) {
                let mx = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row_in.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
                for (o, &v) in row_out.iter_mut().zip(row_in) {
                    *o = v - lse;
                }
            }
        }
        let track = self.track(&[x]);
        let out = Tensor::build(vec![m, n], out_data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                let lv = o.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let l = &lv[r * n..(r + 1) * n];
                    let g = &dy[r * n..(r + 1) * n];
                    let gsum: f64 = g.iter().sum();
                    for j in 0..n {
                        dx[r * n + j] = g[j] - l[j].exp() * gsum;
                    }
                }
                drop(lv);
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    // ---- batch normalization ---------------------------------------------------

    /// Training-mode batch normalization with per-channel batch statistics.
    ///
    /// Accepts `[n, c]` (statistics over the batch axis) or `[n, c, h, w]`
    /// (statistics over batch and spatial axes). Variance is the biased 1/m
    /// estimator and `sigma = sqrt(var + xi)`, so sigma is always at least
    /// `sqrt(xi)`.
    pub fn batch_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        xi: f64,
    ) -> Result<BatchNormOut> {
        let (n, c, spatial) = bn_dims(x)?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: gamma/beta must have shape [{c}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let m = (n * spatial) as f64;
        let mut mu = vec![0.0; c];
        let mut sigma = vec![0.0; c];
        let mut xhat = vec![0.0; n * c * spatial];
        let mut out_data = vec![0.0; n * c * spatial];
        {
            let xv = x.data();
            let gv = gamma.data();
            let bv = beta.data();
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    let base = (i * c + ch) * spatial;
                    for p in 0..spatial {
                        s += xv[base + p];
                    }
                }
                let mean = s / m;
                let mut var = 0.0;
                for i in 0..n {
                    let base = (i * c + ch) * spatial;
                    for p in 0..spatial {
                        let d = xv[base + p] - mean;
                        var += d * d;
                    }
                }
                var /= m;
                let sd = (var + xi).sqrt();
                mu[ch] = mean;
                sigma[ch] = sd;
                for i in 0..n {
                    let base = (i * c + ch) * spatial;
                    for p in 0..spatial {
                        let xh = (xv[base + p] - mean) / sd;
                        xhat[base + p] = xh;
                        out_data[base + p] = gv[ch] * xh + bv[ch];
                    }
                }
            }
        }
        let track = self.track(&[x, gamma, beta]);
        let out = Tensor::build(x.shape().to_vec(), out_data, track);
        if track {
            let (x, gamma, beta, o) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
            let sigma_cl = sigma.clone();
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                let gv = gamma.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; n * c * spatial];
                for ch in 0..c {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xh = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for p in 0..spatial {
                            sum_dy += dy[base + p];
                            sum_dy_xh += dy[base + p] * xhat[base + p];
                        }
                    }
                    dbeta[ch] = sum_dy;
                    dgamma[ch] = sum_dy_xh;
                    let coeff = gv[ch] / sigma_cl[ch];
                    let mean_dy = sum_dy / m;
                    let mean_dy_xh = sum_dy_xh / m;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for p in 0..spatial {
                            dx[base + p] = coeff
                                * (dy[base + p] - mean_dy - xhat[base + p] * mean_dy_xh);
                        }
                    }
                }
                drop(gv);
                if x.requires_grad() {
                    x.accumulate_grad(&dx);
                }
                if gamma.requires_grad() {
                    gamma.accumulate_grad(&dgamma);
                }
                if beta.requires_grad() {
                    beta.accumulate_grad(&dbeta);
                }
            });
        }
        Ok(BatchNormOut { out, mu, sigma })
    }

    /// Normalize with externally supplied fixed statistics (inference path).
    pub fn bn_apply_stats(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        mu: &[f64],
        sigma: &[f64],
    ) -> Result<Tensor> {
        let (n, c, spatial) = bn_dims(x)?;
        if gamma.shape() != [c] || beta.shape() != [c] || mu.len() != c || sigma.len() != c {
            return Err(Error::Shape("bn_apply_stats: channel count mismatch".into()));
        }
        let mut out_data = vec![0.0; n * c * spatial];
        {
            let xv = x.data();
            let gv = gamma.data();
            let bv = beta.data();
            for ch in 0..c {
                let (mean, sd) = (mu[ch], sigma[ch]);
                let (g, b) = (gv[ch], bv[ch]);
                for i in 0..n {
                    let base = (i * c + ch) * spatial;
                    for p in 0..spatial {
                        out_data[base + p] = g * (xv[base + p] - mean) / sd + b;
                    }
                }
            }
        }
        let track = self.track(&[x, gamma, beta]);
        let out = Tensor::build(x.shape().to_vec(), out_data, track);
        if track {
            let (x, gamma, beta, o) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
            let mu = mu.to_vec();
            let sigma = sigma.to_vec();
            self.record(&out, move || {
                let Some(dy) = out_grad(&o) else { return };
                let gv = gamma.data();
                let xv = x.data();
                let mut dx = vec![0.0; n * c * spatial];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let coeff = gv[ch] / sigma[ch];
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for p in 0..spatial {
                            let g = dy[base + p];
                            dx[base + p] = g * coeff;
                            dgamma[ch] += g * (xv[base + p] - mu[ch]) / sigma[ch];
                            dbeta[ch] += g;
                        }
                    }
                }
                drop(gv);
                drop(xv);
                if x.requires_grad() {
                    x.accumulate_grad(&dx);
                }
                if gamma.requires_grad() {
                    gamma.accumulate_grad(&dgamma);
                }
                if beta.requires_grad() {
                    beta.accumulate_grad(&dbeta);
                }
            });
        }
        Ok(out)
    }
}

fn as_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Shape(format!("{what}: expected 2-D tensor, got {s:?}"))),
    }
}

fn bn_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        s => Err(Error::Shape(format!("batch_norm: expected [n,c] or [n,c,h,w], got {s:?}"))),
    }
}

pub(crate) fn softmax_row(input: &[f64], out: &mut [f64]) {
    let mx = input.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(input) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_into(a, b, &mut out, m, k, n);
    out
}

fn pad_sample(x: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for r in 0..h {
            let src = &x[(ch * h + r) * w..(ch * h + r) * w + w];
            let dst_base = (ch * hp + r + pad) * wp + pad;
            out[dst_base..dst_base + w].copy_from_slice(src);
        }
    }
    out
}

/// Unfold a padded sample into the `[c*9, oh*ow]` column matrix whose rows
/// are the input values each kernel tap sees, so convolution becomes one
/// row-major matrix product.
fn im2col(
    xpad: &[f64],
    c: usize,
    hp: usize,
    wp: usize,
    oh: usize,
    ow: usize,
    stride: usize,
) -> Vec<f64> {
    let ohw = oh * ow;
    let mut col = vec![0.0; c * 9 * ohw];
    for ci in 0..c {
        let xplane = &xpad[ci * hp * wp..(ci + 1) * hp * wp];
        for kh in 0..3 {
            for kw in 0..3 {
                let q = (ci * 3 + kh) * 3 + kw;
                let crow_all = &mut col[q * ohw..(q + 1) * ohw];
                for r in 0..oh {
                    let src = (r * stride + kh) * wp + kw;
                    let dst = &mut crow_all[r * ow..(r + 1) * ow];
                    if stride == 1 {
                        dst.copy_from_slice(&xplane[src..src + ow]);
                    } else {
                        for (p, d) in dst.iter_mut().enumerate() {
                            *d = xplane[src + p * stride];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold a column-matrix gradient back into an (unpadded) image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &[f64],
    dx: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    stride: usize,
) {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let ohw = oh * ow;
    let mut dxpad = vec![0.0; c * hp * wp];
    for ci in 0..c {
        let dxplane = &mut dxpad[ci * hp * wp..(ci + 1) * hp * wp];
        for kh in 0..3 {
            for kw in 0..3 {
                let q = (ci * 3 + kh) * 3 + kw;
                let crow_all = &dcol[q * ohw..(q + 1) * ohw];
                for r in 0..oh {
                    let dst = (r * stride + kh) * wp + kw;
                    let src = &crow_all[r * ow..(r + 1) * ow];
                    if stride == 1 {
                        let drow = &mut dxplane[dst..dst + ow];
                        for (d, &g) in drow.iter_mut().zip(src) {
                            *d += g;
                        }
                    } else {
                        for (p, &g) in src.iter().enumerate() {
                            dxplane[dst + p * stride] += g;
                        }
                    }
                }
            }
        }
    }
    for ci in 0..c {
        for r in 0..h {
            let src = (ci * hp + r + pad) * wp + pad;
            let dst = (ci * h + r) * w;
            for q in 0..w {
                dx[dst + q] += dxpad[src + q];
            }
        }
    }
}

/// `out += a . b` for row-major `a: m x k`, `b: k x n` (out preallocated, zeroed).
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let tape = Tape::no_grad();
        let eye = t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = t(&[3, 2], vec![5.0, -1.0, 2.5, 0.0, 7.0, 3.0]);
        let out = tape.matmul(&eye, &b).unwrap();
        assert_eq!(out.to_vec(), b.to_vec());
    }

    #[test]
    fn matmul_hand_value() {
        let tape = Tape::no_grad();
        let a = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], vec![5.0, 6.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.to_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::no_grad();
        let a = t(&[2, 3], vec![0.0; 6]);
        let b = t(&[2, 2], vec![0.0; 4]);
        assert!(tape.matmul(&a, &b).is_err());
    }

    #[test]
    fn conv_zero_kernel_annihilates() {
        let tape = Tape::no_grad();
        let x = t(&[1, 1, 5, 5], (0..25).map(|v| v as f64).collect());
        let k = t(&[1, 1, 3, 3], vec![0.0; 9]);
        let out = tape.conv2d(&x, &k, 1, 1).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let tape = Tape::no_grad();
        let data: Vec<f64> = (0..25).map(|v| v as f64 * 0.04).collect();
        let x = t(&[1, 1, 5, 5], data.clone());
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0; // center tap
        let k = t(&[1, 1, 3, 3], kd);
        let out = tape.conv2d(&x, &k, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        assert_eq!(out.to_vec(), data);
    }

    #[test]
    fn conv_matches_direct_triple_loop() {
        use rand::Rng;
        let mut rng = crate::stream::stream(11, 99, 0, 0);
        let x_data: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k_data: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::no_grad();
        let x = t(&[1, 1, 5, 5], x_data.clone());
        let k = t(&[1, 1, 3, 3], k_data.clone());
        let out = tape.conv2d(&x, &k, 1, 1).unwrap();

        // Direct cross-correlation oracle with explicit zero padding.
        let mut expect = vec![0.0; 25];
        for r in 0..5i64 {
            for cc in 0..5i64 {
                let mut acc = 0.0;
                for kh in 0..3i64 {
                    for kw in 0..3i64 {
                        let (ir, ic) = (r + kh - 1, cc + kw - 1);
                        if (0..5).contains(&ir) && (0..5).contains(&ic) {
                            acc += x_data[(ir * 5 + ic) as usize] * k_data[(kh * 3 + kw) as usize];
                        }
                    }
                }
                expect[(r * 5 + cc) as usize] = acc;
            }
        }
        for (a, b) in out.to_vec().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_output_extent_formula() {
        let tape = Tape::no_grad();
        let x = t(&[1, 1, 28, 28], vec![0.0; 784]);
        let k = t(&[4, 1, 3, 3], vec![0.0; 36]);
        let out = tape.conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 4, 14, 14]);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let tape = Tape::no_grad();
        let x = t(&[1, 2, 5, 5], vec![0.0; 50]);
        let k = t(&[1, 3, 3, 3], vec![0.0; 27]);
        assert!(tape.conv2d(&x, &k, 1, 1).is_err());
    }

    #[test]
    fn softmax_uniform_logits() {
        let tape = Tape::no_grad();
        let x = t(&[1, 10], vec![0.37; 10]);
        let p = tape.softmax(&x).unwrap();
        for v in p.to_vec() {
            assert!((v - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::Rng;
        let mut rng = crate::stream::stream(3, 98, 0, 0);
        let tape = Tape::no_grad();
        let data: Vec<f64> = (0..60).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let x = t(&[6, 10], data);
        let p = tape.softmax(&x).unwrap();
        let pv = p.to_vec();
        for row in pv.chunks(10) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn relu_values() {
        let tape = Tape::no_grad();
        let x = t(&[2], vec![-2.0, 3.0]);
        assert_eq!(tape.relu(&x).to_vec(), vec![0.0, 3.0]);
    }

    #[test]
    fn batch_norm_constant_batch_outputs_beta() {
        let tape = Tape::no_grad();
        // Every feature constant across the batch: normalized value must be 0,
        // sigma must be sqrt(xi), output must equal beta.
        let x = t(&[4, 3], vec![2.0, -1.0, 0.5].repeat(4));
        let gamma = t(&[3], vec![1.5, 2.0, 0.5]);
        let beta = t(&[3], vec![0.1, -0.2, 0.3]);
        let xi = 1e-5;
        let bn = tape.batch_norm(&x, &gamma, &beta, xi).unwrap();
        for ch in 0..3 {
            assert!((bn.sigma[ch] - xi.sqrt()).abs() < 1e-15);
        }
        for row in bn.out.to_vec().chunks(3) {
            for (v, b) in row.iter().zip(beta.to_vec()) {
                assert!((v - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_normalizes_channels() {
        use rand::Rng;
        let mut rng = crate::stream::stream(5, 97, 0, 0);
        let tape = Tape::no_grad();
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = t(&[10, 4], data);
        let gamma = t(&[4], vec![1.0; 4]);
        let beta = t(&[4], vec![0.0; 4]);
        let bn = tape.batch_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let ov = bn.out.to_vec();
        for ch in 0..4 {
            let col: Vec<f64> = (0..10).map(|i| ov[i * 4 + ch]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn gather_pairs_and_row_select() {
        let tape = Tape::no_grad();
        let x = t(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = tape.gather_pairs(&x, &[0, 2], &[1, 0]).unwrap();
        assert_eq!(g.to_vec(), vec![2.0, 5.0]);
        let r = tape.row_select(&x, &[2, 0]).unwrap();
        assert_eq!(r.to_vec(), vec![5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn clamp_limits_range() {
        let tape = Tape::no_grad();
        let x = t(&[3], vec![-0.5, 0.5, 1.5]);
        assert_eq!(tape.clamp(&x, 0.0, 1.0).to_vec(), vec![0.0, 0.5, 1.0]);
    }
}
