//! Layer kernels: convolution, batch normalization, ReLU, pooling, linear.
//!
//! Activations flow in NHWC layout; convolution is im2col plus one GEMM per
//! layer, so the GEMM output is already NHWC and no transposes are needed.
//! Each forward returns a cache with exactly what its backward needs; the
//! column matrix is recomputed in backward instead of cached, trading a
//! little compute for a large cut in peak memory.
//!
//! Channel statistics (batch norm, gradient reductions over the batch) are
//! accumulated in f64 regardless of the element type, in a fixed order, so
//! runs are deterministic and the f32 path stays well conditioned.

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};

use super::params::{ParamKind, ParameterSet};
use super::Mode;
use crate::elem::Elem;
use crate::error::{Error, Result};

/// Deferred running-statistics update produced by a train-mode norm forward.
#[derive(Debug, Clone)]
pub struct StatUpdate<F> {
    pub mean_name: String,
    pub var_name: String,
    pub new_mean: Array1<F>,
    pub new_var: Array1<F>,
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
pub struct ConvCache<F> {
    input: Array4<F>,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel;
        let p = self.padding;
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::Input(format!(
                "{}: input {h}x{w} smaller than kernel {k} with padding {p}",
                self.name
            )));
        }
        Ok(((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1))
    }

    pub fn register<F: Elem>(&self, ps: &mut ParameterSet<F>, init: &mut dyn FnMut(&[usize], usize) -> ArrayD<F>) {
        let shape = [self.kernel, self.kernel, self.in_ch, self.out_ch];
        ps.register(&self.weight_name(), ParamKind::ConvWeight, init(&shape, self.fan_in()));
    }

    /// x: (B, H, W, C_in) -> (B, OH, OW, C_out)
    pub fn forward<F: Elem>(&self, ps: &ParameterSet<F>, x: Array4<F>) -> Result<(Array4<F>, ConvCache<F>)> {
        let (b, h, w, c) = x.dim();
        debug_assert_eq!(c, self.in_ch, "{}: input channels", self.name);
        let (oh, ow) = self.out_hw(h, w)?;
        let cols = self.im2col(&x, oh, ow);
        let weight = ps.get(&self.weight_name());
        let w2 = weight
            .view()
            .into_shape_with_order((self.kernel * self.kernel * self.in_ch, self.out_ch))
            .expect("conv weight is contiguous");
        let out2 = cols.dot(&w2);
        let y = out2
            .into_shape_with_order((b, oh, ow, self.out_ch))
            .expect("gemm output is contiguous");
        Ok((y, ConvCache { input: x }))
    }

    /// dy: (B, OH, OW, C_out) -> dx (B, H, W, C_in); accumulates dW.
    pub fn backward<F: Elem>(&self, ps: &mut ParameterSet<F>, cache: ConvCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, h, w, _c) = cache.input.dim();
        let (_, oh, ow, oc) = dy.dim();
        let kkc = self.kernel * self.kernel * self.in_ch;
        let cols = self.im2col(&cache.input, oh, ow);
        let dy2 = dy
            .view()
            .into_shape_with_order((b * oh * ow, oc))
            .expect("dy is contiguous");

        let dw2 = cols.t().dot(&dy2);
        let dw = dw2
            .into_shape_with_order(IxDyn(&[self.kernel, self.kernel, self.in_ch, self.out_ch]))
            .expect("dW is contiguous");
        ps.grad_add(&self.weight_name(), &dw);

        let weight = ps.get(&self.weight_name());
        let w2 = weight
            .view()
            .into_shape_with_order((kkc, self.out_ch))
            .expect("conv weight is contiguous");
        let dcols = dy2.dot(&w2.t());
        self.col2im(&dcols, b, h, w, oh, ow)
    }

    fn im2col<F: Elem>(&self, x: &Array4<F>, oh: usize, ow: usize) -> Array2<F> {
        let (b, h, w, c) = x.dim();
        let k = self.kernel;
        let s = self.stride as isize;
        let p = self.padding as isize;
        let row_len = k * k * c;
        let mut cols = Array2::<F>::zeros((b * oh * ow, row_len));
        let xs = x.as_slice().expect("activations are standard layout");
        let cs = cols.as_slice_mut().unwrap();
        for bi in 0..b {
            for ohi in 0..oh {
                let ih0 = ohi as isize * s - p;
                for owi in 0..ow {
                    let iw0 = owi as isize * s - p;
                    let row = ((bi * oh + ohi) * ow + owi) * row_len;
                    for kh in 0..k {
                        let ih = ih0 + kh as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = (bi * h + ih as usize) * w;
                        for kw in 0..k {
                            let iw = iw0 + kw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let src = (x_row + iw as usize) * c;
                            let dst = row + (kh * k + kw) * c;
                            cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Elem>(&self, dcols: &Array2<F>, b: usize, h: usize, w: usize, oh: usize, ow: usize) -> Array4<F> {
        let k = self.kernel;
        let c = self.in_ch;
        let s = self.stride as isize;
        let p = self.padding as isize;
        let row_len = k * k * c;
        let mut dx = Array4::<F>::zeros((b, h, w, c));
        let ds = dcols.as_slice().expect("dcols is standard layout");
        let xs = dx.as_slice_mut().unwrap();
        for bi in 0..b {
            for ohi in 0..oh {
                let ih0 = ohi as isize * s - p;
                for owi in 0..ow {
                    let iw0 = owi as isize * s - p;
                    let row = ((bi * oh + ohi) * ow + owi) * row_len;
                    for kh in 0..k {
                        let ih = ih0 + kh as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = (bi * h + ih as usize) * w;
                        for kw in 0..k {
                            let iw = iw0 + kw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let dst = (x_row + iw as usize) * c;
                            let src = row + (kh * k + kw) * c;
                            for ci in 0..c {
                                xs[dst + ci] = xs[dst + ci] + ds[src + ci];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub ch: usize,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
pub struct BnCache<F> {
    xhat: Array4<F>,
    invstd: Vec<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, ch: usize) -> Self {
        BatchNorm2d { name: name.into(), ch, momentum: 0.1, eps: 1e-5 }
    }

    pub fn scale_name(&self) -> String {
        format!("{}.scale", self.name)
    }
    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
    pub fn mean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }
    pub fn var_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn register<F: Elem>(&self, ps: &mut ParameterSet<F>) {
        let c = self.ch;
        ps.register(&self.scale_name(), ParamKind::NormScale, ArrayD::ones(IxDyn(&[c])));
        ps.register(&self.bias_name(), ParamKind::NormBias, ArrayD::zeros(IxDyn(&[c])));
        ps.register(&self.mean_name(), ParamKind::RunningMean, ArrayD::zeros(IxDyn(&[c])));
        ps.register(&self.var_name(), ParamKind::RunningVar, ArrayD::ones(IxDyn(&[c])));
    }

    pub fn forward<F: Elem>(
        &self,
        ps: &ParameterSet<F>,
        mut x: Array4<F>,
        mode: Mode,
        stat_sink: &mut Vec<StatUpdate<F>>,
    ) -> (Array4<F>, BnCache<F>) {
        let (b, h, w, c) = x.dim();
        debug_assert_eq!(c, self.ch, "{}: channels", self.name);
        let n = b * h * w;

        let (mean, invstd) = match mode {
            Mode::Train => {
                let mut sum = vec![0f64; c];
                {
                    let xs = x.as_slice().expect("standard layout");
                    for run in xs.chunks_exact(c) {
                        for (acc, &v) in sum.iter_mut().zip(run) {
                            *acc += v.as_f64();
                        }
                    }
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
                let mut sq = vec![0f64; c];
                {
                    let xs = x.as_slice().unwrap();
                    for run in xs.chunks_exact(c) {
                        for ((acc, &v), m) in sq.iter_mut().zip(run).zip(&mean) {
                            let d = v.as_f64() - m;
                            *acc += d * d;
                        }
                    }
                }
                let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
                let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

                // Running statistics are committed by the caller, and only for
                // main-network forwards; subnet forwards drop the update.
                let m = self.momentum;
                let bessel = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                let rm = ps.get(&self.mean_name());
                let rv = ps.get(&self.var_name());
                let new_mean = Array1::from_iter(
                    rm.iter().zip(&mean).map(|(&r, &bm)| F::from_f64((1.0 - m) * r.as_f64() + m * bm)),
                );
                let new_var = Array1::from_iter(
                    rv.iter()
                        .zip(&var)
                        .map(|(&r, &bv)| F::from_f64((1.0 - m) * r.as_f64() + m * bv * bessel)),
                );
                stat_sink.push(StatUpdate {
                    mean_name: self.mean_name(),
                    var_name: self.var_name(),
                    new_mean,
                    new_var,
                });
                (mean, invstd)
            }
            Mode::Eval => {
                let rm = ps.get(&self.mean_name());
                let rv = ps.get(&self.var_name());
                let mean: Vec<f64> = rm.iter().map(|v| v.as_f64()).collect();
                let invstd: Vec<f64> = rv.iter().map(|v| 1.0 / (v.as_f64() + self.eps).sqrt()).collect();
                (mean, invstd)
            }
        };

        // x becomes xhat in place; y is fresh.
        let gamma: Vec<F> = ps.get(&self.scale_name()).iter().copied().collect();
        let beta: Vec<F> = ps.get(&self.bias_name()).iter().copied().collect();
        let mean_f: Vec<F> = mean.iter().map(|&m| F::from_f64(m)).collect();
        let invstd_f: Vec<F> = invstd.iter().map(|&s| F::from_f64(s)).collect();
        let mut y = Array4::<F>::zeros((b, h, w, c));
        {
            let xs = x.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for (xrun, yrun) in xs.chunks_exact_mut(c).zip(ys.chunks_exact_mut(c)) {
                for ci in 0..c {
                    let xh = (xrun[ci] - mean_f[ci]) * invstd_f[ci];
                    xrun[ci] = xh;
                    yrun[ci] = gamma[ci] * xh + beta[ci];
                }
            }
        }
        (y, BnCache { xhat: x, invstd, train: matches!(mode, Mode::Train) })
    }

    pub fn backward<F: Elem>(&self, ps: &mut ParameterSet<F>, cache: BnCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, h, w, c) = cache.xhat.dim();
        let n = (b * h * w) as f64;
        let xh = cache.xhat.as_slice().unwrap();
        let dys = dy.as_slice().expect("standard layout");

        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        for (xrun, dyrun) in xh.chunks_exact(c).zip(dys.chunks_exact(c)) {
            for ci in 0..c {
                let d = dyrun[ci].as_f64();
                dgamma[ci] += d * xrun[ci].as_f64();
                dbeta[ci] += d;
            }
        }
        let dg = ArrayD::from_shape_vec(IxDyn(&[c]), dgamma.iter().map(|&v| F::from_f64(v)).collect()).unwrap();
        let db = ArrayD::from_shape_vec(IxDyn(&[c]), dbeta.iter().map(|&v| F::from_f64(v)).collect()).unwrap();
        ps.grad_add(&self.scale_name(), &dg);
        ps.grad_add(&self.bias_name(), &db);

        let gamma: Vec<f64> = ps.get(&self.scale_name()).iter().map(|v| v.as_f64()).collect();
        let mut dx = Array4::<F>::zeros((b, h, w, c));
        if cache.train {
            // dxhat means reuse the dgamma/dbeta reductions: mean(dxhat) =
            // gamma * dbeta / n and mean(dxhat * xhat) = gamma * dgamma / n.
            let m1: Vec<f64> = (0..c).map(|ci| gamma[ci] * dbeta[ci] / n).collect();
            let m2: Vec<f64> = (0..c).map(|ci| gamma[ci] * dgamma[ci] / n).collect();
            let dxs = dx.as_slice_mut().unwrap();
            for ((xrun, dyrun), dxrun) in xh
                .chunks_exact(c)
                .zip(dys.chunks_exact(c))
                .zip(dxs.chunks_exact_mut(c))
            {
                for ci in 0..c {
                    let dxhat = dyrun[ci].as_f64() * gamma[ci];
                    let v = (dxhat - m1[ci] - xrun[ci].as_f64() * m2[ci]) * cache.invstd[ci];
                    dxrun[ci] = F::from_f64(v);
                }
            }
        } else {
            let scale: Vec<F> = (0..c).map(|ci| F::from_f64(gamma[ci] * cache.invstd[ci])).collect();
            let dxs = dx.as_slice_mut().unwrap();
            for (dyrun, dxrun) in dys.chunks_exact(c).zip(dxs.chunks_exact_mut(c)) {
                for ci in 0..c {
                    dxrun[ci] = dyrun[ci] * scale[ci];
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ReluCache {
    mask: Vec<u8>,
}

/// In-place ReLU; the cache is a byte mask of the active units.
pub fn relu_forward<F: Elem>(mut x: Array4<F>) -> (Array4<F>, ReluCache) {
    let mut mask = vec![0u8; x.len()];
    {
        let xs = x.as_slice_mut().unwrap();
        for (v, m) in xs.iter_mut().zip(mask.iter_mut()) {
            if *v > F::zero() {
                *m = 1;
            } else {
                *v = F::zero();
            }
        }
    }
    (x, ReluCache { mask })
}

pub fn relu_backward<F: Elem>(cache: &ReluCache, mut dy: Array4<F>) -> Array4<F> {
    let dys = dy.as_slice_mut().unwrap();
    for (v, &m) in dys.iter_mut().zip(cache.mask.iter()) {
        if m == 0 {
            *v = F::zero();
        }
    }
    dy
}

// ---------------------------------------------------------------------------
// Global average pooling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GlobalAvgPool;

#[derive(Debug, Clone, Copy)]
pub struct GapCache {
    pub in_dim: (usize, usize, usize, usize),
}

impl GlobalAvgPool {
    /// (B, H, W, C) -> (B, C), spatial mean.
    pub fn forward<F: Elem>(&self, x: &Array4<F>) -> (Array2<F>, GapCache) {
        let (b, h, w, c) = x.dim();
        let scale = F::from_f64(1.0 / (h * w) as f64);
        let mut y = Array2::<F>::zeros((b, c));
        let xs = x.as_slice().unwrap();
        for bi in 0..b {
            let base = bi * h * w * c;
            let yrow = &mut y.as_slice_mut().unwrap()[bi * c..(bi + 1) * c];
            for run in xs[base..base + h * w * c].chunks_exact(c) {
                for (acc, &v) in yrow.iter_mut().zip(run) {
                    *acc = *acc + v;
                }
            }
            for v in yrow.iter_mut() {
                *v = *v * scale;
            }
        }
        (y, GapCache { in_dim: (b, h, w, c) })
    }

    pub fn backward<F: Elem>(&self, cache: &GapCache, dy: &Array2<F>) -> Array4<F> {
        let (b, h, w, c) = cache.in_dim;
        let scale = F::from_f64(1.0 / (h * w) as f64);
        let mut dx = Array4::<F>::zeros((b, h, w, c));
        let dxs = dx.as_slice_mut().unwrap();
        let dys = dy.as_slice().unwrap();
        for bi in 0..b {
            let drow = &dys[bi * c..(bi + 1) * c];
            let base = bi * h * w * c;
            for run in dxs[base..base + h * w * c].chunks_exact_mut(c) {
                for (v, &g) in run.iter_mut().zip(drow) {
                    *v = g * scale;
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug)]
pub struct LinCache<F> {
    input: Array2<F>,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear { name: name.into(), in_dim, out_dim }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }
    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register<F: Elem>(&self, ps: &mut ParameterSet<F>, init: &mut dyn FnMut(&[usize], usize) -> ArrayD<F>) {
        ps.register(
            &self.weight_name(),
            ParamKind::LinearWeight,
            init(&[self.in_dim, self.out_dim], self.in_dim),
        );
        ps.register(&self.bias_name(), ParamKind::LinearBias, ArrayD::zeros(IxDyn(&[self.out_dim])));
    }

    /// y = x W + b with x: (B, in_dim).
    pub fn forward<F: Elem>(&self, ps: &ParameterSet<F>, x: Array2<F>) -> (Array2<F>, LinCache<F>) {
        let w = ps.get(&self.weight_name());
        let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bias = ps.get(&self.bias_name());
        let mut y = x.dot(&w2);
        for mut row in y.rows_mut() {
            for (v, &b) in row.iter_mut().zip(bias.iter()) {
                *v = *v + b;
            }
        }
        (y, LinCache { input: x })
    }

    pub fn backward<F: Elem>(&self, ps: &mut ParameterSet<F>, cache: LinCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dw = cache.input.t().dot(dy);
        ps.grad_add(&self.weight_name(), &dw.into_dyn());
        let mut db = vec![0f64; self.out_dim];
        for row in dy.rows() {
            for (acc, &v) in db.iter_mut().zip(row.iter()) {
                *acc += v.as_f64();
            }
        }
        let db = ArrayD::from_shape_vec(IxDyn(&[self.out_dim]), db.iter().map(|&v| F::from_f64(v)).collect()).unwrap();
        ps.grad_add(&self.bias_name(), &db);
        let w = ps.get(&self.weight_name());
        let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        dy.dot(&w2.t())
    }
}

