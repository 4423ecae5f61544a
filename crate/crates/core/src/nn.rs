//! Shared building blocks: learnable parameters, batch normalization,
//! activations and the matrix views used by every layer.

use std::hash::Hasher;

use ndarray::{Array, Array1, Array3, ArrayView2, ArrayViewMut2, Dimension, Zip};
use rand::Rng;

use crate::par;

pub type Feat = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable, weight decay applies.
    Weight,
    /// Learnable, excluded from weight decay (norm affine, fusion gains, hyper-joints).
    NoDecay,
    /// Persistent state that is not learned (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
    pub kind: ParamKind,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f64, D>, kind: ParamKind) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad, kind }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn view(&self, name: String) -> ParamRef<'_> {
        ParamRef {
            name,
            shape: self.value.shape().to_vec(),
            value: self.value.as_slice().expect("parameters are contiguous"),
            grad: self.grad.as_slice().expect("parameters are contiguous"),
            kind: self.kind,
        }
    }

    pub fn view_mut(&mut self, name: String) -> ParamMut<'_> {
        ParamMut {
            name,
            shape: self.value.shape().to_vec(),
            value: self.value.as_slice_mut().expect("parameters are contiguous"),
            grad: self.grad.as_slice_mut().expect("parameters are contiguous"),
            kind: self.kind,
        }
    }
}

pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a [f64],
    pub grad: &'a [f64],
    pub kind: ParamKind,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
    pub kind: ParamKind,
}

/// Anything that owns named parameters.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>);

    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform fan-in initialization, bound `1/sqrt(fan_in)`.
pub fn uniform_fan_in<D, Sh, R>(shape: Sh, fan_in: usize, rng: &mut R) -> Array<f64, D>
where
    D: Dimension,
    Sh: ndarray::ShapeBuilder<Dim = D>,
    R: Rng,
{
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Every nonlinearity replaced by the identity; used by linear gradient checks.
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        [Activation::Relu, Activation::Identity]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown activation {s:?}")))
    }
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn apply(self, x: &mut Feat) {
        if self == Activation::Relu {
            x.mapv_inplace(|v| v.max(0.0));
        }
    }

    /// Backward through the activation given its output.
    pub fn backward(self, y: &Feat, dy: &mut Feat) {
        if self == Activation::Relu {
            Zip::from(dy).and(y).for_each(|d, &o| {
                if o <= 0.0 {
                    *d = 0.0;
                }
            });
        }
    }

    pub(crate) fn hash_pattern<H: Hasher>(self, ys: &[Feat], h: &mut H) {
        if self == Activation::Relu {
            for y in ys {
                hash_signs(y.iter(), h);
            }
        }
    }
}

pub(crate) fn hash_signs<'a, H: Hasher>(vals: impl Iterator<Item = &'a f64>, h: &mut H) {
    let mut word = 0u64;
    let mut n = 0;
    for &v in vals {
        word = (word << 1) | u64::from(v > 0.0);
        n += 1;
        if n == 64 {
            h.write_u64(word);
            word = 0;
            n = 0;
        }
    }
    h.write_u64(word);
}

/// `C x T x V` feature as a `C x (T*V)` matrix.
pub fn mat(x: &Feat) -> ArrayView2<'_, f64> {
    let (c, t, v) = x.dim();
    ArrayView2::from_shape((c, t * v), x.as_slice().expect("standard layout"))
        .expect("shape matches")
}

pub fn mat_mut(x: &mut Feat) -> ArrayViewMut2<'_, f64> {
    let (c, t, v) = x.dim();
    ArrayViewMut2::from_shape((c, t * v), x.as_slice_mut().expect("standard layout"))
        .expect("shape matches")
}

/// `C x T x V` feature as a `(C*T) x V` matrix.
pub fn rows(x: &Feat) -> ArrayView2<'_, f64> {
    let (c, t, v) = x.dim();
    ArrayView2::from_shape((c * t, v), x.as_slice().expect("standard layout"))
        .expect("shape matches")
}

pub fn add_assign_all(dst: &mut [Feat], src: &[Feat]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sum_feats(a: &[Feat], b: &[Feat]) -> Vec<Feat> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Keeps every `stride`-th frame starting at frame 0.
pub fn subsample_frames(x: &Feat, stride: usize) -> Feat {
    if stride == 1 {
        return x.clone();
    }
    let (c, t, v) = x.dim();
    let t_out = t.div_ceil(stride);
    Array3::from_shape_fn((c, t_out, v), |(ci, ti, vi)| x[[ci, ti * stride, vi]])
}

pub fn upsample_frames_grad(dy: &Feat, t_in: usize, stride: usize) -> Feat {
    if stride == 1 {
        return dy.clone();
    }
    let (c, t_out, v) = dy.dim();
    let mut dx = Array3::zeros((c, t_in, v));
    for ci in 0..c {
        for ti in 0..t_out {
            for vi in 0..v {
                dx[[ci, ti * stride, vi]] = dy[[ci, ti, vi]];
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over (batch, time, joint).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param<ndarray::Ix1>,
    pub beta: Param<ndarray::Ix1>,
    pub running_mean: Param<ndarray::Ix1>,
    pub running_var: Param<ndarray::Ix1>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<Feat>,
    pub inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
    pub count: usize,
    pub train: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels), ParamKind::NoDecay),
            beta: Param::new(Array1::zeros(channels), ParamKind::NoDecay),
            running_mean: Param::new(Array1::zeros(channels), ParamKind::Buffer),
            running_var: Param::new(Array1::ones(channels), ParamKind::Buffer),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&self, xs: &[Feat], train: bool) -> (Vec<Feat>, BnCache) {
        let c = self.channels();
        let (mean, var, count) = if train {
            let count: usize = xs.iter().map(|x| x.len() / c).sum();
            let sums = par::map(xs, |x| mat(x).sum_axis(ndarray::Axis(1)));
            let mut mean = Array1::zeros(c);
            for s in &sums {
                mean += s;
            }
            mean /= count as f64;
            let sq = par::map(xs, |x| {
                let m = mat(x);
                Array1::from_shape_fn(c, |ci| m.row(ci).iter().map(|&v| (v - mean[ci]).powi(2)).sum::<f64>())
            });
            let mut var = Array1::zeros(c);
            for s in &sq {
                var += s;
            }
            var /= count as f64;
            (mean, var, count)
        } else {
            (self.running_mean.value.clone(), self.running_var.value.clone(), 0)
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let gamma = &self.gamma.value;
        let beta = &self.beta.value;
        let pairs: Vec<(Feat, Feat)> = par::map(xs, |x| {
            let mut xhat = x.clone();
            let mut y = x.clone();
            {
                let mut xm = mat_mut(&mut xhat);
                let mut ym = mat_mut(&mut y);
                for ci in 0..c {
                    let (m, s, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
                    for (xh, yv) in xm.row_mut(ci).iter_mut().zip(ym.row_mut(ci).iter_mut()) {
                        *xh = (*xh - m) * s;
                        *yv = g * *xh + b;
                    }
                }
            }
            (xhat, y)
        });
        let (xhat, ys): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let cache = BnCache { xhat, inv_std, batch_mean: mean, batch_var: var, count, train };
        (ys, cache)
    }

    pub fn backward(&mut self, cache: &BnCache, dys: &[Feat]) -> Vec<Feat> {
        let c = self.channels();
        let partial = par::map_range(dys.len(), |i| {
            let dy = mat(&dys[i]);
            let xh = mat(&cache.xhat[i]);
            let mut dg = Array1::zeros(c);
            let mut db = Array1::zeros(c);
            for ci in 0..c {
                dg[ci] = dy.row(ci).dot(&xh.row(ci));
                db[ci] = dy.row(ci).sum();
            }
            (dg, db)
        });
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        for (dg, db) in &partial {
            dgamma += dg;
            dbeta += db;
        }
        self.gamma.grad += &dgamma;
        self.beta.grad += &dbeta;
        let gamma = &self.gamma.value;
        let inv_std = &cache.inv_std;
        if cache.train {
            let m = cache.count as f64;
            par::map_range(dys.len(), |i| {
                let mut dx = dys[i].clone();
                let xh = mat(&cache.xhat[i]);
                let mut dxm = mat_mut(&mut dx);
                for ci in 0..c {
                    let k = gamma[ci] * inv_std[ci];
                    let mb = dbeta[ci] / m;
                    let mg = dgamma[ci] / m;
                    for (d, &x) in dxm.row_mut(ci).iter_mut().zip(xh.row(ci)) {
                        *d = k * (*d - mb - x * mg);
                    }
                }
                dx
            })
        } else {
            par::map(dys, |dy| {
                let mut dx = dy.clone();
                let mut dxm = mat_mut(&mut dx);
                for ci in 0..c {
                    let k = gamma[ci] * inv_std[ci];
                    dxm.row_mut(ci).mapv_inplace(|d| d * k);
                }
                dx
            })
        }
    }

    /// Folds the batch statistics of a training forward into the running estimates.
    pub fn commit(&mut self, cache: &BnCache) {
        if !cache.train {
            return;
        }
        let n = cache.count as f64;
        let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        Zip::from(&mut self.running_mean.value)
            .and(&cache.batch_mean)
            .for_each(|r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
        Zip::from(&mut self.running_var.value)
            .and(&cache.batch_var)
            .for_each(|r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbiased);
    }
}

impl Parameterized for BatchNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(self.gamma.view(join(prefix, "gamma")));
        out.push(self.beta.view(join(prefix, "beta")));
        out.push(self.running_mean.view(join(prefix, "running_mean")));
        out.push(self.running_var.view(join(prefix, "running_var")));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push(self.gamma.view_mut(join(prefix, "gamma")));
        out.push(self.beta.view_mut(join(prefix, "beta")));
        out.push(self.running_mean.view_mut(join(prefix, "running_mean")));
        out.push(self.running_var.view_mut(join(prefix, "running_var")));
    }
}
