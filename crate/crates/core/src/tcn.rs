//! Multi-scale temporal convolution: four parallel branches of width C/4
//! (kernel-5 conv, kernel-5 dilation-2 conv, window-3 max-pool, plain 1x1),
//! each convolving along time only, concatenated along channels.

use std::hash::Hasher;

use ndarray::{s, Array2, Array3, ArrayView2, Ix2, Ix3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    join, mat, subsample_frames, uniform_fan_in, upsample_frames_grad, Activation, BatchNorm, BnCache, Feat, Param,
    ParamKind, ParamMut, ParamRef, Parameterized,
};
use crate::par;

pub const KERNEL: usize = 5;
pub const DILATIONS: [usize; 2] = [1, 2];
pub const POOL_WINDOW: usize = 3;

pub fn output_frames(frames: usize, stride: usize) -> usize {
    frames.div_ceil(stride)
}

/// `y = Wᵀ x` over channels, `W` being `C_in x C_out`.
pub fn pointwise(w: ArrayView2<f64>, x: &Feat) -> Feat {
    let (_, t, v) = x.dim();
    w.t().dot(&mat(x)).into_shape_with_order((w.ncols(), t, v)).expect("contiguous")
}

/// Returns `(dx, dW)`.
pub fn pointwise_backward(w: ArrayView2<f64>, x: &Feat, dy: &Feat) -> (Feat, Array2<f64>) {
    let (c, t, v) = x.dim();
    let dw = mat(x).dot(&mat(dy).t());
    let dx = w.dot(&mat(dy)).into_shape_with_order((c, t, v)).expect("contiguous");
    (dx, dw)
}

/// Frames read by tap `k` for every output frame, laid out `C x (T_out*V)`.
fn gather_tap(x: &Feat, tap: usize, dilation: usize, stride: usize) -> Array2<f64> {
    let (c, t, v) = x.dim();
    let t_out = output_frames(t, stride);
    let half = (KERNEL / 2) as isize;
    let offset = (tap as isize - half) * dilation as isize;
    let mut g = Array2::zeros((c, t_out * v));
    for to in 0..t_out {
        let src = (to * stride) as isize + offset;
        if src < 0 || src >= t as isize {
            continue;
        }
        let src = src as usize;
        for ci in 0..c {
            for vi in 0..v {
                g[[ci, to * v + vi]] = x[[ci, src, vi]];
            }
        }
    }
    g
}

fn scatter_tap(dx: &mut Feat, g: &Array2<f64>, tap: usize, dilation: usize, stride: usize) {
    let (c, t, v) = dx.dim();
    let t_out = output_frames(t, stride);
    let half = (KERNEL / 2) as isize;
    let offset = (tap as isize - half) * dilation as isize;
    for to in 0..t_out {
        let src = (to * stride) as isize + offset;
        if src < 0 || src >= t as isize {
            continue;
        }
        let src = src as usize;
        for ci in 0..c {
            for vi in 0..v {
                dx[[ci, src, vi]] += g[[ci, to * v + vi]];
            }
        }
    }
}

/// Zero-padded temporal convolution with `W` shaped `(C_out, C_in, KERNEL)`.
pub fn temporal_conv(w: &Array3<f64>, x: &Feat, dilation: usize, stride: usize) -> Feat {
    let (_, t, v) = x.dim();
    let t_out = output_frames(t, stride);
    let mut out = Array2::<f64>::zeros((w.dim().0, t_out * v));
    for tap in 0..KERNEL {
        let g = gather_tap(x, tap, dilation, stride);
        ndarray::linalg::general_mat_mul(1.0, &w.slice(s![.., .., tap]), &g, 1.0, &mut out);
    }
    out.into_shape_with_order((w.dim().0, t_out, v)).expect("contiguous")
}

/// Returns `(dx, dW)`.
pub fn temporal_conv_backward(w: &Array3<f64>, x: &Feat, dy: &Feat, dilation: usize, stride: usize) -> (Feat, Array3<f64>) {
    let mut dw = Array3::zeros(w.raw_dim());
    let mut dx = Array3::zeros(x.raw_dim());
    let dym = mat(dy);
    for tap in 0..KERNEL {
        let g = gather_tap(x, tap, dilation, stride);
        dw.slice_mut(s![.., .., tap]).assign(&dym.dot(&g.t()));
        let dg = w.slice(s![.., .., tap]).t().dot(&dym);
        scatter_tap(&mut dx, &dg, tap, dilation, stride);
    }
    (dx, dw)
}

/// Max over a centered window of 3 frames; returns values and source frames.
pub fn temporal_max_pool(x: &Feat, stride: usize) -> (Feat, Array3<usize>) {
    let (c, t, v) = x.dim();
    let t_out = output_frames(t, stride);
    let mut out = Array3::zeros((c, t_out, v));
    let mut arg = Array3::zeros((c, t_out, v));
    for ci in 0..c {
        for to in 0..t_out {
            let center = to * stride;
            let lo = center.saturating_sub(1);
            let hi = (center + 1).min(t - 1);
            for vi in 0..v {
                let mut best = lo;
                for ti in lo + 1..=hi {
                    if x[[ci, ti, vi]] > x[[ci, best, vi]] {
                        best = ti;
                    }
                }
                out[[ci, to, vi]] = x[[ci, best, vi]];
                arg[[ci, to, vi]] = best;
            }
        }
    }
    (out, arg)
}

pub fn temporal_max_pool_backward(arg: &Array3<usize>, dy: &Feat, frames: usize) -> Feat {
    let (c, t_out, v) = dy.dim();
    let mut dx = Array3::zeros((c, frames, v));
    for ci in 0..c {
        for to in 0..t_out {
            for vi in 0..v {
                dx[[ci, arg[[ci, to, vi]], vi]] += dy[[ci, to, vi]];
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct MsTc {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub activation: Activation,
    /// One `C_in x C_out/4` reduction per branch.
    pub reduce: Vec<Param<Ix2>>,
    pub reduce_bn: Vec<BatchNorm>,
    /// `(C_out/4, C_out/4, 5)` kernels of the two convolution branches.
    pub conv: Vec<Param<Ix3>>,
    /// Output norms of the conv and pool branches.
    pub out_bn: Vec<BatchNorm>,
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    reduce_bn: BnCache,
    activated: Vec<Feat>,
    pool_arg: Vec<Array3<usize>>,
    out_bn: Option<BnCache>,
}

#[derive(Debug, Clone)]
pub struct MsTcCache {
    frames: usize,
    branches: Vec<BranchCache>,
}

impl MsTcCache {
    pub(crate) fn hash_pattern<H: Hasher>(&self, activation: Activation, h: &mut H) {
        for b in &self.branches {
            activation.hash_pattern(&b.activated, h);
            for a in &b.pool_arg {
                for &i in a {
                    h.write_usize(i);
                }
            }
        }
    }
}

impl MsTc {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, stride: usize, activation: Activation, rng: &mut R) -> Result<Self> {
        if !out_channels.is_multiple_of(4) || out_channels == 0 {
            return Err(Error::ChannelSplitError { channels: out_channels, parts: 4 });
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!("temporal stride {stride} not in {{1, 2}}")));
        }
        let width = out_channels / 4;
        Ok(Self {
            in_channels,
            out_channels,
            stride,
            activation,
            reduce: (0..4)
                .map(|_| Param::new(uniform_fan_in((in_channels, width), in_channels, rng), ParamKind::Weight))
                .collect(),
            reduce_bn: (0..4).map(|_| BatchNorm::new(width)).collect(),
            conv: (0..2)
                .map(|_| Param::new(uniform_fan_in((width, width, KERNEL), width * KERNEL, rng), ParamKind::Weight))
                .collect(),
            out_bn: (0..3).map(|_| BatchNorm::new(width)).collect(),
        })
    }

    fn width(&self) -> usize {
        self.out_channels / 4
    }

    pub fn forward(&self, xs: &[Feat], train: bool) -> (Vec<Feat>, MsTcCache) {
        let frames = xs.first().map_or(0, |x| x.dim().1);
        let stride = self.stride;
        let t_out = output_frames(frames, stride);
        let width = self.width();
        let mut outs: Vec<Feat> = xs.iter().map(|x| Array3::zeros((self.out_channels, t_out, x.dim().2))).collect();
        let mut branches = Vec::with_capacity(4);
        #[allow(clippy::needless_range_loop)]
        for b in 0..4 {
            let w = self.reduce[b].value.view();
            let reduced = par::map(xs, |x| {
                if b == 3 {
                    pointwise(w, &subsample_frames(x, stride))
                } else {
                    pointwise(w, x)
                }
            });
            let (normed, reduce_bn) = self.reduce_bn[b].forward(&reduced, train);
            let (result, activated, pool_arg, out_bn) = if b == 3 {
                (normed, Vec::new(), Vec::new(), None)
            } else {
                let mut activated = normed;
                for a in &mut activated {
                    self.activation.apply(a);
                }
                let (op_out, pool_arg) = if b < 2 {
                    let kernel = &self.conv[b].value;
                    (par::map(&activated, |a| temporal_conv(kernel, a, DILATIONS[b], stride)), Vec::new())
                } else {
                    par::map(&activated, |a| temporal_max_pool(a, stride)).into_iter().unzip()
                };
                let (y, cache) = self.out_bn[b].forward(&op_out, train);
                (y, activated, pool_arg, Some(cache))
            };
            for (o, r) in outs.iter_mut().zip(&result) {
                o.slice_mut(s![b * width..(b + 1) * width, .., ..]).assign(r);
            }
            branches.push(BranchCache { reduce_bn, activated, pool_arg, out_bn });
        }
        (outs, MsTcCache { frames, branches })
    }

    /// Needs the forward inputs again for the reduction gradients.
    pub fn backward(&mut self, xs: &[Feat], cache: &MsTcCache, dys: &[Feat]) -> Vec<Feat> {
        let width = self.width();
        let stride = self.stride;
        let mut dxs: Vec<Feat> = xs.iter().map(|x| Array3::zeros(x.raw_dim())).collect();
        for b in (0..4).rev() {
            let bc = &cache.branches[b];
            let d_branch: Vec<Feat> = dys.iter().map(|d| d.slice(s![b * width..(b + 1) * width, .., ..]).to_owned()).collect();
            let d_normed = if b == 3 {
                d_branch
            } else {
                let d_op = self.out_bn[b].backward(bc.out_bn.as_ref().expect("op branch"), &d_branch);
                let mut d_act: Vec<Feat> = if b < 2 {
                    let kernel = &self.conv[b].value;
                    let res = par::map_range(d_op.len(), |i| {
                        temporal_conv_backward(kernel, &bc.activated[i], &d_op[i], DILATIONS[b], stride)
                    });
                    let mut dacts = Vec::with_capacity(res.len());
                    for (da, dw) in res {
                        self.conv[b].grad += &dw;
                        dacts.push(da);
                    }
                    dacts
                } else {
                    par::map_range(d_op.len(), |i| temporal_max_pool_backward(&bc.pool_arg[i], &d_op[i], cache.frames))
                };
                for (d, a) in d_act.iter_mut().zip(&bc.activated) {
                    self.activation.backward(a, d);
                }
                d_act
            };
            let d_reduced = self.reduce_bn[b].backward(&bc.reduce_bn, &d_normed);
            let w = self.reduce[b].value.view();
            let res = par::map_range(xs.len(), |i| {
                if b == 3 {
                    let sub = subsample_frames(&xs[i], stride);
                    let (dsub, dw) = pointwise_backward(w, &sub, &d_reduced[i]);
                    (upsample_frames_grad(&dsub, xs[i].dim().1, stride), dw)
                } else {
                    pointwise_backward(w, &xs[i], &d_reduced[i])
                }
            });
            for (dx, (d, dw)) in dxs.iter_mut().zip(res) {
                *dx += &d;
                self.reduce[b].grad += &dw;
            }
        }
        dxs
    }

    pub fn commit(&mut self, cache: &MsTcCache) {
        for (b, bc) in cache.branches.iter().enumerate() {
            self.reduce_bn[b].commit(&bc.reduce_bn);
            if let Some(c) = &bc.out_bn {
                self.out_bn[b].commit(c);
            }
        }
    }

    pub fn flops(&self, frames: usize, joints: usize) -> u64 {
        let (cin, w) = (self.in_channels as u64, self.width() as u64);
        let t = frames as u64;
        let t_out = output_frames(frames, self.stride) as u64;
        let v = joints as u64;
        let reduce = 3 * 2 * cin * w * t * v + 2 * cin * w * t_out * v;
        let convs = 2 * 2 * w * w * KERNEL as u64 * t_out * v;
        reduce + convs
    }
}

impl Parameterized for MsTc {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for b in 0..4 {
            let p = join(prefix, &format!("branch{b}"));
            out.push(self.reduce[b].view(join(&p, "reduce")));
            self.reduce_bn[b].visit(&join(&p, "reduce_bn"), out);
            if b < 2 {
                out.push(self.conv[b].view(join(&p, "conv")));
            }
            if b < 3 {
                self.out_bn[b].visit(&join(&p, "out_bn"), out);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        let mut conv = self.conv.iter_mut();
        let mut out_bn = self.out_bn.iter_mut();
        for (b, (reduce, reduce_bn)) in self.reduce.iter_mut().zip(self.reduce_bn.iter_mut()).enumerate() {
            let p = join(prefix, &format!("branch{b}"));
            out.push(reduce.view_mut(join(&p, "reduce")));
            reduce_bn.visit_mut(&join(&p, "reduce_bn"), out);
            if b < 2 {
                out.push(conv.next().expect("two conv branches").view_mut(join(&p, "conv")));
            }
            if b < 3 {
                out_bn.next().expect("three op branches").visit_mut(&join(&p, "out_bn"), out);
            }
        }
    }
}

/// Shortcut around a layer: identity, or a strided 1x1 projection plus norm
/// when channel count or frame rate changes.
#[derive(Debug, Clone)]
pub struct Residual {
    pub stride: usize,
    pub projection: Option<(Param<Ix2>, BatchNorm)>,
}

#[derive(Debug, Clone)]
pub struct ResidualCache {
    bn: Option<BnCache>,
}

impl Residual {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let projection = (in_channels != out_channels || stride != 1).then(|| {
            (
                Param::new(uniform_fan_in((in_channels, out_channels), in_channels, rng), ParamKind::Weight),
                BatchNorm::new(out_channels),
            )
        });
        Self { stride, projection }
    }

    pub fn forward(&self, xs: &[Feat], train: bool) -> (Vec<Feat>, ResidualCache) {
        match &self.projection {
            None => (xs.to_vec(), ResidualCache { bn: None }),
            Some((w, bn)) => {
                let stride = self.stride;
                let w = w.value.view();
                let projected = par::map(xs, |x| pointwise(w, &subsample_frames(x, stride)));
                let (y, cache) = bn.forward(&projected, train);
                (y, ResidualCache { bn: Some(cache) })
            }
        }
    }

    pub fn backward(&mut self, xs: &[Feat], cache: &ResidualCache, dys: &[Feat]) -> Vec<Feat> {
        let stride = self.stride;
        match &mut self.projection {
            None => dys.to_vec(),
            Some((w, bn)) => {
                let d_proj = bn.backward(cache.bn.as_ref().expect("projection cache"), dys);
                let wv = w.value.view();
                let res = par::map_range(xs.len(), |i| {
                    let sub = subsample_frames(&xs[i], stride);
                    let (dsub, dw) = pointwise_backward(wv, &sub, &d_proj[i]);
                    (upsample_frames_grad(&dsub, xs[i].dim().1, stride), dw)
                });
                let mut dxs = Vec::with_capacity(res.len());
                for (dx, dw) in res {
                    w.grad += &dw;
                    dxs.push(dx);
                }
                dxs
            }
        }
    }

    pub fn commit(&mut self, cache: &ResidualCache) {
        if let (Some((_, bn)), Some(c)) = (&mut self.projection, &cache.bn) {
            bn.commit(c);
        }
    }

    pub fn flops(&self, frames: usize, joints: usize) -> u64 {
        match &self.projection {
            None => 0,
            Some((w, _)) => {
                let (ci, co) = w.value.dim();
                2 * (ci * co * output_frames(frames, self.stride) * joints) as u64
            }
        }
    }
}

impl Parameterized for Residual {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        if let Some((w, bn)) = &self.projection {
            out.push(w.view(join(prefix, "proj")));
            bn.visit(&join(prefix, "bn"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        if let Some((w, bn)) = &mut self.projection {
            out.push(w.view_mut(join(prefix, "proj")));
            bn.visit_mut(&join(prefix, "bn"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random3(r: &mut impl Rng, shape: (usize, usize, usize)) -> Feat {
        Array3::from_shape_simple_fn(shape, || r.random_range(-1.0..1.0))
    }

    fn conv_oracle(w: &Array3<f64>, x: &Feat, dilation: usize, stride: usize) -> Feat {
        let (ci, t, v) = x.dim();
        let co = w.dim().0;
        let t_out = t.div_ceil(stride);
        let mut out = Array3::zeros((co, t_out, v));
        for o in 0..co {
            for to in 0..t_out {
                for vi in 0..v {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for k in 0..5 {
                            let src = (to * stride) as isize + (k as isize - 2) * dilation as isize;
                            if (0..t as isize).contains(&src) {
                                acc += w[[o, i, k]] * x[[i, src as usize, vi]];
                            }
                        }
                    }
                    out[[o, to, vi]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut r = rng(1);
        for (dilation, stride) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
            let x = random3(&mut r, (3, 9, 4));
            let w = random3(&mut r, (2, 3, 5));
            let a = temporal_conv(&w, &x, dilation, stride);
            let b = conv_oracle(&w, &x, dilation, stride);
            assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn conv_and_pool_backward_are_adjoint() {
        let mut r = rng(2);
        for (dilation, stride) in [(1, 1), (2, 2)] {
            let x = random3(&mut r, (3, 8, 2));
            let w = random3(&mut r, (2, 3, 5));
            let dy = random3(&mut r, (2, 8usize.div_ceil(stride), 2));
            let (dx, dw) = temporal_conv_backward(&w, &x, &dy, dilation, stride);
            let y = temporal_conv(&w, &x, dilation, stride);
            // linear in x and in w: <dy, y> = <dx, x> = <dw, w>
            let lhs = (&dy * &y).sum();
            assert!((lhs - (&dx * &x).sum()).abs() < 1e-10);
            assert!((lhs - (&dw * &w).sum()).abs() < 1e-10);
        }
        let x = random3(&mut r, (2, 7, 3));
        let (y, arg) = temporal_max_pool(&x, 2);
        let dx = temporal_max_pool_backward(&arg, &y, 7);
        assert!(((&dx * &x).sum() - (&y * &y).sum()).abs() < 1e-12);
    }

    #[test]
    fn stride_two_halves_frames() {
        let mut r = rng(3);
        let m = MsTc::new(8, 8, 2, Activation::Relu, &mut r).unwrap();
        let (y, _) = m.forward(&[random3(&mut r, (8, 8, 3))], true);
        assert_eq!(y[0].dim(), (8, 4, 3));
        let (y, _) = m.forward(&[random3(&mut r, (8, 7, 3))], true);
        assert_eq!(y[0].dim(), (8, 4, 3));
    }

    #[test]
    fn delta_kernels_reproduce_remapped_input() {
        let mut r = rng(4);
        let mut m = MsTc::new(8, 8, 1, Activation::Relu, &mut r).unwrap();
        for b in 0..4 {
            let mut w = Array2::zeros((8, 2));
            w[[2 * b, 0]] = 1.0;
            w[[2 * b + 1, 1]] = 1.0;
            m.reduce[b].value = w;
        }
        for c in &mut m.conv {
            c.value.fill(0.0);
            for i in 0..2 {
                c.value[[i, i, 2]] = 1.0;
            }
        }
        // a single nonzero frame survives the window-3 max-pool only at that frame
        // and its two neighbours; inference norms with unit statistics are identities
        let mut x = Array3::zeros((8, 6, 3));
        for c in 0..8 {
            for v in 0..3 {
                x[[c, 2, v]] = 1.0 + (c * 3 + v) as f64 * 0.1;
            }
        }
        let (y, _) = m.forward(std::slice::from_ref(&x), false);
        let scale = 1.0 / (1.0 + crate::nn::BN_EPS).sqrt();
        for c in 0..8 {
            for t in 0..6 {
                for v in 0..3 {
                    let direct = x[[c, t, v]] * scale;
                    let expect = if (4..6).contains(&c) {
                        // pool branch: max over neighbouring frames, normalized twice
                        let m = (t.saturating_sub(1)..=(t + 1).min(5)).map(|s| x[[c, s, v]]).fold(0.0, f64::max);
                        m * scale * scale
                    } else if c < 4 {
                        direct * scale
                    } else {
                        direct
                    };
                    assert!((y[0][[c, t, v]] - expect).abs() < 1e-12, "c={c} t={t}");
                }
            }
        }
    }

    #[test]
    fn joints_do_not_mix() {
        let mut r = rng(5);
        let m = MsTc::new(8, 8, 1, Activation::Relu, &mut r).unwrap();
        let x = random3(&mut r, (8, 10, 4));
        let mut x2 = x.clone();
        for c in 0..8 {
            for t in 0..10 {
                x2[[c, t, 1]] += 0.5;
            }
        }
        let (y, _) = m.forward(&[x, x2], false);
        for v in [0, 2, 3] {
            for c in 0..8 {
                for t in 0..10 {
                    assert_eq!(y[0][[c, t, v]], y[1][[c, t, v]]);
                }
            }
        }
    }

    #[test]
    fn dilated_branch_receptive_field_is_nine_frames() {
        let mut r = rng(6);
        let x = random3(&mut r, (3, 15, 2));
        let w = random3(&mut r, (3, 3, 5));
        let base = temporal_conv(&w, &x, 2, 1);
        for t in 0..15 {
            let mut p = x.clone();
            p[[1, t, 0]] += 1.0;
            let y = temporal_conv(&w, &p, 2, 1);
            let changed = (y[[0, 7, 0]] - base[[0, 7, 0]]).abs() > 0.0 || (y[[2, 7, 0]] - base[[2, 7, 0]]).abs() > 0.0;
            if (t as isize - 7).abs() > 4 {
                assert!(!changed, "frame {t}");
            }
        }
    }
}
