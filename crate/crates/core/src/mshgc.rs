//! Multi-scale hypergraph convolution.
//!
//! The input channels are split into `B` branches. Each branch sees the
//! physical topology plus its own adaptive hypergraph (at its own K) built
//! over the real joints and the branch's slice of the learnable hyper-joints,
//! then transforms its channels; branch outputs are concatenated.

use std::hash::Hasher;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Ix1, Ix2, Ix3};
use rand::Rng;

use crate::ahc::{AhcForward, AhcWeights};
use crate::error::{Error, Result};
use crate::nn::{join, mat, mat_mut, rows, uniform_fan_in, Feat, Param, ParamKind, ParamMut, ParamRef, Parameterized};
use crate::par;

pub const DEFAULT_BRANCHES: usize = 8;

/// Appends the hyper-joint columns (`C x V_h`, shared by every frame) to the joint axis.
pub fn attach_hyperjoints(f: &Feat, hyper: ArrayView2<f64>) -> Result<Feat> {
    let (c, t, v) = f.dim();
    let (hc, vh) = hyper.dim();
    if hc != c {
        return Err(Error::ShapeMismatch(format!("feature has {c} channels, hyper-joints {hc}")));
    }
    let mut out = Array3::zeros((c, t, v + vh));
    out.slice_mut(s![.., .., ..v]).assign(f);
    for ti in 0..t {
        out.slice_mut(s![.., ti, v..]).assign(&hyper);
    }
    Ok(out)
}

/// Embeds `Â` in the top-left block of a `(V+V_h)²` zero matrix.
pub fn pad_physical(a_hat: &Array2<f64>, hyper_joints: usize) -> Array2<f64> {
    let v = a_hat.nrows();
    let mut out = Array2::zeros((v + hyper_joints, v + hyper_joints));
    out.slice_mut(s![..v, ..v]).assign(a_hat);
    out
}

pub fn fuse_topology(a_pad: &Array2<f64>, h_hat: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    if a_pad.dim() != h_hat.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a_pad.dim(), h_hat.dim())));
    }
    Ok(a_pad + &(h_hat * alpha))
}

#[derive(Debug, Clone)]
pub struct Mshgc {
    pub in_channels: usize,
    pub out_channels: usize,
    pub joints: usize,
    pub hyper_joints: usize,
    pub k_scales: Vec<usize>,
    /// `Â` padded to `(V+V_h)²`.
    pub physical: Array2<f64>,
    /// `(B, C_in/B, C_out/B)`
    pub weight: Param<Ix3>,
    pub bias: Param<Ix1>,
    pub alpha: Param<Ix1>,
    /// `(C_in, V_h)`
    pub hyper: Param<Ix2>,
    /// `(B, C_in/B, C_h)`
    pub phi: Param<Ix3>,
    pub psi: Param<Ix2>,
    pub ln_gain: Param<Ix2>,
    pub ln_bias: Param<Ix2>,
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    pub extended: Feat,
    pub ahc: Option<AhcForward>,
    pub fused: Array2<f64>,
    /// Propagated features, `C_b x (T*V)`.
    pub propagated: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct MshgcCache {
    pub samples: Vec<Vec<BranchCache>>,
}

impl MshgcCache {
    /// Smallest top-K selection margin over every sample and branch.
    pub fn margin(&self) -> f64 {
        self.samples
            .iter()
            .flatten()
            .filter_map(|b| b.ahc.as_ref().map(|a| a.margin))
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest vertex-degree magnitude of any adaptive hypergraph; the
    /// normalization has a pole where a degree vanishes.
    pub fn min_vertex_degree(&self) -> f64 {
        self.samples
            .iter()
            .flatten()
            .filter_map(|b| b.ahc.as_ref())
            .flat_map(|a| a.norm.vertex_deg.iter().map(|d| d.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn hash_pattern<H: Hasher>(&self, h: &mut H) {
        for b in self.samples.iter().flatten() {
            if let Some(a) = &b.ahc {
                for s in &a.support {
                    for &j in s {
                        h.write_usize(j);
                    }
                }
            }
        }
    }
}

struct SampleGrad {
    weight: Array3<f64>,
    bias: Array1<f64>,
    alpha: Array1<f64>,
    hyper: Array2<f64>,
    phi: Array3<f64>,
    psi: Array2<f64>,
    ln_gain: Array2<f64>,
    ln_bias: Array2<f64>,
}

impl Mshgc {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        a_hat: &Array2<f64>,
        hyper_joints: usize,
        k_scales: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let branches = k_scales.len();
        if branches == 0 {
            return Err(Error::Config("at least one branch".into()));
        }
        for c in [in_channels, out_channels] {
            if c % branches != 0 || c == 0 {
                return Err(Error::ChannelSplitError { channels: c, parts: branches });
            }
        }
        let joints = a_hat.nrows();
        let n = joints + hyper_joints;
        if let Some(&k) = k_scales.iter().find(|&&k| k > n) {
            return Err(Error::KOutOfRange { k, n });
        }
        let cb = in_channels / branches;
        let cob = out_channels / branches;
        let ch = crate::ahc::default_embed_dim(cb);
        Ok(Self {
            in_channels,
            out_channels,
            joints,
            hyper_joints,
            k_scales: k_scales.to_vec(),
            physical: pad_physical(a_hat, hyper_joints),
            weight: Param::new(uniform_fan_in((branches, cb, cob), cb, rng), ParamKind::Weight),
            bias: Param::new(Array1::zeros(out_channels), ParamKind::Weight),
            alpha: Param::new(Array1::zeros(branches), ParamKind::NoDecay),
            hyper: Param::new(
                Array2::from_shape_simple_fn((in_channels, hyper_joints), || rng.random_range(-1.0..1.0)),
                ParamKind::NoDecay,
            ),
            phi: Param::new(uniform_fan_in((branches, cb, ch), cb, rng), ParamKind::Weight),
            psi: Param::new(uniform_fan_in((branches, cb), cb, rng), ParamKind::Weight),
            ln_gain: Param::new(Array2::ones((branches, cb)), ParamKind::NoDecay),
            ln_bias: Param::new(Array2::zeros((branches, cb)), ParamKind::NoDecay),
        })
    }

    pub fn branches(&self) -> usize {
        self.k_scales.len()
    }

    fn branch_in(&self) -> usize {
        self.in_channels / self.branches()
    }

    fn branch_out(&self) -> usize {
        self.out_channels / self.branches()
    }

    fn ahc_weights(&self, b: usize) -> AhcWeights<'_> {
        AhcWeights {
            phi: self.phi.value.index_axis(Axis(0), b),
            psi: self.psi.value.row(b),
            ln_gain: self.ln_gain.value.row(b),
            ln_bias: self.ln_bias.value.row(b),
        }
    }

    fn forward_sample(&self, x: &Feat) -> (Feat, Vec<BranchCache>) {
        let (_, t, v) = x.dim();
        let (cb, cob) = (self.branch_in(), self.branch_out());
        let mut out = Array3::zeros((self.out_channels, t, v));
        let mut caches = Vec::with_capacity(self.branches());
        for (b, &k) in self.k_scales.iter().enumerate() {
            let slice = x.slice(s![b * cb..(b + 1) * cb, .., ..]).to_owned();
            let hyper = self.hyper.value.slice(s![b * cb..(b + 1) * cb, ..]);
            let extended = attach_hyperjoints(&slice, hyper).expect("channel slices agree");
            let ahc = (k > 0).then(|| AhcForward::run(&extended, self.ahc_weights(b), k).expect("K validated at construction"));
            let fused = match &ahc {
                Some(a) => &self.physical + &(a.propagator() * self.alpha.value[b]),
                None => self.physical.clone(),
            };
            let real = fused.slice(s![..v, ..]);
            let prop = rows(&extended).dot(&real.t());
            let propagated = prop.into_shape_with_order((cb, t * v)).expect("contiguous");
            let w = self.weight.value.index_axis(Axis(0), b);
            let mut y = w.t().dot(&propagated);
            for (o, mut row) in y.rows_mut().into_iter().enumerate() {
                row += self.bias.value[b * cob + o];
            }
            mat_mut(&mut out).slice_mut(s![b * cob..(b + 1) * cob, ..]).assign(&y);
            caches.push(BranchCache { extended, ahc, fused, propagated });
        }
        (out, caches)
    }

    pub fn forward(&self, xs: &[Feat]) -> (Vec<Feat>, MshgcCache) {
        let results = par::map(xs, |x| self.forward_sample(x));
        let (ys, samples) = results.into_iter().unzip();
        (ys, MshgcCache { samples })
    }

    fn backward_sample(&self, caches: &[BranchCache], dy: &Feat) -> (Feat, SampleGrad) {
        let (_, t, v) = dy.dim();
        let (cb, cob, nb) = (self.branch_in(), self.branch_out(), self.branches());
        let n = v + self.hyper_joints;
        let mut g = SampleGrad {
            weight: Array3::zeros(self.weight.value.raw_dim()),
            bias: Array1::zeros(self.out_channels),
            alpha: Array1::zeros(nb),
            hyper: Array2::zeros(self.hyper.value.raw_dim()),
            phi: Array3::zeros(self.phi.value.raw_dim()),
            psi: Array2::zeros(self.psi.value.raw_dim()),
            ln_gain: Array2::zeros(self.ln_gain.value.raw_dim()),
            ln_bias: Array2::zeros(self.ln_bias.value.raw_dim()),
        };
        let mut dx = Array3::zeros((self.in_channels, t, v));
        let dym = mat(dy);
        for (b, cache) in caches.iter().enumerate() {
            let d_out = dym.slice(s![b * cob..(b + 1) * cob, ..]);
            g.bias.slice_mut(s![b * cob..(b + 1) * cob]).assign(&d_out.sum_axis(Axis(1)));
            g.weight.index_axis_mut(Axis(0), b).assign(&cache.propagated.dot(&d_out.t()));
            let w = self.weight.value.index_axis(Axis(0), b);
            let d_prop = w.dot(&d_out).into_shape_with_order((cb * t, v)).expect("contiguous");
            let xe = rows(&cache.extended);
            let mut d_fused = Array2::<f64>::zeros((n, n));
            d_fused.slice_mut(s![..v, ..]).assign(&d_prop.t().dot(&xe));
            let mut d_ext = d_prop.dot(&cache.fused.slice(s![..v, ..]));
            if let Some(ahc) = &cache.ahc {
                g.alpha[b] = (&d_fused * ahc.propagator()).sum();
                let d_hhat = &d_fused * self.alpha.value[b];
                let ag = ahc.backward(self.ahc_weights(b), &d_hhat);
                g.phi.index_axis_mut(Axis(0), b).assign(&ag.phi);
                g.psi.row_mut(b).assign(&ag.psi);
                g.ln_gain.row_mut(b).assign(&ag.ln_gain);
                g.ln_bias.row_mut(b).assign(&ag.ln_bias);
                let scale = 1.0 / t as f64;
                let mut d_ext3 = d_ext.view_mut().into_shape_with_order((cb, t, n)).expect("contiguous");
                for ti in 0..t {
                    d_ext3.slice_mut(s![.., ti, ..]).scaled_add(scale, &ag.pooled);
                }
            }
            let d_ext3 = d_ext.view().into_shape_with_order((cb, t, n)).expect("contiguous");
            dx.slice_mut(s![b * cb..(b + 1) * cb, .., ..]).assign(&d_ext3.slice(s![.., .., ..v]));
            g.hyper
                .slice_mut(s![b * cb..(b + 1) * cb, ..])
                .assign(&d_ext3.slice(s![.., .., v..]).sum_axis(Axis(1)));
        }
        (dx, g)
    }

    pub fn backward(&mut self, cache: &MshgcCache, dys: &[Feat]) -> Vec<Feat> {
        let this = &*self;
        let results = par::map_range(dys.len(), |i| this.backward_sample(&cache.samples[i], &dys[i]));
        let mut dxs = Vec::with_capacity(results.len());
        for (dx, g) in results {
            self.weight.grad += &g.weight;
            self.bias.grad += &g.bias;
            self.alpha.grad += &g.alpha;
            self.hyper.grad += &g.hyper;
            self.phi.grad += &g.phi;
            self.psi.grad += &g.psi;
            self.ln_gain.grad += &g.ln_gain;
            self.ln_bias.grad += &g.ln_bias;
            dxs.push(dx);
        }
        dxs
    }

    /// Analytic forward cost for one sample (multiply-adds counted twice).
    pub fn flops(&self, frames: usize) -> u64 {
        let (cb, cob) = (self.branch_in() as u64, self.branch_out() as u64);
        let (t, v) = (frames as u64, self.joints as u64);
        let n = v + self.hyper_joints as u64;
        let ch = self.phi.value.dim().2 as u64;
        let mut total = 0;
        for &k in &self.k_scales {
            if k > 0 {
                total += cb * t * n; // temporal pooling
                total += 2 * cb * (ch + 1) * n; // embeddings
                total += 2 * ch * n * n; // distances
                total += 4 * n * n * n; // normalized propagator
            }
            total += 2 * v * n * cb * t; // propagation
            total += 2 * cb * cob * t * v; // channel transform
        }
        total
    }
}

impl Parameterized for Mshgc {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(self.weight.view(join(prefix, "weight")));
        out.push(self.bias.view(join(prefix, "bias")));
        out.push(self.alpha.view(join(prefix, "alpha")));
        out.push(self.hyper.view(join(prefix, "hyper_joints")));
        out.push(self.phi.view(join(prefix, "ahc.phi")));
        out.push(self.psi.view(join(prefix, "ahc.psi")));
        out.push(self.ln_gain.view(join(prefix, "ahc.ln_gain")));
        out.push(self.ln_bias.view(join(prefix, "ahc.ln_bias")));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push(self.weight.view_mut(join(prefix, "weight")));
        out.push(self.bias.view_mut(join(prefix, "bias")));
        out.push(self.alpha.view_mut(join(prefix, "alpha")));
        out.push(self.hyper.view_mut(join(prefix, "hyper_joints")));
        out.push(self.phi.view_mut(join(prefix, "ahc.phi")));
        out.push(self.psi.view_mut(join(prefix, "ahc.psi")));
        out.push(self.ln_gain.view_mut(join(prefix, "ahc.ln_gain")));
        out.push(self.ln_bias.view_mut(join(prefix, "ahc.ln_bias")));
    }
}
