//! Adaptive hypergraph construction: temporal pooling, channel layer norm,
//! position/weight embeddings, pairwise distances and a top-K soft incidence.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Hypergraph, HypergraphNorm, DEGREE_EPS};
use crate::nn::uniform_fan_in;

pub const LN_EPS: f64 = 1e-5;

/// Default embedding width for a branch with `branch_channels` channels.
pub fn default_embed_dim(branch_channels: usize) -> usize {
    (branch_channels / 2).max(8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AhcParams {
    pub phi: Array2<f64>,
    pub psi: Array1<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
    pub k: usize,
}

impl AhcParams {
    pub fn init<R: Rng>(channels: usize, embed_dim: usize, k: usize, rng: &mut R) -> Self {
        Self {
            phi: uniform_fan_in((channels, embed_dim), channels, rng),
            psi: uniform_fan_in(channels, channels, rng),
            ln_gain: Array1::ones(channels),
            ln_bias: Array1::zeros(channels),
            k,
        }
    }

    pub fn weights(&self) -> AhcWeights<'_> {
        AhcWeights {
            phi: self.phi.view(),
            psi: self.psi.view(),
            ln_gain: self.ln_gain.view(),
            ln_bias: self.ln_bias.view(),
        }
    }
}

/// Borrowed AHC weights of one branch.
#[derive(Debug, Clone, Copy)]
pub struct AhcWeights<'a> {
    pub phi: ArrayView2<'a, f64>,
    pub psi: ArrayView1<'a, f64>,
    pub ln_gain: ArrayView1<'a, f64>,
    pub ln_bias: ArrayView1<'a, f64>,
}

/// Squared Euclidean distances between embedded joints.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(pub Array2<f64>);

/// Mean over the frame axis of a `C x T x N` feature.
pub fn temporal_pool(f: &Array3<f64>) -> Array2<f64> {
    f.mean_axis(Axis(1)).expect("at least one frame")
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Per-joint normalization over the channel axis of a `C x N` matrix.
pub fn channel_layernorm_cached(
    x: &Array2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let c = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / c;
    let centered = x - &mean.view().insert_axis(Axis(0));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / c;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &inv_std.view().insert_axis(Axis(0));
    let y = &xhat * &gain.insert_axis(Axis(1)) + bias.insert_axis(Axis(1));
    (y, LayerNormCache { xhat, inv_std })
}

pub fn channel_layernorm(x: &Array2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> Array2<f64> {
    channel_layernorm_cached(x, gain, bias).0
}

/// Returns `(dx, dgain, dbias)`.
pub fn channel_layernorm_backward(
    cache: &LayerNormCache,
    gain: ArrayView1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgain = (dy * &cache.xhat).sum_axis(Axis(1));
    let dbias = dy.sum_axis(Axis(1));
    let dxhat = dy * &gain.insert_axis(Axis(1));
    let c = dy.nrows() as f64;
    let mean_d = dxhat.sum_axis(Axis(0)) / c;
    let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0)) / c;
    let dx = (&dxhat - &mean_d.view().insert_axis(Axis(0)) - &cache.xhat * &mean_dx.view().insert_axis(Axis(0)))
        * cache.inv_std.view().insert_axis(Axis(0));
    (dx, dgain, dbias)
}

/// `P_emb = Φᵀ x`, `w_emb = tanh(Ψᵀ x)`.
pub fn embed(x_norm: &Array2<f64>, phi: ArrayView2<f64>, psi: ArrayView1<f64>) -> (Array2<f64>, Array1<f64>) {
    let p = phi.t().dot(x_norm);
    let w = x_norm.t().dot(&psi).mapv(f64::tanh);
    (p, w)
}

pub fn pairwise_sq_distances(p: &Array2<f64>) -> DistanceMatrix {
    let n = p.ncols();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = p.column(i).iter().zip(p.column(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            m[[i, j]] = d;
            m[[j, i]] = d;
        }
    }
    DistanceMatrix(m)
}

/// Indices of the K smallest entries of each row, ties to the lower index.
pub fn topk_support(m: &DistanceMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = m.0.nrows();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    Ok(m.0
        .rows()
        .into_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// Smallest relative gap between the last retained and first rejected distance
/// over all rows; infinite when `K = N`.
pub fn selection_margin(m: &DistanceMatrix, k: usize) -> f64 {
    let n = m.0.nrows();
    if k == 0 || k >= n {
        return f64::INFINITY;
    }
    m.0.rows()
        .into_iter()
        .map(|row| {
            let mut vals = row.to_vec();
            vals.sort_by(f64::total_cmp);
            let (inside, outside) = (vals[k - 1], vals[k]);
            (outside - inside) / outside.abs().max(1e-300)
        })
        .fold(f64::INFINITY, f64::min)
}

fn softmax_rows(m: &DistanceMatrix, support: &[Vec<usize>]) -> Array2<f64> {
    let n = m.0.nrows();
    let mut h = Array2::zeros((n, n));
    for (i, s) in support.iter().enumerate() {
        let min = s.iter().map(|&j| m.0[[i, j]]).fold(f64::INFINITY, f64::min);
        let exps: Vec<f64> = s.iter().map(|&j| (-(m.0[[i, j]] - min)).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (&j, e) in s.iter().zip(exps) {
            h[[i, j]] = e / total;
        }
    }
    h
}

/// Row-wise softmax of negated distances restricted to each row's K nearest.
pub fn topk_incidence(m: &DistanceMatrix, k: usize) -> Result<Array2<f64>> {
    let support = topk_support(m, k)?;
    Ok(softmax_rows(m, &support))
}

/// Full construction on a `C x T x N` feature with M = N hyper-edges.
pub fn build_hypergraph(f: &Array3<f64>, params: &AhcParams) -> Result<Hypergraph> {
    let fwd = AhcForward::run(f, params.weights(), params.k)?;
    Hypergraph::new(fwd.incidence, fwd.edge_weights)
}

/// Every intermediate of one AHC evaluation, retained for backprop.
#[derive(Debug, Clone)]
pub struct AhcForward {
    pub pooled: Array2<f64>,
    pub ln: LayerNormCache,
    pub normed: Array2<f64>,
    pub position: Array2<f64>,
    pub edge_weights: Array1<f64>,
    pub distances: DistanceMatrix,
    pub support: Vec<Vec<usize>>,
    pub incidence: Array2<f64>,
    pub norm: HypergraphNorm,
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct AhcGrad {
    pub pooled: Array2<f64>,
    pub phi: Array2<f64>,
    pub psi: Array1<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
}

impl AhcForward {
    pub fn run(f: &Array3<f64>, w: AhcWeights<'_>, k: usize) -> Result<Self> {
        let pooled = temporal_pool(f);
        let (normed, ln) = channel_layernorm_cached(&pooled, w.ln_gain, w.ln_bias);
        let (position, edge_weights) = embed(&normed, w.phi, w.psi);
        let distances = pairwise_sq_distances(&position);
        let support = topk_support(&distances, k)?;
        let margin = selection_margin(&distances, k);
        let incidence = softmax_rows(&distances, &support);
        let norm = HypergraphNorm::compute(&incidence, &edge_weights, DEGREE_EPS);
        Ok(Self { pooled, ln, normed, position, edge_weights, distances, support, incidence, norm, margin })
    }

    pub fn propagator(&self) -> &Array2<f64> {
        &self.norm.propagator
    }

    /// Backward from `d Ĥ`, holding the top-K support fixed.
    pub fn backward(&self, w: AhcWeights<'_>, d_prop: &Array2<f64>) -> AhcGrad {
        let (d_inc, d_w) = self.norm.backward(&self.incidence, &self.edge_weights, d_prop);
        let n = self.incidence.nrows();
        // softmax over -m within each support
        let mut d_dist = Array2::<f64>::zeros((n, n));
        for (i, s) in self.support.iter().enumerate() {
            let dot: f64 = s.iter().map(|&j| self.incidence[[i, j]] * d_inc[[i, j]]).sum();
            for &j in s {
                d_dist[[i, j]] = -self.incidence[[i, j]] * (d_inc[[i, j]] - dot);
            }
        }
        let sym = &d_dist + &d_dist.t();
        let p = &self.position;
        let mut d_pos = Array2::<f64>::zeros(p.raw_dim());
        for i in 0..n {
            for j in 0..n {
                let g = sym[[i, j]];
                if i == j || g == 0.0 {
                    continue;
                }
                for c in 0..p.nrows() {
                    d_pos[[c, i]] += 2.0 * g * (p[[c, i]] - p[[c, j]]);
                }
            }
        }
        // w = tanh(Ψᵀ z)
        let d_pre = &d_w * &self.edge_weights.mapv(|x| 1.0 - x * x);
        let d_phi = self.normed.dot(&d_pos.t());
        let d_psi = self.normed.dot(&d_pre);
        let d_normed = w.phi.dot(&d_pos) + &w.psi.insert_axis(Axis(1)).dot(&d_pre.view().insert_axis(Axis(0)));
        let (pooled, ln_gain, ln_bias) = channel_layernorm_backward(&self.ln, w.ln_gain, &d_normed);
        AhcGrad { pooled, phi: d_phi, psi: d_psi, ln_gain, ln_bias }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random3(r: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_simple_fn(shape, || r.random_range(-1.0..1.0))
    }

    #[test]
    fn pooling_examples() {
        let f = Array3::from_shape_fn((2, 3, 4), |(c, _, v)| (c * 4 + v) as f64);
        assert_eq!(temporal_pool(&f), f.index_axis(Axis(1), 0));
        let f = Array3::from_shape_vec((1, 2, 1), vec![0.0, 2.0]).unwrap();
        assert_eq!(temporal_pool(&f)[[0, 0]], 1.0);
        let mut r = rng(1);
        let f = random3(&mut r, (3, 7, 4));
        let pooled = temporal_pool(&f);
        for c in 0..3 {
            for v in 0..4 {
                let mut s = 0.0;
                for t in 0..7 {
                    s += f[[c, t, v]];
                }
                assert!((pooled[[c, v]] - s / 7.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn layernorm_examples() {
        let ones = Array1::ones(3);
        let zeros = Array1::zeros(3);
        let x = Array2::from_elem((3, 2), 4.0);
        assert!(channel_layernorm(&x, ones.view(), zeros.view()).iter().all(|&v| v == 0.0));
        let x = arr2(&[[1.0], [-1.0]]);
        let y = channel_layernorm(&x, Array1::ones(2).view(), Array1::zeros(2).view());
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[[0, 0]] - expect).abs() < 1e-12 && (y[[1, 0]] + expect).abs() < 1e-12);
        let mut r = rng(2);
        let x = Array2::from_shape_simple_fn((6, 4), || r.random_range(-3.0..3.0));
        let y = channel_layernorm(&x, Array1::ones(6).view(), Array1::zeros(6).view());
        for col in y.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn embed_examples() {
        let mut r = rng(3);
        let x = Array2::from_shape_simple_fn((4, 5), || r.random_range(-1.0..1.0));
        let phi = Array2::from_shape_simple_fn((4, 3), || r.random_range(-1.0..1.0));
        let psi = Array1::from_shape_simple_fn(4, || r.random_range(-1.0..1.0));
        let (p, w) = embed(&x, Array2::zeros((4, 3)).view(), psi.view());
        assert!(p.iter().all(|&v| v == 0.0));
        assert!(w.iter().all(|&v| v.abs() < 1.0));
        let (_, w) = embed(&x, phi.view(), Array1::zeros(4).view());
        assert!(w.iter().all(|&v| v == 0.0));
        let (p, w) = embed(&x, phi.view(), psi.view());
        for h in 0..3 {
            for n in 0..5 {
                let s: f64 = (0..4).map(|c| phi[[c, h]] * x[[c, n]]).sum();
                assert!((p[[h, n]] - s).abs() < 1e-7);
            }
        }
        for n in 0..5 {
            let s: f64 = (0..4).map(|c| psi[c] * x[[c, n]]).sum();
            assert!((w[n] - s.tanh()).abs() < 1e-7);
        }
    }

    #[test]
    fn distance_examples() {
        assert!(pairwise_sq_distances(&Array2::from_elem((3, 4), 0.7)).0.iter().all(|&v| v == 0.0));
        assert_eq!(pairwise_sq_distances(&arr2(&[[0.0, 3.0]])).0, arr2(&[[0.0, 9.0], [9.0, 0.0]]));
        let mut r = rng(4);
        let p = Array2::from_shape_simple_fn((3, 6), || r.random_range(-2.0..2.0));
        let m = pairwise_sq_distances(&p).0;
        for i in 0..6 {
            for j in 0..6 {
                let d: f64 = (0..3).map(|c| (p[[c, i]] - p[[c, j]]).powi(2)).sum();
                assert!((m[[i, j]] - d).abs() <= 1e-6 * d.max(1e-12));
                assert_eq!(m[[i, j]], m[[j, i]]);
            }
        }
    }

    #[test]
    fn topk_examples() {
        let flat = DistanceMatrix(Array2::zeros((4, 4)));
        let h = topk_incidence(&flat, 4).unwrap();
        assert!(h.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let mut r = rng(5);
        let p = Array2::from_shape_simple_fn((2, 5), || r.random_range(-1.0..1.0));
        let h = topk_incidence(&pairwise_sq_distances(&p), 1).unwrap();
        assert_eq!(h, Array2::eye(5));
        let ln2 = std::f64::consts::LN_2;
        let m = DistanceMatrix(arr2(&[[0.0, ln2, 10.0], [ln2, 0.0, 1.0], [10.0, 1.0, 0.0]]));
        let h = topk_incidence(&m, 2).unwrap();
        assert!((h[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((h[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(h[[0, 2]], 0.0);
        assert!(matches!(topk_incidence(&m, 0), Err(Error::KOutOfRange { .. })));
        assert!(matches!(topk_incidence(&m, 4), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn zero_phi_gives_uniform_rows_over_first_k() {
        let mut r = rng(6);
        let f = random3(&mut r, (4, 3, 6));
        let mut params = AhcParams::init(4, 8, 3, &mut r);
        params.phi.fill(0.0);
        let hg = build_hypergraph(&f, &params).unwrap();
        for row in hg.incidence.rows() {
            for (j, &v) in row.iter().enumerate() {
                let expect = if j < 3 { 1.0 / 3.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn k_one_gives_diagonal_propagator() {
        let mut r = rng(7);
        let f = random3(&mut r, (4, 3, 6));
        let params = AhcParams::init(4, 8, 1, &mut r);
        let hg = build_hypergraph(&f, &params).unwrap();
        assert_eq!(hg.incidence, Array2::eye(6));
        let prop = crate::graph::normalize_hypergraph(&hg, DEGREE_EPS).values;
        for ((i, j), &v) in prop.indexed_iter() {
            if i != j {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn incidence_columns_follow_rank_oracle() {
        let mut r = rng(8);
        for _ in 0..20 {
            let f = random3(&mut r, (6, 4, 7));
            let k = r.random_range(1..=7);
            let params = AhcParams::init(6, 8, k, &mut r);
            let fwd = AhcForward::run(&f, params.weights(), k).unwrap();
            let m = &fwd.distances.0;
            for i in 0..7 {
                for j in 0..7 {
                    let rank = (0..7).filter(|&x| m[[i, x]] < m[[i, j]] || (m[[i, x]] == m[[i, j]] && x < j)).count();
                    assert_eq!(fwd.incidence[[i, j]] > 0.0, rank < k);
                }
                let row = fwd.incidence.row(i);
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v <= row[i]));
            }
        }
    }

    #[test]
    fn permuting_joints_permutes_incidence() {
        let mut r = rng(9);
        let f = random3(&mut r, (6, 4, 5));
        let params = AhcParams::init(6, 8, 3, &mut r);
        let perm = [3, 0, 4, 1, 2];
        let fp = Array3::from_shape_fn(f.dim(), |(c, t, v)| f[[c, t, perm[v]]]);
        let a = build_hypergraph(&f, &params).unwrap().incidence;
        let b = build_hypergraph(&fp, &params).unwrap().incidence;
        for i in 0..5 {
            for j in 0..5 {
                assert!((b[[i, j]] - a[[perm[i], perm[j]]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_with_fixed_support() {
        let mut r = rng(10);
        let f = random3(&mut r, (6, 3, 5));
        let params = AhcParams::init(6, 4, 3, &mut r);
        let upstream = Array2::from_shape_simple_fn((5, 5), || r.random_range(-1.0..1.0));
        let fwd = AhcForward::run(&f, params.weights(), 3).unwrap();
        assert!(fwd.margin > 1e-3);
        let g = fwd.backward(params.weights(), &upstream);
        let loss = |p: &AhcParams, f: &Array3<f64>| {
            let fw = AhcForward::run(f, p.weights(), 3).unwrap();
            assert_eq!(fw.support, fwd.support);
            (fw.propagator() * &upstream).sum()
        };
        let h = 1e-5;
        let check = |fd: f64, an: f64| assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "{fd} vs {an}");
        for idx in [(0, 0), (3, 2), (5, 3)] {
            let mut p = params.clone();
            p.phi[idx] += h;
            let lp = loss(&p, &f);
            p.phi[idx] -= 2.0 * h;
            check((lp - loss(&p, &f)) / (2.0 * h), g.phi[idx]);
        }
        for c in 0..6 {
            for which in 0..3 {
                let mut p = params.clone();
                let (slot, an) = match which {
                    0 => (&mut p.psi[c], g.psi[c]),
                    1 => (&mut p.ln_gain[c], g.ln_gain[c]),
                    _ => (&mut p.ln_bias[c], g.ln_bias[c]),
                };
                *slot += h;
                let lp = loss(&p, &f);
                let mut p2 = params.clone();
                match which {
                    0 => p2.psi[c] -= h,
                    1 => p2.ln_gain[c] -= h,
                    _ => p2.ln_bias[c] -= h,
                }
                check((lp - loss(&p2, &f)) / (2.0 * h), an);
            }
        }
        // input gradient arrives through the temporal mean
        let mut fp = f.clone();
        fp[[2, 1, 3]] += h;
        let mut fm = f.clone();
        fm[[2, 1, 3]] -= h;
        check((loss(&params, &fp) - loss(&params, &fm)) / (2.0 * h), g.pooled[[2, 3]] / 3.0);
    }
}
