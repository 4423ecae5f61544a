//! Normal-graph and hypergraph normalization.
//!
//! Diagonal degree matrices are kept as vectors and propagators are dense,
//! which is the right trade-off for skeletons of at most ~30 vertices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::data::SkeletonLayout;
use crate::error::{Error, Result};

pub const DEGREE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix(pub Array2<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagatorKind {
    AdjacencyNorm,
    HypergraphNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPropagator {
    pub values: Array2<f64>,
    pub kind: PropagatorKind,
}

/// Soft or binary incidence `H` (vertices x hyper-edges) with per-edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    pub incidence: Array2<f64>,
    pub edge_weights: Array1<f64>,
}

impl Hypergraph {
    pub fn new(incidence: Array2<f64>, edge_weights: Array1<f64>) -> Result<Self> {
        if incidence.ncols() != edge_weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} hyper-edges but {} weights",
                incidence.ncols(),
                edge_weights.len()
            )));
        }
        if incidence.iter().any(|&h| !h.is_finite() || !(0.0..=1.0).contains(&h)) {
            return Err(Error::ShapeMismatch("incidence entries must lie in [0, 1]".into()));
        }
        if edge_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::ShapeMismatch("edge weights must be finite".into()));
        }
        Ok(Self { incidence, edge_weights })
    }

    /// Binary incidence with unit weights.
    pub fn binary(incidence: Array2<f64>) -> Result<Self> {
        let m = incidence.ncols();
        Self::new(incidence, Array1::ones(m))
    }

    pub fn vertex_count(&self) -> usize {
        self.incidence.nrows()
    }

    pub fn edge_count(&self) -> usize {
        self.incidence.ncols()
    }
}

pub fn build_skeleton_adjacency(layout: &SkeletonLayout, self_loops: bool) -> Result<AdjacencyMatrix> {
    layout.validate()?;
    let v = layout.joint_count;
    let mut a = Array2::zeros((v, v));
    for &(p, c) in &layout.edges {
        a[[p, c]] = 1.0;
        a[[c, p]] = 1.0;
    }
    if self_loops {
        for i in 0..v {
            a[[i, i]] = 1.0;
        }
    }
    Ok(AdjacencyMatrix(a))
}

/// `Λ^{-1/2} A Λ^{-1/2}` with `Λ` the row-sum degrees.
pub fn normalize_adjacency(a: &AdjacencyMatrix) -> Result<NormalizedPropagator> {
    let deg = a.0.sum_axis(Axis(1));
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::IsolatedVertex(i));
    }
    let mut values = a.0.clone();
    for ((i, j), x) in values.indexed_iter_mut() {
        *x /= (deg[i] * deg[j]).sqrt();
    }
    Ok(NormalizedPropagator { values, kind: PropagatorKind::AdjacencyNorm })
}

/// `d(v) = Σ_e w(e) h(v, e)`.
pub fn vertex_degrees(hg: &Hypergraph) -> Array1<f64> {
    hg.incidence.dot(&hg.edge_weights)
}

/// `d(e) = Σ_v h(v, e)`.
pub fn edge_degrees(hg: &Hypergraph) -> Array1<f64> {
    hg.incidence.sum_axis(Axis(0))
}

/// `1/d`, forced to zero inside the `|d| <= eps` dead zone.
pub fn guarded_inverse(d: f64, eps: f64) -> f64 {
    if d.abs() <= eps {
        0.0
    } else {
        1.0 / d
    }
}

pub fn guarded_inverse_grad(d: f64, eps: f64) -> f64 {
    if d.abs() <= eps {
        0.0
    } else {
        -1.0 / (d * d)
    }
}

/// Intermediates of `D_v^{-1} H W D_e^{-1} H^T`, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HypergraphNorm {
    pub eps: f64,
    pub vertex_deg: Array1<f64>,
    pub edge_deg: Array1<f64>,
    pub inv_vertex: Array1<f64>,
    pub inv_edge: Array1<f64>,
    /// `H diag(w ⊙ inv_edge) H^T`, before the vertex-degree rescale.
    pub inner: Array2<f64>,
    pub propagator: Array2<f64>,
}

impl HypergraphNorm {
    pub fn compute(incidence: &Array2<f64>, weights: &Array1<f64>, eps: f64) -> Self {
        let vertex_deg = incidence.dot(weights);
        let edge_deg = incidence.sum_axis(Axis(0));
        let inv_vertex = vertex_deg.mapv(|d| guarded_inverse(d, eps));
        let inv_edge = edge_deg.mapv(|d| guarded_inverse(d, eps));
        let scale = weights * &inv_edge;
        let scaled = incidence * &scale.view().insert_axis(Axis(0));
        let inner = scaled.dot(&incidence.t());
        let propagator = &inner * &inv_vertex.view().insert_axis(Axis(1));
        Self { eps, vertex_deg, edge_deg, inv_vertex, inv_edge, inner, propagator }
    }

    /// Gradients with respect to the incidence and the edge weights.
    pub fn backward(&self, incidence: &Array2<f64>, weights: &Array1<f64>, d_prop: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let d_inner = d_prop * &self.inv_vertex.view().insert_axis(Axis(1));
        let d_inv_vertex = (d_prop * &self.inner).sum_axis(Axis(1));
        let d_vdeg = Array1::from_shape_fn(d_inv_vertex.len(), |u| {
            d_inv_vertex[u] * guarded_inverse_grad(self.vertex_deg[u], self.eps)
        });
        let scale = weights * &self.inv_edge;
        // inner = H diag(s) H^T
        let sym = &d_inner + &d_inner.t();
        let mut d_h = sym.dot(incidence) * scale.view().insert_axis(Axis(0));
        let d_scale = (incidence * &d_inner.dot(incidence)).sum_axis(Axis(0));
        let mut d_w = &d_scale * &self.inv_edge;
        let d_inv_edge = &d_scale * weights;
        let d_edeg = Array1::from_shape_fn(d_inv_edge.len(), |e| {
            d_inv_edge[e] * guarded_inverse_grad(self.edge_deg[e], self.eps)
        });
        // vertex_deg = H w, edge_deg = 1^T H
        d_w += &incidence.t().dot(&d_vdeg);
        d_h += &(d_vdeg.view().insert_axis(Axis(1)).dot(&weights.view().insert_axis(Axis(0))));
        d_h += &d_edeg.view().insert_axis(Axis(0));
        (d_h, d_w)
    }
}

/// `Ĥ = D_v^{-1} H W D_e^{-1} H^T` with guarded diagonal inverses.
pub fn normalize_hypergraph(hg: &Hypergraph, eps: f64) -> NormalizedPropagator {
    let norm = HypergraphNorm::compute(&hg.incidence, &hg.edge_weights, eps);
    NormalizedPropagator { values: norm.propagator, kind: PropagatorKind::HypergraphNorm }
}

/// Row-major CSV, 9 significant digits.
pub fn matrix_to_csv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x:.8e}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, matrix_to_csv(m)).map_err(|e| Error::io(path, e))
}
