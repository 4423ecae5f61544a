//! Central-difference verification of the hand-written backward pass.
//!
//! Coordinates are sampled per tensor. A coordinate whose perturbation
//! changes any discrete choice of the forward pass (activation sign,
//! max-pool winner, top-K support) straddles a kink; it is excluded rather
//! than compared.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{smoothed_cross_entropy, Batch, HyperGcnModel, ModelConfig};
use crate::nn::{ParamKind, Parameterized};
use crate::par;

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor (all of them for smaller tensors).
    pub coords_per_tensor: usize,
    /// Relative error denominators never drop below this.
    pub error_floor: f64,
    /// Inference-mode normalization (affine) instead of batch statistics.
    pub frozen_norms: bool,
    pub seed: u64,
    pub max_retries: usize,
    /// Smallest acceptable relative top-K selection gap at the base point.
    pub min_margin: f64,
    /// Smallest acceptable vertex-degree magnitude of any adaptive hypergraph.
    pub min_degree: f64,
    /// Negates the analytic gradient of tensors whose name starts with this prefix.
    pub corrupt: Option<String>,
    pub objective: Objective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Smoothed cross-entropy plus the divergence term.
    Training,
    /// `Σ r·logits` for a fixed random `r`; exactly linear in any single
    /// coordinate of a model without nonlinearities.
    LinearProbe,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            batch: 2,
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 6,
            error_floor: 1e-5,
            frozen_norms: false,
            seed: 0,
            max_retries: 3,
            min_margin: 1e-9,
            min_degree: 1e-2,
            corrupt: None,
            objective: Objective::Training,
        }
    }
}

impl GradcheckConfig {
    /// Every nonlinearity removed: identity activations, no adaptive
    /// hypergraphs, no hyper-joints and affine normalization. The probe
    /// objective is then exactly linear in each coordinate, so a large step
    /// costs no truncation error and shrinks round-off.
    pub fn linear() -> Self {
        Self::linear_from(ModelConfig::tiny())
    }

    /// [`Self::linear`] applied to an arbitrary model configuration.
    pub fn linear_from(model: ModelConfig) -> Self {
        let model = ModelConfig {
            activation: crate::nn::Activation::Identity,
            hyper_joints: 0,
            k_scales: vec![0; model.k_scales.len()],
            ..model
        };
        Self {
            model,
            frozen_norms: true,
            objective: Objective::LinearProbe,
            step: 1e-2,
            tolerance: 1e-8,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub excluded: usize,
    pub max_error: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorReport>,
    pub seed: u64,
    pub attempts: usize,
    pub margin: f64,
    pub min_degree: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn excluded(&self) -> usize {
        self.tensors.iter().map(|t| t.excluded).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance && self.tensors.iter().all(|t| t.checked > 0 || t.excluded == 0)
    }

    /// Worst error per parameter family (tensor names with stage/layer/branch indices removed).
    pub fn groups(&self) -> BTreeMap<String, (usize, f64)> {
        let mut out: BTreeMap<String, (usize, f64)> = BTreeMap::new();
        for t in &self.tensors {
            let e = out.entry(group_name(&t.name)).or_default();
            e.0 += t.checked;
            e.1 = e.1.max(t.max_error);
        }
        out
    }
}

pub fn group_name(tensor: &str) -> String {
    tensor
        .split('.')
        .filter(|part| !["stage", "layer", "branch"].iter().any(|p| part.starts_with(p) && part[p.len()..].parse::<usize>().is_ok()))
        .collect::<Vec<_>>()
        .join(".")
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_batch(config: &ModelConfig, size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let v = config.joints()?;
    let samples: Vec<Sample> = (0..size)
        .map(|i| Sample {
            persons: vec![Array3::from_shape_simple_fn((3, config.frames, v), || rng.random_range(-1.0..1.0))],
            label: i % config.num_classes,
        })
        .collect();
    Ok(Batch::from_samples(&samples))
}

fn objective(model: &HyperGcnModel, batch: &Batch, train: bool, probe: Option<&Array2<f64>>) -> Result<(f64, u64)> {
    let (logits, cache) = model.forward(batch, train)?;
    let value = match probe {
        Some(r) => (&logits * r).sum(),
        None => smoothed_cross_entropy(&logits, &batch.labels, model.config.label_smoothing)?.0 + model.divergence_loss(),
    };
    Ok((value, cache.signature(model.config.activation)))
}

struct Coord {
    tensor: usize,
    index: usize,
}

/// Moves the freshly initialized model to a generic, well-conditioned point.
///
/// Fusion gains start at zero, which would silence the adaptive path, so they
/// are drawn from `[0.5, 1.5)`. Edge weights are `tanh` of a signed
/// projection, so vertex degrees can sit arbitrarily close to the pole of the
/// degree normalization; aligning each branch's layer-norm bias with `Ψ`
/// keeps every projection at least 1, every edge weight above `tanh(1)` and
/// every degree in `[0.76, 1]`.
pub fn condition(model: &mut HyperGcnModel, rng: &mut ChaCha8Rng) {
    for layer in model.stages.iter_mut().flatten() {
        let gcn = &mut layer.gcn;
        gcn.alpha.value.mapv_inplace(|_| rng.random_range(0.5..1.5));
        for b in 0..gcn.branches() {
            let psi = gcn.psi.value.row(b).to_owned();
            let gain = gcn.ln_gain.value.row(b);
            let norm_sq = psi.dot(&psi);
            if norm_sq == 0.0 {
                continue;
            }
            // normalized features have norm at most sqrt(C_b)
            let reach = (&psi * &gain).dot(&(&psi * &gain)).sqrt() * (psi.len() as f64).sqrt();
            gcn.ln_bias.value.row_mut(b).assign(&(&psi * ((reach + 1.0) / norm_sq)));
        }
    }
}

fn attempt(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    let mut model = HyperGcnModel::new(cfg.model.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let batch = random_batch(&cfg.model, cfg.batch, &mut rng)?;
    let train = !cfg.frozen_norms;
    if cfg.frozen_norms {
        // nontrivial but fixed statistics so the affine maps are not identities
        for p in model.params_mut() {
            if p.kind == ParamKind::Buffer {
                let var = p.name.ends_with("running_var");
                p.value.iter_mut().for_each(|x| *x = if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.5..0.5) });
            }
        }
    }
    condition(&mut model, &mut rng);
    let linear_probe = (cfg.objective == Objective::LinearProbe)
        .then(|| Array2::from_shape_simple_fn((batch.len(), cfg.model.num_classes), || rng.random_range(-1.0..1.0)));
    model.zero_grad();
    let cache = match &linear_probe {
        Some(r) => {
            let (_, cache) = model.forward(&batch, train)?;
            model.backward(&cache, r);
            cache
        }
        None => model.loss_and_grad(&batch, train)?.2,
    };
    let margin = cache.margin();
    let min_degree = cache.min_vertex_degree();
    if margin < cfg.min_margin || min_degree < cfg.min_degree {
        return Err(Error::BoundaryDegeneracy { gap: margin.min(min_degree) });
    }
    let signature = cache.signature(cfg.model.activation);

    let params = model.params();
    let mut probes = Vec::new();
    let mut analytic = Vec::new();
    let mut names = Vec::new();
    for (ti, p) in params.iter().enumerate().filter(|(_, p)| p.kind != ParamKind::Buffer) {
        let n = p.value.len();
        let picks = if n <= cfg.coords_per_tensor { (0..n).collect() } else { sample(&mut rng, n, cfg.coords_per_tensor).into_vec() };
        let flip = cfg.corrupt.as_deref().is_some_and(|c| p.name.starts_with(c));
        for index in picks {
            probes.push(Coord { tensor: ti, index });
            analytic.push(if flip { -p.grad[index] } else { p.grad[index] });
        }
        names.push((ti, p.name.clone()));
    }
    drop(params);

    let model_ref = &model;
    let numeric = par::map(&probes, |probe| -> Result<Option<f64>> {
        let eval = |delta: f64| -> Result<(f64, u64)> {
            let mut m = model_ref.clone();
            let mut params = m.params_mut();
            params[probe.tensor].value[probe.index] += delta;
            drop(params);
            objective(&m, &batch, train, linear_probe.as_ref())
        };
        let (plus, sp) = eval(cfg.step)?;
        let (minus, sm) = eval(-cfg.step)?;
        Ok((sp == signature && sm == signature).then(|| (plus - minus) / (2.0 * cfg.step)))
    });

    let mut reports: BTreeMap<usize, TensorReport> = names
        .into_iter()
        .map(|(ti, name)| (ti, TensorReport { name, checked: 0, excluded: 0, max_error: 0.0, worst: (0.0, 0.0) }))
        .collect();
    for ((probe, a), n) in probes.iter().zip(&analytic).zip(numeric) {
        let r = reports.get_mut(&probe.tensor).expect("probed tensors are registered");
        match n? {
            Some(n) => {
                r.checked += 1;
                let e = relative_error(*a, n, cfg.error_floor);
                if e >= r.max_error {
                    r.max_error = e;
                    r.worst = (*a, n);
                }
            }
            None => r.excluded += 1,
        }
    }
    let tensors: Vec<TensorReport> = reports.into_values().collect();
    let excluded: usize = tensors.iter().map(|t| t.excluded).sum();
    if 2 * excluded > probes.len() {
        return Err(Error::BoundaryDegeneracy { gap: margin });
    }
    Ok(GradcheckReport { tensors, seed, attempts: 1, margin, min_degree, tolerance: cfg.tolerance })
}

/// Runs the check, reseeding after boundary-degenerate draws up to `max_retries` times.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut last = None;
    for a in 0..=cfg.max_retries {
        let seed = cfg.seed.wrapping_add(a as u64 * 7919);
        match attempt(cfg, seed) {
            Ok(mut r) => {
                r.attempts = a + 1;
                return Ok(r);
            }
            Err(e @ Error::BoundaryDegeneracy { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names_drop_indices() {
        assert_eq!(group_name("stage1.layer2.tcn.branch0.conv"), "tcn.conv");
        assert_eq!(group_name("stage0.layer0.gcn.ahc.phi"), "gcn.ahc.phi");
        assert_eq!(group_name("classifier.weight"), "classifier.weight");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(1.0, -1.0, 1e-6) - 2.0).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
