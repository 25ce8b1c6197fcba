//! Output-state tomography with the mesh split in two: the leading layers
//! prepare a state, the trailing layers act as a configurable measurement
//! device whose calibrated transfer gives the effect rows.
//!
//! The estimator is `ρ = T T† / Tr(T T†)` with `T` lower triangular. Each
//! setting's predicted distribution is renormalized over its ports, so the
//! trace of `T T†` cancels from the likelihood.

use std::ops::Range;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::rng_for;
use crate::error::{Error, Result};
use crate::forward::{apply_layers, localized_input, output_distribution, Parameters};
use crate::grad::GradVector;
use crate::linalg::{hermitian_eigen, numeric_rank, CMatrix};
use crate::mesh::{CircuitSpec, MeshSection};
use crate::metrics::DensityMatrix;
use crate::optim::{AdamConfig, AdamState};

pub const DEFAULT_DYNAMICS_DEPTH: usize = 9;
pub const DEFAULT_SETTING_COUNT: usize = 14;

/// Relative singular-value cutoff for the design rank.
const RANK_TOL: f64 = 1e-10;

/// Layers `0..depth` and `depth..T` of `spec`.
pub fn split_mesh(spec: &CircuitSpec, depth: usize) -> Result<(MeshSection, MeshSection)> {
    if depth == 0 || depth >= spec.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "dynamics depth must lie in 1..{}, got {depth}",
            spec.layers.len()
        )));
    }
    let section = |range: Range<usize>| MeshSection {
        mode_count: spec.mode_count,
        first_layer: range.start,
        layers: spec.layers[range].to_vec(),
    };
    Ok((section(0..depth), section(depth..spec.layers.len())))
}

/// Modes reachable from the input after `depth` layers.
pub fn state_modes(spec: &CircuitSpec, depth: usize) -> Range<usize> {
    let lo = spec.layers[..depth]
        .iter()
        .flat_map(|l| l.units.iter().map(|u| u.top_mode))
        .min()
        .unwrap_or(spec.input_mode)
        .min(spec.input_mode);
    let hi = spec.layers[..depth]
        .iter()
        .flat_map(|l| l.units.iter().map(|u| u.top_mode + 2))
        .max()
        .unwrap_or(spec.input_mode + 1)
        .max(spec.input_mode + 1);
    lo..hi
}

fn section_phases(spec: &CircuitSpec, section: &MeshSection, params: &Parameters, currents: &[f64]) -> Result<Vec<f64>> {
    let indices = section.ps_indices();
    if currents.len() != indices.len() {
        return Err(Error::dim("section currents", indices.len(), currents.len()));
    }
    let mut phases = vec![0.0; spec.ps_count];
    for (&k, &i) in indices.iter().zip(currents) {
        phases[k] = params.a[k] * i * i + params.b[k];
    }
    Ok(phases)
}

/// Amplitudes on [`state_modes`] after the dynamics section, unnormalized.
pub fn dynamics_state(
    spec: &CircuitSpec,
    dynamics: &MeshSection,
    params: &Parameters,
    currents: &[f64],
) -> Result<Vec<Complex64>> {
    params.check(spec)?;
    let phases = section_phases(spec, dynamics, params, currents)?;
    let mut psi = localized_input(spec);
    apply_layers(&dynamics.layers, params, &phases, &mut psi);
    Ok(psi[state_modes(spec, dynamics.layers.len())].to_vec())
}

/// One current pattern on the measurement section and its effect rows:
/// active-port probabilities are `|E ψ|²` renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSetting {
    pub currents: Vec<f64>,
    /// Active ports × state dimension.
    pub effects: CMatrix,
}

pub fn build_effects(
    spec: &CircuitSpec,
    section: &MeshSection,
    params: &Parameters,
    settings: &[Vec<f64>],
) -> Result<Vec<MeasurementSetting>> {
    params.check(spec)?;
    if section.mode_count != spec.mode_count || section.first_layer + section.layers.len() != spec.layers.len() {
        return Err(Error::InvalidArgument("measurement section must end the mesh".into()));
    }
    let modes = state_modes(spec, section.first_layer);
    let ports = spec.masked_ports();
    settings
        .iter()
        .map(|currents| {
            let phases = section_phases(spec, section, params, currents)?;
            let mut effects = CMatrix::zeros(ports.len(), modes.len());
            for (col, mode) in modes.clone().enumerate() {
                let mut psi = vec![Complex64::new(0.0, 0.0); spec.mode_count];
                psi[mode] = Complex64::new(1.0, 0.0);
                apply_layers(&section.layers, params, &phases, &mut psi);
                for (row, (&port, &eta)) in ports.iter().zip(&params.eta).enumerate() {
                    effects[(row, col)] = psi[port] * eta.sqrt();
                }
            }
            Ok(MeasurementSetting {
                currents: currents.clone(),
                effects,
            })
        })
        .collect()
}

/// Rank of the span of all effect operators `e† e`, out of `d²`.
pub fn design_rank(settings: &[MeasurementSetting]) -> usize {
    let rows: Vec<Vec<f64>> = settings
        .iter()
        .flat_map(|s| s.effects.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
        .map(|e| {
            let d = e.len();
            let mut v = Vec::with_capacity(d * d);
            for i in 0..d {
                v.push(e[i].norm_sqr());
                for j in i + 1..d {
                    let z = e[i].conj() * e[j];
                    v.push(z.re);
                    v.push(z.im);
                }
            }
            v
        })
        .collect();
    numeric_rank(&rows, RANK_TOL)
}

/// Uniform random currents for the measurement-section shifters.
pub fn random_settings(section: &MeshSection, count: usize, range: (f64, f64), seed: u64, stream: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, stream);
    let n = section.ps_indices().len();
    (0..count)
        .map(|_| (0..n).map(|_| rng.random_range(range.0..=range.1)).collect())
        .collect()
}

/// Real parameters of a lower-triangular `T`: `d` real diagonal entries,
/// then `(re, im)` for each below-diagonal entry in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CholeskyParam {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl CholeskyParam {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dim * dim {
            return Err(Error::dim("Cholesky parameters", dim * dim, values.len()));
        }
        Ok(Self { dim, values })
    }

    pub fn scaled_identity(dim: usize) -> Self {
        let mut values = vec![0.0; dim * dim];
        values[..dim].fill(1.0);
        Self { dim, values }
    }

    pub fn to_matrix(&self) -> CMatrix {
        let d = self.dim;
        let mut t = CMatrix::zeros(d, d);
        for i in 0..d {
            t[(i, i)] = Complex64::new(self.values[i], 0.0);
        }
        let mut k = d;
        for i in 1..d {
            for j in 0..i {
                t[(i, j)] = Complex64::new(self.values[k], self.values[k + 1]);
                k += 2;
            }
        }
        t
    }

    /// Scatters a complex matrix gradient `∂/∂Re + i ∂/∂Im` onto the
    /// parameter layout.
    fn flatten_grad(&self, g: &CMatrix) -> Vec<f64> {
        let d = self.dim;
        let mut out = Vec::with_capacity(d * d);
        out.extend((0..d).map(|i| g[(i, i)].re));
        for i in 1..d {
            for j in 0..i {
                out.push(g[(i, j)].re);
                out.push(g[(i, j)].im);
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn density(&self) -> Result<DensityMatrix> {
        let trace = self.trace();
        if !(trace > 0.0) || !trace.is_finite() {
            return Err(Error::NonFinite(format!("Cholesky trace {trace}")));
        }
        let t = self.to_matrix();
        let rho = &t * t.adjoint() / Complex64::new(trace, 0.0);
        // Hermitian by construction; symmetrize away rounding.
        let rho = (&rho + rho.adjoint()) * Complex64::new(0.5, 0.0);
        Ok(DensityMatrix::from_trusted(rho))
    }
}

fn check_inputs(settings: &[MeasurementSetting], data: &[Vec<f64>]) -> Result<usize> {
    let first = settings
        .first()
        .ok_or_else(|| Error::InvalidArgument("tomography needs at least one setting".into()))?;
    if data.len() != settings.len() {
        return Err(Error::dim("measured distributions", settings.len(), data.len()));
    }
    let d = first.effects.ncols();
    for (s, f) in settings.iter().zip(data) {
        if s.effects.ncols() != d {
            return Err(Error::dim("effect columns", d, s.effects.ncols()));
        }
        if f.len() != s.effects.nrows() {
            return Err(Error::dim("measured distribution", s.effects.nrows(), f.len()));
        }
        if f.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument("measured probabilities must be finite and nonnegative".into()));
        }
    }
    Ok(d)
}

/// `Σ_s Σ_j f_sj log p_sj` and its gradient with respect to `param`.
pub fn log_likelihood_grad(settings: &[MeasurementSetting], data: &[Vec<f64>], param: &CholeskyParam) -> (f64, Vec<f64>) {
    let t = param.to_matrix();
    let d = param.dim;
    let mut total = 0.0;
    let mut g = CMatrix::zeros(d, d);
    for (s, f) in settings.iter().zip(data) {
        let v = &s.effects * &t;
        let q: Vec<f64> = v.row_iter().map(|r| r.iter().map(|z| z.norm_sqr()).sum()).collect();
        let q_total: f64 = q.iter().sum();
        let f_total: f64 = f.iter().sum();
        if f_total == 0.0 {
            continue;
        }
        total -= f_total * q_total.ln();
        let mut w = DMatrix::<Complex64>::zeros(q.len(), 1);
        for (j, (&qj, &fj)) in q.iter().zip(f).enumerate() {
            let mut wj = -f_total / q_total;
            if fj > 0.0 {
                total += fj * qj.ln();
                wj += fj / qj;
            }
            w[(j, 0)] = Complex64::new(2.0 * wj, 0.0);
        }
        // ∂q_j/∂T_ik = 2 conj(E_ji) V_jk, weighted by ∂L/∂q_j.
        let weighted = DMatrix::from_fn(v.nrows(), d, |j, k| v[(j, k)] * w[(j, 0)]);
        g += s.effects.adjoint() * weighted;
    }
    (total, param.flatten_grad(&g))
}

pub fn log_likelihood(settings: &[MeasurementSetting], data: &[Vec<f64>], param: &CholeskyParam) -> f64 {
    log_likelihood_grad(settings, data, param).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub adam: AdamConfig,
    /// Stop after `streak` accepted steps each changing the log-likelihood
    /// by less than this fraction.
    pub rel_tol: f64,
    pub streak: usize,
    pub max_iterations: usize,
    /// Allowed log-likelihood decrease on an accepted step.
    pub monotone_tol: f64,
    /// On a deficient design, also fit a rank-one `T` and keep it when its
    /// likelihood matches the full fit within `tie_tol` (relative).
    pub rank_one_refine: bool,
    /// Rank-one fits started from this many leading eigenvectors.
    pub rank_one_starts: usize,
    pub tie_tol: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig { decay: 1.0, ..AdamConfig::default() },
            rel_tol: 1e-9,
            streak: 5,
            max_iterations: 5000,
            monotone_tol: 1e-12,
            rank_one_refine: true,
            rank_one_starts: 3,
            tie_tol: 1e-7,
        }
    }
}

/// One gradient-ascent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleStage {
    pub name: String,
    /// Log-likelihood after each accepted step, starting from the initial point.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub rejected: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct MleResult {
    pub rho: DensityMatrix,
    pub param: CholeskyParam,
    pub log_likelihood: f64,
    pub stages: Vec<MleStage>,
    /// Index into `stages` of the run that produced `rho`.
    pub chosen: usize,
    pub design_rank: usize,
    /// Set when the effects do not span all `d²` operator directions.
    pub deficient_design: bool,
}

pub fn mle_reconstruct(settings: &[MeasurementSetting], data: &[Vec<f64>], config: &MleConfig) -> Result<MleResult> {
    let d = check_inputs(settings, data)?;
    mle_reconstruct_from(settings, data, config, CholeskyParam::scaled_identity(d))
}

/// Gradient ascent from `init`; a zero-trace start is replaced by the
/// scaled identity.
pub fn mle_reconstruct_from(
    settings: &[MeasurementSetting],
    data: &[Vec<f64>],
    config: &MleConfig,
    init: CholeskyParam,
) -> Result<MleResult> {
    let d = check_inputs(settings, data)?;
    if init.dim != d || init.values.len() != d * d {
        return Err(Error::dim("initial Cholesky parameters", d * d, init.values.len()));
    }
    let usable = init.trace() > 0.0
        && init.values.iter().all(|v| v.is_finite())
        && log_likelihood(settings, data, &init).is_finite();
    let init = if usable { init } else { CholeskyParam::scaled_identity(d) };
    let design_rank = design_rank(settings);
    let deficient_design = design_rank < d * d;

    let (mut param, mut ll, full) = ascend(settings, data, config, init, &vec![true; d * d], "full")?;
    let mut stages = vec![full];
    let mut chosen = 0;
    if deficient_design && config.rank_one_refine && d > 1 {
        let full_ll = ll;
        for (k, start) in rank_one_starts(&param, config.rank_one_starts)?.into_iter().enumerate() {
            // A start orthogonal to an observed outcome has zero likelihood.
            if !log_likelihood(settings, data, &start).is_finite() {
                continue;
            }
            let (p1, ll1, stage) = ascend(settings, data, config, start, &rank_one_mask(d), &format!("rank-one-{k}"))?;
            stages.push(stage);
            let best = if chosen == 0 { full_ll - config.tie_tol * full_ll.abs().max(1.0) } else { ll };
            if ll1 > best {
                (param, ll, chosen) = (p1, ll1, stages.len() - 1);
            }
        }
    }
    Ok(MleResult {
        rho: param.density()?,
        param,
        log_likelihood: ll,
        stages,
        chosen,
        design_rank,
        deficient_design,
    })
}

/// Parameters touching the first column of `T` only.
fn rank_one_mask(d: usize) -> Vec<bool> {
    let mut mask = vec![false; d * d];
    mask[0] = true;
    let mut k = d;
    for i in 1..d {
        for j in 0..i {
            if j == 0 {
                mask[k] = true;
                mask[k + 1] = true;
            }
            k += 2;
        }
    }
    mask
}

/// Rank-one `T`s built from the leading eigenvectors of `ρ(param)`, each
/// phased so its first entry is real.
fn rank_one_starts(param: &CholeskyParam, count: usize) -> Result<Vec<CholeskyParam>> {
    let d = param.dim;
    let rho = param.density()?;
    let (_, vectors) = hermitian_eigen(rho.matrix());
    (0..count.min(d))
        .map(|n| {
            let v = vectors.column(d - 1 - n);
            let phase = if v[0].norm() > 0.0 { v[0].conj() / v[0].norm() } else { Complex64::new(1.0, 0.0) };
            let mut values = vec![0.0; d * d];
            values[0] = (v[0] * phase).re;
            let mut k = d;
            for i in 1..d {
                let z = v[i] * phase;
                values[k] = z.re;
                values[k + 1] = z.im;
                k += 2 * i;
            }
            CholeskyParam::new(d, values)
        })
        .collect()
}

/// Adam ascent on the coordinates in `mask`. Steps that lower the
/// likelihood are undone and the learning rate halved.
fn ascend(
    settings: &[MeasurementSetting],
    data: &[Vec<f64>],
    config: &MleConfig,
    mut param: CholeskyParam,
    mask: &[bool],
    name: &str,
) -> Result<(CholeskyParam, f64, MleStage)> {
    let d = param.dim;
    let mut adam = AdamState::new(config.adam, d * d)?;
    let (mut ll, mut grad) = log_likelihood_grad(settings, data, &param);
    if !ll.is_finite() {
        return Err(Error::NonFinite(format!("initial log-likelihood of the {name} fit")));
    }
    let mut stage = MleStage {
        name: name.to_string(),
        history: vec![ll],
        iterations: 0,
        rejected: 0,
        converged: false,
    };
    let mut small = 0;
    while stage.iterations < config.max_iterations {
        stage.iterations += 1;
        let ascent = GradVector {
            values: grad.iter().map(|g| -g).collect(),
            mask: mask.to_vec(),
        };
        let mut trial = param.values.clone();
        adam.step(&mut trial, &ascent)?;
        adam.end_epoch();
        let candidate = CholeskyParam { dim: d, values: trial };
        let (next, next_grad) = log_likelihood_grad(settings, data, &candidate);
        if !next.is_finite() || next < ll - config.monotone_tol * ll.abs().max(1.0) || !(candidate.trace() > 0.0) {
            stage.rejected += 1;
            adam.lr *= 0.5;
            continue;
        }
        let rel = (next - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        param = candidate;
        ll = next;
        grad = next_grad;
        stage.history.push(ll);
        small = if rel < config.rel_tol { small + 1 } else { 0 };
        if small >= config.streak {
            stage.converged = true;
            break;
        }
    }
    Ok((param, ll, stage))
}

/// Noiseless tomography data for one dynamics pattern, simulated through
/// the full forward model rather than through the effect rows.
#[derive(Debug, Clone)]
pub struct SyntheticTomography {
    pub truth: DensityMatrix,
    pub settings: Vec<MeasurementSetting>,
    pub data: Vec<Vec<f64>>,
}

pub fn simulate_tomography(
    spec: &CircuitSpec,
    params: &Parameters,
    depth: usize,
    dynamics_currents: &[f64],
    setting_currents: &[Vec<f64>],
) -> Result<SyntheticTomography> {
    let (dynamics, measurement) = split_mesh(spec, depth)?;
    let truth = DensityMatrix::from_pure(&dynamics_state(spec, &dynamics, params, dynamics_currents)?)?;
    let settings = build_effects(spec, &measurement, params, setting_currents)?;
    let dyn_idx = dynamics.ps_indices();
    let meas_idx = measurement.ps_indices();
    let input = localized_input(spec);
    let data = setting_currents
        .iter()
        .map(|sc| {
            let mut currents = vec![0.0; spec.ps_count];
            for (&k, &i) in dyn_idx.iter().zip(dynamics_currents) {
                currents[k] = i;
            }
            for (&k, &i) in meas_idx.iter().zip(sc) {
                currents[k] = i;
            }
            output_distribution(spec, params, &currents, &input)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticTomography { truth, settings, data })
}
