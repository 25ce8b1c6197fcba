//! Training loss and its exact gradient.
//!
//! The gradient is accumulated in reverse through the layered network,
//! using the conjugate-adjoint convention `G = ∂L/∂Re ψ + i ∂L/∂Im ψ`.
//! For a linear map `y = M x` this gives `G_x = M† G_y`, and for a real
//! parameter `p` entering `M`, `∂L/∂p = Re Σ conj(G_y) ∂y/∂p`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::forward::{apply_unit, ParamGroup, Parameters};
use crate::mesh::CircuitSpec;

/// Samples per reduction chunk. Fixed so sums do not depend on thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `½ Σ_v |P_v − Q_v|` per sample.
    #[default]
    L1,
    /// Multinomial negative log-likelihood `−Σ_v Q_v log P_v`.
    NegLogLikelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub reduction: Reduction,
}

/// Partial derivatives in flattened `(a, b, theta, alpha, eta)` order, with
/// the trainable mask they were computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GradVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Builds a trainable mask enabling `groups`, minus any frozen shifters.
pub fn group_mask(params: &Parameters, groups: &[ParamGroup], frozen_shifters: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; params.len()];
    for &g in groups {
        mask[params.range(g)].fill(true);
    }
    for &k in frozen_shifters {
        for g in [ParamGroup::A, ParamGroup::B] {
            let r = params.range(g);
            if k < r.len() {
                mask[r.start + k] = false;
            }
        }
    }
    mask
}

/// `Σ_n ½ ‖P_ML(I_n) − P_tar,n‖₁`.
pub fn loss(spec: &CircuitSpec, params: &Parameters, batch: &[Sample], input: &[Complex64]) -> Result<f64> {
    evaluate(spec, params, batch, input, LossConfig::default(), None).map(|(l, _)| l)
}

pub fn loss_with(
    spec: &CircuitSpec,
    params: &Parameters,
    batch: &[Sample],
    input: &[Complex64],
    config: LossConfig,
) -> Result<f64> {
    evaluate(spec, params, batch, input, config, None).map(|(l, _)| l)
}

pub fn loss_and_grad(
    spec: &CircuitSpec,
    params: &Parameters,
    batch: &[Sample],
    input: &[Complex64],
    mask: &[bool],
) -> Result<(f64, GradVector)> {
    loss_and_grad_with(spec, params, batch, input, mask, LossConfig::default())
}

pub fn loss_and_grad_with(
    spec: &CircuitSpec,
    params: &Parameters,
    batch: &[Sample],
    input: &[Complex64],
    mask: &[bool],
    config: LossConfig,
) -> Result<(f64, GradVector)> {
    if mask.len() != params.len() {
        return Err(Error::dim("trainable mask", params.len(), mask.len()));
    }
    let (l, g) = evaluate(spec, params, batch, input, config, Some(mask))?;
    Ok((
        l,
        GradVector {
            values: g.expect("gradient requested"),
            mask: mask.to_vec(),
        },
    ))
}

/// Central differences of the training loss, one coordinate at a time.
pub fn finite_diff_grad(
    spec: &CircuitSpec,
    params: &Parameters,
    batch: &[Sample],
    input: &[Complex64],
    step: f64,
) -> Result<GradVector> {
    finite_diff_grad_with(spec, params, batch, input, step, LossConfig::default())
}

pub fn finite_diff_grad_with(
    spec: &CircuitSpec,
    params: &Parameters,
    batch: &[Sample],
    input: &[Complex64],
    step: f64,
    config: LossConfig,
) -> Result<GradVector> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step {step} must be positive")));
    }
    let flat = params.to_flat();
    let mut failure = None;
    let values = central_differences(
        |x| {
            let mut p = params.clone();
            p.set_flat(x);
            match loss_with(spec, &p, batch, input, config) {
                Ok(l) => l,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &flat,
        step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradVector {
        mask: vec![true; values.len()],
        values,
    })
}

/// `(f(x + h e_k) − f(x − h e_k)) / 2h` for every coordinate `k`.
pub fn central_differences(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + step;
            let up = f(&probe);
            probe[k] = x[k] - step;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * step)
        })
        .collect()
}

struct Layout {
    a: usize,
    b: usize,
    theta: usize,
    alpha: usize,
    eta: usize,
    len: usize,
}

impl Layout {
    fn new(p: &Parameters) -> Self {
        Layout {
            a: p.range(ParamGroup::A).start,
            b: p.range(ParamGroup::B).start,
            theta: p.range(ParamGroup::Theta).start,
            alpha: p.range(ParamGroup::Alpha).start,
            eta: p.range(ParamGroup::Eta).start,
            len: p.len(),
        }
    }
}

fn evaluate(
    spec: &CircuitSpec,
    params: &Parameters,
    batch: &[Sample],
    input: &[Complex64],
    config: LossConfig,
    mask: Option<&[bool]>,
) -> Result<(f64, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    params.check(spec)?;
    if input.len() != spec.mode_count {
        return Err(Error::dim("input state", spec.mode_count, input.len()));
    }
    let ports = spec.masked_ports();
    for s in batch {
        if s.currents.len() != spec.ps_count {
            return Err(Error::dim("sample currents", spec.ps_count, s.currents.len()));
        }
        if s.probabilities.len() != ports.len() {
            return Err(Error::dim("sample probabilities", ports.len(), s.probabilities.len()));
        }
    }
    let layout = Layout::new(params);
    let want_grad = mask.is_some();

    let partials: Vec<(f64, Option<Vec<f64>>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut work = Workspace::new(spec, want_grad.then_some(layout.len));
            let mut total = 0.0;
            for s in chunk {
                total += work.sample(spec, &ports, params, &layout, s, input, config.kind)?;
            }
            Ok((total, work.grad))
        })
        .collect::<Result<_>>()?;

    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; layout.len]);
    for (l, g) in partials {
        total += l;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {total}")));
    }
    if config.reduction == Reduction::Mean {
        let n = batch.len() as f64;
        total /= n;
        if let Some(g) = grad.as_mut() {
            g.iter_mut().for_each(|v| *v /= n);
        }
    }
    if let (Some(g), Some(mask)) = (grad.as_mut(), mask) {
        g.iter_mut().zip(mask).filter(|(_, &m)| !m).for_each(|(v, _)| *v = 0.0);
    }
    Ok((total, grad))
}

/// Per-thread buffers: the state entering every layer and the adjoint.
struct Workspace {
    states: Vec<Vec<Complex64>>,
    phases: Vec<f64>,
    adjoint: Vec<Complex64>,
    grad: Option<Vec<f64>>,
}

impl Workspace {
    fn new(spec: &CircuitSpec, grad_len: Option<usize>) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Workspace {
            states: vec![vec![zero; spec.mode_count]; spec.layers.len() + 1],
            phases: vec![0.0; spec.ps_count],
            adjoint: vec![zero; spec.mode_count],
            grad: grad_len.map(|n| vec![0.0; n]),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn sample(
        &mut self,
        spec: &CircuitSpec,
        ports: &[usize],
        p: &Parameters,
        layout: &Layout,
        sample: &Sample,
        input: &[Complex64],
        kind: LossKind,
    ) -> Result<f64> {
        for (k, phi) in self.phases.iter_mut().enumerate() {
            let i = sample.currents[k];
            *phi = p.a[k] * i * i + p.b[k];
        }
        self.states[0].copy_from_slice(input);
        for (l, layer) in spec.layers.iter().enumerate() {
            let (done, rest) = self.states.split_at_mut(l + 1);
            let next = &mut rest[0];
            next.copy_from_slice(&done[l]);
            for u in &layer.units {
                apply_unit(
                    next,
                    u,
                    p.theta[u.bs_index],
                    p.alpha[u.bs_index],
                    u.ps_index.map(|k| self.phases[k]),
                );
            }
        }
        let out = &self.states[spec.layers.len()];

        let intensity: Vec<f64> = ports.iter().map(|&m| out[m].norm_sqr()).collect();
        let weights: Vec<f64> = intensity.iter().zip(&p.eta).map(|(i, e)| i * e).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateDistribution(total));
        }
        let pred: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let target = &sample.probabilities;

        let (loss, dl_dp): (f64, Vec<f64>) = match kind {
            LossKind::L1 => {
                let l = 0.5 * pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>();
                let g = pred
                    .iter()
                    .zip(target)
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            0.5
                        } else if d < 0.0 {
                            -0.5
                        } else {
                            0.0
                        }
                    })
                    .collect();
                (l, g)
            }
            LossKind::NegLogLikelihood => {
                let l = -pred
                    .iter()
                    .zip(target)
                    .filter(|(_, &q)| q > 0.0)
                    .map(|(a, q)| q * a.ln())
                    .sum::<f64>();
                let g = pred
                    .iter()
                    .zip(target)
                    .map(|(a, &q)| if q > 0.0 { -q / a } else { 0.0 })
                    .collect();
                (l, g)
            }
        };

        let Some(grad) = self.grad.as_mut() else {
            return Ok(loss);
        };

        // through the renormalization P = w / Σw
        let mean: f64 = dl_dp.iter().zip(&pred).map(|(g, p)| g * p).sum();
        let adj = &mut self.adjoint;
        adj.fill(Complex64::new(0.0, 0.0));
        for (v, &m) in ports.iter().enumerate() {
            let dl_dw = (dl_dp[v] - mean) / total;
            grad[layout.eta + v] += dl_dw * intensity[v];
            adj[m] = out[m] * (2.0 * dl_dw * p.eta[v]);
        }

        for (l, layer) in spec.layers.iter().enumerate().rev() {
            let x = &self.states[l];
            let y = &self.states[l + 1];
            for u in &layer.units {
                let (i, j) = (u.top_mode, u.top_mode + 1);
                let theta = p.theta[u.bs_index];
                let alpha = p.alpha[u.bs_index];
                let (s, c) = theta.sin_cos();
                let amp = alpha.sqrt();
                let upper = (x[i] * c + x[j] * s) * amp;
                let lower = (x[j] * c - x[i] * s) * amp;
                let e = match u.ps_index {
                    Some(k) => Complex64::from_polar(1.0, self.phases[k]),
                    None => Complex64::new(1.0, 0.0),
                };
                let (gi, gj) = (adj[i], adj[j]);

                // ∂y_i/∂θ = lower, ∂y_j/∂θ = −e·upper
                grad[layout.theta + u.bs_index] += (gi.conj() * lower - gj.conj() * e * upper).re;
                // y ∝ √α
                grad[layout.alpha + u.bs_index] += (gi.conj() * y[i] + gj.conj() * y[j]).re / (2.0 * alpha);
                if let Some(k) = u.ps_index {
                    // ∂y_j/∂φ = i·y_j
                    let dphi = (gj.conj() * Complex64::new(0.0, 1.0) * y[j]).re;
                    let cur = sample.currents[k];
                    grad[layout.a + k] += dphi * cur * cur;
                    grad[layout.b + k] += dphi;
                }
                let ec = e.conj();
                adj[i] = (gi * c - ec * gj * s) * amp;
                adj[j] = (gi * s + ec * gj * c) * amp;
            }
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, rng_for, sample_target_params, TargetConfig};
    use crate::forward::{localized_input, output_distribution};
    use crate::mesh::build_qw_mesh;
    use rand::Rng;
    use std::f64::consts::PI;

    fn setup(t: usize, n: usize, noise: f64, seed: u64) -> (CircuitSpec, Parameters, Vec<Sample>) {
        let spec = build_qw_mesh(t).unwrap().with_all_ports();
        let truth = sample_target_params(&spec, &mut rng_for(seed, 0), &TargetConfig::default());
        let ds = generate_synthetic_dataset(&spec, &truth, n, noise, (0.0, 7.0), seed).unwrap();
        (spec, truth, ds.samples)
    }

    fn perturbed(p: &Parameters, rng: &mut impl Rng) -> Parameters {
        let mut q = p.clone();
        let mut flat = q.to_flat();
        for v in &mut flat {
            *v += rng.random_range(-0.2..0.2);
        }
        q.set_flat(&flat);
        q
    }

    #[test]
    fn toy_losses() {
        // two-port toy: a single balanced splitter, reshaped by coupling
        let spec = build_qw_mesh(1).unwrap();
        let mut p = Parameters::ideal(&spec);
        p.eta = vec![0.6, 0.4];
        let input = localized_input(&spec);
        let pred = output_distribution(&spec, &p, &[], &input).unwrap();
        assert!((pred[0] - 0.6).abs() < 1e-15);
        let batch = vec![Sample {
            currents: vec![],
            probabilities: vec![0.5, 0.5],
        }];
        assert!((loss(&spec, &p, &batch, &input).unwrap() - 0.1).abs() < 1e-15);

        p.eta = vec![1.0, 0.0];
        let batch = vec![Sample {
            currents: vec![],
            probabilities: vec![0.0, 1.0],
        }];
        assert!((loss(&spec, &p, &batch, &input).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_at_generating_parameters() {
        let (spec, truth, batch) = setup(5, 30, 0.0, 1);
        let input = localized_input(&spec);
        let mask = vec![true; truth.len()];
        let (l, g) = loss_and_grad(&spec, &truth, &batch, &input, &mask).unwrap();
        assert!(l < 1e-12);
        assert!(g.norm() < 1e-8, "gradient norm {}", g.norm());
    }

    #[test]
    fn masking_contract() {
        let (spec, truth, batch) = setup(4, 8, 0.01, 2);
        let input = localized_input(&spec);
        let p = perturbed(&truth, &mut rng_for(2, 9));
        let mask = group_mask(&p, &[ParamGroup::Eta], &[]);
        let (_, g) = loss_and_grad(&spec, &p, &batch, &input, &mask).unwrap();
        for (k, (&v, &m)) in g.values.iter().zip(&mask).enumerate() {
            if !m {
                assert_eq!(v, 0.0, "coordinate {k}");
            }
        }
        assert!(g.values[p.range(ParamGroup::Eta)].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn quadratic_oracle_is_exact() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1];
        let g = central_differences(f, &[0.7, -1.3], 1e-3);
        assert!((g[0] - (6.0 * 0.7 + 2.0 * 1.3)).abs() < 1e-9);
        assert!((g[1] - (-2.0 * 0.7 - 1.3)).abs() < 1e-9);
    }

    fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn analytic_matches_finite_differences() {
        for (t, seed) in [(3, 10), (3, 11), (5, 12)] {
            let (spec, truth, batch) = setup(t, 4, 0.02, seed);
            let input = localized_input(&spec);
            let p = perturbed(&truth, &mut rng_for(seed, 7));
            let mask = vec![true; p.len()];
            let (_, g) = loss_and_grad(&spec, &p, &batch, &input, &mask).unwrap();
            let fd = finite_diff_grad(&spec, &p, &batch, &input, 1e-5).unwrap();
            let err = max_rel_error(&g.values, &fd.values);
            assert!(err < 1e-4, "T={t}: relative error {err}");
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let (spec, truth, batch) = setup(4, 5, 0.01, 21);
        let input = localized_input(&spec);
        let p = perturbed(&truth, &mut rng_for(21, 3));
        let cfg = LossConfig {
            kind: LossKind::NegLogLikelihood,
            reduction: Reduction::Mean,
        };
        let mask = vec![true; p.len()];
        let (_, g) = loss_and_grad_with(&spec, &p, &batch, &input, &mask, cfg).unwrap();
        let fd = finite_diff_grad_with(&spec, &p, &batch, &input, 1e-5, cfg).unwrap();
        assert!(max_rel_error(&g.values, &fd.values) < 1e-5);
    }

    #[test]
    fn step_halving_reduces_disagreement() {
        let (spec, truth, batch) = setup(3, 4, 0.02, 31);
        let input = localized_input(&spec);
        let p = perturbed(&truth, &mut rng_for(31, 1));
        let (_, g) = loss_and_grad(&spec, &p, &batch, &input, &vec![true; p.len()]).unwrap();
        let err = |h: f64| {
            let fd = finite_diff_grad(&spec, &p, &batch, &input, h).unwrap();
            g.values.iter().zip(&fd.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        assert!(err(1e-5) < err(1e-4));
    }

    #[test]
    fn eta_scaling_direction_is_flat() {
        let (spec, truth, batch) = setup(5, 10, 0.01, 41);
        let input = localized_input(&spec);
        let p = perturbed(&truth, &mut rng_for(41, 1));
        let (_, g) = loss_and_grad(&spec, &p, &batch, &input, &vec![true; p.len()]).unwrap();
        let r = p.range(ParamGroup::Eta);
        let directional: f64 = g.values[r].iter().zip(&p.eta).map(|(g, e)| g * e).sum();
        assert!(directional.abs() < 1e-10, "{directional}");
    }

    #[test]
    fn offset_periodicity() {
        let (spec, truth, batch) = setup(4, 6, 0.01, 51);
        let input = localized_input(&spec);
        let p = perturbed(&truth, &mut rng_for(51, 1));
        let mask = vec![true; p.len()];
        let (l0, g0) = loss_and_grad(&spec, &p, &batch, &input, &mask).unwrap();
        let mut q = p.clone();
        q.b[2] += 2.0 * PI;
        let (l1, g1) = loss_and_grad(&spec, &q, &batch, &input, &mask).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
        let k = p.range(ParamGroup::B).start + 2;
        assert!((g0.values[k] - g1.values[k]).abs() < 1e-10);
    }
}
