//! Distribution- and state-level figures of merit.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::forward::{distribution_from_amplitudes, evolve, output_distribution, Parameters};
use crate::gauge::canonicalize;
use crate::linalg::{accurate_sum, hermitian_deviation, hermitian_eigen, nuclear_norm, psd_sqrt, CMatrix};
use crate::mesh::CircuitSpec;

/// Validity tolerance for Hermiticity, positivity and trace.
pub const STATE_TOL: f64 = 1e-10;

pub const DEFAULT_BINS: usize = 30;

/// A Hermitian, positive semidefinite, unit-trace matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: CMatrix,
}

impl DensityMatrix {
    /// Validates `matrix` within [`STATE_TOL`].
    pub fn new(matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::dim("density matrix columns", matrix.nrows(), matrix.ncols()));
        }
        let dev = hermitian_deviation(&matrix);
        if dev > STATE_TOL {
            return Err(Error::NotHermitian(dev));
        }
        let trace = matrix.trace().re;
        if (trace - 1.0).abs() > STATE_TOL {
            return Err(Error::InvalidArgument(format!("density matrix trace {trace}")));
        }
        let (values, _) = hermitian_eigen(&matrix);
        if values.first().is_some_and(|&v| v < -STATE_TOL) {
            return Err(Error::InvalidArgument(format!(
                "density matrix has eigenvalue {}",
                values[0]
            )));
        }
        Ok(DensityMatrix { matrix })
    }

    /// `|ψ⟩⟨ψ| / ⟨ψ|ψ⟩`.
    pub fn from_pure(psi: &[Complex64]) -> Result<Self> {
        let norm = accurate_sum(psi.iter().map(|z| z.norm_sqr()));
        if !(norm > 0.0) {
            return Err(Error::InvalidArgument("zero state vector".into()));
        }
        let d = psi.len();
        let matrix = CMatrix::from_fn(d, d, |i, j| psi[i] * psi[j].conj() / norm);
        Ok(DensityMatrix { matrix })
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        DensityMatrix {
            matrix: CMatrix::identity(dim, dim) / Complex64::new(dim as f64, 0.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    /// `Tr ρ²`.
    pub fn purity(&self) -> f64 {
        accurate_sum(self.matrix.iter().map(|z| z.norm_sqr()))
    }

    pub(crate) fn from_trusted(matrix: CMatrix) -> Self {
        DensityMatrix { matrix }
    }
}

/// `½ Σ |p_v − q_v|`.
pub fn l1_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("distribution", p.len(), q.len()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Uhlmann fidelity `Tr √(√ρ σ √ρ)`, evaluated as the trace norm of `√ρ √σ`.
pub fn fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(Error::dim("density matrix", rho.dim(), sigma.dim()));
    }
    for m in [rho, sigma] {
        let dev = hermitian_deviation(m.matrix());
        if dev > STATE_TOL {
            return Err(Error::NotHermitian(dev));
        }
    }
    let product = psd_sqrt(rho.matrix()) * psd_sqrt(sigma.matrix());
    Ok(nuclear_norm(&product))
}

/// `1 − F(ρ_tar, ρ)`, clamped to `[0, 1]`.
pub fn infidelity(target: &DensityMatrix, rho: &DensityMatrix) -> Result<f64> {
    Ok((1.0 - fidelity(target, rho)?).clamp(0.0, 1.0))
}

/// `|Tr ρ₁² − Tr ρ₂²|`.
pub fn purity_error(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("density matrix", a.dim(), b.dim()));
    }
    Ok((a.purity() - b.purity()).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Summary {
                count: 0,
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Summary {
            count: n,
            mean,
            std: var.sqrt(),
            median,
            min: sorted[0],
            max: sorted[n - 1],
        }
    }
}

/// Fraction of `values` strictly below `threshold`.
pub fn fraction_below(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().filter(|&&v| v < threshold).count() as f64 / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Uniform bins over `range`, or over `[0, max]` of the data when `None`.
    pub fn new(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Self {
        let bins = bins.max(1);
        let (lo, hi) = range.unwrap_or_else(|| {
            let top = values.iter().copied().fold(0.0, f64::max);
            (0.0, if top > 0.0 { top } else { 1.0 })
        });
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            if v < lo || v > hi || !v.is_finite() {
                continue;
            }
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub values: Vec<f64>,
    pub summary: Summary,
    pub histogram: Histogram,
}

impl MetricSeries {
    fn new(values: Vec<f64>, bins: usize) -> Self {
        MetricSeries {
            summary: Summary::of(&values),
            histogram: Histogram::new(&values, bins, None),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub l1: MetricSeries,
    /// Present only when the target parameters are known.
    pub infidelity: Option<MetricSeries>,
    pub purity_error: Option<MetricSeries>,
}

/// What the calibrated model is compared against.
#[derive(Debug, Clone, Copy)]
pub enum EvalSource<'a> {
    /// Known target chip, evaluated on the given current patterns.
    Truth {
        params: &'a Parameters,
        currents: &'a [Vec<f64>],
    },
    /// Measured (or pre-generated) distributions.
    Dataset(&'a [Sample]),
}

/// Detected output state: active-port amplitudes weighted by `√η`.
fn port_state(spec: &CircuitSpec, eta: &[f64], psi: &[Complex64]) -> Vec<Complex64> {
    spec.masked_ports().iter().zip(eta).map(|(&m, e)| psi[m] * e.sqrt()).collect()
}

pub fn evaluate(
    spec: &CircuitSpec,
    params_hat: &Parameters,
    source: EvalSource<'_>,
    input: &[Complex64],
    bins: usize,
) -> Result<MetricReport> {
    match source {
        EvalSource::Dataset(samples) => {
            let l1 = samples
                .par_iter()
                .map(|s| {
                    let p = output_distribution(spec, params_hat, &s.currents, input)?;
                    l1_distance(&p, &s.probabilities)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricReport {
                l1: MetricSeries::new(l1, bins),
                infidelity: None,
                purity_error: None,
            })
        }
        EvalSource::Truth { params, currents } => {
            // Intensities cannot fix the phase gauge, so both sides are
            // compared in the reporting gauge.
            let params_hat = &canonicalize(spec, params_hat).params;
            let params = &canonicalize(spec, params).params;
            let rows = currents
                .par_iter()
                .map(|c| {
                    let hat = evolve(spec, params_hat, c, input)?;
                    let tar = evolve(spec, params, c, input)?;
                    let d = l1_distance(
                        &distribution_from_amplitudes(spec, &params_hat.eta, &hat)?,
                        &distribution_from_amplitudes(spec, &params.eta, &tar)?,
                    )?;
                    let rho_hat = DensityMatrix::from_pure(&port_state(spec, &params_hat.eta, &hat))?;
                    let rho_tar = DensityMatrix::from_pure(&port_state(spec, &params.eta, &tar))?;
                    Ok((d, infidelity(&rho_tar, &rho_hat)?, purity_error(&rho_hat, &rho_tar)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let (l1, rest): (Vec<f64>, Vec<(f64, f64)>) = rows.into_iter().map(|(a, b, c)| (a, (b, c))).unzip();
            let (inf, pur): (Vec<f64>, Vec<f64>) = rest.into_iter().unzip();
            Ok(MetricReport {
                l1: MetricSeries::new(l1, bins),
                infidelity: Some(MetricSeries::new(inf, bins)),
                purity_error: Some(MetricSeries::new(pur, bins)),
            })
        }
    }
}
