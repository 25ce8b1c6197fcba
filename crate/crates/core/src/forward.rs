//! The differentiable chip model: currents → phases → lossy mesh →
//! amplitudes → coupling-weighted, masked, renormalized distribution.

use std::f64::consts::FRAC_PI_4;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{CircuitSpec, Layer, Unit};

/// Complex amplitude per mode. Not normalized once loss is present.
pub type AmplitudeState = Vec<Complex64>;

/// Phase-current coefficient assumed for an uncalibrated heater, rad/mA².
pub const NOMINAL_PHASE_COEFF: f64 = 0.12;

/// Trainable parameter groups, in flattened order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    A,
    B,
    Theta,
    Alpha,
    Eta,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::A,
        ParamGroup::B,
        ParamGroup::Theta,
        ParamGroup::Alpha,
        ParamGroup::Eta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::A => "a",
            ParamGroup::B => "b",
            ParamGroup::Theta => "theta",
            ParamGroup::Alpha => "alpha",
            ParamGroup::Eta => "eta",
        }
    }
}

/// Hardware parameters of a chip.
///
/// `a`, `b` are indexed by phase shifter, `theta`, `alpha` by beam splitter
/// and `eta` by active output port (top to bottom).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub eta: Vec<f64>,
}

impl Parameters {
    /// Ideal-hardware prior: nominal heater, zero offset, balanced lossless
    /// splitters, uniform coupling.
    pub fn ideal(spec: &CircuitSpec) -> Self {
        let ports = spec.masked_ports().len();
        Parameters {
            a: vec![NOMINAL_PHASE_COEFF; spec.ps_count],
            b: vec![0.0; spec.ps_count],
            theta: vec![FRAC_PI_4; spec.bs_count],
            alpha: vec![1.0; spec.bs_count],
            eta: vec![1.0; ports],
        }
    }

    pub fn check(&self, spec: &CircuitSpec) -> Result<()> {
        let ports = spec.masked_ports().len();
        for (what, len, expected) in [
            ("a", self.a.len(), spec.ps_count),
            ("b", self.b.len(), spec.ps_count),
            ("theta", self.theta.len(), spec.bs_count),
            ("alpha", self.alpha.len(), spec.bs_count),
            ("eta", self.eta.len(), ports),
        ] {
            if len != expected {
                return Err(Error::dim(what, expected, len));
            }
        }
        Ok(())
    }

    pub fn group(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::A => &self.a,
            ParamGroup::B => &self.b,
            ParamGroup::Theta => &self.theta,
            ParamGroup::Alpha => &self.alpha,
            ParamGroup::Eta => &self.eta,
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> &mut Vec<f64> {
        match group {
            ParamGroup::A => &mut self.a,
            ParamGroup::B => &mut self.b,
            ParamGroup::Theta => &mut self.theta,
            ParamGroup::Alpha => &mut self.alpha,
            ParamGroup::Eta => &mut self.eta,
        }
    }

    pub fn len(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.group(g).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index range of `group` inside the flattened vector.
    pub fn range(&self, group: ParamGroup) -> std::ops::Range<usize> {
        let mut start = 0;
        for g in ParamGroup::ALL {
            let len = self.group(g).len();
            if g == group {
                return start..start + len;
            }
            start += len;
        }
        unreachable!()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        ParamGroup::ALL
            .iter()
            .flat_map(|&g| self.group(g).iter().copied())
            .collect()
    }

    /// Overwrites every entry from a flattened vector of matching length.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flattened parameter length");
        let mut rest = flat;
        for g in ParamGroup::ALL {
            let dst = self.group_mut(g);
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
    }

    /// Phases for every shifter under the given currents.
    pub fn phases(&self, currents: &[f64]) -> Result<Vec<f64>> {
        currents_to_phases(&self.a, &self.b, currents)
    }
}

/// `φ_k = a_k I_k² + b_k`, without wrapping.
pub fn currents_to_phases(a: &[f64], b: &[f64], currents: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim("phase offsets", a.len(), b.len()));
    }
    if currents.len() != a.len() {
        return Err(Error::dim("currents", a.len(), currents.len()));
    }
    Ok(a.iter()
        .zip(b)
        .zip(currents)
        .map(|((&a, &b), &i)| a * i * i + b)
        .collect())
}

/// Applies one lossy beam splitter and, if present, the phase shifter on its
/// lower output.
#[inline]
pub fn apply_unit(state: &mut [Complex64], unit: &Unit, theta: f64, alpha: f64, phi: Option<f64>) {
    let (s, c) = theta.sin_cos();
    let amp = alpha.sqrt();
    let (i, j) = (unit.top_mode, unit.top_mode + 1);
    let (x, y) = (state[i], state[j]);
    state[i] = (x * c + y * s) * amp;
    let mut lower = (y * c - x * s) * amp;
    if let Some(phi) = phi {
        lower *= Complex64::from_polar(1.0, phi);
    }
    state[j] = lower;
}

/// Runs a sequence of layers in place with precomputed phases (indexed by
/// global phase-shifter index).
pub fn apply_layers(layers: &[Layer], params: &Parameters, phases: &[f64], state: &mut [Complex64]) {
    for layer in layers {
        for unit in &layer.units {
            let phi = unit.ps_index.map(|k| phases[k]);
            apply_unit(
                state,
                unit,
                params.theta[unit.bs_index],
                params.alpha[unit.bs_index],
                phi,
            );
        }
    }
}

/// Unit vector on the mesh's input mode.
pub fn localized_input(spec: &CircuitSpec) -> AmplitudeState {
    let mut psi = vec![Complex64::new(0.0, 0.0); spec.mode_count];
    psi[spec.input_mode] = Complex64::new(1.0, 0.0);
    psi
}

pub fn evolve(
    spec: &CircuitSpec,
    params: &Parameters,
    currents: &[f64],
    input: &[Complex64],
) -> Result<AmplitudeState> {
    params.check(spec)?;
    if input.len() != spec.mode_count {
        return Err(Error::dim("input state", spec.mode_count, input.len()));
    }
    let phases = params.phases(currents)?;
    let mut psi = input.to_vec();
    apply_layers(&spec.layers, params, &phases, &mut psi);
    Ok(psi)
}

/// Masks the output, weights it by `eta` and renormalizes.
pub fn distribution_from_amplitudes(spec: &CircuitSpec, eta: &[f64], psi: &[Complex64]) -> Result<Vec<f64>> {
    let ports = spec.masked_ports();
    if eta.len() != ports.len() {
        return Err(Error::dim("eta", ports.len(), eta.len()));
    }
    let weights: Vec<f64> = ports.iter().zip(eta).map(|(&m, &e)| e * psi[m].norm_sqr()).collect();
    normalize(weights)
}

pub(crate) fn normalize(mut weights: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateDistribution(total));
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

pub fn output_distribution(
    spec: &CircuitSpec,
    params: &Parameters,
    currents: &[f64],
    input: &[Complex64],
) -> Result<Vec<f64>> {
    let psi = evolve(spec, params, currents, input)?;
    distribution_from_amplitudes(spec, &params.eta, &psi)
}

/// Dense `mode_count × mode_count` transfer matrix of the whole mesh.
pub fn transfer_matrix(spec: &CircuitSpec, params: &Parameters, currents: &[f64]) -> Result<DMatrix<Complex64>> {
    params.check(spec)?;
    let phases = params.phases(currents)?;
    Ok(layers_transfer_matrix(spec.mode_count, &spec.layers, params, &phases))
}

pub(crate) fn layers_transfer_matrix(
    mode_count: usize,
    layers: &[Layer],
    params: &Parameters,
    phases: &[f64],
) -> DMatrix<Complex64> {
    let mut m = DMatrix::<Complex64>::zeros(mode_count, mode_count);
    let mut col = vec![Complex64::new(0.0, 0.0); mode_count];
    for j in 0..mode_count {
        col.fill(Complex64::new(0.0, 0.0));
        col[j] = Complex64::new(1.0, 0.0);
        apply_layers(layers, params, phases, &mut col);
        for (i, v) in col.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}
