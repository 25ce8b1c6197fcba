//! Discrete-time quantum walk on a line, independent of the mesh code, and
//! the Hadamard-walk preparation on a calibrated chip.
//!
//! One step applies a coin, a loss and a shift: `|x,↓⟩ → |x−1,↓⟩` and
//! `|x,↑⟩ → |x+1,↑⟩`. Coin matrices act on `(↓, ↑)` in that order.
//!
//! Mesh correspondence: a unit's upper input path is `↑` and its lower
//! input path `↓`. Unit `k` of layer `l` sits at `x = 2k − l`. A unit's
//! lower-arm shifter feeds the `↑` input of the next unit down the
//! diagonal, so it becomes that coin's `γ` (shifted by π to keep `β = 0`),
//! and the coin angle is `π/2 − θ`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::rng_for;
use crate::error::{Error, Result};
use crate::forward::{apply_layers, distribution_from_amplitudes, localized_input, output_distribution, Parameters};
use crate::gauge::PhaseGauge;
use crate::mesh::{build_qw_mesh, CircuitSpec};
use crate::metrics::l1_distance;

const GAUGE_SEARCH_STREAM: u64 = 0x9a06e;
const GAUGE_SEARCH_RESTARTS: usize = 64;
const GAUGE_SEARCH_SWEEPS: usize = 4;
const GAUGE_SEARCH_GRID: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoinState {
    Down,
    Up,
}

impl CoinState {
    fn index(self) -> usize {
        match self {
            CoinState::Down => 0,
            CoinState::Up => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coin {
    pub theta: f64,
    pub gamma: f64,
    pub beta: f64,
    /// Amplitude survival is `√alpha`.
    pub alpha: f64,
}

impl Coin {
    pub const BALANCED: Coin = Coin {
        theta: FRAC_PI_4,
        gamma: 0.0,
        beta: 0.0,
        alpha: 1.0,
    };

    /// Coin and loss combined, rows and columns ordered `(↓, ↑)`.
    pub fn matrix(&self) -> [[Complex64; 2]; 2] {
        let (s, c) = self.theta.sin_cos();
        let g = Complex64::from_polar(1.0, self.gamma);
        let b = Complex64::from_polar(1.0, self.beta);
        let amp = self.alpha.sqrt();
        [
            [Complex64::from(c * amp), g * s * amp],
            [-b * s * amp, g * b * c * amp],
        ]
    }
}

/// Coins indexed by time step and position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoinSpec {
    steps: usize,
    min_x: i64,
    coins: Vec<Vec<Coin>>,
}

impl CoinSpec {
    /// The same coin everywhere within `|x| ≤ steps`.
    pub fn uniform(steps: usize, coin: Coin) -> Self {
        let width = 2 * steps + 1;
        Self {
            steps,
            min_x: -(steps as i64),
            coins: vec![vec![coin; width]; steps],
        }
    }

    pub fn new(min_x: i64, coins: Vec<Vec<Coin>>) -> Result<Self> {
        if coins.is_empty() {
            return Err(Error::InvalidArgument("walk needs at least one step".into()));
        }
        let width = coins[0].len();
        for (t, row) in coins.iter().enumerate() {
            if row.len() != width {
                return Err(Error::dim("coin row", width, row.len()));
            }
            if let Some(c) = row.iter().find(|c| !(c.alpha >= 0.0)) {
                return Err(Error::InvalidArgument(format!("negative loss strength {} at step {t}", c.alpha)));
            }
        }
        Ok(Self {
            steps: coins.len(),
            min_x,
            coins,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn coin(&self, t: usize, x: i64) -> Option<&Coin> {
        let i = usize::try_from(x - self.min_x).ok()?;
        self.coins.get(t)?.get(i)
    }

    pub fn coin_mut(&mut self, t: usize, x: i64) -> Option<&mut Coin> {
        let i = usize::try_from(x - self.min_x).ok()?;
        self.coins.get_mut(t)?.get_mut(i)
    }
}

/// Amplitudes on a contiguous block of positions starting at `min_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkState {
    pub min_x: i64,
    /// `amps[2 (x − min_x) + c]`.
    pub amps: Vec<Complex64>,
}

impl WalkState {
    pub fn localized(x: i64, c: CoinState) -> Self {
        let mut amps = vec![Complex64::new(0.0, 0.0); 2];
        amps[c.index()] = Complex64::new(1.0, 0.0);
        Self { min_x: x, amps }
    }

    pub fn positions(&self) -> std::ops::Range<i64> {
        self.min_x..self.min_x + (self.amps.len() / 2) as i64
    }

    pub fn amplitude(&self, x: i64, c: CoinState) -> Complex64 {
        usize::try_from(x - self.min_x)
            .ok()
            .and_then(|i| self.amps.get(2 * i + c.index()).copied())
            .unwrap_or_default()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Probability per position, summed over the coin.
    pub fn position_distribution(&self) -> Vec<(i64, f64)> {
        self.positions()
            .zip(self.amps.chunks(2))
            .map(|(x, pair)| (x, pair[0].norm_sqr() + pair[1].norm_sqr()))
            .collect()
    }
}

/// Runs every step of `coins` on `initial`. Loss is not renormalized away.
pub fn walk_state(coins: &CoinSpec, initial: &WalkState) -> Result<WalkState> {
    if initial.amps.len() % 2 != 0 || initial.amps.is_empty() {
        return Err(Error::dim("walk state", 2, initial.amps.len()));
    }
    if (initial.norm_sqr() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "initial walk state has norm² {}",
            initial.norm_sqr()
        )));
    }
    let mut state = initial.clone();
    let zero = Complex64::new(0.0, 0.0);
    for t in 0..coins.steps {
        let sites = state.amps.len() / 2;
        let mut next = WalkState {
            min_x: state.min_x - 1,
            amps: vec![zero; 2 * (sites + 2)],
        };
        for (i, x) in state.positions().enumerate() {
            let (down, up) = (state.amps[2 * i], state.amps[2 * i + 1]);
            if down == zero && up == zero {
                continue;
            }
            let coin = coins
                .coin(t, x)
                .ok_or_else(|| Error::InvalidArgument(format!("no coin at step {t}, position {x}")))?;
            let m = coin.matrix();
            let new_down = m[0][0] * down + m[0][1] * up;
            let new_up = m[1][0] * down + m[1][1] * up;
            // Site x lands at offsets i (x − 1) and i + 2 (x + 1) in `next`.
            next.amps[2 * i] += new_down;
            next.amps[2 * (i + 2) + 1] += new_up;
        }
        state = next;
    }
    Ok(state)
}

/// Walk position of unit `k` in layer `l`.
pub fn unit_site(layer: usize, k: usize) -> i64 {
    2 * k as i64 - layer as i64
}

/// Walk basis state reached by output mode `mode` of a `steps`-step mesh.
pub fn port_site(steps: usize, mode: usize) -> (i64, CoinState) {
    let x = unit_site(steps - 1, mode / 2);
    if mode % 2 == 0 {
        (x - 1, CoinState::Down)
    } else {
        (x + 1, CoinState::Up)
    }
}

fn require_qw_layout(spec: &CircuitSpec) -> Result<()> {
    let reference = build_qw_mesh(spec.steps)?;
    if reference.layers != spec.layers || reference.input_mode != spec.input_mode {
        return Err(Error::InvalidMesh("walk mapping needs the light-cone walk layout".into()));
    }
    Ok(())
}

/// Coins realizing the mesh with the given per-shifter phases.
pub fn coins_from_mesh(spec: &CircuitSpec, params: &Parameters, phases: &[f64]) -> Result<CoinSpec> {
    require_qw_layout(spec)?;
    if params.theta.len() != spec.bs_count || params.alpha.len() != spec.bs_count {
        return Err(Error::dim("splitter parameters", spec.bs_count, params.theta.len().min(params.alpha.len())));
    }
    if phases.len() != spec.ps_count {
        return Err(Error::dim("phases", spec.ps_count, phases.len()));
    }
    let mut coins = CoinSpec::uniform(spec.steps, Coin::BALANCED);
    for (l, layer) in spec.layers.iter().enumerate() {
        for (k, unit) in layer.units.iter().enumerate() {
            let gamma = match (l, k) {
                (0, _) | (_, 0) => 0.0,
                _ => spec.layers[l - 1].units[k - 1].ps_index.map_or(0.0, |p| phases[p] + PI),
            };
            let coin = coins
                .coin_mut(l, unit_site(l, k))
                .expect("light cone lies inside the uniform coin block");
            *coin = Coin {
                theta: FRAC_PI_2 - params.theta[unit.bs_index],
                gamma,
                beta: 0.0,
                alpha: params.alpha[unit.bs_index],
            };
        }
    }
    Ok(coins)
}

/// Largest difference between the mesh and walk output distributions over
/// all `2T` ports, for the mesh driven directly by `phases`.
pub fn mesh_equivalence_check(steps: usize, params: &Parameters, phases: &[f64]) -> Result<f64> {
    let spec = build_qw_mesh(steps)?.with_all_ports();
    let coins = coins_from_mesh(&spec, params, phases)?;
    let mut psi = localized_input(&spec);
    apply_layers(&spec.layers, params, phases, &mut psi);
    let mesh = distribution_from_amplitudes(&spec, &vec![1.0; spec.mode_count], &psi)?;

    let walked = walk_state(&coins, &WalkState::localized(0, CoinState::Down))?;
    let weights: Vec<f64> = (0..spec.mode_count)
        .map(|m| {
            let (x, c) = port_site(steps, m);
            walked.amplitude(x, c).norm_sqr()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateDistribution(total));
    }
    Ok(mesh
        .iter()
        .zip(&weights)
        .map(|(p, w)| (p - w / total).abs())
        .fold(0.0, f64::max))
}

/// Target phases of the Hadamard preparation: the first shifter at π/2,
/// the rest at 0.
pub fn hadamard_phases(spec: &CircuitSpec) -> Vec<f64> {
    let mut phases = vec![0.0; spec.ps_count];
    if let Some(first) = phases.first_mut() {
        *first = FRAC_PI_2;
    }
    phases
}

/// Inverts `φ = a I² + b` with the phase offset wrapped into `[0, 2π)`.
pub fn currents_for_phases(a: &[f64], b: &[f64], targets: &[f64], max_current: f64) -> Result<Vec<f64>> {
    if a.len() != targets.len() || b.len() != targets.len() {
        return Err(Error::dim("phase coefficients", targets.len(), a.len().min(b.len())));
    }
    let mut bad = Vec::new();
    let currents = targets
        .iter()
        .zip(a.iter().zip(b))
        .enumerate()
        .map(|(k, (&target, (&a, &b)))| {
            let offset = (target - b).rem_euclid(TAU);
            let offset = if offset >= TAU { 0.0 } else { offset };
            let current = (offset / a).sqrt();
            if !(a > 0.0) || !(current <= max_current) {
                bad.push(k);
            }
            current
        })
        .collect();
    if bad.is_empty() {
        Ok(currents)
    } else {
        Err(Error::UnreachablePhase(bad))
    }
}

/// Currents for the Hadamard preparation. When the nominal targets fall
/// outside the heater range, gauge-equivalent targets (same output
/// distributions) are searched; shifters that cannot reach an active port
/// are left at zero current.
pub fn hadamard_walk_currents(spec: &CircuitSpec, calibrated: &Parameters, max_current: f64) -> Result<Vec<f64>> {
    calibrated.check(spec)?;
    let targets = hadamard_phases(spec);
    let direct = currents_for_phases(&calibrated.a, &calibrated.b, &targets, max_current);
    let Err(Error::UnreachablePhase(first_failure)) = direct else {
        return direct;
    };
    let free = spec.insensitive_phase_shifters();
    let gauge = PhaseGauge::of(spec);
    let reach: Vec<f64> = calibrated.a.iter().map(|&a| a * max_current * max_current).collect();
    let excess = |shift: &[f64]| -> f64 {
        (0..spec.ps_count)
            .filter(|k| !free.contains(k))
            .map(|k| {
                let moved: f64 = gauge.basis.iter().zip(shift).map(|(g, c)| g[k] * c).sum();
                let offset = (targets[k] + moved - calibrated.b[k]).rem_euclid(TAU);
                if calibrated.a[k] > 0.0 {
                    (offset - reach[k]).max(0.0)
                } else {
                    TAU
                }
            })
            .sum()
    };
    let mut rng = rng_for(0, GAUGE_SEARCH_STREAM);
    for _ in 0..GAUGE_SEARCH_RESTARTS {
        let mut shift: Vec<f64> = gauge.basis.iter().map(|_| rng.random_range(0.0..TAU)).collect();
        let mut best = excess(&shift);
        for _ in 0..GAUGE_SEARCH_SWEEPS {
            for g in 0..shift.len() {
                for step in 0..GAUGE_SEARCH_GRID {
                    let mut trial = shift.clone();
                    trial[g] = TAU * step as f64 / GAUGE_SEARCH_GRID as f64;
                    let e = excess(&trial);
                    if e < best {
                        (best, shift) = (e, trial);
                    }
                }
            }
            if best == 0.0 {
                break;
            }
        }
        if best == 0.0 {
            let moved: Vec<f64> = (0..spec.ps_count)
                .map(|k| targets[k] + gauge.basis.iter().zip(&shift).map(|(g, c)| g[k] * c).sum::<f64>())
                .collect();
            let mut currents = vec![0.0; spec.ps_count];
            for k in (0..spec.ps_count).filter(|k| !free.contains(k)) {
                currents[k] = ((moved[k] - calibrated.b[k]).rem_euclid(TAU) / calibrated.a[k]).sqrt();
            }
            return Ok(currents);
        }
    }
    Err(Error::UnreachablePhase(first_failure))
}

/// Ideal-chip output over all `2T` ports for the Hadamard preparation.
pub fn hadamard_reference_distribution(steps: usize) -> Result<Vec<f64>> {
    let spec = build_qw_mesh(steps)?.with_all_ports();
    let params = Parameters::ideal(&spec);
    let mut psi = localized_input(&spec);
    apply_layers(&spec.layers, &params, &hadamard_phases(&spec), &mut psi);
    distribution_from_amplitudes(&spec, &params.eta, &psi)
}

/// Calibrated prediction against the ideal walk on the active ports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HadamardReport {
    pub currents: Vec<f64>,
    pub ports: Vec<usize>,
    /// Ideal distribution restricted to `ports` and renormalized.
    pub theory: Vec<f64>,
    pub model: Vec<f64>,
    pub l1: f64,
}

pub fn hadamard_report(spec: &CircuitSpec, calibrated: &Parameters, max_current: f64) -> Result<HadamardReport> {
    require_qw_layout(spec)?;
    let currents = hadamard_walk_currents(spec, calibrated, max_current)?;
    let model = output_distribution(spec, calibrated, &currents, &localized_input(spec))?;
    let full = hadamard_reference_distribution(spec.steps)?;
    let ports = spec.masked_ports();
    let kept: Vec<f64> = ports.iter().map(|&m| full[m]).collect();
    let total: f64 = kept.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateDistribution(total));
    }
    let theory: Vec<f64> = kept.iter().map(|p| p / total).collect();
    let l1 = l1_distance(&theory, &model)?;
    Ok(HadamardReport {
        currents,
        ports,
        theory,
        model,
        l1,
    })
}

/// Tab-separated `port theory model` rows with a header line.
pub fn write_distribution_table(w: &mut impl Write, report: &HadamardReport) -> Result<()> {
    writeln!(w, "port\ttheory\tmodel")?;
    for ((port, t), m) in report.ports.iter().zip(&report.theory).zip(&report.model) {
        writeln!(w, "{port}\t{t:.12e}\t{m:.12e}")?;
    }
    Ok(())
}
