//! Adam with per-epoch learning-rate decay and the alternating freeze
//! schedule used for calibration.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::forward::{localized_input, ParamGroup, Parameters};
use crate::gauge::canonicalize;
use crate::grad::{group_mask, loss_and_grad_with, loss_with, GradVector, LossConfig};
use crate::mesh::CircuitSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Multiplies the learning rate once per epoch.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            decay: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub lr: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Result<Self> {
        if !(config.lr > 0.0 && config.decay > 0.0 && config.eps > 0.0) {
            return Err(Error::InvalidArgument("learning rate, decay and eps must be positive".into()));
        }
        if !((0.0..1.0).contains(&config.beta1) && (0.0..1.0).contains(&config.beta2)) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        Ok(Self {
            config,
            step: 0,
            lr: config.lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
        })
    }

    /// Bias-corrected Adam update of the unmasked coordinates of `x`.
    pub fn step(&mut self, x: &mut [f64], grad: &GradVector) -> Result<()> {
        if x.len() != self.m.len() {
            return Err(Error::dim("parameter vector", self.m.len(), x.len()));
        }
        if grad.values.len() != x.len() || grad.mask.len() != x.len() {
            return Err(Error::dim("gradient", x.len(), grad.values.len()));
        }
        if let Some(k) = grad.values.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient coordinate {k}")));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for k in 0..x.len() {
            if !grad.mask[k] {
                continue;
            }
            let g = grad.values[k];
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g;
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            x[k] -= self.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.config.decay;
    }
}

/// Applies one Adam step to `params` in flattened order.
pub fn adam_step(state: &mut AdamState, params: &mut Parameters, grad: &GradVector) -> Result<()> {
    let mut flat = params.to_flat();
    state.step(&mut flat, grad)?;
    params.set_flat(&flat);
    Ok(())
}

/// True iff each of the last `streak` adjacent decreases lies in `[0, threshold)`.
pub fn cutoff_met(history: &[f64], threshold: f64, streak: usize) -> bool {
    if streak == 0 || history.len() < streak + 1 {
        return false;
    }
    history[history.len() - streak - 1..]
        .windows(2)
        .all(|w| {
            let d = w[0] - w[1];
            (0.0..threshold).contains(&d)
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub groups: Vec<ParamGroup>,
}

impl Phase {
    pub fn new(name: impl Into<String>, groups: &[ParamGroup]) -> Self {
        Self {
            name: name.into(),
            groups: groups.to_vec(),
        }
    }
}

/// Alternating legs on `a` and `b`, then `θ, α`, then everything; `η`
/// trains throughout.
pub fn default_phases(rounds: usize) -> Vec<Phase> {
    use ParamGroup::*;
    let mut phases = Vec::with_capacity(2 * rounds + 2);
    for r in 1..=rounds {
        phases.push(Phase::new(format!("round{r}-a"), &[A, Eta]));
        phases.push(Phase::new(format!("round{r}-b"), &[B, Eta]));
    }
    phases.push(Phase::new("theta-alpha", &[Theta, Alpha, Eta]));
    phases.push(Phase::new("joint", &ParamGroup::ALL));
    phases
}

/// When the learning rate returns to its initial value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrReset {
    /// One decaying schedule and one set of moments across all phases.
    Never,
    /// Fresh learning rate and moments at the start of every phase.
    PerPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub alternation_rounds: usize,
    pub cutoff_threshold: f64,
    pub cutoff_streak: usize,
    pub max_epochs: usize,
    /// Overrides the phases derived from `alternation_rounds`.
    pub phases: Option<Vec<Phase>>,
    pub lr_reset: LrReset,
    /// Warm-start `b`, `θ` and `η` on port subsets before the main phases.
    pub port_curriculum: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            alternation_rounds: 8,
            cutoff_threshold: 1e-5,
            cutoff_streak: 5,
            max_epochs: 2000,
            phases: None,
            lr_reset: LrReset::PerPhase,
            port_curriculum: true,
        }
    }
}

impl ScheduleConfig {
    pub fn phases(&self) -> Vec<Phase> {
        self.phases.clone().unwrap_or_else(|| default_phases(self.alternation_rounds))
    }

    pub fn check(&self) -> Result<()> {
        if !(self.cutoff_threshold > 0.0) || self.cutoff_streak == 0 {
            return Err(Error::InvalidArgument("cutoff threshold and streak must be positive".into()));
        }
        if self.phases().is_empty() {
            return Err(Error::InvalidArgument("schedule has no phases".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub loss: LossConfig,
    /// Lower bound kept on `α` and `η` after each step.
    pub positivity_floor: f64,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            positivity_floor: 1e-6,
            schedule: ScheduleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub name: String,
    pub groups: Vec<ParamGroup>,
    /// Index of the phase's first entry in the loss history.
    pub start: usize,
    pub epochs: usize,
    pub hit_max_epochs: bool,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub raw: Parameters,
    /// Gauge-fixed copy of `raw`.
    pub params: Parameters,
    pub loss_history: Vec<f64>,
    pub phases: Vec<PhaseRecord>,
    pub final_loss: f64,
    pub frozen_shifters: Vec<usize>,
}

impl CalibrationResult {
    /// Epoch indices where a new phase begins, excluding the first.
    pub fn boundaries(&self) -> Vec<usize> {
        self.phases.iter().skip(1).map(|p| p.start).collect()
    }
}

/// Per-epoch progress passed to an observer.
#[derive(Debug, Clone, Copy)]
pub struct EpochEvent<'a> {
    pub phase: &'a str,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn run_schedule(
    spec: &CircuitSpec,
    train: &[Sample],
    config: &TrainConfig,
    init: &Parameters,
) -> Result<CalibrationResult> {
    run_schedule_with(spec, train, config, init, |_| {})
}

pub fn run_schedule_with(
    spec: &CircuitSpec,
    train: &[Sample],
    config: &TrainConfig,
    init: &Parameters,
    mut observer: impl FnMut(&EpochEvent),
) -> Result<CalibrationResult> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    init.check(spec)?;
    config.schedule.check()?;
    let mut params = init.clone();
    let mut log = Log::default();
    if config.schedule.port_curriculum {
        port_curriculum(spec, train, config, &mut params, &mut log, &mut observer)?;
    }
    let frozen = run_phases(spec, train, config, &config.schedule.phases(), config.schedule.lr_reset, &mut params, &mut log, &mut observer)?;

    let final_loss = loss_with(spec, &params, train, &localized_input(spec), config.loss)?;
    let canonical = canonicalize(spec, &params).params;
    Ok(CalibrationResult {
        raw: params,
        params: canonical,
        loss_history: log.history,
        phases: log.records,
        final_loss,
        frozen_shifters: frozen,
    })
}

#[derive(Default)]
struct Log {
    history: Vec<f64>,
    records: Vec<PhaseRecord>,
}

/// Runs `phases` in order on `params`, returning the frozen shifters.
#[allow(clippy::too_many_arguments)]
fn run_phases(
    spec: &CircuitSpec,
    train: &[Sample],
    config: &TrainConfig,
    phases: &[Phase],
    lr_reset: LrReset,
    params: &mut Parameters,
    log: &mut Log,
    observer: &mut impl FnMut(&EpochEvent),
) -> Result<Vec<usize>> {
    let sched = &config.schedule;
    let input = localized_input(spec);
    let frozen = spec.insensitive_phase_shifters();
    let mut adam = AdamState::new(config.adam, params.len())?;
    for (k, phase) in phases.iter().enumerate() {
        if k > 0 && lr_reset == LrReset::PerPhase {
            adam = AdamState::new(config.adam, params.len())?;
        }
        let mask = group_mask(params, &phase.groups, &frozen);
        let start = log.history.len();
        let mut hit_max = true;
        for epoch in 0..sched.max_epochs {
            let (loss, grad) = loss_and_grad_with(spec, params, train, &input, &mask, config.loss)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss in phase {} at epoch {epoch}", phase.name)));
            }
            log.history.push(loss);
            observer(&EpochEvent {
                phase: &phase.name,
                epoch,
                loss,
                lr: adam.lr,
            });
            if cutoff_met(&log.history[start..], sched.cutoff_threshold, sched.cutoff_streak) {
                hit_max = false;
                break;
            }
            adam_step(&mut adam, params, &grad)
                .map_err(|e| Error::NonFinite(format!("phase {} epoch {epoch}: {e}", phase.name)))?;
            adam.end_epoch();
            clamp_positive(params, config.positivity_floor);
        }
        log.records.push(PhaseRecord {
            name: phase.name.clone(),
            groups: phase.groups.clone(),
            start,
            epochs: log.history.len() - start,
            hit_max_epochs: hit_max && sched.max_epochs > 0,
            final_loss: log.history[start..].last().copied(),
        });
    }
    Ok(frozen)
}

/// Restricts the problem to the active ports in `keep`, renormalizing the
/// data. Returns the sub-spec, the kept positions within the active-port
/// list and the restricted samples.
pub fn restrict_ports(spec: &CircuitSpec, keep: &[usize], samples: &[Sample]) -> (CircuitSpec, Vec<usize>, Vec<Sample>) {
    let positions: Vec<usize> = spec
        .masked_ports()
        .iter()
        .enumerate()
        .filter(|(_, m)| keep.contains(m))
        .map(|(i, _)| i)
        .collect();
    let mut sub = spec.clone();
    sub.port_mask = (0..spec.mode_count).map(|m| spec.port_mask[m] && keep.contains(&m)).collect();
    let data = samples
        .iter()
        .map(|s| {
            let p: Vec<f64> = positions.iter().map(|&i| s.probabilities[i]).collect();
            let total: f64 = p.iter().sum();
            Sample {
                currents: s.currents.clone(),
                probabilities: if total > 0.0 { p.iter().map(|x| x / total).collect() } else { p },
            }
        })
        .collect();
    (sub, positions, data)
}

/// Active ports within `2·stage` modes of either edge of the active range.
pub fn curriculum_ports(spec: &CircuitSpec, stage: usize) -> Vec<usize> {
    let ports = spec.masked_ports();
    let (Some(&lo), Some(&hi)) = (ports.first(), ports.last()) else {
        return ports;
    };
    ports
        .into_iter()
        .filter(|&m| m < lo + 2 * stage || m + 2 * stage > hi)
        .collect()
}

/// Warm start for `b`, `θ` and `η` fitted on port subsets growing inward
/// from both edges. An edge port pair only sees the units a few diagonals
/// in, so each stage adds a handful of unknowns to an already fitted set.
fn port_curriculum(
    spec: &CircuitSpec,
    train: &[Sample],
    config: &TrainConfig,
    params: &mut Parameters,
    log: &mut Log,
    observer: &mut impl FnMut(&EpochEvent),
) -> Result<()> {
    use ParamGroup::*;
    let stages = spec.masked_ports().len() / 4;
    if stages < 2 {
        return Ok(());
    }
    for stage in 1..=stages {
        let keep = curriculum_ports(spec, stage);
        let (sub, positions, data) = restrict_ports(spec, &keep, train);
        let mut p = params.clone();
        p.eta = positions.iter().map(|&i| params.eta[i]).collect();
        let phases = [
            Phase::new(format!("ports{}-b", keep.len()), &[B, Eta]),
            Phase::new(format!("ports{}-theta-b", keep.len()), &[B, Theta, Eta]),
        ];
        run_phases(&sub, &data, config, &phases, LrReset::PerPhase, &mut p, log, observer)?;
        params.b = p.b;
        params.theta = p.theta;
        for (j, &i) in positions.iter().enumerate() {
            params.eta[i] = p.eta[j];
        }
    }
    Ok(())
}

fn clamp_positive(p: &mut Parameters, floor: f64) {
    for v in p.alpha.iter_mut().chain(p.eta.iter_mut()) {
        if *v < floor {
            *v = floor;
        }
    }
}
