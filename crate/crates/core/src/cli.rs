//! `piccal` command-line front end.
//!
//! Every run writes `<command>.config.json` into the output directory with
//! the exact argument list and the resolved settings; rerunning those
//! arguments reproduces every other output file bit for bit, whatever the
//! thread count.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{
    generate_synthetic_dataset, load_dataset, rng_for, sample_target_params, save_dataset, split_dataset, streams,
    Dataset, TargetConfig,
};
use crate::error::{Error, ErrorClass, Result};
use crate::forward::{localized_input, Parameters};
use crate::gauge::{canonicalize, edge_splitters, wrap_phase, PhaseGauge};
use crate::mesh::{build_qw_mesh, CircuitSpec};
use crate::metrics::{evaluate, fraction_below, infidelity, purity_error, EvalSource, MetricReport, DEFAULT_BINS};
use crate::optim::{run_schedule_with, CalibrationResult, LrReset, TrainConfig};
use crate::qw::{self, Coin, CoinSpec, CoinState, WalkState};
use crate::tomo::{self, MleConfig, DEFAULT_DYNAMICS_DEPTH, DEFAULT_SETTING_COUNT};

const CALIBRATION_TAG: &str = "pic-calibrate/calibration";
const FORMAT_VERSION: u32 = 1;

/// Seed offset for the held-out set written by `generate --test-n`.
const TEST_SEED_SALT: u64 = 0x7e57;

#[derive(Debug, Parser, Serialize)]
#[command(name = "piccal", version, about = "Calibrate programmable photonic meshes from output distributions")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct GlobalArgs {
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Sample a synthetic chip and write a noisy dataset.
    Generate(GenerateArgs),
    /// Fit chip parameters to a training set.
    Calibrate(CalibrateArgs),
    /// Score a calibration on held-out data.
    Validate(ValidateArgs),
    /// Prepare the Hadamard walk on a calibrated chip.
    Qw(QwArgs),
    /// Reconstruct output states with the trailing layers as the detector.
    Tomo(TomoArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct MeshArgs {
    /// Walk steps of the light-cone mesh.
    #[arg(long, default_value_t = 12)]
    pub steps: usize,
    /// Circuit file overriding `--steps`.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Comma-separated output modes to exclude instead of the default edges.
    #[arg(long, value_delimiter = ',')]
    pub exclude_ports: Option<Vec<usize>>,
}

impl MeshArgs {
    fn build(&self) -> Result<CircuitSpec> {
        let mut spec = match &self.spec {
            Some(path) => CircuitSpec::from_text(&fs::read_to_string(path)?)?,
            None => build_qw_mesh(self.steps)?,
        };
        if let Some(excluded) = &self.exclude_ports {
            if let Some(&m) = excluded.iter().find(|&&m| m >= spec.mode_count) {
                return Err(Error::InvalidArgument(format!("excluded port {m} out of range")));
            }
            spec.port_mask = (0..spec.mode_count).map(|m| !excluded.contains(&m)).collect();
            spec.validate()?;
        }
        Ok(spec)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Additional held-out samples written to `test.jsonl`.
    #[arg(long, default_value_t = 0)]
    pub test_n: usize,
    /// Standard deviation of the additive noise on each probability.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 7.0)]
    pub current_max: f64,
    /// Use these parameters instead of sampling a chip.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ResetArg {
    Never,
    PerPhase,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[arg(long)]
    pub train: PathBuf,
    /// Generating parameters; adds a recovery table.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Full training configuration (JSON); the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub lr_reset: Option<ResetArg>,
    #[arg(long)]
    pub no_curriculum: bool,
    /// Hold out this fraction of the training file as `test.jsonl`.
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Compare states against these parameters on the test currents.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Reported fraction of samples with L1 below this value.
    #[arg(long, default_value_t = 0.05)]
    pub threshold: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct QwArgs {
    /// Calibrated chip; the ideal chip of `--steps` when absent.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    pub steps: usize,
    #[arg(long, default_value_t = 7.0)]
    pub current_max: f64,
    /// Run this coin sequence (JSON) on the line instead.
    #[arg(long)]
    pub coins: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TomoArgs {
    /// Chip model for effects and simulated data; sampled from the seed
    /// when absent.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_DYNAMICS_DEPTH)]
    pub depth: usize,
    #[arg(long, default_value_t = DEFAULT_SETTING_COUNT)]
    pub settings_count: usize,
    /// Measurement-section currents (JSON array of arrays).
    #[arg(long)]
    pub settings: Option<PathBuf>,
    /// Measured distributions (JSON array per setting); simulated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Random dynamics patterns to simulate.
    #[arg(long, default_value_t = 1)]
    pub dynamics: usize,
    #[arg(long, default_value_t = 7.0)]
    pub current_max: f64,
    /// Fail when the design cannot span all operator directions.
    #[arg(long)]
    pub strict: bool,
}

/// Calibration artifact shared by `calibrate`, `validate`, `qw` and `tomo`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub format: String,
    pub version: u32,
    pub spec: CircuitSpec,
    pub train: TrainConfig,
    pub result: CalibrationResult,
}

impl CalibrationFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: CalibrationFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.format != CALIBRATION_TAG || file.version != FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "{} is not a calibration file",
                path.display()
            )));
        }
        file.spec.validate()?;
        file.result.params.check(&file.spec)?;
        Ok(file)
    }
}

/// Parses `args` (program name first), runs the command and maps errors to
/// exit codes: 2 configuration, 3 I/O, 4 numerical.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Io => 3,
        ErrorClass::Numerical => 4,
    }
}

pub fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    fs::create_dir_all(&cli.global.out_dir)?;
    pool.install(|| match &cli.command {
        Command::Generate(a) => cmd_generate(cli, a, argv),
        Command::Calibrate(a) => cmd_calibrate(cli, a, argv),
        Command::Validate(a) => cmd_validate(cli, a, argv),
        Command::Qw(a) => cmd_qw(cli, a, argv),
        Command::Tomo(a) => cmd_tomo(cli, a, argv),
    })
}

fn out(cli: &Cli, name: &str) -> PathBuf {
    cli.global.out_dir.join(name)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn echo(cli: &Cli, argv: &[String], name: &str, resolved: serde_json::Value) -> Result<()> {
    write_json(
        &out(cli, &format!("{name}.config.json")),
        &json!({
            "tool": "piccal",
            "version": env!("CARGO_PKG_VERSION"),
            "argv": argv,
            "args": cli,
            "resolved": resolved,
        }),
    )
}

fn progress(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.global.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs, argv: &[String]) -> Result<()> {
    let spec = a.mesh.build()?;
    let target = match &a.params {
        Some(path) => {
            let p: Parameters = read_json(path)?;
            p.check(&spec)?;
            p
        }
        None => sample_target_params(&spec, &mut rng_for(cli.global.seed, streams::TARGETS), &TargetConfig::default()),
    };
    let range = (0.0, a.current_max);
    let train = generate_synthetic_dataset(&spec, &target, a.n, a.noise, range, cli.global.seed)?;
    save_dataset(&train, out(cli, "dataset.jsonl"))?;
    if a.test_n > 0 {
        let test = generate_synthetic_dataset(&spec, &target, a.test_n, a.noise, range, cli.global.seed ^ TEST_SEED_SALT)?;
        save_dataset(&test, out(cli, "test.jsonl"))?;
    }
    write_json(&out(cli, "truth.json"), &target)?;
    fs::write(out(cli, "spec.json"), spec.to_text())?;
    echo(
        cli,
        argv,
        "generate",
        json!({ "spec_fingerprint": spec.fingerprint(), "target_config": TargetConfig::default() }),
    )?;
    progress(cli, format!("wrote {} training samples to {}", a.n, cli.global.out_dir.display()));
    Ok(())
}

fn train_config(a: &CalibrateArgs) -> Result<TrainConfig> {
    let mut config: TrainConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.max_epochs {
        config.schedule.max_epochs = n;
    }
    if let Some(r) = a.rounds {
        config.schedule.alternation_rounds = r;
    }
    if let Some(r) = a.lr_reset {
        config.schedule.lr_reset = match r {
            ResetArg::Never => LrReset::Never,
            ResetArg::PerPhase => LrReset::PerPhase,
        };
    }
    if a.no_curriculum {
        config.schedule.port_curriculum = false;
    }
    config.schedule.check()?;
    Ok(config)
}

fn cmd_calibrate(cli: &Cli, a: &CalibrateArgs, argv: &[String]) -> Result<()> {
    let spec = a.mesh.build()?;
    let config = train_config(a)?;
    let mut data = load_dataset(&a.train, Some(&spec))?;
    data.check(&spec)?;
    if let Some(ratio) = a.holdout {
        let (train, test) = split_dataset(&data, 1.0 - ratio, cli.global.seed)?;
        save_dataset(&test, out(cli, "test.jsonl"))?;
        data = train;
    }
    echo(cli, argv, "calibrate", json!({ "train": config, "samples": data.len() }))?;

    let result = run_schedule_with(&spec, &data.samples, &config, &Parameters::ideal(&spec), |e| {
        if e.epoch % 100 == 0 {
            progress(cli, format!("{:>14} epoch {:>4}  loss {:.6e}", e.phase, e.epoch, e.loss));
        }
    })?;
    progress(cli, format!("final loss {:.6e} after {} epochs", result.final_loss, result.loss_history.len()));
    write_loss_curve(&out(cli, "loss.tsv"), &result)?;
    if let Some(path) = &a.truth {
        let truth: Parameters = read_json(path)?;
        truth.check(&spec)?;
        let summary = write_recovery(&out(cli, "recovery.tsv"), &spec, &result.params, &truth)?;
        progress(cli, summary);
    }
    write_json(
        &out(cli, "calibration.json"),
        &CalibrationFile {
            format: CALIBRATION_TAG.into(),
            version: FORMAT_VERSION,
            spec,
            train: config,
            result,
        },
    )
}

fn write_loss_curve(path: &Path, result: &CalibrationResult) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "epoch\tphase\tloss")?;
    for phase in &result.phases {
        for (k, loss) in result.loss_history[phase.start..phase.start + phase.epochs].iter().enumerate() {
            writeln!(w, "{}\t{}\t{:e}", phase.start + k, phase.name, loss)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-component estimate against truth, both in the reporting gauge.
fn write_recovery(path: &Path, spec: &CircuitSpec, estimate: &Parameters, truth: &Parameters) -> Result<String> {
    let est = canonicalize(spec, estimate).params;
    let tar = canonicalize(spec, truth).params;
    let references = PhaseGauge::of(spec).reference;
    let hidden = spec.insensitive_phase_shifters();
    let edges = edge_splitters(spec);
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "group\tindex\testimate\ttarget\terror\tnote")?;
    let mut b_ok = (0, 0);
    let mut r_ok = (0, 0);
    for k in 0..spec.ps_count {
        writeln!(w, "a\t{k}\t{:.9e}\t{:.9e}\t{:.3e}\t", est.a[k], tar.a[k], est.a[k] - tar.a[k])?;
    }
    for k in 0..spec.ps_count {
        let err = wrap_phase(est.b[k] - tar.b[k]);
        let note = if references.contains(&k) {
            "gauge reference"
        } else if hidden.contains(&k) {
            "unobservable"
        } else {
            b_ok.1 += 1;
            b_ok.0 += usize::from(err.abs() < 0.02);
            ""
        };
        writeln!(w, "b\t{k}\t{:.9e}\t{:.9e}\t{err:.3e}\t{note}", est.b[k], tar.b[k])?;
    }
    for k in 0..spec.bs_count {
        let (re, rt) = (est.theta[k].sin().powi(2), tar.theta[k].sin().powi(2));
        let edge = edges.contains(&k);
        if !edge {
            r_ok.1 += 1;
            r_ok.0 += usize::from((re - rt).abs() < 0.01);
        }
        let note = if edge { "edge" } else { "" };
        writeln!(w, "reflectivity\t{k}\t{re:.9e}\t{rt:.9e}\t{:.3e}\t{note}", re - rt)?;
    }
    for k in 0..spec.bs_count {
        writeln!(w, "alpha\t{k}\t{:.9e}\t{:.9e}\t{:.3e}\t", est.alpha[k], tar.alpha[k], est.alpha[k] - tar.alpha[k])?;
    }
    for k in 0..est.eta.len() {
        writeln!(w, "eta\t{k}\t{:.9e}\t{:.9e}\t{:.3e}\t", est.eta[k], tar.eta[k], est.eta[k] - tar.eta[k])?;
    }
    w.flush()?;
    Ok(format!(
        "b within 0.02 rad: {}/{} observable gauge-fixed shifters; reflectivity within 0.01: {}/{} interior splitters",
        b_ok.0, b_ok.1, r_ok.0, r_ok.1
    ))
}

fn cmd_validate(cli: &Cli, a: &ValidateArgs, argv: &[String]) -> Result<()> {
    let cal = CalibrationFile::load(&a.calibration)?;
    let spec = &cal.spec;
    let test: Dataset = load_dataset(&a.test, Some(spec))?;
    test.check(spec)?;
    echo(cli, argv, "validate", json!({ "samples": test.len() }))?;
    let input = localized_input(spec);
    let measured = evaluate(spec, &cal.result.params, EvalSource::Dataset(&test.samples), &input, a.bins)?;
    let against_truth = match &a.truth {
        Some(path) => {
            let truth: Parameters = read_json(path)?;
            truth.check(spec)?;
            let currents: Vec<Vec<f64>> = test.samples.iter().map(|s| s.currents.clone()).collect();
            Some(evaluate(
                spec,
                &cal.result.params,
                EvalSource::Truth {
                    params: &truth,
                    currents: &currents,
                },
                &input,
                a.bins,
            )?)
        }
        None => None,
    };
    write_series(&out(cli, "l1.tsv"), "l1", &measured.l1.values)?;
    write_histogram(&out(cli, "histogram.tsv"), &measured)?;
    let s = &measured.l1.summary;
    let below = fraction_below(&measured.l1.values, a.threshold);
    progress(
        cli,
        format!(
            "L1 {:.4e} ± {:.4e} (median {:.4e}); {:.1}% below {}",
            s.mean,
            s.std,
            s.median,
            100.0 * below,
            a.threshold
        ),
    );
    write_json(
        &out(cli, "validation.json"),
        &json!({
            "measured": measured,
            "threshold": a.threshold,
            "fraction_below_threshold": below,
            "truth": against_truth,
        }),
    )
}

fn write_series(path: &Path, name: &str, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "sample\t{name}")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{i}\t{v:e}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_histogram(path: &Path, report: &MetricReport) -> Result<()> {
    let h = &report.l1.histogram;
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "lo\thi\tcount")?;
    for (k, c) in h.counts.iter().enumerate() {
        writeln!(w, "{:e}\t{:e}\t{c}", h.edges[k], h.edges[k + 1])?;
    }
    w.flush()?;
    Ok(())
}

/// Coin sequence file: `coins[t][x − min_x]`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CoinFile {
    pub min_x: i64,
    pub start_x: i64,
    pub start_up: bool,
    pub coins: Vec<Vec<Coin>>,
}

fn cmd_qw(cli: &Cli, a: &QwArgs, argv: &[String]) -> Result<()> {
    if let Some(path) = &a.coins {
        let file: CoinFile = read_json(path)?;
        let coins = CoinSpec::new(file.min_x, file.coins)?;
        let start = if file.start_up { CoinState::Up } else { CoinState::Down };
        echo(cli, argv, "qw", json!({ "mode": "coins", "steps": coins.steps() }))?;
        let state = qw::walk_state(&coins, &WalkState::localized(file.start_x, start))?;
        let mut w = BufWriter::new(fs::File::create(out(cli, "walk.tsv"))?);
        writeln!(w, "x\tdown\tup")?;
        for x in state.positions() {
            let (d, u) = (state.amplitude(x, CoinState::Down), state.amplitude(x, CoinState::Up));
            writeln!(w, "{x}\t{:.12e}\t{:.12e}", d.norm_sqr(), u.norm_sqr())?;
        }
        w.flush()?;
        return Ok(());
    }
    let (spec, params) = match &a.calibration {
        Some(path) => {
            let cal = CalibrationFile::load(path)?;
            (cal.spec, cal.result.params)
        }
        None => {
            let spec = build_qw_mesh(a.steps)?;
            let params = Parameters::ideal(&spec);
            (spec, params)
        }
    };
    echo(cli, argv, "qw", json!({ "mode": "hadamard", "steps": spec.steps }))?;
    let report = qw::hadamard_report(&spec, &params, a.current_max)?;
    let mut w = BufWriter::new(fs::File::create(out(cli, "qw.tsv"))?);
    qw::write_distribution_table(&mut w, &report)?;
    w.flush()?;
    let reference = qw::hadamard_reference_distribution(spec.steps)?;
    write_json(&out(cli, "qw.json"), &json!({ "report": report, "reference_all_ports": reference }))?;
    progress(cli, format!("Hadamard walk: L1 distance to the ideal walk {:.4e}", report.l1));
    Ok(())
}

fn cmd_tomo(cli: &Cli, a: &TomoArgs, argv: &[String]) -> Result<()> {
    let seed = cli.global.seed;
    let (spec, params) = match &a.calibration {
        Some(path) => {
            let cal = CalibrationFile::load(path)?;
            (cal.spec, cal.result.params)
        }
        None => {
            let spec = build_qw_mesh(a.steps)?;
            let p = sample_target_params(&spec, &mut rng_for(seed, streams::TARGETS), &TargetConfig::default());
            (spec, p)
        }
    };
    let (dynamics, measurement) = tomo::split_mesh(&spec, a.depth)?;
    let range = (0.0, a.current_max);
    let setting_currents: Vec<Vec<f64>> = match &a.settings {
        Some(path) => read_json(path)?,
        None => tomo::random_settings(&measurement, a.settings_count, range, seed, streams::TOMO_SETTINGS),
    };
    let config = MleConfig::default();
    echo(
        cli,
        argv,
        "tomo",
        json!({ "mle": config, "settings": setting_currents, "state_modes": tomo::state_modes(&spec, a.depth) }),
    )?;
    let effects = tomo::build_effects(&spec, &measurement, &params, &setting_currents)?;
    let d = effects[0].effects.ncols();
    let rank = tomo::design_rank(&effects);
    if rank < d * d {
        if a.strict {
            return Err(Error::DeficientDesign { rank, needed: d * d });
        }
        eprintln!("warning: measurement design spans {rank} of {} operator directions", d * d);
    }

    let mut runs = Vec::new();
    if let Some(path) = &a.data {
        let data: Vec<Vec<f64>> = read_json(path)?;
        let r = tomo::mle_reconstruct(&effects, &data, &config)?;
        runs.push(tomo_record(&r, None)?);
    } else {
        let mut rng = rng_for(seed, streams::TOMO_DYNAMICS);
        let n = dynamics.ps_indices().len();
        let mut infs = Vec::new();
        for k in 0..a.dynamics {
            let currents: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, range.0..=range.1)).collect();
            let sim = tomo::simulate_tomography(&spec, &params, a.depth, &currents, &setting_currents)?;
            let r = tomo::mle_reconstruct(&sim.settings, &sim.data, &config)?;
            let rec = tomo_record(&r, Some(&sim.truth))?;
            infs.push(rec["infidelity"].as_f64().unwrap_or(f64::NAN));
            progress(cli, format!("dynamics {k}: infidelity {:.3e}", infs[k]));
            runs.push(json!({ "dynamics_currents": currents, "result": rec }));
        }
        progress(cli, format!("mean infidelity {:.3e}", infs.iter().sum::<f64>() / infs.len().max(1) as f64));
    }
    write_json(&out(cli, "tomo.json"), &json!({ "design_rank": rank, "dimension": d, "runs": runs }))
}

fn tomo_record(r: &tomo::MleResult, truth: Option<&crate::metrics::DensityMatrix>) -> Result<serde_json::Value> {
    let m = r.rho.matrix();
    let re: Vec<Vec<f64>> = m.row_iter().map(|row| row.iter().map(|z| z.re).collect()).collect();
    let im: Vec<Vec<f64>> = m.row_iter().map(|row| row.iter().map(|z| z.im).collect()).collect();
    let (inf, pur) = match truth {
        Some(t) => (Some(infidelity(t, &r.rho)?), Some(purity_error(t, &r.rho)?)),
        None => (None, None),
    };
    Ok(json!({
        "infidelity": inf,
        "purity_error": pur,
        "purity": r.rho.purity(),
        "log_likelihood": r.log_likelihood,
        "chosen_stage": r.stages[r.chosen].name,
        "stages": r.stages,
        "rho_re": re,
        "rho_im": im,
    }))
}
