//! Calibrates a simulated 12-step chip from noisy synthetic data and scores
//! the recovered model on held-out current patterns.
//!
//! Usage: `synthetic_calibration [N_TRAIN] [SIGMA] [SEED] [never|per-phase] [STEPS]`

use std::time::Instant;

use pic_calibrate::data::{generate_synthetic_dataset, random_currents, rng_for, sample_target_params, streams, TargetConfig, DEFAULT_CURRENT_RANGE};
use pic_calibrate::forward::localized_input;
use pic_calibrate::gauge::{canonicalize, edge_splitters, wrap_phase, PhaseGauge};
use pic_calibrate::metrics::{evaluate, fraction_below, EvalSource, DEFAULT_BINS};
use pic_calibrate::optim::{run_schedule_with, LrReset, TrainConfig};
use pic_calibrate::{build_qw_mesh, Parameters};

fn main() -> pic_calibrate::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_train: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(500);
    let sigma: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let reset = match args.get(3).map(String::as_str) {
        Some("never") => LrReset::Never,
        _ => LrReset::PerPhase,
    };

    let steps: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(12);
    let spec = build_qw_mesh(steps)?;
    let truth = sample_target_params(&spec, &mut rng_for(seed, streams::TARGETS), &TargetConfig::default());
    let train = generate_synthetic_dataset(&spec, &truth, n_train, sigma, DEFAULT_CURRENT_RANGE, seed)?;
    let test_currents = random_currents(&spec, 1000, DEFAULT_CURRENT_RANGE, seed ^ 0x7e57);

    let mut config = TrainConfig::default();
    config.schedule.lr_reset = reset;
    let started = Instant::now();
    let result = run_schedule_with(&spec, &train.samples, &config, &Parameters::ideal(&spec), |e| {
        if e.epoch % 100 == 0 {
            println!("{:>12} epoch {:>4}  loss {:.6e}  lr {:.2e}", e.phase, e.epoch, e.loss, e.lr);
        }
    })?;
    println!("trained in {:.1?}, {} epochs", started.elapsed(), result.loss_history.len());
    for p in &result.phases {
        println!(
            "  {:<12} epochs {:>4}{}  loss {:.6e}",
            p.name,
            p.epochs,
            if p.hit_max_epochs { " (max)" } else { "" },
            p.final_loss.unwrap_or(f64::NAN)
        );
    }

    let input = localized_input(&spec);
    let report = evaluate(
        &spec,
        &result.params,
        EvalSource::Truth { params: &truth, currents: &test_currents },
        &input,
        DEFAULT_BINS,
    )?;
    let inf = report.infidelity.as_ref().expect("truth source");
    let pur = report.purity_error.as_ref().expect("truth source");
    println!("test L1          mean {:.3e}  median {:.3e}  <1.5e-2: {:.1}%", report.l1.summary.mean, report.l1.summary.median, 100.0 * fraction_below(&report.l1.values, 1.5e-2));
    println!("test infidelity  mean {:.3e}  median {:.3e}  <1e-3:   {:.1}%", inf.summary.mean, inf.summary.median, 100.0 * fraction_below(&inf.values, 1e-3));
    println!("purity error     max  {:.3e}  <2e-15: {:.1}%", pur.summary.max, 100.0 * fraction_below(&pur.values, 2e-15));

    let target = canonicalize(&spec, &truth).params;
    let gauge = PhaseGauge::of(&spec);
    let b_err: Vec<f64> = (0..spec.ps_count)
        .filter(|k| !gauge.reference.contains(k))
        .map(|k| wrap_phase(result.params.b[k] - target.b[k]).abs())
        .collect();
    let edges = edge_splitters(&spec);
    let refl_err: Vec<f64> = (0..spec.bs_count)
        .filter(|k| !edges.contains(k))
        .map(|k| (result.params.theta[k].sin().powi(2) - target.theta[k].sin().powi(2)).abs())
        .collect();
    println!("b within 0.02 rad:        {:.1}% of {} gauge-fixed shifters", 100.0 * fraction_below(&b_err, 0.02), b_err.len());
    println!("reflectivity within 0.01: {:.1}% of {} interior splitters", 100.0 * fraction_below(&refl_err, 0.01), refl_err.len());
    Ok(())
}
