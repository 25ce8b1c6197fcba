//! Checks the mesh against the independent walk model, then prepares the
//! Hadamard walk on the ideal chip and on a sampled imperfect chip.

use pic_calibrate::data::{rng_for, sample_target_params, streams, TargetConfig};
use pic_calibrate::qw::{hadamard_reference_distribution, hadamard_report, mesh_equivalence_check};
use pic_calibrate::{build_qw_mesh, Parameters};
use rand::Rng;
use std::f64::consts::PI;

fn main() -> pic_calibrate::Result<()> {
    let mut rng = rng_for(5, 0);
    for steps in 1..=6 {
        let spec = build_qw_mesh(steps)?;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let mut p = Parameters::ideal(&spec);
            p.theta.iter_mut().for_each(|t| *t = rng.random_range(0.1..1.4));
            let phases: Vec<f64> = (0..spec.ps_count).map(|_| rng.random_range(-PI..PI)).collect();
            worst = worst.max(mesh_equivalence_check(steps, &p, &phases)?);
        }
        println!("T={steps}: max mesh/walk deviation {worst:.2e}");
    }

    let reference = hadamard_reference_distribution(12)?;
    println!("12-step Hadamard walk over all 24 ports:");
    for (m, p) in reference.iter().enumerate() {
        println!("  mode {m:>2}  {p:.6}  {}", "#".repeat((p * 200.0).round() as usize));
    }

    let spec = build_qw_mesh(12)?;
    let ideal = hadamard_report(&spec, &Parameters::ideal(&spec), 7.0)?;
    println!("ideal chip: L1 to reference {:.2e}", ideal.l1);
    let chip = sample_target_params(&spec, &mut rng_for(3, streams::TARGETS), &TargetConfig::default());
    let real = hadamard_report(&spec, &chip, 7.0)?;
    println!("imperfect splitters and losses, exact offsets: L1 {:.4}", real.l1);
    Ok(())
}
