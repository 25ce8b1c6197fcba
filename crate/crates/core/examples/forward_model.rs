//! Runs the forward model on a sampled chip and checks its structural
//! properties: lossless unitarity, coupling-efficiency scaling and offset
//! periodicity.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use num_complex::Complex64;
use pic_calibrate::data::{random_currents, rng_for, sample_target_params, streams, TargetConfig, DEFAULT_CURRENT_RANGE};
use pic_calibrate::forward::{localized_input, output_distribution, transfer_matrix};
use pic_calibrate::{build_qw_mesh, Parameters};

fn max_dev(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn main() -> pic_calibrate::Result<()> {
    let spec = build_qw_mesh(12)?;
    let chip = sample_target_params(&spec, &mut rng_for(1, streams::TARGETS), &TargetConfig::default());
    let input = localized_input(&spec);
    let currents = &random_currents(&spec, 1, DEFAULT_CURRENT_RANGE, 1)[0];

    let p = output_distribution(&spec, &chip, currents, &input)?;
    println!("active-port distribution (sum {:.15}):", p.iter().sum::<f64>());
    for (port, v) in spec.masked_ports().iter().zip(&p) {
        println!("  port {port:>2}  {v:.6}");
    }

    let mut lossless = chip.clone();
    lossless.alpha.fill(1.0);
    let u = transfer_matrix(&spec, &lossless, currents)?;
    let dev = (u.adjoint() * &u - DMatrix::<Complex64>::identity(spec.mode_count, spec.mode_count)).camax();
    println!("lossless transfer: max |U†U − I| = {dev:.2e}");

    let mut scaled = chip.clone();
    scaled.eta.iter_mut().for_each(|e| *e *= 1.7);
    scaled.alpha.iter_mut().for_each(|a| *a *= 0.8);
    let q = output_distribution(&spec, &scaled, currents, &input)?;
    println!("global η and α rescaling: max change {:.2e}", max_dev(&p, &q));

    let mut shifted: Parameters = chip.clone();
    shifted.b.iter_mut().for_each(|b| *b += TAU);
    let q = output_distribution(&spec, &shifted, currents, &input)?;
    println!("b + 2π: max change {:.2e}", max_dev(&p, &q));
    Ok(())
}
