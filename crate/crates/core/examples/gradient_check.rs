//! Compares the adjoint gradient of the training loss with central finite
//! differences on small noisy problems.

use pic_calibrate::data::{generate_synthetic_dataset, rng_for, sample_target_params, streams, TargetConfig, DEFAULT_CURRENT_RANGE};
use pic_calibrate::forward::localized_input;
use pic_calibrate::grad::{finite_diff_grad, loss_and_grad};
use pic_calibrate::build_qw_mesh;
use rand::Rng;

fn main() -> pic_calibrate::Result<()> {
    for steps in [3, 5] {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let spec = build_qw_mesh(steps)?;
            let truth = sample_target_params(&spec, &mut rng_for(seed, streams::TARGETS), &TargetConfig::default());
            let data = generate_synthetic_dataset(&spec, &truth, 8, 0.02, DEFAULT_CURRENT_RANGE, seed)?;
            let mut rng = rng_for(seed, 99);
            let mut p = truth.clone();
            let mut flat = p.to_flat();
            flat.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
            p.set_flat(&flat);
            let input = localized_input(&spec);
            let (loss, g) = loss_and_grad(&spec, &p, &data.samples, &input, &vec![true; p.len()])?;
            let fd = finite_diff_grad(&spec, &p, &data.samples, &input, 1e-5)?;
            let err = g
                .values
                .iter()
                .zip(&fd.values)
                .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
                .fold(0.0, f64::max);
            worst = worst.max(err);
            if seed == 0 {
                println!("T={steps}: loss {loss:.4e}, |grad| {:.4e}", g.norm());
            }
        }
        println!("T={steps}: worst relative error over 20 instances {worst:.2e}");
    }
    Ok(())
}
