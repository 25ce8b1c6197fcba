//! Treats the first nine layers of a sampled 12-step chip as the state
//! preparation and the last three as a reconfigurable detector, then
//! reconstructs the 18-mode output state by maximum likelihood.

use pic_calibrate::data::{rng_for, sample_target_params, streams, TargetConfig, DEFAULT_CURRENT_RANGE};
use pic_calibrate::metrics::{infidelity, purity_error};
use pic_calibrate::tomo::{design_rank, mle_reconstruct, random_settings, simulate_tomography, split_mesh, MleConfig};
use pic_calibrate::build_qw_mesh;
use rand::Rng;

fn main() -> pic_calibrate::Result<()> {
    let runs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let spec = build_qw_mesh(12)?;
    let chip = sample_target_params(&spec, &mut rng_for(1, streams::TARGETS), &TargetConfig::default());
    let (dynamics, detector) = split_mesh(&spec, 9)?;
    let settings = random_settings(&detector, 14, DEFAULT_CURRENT_RANGE, 1, streams::TOMO_SETTINGS);
    let mut rng = rng_for(1, streams::TOMO_DYNAMICS);
    let mut total = 0.0;
    for k in 0..runs {
        let currents: Vec<f64> = (0..dynamics.ps_indices().len()).map(|_| rng.random_range(0.0..=7.0)).collect();
        let sim = simulate_tomography(&spec, &chip, 9, &currents, &settings)?;
        if k == 0 {
            let d = sim.settings[0].effects.ncols();
            println!("14 settings of {}×{} effects span {} of {} operator directions", sim.settings[0].effects.nrows(), d, design_rank(&sim.settings), d * d);
        }
        let r = mle_reconstruct(&sim.settings, &sim.data, &MleConfig::default())?;
        let inf = infidelity(&sim.truth, &r.rho)?;
        total += inf;
        println!(
            "dynamics {k}: infidelity {inf:.2e}, purity error {:.2e}, kept fit {}",
            purity_error(&sim.truth, &r.rho)?,
            r.stages[r.chosen].name
        );
    }
    println!("mean infidelity {:.2e}", total / runs as f64);
    Ok(())
}
