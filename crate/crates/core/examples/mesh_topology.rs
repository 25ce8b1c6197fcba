//! Builds the 12-step light-cone mesh and prints its wiring, the ports the
//! detectors see and the parameter directions intensities cannot resolve.

use pic_calibrate::build_qw_mesh;
use pic_calibrate::gauge::{edge_splitters, PhaseGauge};

fn main() -> pic_calibrate::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let spec = build_qw_mesh(steps)?;
    spec.validate()?;
    println!(
        "{steps} steps: {} beam splitters, {} phase shifters, {} modes, input mode {}",
        spec.bs_count, spec.ps_count, spec.mode_count, spec.input_mode
    );
    for (t, layer) in spec.layers.iter().enumerate() {
        let pairs: Vec<String> = layer
            .units
            .iter()
            .map(|u| match u.ps_index {
                Some(k) => format!("({},{})·ps{k}", u.top_mode, u.top_mode + 1),
                None => format!("({},{})", u.top_mode, u.top_mode + 1),
            })
            .collect();
        println!("layer {:>2}: {}", t + 1, pairs.join(" "));
    }
    println!("active ports: {:?}", spec.masked_ports());
    println!("shifters invisible on active ports: {:?}", spec.insensitive_phase_shifters());
    let gauge = PhaseGauge::of(&spec);
    println!("offset gauge dimension {}, reference shifters {:?}", gauge.reference.len(), gauge.reference);
    println!("edge splitters (single lit input): {:?}", edge_splitters(&spec));
    println!("fingerprint {}", spec.fingerprint());
    Ok(())
}
