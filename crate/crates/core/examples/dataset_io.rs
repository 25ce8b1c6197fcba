//! Generates a small dataset, writes it as line-delimited JSON, reads it
//! back and splits it into training and test parts.

use pic_calibrate::data::{
    generate_synthetic_dataset, load_dataset, rng_for, sample_target_params, save_dataset, split_dataset, streams,
    TargetConfig, DEFAULT_CURRENT_RANGE,
};
use pic_calibrate::build_qw_mesh;

fn main() -> pic_calibrate::Result<()> {
    let spec = build_qw_mesh(6)?;
    let chip = sample_target_params(&spec, &mut rng_for(2, streams::TARGETS), &TargetConfig::default());
    let ds = generate_synthetic_dataset(&spec, &chip, 40, 0.01, DEFAULT_CURRENT_RANGE, 2)?;
    let path = std::env::temp_dir().join("pic-calibrate-example.jsonl");
    save_dataset(&ds, &path)?;
    let back = load_dataset(&path, Some(&spec))?;
    println!("{} samples round-tripped exactly: {}", back.len(), back == ds);
    let (train, test) = split_dataset(&back, 0.85, 2)?;
    println!("85:15 split → {} train, {} test", train.len(), test.len());
    let first = &back.samples[0];
    println!("sample 0: {} currents, {} probabilities", first.currents.len(), first.probabilities.len());
    std::fs::remove_file(&path)?;
    Ok(())
}
