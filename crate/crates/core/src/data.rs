//! Synthetic chips, noisy datasets, persistence and train/test splitting.
//!
//! Datasets are stored as line-delimited JSON: one header record carrying
//! the metadata, then one record per sample. Floats are written in shortest
//! round-trip form so a save/load cycle is bit-exact.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{evolve, localized_input, output_distribution, Parameters, NOMINAL_PHASE_COEFF};
use crate::mesh::CircuitSpec;

const DATASET_TAG: &str = "pic-calibrate/dataset";
const DATASET_VERSION: u32 = 1;

/// Hardware current range of the heaters, mA.
pub const DEFAULT_CURRENT_RANGE: (f64, f64) = (0.0, 7.0);

/// Deterministic generator for an independent `(seed, stream)` pair.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids reserved for the different random draws of a run.
pub mod streams {
    pub const TARGETS: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TOMO_SETTINGS: u64 = 3;
    pub const TOMO_DYNAMICS: u64 = 4;
    /// Per-sample streams start here: sample `i` uses `SAMPLES + i`.
    pub const SAMPLES: u64 = 1 << 32;
}

/// One applied current pattern and the resulting output distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub currents: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetProvenance {
    /// Generated from known parameters, so recovery can be checked.
    Synthetic { params: Parameters },
    /// Measured on hardware; the true parameters are unknown.
    Experimental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec_fingerprint: String,
    pub seed: Option<u64>,
    pub noise_sigma: f64,
    pub current_range: (f64, f64),
    pub targets: TargetProvenance,
    /// Samples whose noise was redrawn because clamping zeroed them.
    #[serde(default)]
    pub regenerated: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    samples: usize,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks sample dimensions against `spec` and the distribution invariants.
    pub fn check(&self, spec: &CircuitSpec) -> Result<()> {
        if self.meta.spec_fingerprint != spec.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: spec.fingerprint(),
                found: self.meta.spec_fingerprint.clone(),
            });
        }
        let ports = spec.masked_ports().len();
        for s in &self.samples {
            if s.currents.len() != spec.ps_count {
                return Err(Error::dim("sample currents", spec.ps_count, s.currents.len()));
            }
            if s.probabilities.len() != ports {
                return Err(Error::dim("sample probabilities", ports, s.probabilities.len()));
            }
        }
        Ok(())
    }
}

/// Spread of the synthetic chip around ideal hardware.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub phase_coeff: f64,
    /// Half-width of the reflectivity interval around 0.5.
    pub delta_reflectivity: f64,
    /// Width of the transfer-efficiency interval below 1.
    pub delta_alpha: f64,
    /// Half-width of the coupling-efficiency interval around 1.
    pub delta_eta: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            phase_coeff: NOMINAL_PHASE_COEFF,
            delta_reflectivity: 0.05,
            delta_alpha: 0.1,
            delta_eta: 0.1,
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn sample_target_params(spec: &CircuitSpec, rng: &mut impl Rng, config: &TargetConfig) -> Parameters {
    let ports = spec.masked_ports().len();
    let b = (0..spec.ps_count).map(|_| uniform(rng, -PI, PI)).collect();
    let theta = (0..spec.bs_count)
        .map(|_| {
            let r = uniform(rng, 0.5 - config.delta_reflectivity, 0.5 + config.delta_reflectivity);
            r.sqrt().asin()
        })
        .collect();
    let alpha = (0..spec.bs_count)
        .map(|_| uniform(rng, 1.0 - config.delta_alpha, 1.0))
        .collect();
    let eta = (0..ports)
        .map(|_| uniform(rng, 1.0 - config.delta_eta, 1.0 + config.delta_eta))
        .collect();
    Parameters {
        a: vec![config.phase_coeff; spec.ps_count],
        b,
        theta,
        alpha,
        eta,
    }
}

/// Uniform current patterns, one derived stream per sample.
pub fn random_currents(spec: &CircuitSpec, n: usize, range: (f64, f64), seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, streams::SAMPLES + i as u64);
            (0..spec.ps_count).map(|_| uniform(&mut rng, range.0, range.1)).collect()
        })
        .collect()
}

/// Draws `n` samples from the forward model of `target` with additive
/// Gaussian noise, clamped at zero and renormalized.
pub fn generate_synthetic_dataset(
    spec: &CircuitSpec,
    target: &Parameters,
    n: usize,
    noise_sigma: f64,
    current_range: (f64, f64),
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma {noise_sigma} must be >= 0")));
    }
    if !(current_range.0 >= 0.0 && current_range.1 >= current_range.0) {
        return Err(Error::InvalidArgument(format!("bad current range {current_range:?}")));
    }
    target.check(spec)?;
    spec.validate()?;
    let input = localized_input(spec);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let generated: Vec<(Sample, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, streams::SAMPLES + i as u64);
            let currents: Vec<f64> = (0..spec.ps_count)
                .map(|_| uniform(&mut rng, current_range.0, current_range.1))
                .collect();
            let clean = output_distribution(spec, target, &currents, &input)?;
            if noise_sigma == 0.0 {
                return Ok((
                    Sample {
                        currents,
                        probabilities: clean,
                    },
                    false,
                ));
            }
            let mut redrawn = false;
            loop {
                let noisy: Vec<f64> = clean.iter().map(|&p| (p + noise.sample(&mut rng)).max(0.0)).collect();
                let total: f64 = noisy.iter().sum();
                if total > 0.0 {
                    let probabilities = noisy.into_iter().map(|p| p / total).collect();
                    return Ok((
                        Sample {
                            currents,
                            probabilities,
                        },
                        redrawn,
                    ));
                }
                redrawn = true;
            }
        })
        .collect::<Result<_>>()?;

    let regenerated = generated
        .iter()
        .enumerate()
        .filter_map(|(i, (_, r))| r.then_some(i))
        .collect();
    Ok(Dataset {
        meta: DatasetMeta {
            spec_fingerprint: spec.fingerprint(),
            seed: Some(seed),
            noise_sigma,
            current_range,
            targets: TargetProvenance::Synthetic { params: target.clone() },
            regenerated,
        },
        samples: generated.into_iter().map(|(s, _)| s).collect(),
    })
}

/// Clean output amplitudes for a batch of currents; used for state metrics.
pub fn clean_amplitudes(
    spec: &CircuitSpec,
    params: &Parameters,
    currents: &[Vec<f64>],
) -> Result<Vec<Vec<num_complex::Complex64>>> {
    let input = localized_input(spec);
    currents.par_iter().map(|c| evolve(spec, params, c, &input)).collect()
}

/// Seeded shuffle, then the first `⌊n·ratio⌋` samples train.
pub fn split_dataset(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let n = ds.len();
    let n_train = (n as f64 * ratio).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} samples at {ratio} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, streams::SPLIT));
    let take = |idx: &[usize]| Dataset {
        meta: ds.meta.clone(),
        samples: idx.iter().map(|&i| ds.samples[i].clone()).collect(),
    };
    Ok((take(&order[..n_train]), take(&order[n_train..])))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    let header = Header {
        format: DATASET_TAG.into(),
        version: DATASET_VERSION,
        samples: ds.samples.len(),
        meta: ds.meta.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    writeln!(w)?;
    for s in &ds.samples {
        serde_json::to_writer(&mut *w, s)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Loads a dataset; when `spec` is given the fingerprint must match.
pub fn load_dataset(path: impl AsRef<Path>, spec: Option<&CircuitSpec>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?), spec)
}

pub fn read_dataset(reader: impl BufRead, spec: Option<&CircuitSpec>) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("malformed header: {e}"),
        })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty dataset file".into(),
            })
        }
    };
    if header.format != DATASET_TAG || header.version != DATASET_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported format {} v{}", header.format, header.version),
        });
    }
    if let Some(spec) = spec {
        if header.meta.spec_fingerprint != spec.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: spec.fingerprint(),
                found: header.meta.spec_fingerprint,
            });
        }
    }

    let mut samples = Vec::with_capacity(header.samples);
    let mut last_good = 1;
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("malformed record ({e}); last good line {last_good}"),
        })?;
        check_distribution(&sample.probabilities).map_err(|msg| Error::Parse {
            line: lineno,
            msg: format!("{msg}; last good line {last_good}"),
        })?;
        samples.push(sample);
        last_good = lineno;
    }
    if samples.len() != header.samples {
        return Err(Error::Parse {
            line: last_good + 1,
            msg: format!(
                "truncated: header declares {} samples, found {}; last good line {last_good}",
                header.samples,
                samples.len()
            ),
        });
    }
    let ds = Dataset {
        meta: header.meta,
        samples,
    };
    if let Some(spec) = spec {
        ds.check(spec)?;
    }
    Ok(ds)
}

fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if p.iter().any(|&v| !(v >= 0.0)) {
        return Err("negative or non-finite probability".into());
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(format!("probabilities sum to {total}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::loss;
    use crate::mesh::build_qw_mesh;

    fn target(spec: &CircuitSpec, seed: u64) -> Parameters {
        sample_target_params(spec, &mut rng_for(seed, streams::TARGETS), &TargetConfig::default())
    }

    #[test]
    fn default_targets() {
        let spec = build_qw_mesh(12).unwrap();
        let p = target(&spec, 1);
        p.check(&spec).unwrap();
        assert!(p.a.iter().all(|&a| a == 0.12));
        assert!(p.b.iter().all(|&b| (-PI..PI).contains(&b)));
        for &th in &p.theta {
            let r = th.sin().powi(2);
            assert!((0.45 - 1e-12..=0.55 + 1e-12).contains(&r));
        }
        assert!(p.alpha.iter().all(|&a| (0.9..=1.0).contains(&a)));
        assert!(p.eta.iter().all(|&e| (0.9..=1.1).contains(&e)));
    }

    #[test]
    fn zero_width_targets_are_ideal() {
        let spec = build_qw_mesh(4).unwrap();
        let cfg = TargetConfig {
            delta_reflectivity: 0.0,
            delta_alpha: 0.0,
            delta_eta: 0.0,
            ..TargetConfig::default()
        };
        let p = sample_target_params(&spec, &mut rng_for(0, 0), &cfg);
        for &th in &p.theta {
            assert!((th.sin().powi(2) - 0.5).abs() < 1e-15);
        }
        assert!(p.alpha.iter().all(|&a| a == 1.0));
        assert!(p.eta.iter().all(|&e| e == 1.0));
    }

    #[test]
    fn offsets_are_uniform() {
        let spec = build_qw_mesh(2).unwrap();
        let mut rng = rng_for(42, 0);
        let mut draws: Vec<f64> = (0..10_000 / spec.ps_count)
            .flat_map(|_| sample_target_params(&spec, &mut rng, &TargetConfig::default()).b)
            .collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x + PI) / (2.0 * PI);
                (cdf - i as f64 / n).abs().max((cdf - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn noiseless_samples_reproduce_model() {
        let spec = build_qw_mesh(5).unwrap();
        let p = target(&spec, 2);
        let ds = generate_synthetic_dataset(&spec, &p, 20, 0.0, DEFAULT_CURRENT_RANGE, 9).unwrap();
        let input = localized_input(&spec);
        for s in &ds.samples {
            assert!(s.currents.iter().all(|&i| (0.0..=7.0).contains(&i)));
            assert_eq!(s.probabilities, output_distribution(&spec, &p, &s.currents, &input).unwrap());
        }
        assert!(loss(&spec, &p, &ds.samples, &input).unwrap() < 1e-12);
    }

    #[test]
    fn benchmark_shape_and_determinism() {
        let spec = build_qw_mesh(12).unwrap();
        let p = target(&spec, 3);
        let a = generate_synthetic_dataset(&spec, &p, 500, 0.01, DEFAULT_CURRENT_RANGE, 7).unwrap();
        assert_eq!(a.len(), 500);
        assert!(a.samples.iter().all(|s| s.probabilities.len() == 20));
        for s in &a.samples {
            let total: f64 = s.probabilities.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(s.probabilities.iter().all(|&v| v >= 0.0));
        }
        let b = generate_synthetic_dataset(&spec, &p, 500, 0.01, DEFAULT_CURRENT_RANGE, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_sizes_and_partition() {
        let spec = build_qw_mesh(3).unwrap();
        let p = target(&spec, 4);
        let ds = generate_synthetic_dataset(&spec, &p, 1500, 0.01, DEFAULT_CURRENT_RANGE, 1).unwrap();
        let (train, test) = split_dataset(&ds, 0.85, 5).unwrap();
        assert_eq!((train.len(), test.len()), (1275, 225));

        let small = Dataset {
            meta: ds.meta.clone(),
            samples: ds.samples[..10].to_vec(),
        };
        let (a, b) = split_dataset(&small, 0.5, 5).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let mut all: Vec<_> = a.samples.iter().chain(&b.samples).map(|s| s.currents.clone()).collect();
        let mut orig: Vec<_> = small.samples.iter().map(|s| s.currents.clone()).collect();
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        orig.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(all, orig);

        assert!(split_dataset(&small, 0.05, 5).is_err());
        assert!(split_dataset(&small, 1.0, 5).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let spec = build_qw_mesh(4).unwrap();
        let p = target(&spec, 6);
        let ds = generate_synthetic_dataset(&spec, &p, 30, 0.01, DEFAULT_CURRENT_RANGE, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path, Some(&spec)).unwrap(), ds);
    }

    #[test]
    fn truncated_file_names_last_good_line() {
        let spec = build_qw_mesh(3).unwrap();
        let p = target(&spec, 6);
        let ds = generate_synthetic_dataset(&spec, &p, 5, 0.0, DEFAULT_CURRENT_RANGE, 2).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // cut the last record in half
        let cut = &text[..text.len() - 20];
        let err = read_dataset(cut.as_bytes(), Some(&spec)).unwrap_err().to_string();
        assert!(err.contains("last good line 5"), "{err}");

        // drop whole trailing records
        let lines: Vec<&str> = text.lines().take(4).collect();
        let err = read_dataset(lines.join("\n").as_bytes(), None).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("last good line 4"), "{err}");
    }

    #[test]
    fn alien_fingerprint_rejected() {
        let spec = build_qw_mesh(3).unwrap();
        let other = build_qw_mesh(4).unwrap();
        let ds = generate_synthetic_dataset(&spec, &target(&spec, 1), 3, 0.0, DEFAULT_CURRENT_RANGE, 2).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let err = read_dataset(buf.as_slice(), Some(&other)).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
    }
}
