//! Circuit topology: layers of 2×2 units acting on adjacent optical modes.
//!
//! A unit is a beam splitter on the mode pair `(top_mode, top_mode + 1)`,
//! optionally followed by a thermo-optic phase shifter on the lower arm.
//! Modes are indexed top to bottom. Beam splitters and phase shifters are
//! numbered column by column (layer by layer), top to bottom within a column.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const FORMAT_TAG: &str = "pic-calibrate/circuit";
const FORMAT_VERSION: u32 = 1;

/// One beam splitter on `(top_mode, top_mode + 1)`, plus an optional phase
/// shifter on its lower output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    pub top_mode: usize,
    pub bs_index: usize,
    pub ps_index: Option<usize>,
}

impl Unit {
    pub fn lower_mode(&self) -> usize {
        self.top_mode + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub units: Vec<Unit>,
}

/// Topology of a quantum-walk style mesh.
///
/// Immutable once built; share it freely between threads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitSpec {
    pub steps: usize,
    pub mode_count: usize,
    pub layers: Vec<Layer>,
    pub input_mode: usize,
    pub port_mask: Vec<bool>,
    pub ps_count: usize,
    pub bs_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VersionedSpec {
    format: String,
    version: u32,
    spec: CircuitSpec,
}

/// Builds the light-cone mesh of a `steps`-step discrete-time quantum walk.
///
/// Layer `t` (1-based) holds `t` units at top modes `steps - t + 2k`, so the
/// pairs of consecutive layers overlap by one mode. The input is the lower
/// path of the single first-layer unit, i.e. mode `steps`.
pub fn build_qw_mesh(steps: usize) -> Result<CircuitSpec> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let mode_count = steps
        .checked_mul(2)
        .filter(|&m| m < usize::MAX / 2)
        .ok_or_else(|| Error::InvalidArgument(format!("steps {steps} overflows mode indexing")))?;
    let bs_count = steps
        .checked_mul(steps + 1)
        .map(|n| n / 2)
        .ok_or_else(|| Error::InvalidArgument(format!("steps {steps} overflows unit counting")))?;

    let mut layers = Vec::with_capacity(steps);
    let mut bs_index = 0;
    let mut ps_index = 0;
    for t in 1..=steps {
        let units = (0..t)
            .map(|k| {
                let ps = (t < steps).then(|| {
                    ps_index += 1;
                    ps_index - 1
                });
                bs_index += 1;
                Unit {
                    top_mode: steps - t + 2 * k,
                    bs_index: bs_index - 1,
                    ps_index: ps,
                }
            })
            .collect();
        layers.push(Layer { units });
    }

    Ok(CircuitSpec {
        steps,
        mode_count,
        layers,
        input_mode: steps,
        port_mask: default_port_mask(steps),
        ps_count: ps_index,
        bs_count,
    })
}

/// Excludes the two extreme modes on each side, whose intensities do not
/// depend on any phase setting. Meshes too small to spare four ports keep
/// every port.
pub fn default_port_mask(steps: usize) -> Vec<bool> {
    let modes = 2 * steps;
    (0..modes)
        .map(|m| steps < 3 || (m >= 2 && m + 2 < modes))
        .collect()
}

impl CircuitSpec {
    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidMesh(msg));
        let t = self.steps;
        if t == 0 {
            return fail("steps must be positive".into());
        }
        if self.mode_count != 2 * t {
            return fail(format!("count mismatch: mode_count {} != 2T = {}", self.mode_count, 2 * t));
        }
        let expected_bs = t * (t + 1) / 2;
        if self.bs_count != expected_bs {
            return fail(format!("count mismatch: bs_count {} != T(T+1)/2 = {expected_bs}", self.bs_count));
        }
        if self.ps_count != expected_bs - t {
            return fail(format!(
                "count mismatch: ps_count {} != bs_count - T = {}",
                self.ps_count,
                expected_bs - t
            ));
        }
        if self.layers.len() != t {
            return fail(format!("count mismatch: {} layers for {t} steps", self.layers.len()));
        }
        if self.port_mask.len() != self.mode_count {
            return fail(format!("port mask has {} entries for {} modes", self.port_mask.len(), self.mode_count));
        }
        if self.input_mode >= self.mode_count {
            return fail(format!("input mode {} out of range", self.input_mode));
        }
        if !self.port_mask.iter().any(|&p| p) {
            return fail("port mask excludes every mode".into());
        }

        let mut bs_seen = vec![false; self.bs_count];
        let mut ps_seen = vec![false; self.ps_count];
        for (li, layer) in self.layers.iter().enumerate() {
            let mut touched = vec![false; self.mode_count];
            for unit in &layer.units {
                if unit.top_mode + 1 >= self.mode_count {
                    return fail(format!("layer {}: unit at mode {} out of range", li + 1, unit.top_mode));
                }
                if touched[unit.top_mode] || touched[unit.top_mode + 1] {
                    return fail(format!(
                        "overlapping units in layer {} at pair ({}, {})",
                        li + 1,
                        unit.top_mode,
                        unit.top_mode + 1
                    ));
                }
                touched[unit.top_mode] = true;
                touched[unit.top_mode + 1] = true;

                match bs_seen.get_mut(unit.bs_index) {
                    Some(seen) if !*seen => *seen = true,
                    Some(_) => return fail(format!("duplicate beam-splitter index {}", unit.bs_index)),
                    None => return fail(format!("beam-splitter index {} out of range", unit.bs_index)),
                }
                if let Some(ps) = unit.ps_index {
                    if li + 1 == t {
                        return fail(format!("final-layer unit carries phase shifter {ps}"));
                    }
                    match ps_seen.get_mut(ps) {
                        Some(seen) if !*seen => *seen = true,
                        Some(_) => return fail(format!("duplicate phase-shifter index {ps}")),
                        None => return fail(format!("phase-shifter index {ps} out of range")),
                    }
                }
            }
            if layer.units.len() != li + 1 {
                return fail(format!(
                    "count mismatch: layer {} holds {} units, expected {}",
                    li + 1,
                    layer.units.len(),
                    li + 1
                ));
            }
        }
        if let Some(ps) = ps_seen.iter().position(|s| !s) {
            return fail(format!("phase-shifter index {ps} never used"));
        }
        Ok(())
    }

    /// Active output ports, top to bottom.
    pub fn masked_ports(&self) -> Vec<usize> {
        self.port_mask
            .iter()
            .enumerate()
            .filter_map(|(m, &on)| on.then_some(m))
            .collect()
    }

    /// Iterates over `(layer_index, unit)` in application order.
    pub fn units(&self) -> impl Iterator<Item = (usize, &Unit)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(li, layer)| layer.units.iter().map(move |u| (li, u)))
    }

    /// Returns a copy with every port active.
    pub fn with_all_ports(mut self) -> Self {
        self.port_mask = vec![true; self.mode_count];
        self
    }

    /// `support[l][m]` is true when mode `m` can carry light just before
    /// layer `l` (with `support[layers]` the output), starting from the
    /// input mode.
    pub fn light_cone(&self) -> Vec<Vec<bool>> {
        let mut cur = vec![false; self.mode_count];
        cur[self.input_mode] = true;
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        out.push(cur.clone());
        for layer in &self.layers {
            for u in &layer.units {
                let lit = cur[u.top_mode] || cur[u.top_mode + 1];
                cur[u.top_mode] = lit;
                cur[u.top_mode + 1] = lit;
            }
            out.push(cur.clone());
        }
        out
    }

    /// Phase shifters whose phase cannot influence any output intensity:
    /// light leaving the shifted arm never meets light from elsewhere again.
    pub fn insensitive_phase_shifters(&self) -> Vec<usize> {
        let cone = self.light_cone();
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for unit in &layer.units {
                let Some(ps) = unit.ps_index else { continue };
                // tagged: modes carrying light that passed the shifter
                let mut tagged = vec![false; self.mode_count];
                tagged[unit.lower_mode()] = true;
                let mut other = cone[li + 1].clone();
                other[unit.lower_mode()] = false;
                let mut meets = false;
                'layers: for next in &self.layers[li + 1..] {
                    for v in &next.units {
                        let (i, j) = (v.top_mode, v.lower_mode());
                        let has_tag = tagged[i] || tagged[j];
                        let has_other = other[i] || other[j];
                        if has_tag && has_other {
                            meets = true;
                            break 'layers;
                        }
                        tagged[i] = has_tag;
                        tagged[j] = has_tag;
                        other[i] = has_other;
                        other[j] = has_other;
                    }
                }
                if !meets {
                    out.push(ps);
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn to_text(&self) -> String {
        let v = VersionedSpec {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            spec: self.clone(),
        };
        serde_json::to_string_pretty(&v).expect("circuit spec serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let v: VersionedSpec = serde_json::from_str(text)?;
        if v.format != FORMAT_TAG || v.version != FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported circuit format {} v{}",
                v.format, v.version
            )));
        }
        v.spec.validate()?;
        Ok(v.spec)
    }

    /// Short content hash identifying this exact topology and port mask.
    pub fn fingerprint(&self) -> String {
        let compact = serde_json::to_vec(self).expect("circuit spec serializes");
        let digest = Sha256::digest(&compact);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A contiguous run of layers of a mesh, sharing the full mode space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeshSection {
    pub mode_count: usize,
    /// Index of the first layer of this section within the full mesh.
    pub first_layer: usize,
    pub layers: Vec<Layer>,
}

impl MeshSection {
    pub fn bs_count(&self) -> usize {
        self.layers.iter().map(|l| l.units.len()).sum()
    }

    /// Phase-shifter indices of this section in application order.
    pub fn ps_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| l.units.iter().filter_map(|u| u.ps_index))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(spec: &CircuitSpec) -> Vec<Vec<(usize, usize)>> {
        spec.layers
            .iter()
            .map(|l| l.units.iter().map(|u| (u.top_mode, u.top_mode + 1)).collect())
            .collect()
    }

    #[test]
    fn twelve_step_counts() {
        let spec = build_qw_mesh(12).unwrap();
        assert_eq!(spec.bs_count, 78);
        assert_eq!(spec.ps_count, 66);
        assert_eq!(spec.mode_count, 24);
        spec.validate().unwrap();
    }

    #[test]
    fn single_step() {
        let spec = build_qw_mesh(1).unwrap();
        assert_eq!((spec.bs_count, spec.ps_count, spec.mode_count), (1, 0, 2));
        assert_eq!(pairs(&spec), vec![vec![(0, 1)]]);
        assert_eq!(spec.masked_ports(), vec![0, 1]);
    }

    #[test]
    fn three_step_wiring() {
        let spec = build_qw_mesh(3).unwrap();
        assert_eq!(
            pairs(&spec),
            vec![
                vec![(2, 3)],
                vec![(1, 2), (3, 4)],
                vec![(0, 1), (2, 3), (4, 5)],
            ]
        );
        assert_eq!((spec.bs_count, spec.ps_count), (6, 3));
        assert_eq!(spec.input_mode, 3);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(build_qw_mesh(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn counts_and_tiling_for_many_sizes() {
        for t in 1..=16 {
            let spec = build_qw_mesh(t).unwrap();
            spec.validate().unwrap();
            let bs = spec.units().count();
            let ps = spec.units().filter(|(_, u)| u.ps_index.is_some()).count();
            assert_eq!(bs, t * (t + 1) / 2);
            assert_eq!(ps, bs - t);
            for (li, layer) in spec.layers.iter().enumerate() {
                let layer_t = li + 1;
                let covered: Vec<usize> = layer
                    .units
                    .iter()
                    .flat_map(|u| [u.top_mode, u.top_mode + 1])
                    .collect();
                let expected: Vec<usize> = (t - layer_t..t + layer_t).collect();
                assert_eq!(covered, expected, "T={t} layer {layer_t}");
            }
        }
    }

    #[test]
    fn overlapping_units_detected() {
        let mut spec = build_qw_mesh(3).unwrap();
        spec.layers[2].units[1].top_mode = 0;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("overlapping units"), "{err}");
    }

    #[test]
    fn count_mismatch_detected() {
        let mut spec = build_qw_mesh(4).unwrap();
        spec.ps_count += 1;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("count mismatch"), "{err}");
    }

    #[test]
    fn duplicate_index_detected() {
        let mut spec = build_qw_mesh(3).unwrap();
        spec.layers[1].units[1].bs_index = 0;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn default_mask_for_twelve_steps() {
        let spec = build_qw_mesh(12).unwrap();
        assert_eq!(spec.masked_ports(), (2..22).collect::<Vec<_>>());
        let all = spec.with_all_ports();
        assert_eq!(all.masked_ports(), (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn only_bottom_corner_shifter_is_insensitive() {
        for t in 3..=12 {
            let spec = build_qw_mesh(t).unwrap();
            let last_ps_layer = &spec.layers[t - 2];
            let corner = last_ps_layer.units.last().unwrap().ps_index.unwrap();
            assert_eq!(spec.insensitive_phase_shifters(), vec![corner], "T={t}");
        }
    }

    #[test]
    fn text_round_trip_and_fingerprint() {
        let spec = build_qw_mesh(5).unwrap();
        let back = CircuitSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.fingerprint(), spec.fingerprint());
        assert_ne!(spec.fingerprint(), build_qw_mesh(6).unwrap().fingerprint());
        assert_ne!(spec.fingerprint(), spec.clone().with_all_ports().fingerprint());
    }
}
