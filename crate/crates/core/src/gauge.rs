//! Reporting gauge for fitted parameters.
//!
//! Output distributions are blind to several reparameterizations: offsets
//! modulo 2π, global coupling scale, per-layer loss scale (every path
//! crosses each layer exactly once) and sign flips carried along internal
//! waveguides. A sign flip on a waveguide multiplies the producing unit's
//! output row and the consuming unit's input column by −1; the unit keeps
//! its `diag(1, e^{iφ}) R(θ)` form with `(cos θ, sin θ)` sign-flipped and
//! `φ` shifted by π when an odd number of its four ports flipped. Choosing
//! the flips layer by layer brings every `θ` into `[0, π/2]`.
//!
//! The sign flips are the discrete part of a continuous phase gauge: a unit
//! whose two lit inputs carry a common phase passes it to its upper output,
//! and any extra phase on its lower output is absorbed by its shifter. The
//! offsets reachable this way form a linear subspace of `b`. It is fixed by
//! pinning one reference shifter per gauge direction to `b = 0`.

use std::f64::consts::PI;

use crate::forward::Parameters;
use crate::mesh::CircuitSpec;

/// Wraps into `[−π, π)`.
pub fn wrap_phase(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut y = x - two_pi * ((x + PI) / two_pi).floor();
    if y >= PI {
        y -= two_pi;
    }
    if y < -PI {
        y += two_pi;
    }
    y
}

#[derive(Clone, Copy)]
enum Row {
    Upper,
    Lower,
}

fn sign(x: f64) -> i8 {
    if x < 0.0 {
        -1
    } else {
        1
    }
}

/// Result of canonicalization, with the units whose sign could not be fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Canonical {
    pub params: Parameters,
    pub unresolved_units: Vec<usize>,
}

/// Brings `params` into the reporting gauge without changing any predicted
/// distribution: `θ ∈ [0, π/2]`, `b ∈ [−π, π)`, and coupling and per-layer
/// transfer efficiencies at geometric mean 1.
pub fn canonicalize(spec: &CircuitSpec, params: &Parameters) -> Canonical {
    let mut out = params.clone();
    let unresolved = fix_signs(spec, &mut out);
    PhaseGauge::of(spec).fix(&mut out.b);
    if layer_scaling_is_gauge(spec) {
        for layer in &spec.layers {
            let idx: Vec<usize> = layer.units.iter().map(|u| u.bs_index).collect();
            let g = geometric_mean(idx.iter().map(|&k| out.alpha[k]));
            for k in idx {
                out.alpha[k] /= g;
            }
        }
    }
    let g = geometric_mean(out.eta.iter().copied());
    for e in &mut out.eta {
        *e /= g;
    }
    Canonical {
        params: out,
        unresolved_units: unresolved,
    }
}

fn geometric_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v.ln(), n + 1));
    if n == 0 {
        1.0
    } else {
        (sum / n as f64).exp()
    }
}

/// Directions in `b` that leave every output distribution unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGauge {
    /// Shifters whose offset is set to zero in the reporting gauge.
    pub reference: Vec<usize>,
    /// One direction per reference shifter: 1 there, 0 at the other
    /// references.
    pub basis: Vec<Vec<f64>>,
}

impl PhaseGauge {
    pub fn of(spec: &CircuitSpec) -> Self {
        let n = spec.ps_count;
        let mut link: Vec<Option<Vec<f64>>> = vec![None; spec.mode_count];
        link[spec.input_mode] = Some(vec![0.0; n]);
        let mut rows = Vec::new();
        for layer in &spec.layers {
            for u in &layer.units {
                let (i, j) = (u.top_mode, u.top_mode + 1);
                let common = match (link[i].take(), link[j].take()) {
                    (Some(x), Some(y)) => {
                        let diff: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p - q).collect();
                        if diff.iter().any(|&d| d != 0.0) {
                            rows.push(diff);
                        }
                        Some(x)
                    }
                    (x, y) => x.or(y),
                };
                if let Some(psi) = common {
                    let mut lower = psi.clone();
                    if let Some(k) = u.ps_index {
                        lower[k] += 1.0;
                    }
                    link[i] = Some(psi);
                    link[j] = Some(lower);
                }
            }
        }
        let (rref, pivots) = reduced_row_echelon(rows, n);
        let reference: Vec<usize> = (0..n).filter(|c| !pivots.contains(c)).collect();
        let basis = reference
            .iter()
            .map(|&f| {
                let mut g = vec![0.0; n];
                g[f] = 1.0;
                for (row, &p) in rref.iter().zip(&pivots) {
                    g[p] = -row[f];
                }
                g
            })
            .collect();
        Self { reference, basis }
    }

    /// Moves `b` along the gauge so every reference offset is zero, then wraps.
    pub fn fix(&self, b: &mut [f64]) {
        for (&f, g) in self.reference.iter().zip(&self.basis) {
            let c = b[f];
            for (bk, gk) in b.iter_mut().zip(g) {
                *bk -= c * gk;
            }
        }
        for v in b.iter_mut() {
            *v = wrap_phase(*v);
        }
    }
}

fn reduced_row_echelon(mut rows: Vec<Vec<f64>>, cols: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..rows.len()).max_by(|&x, &y| rows[x][c].abs().total_cmp(&rows[y][c].abs())) else {
            break;
        };
        if rows[p][c].abs() < 1e-12 {
            continue;
        }
        rows.swap(r, p);
        let lead = rows[r][c];
        rows[r].iter_mut().for_each(|v| *v /= lead);
        let pivot_row = rows[r].clone();
        for (k, row) in rows.iter_mut().enumerate() {
            if k != r && row[c] != 0.0 {
                let f = row[c];
                row.iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
            }
        }
        pivots.push(c);
        r += 1;
    }
    rows.truncate(r);
    (rows, pivots)
}

/// Splitters with a single lit input. Their reflectivity and transfer
/// efficiency are only seen in combination once edge ports are masked.
pub fn edge_splitters(spec: &CircuitSpec) -> Vec<usize> {
    let cone = spec.light_cone();
    spec.layers
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| {
            let lit = &cone[l];
            layer
                .units
                .iter()
                .filter(move |u| lit[u.top_mode] != lit[u.top_mode + 1])
                .map(|u| u.bs_index)
        })
        .collect()
}

/// True when every lit mode entering a layer passes through one of its
/// units, so scaling a whole layer's transfer efficiency is unobservable.
pub fn layer_scaling_is_gauge(spec: &CircuitSpec) -> bool {
    let cone = spec.light_cone();
    spec.layers.iter().enumerate().all(|(l, layer)| {
        let mut covered = vec![false; spec.mode_count];
        for u in &layer.units {
            covered[u.top_mode] = true;
            covered[u.top_mode + 1] = true;
        }
        cone[l].iter().zip(&covered).all(|(&lit, &cov)| !lit || cov)
    })
}

fn fix_signs(spec: &CircuitSpec, p: &mut Parameters) -> Vec<usize> {
    let units: Vec<_> = spec.units().map(|(_, u)| *u).collect();
    let n = units.len();
    let cone = spec.light_cone();
    let mut link: Vec<Option<(usize, Row)>> = vec![None; spec.mode_count];
    let mut r_upper = vec![1i8; n];
    let mut r_lower: Vec<Option<i8>> = vec![None; n];
    let mut k_upper = vec![1i8; n];
    let mut k_lower = vec![1i8; n];
    let mut unresolved = Vec::new();

    // The input waveguide carries a global sign and unlit ones carry nothing,
    // so only links fed by another unit's upper row are fixed when reached.
    let fixed = |link: &Option<(usize, Row)>, r_upper: &[i8], mode: usize| -> Option<i8> {
        match link {
            Some((p, Row::Upper)) => Some(r_upper[*p]),
            Some((_, Row::Lower)) => None,
            None if cone[0][mode] && mode != spec.input_mode => Some(1),
            None => None,
        }
    };

    let mut ui = 0;
    for layer in &spec.layers {
        for u in &layer.units {
            let (i, j) = (u.top_mode, u.top_mode + 1);
            let th = p.theta[u.bs_index];
            let (s, c) = th.sin_cos();
            let want = sign(c) * sign(s);
            let (k1, k2) = match (fixed(&link[i], &r_upper, i), fixed(&link[j], &r_upper, j)) {
                (Some(k1), Some(k2)) => {
                    if k1 * k2 != want {
                        unresolved.push(ui);
                    }
                    (k1, k2)
                }
                (Some(k1), None) => (k1, want * k1),
                (None, Some(k2)) => (want * k2, k2),
                (None, None) => (want, 1),
            };
            for (mode, k) in [(i, k1), (j, k2)] {
                if let Some((prod, Row::Lower)) = link[mode] {
                    r_lower[prod] = Some(k);
                }
            }
            k_upper[ui] = k1;
            k_lower[ui] = k2;
            r_upper[ui] = sign(c) * k1;
            let r1 = f64::from(r_upper[ui]);
            p.theta[u.bs_index] = (r1 * f64::from(k2) * s).atan2(r1 * f64::from(k1) * c);
            link[i] = Some((ui, Row::Upper));
            link[j] = Some((ui, Row::Lower));
            ui += 1;
        }
    }

    for (ui, u) in units.iter().enumerate() {
        let r2 = r_lower[ui].unwrap_or(r_upper[ui] * k_upper[ui] * k_lower[ui]);
        if r_upper[ui] * r2 * k_upper[ui] * k_lower[ui] < 0 {
            match u.ps_index {
                Some(k) => p.b[k] += PI,
                None => unresolved.push(ui),
            }
        }
    }
    unresolved.sort_unstable();
    unresolved.dedup();
    unresolved
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{random_currents, rng_for};
    use crate::forward::{localized_input, output_distribution};
    use crate::mesh::build_qw_mesh;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn wrap_cases() {
        assert_eq!(wrap_phase(0.0), 0.0);
        assert_eq!(wrap_phase(PI), -PI);
        assert!((wrap_phase(3.0 * PI + 0.5) - (-PI + 0.5)).abs() < 1e-12);
        assert!((wrap_phase(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
        for k in -50..50 {
            let y = wrap_phase(k as f64 * 0.37);
            assert!((-PI..PI).contains(&y));
        }
    }

    #[test]
    fn qw_mesh_scaling_is_a_gauge() {
        assert!(layer_scaling_is_gauge(&build_qw_mesh(12).unwrap()));
    }

    fn scrambled(spec: &CircuitSpec, rng: &mut impl Rng) -> Parameters {
        let mut p = Parameters::ideal(spec);
        for v in &mut p.a {
            *v = rng.random_range(0.1..0.14);
        }
        for v in &mut p.b {
            *v = rng.random_range(-10.0..10.0);
        }
        for v in &mut p.theta {
            *v = rng.random_range(-7.0..7.0);
        }
        for v in &mut p.alpha {
            *v = rng.random_range(0.5..2.0);
        }
        for v in &mut p.eta {
            *v = rng.random_range(0.5..2.0);
        }
        p
    }

    #[test]
    fn canonical_form_preserves_distributions() {
        let mut rng = rng_for(17, 0);
        for t in [1, 2, 3, 5, 8, 12] {
            let spec = build_qw_mesh(t).unwrap();
            let input = localized_input(&spec);
            for _ in 0..10 {
                let p = scrambled(&spec, &mut rng);
                let c = canonicalize(&spec, &p);
                assert!(c.unresolved_units.is_empty());
                let q = &c.params;
                assert!(q.theta.iter().all(|&th| (0.0..=FRAC_PI_2).contains(&th)));
                assert!(q.b.iter().all(|&b| (-PI..PI).contains(&b)));
                let gm = q.eta.iter().map(|e| e.ln()).sum::<f64>() / q.eta.len() as f64;
                assert!(gm.abs() < 1e-12);
                for cur in random_currents(&spec, 5, (0.0, 7.0), rng.random()) {
                    let d0 = output_distribution(&spec, &p, &cur, &input).unwrap();
                    let d1 = output_distribution(&spec, q, &cur, &input).unwrap();
                    let dev = d0.iter().zip(&d1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    assert!(dev < 1e-14, "T={t}: {dev}");
                }
            }
        }
    }

    #[test]
    fn phase_gauge_dimension_and_integrality() {
        for (t, dim) in [(2, 1), (5, 4), (8, 7), (12, 11)] {
            let spec = build_qw_mesh(t).unwrap();
            let g = PhaseGauge::of(&spec);
            assert_eq!(g.reference.len(), dim, "T={t}");
            assert!(g.reference.contains(&(spec.ps_count - 1)));
            for v in g.basis.iter().flatten() {
                assert_eq!(v.fract(), 0.0);
            }
        }
    }

    #[test]
    fn edge_splitters_of_qw_mesh() {
        let spec = build_qw_mesh(12).unwrap();
        let edges = edge_splitters(&spec);
        assert_eq!(edges.len(), 23);
        assert_eq!(&edges[..5], &[0, 1, 2, 3, 5]);
        assert_eq!(edges.last(), Some(&77));
    }

    #[test]
    fn gauge_moves_are_invisible_and_canonicalized_away() {
        let spec = build_qw_mesh(8).unwrap();
        let input = localized_input(&spec);
        let gauge = PhaseGauge::of(&spec);
        let mut rng = rng_for(19, 0);
        let p = scrambled(&spec, &mut rng);
        let base = canonicalize(&spec, &p).params;
        for _ in 0..5 {
            let mut q = p.clone();
            for g in &gauge.basis {
                let c: f64 = rng.random_range(-4.0..4.0);
                for (b, gk) in q.b.iter_mut().zip(g) {
                    *b += c * gk;
                }
            }
            for cur in random_currents(&spec, 5, (0.0, 7.0), rng.random()) {
                let d0 = output_distribution(&spec, &p, &cur, &input).unwrap();
                let d1 = output_distribution(&spec, &q, &cur, &input).unwrap();
                let dev = d0.iter().zip(&d1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(dev < 1e-14, "{dev}");
            }
            let moved = canonicalize(&spec, &q).params;
            for (x, y) in moved.b.iter().zip(&base.b) {
                assert!(wrap_phase(x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn canonical_parameters_are_a_fixed_point() {
        let spec = build_qw_mesh(6).unwrap();
        let mut rng = rng_for(18, 0);
        let p = scrambled(&spec, &mut rng);
        let once = canonicalize(&spec, &p).params;
        let twice = canonicalize(&spec, &once).params;
        for (x, y) in once.to_flat().iter().zip(twice.to_flat()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
