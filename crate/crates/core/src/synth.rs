//! Synthetic helices for desk-scale training corpora.

use rand::Rng;

use ribosphere_tensor::rng::uniform;

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::structure::{AtomSet, Base, RnaStructure};

pub const DEFAULT_TWIST_DEG: f64 = 32.7;
pub const DEFAULT_RISE: f64 = 2.81;
/// Radius of the C4′ helix in Å.
pub const HELIX_RADIUS: f64 = 8.0;

/// Per-atom offsets from C4′ in the residue's (radial, tangential, axial)
/// frame, in Å. Neighbouring bonded atoms sit 1.3 to 1.5 Å apart.
const OFFSETS: [(&str, [f64; 3]); 11] = [
    ("P", [3.1, -1.4, 1.9]),
    ("C5'", [0.9, -0.9, 0.6]),
    ("C4'", [0.0, 0.0, 0.0]),
    ("C3'", [-0.6, 1.2, -0.5]),
    ("C2'", [-1.9, 1.6, -0.9]),
    ("C1'", [-2.4, 0.3, -0.6]),
    ("O5'", [2.2, -0.8, 0.9]),
    ("O4'", [-1.3, -0.5, -0.3]),
    ("O3'", [-0.2, 2.4, -1.3]),
    ("O2'", [-2.6, 2.6, -1.5]),
    ("N", [-3.8, -0.1, -0.4]),
];

fn offset(name: &str) -> [f64; 3] {
    let key = if name == "N9" || name == "N1" { "N" } else { name };
    OFFSETS.iter().find(|(n, _)| *n == key).map(|(_, o)| *o).expect("offset table covers every atom set")
}

/// A regular single-strand helix of `length` residues.
///
/// The sequence and the starting phase are drawn from `rng`.
pub fn synth_helix<R: Rng + ?Sized>(
    length: usize,
    twist_deg: f64,
    rise: f64,
    atom_set: AtomSet,
    rng: &mut R,
) -> Result<RnaStructure> {
    if length < 4 {
        return Err(Error::Invalid(format!("helix length must be at least 4, got {length}")));
    }
    let sequence: Vec<Base> = (0..length).map(|_| Base::ALL[rng.random_range(0..4)]).collect();
    let phase = uniform(rng) * std::f64::consts::TAU;
    let twist = twist_deg.to_radians();
    let mut coords: Vec<Point> = Vec::with_capacity(length * atom_set.len());
    for (i, base) in sequence.iter().enumerate() {
        let theta = phase + twist * i as f64;
        let (s, c) = theta.sin_cos();
        let c4 = [HELIX_RADIUS * c, HELIX_RADIUS * s, rise * i as f64];
        for name in atom_set.names(*base) {
            let [r, t, z] = offset(name);
            coords.push([c4[0] + r * c - t * s, c4[1] + r * s + t * c, c4[2] + z]);
        }
    }
    RnaStructure::from_coords(format!("helix{length}"), sequence, atom_set, coords)
}

/// `n` helices with lengths uniform in `[min_len, max_len]`, ids `helix{k}`.
pub fn helix_corpus<R: Rng + ?Sized>(
    n: usize,
    min_len: usize,
    max_len: usize,
    atom_set: AtomSet,
    rng: &mut R,
) -> Result<Vec<RnaStructure>> {
    if min_len > max_len {
        return Err(Error::Invalid(format!("min length {min_len} exceeds max {max_len}")));
    }
    (0..n)
        .map(|k| {
            let len = rng.random_range(min_len..=max_len);
            let mut s = synth_helix(len, DEFAULT_TWIST_DEG, DEFAULT_RISE, atom_set, rng)?;
            s.id = format!("helix{k:03}");
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist;
    use ribosphere_tensor::rng::seeded;

    #[test]
    fn constant_c4_spacing() {
        let s = synth_helix(10, DEFAULT_TWIST_DEG, DEFAULT_RISE, AtomSet::A10, &mut seeded(1)).unwrap();
        let (c4, _) = s.c4_trace();
        let d0 = dist(c4[0], c4[1]);
        for w in c4.windows(2) {
            assert!((dist(w[0], w[1]) - d0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_twist_is_a_straight_rise() {
        let s = synth_helix(6, 0.0, 3.0, AtomSet::A1, &mut seeded(2)).unwrap();
        for (i, p) in s.coords.iter().enumerate() {
            assert!((p[0] - s.coords[0][0]).abs() < 1e-12 && (p[1] - s.coords[0][1]).abs() < 1e-12);
            assert!((p[2] - 3.0 * i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn full_turn_periodicity() {
        let k = 9;
        let s = synth_helix(k + 1, 360.0 / k as f64, DEFAULT_RISE, AtomSet::A11, &mut seeded(3)).unwrap();
        let (c4, _) = s.c4_trace();
        assert!((c4[k][0] - c4[0][0]).abs() < 1e-9);
        assert!((c4[k][1] - c4[0][1]).abs() < 1e-9);
    }

    #[test]
    fn seeded_and_validated() {
        let a = synth_helix(8, 30.0, 2.8, AtomSet::A10, &mut seeded(4)).unwrap();
        let b = synth_helix(8, 30.0, 2.8, AtomSet::A10, &mut seeded(4)).unwrap();
        assert_eq!(a, b);
        assert!(synth_helix(3, 30.0, 2.8, AtomSet::A10, &mut seeded(4)).is_err());
    }

    #[test]
    fn bonded_offsets_are_chemically_plausible() {
        let s = synth_helix(4, DEFAULT_TWIST_DEG, DEFAULT_RISE, AtomSet::A11, &mut seeded(6)).unwrap();
        let r = s.residue_coords(1);
        for (a, b) in [(2, 3), (2, 1), (1, 6), (6, 0), (2, 7), (7, 5), (5, 4), (4, 3), (3, 8), (4, 9), (5, 10)] {
            let d = dist(r[a], r[b]);
            assert!((1.3..1.7).contains(&d), "{a}-{b}: {d}");
        }
    }
}
