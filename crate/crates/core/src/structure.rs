//! RNA structures, nucleotide alphabet and atom sets.

use std::fmt;

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Base {
    A,
    U,
    C,
    G,
}

impl Base {
    /// Vocabulary order used by every sequence model.
    pub const ALL: [Base; 4] = [Base::A, Base::U, Base::C, Base::G];

    pub fn from_char(c: char) -> Option<Base> {
        match c.to_ascii_uppercase() {
            'A' => Some(Base::A),
            'U' => Some(Base::U),
            'C' => Some(Base::C),
            'G' => Some(Base::G),
            _ => None,
        }
    }

    pub fn from_index(i: usize) -> Option<Base> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_char(self) -> char {
        match self {
            Base::A => 'A',
            Base::U => 'U',
            Base::C => 'C',
            Base::G => 'G',
        }
    }

    pub fn is_purine(self) -> bool {
        matches!(self, Base::A | Base::G)
    }
}

impl fmt::Display for Base {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

pub fn parse_sequence(s: &str) -> Result<Vec<Base>> {
    s.chars()
        .map(|c| Base::from_char(c).ok_or_else(|| Error::Invalid(format!("unknown nucleotide `{c}`"))))
        .collect()
}

pub fn sequence_string(seq: &[Base]) -> String {
    seq.iter().map(|b| b.as_char()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AtomSet {
    A1,
    A10,
    A11,
    B6,
}

const A10_NAMES: [&str; 10] = ["P", "C5'", "C4'", "C3'", "C2'", "C1'", "O5'", "O4'", "O3'", "O2'"];
const B6_NAMES: [&str; 6] = ["P", "C5'", "C4'", "C3'", "O5'", "O3'"];

impl AtomSet {
    pub fn len(self) -> usize {
        match self {
            AtomSet::A1 => 1,
            AtomSet::A10 => 10,
            AtomSet::A11 => 11,
            AtomSet::B6 => 6,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// Atom names for a residue of type `base`. Only A11 depends on the base.
    pub fn names(self, base: Base) -> Vec<&'static str> {
        match self {
            AtomSet::A1 => vec!["C4'"],
            AtomSet::A10 => A10_NAMES.to_vec(),
            AtomSet::A11 => {
                let mut v = A10_NAMES.to_vec();
                v.push(if base.is_purine() { "N9" } else { "N1" });
                v
            }
            AtomSet::B6 => B6_NAMES.to_vec(),
        }
    }

    pub fn slot(self, name: &str, base: Base) -> Option<usize> {
        self.names(base).iter().position(|n| *n == name)
    }

    pub fn c4_index(self) -> usize {
        self.slot("C4'", Base::A).expect("every atom set has C4'")
    }

    pub fn parse(s: &str) -> Result<AtomSet> {
        match s.to_ascii_uppercase().as_str() {
            "A1" => Ok(AtomSet::A1),
            "A10" => Ok(AtomSet::A10),
            "A11" => Ok(AtomSet::A11),
            "B6" => Ok(AtomSet::B6),
            _ => Err(Error::Config(format!("unknown atom set `{s}`"))),
        }
    }
}

impl fmt::Display for AtomSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One RNA chain with per-residue coordinates for a fixed atom set.
///
/// `coords` and `mask` are residue-major with `len() * atom_set.len()` entries;
/// masked entries hold the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnaStructure {
    pub id: String,
    pub chain_id: String,
    pub sequence: Vec<Base>,
    pub atom_set: AtomSet,
    pub coords: Vec<Point>,
    pub mask: Vec<bool>,
}

impl RnaStructure {
    pub fn new(
        id: impl Into<String>,
        chain_id: impl Into<String>,
        sequence: Vec<Base>,
        atom_set: AtomSet,
        coords: Vec<Point>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let l = sequence.len();
        if l == 0 {
            return Err(Error::Structure("empty sequence".into()));
        }
        let n = l * atom_set.len();
        if coords.len() != n || mask.len() != n {
            return Err(Error::Structure(format!(
                "expected {n} atom slots for L={l} and {atom_set}, got {} coords / {} mask",
                coords.len(),
                mask.len()
            )));
        }
        let mut s = Self {
            id: id.into(),
            chain_id: chain_id.into(),
            sequence,
            atom_set,
            coords,
            mask,
        };
        for (c, m) in s.coords.iter_mut().zip(&s.mask) {
            if !*m {
                *c = [0.0; 3];
            }
        }
        Ok(s)
    }

    /// Builds a fully observed structure.
    pub fn from_coords(id: impl Into<String>, sequence: Vec<Base>, atom_set: AtomSet, coords: Vec<Point>) -> Result<Self> {
        let n = coords.len();
        Self::new(id, "A", sequence, atom_set, coords, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn atoms_per_residue(&self) -> usize {
        self.atom_set.len()
    }

    pub fn atom(&self, residue: usize, slot: usize) -> Point {
        self.coords[residue * self.atom_set.len() + slot]
    }

    pub fn atom_mask(&self, residue: usize, slot: usize) -> bool {
        self.mask[residue * self.atom_set.len() + slot]
    }

    pub fn residue_coords(&self, residue: usize) -> &[Point] {
        let a = self.atom_set.len();
        &self.coords[residue * a..(residue + 1) * a]
    }

    pub fn sequence_string(&self) -> String {
        sequence_string(&self.sequence)
    }

    pub fn num_observed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Centroid over unmasked atoms.
    pub fn masked_centroid(&self) -> Result<Point> {
        let pts: Vec<Point> = self.observed().map(|(_, p)| p).collect();
        if pts.is_empty() {
            return Err(Error::Structure(format!("{}: every atom is masked", self.id)));
        }
        Ok(geometry::centroid(&pts))
    }

    /// Iterates `(flat index, coordinate)` over unmasked atoms.
    pub fn observed(&self) -> impl Iterator<Item = (usize, Point)> + '_ {
        self.coords
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, m))| **m)
            .map(|(i, (c, _))| (i, *c))
    }

    pub fn translate(&self, t: Point) -> RnaStructure {
        let mut out = self.clone();
        for (c, m) in out.coords.iter_mut().zip(&out.mask) {
            if *m {
                *c = geometry::add(*c, t);
            }
        }
        out
    }

    pub fn rotate(&self, r: &Matrix3<f64>) -> RnaStructure {
        let mut out = self.clone();
        for (c, m) in out.coords.iter_mut().zip(&out.mask) {
            if *m {
                *c = geometry::apply(r, *c);
            }
        }
        out
    }

    /// C4′ trace with its mask.
    pub fn c4_trace(&self) -> (Vec<Point>, Vec<bool>) {
        let k = self.atom_set.c4_index();
        (0..self.len()).map(|i| (self.atom(i, k), self.atom_mask(i, k))).unzip()
    }

    /// Distances between all atom slots, unmasked or not.
    pub fn pairwise_distances(&self) -> Vec<f64> {
        geometry::pairwise_distances(&self.coords)
    }

    /// Restricts to `target`, which must be a subset of the current atom set.
    pub fn to_atom_set(&self, target: AtomSet) -> Result<RnaStructure> {
        if target == self.atom_set {
            return Ok(self.clone());
        }
        let mut coords = Vec::with_capacity(self.len() * target.len());
        let mut mask = Vec::with_capacity(coords.capacity());
        for (i, b) in self.sequence.iter().enumerate() {
            for name in target.names(*b) {
                let slot = self
                    .atom_set
                    .slot(name, *b)
                    .ok_or_else(|| Error::Structure(format!("{} has no atom {name}", self.atom_set)))?;
                coords.push(self.atom(i, slot));
                mask.push(self.atom_mask(i, slot));
            }
        }
        RnaStructure::new(self.id.clone(), self.chain_id.clone(), self.sequence.clone(), target, coords, mask)
    }

    /// Contiguous residue window `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<RnaStructure> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Structure(format!("window {start}+{len} outside L={}", self.len())));
        }
        let a = self.atom_set.len();
        RnaStructure::new(
            format!("{}:{start}-{}", self.id, start + len),
            self.chain_id.clone(),
            self.sequence[start..start + len].to_vec(),
            self.atom_set,
            self.coords[start * a..(start + len) * a].to_vec(),
            self.mask[start * a..(start + len) * a].to_vec(),
        )
    }
}

/// Subtracts the masked-aware centroid.
pub fn mean_center(s: &RnaStructure) -> Result<RnaStructure> {
    let c = s.masked_centroid()?;
    Ok(s.translate(geometry::scale(c, -1.0)))
}

/// Applies a uniformly random rotation about the origin.
pub fn random_rotation<R: Rng + ?Sized>(s: &RnaStructure, rng: &mut R) -> RnaStructure {
    s.rotate(&geometry::random_rotation_matrix(rng))
}
