//! Per-residue local frames and directional vectors from the B6 backbone.

use crate::error::{Error, Result};
use crate::geometry::{self, Point};
use crate::structure::{AtomSet, Base, RnaStructure};

/// Vector channels per residue: three frame axes, the directions to the
/// previous and next C4′, and C4′→P, C4′→O5′, C4′→O3′.
pub const K_LOCAL: usize = 8;

const DEGENERATE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFrames {
    /// Row `i` holds the frame axes `[e1, e2, e3]` of residue `i`.
    pub frames: Vec<[Point; 3]>,
    /// Row-major `L × K_LOCAL × 3`.
    pub vectors: Vec<f64>,
    pub mask: Vec<bool>,
}

impl LocalFrames {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn vector(&self, i: usize, k: usize) -> Point {
        let o = (i * K_LOCAL + k) * 3;
        [self.vectors[o], self.vectors[o + 1], self.vectors[o + 2]]
    }
}

fn unit(v: Point) -> Option<Point> {
    let n = geometry::norm(v);
    (n > DEGENERATE).then(|| geometry::scale(v, 1.0 / n))
}

fn slot(name: &str) -> usize {
    AtomSet::B6.slot(name, Base::A).expect("B6 atom name")
}

/// Gram–Schmidt frames on `(C4′→C3′, C4′→C5′)`. Residues with missing or
/// collinear frame atoms get a zero frame, zero vectors and `mask = false`.
pub fn local_frames(s: &RnaStructure) -> Result<LocalFrames> {
    if s.atom_set != AtomSet::B6 {
        return Err(Error::Invalid(format!("local frames need the B6 atom set, got {}", s.atom_set)));
    }
    let (c4, c3, c5) = (slot("C4'"), slot("C3'"), slot("C5'"));
    let extra = [slot("P"), slot("O5'"), slot("O3'")];
    let l = s.len();
    let mut frames = vec![[[0.0; 3]; 3]; l];
    let mut vectors = vec![0.0; l * K_LOCAL * 3];
    let mut mask = vec![false; l];
    for i in 0..l {
        if !(s.atom_mask(i, c4) && s.atom_mask(i, c3) && s.atom_mask(i, c5)) {
            continue;
        }
        let o = s.atom(i, c4);
        let Some(e1) = unit(geometry::sub(s.atom(i, c3), o)) else {
            log::warn!("{}: residue {i} has coincident C4'/C3'; frame masked", s.id);
            continue;
        };
        let u = geometry::sub(s.atom(i, c5), o);
        let Some(e2) = unit(geometry::sub(u, geometry::scale(e1, geometry::dot(u, e1)))) else {
            log::warn!("{}: residue {i} has collinear frame atoms; frame masked", s.id);
            continue;
        };
        let e3 = geometry::cross(e1, e2);
        frames[i] = [e1, e2, e3];
        mask[i] = true;
        let mut ch: [Point; K_LOCAL] = [[0.0; 3]; K_LOCAL];
        ch[0] = e1;
        ch[1] = e2;
        ch[2] = e3;
        if i > 0 && s.atom_mask(i - 1, c4) {
            ch[3] = unit(geometry::sub(s.atom(i - 1, c4), o)).unwrap_or_default();
        }
        if i + 1 < l && s.atom_mask(i + 1, c4) {
            ch[4] = unit(geometry::sub(s.atom(i + 1, c4), o)).unwrap_or_default();
        }
        for (k, &a) in extra.iter().enumerate() {
            if s.atom_mask(i, a) {
                ch[5 + k] = unit(geometry::sub(s.atom(i, a), o)).unwrap_or_default();
            }
        }
        for (k, v) in ch.iter().enumerate() {
            vectors[(i * K_LOCAL + k) * 3..(i * K_LOCAL + k) * 3 + 3].copy_from_slice(v);
        }
    }
    Ok(LocalFrames { frames, vectors, mask })
}
