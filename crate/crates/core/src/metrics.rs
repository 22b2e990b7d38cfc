//! Structure and sequence evaluation metrics.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{self, Point};
use crate::structure::{Base, RnaStructure};

pub const LDDT_CUTOFF: f64 = 15.0;
pub const LDDT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const TM_D0_MIN: f64 = 0.5;

/// Rigid transform taking mobile coordinates onto the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Point,
    pub pairs: Vec<usize>,
}

impl Alignment {
    pub fn apply(&self, p: Point) -> Point {
        geometry::add(geometry::apply(&self.rotation, p), self.translation)
    }

    pub fn apply_all(&self, pts: &[Point]) -> Vec<Point> {
        pts.iter().map(|p| self.apply(*p)).collect()
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(a, b));
    }
    Ok(())
}

/// Least-squares superposition of `mobile` onto `reference` (SVD with
/// reflection correction).
pub fn kabsch_align(mobile: &[Point], reference: &[Point]) -> Result<Alignment> {
    check_lengths(mobile.len(), reference.len())?;
    let n = mobile.len();
    if n < 3 {
        return Err(Error::Invalid(format!("superposition needs at least 3 points, got {n}")));
    }
    let cm = geometry::centroid(mobile);
    let cr = geometry::centroid(reference);
    let mut h = Matrix3::zeros();
    for (m, r) in mobile.iter().zip(reference) {
        let a = geometry::sub(*m, cm);
        let b = geometry::sub(*r, cr);
        h += Vector3::from(a) * Vector3::from(b).transpose();
    }
    let svd = h.svd(true, true);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0] <= 0.0 || s[1] <= 1e-12 * s[0] {
        return Err(Error::Degenerate("point sets are collinear or coincident (rank < 2)".into()));
    }
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested V^T").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * fix * u.transpose();
    let translation = geometry::sub(cr, geometry::apply(&rotation, cm));
    Ok(Alignment {
        rotation,
        translation,
        pairs: (0..n).collect(),
    })
}

/// Root-mean-square deviation, optionally after superposition of `a` onto `b`.
pub fn rmsd(a: &[Point], b: &[Point], align: bool) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Invalid("rmsd of zero points".into()));
    }
    let moved;
    let a = if align {
        moved = kabsch_align(a, b)?.apply_all(a);
        &moved
    } else {
        a
    };
    let ss: f64 = a.iter().zip(b).map(|(p, q)| geometry::dot(geometry::sub(*p, *q), geometry::sub(*p, *q))).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Paired coordinates of atoms observed in both structures.
pub fn observed_pairs(pred: &RnaStructure, reference: &RnaStructure) -> Result<(Vec<Point>, Vec<Point>)> {
    check_lengths(pred.coords.len(), reference.coords.len())?;
    Ok(pred
        .coords
        .iter()
        .zip(&reference.coords)
        .zip(pred.mask.iter().zip(&reference.mask))
        .filter(|(_, (a, b))| **a && **b)
        .map(|((p, r), _)| (*p, *r))
        .unzip())
}

/// Aligned RMSD over all observed atoms of the atom set.
pub fn rmsd_all_atom(pred: &RnaStructure, reference: &RnaStructure) -> Result<f64> {
    let (p, r) = observed_pairs(pred, reference)?;
    rmsd(&p, &r, true)
}

fn c4_pairs(pred: &RnaStructure, reference: &RnaStructure) -> Result<(Vec<Point>, Vec<Point>)> {
    check_lengths(pred.len(), reference.len())?;
    let (pc, pm) = pred.c4_trace();
    let (rc, rm) = reference.c4_trace();
    Ok(pc
        .into_iter()
        .zip(rc)
        .zip(pm.into_iter().zip(rm))
        .filter(|(_, (a, b))| *a && *b)
        .map(|(pr, _)| pr)
        .unzip())
}

/// Aligned RMSD over C4′ atoms.
pub fn rmsd_c4(pred: &RnaStructure, reference: &RnaStructure) -> Result<f64> {
    let (p, r) = c4_pairs(pred, reference)?;
    rmsd(&p, &r, true)
}

/// Length-dependent TM-score distance scale, clamped below at 0.5 Å.
///
/// Evaluated in hundredths so exact cubes give the correctly rounded decimal.
pub fn tm_d0(l: usize) -> f64 {
    ((124.0 * (l as f64 - 15.0).cbrt() - 180.0) / 100.0).max(TM_D0_MIN)
}

fn tm_sum(moved: &[Point], reference: &[Point], d0: f64) -> f64 {
    moved
        .iter()
        .zip(reference)
        .map(|(p, q)| {
            let d = geometry::dist(*p, *q);
            1.0 / (1.0 + (d / d0) * (d / d0))
        })
        .sum()
}

/// TM-score of paired points, maximised over superpositions fitted on
/// contiguous fragments of length L, L/2 and L/4 at every offset.
pub fn tm_score_points(pred: &[Point], reference: &[Point]) -> Result<f64> {
    check_lengths(pred.len(), reference.len())?;
    let l = pred.len();
    if l == 0 {
        return Err(Error::Invalid("tm-score of zero residues".into()));
    }
    let d0 = tm_d0(l);
    let mut best = tm_sum(pred, reference, d0) / l as f64;
    let mut lens = vec![l, l / 2, l / 4];
    lens.dedup();
    for len in lens.into_iter().filter(|n| *n >= 3) {
        for start in 0..=(l - len) {
            let Ok(a) = kabsch_align(&pred[start..start + len], &reference[start..start + len]) else {
                continue;
            };
            let moved = a.apply_all(pred);
            best = best.max(tm_sum(&moved, reference, d0) / l as f64);
        }
    }
    Ok(best)
}

/// TM-score on C4′ atoms observed in both structures.
pub fn tm_score(pred: &RnaStructure, reference: &RnaStructure) -> Result<f64> {
    let (p, r) = c4_pairs(pred, reference)?;
    tm_score_points(&p, &r)
}

/// Per-pair lDDT tallies: `(passed threshold checks, qualifying pairs)`
/// accumulated per atom.
fn lddt_counts(pred: &[Point], reference: &[Point], residue_of: &[usize]) -> (Vec<(usize, usize)>, usize, usize) {
    let n = pred.len();
    let mut per_atom = vec![(0usize, 0usize); n];
    let (mut pass, mut pairs) = (0, 0);
    for i in 0..n {
        for j in i + 1..n {
            if residue_of[i] == residue_of[j] {
                continue;
            }
            let dr = geometry::dist(reference[i], reference[j]);
            if dr >= LDDT_CUTOFF {
                continue;
            }
            let dev = (geometry::dist(pred[i], pred[j]) - dr).abs();
            let ok = LDDT_THRESHOLDS.iter().filter(|t| dev < **t).count();
            pass += ok;
            pairs += 1;
            for k in [i, j] {
                per_atom[k].0 += ok;
                per_atom[k].1 += 1;
            }
        }
    }
    (per_atom, pass, pairs)
}

/// Superposition-free lDDT over inter-residue pairs within the cutoff in
/// the reference.
pub fn lddt_points(pred: &[Point], reference: &[Point], residue_of: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), reference.len())?;
    check_lengths(pred.len(), residue_of.len())?;
    let (_, pass, pairs) = lddt_counts(pred, reference, residue_of);
    if pairs == 0 {
        return Err(Error::Invalid("lddt: no qualifying atom pairs".into()));
    }
    Ok(pass as f64 / (LDDT_THRESHOLDS.len() * pairs) as f64)
}

fn observed_with_residue(pred: &RnaStructure, reference: &RnaStructure) -> Result<(Vec<Point>, Vec<Point>, Vec<usize>)> {
    check_lengths(pred.coords.len(), reference.coords.len())?;
    let a = reference.atoms_per_residue();
    let mut p = Vec::new();
    let mut r = Vec::new();
    let mut res = Vec::new();
    for k in 0..pred.coords.len() {
        if pred.mask[k] && reference.mask[k] {
            p.push(pred.coords[k]);
            r.push(reference.coords[k]);
            res.push(k / a);
        }
    }
    Ok((p, r, res))
}

pub fn lddt(pred: &RnaStructure, reference: &RnaStructure) -> Result<f64> {
    let (p, r, res) = observed_with_residue(pred, reference)?;
    lddt_points(&p, &r, &res)
}

/// Per-residue lDDT over pairs touching that residue; `None` when a residue
/// has no qualifying pair.
pub fn lddt_per_residue(pred: &RnaStructure, reference: &RnaStructure) -> Result<Vec<Option<f64>>> {
    let (p, r, res) = observed_with_residue(pred, reference)?;
    let (per_atom, _, _) = lddt_counts(&p, &r, &res);
    let mut acc = vec![(0usize, 0usize); reference.len()];
    for (k, (ok, n)) in per_atom.into_iter().enumerate() {
        acc[res[k]].0 += ok;
        acc[res[k]].1 += n;
    }
    Ok(acc
        .into_iter()
        .map(|(ok, n)| (n > 0).then(|| ok as f64 / (LDDT_THRESHOLDS.len() * n) as f64))
        .collect())
}

pub fn recovery(pred: &[Base], truth: &[Base]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    if truth.is_empty() {
        return Err(Error::Invalid("recovery of empty sequences".into()));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

/// Overlapping 3-mer frequencies, normalised by `L − 2`.
pub fn kmer3_profile(seq: &[Base]) -> Result<[f64; 64]> {
    if seq.len() < 3 {
        return Err(Error::Invalid(format!("3-mer profile needs length >= 3, got {}", seq.len())));
    }
    let mut v = [0.0; 64];
    for w in seq.windows(3) {
        v[w[0].index() * 16 + w[1].index() * 4 + w[2].index()] += 1.0;
    }
    let n = (seq.len() - 2) as f64;
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

fn pearson(a: &[f64; 64], b: &[f64; 64]) -> Option<f64> {
    let ma = a.iter().sum::<f64>() / 64.0;
    let mb = b.iter().sum::<f64>() / 64.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// One minus the mean Pearson correlation of 3-mer profiles over distinct pairs.
pub fn diversity_3mer(seqs: &[Vec<Base>]) -> Result<f64> {
    if seqs.len() < 2 {
        return Err(Error::Invalid("diversity needs at least two sequences".into()));
    }
    let profiles = seqs.iter().map(|s| kmer3_profile(s)).collect::<Result<Vec<_>>>()?;
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            match pearson(&profiles[i], &profiles[j]) {
                Some(r) => {
                    sum += r;
                    count += 1;
                }
                None => log::warn!("diversity: constant 3-mer profile in pair ({i}, {j}); skipped"),
            }
        }
    }
    if count == 0 {
        return Err(Error::Invalid("diversity: no pair has a defined correlation".into()));
    }
    Ok(1.0 - sum / count as f64)
}

/// Area under the ROC curve via the Mann–Whitney statistic with midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("auroc: NaN score".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("auroc needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}
