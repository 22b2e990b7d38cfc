//! Codebook interpretability: token n-gram mining, geometric consistency of
//! n-gram instances, motif annotation and token-distribution divergences.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry;
use crate::metrics;
use crate::structure::{AtomSet, RnaStructure};

pub const DEFAULT_TOP_K: usize = 20;
pub const LAPLACE_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramCount {
    pub ngram: Vec<usize>,
    pub count: usize,
    /// `(sequence index, start)` of every occurrence, in corpus order.
    pub occurrences: Vec<(usize, usize)>,
}

/// Counts every overlapping `n`-gram, ranked by count (descending) then by
/// the n-gram itself (lexicographic).
pub fn mine_ngrams(corpus: &[Vec<usize>], n: usize) -> Result<Vec<NgramCount>> {
    if n == 0 {
        return Err(Error::Invalid("n-gram length must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Invalid("n-gram mining over an empty corpus".into()));
    }
    if corpus.iter().all(|s| s.len() < n) {
        return Err(Error::Invalid(format!("n = {n} exceeds every sequence length")));
    }
    let mut table: HashMap<&[usize], Vec<(usize, usize)>> = HashMap::new();
    for (si, seq) in corpus.iter().enumerate() {
        for (start, w) in seq.windows(n).enumerate() {
            table.entry(w).or_default().push((si, start));
        }
    }
    let mut out: Vec<NgramCount> = table
        .into_iter()
        .map(|(k, occ)| NgramCount {
            ngram: k.to_vec(),
            count: occ.len(),
            occurrences: occ,
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.ngram.cmp(&b.ngram)));
    Ok(out)
}

/// One occurrence of an n-gram together with the residues it covers.
#[derive(Debug, Clone)]
pub struct NgramInstance {
    pub structure_id: String,
    pub start: usize,
    pub n: usize,
    pub tokens: Vec<usize>,
    pub window: RnaStructure,
}

/// Materialises the occurrences of `ngram` against the structures that the
/// token sequences were computed from (same order as the mined corpus).
pub fn ngram_instances(ngram: &NgramCount, tokens: &[Vec<usize>], structures: &[RnaStructure]) -> Result<Vec<NgramInstance>> {
    if tokens.len() != structures.len() {
        return Err(Error::LengthMismatch(tokens.len(), structures.len()));
    }
    let n = ngram.ngram.len();
    ngram
        .occurrences
        .iter()
        .map(|&(si, start)| {
            let s = &structures[si];
            if tokens[si].len() != s.len() {
                return Err(Error::LengthMismatch(tokens[si].len(), s.len()));
            }
            Ok(NgramInstance {
                structure_id: s.id.clone(),
                start,
                n,
                tokens: tokens[si][start..start + n].to_vec(),
                window: s.window(start, n)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consistency {
    pub mean_rmsd: f64,
    /// Symmetric `k × k` matrix of aligned C4′ RMSDs.
    pub matrix: Vec<f64>,
    pub instances: usize,
}

/// Mean pairwise Kabsch RMSD between C4′ traces of the instances.
pub fn ngram_consistency(instances: &[NgramInstance]) -> Result<Consistency> {
    let k = instances.len();
    if k < 2 {
        return Err(Error::Invalid("consistency needs at least two instances".into()));
    }
    let n = instances[0].n;
    if instances.iter().any(|i| i.n != n) {
        return Err(Error::Invalid("instances have different n".into()));
    }
    let traces: Vec<_> = instances.iter().map(|i| i.window.c4_trace().0).collect();
    let mut matrix = vec![0.0; k * k];
    let (mut sum, mut pairs) = (0.0, 0usize);
    for a in 0..k {
        for b in a + 1..k {
            let r = metrics::rmsd(&traces[a], &traces[b], true)?;
            matrix[a * k + b] = r;
            matrix[b * k + a] = r;
            sum += r;
            pairs += 1;
        }
    }
    Ok(Consistency {
        mean_rmsd: sum / pairs as f64,
        matrix,
        instances: k,
    })
}

/// Normalised token histogram with additive smoothing `alpha` on every code.
pub fn token_distribution(tokens: &[usize], codebook_size: usize, alpha: f64) -> Result<Vec<f64>> {
    if codebook_size == 0 {
        return Err(Error::Invalid("empty code space".into()));
    }
    let mut counts = vec![alpha; codebook_size];
    for t in tokens {
        *counts
            .get_mut(*t)
            .ok_or_else(|| Error::Invalid(format!("token {t} outside code space {codebook_size}")))? += 1.0;
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::Invalid("distribution has no mass".into()));
    }
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// `KL(p ‖ q)` in nats. Terms with `p_i = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    if p.is_empty() {
        return Err(Error::Invalid("empty distributions".into()));
    }
    let mut kl = 0.0;
    for (a, b) in p.iter().zip(q) {
        if *a > 0.0 {
            if *b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl)
}

/// KL of the Laplace-smoothed motif token distribution against the
/// background distribution.
pub fn motif_kl(motif_tokens: &[usize], background_tokens: &[usize], codebook_size: usize) -> Result<f64> {
    if motif_tokens.is_empty() {
        return Err(Error::Invalid("empty motif token set".into()));
    }
    let p = token_distribution(motif_tokens, codebook_size, LAPLACE_ALPHA)?;
    let q = token_distribution(background_tokens, codebook_size, LAPLACE_ALPHA)?;
    kl_divergence(&p, &q)
}

/// Jensen–Shannon divergence in nats, bounded by ln 2.
pub fn js_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Invalid("empty distributions".into()));
    }
    let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    Ok(0.5 * kl_divergence(a, &m)? + 0.5 * kl_divergence(b, &m)?)
}

pub fn js_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(js_divergence(a, b)?.max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MotifClass {
    HL,
    IL,
    J3,
    Background,
}

impl MotifClass {
    pub const ALL: [MotifClass; 4] = [MotifClass::HL, MotifClass::IL, MotifClass::J3, MotifClass::Background];
}

impl fmt::Display for MotifClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MotifClass::HL => "HL",
            MotifClass::IL => "IL",
            MotifClass::J3 => "J3",
            MotifClass::Background => "background",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifAnnotation {
    pub structure_id: String,
    /// Loop nucleotides plus the nucleotides of the pairs closing the loop.
    pub residues: Vec<usize>,
    pub class: MotifClass,
    /// Unpaired nucleotides inside the loop.
    pub loop_size: usize,
}

impl MotifAnnotation {
    pub fn range(&self) -> (usize, usize) {
        (self.residues[0], *self.residues.last().unwrap())
    }
}

/// Base pairs `(i, j)`, `i < j`, from a dot-bracket string. `()`, `[]`,
/// `{}` and `<>` are all accepted.
pub fn parse_dot_bracket(s: &str) -> Result<Vec<(usize, usize)>> {
    const OPEN: [char; 4] = ['(', '[', '{', '<'];
    const CLOSE: [char; 4] = [')', ']', '}', '>'];
    let mut stacks: [Vec<usize>; 4] = Default::default();
    let mut pairs = Vec::new();
    for (i, c) in s.chars().enumerate() {
        if let Some(k) = OPEN.iter().position(|o| *o == c) {
            stacks[k].push(i);
        } else if let Some(k) = CLOSE.iter().position(|o| *o == c) {
            let j = stacks[k].pop().ok_or_else(|| Error::Format(format!("unbalanced `{c}` at {i}")))?;
            pairs.push((j, i));
        } else if c != '.' && c != '-' && c != ',' && c != ':' {
            return Err(Error::Format(format!("unexpected dot-bracket character `{c}` at {i}")));
        }
    }
    if stacks.iter().any(|s| !s.is_empty()) {
        return Err(Error::Format("unclosed bracket in dot-bracket string".into()));
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Drops pairs that cross an earlier pair, keeping the first of each conflict.
pub fn remove_pseudoknots(pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for &(i, j) in pairs {
        if kept.iter().all(|&(a, b)| !((a < i && i < b && b < j) || (i < a && a < j && j < b))) {
            kept.push((i, j));
        }
    }
    kept.sort_unstable();
    kept
}

fn validate_pairs(l: usize, pairs: &[(usize, usize)]) -> Result<Vec<Option<usize>>> {
    let mut partner = vec![None; l];
    for &(i, j) in pairs {
        if i >= l || j >= l {
            return Err(Error::Invalid(format!("pair ({i}, {j}) outside chain of length {l}")));
        }
        if i == j {
            return Err(Error::Invalid(format!("residue {i} paired with itself")));
        }
        if partner[i].is_some() || partner[j].is_some() {
            return Err(Error::Invalid(format!("pair ({i}, {j}) reuses a paired residue")));
        }
        partner[i] = Some(j);
        partner[j] = Some(i);
    }
    Ok(partner)
}

/// Classifies the loops closed by each base pair: no inner helix is a hairpin,
/// one inner helix with unpaired nucleotides an internal loop, two inner
/// helices a three-way junction. Pseudoknotted pairs are ignored.
pub fn annotate_motifs(s: &RnaStructure, pairs: &[(usize, usize)]) -> Result<Vec<MotifAnnotation>> {
    annotate_length(&s.id, s.len(), pairs)
}

pub fn annotate_length(id: &str, l: usize, pairs: &[(usize, usize)]) -> Result<Vec<MotifAnnotation>> {
    let ordered: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    validate_pairs(l, &ordered)?;
    let nested = remove_pseudoknots(&ordered);
    let partner = validate_pairs(l, &nested)?;
    let mut out = Vec::new();
    for &(i, j) in &nested {
        let mut residues = vec![i];
        let mut branches = 0;
        let mut unpaired = 0;
        let mut k = i + 1;
        while k < j {
            match partner[k] {
                Some(p) if p > k && p < j => {
                    branches += 1;
                    residues.push(k);
                    residues.push(p);
                    k = p + 1;
                }
                _ => {
                    unpaired += 1;
                    residues.push(k);
                    k += 1;
                }
            }
        }
        residues.push(j);
        let class = match (branches, unpaired) {
            (0, _) => MotifClass::HL,
            (1, 0) => continue,
            (1, _) => MotifClass::IL,
            (2, _) => MotifClass::J3,
            _ => continue,
        };
        residues.sort_unstable();
        out.push(MotifAnnotation {
            structure_id: id.to_string(),
            residues,
            class,
            loop_size: unpaired,
        });
    }
    Ok(out)
}

/// Per-residue class; residues in several motifs take the first listed.
pub fn residue_classes(l: usize, annotations: &[MotifAnnotation]) -> Vec<MotifClass> {
    let mut out = vec![MotifClass::Background; l];
    for a in annotations {
        for &r in &a.residues {
            if r < l && out[r] == MotifClass::Background {
                out[r] = a.class;
            }
        }
    }
    out
}

/// C1′–C1′ window accepted as a base pair by [`heuristic_pairs`].
pub const HEURISTIC_C1_RANGE: (f64, f64) = (9.5, 11.5);
const HEURISTIC_C1_TARGET: f64 = 10.5;
const MIN_HAIRPIN_LOOP: usize = 3;

/// Fallback pairing from C1′ distances: greedy by closeness to 10.5 Å,
/// minimum hairpin loop of 3, pseudoknots removed.
pub fn heuristic_pairs(s: &RnaStructure) -> Result<Vec<(usize, usize)>> {
    if !matches!(s.atom_set, AtomSet::A10 | AtomSet::A11) {
        return Err(Error::Invalid(format!("heuristic pairing needs C1' atoms, {} has none", s.atom_set)));
    }
    let slot = s.atom_set.slot("C1'", crate::structure::Base::A).expect("A10 has C1'");
    let l = s.len();
    let mut cands = Vec::new();
    for i in 0..l {
        for j in i + MIN_HAIRPIN_LOOP + 1..l {
            if !(s.atom_mask(i, slot) && s.atom_mask(j, slot)) {
                continue;
            }
            let d = geometry::dist(s.atom(i, slot), s.atom(j, slot));
            if (HEURISTIC_C1_RANGE.0..=HEURISTIC_C1_RANGE.1).contains(&d) {
                cands.push(((d - HEURISTIC_C1_TARGET).abs(), i, j));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; l];
    let mut accepted = Vec::new();
    for (_, i, j) in cands {
        if !used[i] && !used[j] {
            used[i] = true;
            used[j] = true;
            accepted.push((i, j));
        }
    }
    Ok(remove_pseudoknots(&accepted))
}

/// Reads `id<whitespace>dot-bracket` lines; `#` starts a comment.
pub fn read_dot_bracket_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(id), Some(db), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Format(format!("dot-bracket line {}: expected `id structure`", n + 1)));
        };
        out.insert(id.to_string(), db.to_string());
    }
    Ok(out)
}
