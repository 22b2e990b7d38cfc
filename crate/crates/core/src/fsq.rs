//! Finite scalar quantisation with a straight-through estimator.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use ribosphere_tensor::{Tape, Var};

use crate::error::{Error, Result};

/// Headroom on even levels so the shift `atanh(0.5 / half)` stays finite.
const EVEN_LEVEL_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsqConfig {
    levels: Vec<u32>,
}

impl FsqConfig {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("FSQ needs at least one level".into()));
        }
        if let Some(l) = levels.iter().find(|l| **l < 2) {
            return Err(Error::Config(format!("FSQ level {l} is below 2")));
        }
        let size = levels.iter().try_fold(1usize, |acc, l| acc.checked_mul(*l as usize));
        if size.is_none() {
            return Err(Error::Config("FSQ code space overflows".into()));
        }
        Ok(Self { levels })
    }

    pub fn preset_240() -> Self {
        Self::new(vec![8, 6, 5]).unwrap()
    }

    pub fn preset_1000() -> Self {
        Self::new(vec![8, 5, 5, 5]).unwrap()
    }

    pub fn preset_4375() -> Self {
        Self::new(vec![7, 5, 5, 5, 5]).unwrap()
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    /// Latent dimension `m`.
    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.levels.iter().map(|l| *l as usize).product()
    }

    fn half_width(l: u32) -> f64 {
        let h = (l as f64 - 1.0) / 2.0;
        if l % 2 == 0 {
            h * (1.0 + EVEN_LEVEL_EPS)
        } else {
            h
        }
    }

    fn offset(l: u32) -> f64 {
        if l % 2 == 0 {
            0.5
        } else {
            0.0
        }
    }

    fn shift(l: u32) -> f64 {
        (Self::offset(l) / Self::half_width(l)).atanh()
    }

    /// Integer value added to a rounded coordinate to obtain its digit.
    pub fn digit_shift(&self, i: usize) -> i64 {
        (self.levels[i] / 2) as i64
    }

    /// Mixed-radix index of a digit tuple, first dimension least significant.
    pub fn digits_to_index(&self, digits: &[u32]) -> Result<usize> {
        if digits.len() != self.dim() {
            return Err(Error::LengthMismatch(digits.len(), self.dim()));
        }
        let mut idx = 0usize;
        let mut radix = 1usize;
        for (d, l) in digits.iter().zip(&self.levels) {
            if d >= l {
                return Err(Error::Invalid(format!("digit {d} outside level {l}")));
            }
            idx += *d as usize * radix;
            radix *= *l as usize;
        }
        Ok(idx)
    }

    pub fn index_to_digits(&self, index: usize) -> Result<Vec<u32>> {
        if index >= self.codebook_size() {
            return Err(Error::Invalid(format!("index {index} outside code space {}", self.codebook_size())));
        }
        let mut rest = index;
        Ok(self
            .levels
            .iter()
            .map(|l| {
                let d = rest % *l as usize;
                rest /= *l as usize;
                d as u32
            })
            .collect())
    }

    /// Grid values `digit − ⌊l/2⌋` for a code index.
    pub fn index_to_quantized(&self, index: usize) -> Result<Vec<f64>> {
        Ok(self
            .index_to_digits(index)?
            .into_iter()
            .enumerate()
            .map(|(i, d)| (d as i64 - self.digit_shift(i)) as f64)
            .collect())
    }

    fn constants(&self, f: impl Fn(u32) -> f64) -> Vec<f64> {
        self.levels.iter().map(|l| f(*l)).collect()
    }
}

/// Bounds one coordinate for a level `l`:
/// `tanh(z + shift) · half − offset`.
pub fn bound_value(z: f64, l: u32) -> f64 {
    (z + FsqConfig::shift(l)).tanh() * FsqConfig::half_width(l) - FsqConfig::offset(l)
}

/// Differentiable bound over the trailing axis of `z` (size `m`).
pub fn bound(tape: &mut Tape, z: Var, cfg: &FsqConfig) -> Result<Var> {
    let m = cfg.dim();
    if tape.shape(z).last() != Some(&m) {
        return Err(Error::Invalid(format!("bound expects trailing dim {m}, got {:?}", tape.shape(z))));
    }
    let shift = tape.constant(vec![m], cfg.constants(FsqConfig::shift))?;
    let half = tape.constant(vec![m], cfg.constants(FsqConfig::half_width))?;
    let offset = tape.constant(vec![m], cfg.constants(FsqConfig::offset))?;
    let y = tape.add(z, shift)?;
    let y = tape.tanh(y)?;
    let y = tape.mul(y, half)?;
    Ok(tape.sub(y, offset)?)
}

/// Rounds bounded values (ties to even) with an identity backward.
pub fn quantize(tape: &mut Tape, bounded: Var) -> Result<Var> {
    Ok(tape.round_ste(bounded)?)
}

/// Per-residue code indices and the grid values that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub indices: Vec<usize>,
    /// Row-major `L × m`.
    pub quantized: Vec<f64>,
    pub levels: FsqConfig,
}

impl TokenSequence {
    /// Quantises bounded values (row-major `L × m`).
    pub fn from_bounded(bounded: &[f64], cfg: &FsqConfig) -> Result<Self> {
        let m = cfg.dim();
        if bounded.is_empty() || bounded.len() % m != 0 {
            return Err(Error::Invalid(format!("{} values do not form rows of {m}", bounded.len())));
        }
        let quantized: Vec<f64> = bounded.iter().map(|v| v.round_ties_even()).collect();
        let indices = quantized
            .chunks(m)
            .map(|row| {
                let digits = row
                    .iter()
                    .enumerate()
                    .map(|(i, q)| {
                        let d = *q as i64 + cfg.digit_shift(i);
                        u32::try_from(d)
                            .ok()
                            .filter(|d| *d < cfg.levels[i])
                            .ok_or_else(|| Error::Invalid(format!("value {q} off the grid for level {}", cfg.levels[i])))
                    })
                    .collect::<Result<Vec<_>>>()?;
                cfg.digits_to_index(&digits)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            indices,
            quantized,
            levels: cfg.clone(),
        })
    }

    pub fn from_indices(indices: Vec<usize>, cfg: &FsqConfig) -> Result<Self> {
        let mut quantized = Vec::with_capacity(indices.len() * cfg.dim());
        for i in &indices {
            quantized.extend(cfg.index_to_quantized(*i)?);
        }
        Ok(Self {
            indices,
            quantized,
            levels: cfg.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Fraction of the code space observed at least once.
pub fn utilization(tokens: &[TokenSequence], cfg: &FsqConfig) -> Result<f64> {
    let seen: BTreeSet<usize> = tokens.iter().flat_map(|t| t.indices.iter().copied()).collect();
    if seen.is_empty() {
        return Err(Error::Invalid("utilization of an empty token set".into()));
    }
    Ok(seen.len() as f64 / cfg.codebook_size() as f64)
}

/// Percentage with one decimal, e.g. `39.8`.
pub fn format_utilization(fraction: f64) -> String {
    format!("{:.1}", 100.0 * fraction)
}

/// One token record in the line-delimited token file.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub id: String,
    pub indices: Vec<usize>,
}

pub const TOKEN_FILE_HEADER: &str = "#id\tlength\tlevels\tindices";

/// Token file: a header line then `id<TAB>L<TAB>l1,l2,..<TAB>i1 i2 ..` per record.
pub fn write_token_file(records: &[TokenRecord], cfg: &FsqConfig) -> String {
    let levels = cfg.levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
    let mut out = String::new();
    let _ = writeln!(out, "{TOKEN_FILE_HEADER}");
    for r in records {
        let idx = r.indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.id, r.indices.len(), levels, idx);
    }
    out
}

/// Parses a token file; returns the records and the level tuple (if any records).
pub fn read_token_file(text: &str) -> Result<(Vec<TokenRecord>, Option<FsqConfig>)> {
    let mut records = Vec::new();
    let mut cfg: Option<FsqConfig> = None;
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Format(format!("token file line {}: {msg}", n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad("expected 4 tab-separated columns"));
        }
        let len: usize = cols[1].parse().map_err(|_| bad("bad length"))?;
        let levels = cols[2]
            .split(',')
            .map(|s| s.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad levels"))?;
        let levels = FsqConfig::new(levels)?;
        match &cfg {
            Some(c) if *c != levels => return Err(bad("levels differ between records")),
            _ => cfg = Some(levels.clone()),
        }
        let indices = cols[3]
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad index"))?;
        if indices.len() != len {
            return Err(bad("length column disagrees with index count"));
        }
        if let Some(i) = indices.iter().find(|i| **i >= levels.codebook_size()) {
            return Err(bad(&format!("index {i} outside code space")));
        }
        records.push(TokenRecord {
            id: cols[0].to_string(),
            indices,
        });
    }
    Ok((records, cfg))
}
