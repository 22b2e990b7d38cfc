//! Deterministic hash split of a corpus by structure id.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::structure::RnaStructure;

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<RnaStructure>,
    pub val: Vec<RnaStructure>,
    pub test: Vec<RnaStructure>,
}

/// Maps `(seed, id)` to a point in [0, 1).
pub fn hash_unit(seed: u64, id: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().unwrap());
    (v >> 11) as f64 / (1u64 << 53) as f64
}

pub fn split_dataset(corpus: &[RnaStructure], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot split an empty corpus".into()));
    }
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    // Rank by hash and cut at rounded cumulative fractions, so sizes are
    // exact up to rounding while membership stays a function of (seed, id).
    let n = corpus.len();
    let mut order: Vec<(f64, &str, usize)> = corpus.iter().enumerate().map(|(i, s)| (hash_unit(seed, &s.id), s.id.as_str(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (((fractions[0] + fractions[1]) * n as f64).round() as usize).max(n_train).min(n) - n_train;
    let mut bucket = vec![2u8; n];
    for (rank, (_, _, i)) in order.iter().enumerate() {
        bucket[*i] = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
    }
    let mut out = Split::default();
    for (s, b) in corpus.iter().zip(bucket) {
        match b {
            0 => out.train.push(s.clone()),
            1 => out.val.push(s.clone()),
            _ => out.test.push(s.clone()),
        }
    }
    Ok(out)
}
