//! Per-structure reconstruction metrics and their summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::structure::RnaStructure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub length: usize,
    pub rmsd_all_atom: f64,
    pub rmsd_c4: f64,
    pub tm_score: f64,
    pub lddt: f64,
}

impl MetricsRow {
    pub fn compute(pred: &RnaStructure, reference: &RnaStructure) -> Result<Self> {
        Ok(Self {
            id: reference.id.clone(),
            length: reference.len(),
            rmsd_all_atom: metrics::rmsd_all_atom(pred, reference)?,
            rmsd_c4: metrics::rmsd_c4(pred, reference)?,
            tm_score: metrics::tm_score(pred, reference)?,
            lddt: metrics::lddt(pred, reference)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("summary of no values".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Ok(Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub rmsd_all_atom: Summary,
    pub rmsd_c4: Summary,
    pub tm_score: Summary,
    pub lddt: Summary,
}

impl MetricsReport {
    pub fn new(rows: Vec<MetricsRow>) -> Result<Self> {
        let col = |f: fn(&MetricsRow) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            rmsd_all_atom: col(|r| r.rmsd_all_atom)?,
            rmsd_c4: col(|r| r.rmsd_c4)?,
            tm_score: col(|r| r.tm_score)?,
            lddt: col(|r| r.lddt)?,
            rows,
        })
    }

    pub const HEADER: &'static str = "id\tlength\trmsd_all_atom\trmsd_c4\ttm_score\tlddt";

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.id, r.length, r.rmsd_all_atom, r.rmsd_c4, r.tm_score, r.lddt
            ));
        }
        for (name, pick) in [("#mean", 0), ("#median", 1)] {
            let g = |s: Summary| if pick == 0 { s.mean } else { s.median };
            out.push_str(&format!(
                "{name}\t\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                g(self.rmsd_all_atom),
                g(self.rmsd_c4),
                g(self.tm_score),
                g(self.lddt)
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::AtomSet;
    use crate::synth::synth_helix;
    use ribosphere_tensor::rng::seeded;

    #[test]
    fn identical_pair() {
        let s = synth_helix(20, 32.7, 2.81, AtomSet::A10, &mut seeded(2)).unwrap();
        let r = MetricsRow::compute(&s, &s).unwrap();
        assert!(r.rmsd_all_atom < 1e-6 && r.rmsd_c4 < 1e-6);
        assert!((r.tm_score - 1.0).abs() < 1e-12);
        assert_eq!(r.lddt, 1.0);
        let rep = MetricsReport::new(vec![r]).unwrap();
        assert!(rep.to_tsv().starts_with(MetricsReport::HEADER));
        let back: MetricsReport = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn summaries() {
        let s = Summary::of(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.mean, 4.0);
        assert!(Summary::of(&[]).is_err());
    }
}
