//! Reading and writing the ATOM/MODEL/TER subset of the PDB format.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::structure::{AtomSet, Base, RnaStructure};

const AMINO_ACIDS: [&str; 22] = [
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS", "MET", "PHE", "PRO", "SER",
    "THR", "TRP", "TYR", "VAL", "SEC", "PYL",
];

fn residue_base(name: &str) -> Option<Base> {
    match name {
        "A" | "RA" | "ADE" => Some(Base::A),
        "U" | "RU" | "URA" => Some(Base::U),
        "C" | "RC" | "CYT" => Some(Base::C),
        "G" | "RG" | "GUA" => Some(Base::G),
        _ => None,
    }
}

fn is_silently_skipped(name: &str) -> bool {
    matches!(name, "HOH" | "WAT" | "DOD") || AMINO_ACIDS.contains(&name)
}

fn field(line: &str, start: usize, end: usize) -> &str {
    let end = end.min(line.len());
    if start >= end {
        ""
    } else {
        line.get(start..end).unwrap_or("")
    }
}

fn coord(line: &str, start: usize, lineno: usize, axis: char) -> Result<f64> {
    let raw = field(line, start, start + 8).trim();
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Pdb {
            line: lineno,
            msg: format!("malformed {axis} coordinate `{raw}`"),
        })
}

struct Residue {
    key: (String, String),
    base: Base,
    slots: Vec<Option<Point>>,
}

struct Chain {
    model: usize,
    chain: String,
    residues: Vec<Residue>,
    index: HashMap<(String, String), usize>,
}

/// Parses PDB text. The id prefix comes from the HEADER idCode, or `rna`.
pub fn parse_pdb(text: &str, atom_set: AtomSet) -> Result<Vec<RnaStructure>> {
    let prefix = text
        .lines()
        .find(|l| l.starts_with("HEADER"))
        .map(|l| field(l, 62, 66).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "rna".to_string());
    parse_pdb_with_prefix(text, atom_set, &prefix)
}

/// Parses PDB text, naming structures `{prefix}_{chain}` (or
/// `{prefix}_{chain}_m{model}` when several MODEL blocks are present).
pub fn parse_pdb_with_prefix(text: &str, atom_set: AtomSet, prefix: &str) -> Result<Vec<RnaStructure>> {
    let mut chains: Vec<Chain> = Vec::new();
    let mut chain_index: HashMap<(usize, String), usize> = HashMap::new();
    let mut model = 1usize;
    let mut models_seen = 0usize;
    let mut warned: HashMap<String, ()> = HashMap::new();

    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.starts_with("MODEL") {
            models_seen += 1;
            model = field(line, 10, 14).trim().parse().unwrap_or(models_seen);
            continue;
        }
        if !line.starts_with("ATOM  ") {
            continue;
        }
        let alt = field(line, 16, 17);
        if !(alt.is_empty() || alt == " " || alt == "A") {
            continue;
        }
        let res_name = field(line, 17, 20).trim();
        let chain_id = match field(line, 21, 22).trim() {
            "" => "_".to_string(),
            c => c.to_string(),
        };
        let res_seq = field(line, 22, 26).trim().to_string();
        let icode = field(line, 26, 27).trim().to_string();
        let base = match residue_base(res_name) {
            Some(b) => b,
            None => {
                if !is_silently_skipped(res_name) {
                    let tag = format!("{chain_id}:{res_name}{res_seq}{icode}");
                    if warned.insert(tag.clone(), ()).is_none() {
                        log::warn!("line {lineno}: dropping residue {tag} with unknown base");
                    }
                }
                continue;
            }
        };
        let atom_name = field(line, 12, 16).trim().replace('*', "'");
        let x = coord(line, 30, lineno, 'x')?;
        let y = coord(line, 38, lineno, 'y')?;
        let z = coord(line, 46, lineno, 'z')?;

        let ci = *chain_index.entry((model, chain_id.clone())).or_insert_with(|| {
            chains.push(Chain {
                model,
                chain: chain_id.clone(),
                residues: Vec::new(),
                index: HashMap::new(),
            });
            chains.len() - 1
        });
        let chain = &mut chains[ci];
        let key = (res_seq.clone(), icode.clone());
        let ri = match chain.index.get(&key) {
            Some(&i) => i,
            None => {
                chain.residues.push(Residue {
                    key: key.clone(),
                    base,
                    slots: vec![None; atom_set.len()],
                });
                chain.index.insert(key, chain.residues.len() - 1);
                chain.residues.len() - 1
            }
        };
        let residue = &mut chain.residues[ri];
        if let Some(slot) = atom_set.slot(&atom_name, residue.base) {
            if residue.slots[slot].is_some() {
                return Err(Error::DuplicateAtom {
                    line: lineno,
                    residue: format!("{}:{}{}", chain_id, residue.key.0, residue.key.1),
                    atom: atom_name,
                });
            }
            residue.slots[slot] = Some([x, y, z]);
        }
    }

    let multi_model = chains.iter().map(|c| c.model).collect::<std::collections::BTreeSet<_>>().len() > 1;
    let mut out = Vec::new();
    for c in chains {
        if c.residues.is_empty() {
            continue;
        }
        let id = if multi_model {
            format!("{prefix}_{}_m{}", c.chain, c.model)
        } else {
            format!("{prefix}_{}", c.chain)
        };
        let mut seq = Vec::with_capacity(c.residues.len());
        let mut coords = Vec::new();
        let mut mask = Vec::new();
        for r in c.residues {
            seq.push(r.base);
            for s in r.slots {
                coords.push(s.unwrap_or([0.0; 3]));
                mask.push(s.is_some());
            }
        }
        out.push(RnaStructure::new(id, c.chain, seq, atom_set, coords, mask)?);
    }
    if out.is_empty() {
        return Err(Error::NoRnaChains);
    }
    Ok(out)
}

/// Reads a PDB file using its file stem as the id prefix.
pub fn read_pdb_file(path: impl AsRef<Path>, atom_set: AtomSet) -> Result<Vec<RnaStructure>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("rna");
    parse_pdb_with_prefix(&text, atom_set, stem)
}

fn element_of(name: &str) -> &str {
    &name[..1]
}

fn format_atom_name(name: &str) -> String {
    if name.len() >= 4 {
        name.to_string()
    } else {
        format!(" {name:<3}")
    }
}

fn write_chain(out: &mut String, s: &RnaStructure, bfactors: Option<&[f64]>, serial: &mut usize) {
    let chain = s.chain_id.chars().next().filter(|c| *c != '_').unwrap_or('A');
    for (i, base) in s.sequence.iter().enumerate() {
        let b = bfactors.and_then(|v| v.get(i)).copied().unwrap_or(0.0);
        for (slot, name) in s.atom_set.names(*base).iter().enumerate() {
            if !s.atom_mask(i, slot) {
                continue;
            }
            let p = s.atom(i, slot);
            let _ = writeln!(
                out,
                "ATOM  {:>5} {} {:>3} {}{:>4}    {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}          {:>2}",
                *serial % 100_000,
                format_atom_name(name),
                base.as_char(),
                chain,
                (i + 1) % 10_000,
                p[0],
                p[1],
                p[2],
                1.0,
                b,
                element_of(name)
            );
            *serial += 1;
        }
    }
    let _ = writeln!(out, "TER");
}

/// Serialises structures. More than one structure is written as MODEL blocks.
/// `bfactors`, when given, holds one per-residue value list per structure.
pub fn write_pdb(structures: &[RnaStructure], bfactors: Option<&[Vec<f64>]>) -> String {
    let mut out = String::new();
    let multi = structures.len() > 1;
    for (k, s) in structures.iter().enumerate() {
        let mut serial = 1;
        if multi {
            let _ = writeln!(out, "MODEL     {:>4}", k + 1);
        }
        write_chain(&mut out, s, bfactors.and_then(|b| b.get(k)).map(|v| v.as_slice()), &mut serial);
        if multi {
            let _ = writeln!(out, "ENDMDL");
        }
    }
    let _ = writeln!(out, "END");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = "ATOM      1  P     A A   1      10.000  -2.500   3.125  1.00  0.00           P";

    #[test]
    fn column_layout_of_written_atoms() {
        let s = RnaStructure::from_coords("x", vec![Base::A], AtomSet::A1, vec![[1.5, -2.25, 30.125]]).unwrap();
        let text = write_pdb(&[s], None);
        let line = text.lines().next().unwrap();
        assert_eq!(field(line, 12, 16), " C4'");
        assert_eq!(field(line, 17, 20), "  A");
        assert_eq!(field(line, 21, 22), "A");
        assert_eq!(field(line, 30, 38).trim(), "1.500");
        assert_eq!(field(line, 46, 54).trim(), "30.125");
        assert_eq!(field(line, 54, 60).trim(), "1.00");
    }

    #[test]
    fn star_names_and_hetatm() {
        let text = format!(
            "{LINE}\n{}\nHETATM    3  O   HOH A   2       0.000   0.000   0.000  1.00  0.00           O\n",
            LINE.replace("  P   ", "  C4* ").replace("    1  ", "    2  ")
        );
        let s = parse_pdb(&text, AtomSet::A10).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s[0].atom_mask(0, 0));
        assert!(s[0].atom_mask(0, 2));
        assert_eq!(s[0].mask.iter().filter(|m| **m).count(), 2);
    }

    #[test]
    fn bad_coordinate_reports_line() {
        let text = format!("REMARK x\n{}", LINE.replace("10.000", "1x.000"));
        match parse_pdb(&text, AtomSet::A10) {
            Err(Error::Pdb { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_atoms_rejected() {
        let text = format!("{LINE}\n{LINE}\n");
        assert!(matches!(parse_pdb(&text, AtomSet::A10), Err(Error::DuplicateAtom { line: 2, .. })));
    }

    #[test]
    fn empty_input_has_no_chains() {
        assert!(matches!(parse_pdb("", AtomSet::A10), Err(Error::NoRnaChains)));
    }

    #[test]
    fn protein_only_has_no_chains() {
        let text = LINE.replace("    A A", "  ALA A");
        assert!(matches!(parse_pdb(&text, AtomSet::A10), Err(Error::NoRnaChains)));
    }

    #[test]
    fn header_id_prefix() {
        let text = format!("HEADER    RNA                                     01-JAN-00   1ABC              \n{LINE}\n");
        assert_eq!(parse_pdb(&text, AtomSet::A10).unwrap()[0].id, "1ABC_A");
    }
}
