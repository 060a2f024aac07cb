//! Distance-based bond inference and population metrics for generated
//! molecules.

mod bonds;
pub mod canon;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::molecule::{ElementTable, Molecule};

pub use bonds::{infer_bonds, BondGraph, BondLength, BondTable};

/// Per-atom flags: bond-order sum equals the element's valence.
pub fn stable_atoms(mol: &Molecule, bonds: &BondGraph, elements: &ElementTable) -> Vec<bool> {
    mol.types
        .iter()
        .enumerate()
        .map(|(i, &ty)| elements.valence(ty) == Some(bonds.valence_sum(i)))
        .collect()
}

/// Fraction of stable atoms; `None` for an empty molecule.
pub fn atom_stability(mol: &Molecule, bonds: &BondGraph, elements: &ElementTable) -> Option<f64> {
    if mol.is_empty() {
        return None;
    }
    let flags = stable_atoms(mol, bonds, elements);
    Some(flags.iter().filter(|&&s| s).count() as f64 / flags.len() as f64)
}

/// Every atom stable. Empty molecules are not stable.
pub fn is_stable(mol: &Molecule, bonds: &BondGraph, elements: &ElementTable) -> bool {
    !mol.is_empty() && stable_atoms(mol, bonds, elements).into_iter().all(|s| s)
}

/// Fraction of molecules whose atoms are all stable; `None` for no molecules.
pub fn molecule_stability(mols: &[Molecule], bonds: &[BondGraph], elements: &ElementTable) -> Option<f64> {
    if mols.is_empty() {
        return None;
    }
    let stable = mols.iter().zip(bonds).filter(|(m, b)| is_stable(m, b, elements)).count();
    Some(stable as f64 / mols.len() as f64)
}

/// Connected bond graph with every valence satisfied.
pub fn validity(mol: &Molecule, bonds: &BondGraph, elements: &ElementTable) -> bool {
    is_stable(mol, bonds, elements) && bonds.is_connected()
}

/// Isomorphism-invariant key of the typed, order-labelled bond graph.
pub fn canonical_key(mol: &Molecule, bonds: &BondGraph) -> String {
    let labels: Vec<u32> = mol.types.iter().map(|t| t.index() as u32).collect();
    canon::canonical_key(&labels, bonds.matrix())
}

/// Distinct keys over count, for molecules already known to be valid.
pub fn uniqueness(valid: &[(&Molecule, &BondGraph)]) -> Option<f64> {
    if valid.is_empty() {
        return None;
    }
    let keys: HashSet<String> = valid.iter().map(|(m, b)| canonical_key(m, b)).collect();
    Some(keys.len() as f64 / valid.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub molecules: usize,
    /// Molecules in which every atom decoded to the dummy category.
    pub empty: usize,
    /// Stable atoms over all atoms of the population.
    pub atom_stability: Option<f64>,
    pub mol_stability: Option<f64>,
    pub validity: Option<f64>,
    /// Distinct canonical keys among valid molecules over the valid count.
    pub uniqueness: Option<f64>,
    pub v_times_u: Option<f64>,
    /// Atom count to number of molecules.
    pub size_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub index: usize,
    pub atoms: usize,
    pub stable_atoms: usize,
    pub valid: bool,
    pub canonical_key: String,
}

#[derive(Debug, Clone)]
pub struct Evaluator {
    pub bonds: BondTable,
    pub elements: ElementTable,
}

impl Default for Evaluator {
    fn default() -> Self {
        Evaluator {
            bonds: BondTable::bundled(),
            elements: ElementTable::bundled(),
        }
    }
}

impl Evaluator {
    pub fn evaluate(&self, mols: &[Molecule]) -> (EvalReport, Vec<Diagnostic>) {
        let graphs: Vec<BondGraph> = mols.iter().map(|m| infer_bonds(m, &self.bonds)).collect();
        let mut diags = Vec::with_capacity(mols.len());
        let (mut atoms, mut stable) = (0usize, 0usize);
        let mut size_histogram = BTreeMap::new();
        let mut valid = Vec::new();
        for (index, (mol, g)) in mols.iter().zip(&graphs).enumerate() {
            let flags = stable_atoms(mol, g, &self.elements);
            let n_stable = flags.iter().filter(|&&s| s).count();
            atoms += mol.len();
            stable += n_stable;
            *size_histogram.entry(mol.len()).or_insert(0) += 1;
            let ok = validity(mol, g, &self.elements);
            if ok {
                valid.push((mol, g));
            }
            diags.push(Diagnostic {
                index,
                atoms: mol.len(),
                stable_atoms: n_stable,
                valid: ok,
                canonical_key: canonical_key(mol, g),
            });
        }
        let n = mols.len();
        let frac = |k: usize| (n > 0).then(|| k as f64 / n as f64);
        let validity = frac(valid.len());
        let uniqueness = uniqueness(&valid);
        let v_times_u = validity.map(|v| v * uniqueness.unwrap_or(0.0));
        let report = EvalReport {
            molecules: n,
            empty: mols.iter().filter(|m| m.is_empty()).count(),
            atom_stability: (atoms > 0).then(|| stable as f64 / atoms as f64),
            mol_stability: molecule_stability(mols, &graphs, &self.elements),
            validity,
            uniqueness,
            v_times_u,
            size_histogram,
        };
        (report, diags)
    }
}

pub fn write_diagnostics_csv<W: Write>(mut out: W, diags: &[Diagnostic]) -> std::io::Result<()> {
    writeln!(out, "index,atoms,stable_atoms,valid,canonical_key")?;
    for d in diags {
        writeln!(out, "{},{},{},{},{}", d.index, d.atoms, d.stable_atoms, d.valid, d.canonical_key)?;
    }
    Ok(())
}
