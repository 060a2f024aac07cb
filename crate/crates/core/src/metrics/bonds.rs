use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::molecule::{AtomType, Molecule};

const BUNDLED: &str = include_str!("../../data/bonds.txt");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BondLength {
    pub order: u8,
    pub length: f64,
    pub margin: f64,
}

/// Nominal lengths per unordered element pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BondTable {
    entries: BTreeMap<(AtomType, AtomType), Vec<BondLength>>,
}

fn key(a: AtomType, b: AtomType) -> (AtomType, AtomType) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl BondTable {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED).expect("bundled bond table is well formed")
    }

    /// Parses `element element order length margin` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<_, Vec<BondLength>> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::parse(n + 1, "expected `element element order length margin`"));
            }
            let elem = |s: &str| {
                AtomType::from_symbol(s).ok_or_else(|| Error::parse(n + 1, format!("unknown element `{s}`")))
            };
            let (a, b) = (elem(f[0])?, elem(f[1])?);
            let order: u8 = f[2].parse().map_err(|_| Error::parse(n + 1, "bad bond order"))?;
            let length: f64 = f[3].parse().map_err(|_| Error::parse(n + 1, "bad length"))?;
            let margin: f64 = f[4].parse().map_err(|_| Error::parse(n + 1, "bad margin"))?;
            if !(1..=3).contains(&order) || !(length > 0.0) || !(margin > 0.0) {
                return Err(Error::parse(n + 1, "order must be 1-3, length and margin positive"));
            }
            let list = entries.entry(key(a, b)).or_default();
            if list.iter().any(|e| e.order == order) {
                return Err(Error::parse(n + 1, format!("duplicate {a}-{b} order {order}")));
            }
            list.push(BondLength { order, length, margin });
        }
        Ok(BondTable { entries })
    }

    pub fn lengths(&self, a: AtomType, b: AtomType) -> &[BondLength] {
        self.entries.get(&key(a, b)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Order whose interval contains `distance`. Among several matches the
    /// nominal length closest to `distance` wins; exact ties go to the
    /// higher order.
    pub fn classify(&self, a: AtomType, b: AtomType, distance: f64) -> Option<u8> {
        let mut best: Option<(f64, u8)> = None;
        for e in self.lengths(a, b) {
            let gap = (distance - e.length).abs();
            if gap > e.margin {
                continue;
            }
            best = match best {
                Some((g, o)) if g < gap || (g == gap && o > e.order) => Some((g, o)),
                _ => Some((gap, e.order)),
            };
        }
        best.map(|(_, o)| o)
    }
}

/// Symmetric bond-order matrix; 0 means no bond.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BondGraph {
    orders: Vec<Vec<u8>>,
}

impl BondGraph {
    pub fn empty(atoms: usize) -> Self {
        BondGraph {
            orders: vec![vec![0; atoms]; atoms],
        }
    }

    pub fn from_matrix(orders: Vec<Vec<u8>>) -> Result<Self> {
        let n = orders.len();
        for (i, row) in orders.iter().enumerate() {
            if row.len() != n || row[i] != 0 {
                return Err(Error::shape("bond matrix must be square with an empty diagonal"));
            }
            for (j, &o) in row.iter().enumerate() {
                if orders[j][i] != o {
                    return Err(Error::shape("bond matrix must be symmetric"));
                }
            }
        }
        Ok(BondGraph { orders })
    }

    pub fn atoms(&self) -> usize {
        self.orders.len()
    }

    pub fn order(&self, i: usize, j: usize) -> u8 {
        self.orders[i][j]
    }

    pub fn set(&mut self, i: usize, j: usize, order: u8) {
        self.orders[i][j] = order;
        self.orders[j][i] = order;
    }

    pub fn matrix(&self) -> &[Vec<u8>] {
        &self.orders
    }

    /// Bonds as `(i, j, order)` with `i < j`.
    pub fn bonds(&self) -> Vec<(usize, usize, u8)> {
        let mut out = Vec::new();
        for i in 0..self.atoms() {
            for j in i + 1..self.atoms() {
                if self.orders[i][j] > 0 {
                    out.push((i, j, self.orders[i][j]));
                }
            }
        }
        out
    }

    pub fn valence_sum(&self, i: usize) -> u32 {
        self.orders[i].iter().map(|&o| o as u32).sum()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.atoms();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if self.orders[i][j] > 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Bonds from pairwise distances. Dummy atoms never bond.
pub fn infer_bonds(mol: &Molecule, table: &BondTable) -> BondGraph {
    let n = mol.len();
    let mut g = BondGraph::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (mol.types[i], mol.types[j]);
            if a.is_dummy() || b.is_dummy() {
                continue;
            }
            if let Some(o) = table.classify(a, b, mol.distance(i, j)) {
                g.set(i, j, o);
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use AtomType::*;

    #[test]
    fn bundled_table_is_symmetric_and_complete() {
        let t = BondTable::bundled();
        for a in AtomType::ELEMENTS {
            for b in AtomType::ELEMENTS {
                assert_eq!(t.lengths(a, b), t.lengths(b, a));
                assert!(t.lengths(a, b).iter().any(|e| e.order == 1));
            }
        }
    }

    #[test]
    fn lookups() {
        let t = BondTable::bundled();
        assert_eq!(t.classify(C, H, 1.09), Some(1));
        assert_eq!(t.classify(H, C, 1.09), Some(1));
        assert_eq!(t.classify(C, C, 5.0), None);
        assert_eq!(t.classify(C, C, 1.34), Some(2));
        assert_eq!(t.classify(C, C, 1.20), Some(3));
        assert_eq!(t.classify(C, O, 1.20), Some(2));
        assert_eq!(t.classify(C, O, 1.13), Some(3));
    }

    #[test]
    fn equidistant_matches_take_the_higher_order() {
        let t = BondTable::parse("C C 1 1.50 0.10\nC C 2 1.40 0.10\n").unwrap();
        assert_eq!(t.classify(C, C, 1.45), Some(2));
    }

    #[test]
    fn rejects_malformed_tables() {
        assert!(BondTable::parse("C C 4 1.0 0.1").is_err());
        assert!(BondTable::parse("C C 1 -1.0 0.1").is_err());
        assert!(BondTable::parse("C C 1 1.0").is_err());
        assert!(BondTable::parse("C C 1 1.0 0.1\nC C 1 1.1 0.1").is_err());
    }

    #[test]
    fn graph_is_symmetric() {
        let mol = Molecule::from_atoms(&[(C, [0.0, 0.0, 0.0]), (H, [1.09, 0.0, 0.0]), (H, [5.0, 0.0, 0.0])]);
        let g = infer_bonds(&mol, &BondTable::bundled());
        assert_eq!(g.bonds(), vec![(0, 1, 1)]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.order(i, j), g.order(j, i));
            }
        }
        assert!(!g.is_connected());
    }
}
