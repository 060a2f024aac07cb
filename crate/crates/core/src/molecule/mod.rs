//! Molecules, atom types, center-of-mass handling and dummy padding.

mod elements;
mod toy;
mod xyz;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use elements::{AtomSpec, ElementTable};
pub use toy::{make_toy_dataset, make_toy_dataset_with_jitter, templates, DEFAULT_JITTER, MAX_JITTER};
pub use xyz::{parse_xyz, write_xyz};

/// Number of categorical type channels: five elements plus the dummy.
pub const NUM_TYPES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AtomType {
    H,
    C,
    N,
    O,
    F,
    Dummy,
}

impl AtomType {
    pub const ALL: [AtomType; NUM_TYPES] = [
        AtomType::H,
        AtomType::C,
        AtomType::N,
        AtomType::O,
        AtomType::F,
        AtomType::Dummy,
    ];

    pub const ELEMENTS: [AtomType; 5] = [
        AtomType::H,
        AtomType::C,
        AtomType::N,
        AtomType::O,
        AtomType::F,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<AtomType> {
        Self::ALL.get(i).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            AtomType::H => "H",
            AtomType::C => "C",
            AtomType::N => "N",
            AtomType::O => "O",
            AtomType::F => "F",
            AtomType::Dummy => "X",
        }
    }

    /// Parses an element symbol. The dummy category has no symbol in files.
    pub fn from_symbol(symbol: &str) -> Option<AtomType> {
        match symbol {
            "H" => Some(AtomType::H),
            "C" => Some(AtomType::C),
            "N" => Some(AtomType::N),
            "O" => Some(AtomType::O),
            "F" => Some(AtomType::F),
            _ => None,
        }
    }

    pub fn is_dummy(self) -> bool {
        self == AtomType::Dummy
    }
}

impl fmt::Display for AtomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// One-hot encoding of `types`, scaled by `scale`.
pub fn one_hot(types: &[AtomType], scale: f64) -> Array2<f64> {
    let mut out = Array2::zeros((types.len(), NUM_TYPES));
    for (i, t) in types.iter().enumerate() {
        out[[i, t.index()]] = scale;
    }
    out
}

/// Argmax decoding of type channels. Ties resolve to the lower index.
pub fn decode_types(channels: ArrayView2<'_, f64>) -> Vec<AtomType> {
    channels
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            AtomType::ALL[best]
        })
        .collect()
}

/// Subtracts the mean of the masked rows from the masked rows.
pub fn center_of_mass_project(positions: ArrayView2<'_, f64>, mask: &[bool]) -> Result<Array2<f64>> {
    let mut out = positions.to_owned();
    center_in_place(&mut out, mask)?;
    Ok(out)
}

pub(crate) fn center_in_place(positions: &mut Array2<f64>, mask: &[bool]) -> Result<()> {
    if mask.len() != positions.nrows() {
        return Err(Error::shape(format!(
            "mask has {} entries for {} rows",
            mask.len(),
            positions.nrows()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::param("center-of-mass mask selects no atoms"));
    }
    let mut mean = Array1::<f64>::zeros(positions.ncols());
    for (row, &m) in positions.rows().into_iter().zip(mask) {
        if m {
            mean += &row;
        }
    }
    mean /= n as f64;
    for (mut row, &m) in positions.rows_mut().into_iter().zip(mask) {
        if m {
            row -= &mean;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    /// `M x 3` coordinates in Angstrom.
    pub positions: Array2<f64>,
    pub types: Vec<AtomType>,
}

impl Molecule {
    pub fn new(positions: Array2<f64>, types: Vec<AtomType>) -> Result<Self> {
        if positions.ncols() != 3 || positions.nrows() != types.len() {
            return Err(Error::shape(format!(
                "positions {:?} do not match {} atom types",
                positions.dim(),
                types.len()
            )));
        }
        Ok(Molecule { positions, types })
    }

    pub fn empty() -> Self {
        Molecule {
            positions: Array2::zeros((0, 3)),
            types: Vec::new(),
        }
    }

    pub fn from_atoms(atoms: &[(AtomType, [f64; 3])]) -> Self {
        let mut positions = Array2::zeros((atoms.len(), 3));
        for (i, (_, p)) in atoms.iter().enumerate() {
            for k in 0..3 {
                positions[[i, k]] = p[k];
            }
        }
        Molecule {
            positions,
            types: atoms.iter().map(|(t, _)| *t).collect(),
        }
    }

    /// Total row count, padding included.
    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn real_mask(&self) -> Vec<bool> {
        self.types.iter().map(|t| !t.is_dummy()).collect()
    }

    pub fn num_real(&self) -> usize {
        self.types.iter().filter(|t| !t.is_dummy()).count()
    }

    /// Copy with real atoms shifted to zero mean. Empty molecules pass through.
    pub fn centered(&self) -> Molecule {
        let mask = self.real_mask();
        let mut out = self.clone();
        if mask.iter().any(|&m| m) {
            center_in_place(&mut out.positions, &mask).expect("mask matches rows");
        }
        out
    }

    /// Appends dummy atoms at the origin up to `size` rows.
    pub fn padded(&self, size: usize) -> Result<Molecule> {
        if size < self.len() {
            return Err(Error::param(format!(
                "cannot pad {} atoms down to {size}",
                self.len()
            )));
        }
        let mut positions = Array2::zeros((size, 3));
        positions
            .slice_mut(ndarray::s![..self.len(), ..])
            .assign(&self.positions);
        let mut types = self.types.clone();
        types.resize(size, AtomType::Dummy);
        Ok(Molecule { positions, types })
    }

    /// Removes every dummy row.
    pub fn strip_dummies(&self) -> Molecule {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !self.types[i].is_dummy()).collect();
        Molecule {
            positions: self.positions.select(Axis(0), &keep),
            types: keep.iter().map(|&i| self.types[i]).collect(),
        }
    }

    pub fn one_hot(&self, scale: f64) -> Array2<f64> {
        one_hot(&self.types, scale)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let a = self.positions.row(i);
        let b = self.positions.row(j);
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Applies a 3x3 rotation to every row.
    pub fn rotated(&self, rotation: &[[f64; 3]; 3]) -> Molecule {
        let mut out = self.clone();
        out.positions = rotate_rows(self.positions.view(), rotation);
        out
    }
}

pub(crate) fn rotate_rows(rows: ArrayView2<'_, f64>, r: &[[f64; 3]; 3]) -> Array2<f64> {
    let mut out = Array2::zeros(rows.raw_dim());
    for (i, row) in rows.rows().into_iter().enumerate() {
        for a in 0..3 {
            out[[i, a]] = r[a][0] * row[0] + r[a][1] * row[1] + r[a][2] * row[2];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Centered molecules, each padded to `max_size` rows.
    pub molecules: Vec<Molecule>,
    pub max_size: usize,
    pub element_histogram: BTreeMap<AtomType, usize>,
}

impl Dataset {
    /// Centers each molecule over its real atoms and pads to the largest size.
    pub fn from_molecules(molecules: Vec<Molecule>) -> Result<Self> {
        Self::from_molecules_padded(molecules, None)
    }

    /// Like [`Dataset::from_molecules`] with an explicit padded size.
    pub fn from_molecules_padded(molecules: Vec<Molecule>, pad_to: Option<usize>) -> Result<Self> {
        let stripped: Vec<Molecule> = molecules.iter().map(Molecule::strip_dummies).collect();
        let largest = stripped.iter().map(Molecule::len).max().unwrap_or(0);
        let max_size = match pad_to {
            Some(m) if m < largest => {
                return Err(Error::param(format!(
                    "pad size {m} is smaller than the largest molecule ({largest})"
                )))
            }
            Some(m) => m,
            None => largest,
        };
        let mut element_histogram = BTreeMap::new();
        let mut padded = Vec::with_capacity(stripped.len());
        for mol in &stripped {
            for t in &mol.types {
                *element_histogram.entry(*t).or_insert(0) += 1;
            }
            padded.push(mol.centered().padded(max_size)?);
        }
        Ok(Dataset {
            molecules: padded,
            max_size,
            element_histogram,
        })
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    /// Dataset molecules with padding removed.
    pub fn unpadded(&self) -> Vec<Molecule> {
        self.molecules.iter().map(Molecule::strip_dummies).collect()
    }
}

pub fn load_xyz(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_molecules(parse_xyz(&text)?)
}
