//! Multi-frame XYZ text: a count line, a comment line, then one
//! `<symbol> <x> <y> <z>` line per atom, repeated per frame.

use std::io::Write;

use ndarray::Array2;

use super::{AtomType, Molecule};
use crate::error::{Error, Result};

pub fn parse_xyz(text: &str) -> Result<Vec<Molecule>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut molecules = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let count_line = lines[i].trim();
        if count_line.is_empty() {
            i += 1;
            continue;
        }
        let count: usize = count_line
            .parse()
            .map_err(|_| Error::parse(i + 1, format!("bad atom count `{count_line}`")))?;
        if i + 1 >= lines.len() {
            return Err(Error::parse(i + 1, "frame is missing its comment line"));
        }
        let first_atom = i + 2;
        if first_atom + count > lines.len() {
            return Err(Error::parse(
                lines.len(),
                format!("frame declares {count} atoms but the file ends early"),
            ));
        }
        let mut positions = Array2::zeros((count, 3));
        let mut types = Vec::with_capacity(count);
        for a in 0..count {
            let line_no = first_atom + a + 1;
            let fields: Vec<&str> = lines[first_atom + a].split_whitespace().collect();
            if fields.len() < 4 {
                return Err(Error::parse(line_no, "expected `<symbol> <x> <y> <z>`"));
            }
            let ty = AtomType::from_symbol(fields[0])
                .ok_or_else(|| Error::parse(line_no, format!("unknown element `{}`", fields[0])))?;
            for k in 0..3 {
                positions[[a, k]] = fields[k + 1].parse().map_err(|_| {
                    Error::parse(line_no, format!("non-numeric coordinate `{}`", fields[k + 1]))
                })?;
            }
            types.push(ty);
        }
        molecules.push(Molecule { positions, types });
        i = first_atom + count;
    }
    Ok(molecules)
}

/// Writes real atoms of each molecule as one frame. Dummy rows are skipped.
pub fn write_xyz<W: Write>(mut out: W, molecules: &[Molecule]) -> std::io::Result<()> {
    for (n, mol) in molecules.iter().enumerate() {
        let real: Vec<usize> = (0..mol.len()).filter(|&i| !mol.types[i].is_dummy()).collect();
        writeln!(out, "{}", real.len())?;
        writeln!(out, "molecule {n}")?;
        for i in real {
            let p = mol.positions.row(i);
            writeln!(
                out,
                "{} {:.8} {:.8} {:.8}",
                mol.types[i].symbol(),
                p[0],
                p[1],
                p[2]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molecule::Dataset;
    use ndarray::array;

    #[test]
    fn single_atom_frame() {
        let ds = Dataset::from_molecules(parse_xyz("1\n\nH 0 0 0").unwrap()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.max_size, 1);
        assert_eq!(ds.molecules[0].positions, array![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn frames_are_centered() {
        let ds = Dataset::from_molecules(parse_xyz("2\nc\nH 0 0 0\nH 2 0 0\n").unwrap()).unwrap();
        assert_eq!(ds.molecules[0].positions, array![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn multi_frame_and_empty_frames() {
        let mols = parse_xyz("1\na\nC 0 0 0\n0\nempty\n2\nb\nO 0 0 0\nH 0 0 1\n").unwrap();
        assert_eq!(mols.len(), 3);
        assert!(mols[1].is_empty());
        assert_eq!(mols[2].types, vec![AtomType::O, AtomType::H]);
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse_xyz("1\n\nXx 0 0 0").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("Xx"));
        let err = parse_xyz("two\n\nH 0 0 0").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_xyz("1\n\nH 0 zero 0").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = parse_xyz("3\n\nH 0 0 0").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn writer_skips_dummies() {
        let mol = Molecule::from_atoms(&[(AtomType::C, [0.5, 0.0, 0.0])]).padded(3).unwrap();
        let mut buf = Vec::new();
        write_xyz(&mut buf, &[mol]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "1\nmolecule 0\nC 0.50000000 0.00000000 0.00000000\n");
    }
}
