//! Small bundled dataset built from experimental gas-phase geometries.

use rand_distr::{Distribution, Normal};

use super::{AtomType, Dataset, Molecule};
use crate::rng::{substream, Stream};

/// Default per-coordinate jitter bound in Angstrom.
pub const DEFAULT_JITTER: f64 = 0.01;
/// Largest jitter the generator accepts.
pub const MAX_JITTER: f64 = 0.02;

fn deg(x: f64) -> f64 {
    x.to_radians()
}

fn methane() -> Molecule {
    let a = 1.087 / 3f64.sqrt();
    Molecule::from_atoms(&[
        (AtomType::C, [0.0, 0.0, 0.0]),
        (AtomType::H, [a, a, a]),
        (AtomType::H, [a, -a, -a]),
        (AtomType::H, [-a, a, -a]),
        (AtomType::H, [-a, -a, a]),
    ])
}

fn water() -> Molecule {
    let r = 0.9572;
    let half = deg(104.52 / 2.0);
    Molecule::from_atoms(&[
        (AtomType::O, [0.0, 0.0, 0.0]),
        (AtomType::H, [r * half.sin(), r * half.cos(), 0.0]),
        (AtomType::H, [-r * half.sin(), r * half.cos(), 0.0]),
    ])
}

fn ammonia() -> Molecule {
    let r = 1.012;
    // Polar angle of each N-H bond from the C3 axis for an H-N-H angle of 106.67 deg.
    let sin_sq = (1.0 - deg(106.67).cos()) / 1.5;
    let (sin, cos) = (sin_sq.sqrt(), (1.0 - sin_sq).sqrt());
    let mut atoms = vec![(AtomType::N, [0.0, 0.0, 0.0])];
    for k in 0..3 {
        let phi = deg(120.0 * k as f64);
        atoms.push((AtomType::H, [r * sin * phi.cos(), r * sin * phi.sin(), -r * cos]));
    }
    Molecule::from_atoms(&atoms)
}

fn ethane() -> Molecule {
    let cc = 1.535;
    let ch = 1.094;
    let tilt = deg(180.0 - 111.17);
    let z0 = cc / 2.0;
    let mut atoms = vec![(AtomType::C, [0.0, 0.0, z0]), (AtomType::C, [0.0, 0.0, -z0])];
    for k in 0..3 {
        let phi = deg(120.0 * k as f64);
        atoms.push((
            AtomType::H,
            [ch * tilt.sin() * phi.cos(), ch * tilt.sin() * phi.sin(), z0 + ch * tilt.cos()],
        ));
    }
    for k in 0..3 {
        // Staggered: rotated 60 deg relative to the upper methyl group.
        let phi = deg(120.0 * k as f64 + 60.0);
        atoms.push((
            AtomType::H,
            [ch * tilt.sin() * phi.cos(), ch * tilt.sin() * phi.sin(), -z0 - ch * tilt.cos()],
        ));
    }
    Molecule::from_atoms(&atoms)
}

fn methanol() -> Molecule {
    let co = 1.427;
    let oh = 0.956;
    let ch = 1.096;
    let coh = deg(108.87);
    let hco = deg(109.47);
    let mut atoms = vec![
        (AtomType::C, [0.0, 0.0, 0.0]),
        (AtomType::O, [co, 0.0, 0.0]),
        (AtomType::H, [co - oh * coh.cos(), oh * coh.sin(), 0.0]),
    ];
    for k in 0..3 {
        let phi = deg(180.0 + 120.0 * k as f64);
        let radial = ch * hco.sin();
        atoms.push((
            AtomType::H,
            [ch * hco.cos(), radial * phi.cos(), radial * phi.sin()],
        ));
    }
    Molecule::from_atoms(&atoms)
}

/// Methane, water, ammonia, ethane and methanol, each centered.
pub fn templates() -> Vec<(&'static str, Molecule)> {
    vec![
        ("methane", methane().centered()),
        ("water", water().centered()),
        ("ammonia", ammonia().centered()),
        ("ethane", ethane().centered()),
        ("methanol", methanol().centered()),
    ]
}

pub fn make_toy_dataset(seed: u64, n: usize) -> Dataset {
    make_toy_dataset_with_jitter(seed, n, DEFAULT_JITTER)
}

/// `n` molecules cycling through [`templates`], with every coordinate
/// perturbed by a Gaussian of std `jitter / 2` truncated to `±jitter`.
pub fn make_toy_dataset_with_jitter(seed: u64, n: usize, jitter: f64) -> Dataset {
    let jitter = jitter.clamp(0.0, MAX_JITTER);
    let library = templates();
    let mut rng = substream(seed, Stream::Data);
    let noise = Normal::new(0.0, (jitter / 2.0).max(f64::MIN_POSITIVE)).expect("finite std");
    let mut molecules = Vec::with_capacity(n);
    for i in 0..n {
        let mut mol = library[i % library.len()].1.clone();
        if jitter > 0.0 {
            for v in mol.positions.iter_mut() {
                let d: f64 = noise.sample(&mut rng);
                *v += d.clamp(-jitter, jitter);
            }
        }
        molecules.push(mol);
    }
    Dataset::from_molecules(molecules).expect("templates are well formed")
}
