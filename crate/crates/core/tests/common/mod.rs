#![allow(dead_code)]

use ead_core::asynctime::TimestepVector;
use ead_core::egnn::LatentState;
use ead_core::molecule::NUM_TYPES;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub type Rotation = [[f64; 3]; 3];

/// Uniform rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Rotation {
    let q: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Row-wise `R x`.
pub fn rotate(rows: &Array2<f64>, r: &Rotation) -> Array2<f64> {
    let mut out = Array2::zeros(rows.dim());
    for (i, row) in rows.rows().into_iter().enumerate() {
        for a in 0..3 {
            out[[i, a]] = (0..3).map(|b| r[a][b] * row[b]).sum();
        }
    }
    out
}

pub fn permute_rows(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    a.select(ndarray::Axis(0), perm)
}

pub fn random_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

/// Random latent with `2..=max_atoms` atoms, per-atom levels in `[0, steps]`
/// and at least one real atom.
pub fn random_latent<R: Rng>(steps: usize, max_atoms: usize, rng: &mut R) -> LatentState {
    let m = rng.random_range(2..=max_atoms);
    let pos = Array2::from_shape_simple_fn((m, 3), || 1.5 * rng.sample::<f64, _>(StandardNormal));
    let types = Array2::from_shape_simple_fn((m, NUM_TYPES), || rng.sample::<f64, _>(StandardNormal));
    let t = TimestepVector((0..m).map(|_| rng.random_range(0..=steps)).collect());
    let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.8)).collect();
    mask[rng.random_range(0..m)] = true;
    LatentState { pos, types, t, mask }
}

pub fn permuted(z: &LatentState, perm: &[usize]) -> LatentState {
    LatentState {
        pos: permute_rows(&z.pos, perm),
        types: permute_rows(&z.types, perm),
        t: TimestepVector(perm.iter().map(|&i| z.t[i]).collect()),
        mask: perm.iter().map(|&i| z.mask[i]).collect(),
    }
}

/// `max |a - b| / max |b|`.
pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
