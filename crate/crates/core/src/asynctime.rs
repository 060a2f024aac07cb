//! Per-atom timestep machinery.
//!
//! Training draws one baseline level per molecule plus a bounded per-atom
//! offset. Sampling advances each atom independently: a synchronous warm-up
//! followed by a phase where an atom only moves to the next level when its
//! latent velocity did not increase relative to its recent history.

use std::collections::VecDeque;
use std::ops::Deref;

use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One integer noise level per atom.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimestepVector(pub Vec<usize>);

impl TimestepVector {
    pub fn constant(m: usize, t: usize) -> Self {
        TimestepVector(vec![t; m])
    }

    pub fn min(&self) -> usize {
        self.0.iter().copied().min().unwrap_or(0)
    }

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn spread(&self) -> usize {
        self.max() - self.min()
    }

    pub fn is_clean(&self) -> bool {
        self.0.iter().all(|&t| t == 0)
    }

    pub fn is_constant(&self) -> bool {
        self.spread() == 0
    }
}

impl Deref for TimestepVector {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsyncConfig {
    /// Half-width `C` of the per-atom offset interval.
    pub interval: usize,
    /// Probability that a dummy atom's offset is drawn from `[0, C]`.
    pub dummy_bias: f64,
    /// Fraction of the iteration budget spent in the synchronous warm-up.
    pub lambda: f64,
    /// Velocity history window `w`.
    pub window: usize,
    /// Iteration budget `K` that the warm-up fraction refers to.
    pub max_iters: usize,
    /// Absolute iteration cap.
    pub hard_cap: usize,
}

impl AsyncConfig {
    /// Defaults for a horizon of `steps`: `K = T`, cap `3T`, `lambda = 0.8`, `w = 2`.
    pub fn for_steps(steps: usize, interval: usize) -> Self {
        AsyncConfig {
            interval,
            dummy_bias: 0.5,
            lambda: 0.8,
            window: 2,
            max_iters: steps,
            hard_cap: 3 * steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::param(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.dummy_bias) {
            return Err(Error::param("dummy_bias must be a probability"));
        }
        if self.window < 1 {
            return Err(Error::param("history window must be at least 1"));
        }
        if self.hard_cap < self.max_iters {
            return Err(Error::param("hard cap must be at least the iteration budget"));
        }
        Ok(())
    }

    /// True while the remaining counter `k` is inside the synchronous warm-up,
    /// i.e. fewer than `lambda * K` iterations have elapsed.
    pub fn in_warmup(&self, k: i64) -> bool {
        let budget = self.max_iters as f64;
        budget - (k as f64) < self.lambda * budget
    }
}

/// How training assigns levels to the atoms of one molecule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimestepMode {
    #[default]
    Asynchronous,
    /// One shared level per molecule.
    Synchronous,
}

/// Baseline `t* ~ U{0..T}` plus per-atom offsets in `[-C, C]`, clamped to `[0, T]`.
///
/// Dummy atoms draw from `[0, C]` with probability `dummy_bias`. With `C = 0`
/// no offsets are drawn and the vector is constant.
pub fn sample_training_timesteps<R: Rng + ?Sized>(
    steps: usize,
    config: &AsyncConfig,
    dummy_mask: &[bool],
    rng: &mut R,
) -> TimestepVector {
    let base = rng.random_range(0..=steps) as i64;
    let c = config.interval as i64;
    if c == 0 {
        return TimestepVector::constant(dummy_mask.len(), base as usize);
    }
    let t = dummy_mask
        .iter()
        .map(|&dummy| (base + draw_offset(config, dummy, rng)).clamp(0, steps as i64) as usize)
        .collect();
    TimestepVector(t)
}

/// One per-atom offset: uniform on `[-C, C]`, except that a dummy atom draws
/// from `[0, C]` with probability `dummy_bias`.
pub fn draw_offset<R: Rng + ?Sized>(config: &AsyncConfig, dummy: bool, rng: &mut R) -> i64 {
    let c = config.interval as i64;
    if dummy && rng.random_bool(config.dummy_bias) {
        rng.random_range(0..=c)
    } else {
        rng.random_range(-c..=c)
    }
}

/// Shared-level counterpart of [`sample_training_timesteps`].
pub fn sample_synchronous_timesteps<R: Rng + ?Sized>(steps: usize, m: usize, rng: &mut R) -> TimestepVector {
    TimestepVector::constant(m, rng.random_range(0..=steps))
}

/// Per-atom squared change between two `M x channels` latents.
pub fn velocity(prev: ArrayView2<'_, f64>, curr: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if prev.dim() != curr.dim() {
        return Err(Error::shape(format!(
            "latent shapes differ: {:?} vs {:?}",
            prev.dim(),
            curr.dim()
        )));
    }
    Ok(prev
        .rows()
        .into_iter()
        .zip(curr.rows())
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect())
}

/// Ring buffer of the `w` most recent velocities per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityHistory {
    window: usize,
    buffers: Vec<VecDeque<f64>>,
}

impl VelocityHistory {
    pub fn new(atoms: usize, window: usize) -> Self {
        VelocityHistory {
            window: window.max(1),
            buffers: vec![VecDeque::with_capacity(window.max(1)); atoms],
        }
    }

    pub fn from_buffers(window: usize, buffers: Vec<Vec<f64>>) -> Self {
        let mut h = VelocityHistory::new(buffers.len(), window);
        for (i, b) in buffers.into_iter().enumerate() {
            for v in b {
                h.push_one(i, v);
            }
        }
        h
    }

    pub fn atoms(&self) -> usize {
        self.buffers.len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn buffer(&self, atom: usize) -> &VecDeque<f64> {
        &self.buffers[atom]
    }

    fn push_one(&mut self, atom: usize, v: f64) {
        let buf = &mut self.buffers[atom];
        if buf.len() == self.window {
            buf.pop_front();
        }
        buf.push_back(v.max(0.0));
    }

    pub fn push(&mut self, velocities: &[f64]) {
        for (i, &v) in velocities.iter().enumerate().take(self.buffers.len()) {
            self.push_one(i, v);
        }
    }

    /// Smallest buffered velocity, `None` for an empty buffer.
    pub fn min(&self, atom: usize) -> Option<f64> {
        self.buffers[atom].iter().copied().reduce(f64::min)
    }
}

/// 1 where `h_star[i] <= min(history[i])`, else 0. Empty buffers compare as 1.
pub fn compare(history: &VelocityHistory, h_star: &[f64]) -> Vec<usize> {
    h_star
        .iter()
        .enumerate()
        .map(|(i, &h)| match history.min(i) {
            Some(m) if h > m => 0,
            _ => 1,
        })
        .collect()
}

/// Clamps to `[0, T]` then to `[min, min + 2C]`.
pub fn boundary_clamp(t: &mut [usize], steps: usize, interval: usize) {
    for v in t.iter_mut() {
        *v = (*v).min(steps);
    }
    if let Some(lo) = t.iter().copied().min() {
        let hi = lo + 2 * interval;
        for v in t.iter_mut() {
            *v = (*v).min(hi);
        }
    }
}

/// Next level vector from the current one.
///
/// During the warm-up every atom moves down one level. Afterwards atom `i`
/// moves by `compare(history, h_star)[i]`; without a latest velocity every
/// atom advances. The result is boundary-clamped.
pub fn advance_timesteps(
    t: &TimestepVector,
    k: i64,
    steps: usize,
    config: &AsyncConfig,
    history: &VelocityHistory,
    h_star: Option<&[f64]>,
) -> TimestepVector {
    let step: Vec<usize> = match h_star {
        Some(h) if !config.in_warmup(k) => compare(history, h),
        _ => vec![1; t.len()],
    };
    let mut next: Vec<usize> = t.iter().zip(&step).map(|(&ti, &v)| ti.saturating_sub(v)).collect();
    boundary_clamp(&mut next, steps, config.interval);
    TimestepVector(next)
}

/// Staircase schedule: window `j` of `u` atoms lags window `j - 1` by one
/// level. Rows run from all-`T` to all-zero; there are `T + ceil(M/u)` rows.
pub fn pyramid_schedule(steps: usize, atoms: usize, u: usize) -> Result<Vec<Vec<usize>>> {
    if steps < 1 || atoms < 1 || u < 1 {
        return Err(Error::param("pyramid schedule needs T, M, u >= 1"));
    }
    let windows = atoms.div_ceil(u);
    let rows = steps + windows;
    Ok((0..rows)
        .map(|r| {
            (0..atoms)
                .map(|i| {
                    let lag = i / u;
                    (steps + lag).saturating_sub(r).min(steps)
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn cfg(interval: usize) -> AsyncConfig {
        AsyncConfig::for_steps(100, interval)
    }

    #[test]
    fn zero_interval_is_synchronous() {
        let mut rng = substream(3, Stream::Noise);
        for _ in 0..200 {
            let t = sample_training_timesteps(100, &cfg(0), &[false, true, false, true], &mut rng);
            assert!(t.is_constant());
        }
    }

    #[test]
    fn training_levels_are_clamped() {
        let mut rng = substream(4, Stream::Noise);
        let mut saw_top = false;
        let mut saw_bottom = false;
        for _ in 0..2000 {
            let t = sample_training_timesteps(10, &cfg(5), &[false; 6], &mut rng);
            assert!(t.iter().all(|&v| v <= 10));
            assert!(t.spread() <= 10);
            saw_top |= t.contains(&10);
            saw_bottom |= t.contains(&0);
        }
        assert!(saw_top && saw_bottom);
    }

    #[test]
    fn velocity_examples() {
        let a = Array2::<f64>::zeros((2, 9));
        assert_eq!(velocity(a.view(), a.view()).unwrap(), vec![0.0, 0.0]);
        let mut b = a.clone();
        b[[0, 0]] = 3.0;
        b[[0, 1]] = 4.0;
        assert_eq!(velocity(a.view(), b.view()).unwrap(), vec![25.0, 0.0]);
        let c = &b * 2.0;
        assert_eq!(velocity(a.view(), c.view()).unwrap(), vec![100.0, 0.0]);
        assert!(velocity(a.view(), Array2::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn compare_examples() {
        let h = VelocityHistory::from_buffers(2, vec![vec![5.0, 4.0], vec![5.0, 4.0], vec![], vec![4.0]]);
        assert_eq!(compare(&h, &[3.9, 4.5, 123.0, 4.0]), vec![1, 0, 1, 1]);
    }

    #[test]
    fn history_keeps_window() {
        let mut h = VelocityHistory::new(1, 2);
        for v in [3.0, 2.0, 1.0] {
            h.push(&[v]);
        }
        assert_eq!(h.buffer(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 1.0]);
        assert_eq!(h.min(0), Some(1.0));
    }

    #[test]
    fn advance_examples() {
        let mut c = AsyncConfig::for_steps(10, 2);
        c.lambda = 0.5;
        let h = VelocityHistory::from_buffers(2, vec![vec![1.0], vec![1.0]]);
        // warm-up: k = 10 means nothing elapsed
        let t = advance_timesteps(&TimestepVector(vec![7, 7]), 10, 10, &c, &h, Some(&[5.0, 5.0]));
        assert_eq!(t.0, vec![6, 6]);
        // second phase: compare gives [1, 0]
        let t = advance_timesteps(&TimestepVector(vec![4, 4]), 2, 10, &c, &h, Some(&[0.5, 2.0]));
        assert_eq!(t.0, vec![3, 4]);
        // boundary clamp
        let h = VelocityHistory::from_buffers(2, vec![vec![1.0], vec![0.0]]);
        let t = advance_timesteps(&TimestepVector(vec![1, 7]), 2, 10, &c, &h, Some(&[0.5, 2.0]));
        assert_eq!(t.0, vec![0, 4]);
    }

    #[test]
    fn warmup_boundaries() {
        let mut c = AsyncConfig::for_steps(1000, 4);
        c.lambda = 1.0;
        assert!((1..=1000).all(|k| c.in_warmup(k)));
        assert!(!c.in_warmup(0));
        c.lambda = 0.8;
        assert!(c.in_warmup(201));
        assert!(!c.in_warmup(200));
    }

    #[test]
    fn pyramid_examples() {
        assert_eq!(
            pyramid_schedule(3, 2, 1).unwrap(),
            vec![vec![3, 3], vec![2, 3], vec![1, 2], vec![0, 1], vec![0, 0]]
        );
        assert_eq!(
            pyramid_schedule(3, 1, 1).unwrap(),
            vec![vec![3], vec![2], vec![1], vec![0]]
        );
        let same = pyramid_schedule(5, 4, 4).unwrap();
        assert_eq!(same.len(), 6);
        assert!(same.iter().all(|row| row.iter().all(|&v| v == row[0])));
        assert!(pyramid_schedule(0, 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn pyramid_rows_step_by_at_most_one(steps in 1usize..30, atoms in 1usize..12, u in 1usize..6) {
            let rows = pyramid_schedule(steps, atoms, u).unwrap();
            prop_assert_eq!(rows.len(), steps + atoms.div_ceil(u));
            prop_assert!(rows[0].iter().all(|&v| v == steps));
            prop_assert!(rows.last().unwrap().iter().all(|&v| v == 0));
            for pair in rows.windows(2) {
                for (a, b) in pair[0].iter().zip(&pair[1]) {
                    prop_assert!(a >= b && a - b <= 1);
                }
            }
        }

        #[test]
        fn advance_is_monotone_and_bounded(
            start in proptest::collection::vec(0usize..50, 1..10),
            vel in proptest::collection::vec(0.0f64..5.0, 10),
            hist in proptest::collection::vec(0.0f64..5.0, 10),
            k in -50i64..50,
            interval in 0usize..6,
        ) {
            let m = start.len();
            let mut t = start.clone();
            boundary_clamp(&mut t, 50, interval);
            let t = TimestepVector(t);
            let config = AsyncConfig { interval, dummy_bias: 0.5, lambda: 0.5, window: 2, max_iters: 50, hard_cap: 150 };
            let h = VelocityHistory::from_buffers(2, hist[..m].iter().map(|&v| vec![v]).collect());
            let next = advance_timesteps(&t, k, 50, &config, &h, Some(&vel[..m]));
            prop_assert!(next.spread() <= 2 * interval);
            for (a, b) in t.iter().zip(next.iter()) {
                prop_assert!(b <= a);
            }
        }
    }
}
