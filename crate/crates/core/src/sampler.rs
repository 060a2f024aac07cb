//! Reverse diffusion: adaptive per-atom schedules, the synchronous
//! baseline, and the handcrafted staircase baseline. All three share one
//! chain driver and one denoising update.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asynctime::{advance_timesteps, pyramid_schedule, velocity, AsyncConfig, TimestepVector, VelocityHistory};
use crate::egnn::{Denoiser, LatentState};
use crate::error::{Error, Result};
use crate::molecule::{center_of_mass_project, decode_types, rotate_rows, Molecule, NUM_TYPES};
use crate::rng::{indexed_substream, Rng, Stream};
use crate::schedule::NoiseSchedule;
use crate::training::Noise;

/// Supplies the Gaussian draws of a chain: one for the initial latent,
/// then one per iteration.
pub trait NoiseSource {
    fn draw(&mut self, atoms: usize) -> Noise;
}

impl<R: rand::Rng> NoiseSource for R {
    fn draw(&mut self, atoms: usize) -> Noise {
        Noise::draw(atoms, self)
    }
}

/// Applies a fixed rotation to the position part of another source.
pub struct RotatedNoise<N> {
    pub inner: N,
    pub rotation: [[f64; 3]; 3],
}

impl<N: NoiseSource> NoiseSource for RotatedNoise<N> {
    fn draw(&mut self, atoms: usize) -> Noise {
        let n = self.inner.draw(atoms);
        Noise {
            pos: rotate_rows(n.pos.view(), &self.rotation),
            types: n.types,
        }
    }
}

/// Latent from a draw: zero-mean positions over all atoms, raw type channels.
pub fn initial_latent(draw: Noise, steps: usize) -> Result<LatentState> {
    let m = draw.pos.nrows();
    let mask = vec![true; m];
    Ok(LatentState {
        pos: center_of_mass_project(draw.pos.view(), &mask)?,
        types: draw.types,
        t: TimestepVector::constant(m, steps),
        mask,
    })
}

/// Moves every atom from its level `z.t[i]` to `s[i]`:
/// `z' = z / a_ts - sigma_ts^2 / (a_ts sigma_t) eps_hat + sigma_{t->s} eps`.
///
/// Atoms at level 0 are returned bit-for-bit. Afterwards the moving atoms
/// are shifted by a common vector so the mean position over all atoms is
/// zero.
pub fn denoise_step<D: Denoiser + ?Sized>(
    z: &LatentState,
    s: &TimestepVector,
    model: &D,
    schedule: &NoiseSchedule,
    noise: &Noise,
) -> Result<LatentState> {
    let m = z.len();
    if s.len() != m || noise.pos.dim() != (m, 3) || noise.types.dim() != (m, NUM_TYPES) {
        return Err(Error::shape("target levels or noise disagree with the latent"));
    }
    for (&ti, &si) in z.t.iter().zip(s.iter()) {
        if si > ti || ti > schedule.steps() {
            return Err(Error::param(format!("invalid transition {ti} -> {si}")));
        }
    }
    let (eps_pos, eps_type) = model.predict(z)?;
    let mut out = z.clone();
    for i in 0..m {
        if z.t[i] == 0 {
            continue;
        }
        let c = schedule.transition_unchecked(z.t[i], s[i]);
        for k in 0..3 {
            out.pos[[i, k]] = c.z_coeff * z.pos[[i, k]] - c.eps_coeff * eps_pos[[i, k]] + c.sigma_t_to_s * noise.pos[[i, k]];
        }
        for k in 0..NUM_TYPES {
            out.types[[i, k]] =
                c.z_coeff * z.types[[i, k]] - c.eps_coeff * eps_type[[i, k]] + c.sigma_t_to_s * noise.types[[i, k]];
        }
    }
    let moving: Vec<usize> = (0..m).filter(|&i| z.t[i] > 0).collect();
    if !moving.is_empty() {
        let total = out.pos.sum_axis(ndarray::Axis(0)) / moving.len() as f64;
        for &i in &moving {
            let mut row = out.pos.row_mut(i);
            row -= &total;
        }
    }
    out.t = s.clone();
    Ok(out)
}

/// One iteration of a chain, as logged in trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Levels after the iteration.
    pub t: Vec<usize>,
    pub velocity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    /// Decoded molecule: dummies removed, survivors centered.
    pub molecule: Molecule,
    /// Final latent before decoding.
    pub latent: LatentState,
    pub iterations: usize,
    pub evaluations: usize,
    pub trace: Vec<TraceRow>,
    /// Iteration whose update produced non-finite values. The chain stops
    /// there and keeps its last finite latent.
    pub diverged: Option<usize>,
}

impl SampleRun {
    /// Every atom decoded to the dummy category.
    pub fn is_empty(&self) -> bool {
        self.molecule.is_empty()
    }
}

/// Chooses the next level vector, or `None` to stop.
trait Policy {
    fn next(&mut self, iteration: usize, t: &TimestepVector, last_velocity: Option<&[f64]>) -> Option<TimestepVector>;
}

struct Adaptive<'a> {
    config: &'a AsyncConfig,
    steps: usize,
    k: i64,
    history: VelocityHistory,
    latest: Option<Vec<f64>>,
}

impl Policy for Adaptive<'_> {
    fn next(&mut self, iteration: usize, t: &TimestepVector, last_velocity: Option<&[f64]>) -> Option<TimestepVector> {
        if let Some(v) = last_velocity {
            if let Some(prev) = self.latest.replace(v.to_vec()) {
                self.history.push(&prev);
            }
            self.k -= 1;
        }
        if t.is_clean() || iteration >= self.config.hard_cap {
            return None;
        }
        if iteration + 1 == self.config.hard_cap {
            return Some(TimestepVector::constant(t.len(), 0));
        }
        Some(advance_timesteps(
            t,
            self.k,
            self.steps,
            self.config,
            &self.history,
            self.latest.as_deref(),
        ))
    }
}

struct Synchronous;

impl Policy for Synchronous {
    fn next(&mut self, _: usize, t: &TimestepVector, _: Option<&[f64]>) -> Option<TimestepVector> {
        (!t.is_clean()).then(|| TimestepVector(t.iter().map(|&v| v.saturating_sub(1)).collect()))
    }
}

struct Staircase {
    rows: Vec<Vec<usize>>,
}

impl Policy for Staircase {
    fn next(&mut self, iteration: usize, _: &TimestepVector, _: Option<&[f64]>) -> Option<TimestepVector> {
        self.rows.get(iteration + 1).cloned().map(TimestepVector)
    }
}

fn run_chain<D: Denoiser + ?Sized, N: NoiseSource + ?Sized, P: Policy>(
    model: &D,
    atoms: usize,
    schedule: &NoiseSchedule,
    noise: &mut N,
    mut policy: P,
    trace: bool,
) -> Result<SampleRun> {
    if atoms < 1 {
        return Err(Error::param("a chain needs at least one atom"));
    }
    let mut z = initial_latent(noise.draw(atoms), schedule.steps())?;
    let mut rows = Vec::new();
    let mut last: Option<Vec<f64>> = None;
    let mut iteration = 0;
    let mut diverged = None;
    while let Some(s) = policy.next(iteration, &z.t, last.as_deref()) {
        let eps = noise.draw(atoms);
        let next = denoise_step(&z, &s, model, schedule, &eps)?;
        if next.pos.iter().chain(next.types.iter()).any(|v| !v.is_finite()) {
            diverged = Some(iteration);
            break;
        }
        let v = velocity(z.joined().view(), next.joined().view())?;
        if trace {
            rows.push(TraceRow {
                iteration,
                t: s.0.clone(),
                velocity: v.clone(),
            });
        }
        last = Some(v);
        z = next;
        iteration += 1;
    }
    Ok(SampleRun {
        molecule: decode(&z)?,
        latent: z,
        iterations: iteration,
        evaluations: iteration,
        trace: rows,
        diverged,
    })
}

/// Argmax types, dummies removed, survivors centered.
pub fn decode(z: &LatentState) -> Result<Molecule> {
    let types = decode_types(z.types.view());
    Ok(Molecule::new(z.pos.clone(), types)?.strip_dummies().centered())
}

/// Warm-up followed by velocity-driven per-atom advancement.
pub fn sample<D: Denoiser + ?Sized, N: NoiseSource + ?Sized>(
    model: &D,
    atoms: usize,
    config: &AsyncConfig,
    schedule: &NoiseSchedule,
    noise: &mut N,
    trace: bool,
) -> Result<SampleRun> {
    config.validate()?;
    let policy = Adaptive {
        config,
        steps: schedule.steps(),
        k: config.max_iters as i64,
        history: VelocityHistory::new(atoms, config.window),
        latest: None,
    };
    run_chain(model, atoms, schedule, noise, policy, trace)
}

/// All atoms share one level, decremented once per iteration.
pub fn sample_synchronous<D: Denoiser + ?Sized, N: NoiseSource + ?Sized>(
    model: &D,
    atoms: usize,
    schedule: &NoiseSchedule,
    noise: &mut N,
    trace: bool,
) -> Result<SampleRun> {
    run_chain(model, atoms, schedule, noise, Synchronous, trace)
}

/// Follows the staircase schedule with window `u` row by row.
pub fn sample_manual<D: Denoiser + ?Sized, N: NoiseSource + ?Sized>(
    model: &D,
    atoms: usize,
    u: usize,
    schedule: &NoiseSchedule,
    noise: &mut N,
    trace: bool,
) -> Result<SampleRun> {
    let rows = pyramid_schedule(schedule.steps(), atoms, u)?;
    run_chain(model, atoms, schedule, noise, Staircase { rows }, trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SamplingMode {
    Adaptive,
    Sync,
    Manual { u: usize },
}

/// `n` independent chains; chain `i` draws from sampling substream `i`.
pub fn sample_many<D: Denoiser + ?Sized>(
    model: &D,
    n: usize,
    atoms: usize,
    mode: SamplingMode,
    config: &AsyncConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    trace: bool,
) -> Result<Vec<SampleRun>> {
    let index = |i: usize| u32::try_from(i).map_err(|_| Error::param("too many chains"));
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng: Rng = indexed_substream(seed, Stream::Sampling, index(i)?);
            match mode {
                SamplingMode::Adaptive => sample(model, atoms, config, schedule, &mut rng, trace),
                SamplingMode::Sync => sample_synchronous(model, atoms, schedule, &mut rng, trace),
                SamplingMode::Manual { u } => sample_manual(model, atoms, u, schedule, &mut rng, trace),
            }
        })
        .collect()
}

/// Long-format trajectory: one row per iteration and atom.
pub fn write_trace_csv<W: Write>(mut out: W, trace: &[TraceRow]) -> std::io::Result<()> {
    writeln!(out, "iteration,atom,t,velocity")?;
    for row in trace {
        for (i, (t, v)) in row.t.iter().zip(&row.velocity).enumerate() {
            writeln!(out, "{},{i},{t},{v:e}", row.iteration)?;
        }
    }
    Ok(())
}

/// Predicts a fixed noise for every state; used to test the update algebra.
#[derive(Debug, Clone)]
pub struct FixedPrediction {
    pub pos: Array2<f64>,
    pub types: Array2<f64>,
}

impl Denoiser for FixedPrediction {
    fn predict(&self, state: &LatentState) -> Result<(Array2<f64>, Array2<f64>)> {
        if state.len() != self.pos.nrows() {
            return Err(Error::shape("fixed prediction has the wrong atom count"));
        }
        Ok((self.pos.clone(), self.types.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::egnn::{Egnn, EgnnParams, ModelConfig};
    use crate::molecule::AtomType;
    use crate::rng::substream;
    use crate::training::noise_molecule_with;

    fn tiny_model(horizon: usize) -> Egnn {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 8,
            horizon,
        };
        Egnn::new(EgnnParams::init(cfg, &mut substream(4, Stream::Init)))
    }

    fn zero_prediction(m: usize) -> FixedPrediction {
        FixedPrediction {
            pos: Array2::zeros((m, 3)),
            types: Array2::zeros((m, NUM_TYPES)),
        }
    }

    #[test]
    fn diverging_chain_is_an_error() {
        let s = NoiseSchedule::polynomial(10, 1e-5).unwrap();
        let mut bad = zero_prediction(3);
        bad.pos[[1, 2]] = f64::NAN;
        let run = sample_synchronous(&bad, 3, &s, &mut substream(0, Stream::Sampling), false).unwrap();
        assert_eq!(run.diverged, Some(0));
        assert_eq!(run.iterations, 0);
        assert_eq!(run.latent.t, TimestepVector::constant(3, 10));
        assert!(run.latent.pos.iter().all(|v| v.is_finite()));
        let ok = sample_synchronous(&zero_prediction(3), 3, &s, &mut substream(0, Stream::Sampling), false).unwrap();
        assert_eq!(ok.diverged, None);
    }

    #[test]
    fn equal_levels_leave_latent_unchanged() {
        let s = NoiseSchedule::polynomial(10, 1e-5).unwrap();
        let mut rng = substream(1, Stream::Sampling);
        let mut z = initial_latent(rng.draw(4), 10).unwrap();
        z.t = TimestepVector(vec![5, 6, 7, 5]);
        let noise = rng.draw(4);
        let out = denoise_step(&z, &z.t.clone(), &tiny_model(10), &s, &noise).unwrap();
        let gap = (&out.pos - &z.pos).mapv(f64::abs);
        assert!(gap.iter().all(|&d| d < 1e-12));
        assert_eq!(out.types, z.types);
    }

    #[test]
    fn frozen_rows_are_bitwise_unchanged() {
        let s = NoiseSchedule::polynomial(10, 1e-5).unwrap();
        let mut rng = substream(2, Stream::Sampling);
        let mut z = initial_latent(rng.draw(3), 10).unwrap();
        z.t = TimestepVector(vec![0, 3, 4]);
        let out = denoise_step(&z, &TimestepVector(vec![0, 2, 2]), &tiny_model(10), &s, &rng.draw(3)).unwrap();
        assert_eq!(out.pos.row(0), z.pos.row(0));
        assert_eq!(out.types.row(0), z.types.row(0));
        assert_ne!(out.pos.row(1), z.pos.row(1));
    }

    #[test]
    fn moving_atoms_keep_overall_center() {
        let s = NoiseSchedule::polynomial(10, 1e-5).unwrap();
        let mut rng = substream(3, Stream::Sampling);
        let mut z = initial_latent(rng.draw(5), 10).unwrap();
        z.t = TimestepVector(vec![0, 3, 4, 4, 2]);
        let out = denoise_step(&z, &TimestepVector(vec![0, 2, 3, 4, 1]), &tiny_model(10), &s, &rng.draw(5)).unwrap();
        let mean = out.pos.mean_axis(ndarray::Axis(0)).unwrap();
        assert!(mean.iter().all(|v| v.abs() < 1e-12));
    }

    fn one_step_setup() -> (NoiseSchedule, Molecule, Noise) {
        let s = NoiseSchedule::polynomial(1, 1e-5).unwrap();
        let mol = Molecule::from_atoms(&[
            (AtomType::C, [0.6, -0.2, 0.1]),
            (AtomType::O, [-0.6, 0.2, -0.1]),
        ]);
        let eps = Noise::draw(2, &mut substream(8, Stream::Noise));
        (s, mol, eps)
    }

    #[test]
    fn exact_noise_with_zero_draw_recovers_scaled_data() {
        let (s, mol, _) = one_step_setup();
        let (z1, eps) = noise_molecule_with(&mol, &TimestepVector::constant(2, 1), &s, 1.0, Noise::zeros(2)).unwrap();
        let oracle = FixedPrediction {
            pos: eps.pos,
            types: eps.types,
        };
        let z0 = denoise_step(&z1, &TimestepVector::constant(2, 0), &oracle, &s, &Noise::zeros(2)).unwrap();
        let want = &mol.positions * s.alpha(0);
        assert!((&z0.pos - &want).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn exact_noise_gives_posterior_mean() {
        let (s, mol, eps) = one_step_setup();
        let (z1, eps) = noise_molecule_with(&mol, &TimestepVector::constant(2, 1), &s, 1.0, eps).unwrap();
        let oracle = FixedPrediction {
            pos: eps.pos.clone(),
            types: eps.types.clone(),
        };
        let z0 = denoise_step(&z1, &TimestepVector::constant(2, 0), &oracle, &s, &Noise::zeros(2)).unwrap();
        let c = s.transition(1, 0).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                let mu = c.posterior_mean(mol.positions[[i, k]], z1.pos[[i, k]]);
                assert!((z0.pos[[i, k]] - mu).abs() < 1e-10);
            }
        }
        let oh = mol.one_hot(1.0);
        let decoded = decode_types((&z0.types).into());
        assert_eq!(decoded, mol.types);
        assert!((&z0.types - &(&oh * s.alpha(0))).iter().all(|d| d.abs() < 1e-2));
    }

    #[test]
    fn synchronous_chain_counts_and_decodes() {
        let s = NoiseSchedule::polynomial(12, 1e-5).unwrap();
        let run = sample_synchronous(&tiny_model(12), 5, &s, &mut substream(0, Stream::Sampling), true).unwrap();
        assert_eq!(run.evaluations, 12);
        assert_eq!(run.trace.len(), 12);
        assert!(run.latent.t.is_clean());
        assert!(run.molecule.types.iter().all(|t| !t.is_dummy()));
        let mean = run.molecule.positions.mean_axis(ndarray::Axis(0));
        if let Some(mean) = mean {
            assert!(mean.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn full_warmup_matches_synchronous() {
        let s = NoiseSchedule::polynomial(15, 1e-5).unwrap();
        let model = tiny_model(15);
        let cfg = AsyncConfig {
            lambda: 1.0,
            ..AsyncConfig::for_steps(15, 3)
        };
        let a = sample(&model, 4, &cfg, &s, &mut substream(5, Stream::Sampling), true).unwrap();
        let b = sample_synchronous(&model, 4, &s, &mut substream(5, Stream::Sampling), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn staircase_with_full_window_matches_synchronous() {
        let s = NoiseSchedule::polynomial(9, 1e-5).unwrap();
        let model = tiny_model(9);
        let a = sample_manual(&model, 4, 4, &s, &mut substream(6, Stream::Sampling), true).unwrap();
        let b = sample_synchronous(&model, 4, &s, &mut substream(6, Stream::Sampling), true).unwrap();
        assert_eq!(a, b);
        let c = sample_manual(&model, 4, 1, &s, &mut substream(6, Stream::Sampling), true).unwrap();
        assert_eq!(c.evaluations, 9 + 4 - 1);
        for w in c.trace.windows(2) {
            for (x, y) in w[0].t.iter().zip(&w[1].t) {
                assert!(y <= x && x - y <= 1);
            }
        }
    }

    #[test]
    fn adaptive_chain_respects_window_and_cap() {
        let s = NoiseSchedule::polynomial(20, 1e-5).unwrap();
        let model = tiny_model(20);
        let cfg = AsyncConfig::for_steps(20, 2);
        let run = sample(&model, 5, &cfg, &s, &mut substream(7, Stream::Sampling), true).unwrap();
        assert!(run.iterations <= cfg.hard_cap);
        assert!(run.latent.t.is_clean());
        let mut prev = vec![20; 5];
        for row in &run.trace {
            let (lo, hi) = (row.t.iter().min().unwrap(), row.t.iter().max().unwrap());
            assert!(hi - lo <= 4);
            assert!(row.t.iter().zip(&prev).all(|(a, b)| a <= b));
            prev = row.t.clone();
        }
    }

    #[test]
    fn hard_cap_forces_completion() {
        let s = NoiseSchedule::polynomial(20, 1e-5).unwrap();
        let cfg = AsyncConfig {
            max_iters: 3,
            hard_cap: 3,
            ..AsyncConfig::for_steps(20, 2)
        };
        let run = sample(&zero_prediction(3), 3, &cfg, &s, &mut substream(1, Stream::Sampling), false).unwrap();
        assert_eq!(run.iterations, 3);
        assert!(run.latent.t.is_clean());
    }

    #[test]
    fn parallel_chains_are_reproducible() {
        let s = NoiseSchedule::polynomial(8, 1e-5).unwrap();
        let model = tiny_model(8);
        let cfg = AsyncConfig::for_steps(8, 1);
        let a = sample_many(&model, 4, 4, SamplingMode::Adaptive, &cfg, &s, 11, false).unwrap();
        let b = sample_many(&model, 4, 4, SamplingMode::Adaptive, &cfg, &s, 11, false).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].latent, a[1].latent);
    }

    #[test]
    fn trace_csv_is_long_format() {
        let mut buf = Vec::new();
        let rows = [TraceRow {
            iteration: 0,
            t: vec![3, 2],
            velocity: vec![0.5, 0.25],
        }];
        write_trace_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,atom,t,velocity\n0,0,3,5e-1\n0,1,2,2.5e-1\n");
    }
}
