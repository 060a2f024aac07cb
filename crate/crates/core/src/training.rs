//! Asynchronous-noise training: per-atom noising, the simplified noise
//! prediction loss, Adam updates with an EMA copy, and checkpoints.

use std::collections::VecDeque;
use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asynctime::{sample_synchronous_timesteps, sample_training_timesteps, AsyncConfig, TimestepMode, TimestepVector};
use crate::egnn::tape::Tape;
use crate::egnn::{Checkpoint, Egnn, EgnnParams, Gradients, LatentState, ModelConfig};
use crate::error::{Error, Result};
use crate::molecule::{center_of_mass_project, Dataset, Molecule, NUM_TYPES};
use crate::rng::{substream, Rng, Stream};
use crate::schedule::NoiseSchedule;

/// Window of the trailing loss mean.
pub const SMOOTHING_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Diffusion horizon `T`.
    pub horizon: usize,
    /// Schedule precision `s`.
    pub precision: f64,
    /// Per-atom offset half-width `C`; unset means the largest training
    /// molecule.
    pub interval: Option<usize>,
    pub dummy_bias: f64,
    pub mode: TimestepMode,
    pub layers: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Optimizer steps to run.
    pub steps: u64,
    pub seed: u64,
    /// Weight of the type channels in the loss.
    pub type_weight: f64,
    /// Magnitude of the one-hot type encoding.
    pub type_scale: f64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 1000,
            precision: 1e-5,
            interval: None,
            dummy_bias: 0.5,
            mode: TimestepMode::Asynchronous,
            layers: 4,
            hidden: 64,
            batch_size: 16,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            steps: 2000,
            seed: 0,
            type_weight: 1.0,
            type_scale: 0.25,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon < 1 {
            return cfg("horizon must be at least 1");
        }
        if !(self.precision > 0.0 && self.precision < 0.5) {
            return cfg("precision must lie in (0, 0.5)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return cfg("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return cfg("ema decay must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return cfg("moment coefficients must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return cfg("adam epsilon must be positive");
        }
        if self.batch_size < 1 {
            return cfg("batch size must be at least 1");
        }
        if self.layers < 1 || self.hidden < 1 {
            return cfg("model needs at least one layer and one hidden feature");
        }
        if !(0.0..=1.0).contains(&self.dummy_bias) {
            return cfg("dummy bias must be a probability");
        }
        if self.type_scale <= 0.0 || self.type_weight < 0.0 {
            return cfg("type scale must be positive and type weight non-negative");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            horizon: self.horizon,
        }
    }

    /// Copy with every dataset-dependent default filled in.
    pub fn for_dataset(&self, dataset: &Dataset) -> TrainConfig {
        TrainConfig {
            interval: Some(self.interval.unwrap_or(dataset.max_size)),
            ..self.clone()
        }
    }

    pub fn async_config(&self) -> Result<AsyncConfig> {
        let interval = self
            .interval
            .ok_or_else(|| Error::Config("interval unset; resolve it with for_dataset".into()))?;
        Ok(AsyncConfig {
            dummy_bias: self.dummy_bias,
            ..AsyncConfig::for_steps(self.horizon, interval)
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::polynomial(self.horizon, self.precision)
    }
}

/// Standard-normal noise split into position and type channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub pos: Array2<f64>,
    pub types: Array2<f64>,
}

impl Noise {
    pub fn zeros(m: usize) -> Self {
        Noise {
            pos: Array2::zeros((m, 3)),
            types: Array2::zeros((m, NUM_TYPES)),
        }
    }

    /// Draws `M x 3` then `M x 6` values, row by row.
    pub fn draw<R: rand::Rng + ?Sized>(m: usize, rng: &mut R) -> Self {
        let pos = Array2::from_shape_simple_fn((m, 3), || rng.sample(StandardNormal));
        let types = Array2::from_shape_simple_fn((m, NUM_TYPES), || rng.sample(StandardNormal));
        Noise { pos, types }
    }
}

/// `z_i = alpha_{t_i} [x_i; h_i] + sigma_{t_i} eps_i` for a given draw. The
/// position part of `eps` is first projected to zero mean over real atoms;
/// the projected noise is returned as the regression target.
pub fn noise_molecule_with(
    mol: &Molecule,
    t: &TimestepVector,
    schedule: &NoiseSchedule,
    type_scale: f64,
    eps: Noise,
) -> Result<(LatentState, Noise)> {
    let m = mol.len();
    if t.len() != m || eps.pos.dim() != (m, 3) || eps.types.dim() != (m, NUM_TYPES) {
        return Err(Error::shape("noise, timesteps and molecule disagree in size"));
    }
    if let Some(&bad) = t.iter().find(|&&ti| ti > schedule.steps()) {
        return Err(Error::param(format!("timestep {bad} exceeds horizon {}", schedule.steps())));
    }
    let mask = mol.real_mask();
    let eps_pos = center_of_mass_project(eps.pos.view(), &mask)?;
    let h = mol.one_hot(type_scale);
    let mut pos = Array2::zeros((m, 3));
    let mut types = Array2::zeros((m, NUM_TYPES));
    for (i, &ti) in t.iter().enumerate() {
        let (a, sg) = (schedule.alpha(ti), schedule.sigma(ti));
        for k in 0..3 {
            pos[[i, k]] = a * mol.positions[[i, k]] + sg * eps_pos[[i, k]];
        }
        for k in 0..NUM_TYPES {
            types[[i, k]] = a * h[[i, k]] + sg * eps.types[[i, k]];
        }
    }
    let state = LatentState {
        pos,
        types,
        t: t.clone(),
        mask,
    };
    Ok((state, Noise { pos: eps_pos, types: eps.types }))
}

pub fn noise_molecule<R: rand::Rng + ?Sized>(
    mol: &Molecule,
    t: &TimestepVector,
    schedule: &NoiseSchedule,
    type_scale: f64,
    rng: &mut R,
) -> Result<(LatentState, Noise)> {
    let eps = Noise::draw(mol.len(), rng);
    noise_molecule_with(mol, t, schedule, type_scale, eps)
}

/// `(1/M) sum_i mask_i |dpos_i|^2 + w |dtype_i|^2`.
pub fn loss_diff(
    eps_true: &Noise,
    pos_pred: ArrayView2<'_, f64>,
    type_pred: ArrayView2<'_, f64>,
    mask: &[bool],
    type_weight: f64,
) -> Result<f64> {
    Ok(loss_and_grad(eps_true, pos_pred, type_pred, mask, type_weight)?.0)
}

/// Loss together with its gradient with respect to both predictions.
fn loss_and_grad(
    eps_true: &Noise,
    pos_pred: ArrayView2<'_, f64>,
    type_pred: ArrayView2<'_, f64>,
    mask: &[bool],
    type_weight: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let m = mask.len();
    if m == 0
        || pos_pred.dim() != (m, 3)
        || type_pred.dim() != (m, NUM_TYPES)
        || eps_true.pos.dim() != (m, 3)
        || eps_true.types.dim() != (m, NUM_TYPES)
    {
        return Err(Error::shape("loss inputs disagree in shape"));
    }
    let mut dpos = &pos_pred - &eps_true.pos;
    for (mut row, &keep) in dpos.rows_mut().into_iter().zip(mask) {
        if !keep {
            row.fill(0.0);
        }
    }
    let dtype = &type_pred - &eps_true.types;
    let inv = 1.0 / m as f64;
    let loss = inv * (dpos.iter().map(|d| d * d).sum::<f64>() + type_weight * dtype.iter().map(|d| d * d).sum::<f64>());
    Ok((loss, dpos * (2.0 * inv), dtype * (2.0 * inv * type_weight)))
}

/// Model, EMA copy, optimizer moments and the data/noise stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EgnnParams,
    pub ema: EgnnParams,
    pub adam_m: Gradients,
    pub adam_v: Gradients,
    pub step: u64,
    pub rng: Rng,
    /// Current epoch permutation and the position inside it.
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        let mut init = substream(config.seed, Stream::Init);
        let params = EgnnParams::init(config.model_config(), &mut init);
        let zeros = params.zeros_like();
        TrainState {
            ema: params.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            params,
            step: 0,
            rng: substream(config.seed, Stream::Noise),
            order: Vec::new(),
            cursor: 0,
        }
    }

    /// Indices of the next batch, reshuffling at epoch boundaries.
    pub fn next_batch(&mut self, dataset_len: usize, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size && dataset_len > 0 {
            if self.cursor >= self.order.len() || self.order.len() != dataset_len {
                self.order = (0..dataset_len).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.set("layers", config.layers);
        ck.set("hidden", config.hidden);
        ck.set("horizon", config.horizon);
        ck.set("precision", format!("{:e}", config.precision));
        ck.set("type_scale", format!("{:e}", config.type_scale));
        if let Some(c) = config.interval {
            ck.set("interval", c);
        }
        ck.set("step", self.step);
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        ck.set("rng_seed", seed);
        ck.set("rng_stream", self.rng.get_stream());
        ck.set("rng_word_pos", self.rng.get_word_pos());
        ck.set("cursor", self.cursor);
        let order: Vec<String> = self.order.iter().map(usize::to_string).collect();
        ck.set("order", order.join(","));
        ck.groups.insert("params".into(), self.params.named());
        ck.groups.insert("ema".into(), self.ema.named());
        let names = self.params.names();
        let moments = |g: &Gradients| names.iter().cloned().zip(g.iter().cloned()).collect();
        ck.groups.insert("adam_m".into(), moments(&self.adam_m));
        ck.groups.insert("adam_v".into(), moments(&self.adam_v));
        ck
    }

    /// Restores a state saved by [`to_checkpoint`](Self::to_checkpoint),
    /// checking it against `config`'s architecture.
    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        let model = model_config_of(ck)?;
        if model != config.model_config() {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {model:?} does not match configuration {:?}",
                config.model_config()
            )));
        }
        let params = EgnnParams::from_tensors(model, ck.group("params")?.to_vec())?;
        let ema = EgnnParams::from_tensors(model, ck.group("ema")?.to_vec())?;
        let strip = |name: &str| -> Result<Gradients> {
            let p = EgnnParams::from_tensors(model, ck.group(name)?.to_vec())?;
            Ok(p.tensors().to_vec())
        };
        let seed_hex = ck.get("rng_seed")?;
        let mut seed = [0u8; 32];
        if seed_hex.len() != 64 {
            return Err(Error::Checkpoint("rng seed must be 64 hex digits".into()));
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Checkpoint("rng seed is not hex".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(ck.get_parsed("rng_stream")?);
        rng.set_word_pos(ck.get_parsed("rng_word_pos")?);
        let order_raw = ck.get("order")?;
        let order = if order_raw.is_empty() {
            Vec::new()
        } else {
            order_raw
                .split(',')
                .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("bad order entry `{v}`"))))
                .collect::<Result<_>>()?
        };
        Ok(TrainState {
            params,
            ema,
            adam_m: strip("adam_m")?,
            adam_v: strip("adam_v")?,
            step: ck.get_parsed("step")?,
            rng,
            order,
            cursor: ck.get_parsed("cursor")?,
        })
    }
}

/// Architecture recorded in a checkpoint header.
pub fn model_config_of(ck: &Checkpoint) -> Result<ModelConfig> {
    Ok(ModelConfig {
        layers: ck.get_parsed("layers")?,
        hidden: ck.get_parsed("hidden")?,
        horizon: ck.get_parsed("horizon")?,
    })
}

/// Weights for sampling from a checkpoint, EMA copy or raw.
pub fn load_model(ck: &Checkpoint, use_ema: bool) -> Result<Egnn> {
    let model = model_config_of(ck)?;
    let group = if use_ema { "ema" } else { "params" };
    Ok(Egnn::new(EgnnParams::from_tensors(model, ck.group(group)?.to_vec())?))
}

struct Prepared {
    state: LatentState,
    target: Noise,
}

/// One optimizer update on `batch`. Returns the batch-mean loss.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Molecule],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let async_cfg = config.async_config()?;
    let mut items = Vec::with_capacity(batch.len());
    for &mol in batch {
        let t = match config.mode {
            TimestepMode::Asynchronous => {
                let dummies: Vec<bool> = mol.types.iter().map(|t| t.is_dummy()).collect();
                sample_training_timesteps(config.horizon, &async_cfg, &dummies, &mut state.rng)
            }
            TimestepMode::Synchronous => sample_synchronous_timesteps(config.horizon, mol.len(), &mut state.rng),
        };
        let (latent, target) = noise_molecule(mol, &t, schedule, config.type_scale, &mut state.rng)?;
        items.push(Prepared { state: latent, target });
    }

    let model = Egnn::new(state.params.clone());
    let results: Vec<Result<(f64, Gradients)>> = items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new(model.params.tensors());
            let (p, t) = model.forward_on_tape(&mut tape, &item.state)?;
            let (loss, gp, gt) = loss_and_grad(
                &item.target,
                tape.value(p),
                tape.value(t),
                &item.state.mask,
                config.type_weight,
            )?;
            Ok((loss, tape.backward(&[(p, gp.view()), (t, gt.view())])))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = state.params.zeros_like();
    for r in results {
        let (l, g) = r?;
        loss += l * scale;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.scaled_add(scale, &gi);
        }
    }
    state.step += 1;
    if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { step: state.step, loss });
    }

    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(state.step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - b2.powi(state.step.min(i32::MAX as u64) as i32);
    let lr = config.learning_rate;
    let decay = config.ema_decay;
    for (k, g) in grads.iter().enumerate() {
        let m = &mut state.adam_m[k];
        let v = &mut state.adam_v[k];
        let p = &mut state.params.tensors_mut()[k];
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + config.adam_eps);
        });
        let e = &mut state.ema.tensors_mut()[k];
        ndarray::Zip::from(e)
            .and(&state.params.tensors()[k])
            .for_each(|e, &p| *e = decay * *e + (1.0 - decay) * p);
    }
    Ok(loss)
}

/// Trailing mean over the last [`SMOOTHING_WINDOW`] losses.
#[derive(Debug, Clone, Default)]
pub struct LossSmoother {
    window: VecDeque<f64>,
}

impl LossSmoother {
    pub fn push(&mut self, loss: f64) -> f64 {
        self.window.push_back(loss);
        if self.window.len() > SMOOTHING_WINDOW {
            self.window.pop_front();
        }
        self.mean()
    }

    pub fn mean(&self) -> f64 {
        self.window.iter().sum::<f64>() / self.window.len().max(1) as f64
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub smoothed: f64,
}

pub fn write_log_header<W: Write>(mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,loss,smoothed_loss")
}

pub fn write_log_row<W: Write>(mut out: W, row: &LogRow) -> std::io::Result<()> {
    writeln!(out, "{},{:e},{:e}", row.step, row.loss, row.smoothed)
}

/// Runs `steps` updates over `dataset`, calling `on_step` after each one.
pub fn train<F>(
    state: &mut TrainState,
    dataset: &Dataset,
    config: &TrainConfig,
    steps: u64,
    mut on_step: F,
) -> Result<Vec<LogRow>>
where
    F: FnMut(&TrainState, &LogRow) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(Error::param("empty training set"));
    }
    let config = &config.for_dataset(dataset);
    let schedule = config.schedule()?;
    let mut smoother = LossSmoother::default();
    let mut rows = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let idx = state.next_batch(dataset.len(), config.batch_size);
        let batch: Vec<&Molecule> = idx.iter().map(|&i| &dataset.molecules[i]).collect();
        let loss = train_step(state, &batch, config, &schedule)?;
        let row = LogRow {
            step: state.step,
            loss,
            smoothed: smoother.push(loss),
        };
        on_step(state, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molecule::{make_toy_dataset, AtomType};
    use ndarray::array;

    fn tiny() -> TrainConfig {
        TrainConfig {
            horizon: 50,
            layers: 1,
            hidden: 8,
            batch_size: 4,
            steps: 3,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn clean_level_is_nearly_identity() {
        let s = NoiseSchedule::polynomial(1000, 1e-5).unwrap();
        let mol = make_toy_dataset(0, 1).molecules[0].clone();
        let mut rng = substream(0, Stream::Noise);
        let (z, _) = noise_molecule(&mol, &TimestepVector::constant(mol.len(), 0), &s, 1.0, &mut rng).unwrap();
        let gap = (&z.pos - &mol.positions).mapv(f64::abs);
        assert!(gap.iter().all(|&d| d < 2e-2));
        assert!(gap.iter().any(|&d| d > 0.0));
    }

    #[test]
    fn zero_draw_scales_the_signal() {
        let s = NoiseSchedule::polynomial(20, 1e-5).unwrap();
        let mol = Molecule::from_atoms(&[(AtomType::C, [0.5, 0.0, 0.0]), (AtomType::O, [-0.5, 0.0, 0.0])]);
        let t = TimestepVector(vec![3, 11]);
        let (z, eps) = noise_molecule_with(&mol, &t, &s, 1.0, Noise::zeros(2)).unwrap();
        assert_eq!(eps, Noise::zeros(2));
        assert_eq!(z.pos[[0, 0]], s.alpha(3) * 0.5);
        assert_eq!(z.pos[[1, 0]], s.alpha(11) * -0.5);
        assert_eq!(z.types[[1, AtomType::O.index()]], s.alpha(11));
    }

    #[test]
    fn projected_noise_sums_to_zero_over_real_atoms() {
        let s = NoiseSchedule::polynomial(20, 1e-5).unwrap();
        let mol = make_toy_dataset(0, 2).molecules[1].clone();
        let mut rng = substream(3, Stream::Noise);
        let (_, eps) = noise_molecule(&mol, &TimestepVector::constant(mol.len(), 7), &s, 1.0, &mut rng).unwrap();
        for k in 0..3 {
            let sum: f64 = (0..mol.len()).filter(|&i| !mol.types[i].is_dummy()).map(|i| eps.pos[[i, k]]).sum();
            assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let truth = Noise::zeros(1);
        let pos = array![[1.0, 2.0, 2.0]];
        let ty = Array2::zeros((1, NUM_TYPES));
        assert_eq!(loss_diff(&truth, pos.view(), ty.view(), &[true], 1.0).unwrap(), 9.0);
        assert_eq!(loss_diff(&truth, truth.pos.view(), ty.view(), &[true], 1.0).unwrap(), 0.0);
        let doubled = &pos * 2.0;
        assert_eq!(loss_diff(&truth, doubled.view(), ty.view(), &[true], 1.0).unwrap(), 36.0);
        assert_eq!(loss_diff(&truth, pos.view(), ty.view(), &[false], 1.0).unwrap(), 0.0);
        assert!(loss_diff(&truth, pos.view(), ty.view(), &[true, true], 1.0).is_err());
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let mut rng = substream(9, Stream::Noise);
        let truth = Noise::draw(3, &mut rng);
        let pred = Noise::draw(3, &mut rng);
        let mask = [true, false, true];
        let (_, gp, gt) = loss_and_grad(&truth, pred.pos.view(), pred.types.view(), &mask, 0.7).unwrap();
        let h = 1e-6;
        for (i, k) in [(0, 1), (1, 2), (2, 0)] {
            let mut a = pred.pos.clone();
            let mut b = pred.pos.clone();
            a[[i, k]] += h;
            b[[i, k]] -= h;
            let fd = (loss_diff(&truth, a.view(), pred.types.view(), &mask, 0.7).unwrap()
                - loss_diff(&truth, b.view(), pred.types.view(), &mask, 0.7).unwrap())
                / (2.0 * h);
            assert!((fd - gp[[i, k]]).abs() < 1e-7);
            let mut a = pred.types.clone();
            let mut b = pred.types.clone();
            a[[i, k + 3]] += h;
            b[[i, k + 3]] -= h;
            let fd = (loss_diff(&truth, pred.pos.view(), a.view(), &mask, 0.7).unwrap()
                - loss_diff(&truth, pred.pos.view(), b.view(), &mask, 0.7).unwrap())
                / (2.0 * h);
            assert!((fd - gt[[i, k + 3]]).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny()
        };
        let ds = make_toy_dataset(0, 4);
        let mut st = TrainState::new(&cfg);
        let before = st.params.clone();
        let rows = train(&mut st, &ds, &cfg, 2, |_, _| Ok(())).unwrap();
        assert_eq!(st.params, before);
        assert!(rows.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let ds = make_toy_dataset(1, 6);
        let mut a = TrainState::new(&cfg);
        let mut b = TrainState::new(&cfg);
        let la = train(&mut a, &ds, &cfg, 3, |_, _| Ok(())).unwrap();
        let lb = train(&mut b, &ds, &cfg, 3, |_, _| Ok(())).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_ne!(a.params, TrainState::new(&cfg).params);
    }

    #[test]
    fn zero_decay_ema_tracks_params() {
        let cfg = TrainConfig {
            ema_decay: 0.0,
            ..tiny()
        };
        let ds = make_toy_dataset(0, 4);
        let mut st = TrainState::new(&cfg);
        train(&mut st, &ds, &cfg, 2, |_, _| Ok(())).unwrap();
        assert_eq!(st.ema, st.params);
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let cfg = tiny();
        let ds = make_toy_dataset(2, 5);
        let mut full = TrainState::new(&cfg);
        train(&mut full, &ds, &cfg, 4, |_, _| Ok(())).unwrap();

        let mut part = TrainState::new(&cfg);
        train(&mut part, &ds, &cfg, 2, |_, _| Ok(())).unwrap();
        let text = part.to_checkpoint(&cfg).to_text();
        let mut resumed = TrainState::from_checkpoint(&Checkpoint::parse(&text).unwrap(), &cfg).unwrap();
        assert_eq!(resumed, part);
        train(&mut resumed, &ds, &cfg, 2, |_, _| Ok(())).unwrap();
        assert_eq!(resumed, full);

        let other = TrainConfig { hidden: 4, ..cfg };
        assert!(matches!(
            TrainState::from_checkpoint(&Checkpoint::parse(&text).unwrap(), &other),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn exploding_updates_are_reported() {
        let cfg = TrainConfig {
            learning_rate: 1e200,
            ..tiny()
        };
        let ds = make_toy_dataset(0, 4);
        let mut st = TrainState::new(&cfg);
        let err = train(&mut st, &ds, &cfg, 20, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn smoother_is_trailing_mean() {
        let mut s = LossSmoother::default();
        for i in 0..150 {
            s.push(i as f64);
        }
        assert_eq!(s.mean(), (50..150).sum::<usize>() as f64 / 100.0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { learning_rate: -1.0, ..tiny() }.validate().is_err());
        assert!(TrainConfig { ema_decay: 1.0, ..tiny() }.validate().is_err());
        assert!(tiny().validate().is_ok());
    }
}
