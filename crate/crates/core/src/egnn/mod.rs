//! E(3)-equivariant dynamics network.
//!
//! Atoms form a fully connected graph. Each equivariant convolution layer
//! computes messages from invariant inputs `(h_i, h_j, |x_i - x_j|^2)`,
//! gates them with a learned soft edge weight, updates features
//! residually, and moves coordinates along `(x_i - x_j) / (d_ij + 1)`.
//! Position noise is read off as the net coordinate displacement projected
//! onto the zero center-of-mass subspace; type noise is decoded from the
//! final features.

mod checkpoint;
pub mod tape;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asynctime::TimestepVector;
use crate::error::{Error, Result};
use crate::molecule::NUM_TYPES;
use tape::{Tape, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};

/// Per-atom input width: type channels plus the normalized timestep.
pub const INPUT_WIDTH: usize = NUM_TYPES + 1;

/// Tensors per equivariant layer.
const LAYER_TENSORS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Diffusion horizon `T` used to normalize timesteps.
    pub horizon: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            hidden: 64,
            horizon: 1000,
        }
    }
}

// Offsets of the tensors inside one layer block.
mod slot {
    pub const E_WI: usize = 0;
    pub const E_W2: usize = 4;
    pub const E_B2: usize = 5;
    pub const INF_W: usize = 6;
    pub const INF_B: usize = 7;
    pub const H_WH: usize = 8;
    pub const H_WA: usize = 9;
    pub const H_B1: usize = 10;
    pub const H_W2: usize = 11;
    pub const H_B2: usize = 12;
    pub const X_WI: usize = 13;
    pub const X_W2: usize = 17;
    pub const X_B2: usize = 18;
    pub const X_W3: usize = 19;
    pub const X_B3: usize = 20;

    pub const NAMES: [&str; super::LAYER_TENSORS] = [
        "edge.w_src", "edge.w_dst", "edge.w_dist", "edge.b1", "edge.w2", "edge.b2",
        "gate.w", "gate.b",
        "node.w_self", "node.w_agg", "node.b1", "node.w2", "node.b2",
        "coord.w_src", "coord.w_dst", "coord.w_dist", "coord.b1", "coord.w2", "coord.b2", "coord.w3", "coord.b3",
    ];
}

/// `(rows, cols, fan_in)` of every tensor, in storage order.
fn layout(config: &ModelConfig) -> Vec<(String, usize, usize, usize)> {
    let d = config.hidden;
    let pair_fan = 2 * d + 1;
    let mut out = vec![
        ("embed.w".to_string(), INPUT_WIDTH, d, INPUT_WIDTH),
        ("embed.b".to_string(), 1, d, 0),
    ];
    for l in 0..config.layers {
        let shapes = [
            (d, d, pair_fan),
            (d, d, pair_fan),
            (1, d, pair_fan),
            (1, d, 0),
            (d, d, d),
            (1, d, 0),
            (d, 1, d),
            (1, 1, 0),
            (d, d, 2 * d),
            (d, d, 2 * d),
            (1, d, 0),
            (d, d, d),
            (1, d, 0),
            (d, d, pair_fan),
            (d, d, pair_fan),
            (1, d, pair_fan),
            (1, d, 0),
            (d, d, d),
            (1, d, 0),
            (d, 1, d),
            (1, 1, 0),
        ];
        for (k, (r, c, f)) in shapes.into_iter().enumerate() {
            out.push((format!("layer{l}.{}", slot::NAMES[k]), r, c, f));
        }
    }
    out.push(("out.w".to_string(), d, NUM_TYPES, d));
    out.push(("out.b".to_string(), 1, NUM_TYPES, 0));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgnnParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl EgnnParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let slots = layout(&config);
        EgnnParams {
            config,
            names: slots.iter().map(|s| s.0.clone()).collect(),
            tensors: slots.iter().map(|s| Array2::zeros((s.1, s.2))).collect(),
        }
    }

    /// Fan-in scaled uniform weights, zero biases, and a zero final
    /// coordinate layer so the initial network leaves coordinates in place.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::filled(config, rng, 0.0);
        for l in 0..config.layers {
            let k = p.layer_index(l, slot::X_W3);
            p.tensors[k].fill(0.0);
        }
        p
    }

    /// Fan-in scaled weights and small random biases everywhere, so that
    /// every parameter influences the output.
    pub fn randomized<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        Self::filled(config, rng, 0.1)
    }

    fn filled<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R, bias_bound: f64) -> Self {
        let slots = layout(&config);
        let mut p = Self::zeros(config);
        for (tensor, (_, _, _, fan_in)) in p.tensors.iter_mut().zip(&slots) {
            let bound = if *fan_in == 0 {
                bias_bound
            } else {
                1.0 / (*fan_in as f64).sqrt()
            };
            if bound == 0.0 {
                continue;
            }
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            tensor.mapv_inplace(|_| dist.sample(rng));
        }
        p
    }

    fn layer_index(&self, layer: usize, k: usize) -> usize {
        2 + layer * LAYER_TENSORS + k
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect()
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let slots = layout(&config);
        if named.len() != slots.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(slots.len());
        for ((name, t), (want, r, c, _)) in named.into_iter().zip(&slots) {
            if &name != want || t.dim() != (*r, *c) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match `{want}` ({r}, {c})",
                    t.dim()
                )));
            }
            tensors.push(t);
        }
        Ok(EgnnParams {
            config,
            names: slots.into_iter().map(|s| s.0).collect(),
            tensors,
        })
    }

    pub fn named(&self) -> Vec<(String, Array2<f64>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// One gradient tensor per parameter tensor.
pub type Gradients = Vec<Array2<f64>>;

/// Noisy per-atom latent together with each atom's noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `M x 3` coordinate channels.
    pub pos: Array2<f64>,
    /// `M x 6` type channels.
    pub types: Array2<f64>,
    pub t: TimestepVector,
    /// Atoms included in center-of-mass projections.
    pub mask: Vec<bool>,
}

impl LatentState {
    pub fn len(&self) -> usize {
        self.pos.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.nrows() == 0
    }

    fn check(&self) -> Result<()> {
        let m = self.pos.nrows();
        if m < 1 {
            return Err(Error::param("latent state has no atoms"));
        }
        if self.pos.ncols() != 3
            || self.types.dim() != (m, NUM_TYPES)
            || self.t.len() != m
            || self.mask.len() != m
        {
            return Err(Error::shape(format!(
                "inconsistent latent: pos {:?}, types {:?}, {} timesteps, {} mask entries",
                self.pos.dim(),
                self.types.dim(),
                self.t.len(),
                self.mask.len()
            )));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::param("latent state has no real atoms"));
        }
        Ok(())
    }

    /// Position and type channels side by side, `M x 9`.
    pub fn joined(&self) -> Array2<f64> {
        ndarray::concatenate![ndarray::Axis(1), self.pos, self.types]
    }
}

/// Anything that predicts `(position noise, type noise)` for a latent.
pub trait Denoiser: Sync {
    fn predict(&self, state: &LatentState) -> Result<(Array2<f64>, Array2<f64>)>;
}

/// Ordered pairs `(i, j)` with `i != j`.
fn edges(m: usize) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(m * m.saturating_sub(1));
    let mut dst = Vec::with_capacity(src.capacity());
    for i in 0..m {
        for j in 0..m {
            if i != j {
                src.push(i);
                dst.push(j);
            }
        }
    }
    (src, dst)
}

/// `|x_i - x_j|^2` for every ordered pair, in the order the layers use.
pub fn squared_distances(x: ArrayView2<'_, f64>) -> Vec<(usize, usize, f64)> {
    let (src, dst) = edges(x.nrows());
    src.into_iter()
        .zip(dst)
        .map(|(i, j)| {
            let d2 = (0..3).map(|k| (x[[i, k]] - x[[j, k]]).powi(2)).sum();
            (i, j, d2)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Egnn {
    pub params: EgnnParams,
}

struct Graph {
    src: Vec<usize>,
    dst: Vec<usize>,
    m: usize,
}

impl Egnn {
    pub fn new(params: EgnnParams) -> Self {
        Egnn { params }
    }

    pub fn config(&self) -> ModelConfig {
        self.params.config
    }

    fn p(&self, tape: &mut Tape<'_>, layer: usize, k: usize) -> Var {
        tape.param(self.params.layer_index(layer, k))
    }

    /// Two-input affine map whose inputs are gathered per edge:
    /// `A[src] + B[dst] + d2 * w_d + b`, identical to one affine map over
    /// the concatenation `[h_src, h_dst, d2]`.
    fn pair_affine(
        &self,
        tape: &mut Tape<'_>,
        layer: usize,
        base: usize,
        h: Var,
        d2: Var,
        g: &Graph,
    ) -> Var {
        let wi = self.p(tape, layer, base);
        let wj = self.p(tape, layer, base + 1);
        let wd = self.p(tape, layer, base + 2);
        let b = self.p(tape, layer, base + 3);
        let a = tape.matmul(h, wi);
        let bb = tape.matmul(h, wj);
        let a_e = tape.gather(a, &g.src);
        let b_e = tape.gather(bb, &g.dst);
        let dist = tape.matmul(d2, wd);
        let s = tape.add(a_e, b_e);
        let s = tape.add(s, dist);
        tape.add_row(s, b)
    }

    fn layer_on_tape(&self, tape: &mut Tape<'_>, layer: usize, h: Var, x: Var, g: &Graph) -> (Var, Var) {
        use slot::*;
        let xs = tape.gather(x, &g.src);
        let xd = tape.gather(x, &g.dst);
        let diff = tape.sub(xs, xd);
        let sq = tape.mul(diff, diff);
        let d2 = tape.row_sum(sq);

        // messages and soft edge weights
        let pre = self.pair_affine(tape, layer, E_WI, h, d2, g);
        let m1 = tape.silu(pre);
        let w2 = self.p(tape, layer, E_W2);
        let b2 = self.p(tape, layer, E_B2);
        let m2 = tape.affine(m1, w2, b2);
        let msg = tape.silu(m2);
        let gw = self.p(tape, layer, INF_W);
        let gb = self.p(tape, layer, INF_B);
        let gate_pre = tape.affine(msg, gw, gb);
        let gate = tape.sigmoid(gate_pre);
        let gated = tape.mul_col(msg, gate);
        let agg = tape.scatter_add(gated, &g.src, g.m);

        // residual feature update
        let wh = self.p(tape, layer, H_WH);
        let wa = self.p(tape, layer, H_WA);
        let hb1 = self.p(tape, layer, H_B1);
        let hh = tape.matmul(h, wh);
        let ha = tape.matmul(agg, wa);
        let hpre = tape.add(hh, ha);
        let hpre = tape.add_row(hpre, hb1);
        let hact = tape.silu(hpre);
        let hw2 = self.p(tape, layer, H_W2);
        let hb2 = self.p(tape, layer, H_B2);
        let hupd = tape.affine(hact, hw2, hb2);
        let h_next = tape.add(h, hupd);

        // coordinate update from the pre-update features
        let cpre = self.pair_affine(tape, layer, X_WI, h, d2, g);
        let c1 = tape.silu(cpre);
        let cw2 = self.p(tape, layer, X_W2);
        let cb2 = self.p(tape, layer, X_B2);
        let c2 = tape.affine(c1, cw2, cb2);
        let c2 = tape.silu(c2);
        let cw3 = self.p(tape, layer, X_W3);
        let cb3 = self.p(tape, layer, X_B3);
        let coef = tape.affine(c2, cw3, cb3);
        let dist = tape.sqrt_eps(d2);
        let inv = tape.recip_shift(dist, 1.0);
        let coef = tape.mul(coef, inv);
        let shift = tape.mul_col(diff, coef);
        let delta = tape.scatter_add(shift, &g.src, g.m);
        let x_next = tape.add(x, delta);
        (h_next, x_next)
    }

    /// One equivariant layer on explicit features and coordinates.
    pub fn egcl_forward(
        &self,
        layer: usize,
        h: ArrayView2<'_, f64>,
        x: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let m = x.nrows();
        if m < 1 {
            return Err(Error::param("equivariant layer needs at least one node"));
        }
        if layer >= self.params.config.layers
            || h.dim() != (m, self.params.config.hidden)
            || x.ncols() != 3
        {
            return Err(Error::shape(format!(
                "layer {layer}: features {:?}, coordinates {:?}",
                h.dim(),
                x.dim()
            )));
        }
        let (src, dst) = edges(m);
        let g = Graph { src, dst, m };
        let mut tape = Tape::new(self.params.tensors());
        let hv = tape.input(h.to_owned());
        let xv = tape.input(x.to_owned());
        let (ho, xo) = self.layer_on_tape(&mut tape, layer, hv, xv, &g);
        Ok((tape.value(ho).to_owned(), tape.value(xo).to_owned()))
    }

    /// Records the full forward pass, returning the position-noise and
    /// type-noise output nodes.
    pub fn forward_on_tape(&self, tape: &mut Tape<'_>, state: &LatentState) -> Result<(Var, Var)> {
        state.check()?;
        let m = state.len();
        let horizon = self.params.config.horizon.max(1) as f64;
        let mut input = Array2::zeros((m, INPUT_WIDTH));
        input.slice_mut(ndarray::s![.., ..NUM_TYPES]).assign(&state.types);
        for (i, &t) in state.t.iter().enumerate() {
            input[[i, NUM_TYPES]] = t as f64 / horizon;
        }
        let (src, dst) = edges(m);
        let g = Graph { src, dst, m };

        let inp = tape.input(input);
        let x0 = tape.input(state.pos.clone());
        let ew = tape.param(0);
        let eb = tape.param(1);
        let mut h = tape.affine(inp, ew, eb);
        let mut x = x0;
        for l in 0..self.params.config.layers {
            (h, x) = self.layer_on_tape(tape, l, h, x, &g);
        }
        let disp = tape.sub(x, x0);
        let eps_pos = tape.center(disp, &state.mask);
        let n = self.params.tensors().len();
        let ow = tape.param(n - 2);
        let ob = tape.param(n - 1);
        let eps_type = tape.affine(h, ow, ob);
        Ok((eps_pos, eps_type))
    }

    /// `(M x 3 position noise, M x 6 type noise)`.
    pub fn dynamics_forward(&self, state: &LatentState) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut tape = Tape::new(self.params.tensors());
        let (p, t) = self.forward_on_tape(&mut tape, state)?;
        Ok((tape.value(p).to_owned(), tape.value(t).to_owned()))
    }

    /// Parameter gradients of `<upstream_pos, eps_pos> + <upstream_type, eps_type>`.
    pub fn dynamics_backward(
        &self,
        state: &LatentState,
        upstream_pos: ArrayView2<'_, f64>,
        upstream_type: ArrayView2<'_, f64>,
    ) -> Result<Gradients> {
        let mut tape = Tape::new(self.params.tensors());
        let (p, t) = self.forward_on_tape(&mut tape, state)?;
        if upstream_pos.dim() != tape.value(p).dim() || upstream_type.dim() != tape.value(t).dim() {
            return Err(Error::shape("upstream gradient does not match the outputs"));
        }
        Ok(tape.backward(&[(p, upstream_pos), (t, upstream_type)]))
    }

    /// Predictions for many states, evaluated in parallel, in input order.
    pub fn predict_batch(&self, states: &[LatentState]) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        states.par_iter().map(|s| self.dynamics_forward(s)).collect()
    }
}

impl Denoiser for Egnn {
    fn predict(&self, state: &LatentState) -> Result<(Array2<f64>, Array2<f64>)> {
        self.dynamics_forward(state)
    }
}
