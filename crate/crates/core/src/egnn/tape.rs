//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! referenced by index into a borrowed slice so a forward pass never copies
//! weights. [`Tape::backward`] seeds upstream gradients on output nodes and
//! returns the gradient of every parameter.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + row` with `row` of shape `1 x n`.
    AddRow(Var, Var),
    /// `a * col` with `col` of shape `rows x 1`.
    MulCol(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    RowSum(Var),
    /// `sqrt(a + eps)`.
    SqrtEps(Var),
    /// `1 / (a + c)`.
    RecipShift(Var),
    /// Subtract the masked-row mean from masked rows.
    Center(Var, Vec<bool>),
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p [Array2<f64>],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Array2<f64>]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(a), _) => a.view(),
            (None, Op::Param(i)) => self.params[*i].view(),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) - &self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = &self.value(a) + &self.value(row);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let out = &self.value(a) * &self.value(col);
        self.push(out, Op::MulCol(a, col), &[a, col])
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), rows);
        self.push(out, Op::Gather(a, rows.to_vec()), &[a])
    }

    /// Sums rows of `a` into `n` output rows, row `e` going to `targets[e]`.
    pub fn scatter_add(&mut self, a: Var, targets: &[usize], n: usize) -> Var {
        let src = self.value(a);
        let mut out = Array2::zeros((n, src.ncols()));
        for (row, &t) in src.rows().into_iter().zip(targets) {
            let mut dst = out.row_mut(t);
            dst += &row;
        }
        self.push(out, Op::ScatterAdd(a, targets.to_vec()), &[a])
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSum(a), &[a])
    }

    pub fn sqrt_eps(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| (x + SQRT_EPS).sqrt());
        self.push(out, Op::SqrtEps(a), &[a])
    }

    pub fn recip_shift(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| 1.0 / (x + c));
        self.push(out, Op::RecipShift(a), &[a])
    }

    pub fn center(&mut self, a: Var, mask: &[bool]) -> Var {
        let out = centered(self.value(a), mask);
        self.push(out, Op::Center(a, mask.to_vec()), &[a])
    }

    /// Propagates `seeds` back through the tape and returns one gradient per
    /// parameter (zeros for parameters the forward pass never touched).
    pub fn backward(&self, seeds: &[(Var, ArrayView2<'_, f64>)]) -> Vec<Array2<f64>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g.to_owned());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let want = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if want(a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads[a.0], ga);
                    }
                    if want(b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if want(b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if want(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if want(b) {
                        accumulate(&mut grads[b.0], -&g);
                    }
                    if want(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if want(a) {
                        accumulate(&mut grads[a.0], &g * &self.value(*b));
                    }
                    if want(b) {
                        accumulate(&mut grads[b.0], &g * &self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if want(row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[row.0], gr);
                    }
                    if want(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::MulCol(a, col) => {
                    if want(col) {
                        let gc = (&g * &self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads[col.0], gc);
                    }
                    if want(a) {
                        accumulate(&mut grads[a.0], &g * &self.value(*col));
                    }
                }
                Op::Silu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        let sg = sigmoid(x);
                        *gi *= sg * (1.0 + x * (1.0 - sg));
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    let y = node.value.as_ref().expect("sigmoid keeps its output");
                    Zip::from(&mut ga).and(y).for_each(|gi, &yi| *gi *= yi * (1.0 - yi));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gather(a, rows) => {
                    let src = self.value(*a);
                    let mut ga = Array2::zeros(src.raw_dim());
                    for (grow, &r) in g.rows().into_iter().zip(rows) {
                        let mut dst = ga.row_mut(r);
                        dst += &grow;
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ScatterAdd(a, targets) => {
                    accumulate(&mut grads[a.0], g.select(Axis(0), targets));
                }
                Op::RowSum(a) => {
                    let cols = self.value(*a).ncols();
                    let ga = g
                        .broadcast((g.nrows(), cols))
                        .expect("column vector broadcasts")
                        .to_owned();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SqrtEps(a) => {
                    let y = node.value.as_ref().expect("sqrt keeps its output");
                    let ga = &g / &(y * 2.0);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::RecipShift(a) => {
                    let y = node.value.as_ref().expect("recip keeps its output");
                    let ga = -&g * &(y * y);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Center(a, mask) => {
                    // The projection is symmetric, so it is its own adjoint.
                    accumulate(&mut grads[a.0], centered(g.view(), mask));
                }
            }
        }
        self.param_vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| grads[v.0].take())
                    .unwrap_or_else(|| Array2::zeros(self.params[i].raw_dim()))
            })
            .collect()
    }
}

/// Added under the square root of squared distances so the derivative stays
/// finite for coincident atoms.
pub const SQRT_EPS: f64 = 1e-8;

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn centered(a: ArrayView2<'_, f64>, mask: &[bool]) -> Array2<f64> {
    let mut out = a.to_owned();
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return out;
    }
    let mut mean = ndarray::Array1::<f64>::zeros(a.ncols());
    for (row, &m) in a.rows().into_iter().zip(mask) {
        if m {
            mean += &row;
        }
    }
    mean /= n as f64;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let mut row = out.slice_mut(s![i, ..]);
            row -= &mean;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(
        params: &mut [Array2<f64>],
        f: &dyn Fn(&[Array2<f64>]) -> f64,
        p: usize,
        r: usize,
        c: usize,
    ) -> f64 {
        let h = 1e-6;
        let orig = params[p][[r, c]];
        params[p][[r, c]] = orig + h;
        let up = f(params);
        params[p][[r, c]] = orig - h;
        let down = f(params);
        params[p][[r, c]] = orig;
        (up - down) / (2.0 * h)
    }

    // Scalar objective: sum of (output * weights) for a fixed weight matrix.
    fn run(params: &[Array2<f64>], seed_w: &Array2<f64>) -> (f64, Vec<Array2<f64>>) {
        let mut tape = Tape::new(params);
        let x = tape.input(array![[0.3, -1.2], [0.5, 0.1], [2.0, -0.4]]);
        let w = tape.param(0);
        let b = tape.param(1);
        let h = tape.affine(x, w, b);
        let h = tape.silu(h);
        let g = tape.gather(h, &[0, 2, 1, 2]);
        let sq = tape.mul(g, g);
        let d = tape.row_sum(sq);
        let r = tape.sqrt_eps(d);
        let inv = tape.recip_shift(r, 1.0);
        let sc = tape.mul_col(g, inv);
        let sig = tape.sigmoid(sc);
        let agg = tape.scatter_add(sig, &[0, 0, 1, 2], 3);
        let diff = tape.sub(agg, h);
        let y = tape.center(diff, &[true, false, true]);
        let out = tape.value(y);
        let loss = (&out * seed_w).sum();
        let grads = tape.backward(&[(y, seed_w.view())]);
        (loss, grads)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut params = vec![
            array![[0.4, -0.7, 0.2], [0.9, 0.3, -0.5]],
            array![[0.1, -0.2, 0.05]],
        ];
        let seed_w = array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.1], [-0.4, 0.2, 0.9]];
        let (_, grads) = run(&params, &seed_w);
        let f = |p: &[Array2<f64>]| run(p, &seed_w).0;
        for p in 0..2 {
            for r in 0..params[p].nrows() {
                for c in 0..params[p].ncols() {
                    let n = numeric_grad(&mut params, &f, p, r, c);
                    let a = grads[p][[r, c]];
                    assert!((a - n).abs() < 1e-7 * (1.0 + n.abs()), "param {p}[{r},{c}]: {a} vs {n}");
                }
            }
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradient() {
        let params = vec![array![[0.4, -0.7, 0.2], [0.9, 0.3, -0.5]], array![[0.1, -0.2, 0.05]]];
        let (_, grads) = run(&params, &Array2::zeros((3, 3)));
        assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn untouched_params_get_zeros() {
        let params = vec![array![[1.0]], array![[2.0, 3.0]]];
        let mut tape = Tape::new(&params);
        let p = tape.param(0);
        let y = tape.add(p, p);
        let grads = tape.backward(&[(y, array![[1.0]].view())]);
        assert_eq!(grads[0], array![[2.0]]);
        assert_eq!(grads[1], array![[0.0, 0.0]]);
    }
}
