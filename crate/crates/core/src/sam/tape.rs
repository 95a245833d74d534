//! Reverse-mode differentiation over a small operator set.
//!
//! Values are dense `f64` vectors. Affine ops read their weights straight
//! from the parameter store; backward accumulates into a parameter-shaped
//! gradient buffer.

use super::params::{Linear, SamParams};
use super::SamError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Affine { layer: usize, x: usize },
    /// `W[:, offset..offset + len(x)] x`, plus the bias when `bias` is set.
    AffineBlock { layer: usize, x: usize, offset: usize, bias: bool },
    Relu(usize),
    Concat(Vec<usize>),
    Mean(Vec<usize>),
    Sum(Vec<usize>),
    /// Mean over target classes of `-log softmax(logits)[t]`.
    SoftmaxCe { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    /// Mean over components of the squared error.
    Mse { pred: usize, target: Vec<f64> },
    /// Mean over classes of the sigmoid cross-entropy against a 0/1 target.
    SigmoidBce { logits: usize, target: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Affine { .. } | Op::AffineBlock { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Concat(_) => "concat",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::Mse { .. } => "mse",
            Op::SigmoidBce { .. } => "sigmoid_bce",
        }
    }
}

pub struct Tape<'p> {
    params: &'p SamParams,
    ops: Vec<Op>,
    values: Vec<Vec<f64>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p SamParams) -> Self {
        Tape { params, ops: Vec::new(), values: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Result<Var, SamError> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(SamError::NonFinite { op: op.name() });
        }
        self.ops.push(op);
        self.values.push(value);
        Ok(Var(self.values.len() - 1))
    }

    pub fn input(&mut self, x: Vec<f64>) -> Result<Var, SamError> {
        self.push(Op::Input, x)
    }

    pub fn affine(&mut self, layer: usize, x: Var) -> Result<Var, SamError> {
        let lin = &self.params.layers[layer];
        let input = &self.values[x.0];
        if input.len() != lin.inputs {
            return Err(SamError::DimensionMismatch { expected: lin.inputs, found: input.len() });
        }
        let y = lin.apply(input);
        self.push(Op::Affine { layer, x: x.0 }, y)
    }

    /// Applies the column block of `layer` starting at `offset` to `x`. Summing
    /// the blocks of one layer over a partition of its input equals
    /// [`Tape::affine`] on the concatenation, with the bias added by exactly
    /// one block.
    pub fn affine_block(&mut self, layer: usize, x: Var, offset: usize, bias: bool) -> Result<Var, SamError> {
        let lin = &self.params.layers[layer];
        let input = &self.values[x.0];
        if offset + input.len() > lin.inputs {
            return Err(SamError::DimensionMismatch { expected: lin.inputs - offset, found: input.len() });
        }
        let y = lin
            .weight
            .chunks_exact(lin.inputs)
            .zip(&lin.bias)
            .map(|(row, &b)| {
                let dot = row[offset..offset + input.len()].iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
                if bias { dot + b } else { dot }
            })
            .collect();
        self.push(Op::AffineBlock { layer, x: x.0, offset, bias }, y)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, SamError> {
        let y = self.values[x.0].iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu(x.0), y)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, SamError> {
        let y = xs.iter().flat_map(|v| self.values[v.0].iter().copied()).collect();
        self.push(Op::Concat(xs.iter().map(|v| v.0).collect()), y)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Result<Var, SamError> {
        let mut y = self.sum_values(xs);
        let n = xs.len() as f64;
        y.iter_mut().for_each(|v| *v /= n);
        self.push(Op::Mean(xs.iter().map(|v| v.0).collect()), y)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Result<Var, SamError> {
        let y = self.sum_values(xs);
        self.push(Op::Sum(xs.iter().map(|v| v.0).collect()), y)
    }

    fn sum_values(&self, xs: &[Var]) -> Vec<f64> {
        let mut y = vec![0.0; self.values[xs[0].0].len()];
        for v in xs {
            for (a, b) in y.iter_mut().zip(&self.values[v.0]) {
                *a += b;
            }
        }
        y
    }

    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var, SamError> {
        let z = &self.values[logits.0];
        let probs = softmax(z);
        let log_norm = log_sum_exp(z);
        let loss = targets.iter().map(|&t| log_norm - z[t]).sum::<f64>() / targets.len() as f64;
        self.push(Op::SoftmaxCe { logits: logits.0, targets: targets.to_vec(), probs }, vec![loss])
    }

    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var, SamError> {
        let p = &self.values[pred.0];
        if p.len() != target.len() {
            return Err(SamError::DimensionMismatch { expected: p.len(), found: target.len() });
        }
        let loss = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push(Op::Mse { pred: pred.0, target: target.to_vec() }, vec![loss])
    }

    /// `positives` index the classes whose target is 1.
    pub fn sigmoid_bce(&mut self, logits: Var, positives: &[usize]) -> Result<Var, SamError> {
        let z = &self.values[logits.0];
        let mut target = vec![0.0; z.len()];
        for &p in positives {
            target[p] = 1.0;
        }
        let loss = z.iter().zip(&target).map(|(&v, &y)| softplus(v) - y * v).sum::<f64>() / z.len() as f64;
        self.push(Op::SigmoidBce { logits: logits.0, target }, vec![loss])
    }

    /// Gradients of the scalar `output` with respect to every parameter,
    /// accumulated into `grads`.
    pub fn backward(&self, output: Var, grads: &mut SamParams) {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        adj[output.0] = Some(vec![1.0; self.values[output.0].len()]);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.ops[i] {
                Op::Input => {}
                Op::Affine { layer, x } => {
                    let lin = &self.params.layers[*layer];
                    let input = &self.values[*x];
                    accumulate_linear(&mut grads.layers[*layer], input, &g);
                    let gx = slot(&mut adj, *x, lin.inputs);
                    for (o, &go) in g.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        let row = &lin.weight[o * lin.inputs..(o + 1) * lin.inputs];
                        for (a, w) in gx.iter_mut().zip(row) {
                            *a += w * go;
                        }
                    }
                }
                Op::AffineBlock { layer, x, offset, bias } => {
                    let lin = &self.params.layers[*layer];
                    let input = &self.values[*x];
                    let grad = &mut grads.layers[*layer];
                    let gx = slot(&mut adj, *x, input.len());
                    for (o, &go) in g.iter().enumerate() {
                        if *bias {
                            grad.bias[o] += go;
                        }
                        if go == 0.0 {
                            continue;
                        }
                        let start = o * lin.inputs + offset;
                        let row = &lin.weight[start..start + input.len()];
                        let grow = &mut grad.weight[start..start + input.len()];
                        for ((a, gw), (&w, &v)) in gx.iter_mut().zip(grow).zip(row.iter().zip(input)) {
                            *a += w * go;
                            *gw += go * v;
                        }
                    }
                }
                Op::Relu(x) => {
                    let input = &self.values[*x];
                    let gx = slot(&mut adj, *x, input.len());
                    for ((a, &v), &go) in gx.iter_mut().zip(input).zip(&g) {
                        if v > 0.0 {
                            *a += go;
                        }
                    }
                }
                Op::Concat(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let len = self.values[x].len();
                        let gx = slot(&mut adj, x, len);
                        for (a, &go) in gx.iter_mut().zip(&g[offset..offset + len]) {
                            *a += go;
                        }
                        offset += len;
                    }
                }
                Op::Mean(xs) | Op::Sum(xs) => {
                    let scale = if matches!(self.ops[i], Op::Mean(_)) { 1.0 / xs.len() as f64 } else { 1.0 };
                    for &x in xs {
                        let gx = slot(&mut adj, x, g.len());
                        for (a, &go) in gx.iter_mut().zip(&g) {
                            *a += go * scale;
                        }
                    }
                }
                Op::SoftmaxCe { logits, targets, probs } => {
                    let gz = slot(&mut adj, *logits, probs.len());
                    let share = 1.0 / targets.len() as f64;
                    for (a, &p) in gz.iter_mut().zip(probs) {
                        *a += g[0] * p;
                    }
                    for &t in targets {
                        gz[t] -= g[0] * share;
                    }
                }
                Op::SigmoidBce { logits, target } => {
                    let z = &self.values[*logits];
                    let scale = g[0] / z.len() as f64;
                    let gz = slot(&mut adj, *logits, z.len());
                    for ((a, &v), &y) in gz.iter_mut().zip(z).zip(target) {
                        *a += scale * (sigmoid(v) - y);
                    }
                }
                Op::Mse { pred, target } => {
                    let p = &self.values[*pred];
                    let scale = 2.0 * g[0] / p.len() as f64;
                    let gp = slot(&mut adj, *pred, p.len());
                    for ((a, &pv), &tv) in gp.iter_mut().zip(p).zip(target) {
                        *a += scale * (pv - tv);
                    }
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    adj[i].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate_linear(grad: &mut Linear, input: &[f64], g: &[f64]) {
    for (o, &go) in g.iter().enumerate() {
        grad.bias[o] += go;
        if go == 0.0 {
            continue;
        }
        let row = &mut grad.weight[o * grad.inputs..(o + 1) * grad.inputs];
        for (w, &x) in row.iter_mut().zip(input) {
            *w += go * x;
        }
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
