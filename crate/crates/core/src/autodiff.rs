//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Each primitive appends one record holding its output value and whatever
//! it saved for the adjoint. [`Tape::backward`] walks the records once, in
//! strict reverse order, and leaves `∂loss/∂value` in the grad slot of every
//! value that requires a gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, BN_EPS};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    /// Mean and biased variance of the current batch.
    Batch,
    /// Stored running statistics; the layer is then affine in its input.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        input: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: usize,
    },
    FullyConnected {
        input: usize,
        theta: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MeanSquaredHalf {
        a: usize,
        b: usize,
        q: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Sum {
        input: usize,
    },
    SumSquaresHalf {
        input: usize,
    },
}

#[derive(Debug)]
struct Record {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    records: Vec<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.records.len() {
            return Err(Error::invalid("variable is not recorded on this tape"));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.records.push(Record {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index: self.records.len() - 1,
        }
    }

    fn needs(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.records[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.records[v.index].requires_grad
    }

    /// Gradient deposited by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.records.get(v.index).and_then(|r| r.value.grad())
    }

    /// Moves the gradient out of the tape as a tensor shaped like the value.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let rec = self.records.get_mut(v.index)?;
        let g = rec.value.take_grad()?;
        Tensor::from_vec(rec.value.shape(), g).ok()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (i, w) = (self.check(input)?, self.check(weight)?);
        let out = kernels::conv2d(
            &self.records[i].value,
            &self.records[w].value,
            stride,
            padding,
        )?;
        let rg = self.needs(&[i, w]);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input: i,
                weight: w,
                stride,
                padding,
            },
        ))
    }

    /// Batch normalization. With [`BnStats::Batch`] the batch mean and biased
    /// variance are also returned so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (i, g, b) = (self.check(input)?, self.check(gamma)?, self.check(beta)?);
        let x = &self.records[i].value;
        let (moments, batch_stats) = match stats {
            BnStats::Batch => (Some(kernels::channel_moments(x)?), true),
            BnStats::Fixed { .. } => (None, false),
        };
        let (mean, var) = match (&moments, stats) {
            (Some((m, v)), _) => (m.as_slice(), v.as_slice()),
            (None, BnStats::Fixed { mean, var }) => (mean, var),
            (None, BnStats::Batch) => unreachable!(),
        };
        let (out, xhat, inv_std) = kernels::batch_norm(
            x,
            self.records[g].value.data(),
            self.records[b].value.data(),
            mean,
            var,
            BN_EPS,
        )?;
        let rg = self.needs(&[i, g, b]);
        let v = self.push(
            out,
            rg,
            Op::BatchNorm {
                input: i,
                gamma: g,
                beta: b,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, moments))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let out = kernels::relu(&self.records[i].value);
        let rg = self.needs(&[i]);
        Ok(self.push(out, rg, Op::Relu { input: i }))
    }

    pub fn max_pool(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let i = self.check(input)?;
        let (out, argmax) = kernels::max_pool(&self.records[i].value, window, stride)?;
        let rg = self.needs(&[i]);
        Ok(self.push(out, rg, Op::MaxPool { input: i, argmax }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let out = kernels::global_avg_pool(&self.records[i].value)?;
        let rg = self.needs(&[i]);
        Ok(self.push(out, rg, Op::GlobalAvgPool { input: i }))
    }

    pub fn fully_connected(&mut self, input: Var, theta: Var) -> Result<Var> {
        let (i, t) = (self.check(input)?, self.check(theta)?);
        let out = kernels::fully_connected(&self.records[i].value, &self.records[t].value)?;
        let rg = self.needs(&[i, t]);
        Ok(self.push(out, rg, Op::FullyConnected { input: i, theta: t }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let i = self.check(logits)?;
        let (loss, probs) = kernels::softmax_cross_entropy(&self.records[i].value, labels)?;
        let rg = self.needs(&[i]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits: i,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn mean_squared_half(&mut self, a: Var, b: Var, q: usize) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let loss = kernels::mean_squared_half(&self.records[ia].value, &self.records[ib].value, q)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::MeanSquaredHalf { a: ia, b: ib, q },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.records[ia]
            .value
            .lincomb(1.0, &self.records[ib].value, 1.0)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(out, rg, Op::Add { a: ia, b: ib }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let i = self.check(input)?;
        let out = self.records[i].value.scaled(factor);
        let rg = self.needs(&[i]);
        Ok(self.push(out, rg, Op::Scale { input: i, factor }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let s = self.records[i].value.sum();
        let rg = self.needs(&[i]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { input: i }))
    }

    /// `½‖x‖²`.
    pub fn sum_squares_half(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let s = 0.5
            * self.records[i]
                .value
                .data()
                .iter()
                .map(|v| v * v)
                .sum::<f64>();
        let rg = self.needs(&[i]);
        Ok(self.push(Tensor::scalar(s), rg, Op::SumSquaresHalf { input: i }))
    }

    /// Populates grad slots with `∂loss/∂value` for every value requiring a
    /// gradient. Gradients from any earlier pass are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.records[root].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.records[root].value.shape()
            )));
        }
        for r in &mut self.records {
            r.value.clear_grad();
        }
        if !self.records[root].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root).map(|_| None).collect();
        adj[root] = Some(vec![1.0]);
        for idx in (0..=root).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.records[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj)?;
            self.records[idx].value.set_grad(g)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let rec = &self.records[idx];
        let want = |i: usize| self.records[i].requires_grad;
        match &rec.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            } => {
                let (dx, dw) = kernels::conv2d_backward(
                    &self.records[*input].value,
                    &self.records[*weight].value,
                    g,
                    *stride,
                    *padding,
                    want(*input),
                    want(*weight),
                )?;
                if let Some(dx) = dx {
                    accumulate(adj, *input, dx);
                }
                if let Some(dw) = dw {
                    accumulate(adj, *weight, dw);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = rec.value.shape();
                let gm = self.records[*gamma].value.data();
                if want(*input) {
                    let dx = if *batch_stats {
                        kernels::bn_batch_input_grad(shape, g, xhat, gm, inv_std)
                    } else {
                        kernels::bn_frozen_input_grad(shape, g, gm, inv_std)
                    };
                    accumulate(adj, *input, dx);
                }
                if want(*gamma) || want(*beta) {
                    let (dg, db) = kernels::bn_param_grads(shape, g, xhat);
                    if want(*gamma) {
                        accumulate(adj, *gamma, dg);
                    }
                    if want(*beta) {
                        accumulate(adj, *beta, db);
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.records[*input].value.data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(adj, *input, dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.records[*input].value.len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                accumulate(adj, *input, dx);
            }
            Op::GlobalAvgPool { input } => {
                let x = &self.records[*input].value;
                let [_, _, h, w] = x.shape();
                let plane = h * w;
                let mut dx = vec![0.0; x.len()];
                for (chunk, &gv) in dx.chunks_mut(plane).zip(g) {
                    chunk.fill(gv / plane as f64);
                }
                accumulate(adj, *input, dx);
            }
            Op::FullyConnected { input, theta } => {
                let (dx, dt) = kernels::fully_connected_backward(
                    &self.records[*input].value,
                    &self.records[*theta].value,
                    g,
                )?;
                if want(*input) {
                    accumulate(adj, *input, dx);
                }
                if want(*theta) {
                    accumulate(adj, *theta, dt);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let m = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dz[i * m + y] -= scale;
                }
                accumulate(adj, *logits, dz);
            }
            Op::MeanSquaredHalf { a, b, q } => {
                let av = self.records[*a].value.data();
                let bv = self.records[*b].value.data();
                let scale = g[0] / *q as f64;
                if want(*a) {
                    accumulate(
                        adj,
                        *a,
                        av.iter().zip(bv).map(|(x, y)| (x - y) * scale).collect(),
                    );
                }
                if want(*b) {
                    accumulate(
                        adj,
                        *b,
                        av.iter().zip(bv).map(|(x, y)| (y - x) * scale).collect(),
                    );
                }
            }
            Op::Add { a, b } => {
                if want(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if want(*b) {
                    accumulate(adj, *b, g.to_vec());
                }
            }
            Op::Scale { input, factor } => {
                accumulate(adj, *input, g.iter().map(|v| v * factor).collect());
            }
            Op::Sum { input } => {
                let n = self.records[*input].value.len();
                accumulate(adj, *input, vec![g[0]; n]);
            }
            Op::SumSquaresHalf { input } => {
                let x = self.records[*input].value.data();
                accumulate(adj, *input, x.iter().map(|v| v * g[0]).collect());
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut adj[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// `W ← W − γ·∂L/∂W` for every tensor, using its grad slot.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    if params.iter().any(|p| p.grad().is_none()) {
        return Err(Error::invalid("sgd_step: parameter without gradient"));
    }
    for p in params.iter_mut() {
        let g = p.take_grad().expect("checked above");
        for (w, gv) in p.data_mut().iter_mut().zip(&g) {
            *w -= lr * gv;
        }
        p.set_grad(g)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(
            Tensor::from_vec([1, 2, 1, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, -7.5]).unwrap(),
            true,
        );
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn gradient_of_half_norm_is_identity() {
        let mut tape = Tape::new();
        let data = vec![0.3, -1.0, 2.0, 5.0];
        let w = tape.leaf(Tensor::from_vec([2, 2, 1, 1], data.clone()).unwrap(), true);
        let s = tape.sum_squares_half(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), data.as_slice());
    }

    #[test]
    fn foreign_loss_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let w = b.leaf(Tensor::scalar(1.0), true);
        let s = b.sum(w).unwrap();
        assert!(a.backward(s).is_err());
        let v = a.leaf(Tensor::zeros([1, 2, 1, 1]), true);
        assert!(a.backward(v).is_err(), "non-scalar loss");
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 2, 2], 2.0));
        let w = tape.leaf(Tensor::full([1, 1, 1, 1], 3.0), true);
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[8.0]);
        assert_eq!(tape.grad(y).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.add(w, w).unwrap();
        let s = tape.sum_squares_half(y).unwrap();
        tape.backward(s).unwrap();
        // d/dw of ½(2w)² = 4w
        assert_eq!(tape.grad(w).unwrap(), &[12.0]);
    }

    #[test]
    fn sgd_step_semantics() {
        let mut w = Tensor::scalar(1.0);
        assert!(sgd_step(&mut [&mut w], 0.1).is_err());
        w.set_grad(vec![1.0]).unwrap();
        sgd_step(&mut [&mut w], 0.0).unwrap();
        assert_eq!(w.item(), 1.0);
        sgd_step(&mut [&mut w], 0.1).unwrap();
        assert!((w.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_reaches_quadratic_bowl_minimum() {
        // f(w) = ½‖w − c‖² has its minimum at c
        let c = Tensor::from_vec([1, 3, 1, 1], vec![1.5, -2.0, 0.25]).unwrap();
        let mut w = Tensor::zeros([1, 3, 1, 1]);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let wv = tape.leaf(w.clone(), true);
            let cv = tape.constant(c.clone());
            let neg = tape.scale(cv, -1.0).unwrap();
            let d = tape.add(wv, neg).unwrap();
            let loss = tape.sum_squares_half(d).unwrap();
            tape.backward(loss).unwrap();
            w.set_grad(tape.grad(wv).unwrap().to_vec()).unwrap();
            sgd_step(&mut [&mut w], 0.2).unwrap();
        }
        assert!(w.max_abs_diff(&c).unwrap() < 1e-8);
    }
}
