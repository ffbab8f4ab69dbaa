//! Reverse sweeps over a [`Tape`].
//!
//! [`Tape::backward`] computes numeric gradients for every op.
//! [`Tape::grad_graph`] records the gradient computation itself as new tape
//! nodes so it can be differentiated again; it is available for the dense,
//! elementwise and reduction ops a critic network is built from.

use super::kernels::{self, Mat};
use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Gradients of one scalar with respect to every node that requires grad.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient for `v`, or zeros shaped like `v` when `v` is unreachable.
    pub fn or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

impl Tape {
    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.vjp(i, &g) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], contribution);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each differentiable input.
    fn vjp(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        Mat::new(gd, m, n),
                        Mat::t(self.value(*b).data(), k, n),
                        &mut da,
                        0.0,
                    );
                    out.push((*a, with_shape(&[m, k], da)));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(
                        Mat::t(self.value(*a).data(), m, k),
                        Mat::new(gd, m, n),
                        &mut db,
                        0.0,
                    );
                    out.push((*b, with_shape(&[k, n], db)));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                out.push((*a, with_shape(&[m, n], kernels::transpose(gd, n, m))));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRowBias(a, b) => {
                out.push((*a, g.clone()));
                if self.needs(*b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((*b, Tensor::from_vec(db)));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let da = gd.iter().zip(bv).map(|(g, b)| g * b).collect();
                    out.push((*a, with_shape(g.shape(), da)));
                }
                if self.needs(*b) {
                    let db = gd.iter().zip(av).map(|(g, a)| g * a).collect();
                    out.push((*b, with_shape(g.shape(), db)));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|v| v * s))),
            Op::AddScalar(a) | Op::Reshape(a) => {
                out.push((*a, with_shape(self.shape(*a), gd.to_vec())))
            }
            Op::SumAxis0(a) => {
                let m = self.shape(*a)[0];
                let data = (0..m).flat_map(|_| gd.iter().copied()).collect();
                out.push((*a, with_shape(self.shape(*a), data)));
            }
            Op::BroadcastAxis0(a) => {
                let n = self.shape(*a)[0];
                let mut d = vec![0.0; n];
                for row in gd.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(x, v)| *x += v);
                }
                out.push((*a, Tensor::from_vec(d)));
            }
            Op::SumAxis1(a) => {
                let n = self.shape(*a)[1];
                let data = gd.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                out.push((*a, with_shape(self.shape(*a), data)));
            }
            Op::BroadcastAxis1(a) => {
                let n = y.shape()[1];
                let d = gd.chunks(n).map(|r| r.iter().sum()).collect();
                out.push((*a, Tensor::from_vec(d)));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(self.shape(*a), gd[0]))),
            Op::Expand(a) => out.push((*a, Tensor::scalar(gd.iter().sum()))),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                out.push((*a, with_shape(g.shape(), d)));
            }
            Op::LeakyRelu(a, s) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * s })
                    .collect();
                out.push((*a, with_shape(g.shape(), d)));
            }
            Op::Tanh(a) => {
                let d = gd
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                out.push((*a, with_shape(g.shape(), d)));
            }
            Op::RowNorms(a) => {
                let x = self.value(*a);
                let n = x.cols();
                let mut d = vec![0.0; x.len()];
                for (r, (row, dr)) in x.data().chunks(n).zip(d.chunks_mut(n)).enumerate() {
                    let norm = y.data()[r];
                    if norm > 0.0 {
                        let k = gd[r] / norm;
                        dr.iter_mut().zip(row).for_each(|(o, v)| *o = k * v);
                    }
                }
                out.push((*a, with_shape(x.shape(), d)));
            }
            Op::MulRows(x, v) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let vv = self.value(*v).data();
                if self.needs(*x) {
                    let d = gd
                        .chunks(n)
                        .zip(vv)
                        .flat_map(|(row, &k)| row.iter().map(move |g| g * k))
                        .collect();
                    out.push((*x, with_shape(xv.shape(), d)));
                }
                if self.needs(*v) {
                    let d = gd
                        .chunks(n)
                        .zip(xv.data().chunks(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    out.push((*v, Tensor::from_vec(d)));
                }
            }
            Op::SafeRecip(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, r)| -g * r * r).collect();
                out.push((*a, with_shape(g.shape(), d)));
            }
            Op::StraightThrough(e, _) => out.push((*e, g.clone())),
            Op::Softmax(a) => {
                let n = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                out.push((*a, with_shape(y.shape(), d)));
            }
            Op::CrossEntropy(a, labels) => {
                let x = self.value(*a);
                let c = x.cols();
                let b = labels.len() as f64;
                let mut p = kernels::softmax_rows(x.data(), c);
                for (row, &l) in p.chunks_mut(c).zip(labels) {
                    row[l] -= 1.0;
                }
                let k = gd[0] / b;
                p.iter_mut().for_each(|v| *v *= k);
                out.push((*a, with_shape(x.shape(), p)));
            }
            Op::Conv2d { x, w, geom } => {
                let batch = self.shape(*x)[0];
                let oc = self.shape(*w)[0];
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    batch,
                    oc,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    out.push((*x, with_shape(self.shape(*x), dx)));
                }
                if let Some(dw) = dw {
                    out.push((*w, with_shape(self.shape(*w), dw)));
                }
            }
            Op::AddChannelBias(x, b) => {
                out.push((*x, g.clone()));
                if self.needs(*b) {
                    let s = g.shape();
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let mut db = vec![0.0; c];
                    for (p, plane) in gd.chunks(hw).enumerate() {
                        db[p % c] += plane.iter().sum::<f64>();
                    }
                    out.push((*b, Tensor::from_vec(db)));
                }
            }
            Op::MeanPool2x2(x) => {
                let s = self.shape(*x);
                let d = kernels::mean_pool2x2_backward(gd, s[0] * s[1], s[2], s[3]);
                out.push((*x, with_shape(s, d)));
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (&idx, gv) in argmax.iter().zip(gd) {
                    d[idx] += gv;
                }
                out.push((*x, with_shape(self.shape(*x), d)));
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let d = kernels::upsample2x_backward(gd, s[0] * s[1], s[2], s[3]);
                out.push((*x, with_shape(s, d)));
            }
            Op::ChannelsLast(x) => {
                let s = self.shape(*x);
                let d = kernels::channels_first(gd, s[0], s[1], s[2] * s[3]);
                out.push((*x, with_shape(s, d)));
            }
            Op::ChannelsFirst(x) => {
                let s = y.shape();
                let d = kernels::channels_last(gd, s[0], s[1], s[2] * s[3]);
                out.push((*x, with_shape(self.shape(*x), d)));
            }
            Op::EmbeddingLookup { table, indices } => {
                let t = self.value(*table);
                let dcols = t.cols();
                let mut d = vec![0.0; t.len()];
                for (r, &k) in indices.iter().enumerate() {
                    let src = &gd[r * dcols..(r + 1) * dcols];
                    d[k * dcols..(k + 1) * dcols]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(o, v)| *o += v);
                }
                out.push((*table, with_shape(t.shape(), d)));
            }
        }
        out
    }

    /// Gradient of scalar `output` with respect to each of `wrt`, recorded as
    /// differentiable tape nodes.
    ///
    /// Only ops on a path from `wrt` to `output` are visited; any of them
    /// outside the second-order set yields [`Error::UnsupportedSecondOrder`].
    /// Entries of `wrt` that do not reach `output` get a constant zero node.
    pub fn grad_graph(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(output).len() != 1 {
            return Err(invalid(format!(
                "grad_graph output must be scalar, got shape {:?}",
                self.shape(output)
            )));
        }
        let end = output.0 + 1;
        let mut reach = vec![false; end];
        for v in wrt {
            if v.0 < end {
                reach[v.0] = true;
            }
        }
        for i in 0..end {
            let node = &self.nodes[i];
            if reach[i] || matches!(node.op, Op::StopGradient(_)) {
                continue;
            }
            let inputs = match &node.op {
                Op::StraightThrough(e, _) => vec![*e],
                op => op.inputs(),
            };
            reach[i] = inputs.iter().any(|v| reach[v.0]);
        }

        let mut grads: Vec<Option<Var>> = vec![None; end];
        grads[output.0] = Some(self.constant(Tensor::full(self.shape(output), 1.0)));
        for i in (0..end).rev() {
            if !reach[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            for (input, contribution) in self.vjp_graph(i, g, &reach)? {
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, contribution)?,
                    None => contribution,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|v| match grads.get(v.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(*v));
                    self.constant(z)
                }
            })
            .collect())
    }

    fn vjp_graph(&mut self, i: usize, g: Var, reach: &[bool]) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[i].op.clone();
        let on = |v: &Var| reach[v.0];
        let y = Var(i);
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                if on(&a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if on(&b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose(g)?)),
            Op::Add(a, b) => {
                if on(&a) {
                    out.push((a, g));
                }
                if on(&b) {
                    out.push((b, g));
                }
            }
            Op::AddRowBias(a, b) => {
                if on(&a) {
                    out.push((a, g));
                }
                if on(&b) {
                    out.push((b, self.sum_axis0(g)?));
                }
            }
            Op::Mul(a, b) => {
                if on(&a) {
                    out.push((a, self.mul(g, b)?));
                }
                if on(&b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, s) => out.push((a, self.scale(g, s))),
            Op::AddScalar(a) => out.push((a, g)),
            Op::Reshape(a) => {
                let s = self.shape(a).to_vec();
                out.push((a, self.reshape(g, &s)?));
            }
            Op::SumAxis0(a) => {
                let m = self.shape(a)[0];
                out.push((a, self.broadcast_axis0(g, m)?));
            }
            Op::BroadcastAxis0(a) => out.push((a, self.sum_axis0(g)?)),
            Op::SumAxis1(a) => {
                let n = self.shape(a)[1];
                out.push((a, self.broadcast_axis1(g, n)?));
            }
            Op::BroadcastAxis1(a) => out.push((a, self.sum_axis1(g)?)),
            Op::Sum(a) => {
                let s = self.shape(a).to_vec();
                out.push((a, self.expand(g, &s)?));
            }
            Op::Expand(a) => out.push((a, self.sum(g))),
            Op::Relu(a) | Op::LeakyRelu(a, _) => {
                let slope = match op {
                    Op::LeakyRelu(_, s) => s,
                    _ => 0.0,
                };
                let mask = self
                    .value(a)
                    .map(|x| if x > 0.0 { 1.0 } else { slope });
                let mask = self.constant(mask);
                out.push((a, self.mul(g, mask)?));
            }
            Op::Tanh(a) => {
                let y2 = self.mul(y, y)?;
                let neg = self.scale(y2, -1.0);
                let dy = self.add_scalar(neg, 1.0);
                out.push((a, self.mul(g, dy)?));
            }
            Op::RowNorms(a) => {
                let inv = self.safe_recip(y);
                let k = self.mul(g, inv)?;
                out.push((a, self.mul_rows(a, k)?));
            }
            Op::MulRows(x, v) => {
                if on(&x) {
                    out.push((x, self.mul_rows(g, v)?));
                }
                if on(&v) {
                    let gx = self.mul(g, x)?;
                    out.push((v, self.sum_axis1(gx)?));
                }
            }
            Op::SafeRecip(a) => {
                let r2 = self.mul(y, y)?;
                let t = self.mul(g, r2)?;
                out.push((a, self.scale(t, -1.0)));
            }
            Op::StraightThrough(e, _) => out.push((e, g)),
            other => {
                return Err(Error::UnsupportedSecondOrder { op: other.name() });
            }
        }
        Ok(out)
    }
}
