//! Reverse-mode automatic differentiation over the tensor kernel op set.
//!
//! A [`Tape`] records operations eagerly: each call computes the forward
//! value immediately and pushes a node whose inputs always precede it, so
//! the graph is acyclic by construction. [`Tape::grad`] runs one reverse
//! sweep from a scalar output and returns a gradient for every node.
//!
//! Tapes are single-threaded: build and differentiate one tape from one
//! thread. The tensor kernels a tape calls into may parallelize internally.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Softmax(usize, usize),
    Sigmoid(usize),
    Relu(usize),
    Ln(usize),
    PowConst(usize, f64),
    Abs(usize),
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    GatherRows(usize, Vec<usize>),
    ConcatRows(usize, usize),
    GatherCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    BroadcastAddRow(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient of a scalar output with respect to every node on the tape.
pub struct Gradients {
    tape: u64,
    grads: Vec<Tensor>,
}

impl Gradients {
    /// Gradient tensor for `id`; zero-filled where no path to the output
    /// exists. Errors if `id` belongs to a different tape.
    pub fn get(&self, id: NodeId) -> Result<&Tensor> {
        if id.tape != self.tape || id.index >= self.grads.len() {
            return Err(Error::Tape("node is not on this tape".to_string()));
        }
        Ok(&self.grads[id.index])
    }
}

/// Eager computation tape.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(Error::Tape("node is not on this tape".to_string()));
        }
        Ok(id.index)
    }

    fn val(&self, index: usize) -> &Tensor {
        &self.nodes[index].value
    }

    /// Registers an input value. Leaves are where gradients are read back.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        let i = self.check(id)?;
        Ok(self.val(i))
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.value(id)?.scalar_value()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = tensor::ew_zip(self.val(ia), self.val(ib), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = tensor::ew_zip(self.val(ia), self.val(ib), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = tensor::ew_zip(self.val(ia), self.val(ib), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(ia, ib)))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = tensor::ew_map(self.val(ia), |x| -x)?;
        Ok(self.push(v, Op::Neg(ia)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = tensor::ew_map(self.val(ia), |x| c * x)?;
        Ok(self.push(v, Op::Scale(ia, c)))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = tensor::ew_map(self.val(ia), |x| x + c)?;
        Ok(self.push(v, Op::AddScalar(ia)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = tensor::matmul(self.val(ia), self.val(ib))?;
        Ok(self.push(v, Op::Matmul(ia, ib)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = self.val(ia).transpose2()?;
        Ok(self.push(v, Op::Transpose(ia)))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = tensor::softmax(self.val(ia), axis)?;
        Ok(self.push(v, Op::Softmax(ia, axis)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = tensor::sigmoid_map(self.val(ia))?;
        Ok(self.push(v, Op::Sigmoid(ia)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = tensor::ew_map(self.val(ia), |x| x.max(0.0))?;
        Ok(self.push(v, Op::Relu(ia)))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = tensor::ew_map(self.val(ia), f64::ln)?;
        Ok(self.push(v, Op::Ln(ia)))
    }

    pub fn pow_const(&mut self, a: NodeId, e: f64) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = tensor::ew_map(self.val(ia), |x| x.powf(e))?;
        Ok(self.push(v, Op::PowConst(ia, e)))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = tensor::ew_map(self.val(ia), f64::abs)?;
        Ok(self.push(v, Op::Abs(ia)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = Tensor::scalar(tensor::sum_all(self.val(ia)))?;
        Ok(self.push(v, Op::SumAll(ia)))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let n = self.val(ia).len();
        if n == 0 {
            return Err(Error::arg("mean_all", "empty tensor".to_string()));
        }
        let v = Tensor::scalar(tensor::sum_all(self.val(ia)) / n as f64)?;
        Ok(self.push(v, Op::MeanAll(ia)))
    }

    pub fn reshape(&mut self, a: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = self.val(ia).reshape(dims)?;
        Ok(self.push(v, Op::Reshape(ia)))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = tensor::gather_rows(self.val(ia), indices)?;
        Ok(self.push(v, Op::GatherRows(ia, indices.to_vec())))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = tensor::concat_rows(&[self.val(ia), self.val(ib)])?;
        Ok(self.push(v, Op::ConcatRows(ia, ib)))
    }

    pub fn gather_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = tensor::gather_cols(self.val(ia), start, len)?;
        Ok(self.push(v, Op::GatherCols(ia, start, len)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let vals: Vec<&Tensor> = idx.iter().map(|&i| self.val(i)).collect();
        let v = tensor::concat_cols(&vals)?;
        Ok(self.push(v, Op::ConcatCols(idx)))
    }

    pub fn broadcast_add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let v = tensor::broadcast_add_row(self.val(ia), self.val(ib))?;
        Ok(self.push(v, Op::BroadcastAddRow(ia, ib)))
    }

    /// 1x1 channel projection of an H x W x C map, composed from reshape,
    /// matmul and a broadcast bias so gradients flow to weight and bias.
    pub fn project_1x1(&mut self, map: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let im = self.check(map)?;
        let d = self.val(im).dims().to_vec();
        if d.len() != 3 {
            return Err(Error::shape(
                "project_1x1",
                format!("expected rank 3, got {:?}", d),
            ));
        }
        let c_out = {
            let iw = self.check(weight)?;
            let wd = self.val(iw).dims();
            if wd.len() != 2 || wd[0] != d[2] {
                return Err(Error::shape(
                    "project_1x1",
                    format!("weight {:?} vs map channels {}", wd, d[2]),
                ));
            }
            wd[1]
        };
        let flat = self.reshape(map, vec![d[0] * d[1], d[2]])?;
        let proj = self.matmul(flat, weight)?;
        let biased = self.broadcast_add_row(proj, bias)?;
        self.reshape(biased, vec![d[0], d[1], c_out])
    }

    /// Reverse-mode gradients of a scalar `output` for every node.
    pub fn grad(&self, output: NodeId) -> Result<Gradients> {
        let out_idx = self.check(output)?;
        if !self.val(out_idx).is_scalar() {
            return Err(Error::Tape(format!(
                "grad needs a scalar output, got dims {:?}",
                self.val(out_idx).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out_idx] = Some(Tensor::scalar(1.0)?);

        for i in (0..=out_idx).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(self.val(i).dims().to_vec())))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let accumulate = |grads: &mut [Option<Tensor>], j: usize, delta: Tensor| -> Result<()> {
            match &mut grads[j] {
                Some(acc) => {
                    *acc = tensor::ew_zip(acc, &delta, "grad-accumulate", |x, y| x + y)?;
                }
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, tensor::ew_map(g, |x| -x)?)?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, tensor::ew_zip(g, self.val(*b), "mul-bwd", |x, y| x * y)?)?;
                accumulate(grads, *b, tensor::ew_zip(g, self.val(*a), "mul-bwd", |x, y| x * y)?)?;
            }
            Op::Neg(a) => accumulate(grads, *a, tensor::ew_map(g, |x| -x)?)?,
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, tensor::ew_map(g, |x| c * x)?)?;
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone())?,
            Op::Matmul(a, b) => {
                let bt = self.val(*b).transpose2()?;
                accumulate(grads, *a, tensor::matmul(g, &bt)?)?;
                let at = self.val(*a).transpose2()?;
                accumulate(grads, *b, tensor::matmul(&at, g)?)?;
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose2()?)?,
            Op::Softmax(a, axis) => {
                let y = self.val(i);
                let lane = y.dims()[*axis];
                let inner: usize = y.dims()[*axis + 1..].iter().product();
                let chunk = lane * inner;
                let mut dx = vec![0.0; y.len()];
                let yd = y.data();
                let gd = g.data();
                for (o, c) in dx.chunks_mut(chunk).enumerate() {
                    let base = o * chunk;
                    for inr in 0..inner {
                        let mut dot = 0.0;
                        for l in 0..lane {
                            let k = base + l * inner + inr;
                            dot += gd[k] * yd[k];
                        }
                        for l in 0..lane {
                            let k = base + l * inner + inr;
                            c[l * inner + inr] = yd[k] * (gd[k] - dot);
                        }
                    }
                }
                accumulate(grads, *a, Tensor::from_raw(y.dims().to_vec(), dx)?)?;
            }
            Op::Sigmoid(a) => {
                let y = self.val(i);
                accumulate(grads, *a, tensor::ew_zip(g, y, "sigmoid-bwd", |gv, yv| gv * yv * (1.0 - yv))?)?;
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                accumulate(grads, *a, tensor::ew_zip(g, x, "relu-bwd", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)?;
            }
            Op::Ln(a) => {
                let x = self.val(*a);
                accumulate(grads, *a, tensor::ew_zip(g, x, "ln-bwd", |gv, xv| gv / xv)?)?;
            }
            Op::PowConst(a, e) => {
                let e = *e;
                let x = self.val(*a);
                let delta = if e == 0.0 {
                    Tensor::zeros(x.dims().to_vec())
                } else {
                    tensor::ew_zip(g, x, "pow-bwd", |gv, xv| gv * e * xv.powf(e - 1.0))?
                };
                accumulate(grads, *a, delta)?;
            }
            Op::Abs(a) => {
                let x = self.val(*a);
                accumulate(grads, *a, tensor::ew_zip(g, x, "abs-bwd", |gv, xv| gv * sign(xv))?)?;
            }
            Op::SumAll(a) => {
                let gv = g.scalar_value()?;
                accumulate(grads, *a, Tensor::full(self.val(*a).dims().to_vec(), gv)?)?;
            }
            Op::MeanAll(a) => {
                let n = self.val(*a).len() as f64;
                let gv = g.scalar_value()? / n;
                accumulate(grads, *a, Tensor::full(self.val(*a).dims().to_vec(), gv)?)?;
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.reshape(self.val(*a).dims().to_vec())?)?;
            }
            Op::GatherRows(a, indices) => {
                let src = self.val(*a);
                let cols = src.dims()[1];
                let mut dx = vec![0.0; src.len()];
                for (r, &srcrow) in indices.iter().enumerate() {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let slot = &mut dx[srcrow * cols..(srcrow + 1) * cols];
                    for (s, &gv) in slot.iter_mut().zip(grow) {
                        *s += gv;
                    }
                }
                accumulate(grads, *a, Tensor::from_raw(src.dims().to_vec(), dx)?)?;
            }
            Op::ConcatRows(a, b) => {
                let ra = self.val(*a).dims()[0];
                let cols = self.val(*a).dims()[1];
                let ga = Tensor::from_raw(vec![ra, cols], g.data()[..ra * cols].to_vec())?;
                let gb = Tensor::from_raw(
                    self.val(*b).dims().to_vec(),
                    g.data()[ra * cols..].to_vec(),
                )?;
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::GatherCols(a, start, len) => {
                let src = self.val(*a);
                let (rows, cols) = (src.dims()[0], src.dims()[1]);
                let mut dx = vec![0.0; src.len()];
                for r in 0..rows {
                    for j in 0..*len {
                        dx[r * cols + start + j] = g.data()[r * len + j];
                    }
                }
                accumulate(grads, *a, Tensor::from_raw(src.dims().to_vec(), dx)?)?;
            }
            Op::ConcatCols(parts) => {
                let rows = self.val(i).dims()[0];
                let total = self.val(i).dims()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).dims()[1];
                    let mut dx = vec![0.0; rows * w];
                    for r in 0..rows {
                        dx[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, Tensor::from_raw(vec![rows, w], dx)?)?;
                    offset += w;
                }
            }
            Op::BroadcastAddRow(a, bias) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *bias, tensor::col_sum(g)?)?;
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
