//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! consumes the tape, walks the nodes in reverse and returns the gradients of
//! the leaves; the recorded graph is dropped with it, so a tape can only be
//! differentiated once:
//!
//! ```compile_fail
//! use caim::{Tape, Tensor};
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::zeros([2]).with_grad());
//! let loss = tape.sum(x);
//! let _ = tape.backward(loss);
//! let _ = tape.backward(loss); // tape was moved by the first call
//! ```
//!
//! Gradients only flow through nodes that (transitively) depend on a leaf
//! with `requires_grad`, so frozen subgraphs cost a forward pass only.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Dims4, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        n: usize,
        d_in: usize,
        d_out: usize,
    },
    Relu(Var),
    SpatialMean(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Channel {
        x: Var,
        stat: Var,
        kind: Broadcast,
    },
    RowSum(Var),
    RepeatRows(Var),
    GatherRows(Var, Vec<usize>),
    MulConst(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Per-sample, per-channel spatial statistics recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ChannelStats {
    /// N×C spatial means.
    pub mean: Var,
    /// N×C values of `sqrt(population variance + epsilon)`.
    pub std: Var,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients returned by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `var` into `tensor.grad`, or zeros when the
    /// loss does not depend on it.
    pub fn write_to(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        let g = match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tensor.numel()],
        };
        tensor.set_grad(g)
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf, trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-trainable leaf, taking ownership of the data.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Which inputs of every recorded ReLU were positive, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|v| v.iter().map(|&a| a > 0.0))
            .collect()
    }

    /// Snapshot of a node as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let d = Dims4::of("conv2d", self.shape(input))?;
        let (c_out, k) = match *self.shape(weight) {
            [co, ci, kh, kw] if ci == d.c && kh == kw && kh > 0 => (co, kh),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight {s:?} incompatible with input {:?}", self.shape(input)),
                ))
            }
        };
        if self.shape(bias) != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {c_out} output channels", self.shape(bias)),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if d.h + 2 * padding < k || d.w + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {}×{}", d.h, d.w),
            ));
        }
        let geom = ConvGeom {
            n: d.n,
            c_in: d.c,
            h: d.h,
            w: d.w,
            c_out,
            k,
            stride,
            padding,
            h_out: (d.h + 2 * padding - k) / stride + 1,
            w_out: (d.w + 2 * padding - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.value(input), self.value(weight), self.value(bias));
        Ok(self.push(
            vec![d.n, c_out, geom.h_out, geom.w_out],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        ))
    }

    /// `input · weightᵀ + bias` for `input` N×D_in and `weight` D_out×D_in.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d_in) = match *self.shape(input) {
            [n, d] => (n, d),
            ref s => return Err(Error::shape("dense", format!("input must be N×D, got {s:?}"))),
        };
        let d_out = match *self.shape(weight) {
            [o, i] if i == d_in => o,
            ref s => {
                return Err(Error::shape(
                    "dense",
                    format!("weight {s:?} does not accept inputs of width {d_in}"),
                ))
            }
        };
        if self.shape(bias) != [d_out] {
            return Err(Error::shape(
                "dense",
                format!("bias {:?} for {d_out} outputs", self.shape(bias)),
            ));
        }
        let out = kernels::dense_forward(self.value(input), self.value(weight), self.value(bias), n, d_in, d_out);
        Ok(self.push(
            vec![n, d_out],
            out,
            Op::Dense {
                input,
                weight,
                bias,
                n,
                d_in,
                d_out,
            },
            &[input, weight, bias],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x), &[x])
    }

    /// Mean over H×W for every (sample, channel): N×C×H×W → N×C.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let d = Dims4::of("global_average_pool", self.shape(x))?;
        if d.spatial() == 0 {
            return Err(Error::shape("global_average_pool", "zero spatial extent"));
        }
        let inv = 1.0 / d.spatial() as f64;
        let out = self
            .value(x)
            .chunks(d.spatial())
            .map(|plane| plane.iter().sum::<f64>() * inv)
            .collect();
        Ok(self.push(vec![d.n, d.c], out, Op::SpatialMean(x), &[x]))
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map_op(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map_op(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map_op(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v * v, Op::Square(x))
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.max(0.0).sqrt(), Op::Sqrt(x))
    }

    /// Elementwise product with a constant buffer of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::shape(
                "mul_const",
                format!("{} constants for {:?}", c.len(), self.shape(x)),
            ));
        }
        let out = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::MulConst(x, c), &[x]))
    }

    fn channel_op(&mut self, x: Var, stat: Var, kind: Broadcast) -> Result<Var> {
        let xs = self.shape(x);
        let ss = self.shape(stat);
        if xs.len() < 2 || ss != &xs[..2] {
            return Err(Error::shape(
                "channel broadcast",
                format!("statistic {ss:?} does not match leading dims of {xs:?}"),
            ));
        }
        let inner: usize = xs[2..].iter().product();
        let stats = self.value(stat);
        let mut out = self.value(x).to_vec();
        if inner > 0 {
            for (plane, &s) in out.chunks_mut(inner).zip(stats) {
                match kind {
                    Broadcast::Add => plane.iter_mut().for_each(|v| *v += s),
                    Broadcast::Sub => plane.iter_mut().for_each(|v| *v -= s),
                    Broadcast::Mul => plane.iter_mut().for_each(|v| *v *= s),
                    Broadcast::Div => plane.iter_mut().for_each(|v| *v /= s),
                }
            }
        }
        let shape = xs.to_vec();
        Ok(self.push(shape, out, Op::Channel { x, stat, kind }, &[x, stat]))
    }

    /// Adds an N×C statistic to every spatial position of an N×C×… tensor.
    pub fn add_channel(&mut self, x: Var, stat: Var) -> Result<Var> {
        self.channel_op(x, stat, Broadcast::Add)
    }

    pub fn sub_channel(&mut self, x: Var, stat: Var) -> Result<Var> {
        self.channel_op(x, stat, Broadcast::Sub)
    }

    pub fn mul_channel(&mut self, x: Var, stat: Var) -> Result<Var> {
        self.channel_op(x, stat, Broadcast::Mul)
    }

    pub fn div_channel(&mut self, x: Var, stat: Var) -> Result<Var> {
        self.channel_op(x, stat, Broadcast::Div)
    }

    /// Sum over the last axis of an N×D tensor, giving shape N.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (n, d) = match *self.shape(x) {
            [n, d] => (n, d),
            ref s => return Err(Error::shape("row_sum", format!("expected N×D, got {s:?}"))),
        };
        let out = if d == 0 {
            vec![0.0; n]
        } else {
            self.value(x).chunks(d).map(|r| r.iter().sum()).collect()
        };
        Ok(self.push(vec![n], out, Op::RowSum(x), &[x]))
    }

    /// Tiles a length-D vector into an N×D matrix.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let d = match *self.shape(x) {
            [d] => d,
            ref s => return Err(Error::shape("repeat_rows", format!("expected a vector, got {s:?}"))),
        };
        let out = self.value(x).repeat(n);
        Ok(self.push(vec![n, d], out, Op::RepeatRows(x), &[x]))
    }

    /// Rows `idx` of an N×D matrix, in order; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = match *self.shape(x) {
            [n, d] => (n, d),
            ref s => return Err(Error::shape("gather_rows", format!("expected N×D, got {s:?}"))),
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let v = self.value(x);
        let out = idx.iter().flat_map(|&i| v[i * d..(i + 1) * d].iter().copied()).collect();
        Ok(self.push(vec![idx.len(), d], out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "mean of an empty tensor"));
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        Ok(self.push(Vec::new(), vec![s], Op::Mean(x), &[x]))
    }

    /// Scales every row of an N×D tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let d = match *self.shape(x) {
            [_, d] if d > 0 => d,
            ref s => return Err(Error::shape("l2_normalize_rows", format!("expected N×D, got {s:?}"))),
        };
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Mean softmax cross-entropy of N×K logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.shape(logits) {
            [n, k] if n == labels.len() && k > 0 => (n, k),
            ref s => {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("logits {s:?} for {} labels", labels.len()),
                ))
            }
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("class label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).chunks(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss -= row[label] - max - z.ln();
            probs.extend(row.iter().map(|v| (v - max).exp() / z));
        }
        Ok(self.push(
            Vec::new(),
            vec![loss / n as f64],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Spatial mean and epsilon-stabilized population standard deviation.
    pub fn instance_stats(&mut self, x: Var, epsilon: f64) -> Result<ChannelStats> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        let mean = self.global_average_pool(x)?;
        let centered = self.sub_channel(x, mean)?;
        let sq = self.square(centered);
        let var = self.global_average_pool(sq)?;
        let var = self.add_scalar(var, epsilon);
        let std = self.sqrt(var);
        Ok(ChannelStats { mean, std })
    }

    /// Runs reverse-mode differentiation from a scalar loss.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let numel = self.nodes[loss.0].value.len();
        if numel != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Takes the parent's accumulator out of `grads`, lets `f` add into it
        // and puts it back; parents that need no gradient are skipped.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !needs(v) {
                return;
            }
            let mut buf = grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(&mut buf);
            grads[v.0] = Some(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let mut gi = needs(*input).then(|| grads[input.0].take().unwrap_or_else(|| vec![0.0; x.len()]));
                let mut gw = needs(*weight).then(|| grads[weight.0].take().unwrap_or_else(|| vec![0.0; w.len()]));
                let mut gb = needs(*bias)
                    .then(|| grads[bias.0].take().unwrap_or_else(|| vec![0.0; geom.c_out]));
                kernels::conv2d_backward(geom, x, w, g, gi.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(b) = gi {
                    grads[input.0] = Some(b);
                }
                if let Some(b) = gw {
                    grads[weight.0] = Some(b);
                }
                if let Some(b) = gb {
                    grads[bias.0] = Some(b);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                n,
                d_in,
                d_out,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let mut gi = needs(*input).then(|| grads[input.0].take().unwrap_or_else(|| vec![0.0; x.len()]));
                let mut gw = needs(*weight).then(|| grads[weight.0].take().unwrap_or_else(|| vec![0.0; w.len()]));
                let mut gb = needs(*bias).then(|| grads[bias.0].take().unwrap_or_else(|| vec![0.0; *d_out]));
                kernels::dense_backward(
                    x,
                    w,
                    g,
                    *n,
                    *d_in,
                    *d_out,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(b) = gi {
                    grads[input.0] = Some(b);
                }
                if let Some(b) = gw {
                    grads[weight.0] = Some(b);
                }
                if let Some(b) = gb {
                    grads[bias.0] = Some(b);
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                with(*x, &mut |buf| {
                    for ((b, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *b += gv;
                        }
                    }
                });
            }
            Op::SpatialMean(x) => {
                let inner = self.nodes[x.0].value.len() / g.len().max(1);
                let inv = 1.0 / inner as f64;
                with(*x, &mut |buf| {
                    for (plane, &gv) in buf.chunks_mut(inner).zip(g) {
                        plane.iter_mut().for_each(|b| *b += gv * inv);
                    }
                });
            }
            Op::Add(a, b) => {
                with(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, gv)| *d += gv));
                with(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, gv)| *d += gv));
            }
            Op::Sub(a, b) => {
                with(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, gv)| *d += gv));
                with(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                with(*a, &mut |buf| {
                    for ((d, gv), y) in buf.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                with(*b, &mut |buf| {
                    for ((d, gv), x) in buf.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(x, f) => with(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * f)),
            Op::AddScalar(x) => with(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, gv)| *d += gv)),
            Op::Square(x) => {
                let xv = &self.nodes[x.0].value;
                with(*x, &mut |buf| {
                    for ((d, gv), v) in buf.iter_mut().zip(g).zip(xv) {
                        *d += 2.0 * v * gv;
                    }
                });
            }
            Op::Sqrt(x) => {
                let out = &node.value;
                with(*x, &mut |buf| {
                    for ((d, gv), y) in buf.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *d += gv / (2.0 * y);
                        }
                    }
                });
            }
            Op::MulConst(x, c) => with(*x, &mut |buf| {
                for ((d, gv), k) in buf.iter_mut().zip(g).zip(c) {
                    *d += gv * k;
                }
            }),
            Op::Channel { x, stat, kind } => {
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[stat.0].value;
                let inner = xv.len() / sv.len().max(1);
                if inner == 0 {
                    return;
                }
                with(*x, &mut |buf| {
                    for ((plane, gp), &s) in buf.chunks_mut(inner).zip(g.chunks(inner)).zip(sv) {
                        match kind {
                            Broadcast::Add | Broadcast::Sub => {
                                plane.iter_mut().zip(gp).for_each(|(d, gv)| *d += gv)
                            }
                            Broadcast::Mul => plane.iter_mut().zip(gp).for_each(|(d, gv)| *d += gv * s),
                            Broadcast::Div => plane.iter_mut().zip(gp).for_each(|(d, gv)| *d += gv / s),
                        }
                    }
                });
                with(*stat, &mut |buf| {
                    for (((d, gp), xp), &s) in buf.iter_mut().zip(g.chunks(inner)).zip(xv.chunks(inner)).zip(sv) {
                        *d += match kind {
                            Broadcast::Add => gp.iter().sum::<f64>(),
                            Broadcast::Sub => -gp.iter().sum::<f64>(),
                            Broadcast::Mul => gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>(),
                            Broadcast::Div => -gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>() / (s * s),
                        };
                    }
                });
            }
            Op::RowSum(x) => {
                let d = self.nodes[x.0].value.len() / g.len().max(1);
                if d == 0 {
                    return;
                }
                with(*x, &mut |buf| {
                    for (row, gv) in buf.chunks_mut(d).zip(g) {
                        row.iter_mut().for_each(|b| *b += gv);
                    }
                });
            }
            Op::RepeatRows(x) => {
                let d = self.nodes[x.0].value.len();
                if d == 0 {
                    return;
                }
                with(*x, &mut |buf| {
                    for row in g.chunks(d) {
                        buf.iter_mut().zip(row).for_each(|(b, gv)| *b += gv);
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let d = node.shape[1];
                with(*x, &mut |buf| {
                    for (&i, row) in idx.iter().zip(g.chunks(d.max(1))) {
                        buf[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(b, gv)| *b += gv);
                    }
                });
            }
            Op::Sum(x) => with(*x, &mut |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::Mean(x) => {
                let scale = g[0] / self.nodes[x.0].value.len() as f64;
                with(*x, &mut |buf| buf.iter_mut().for_each(|b| *b += scale));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let d = y.len() / norms.len().max(1);
                with(*x, &mut |buf| {
                    for (((bx, yr), gr), &norm) in buf.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)).zip(norms) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((b, yv), gv) in bx.iter_mut().zip(yr).zip(gr) {
                            *b += (gv - yv * dot) / norm;
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                with(*logits, &mut |buf| {
                    for ((row, pr), &label) in buf.chunks_mut(k).zip(probs.chunks(k)).zip(labels) {
                        for (j, (b, p)) in row.iter_mut().zip(pr).enumerate() {
                            let target = if j == label { 1.0 } else { 0.0 };
                            *b += scale * (p - target);
                        }
                    }
                });
            }
        }
    }
}
