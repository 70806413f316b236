//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation appends a node to the [`Tape`]. Nodes are stored in
//! creation order, so inputs always precede their consumers and a single
//! reverse sweep over the node list visits each node after all of its
//! consumers. Operations whose inputs carry no gradient are stored as
//! plain values; nothing is recorded for them.

use crate::error::{Error, Result};
use crate::numcore::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
        pad_left: usize,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    MaskMul {
        a: Var,
        mask: Vec<f64>,
    },
    /// Output element `j` is input element `src[j]`. Covers slicing,
    /// transposition, max-pooling and max-reduction.
    Gather {
        input: Var,
        src: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Reshape(Var),
    SumAll(Var),
    SumLast {
        a: Var,
        last: usize,
    },
    LogSumExp {
        a: Var,
        last: usize,
        mask: Option<Vec<bool>>,
    },
    Dot(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of the forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor. It participates in differentiation iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            requires_grad: tensor.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(&t))
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

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` requires grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for bi in 0..batch {
            matmul_into(
                &va[bi * m * k..(bi + 1) * m * k],
                &vb[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    /// 1-D convolution of `input [B, C_in, T]` with `weight [C_out, C_in, K]`
    /// and optional `bias [C_out]`. Output length is
    /// `T + pad_left + pad_right - dilation * (K - 1)`; padding is zeros.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        if dilation == 0 {
            return Err(Error::invalid("conv1d", "dilation must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err("conv1d bias", self.shape(b), &[sw[0]]));
            }
        }
        let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
        let (c_out, kernel) = (sw[0], sw[2]);
        let span = dilation * (kernel - 1);
        let padded = len + pad_left + pad_right;
        if padded <= span {
            return Err(Error::invalid(
                "conv1d",
                format!("padded length {padded} shorter than kernel span {}", span + 1),
            ));
        }
        let len_out = padded - span;
        let xv = self.value(input);
        let wv = self.value(weight);
        let mut out = vec![0.0; batch * c_out * len_out];
        for b in 0..batch {
            for co in 0..c_out {
                let o = &mut out[(b * c_out + co) * len_out..(b * c_out + co + 1) * len_out];
                if let Some(bv) = bias {
                    let bias_val = self.nodes[bv.0].value[co];
                    o.iter_mut().for_each(|x| *x = bias_val);
                }
                for ci in 0..c_in {
                    let x = &xv[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                    for k in 0..kernel {
                        let w = wv[(co * c_in + ci) * kernel + k];
                        let (lo, hi, off) = conv_range(k * dilation, pad_left, len, len_out);
                        for t in lo..hi {
                            o[t] += w * x[(t as isize + off) as usize];
                        }
                    }
                }
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            vec![batch, c_out, len_out],
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
                pad_left,
            },
            &inputs,
        ))
    }

    /// Zero "same" padding: output length equals input length.
    pub fn conv1d_same(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var> {
        let kernel = *self.shape(weight).last().unwrap_or(&1);
        let total = dilation * kernel.saturating_sub(1);
        let left = total / 2;
        self.conv1d(input, weight, bias, dilation, left, total - left)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("dot", self.shape(a), self.shape(b)));
        }
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(vec![1], vec![s], Op::Dot(a, b), &[a, b]))
    }

    // ---- elementwise ----

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
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
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds `row` (shape `[n]`) to every slice along the last axis of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        if self.shape(row) != [n] {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddRow { a, row }, &[a, row]))
    }

    /// Elementwise product with a constant mask of the same length.
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(shape_err("mask_mul", self.shape(a), &[mask.len()]));
        }
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::MaskMul { a, mask }, &[a]))
    }

    // ---- structural ----

    fn gather(&mut self, input: Var, shape: Vec<usize>, src: Vec<usize>) -> Var {
        let v = self.value(input);
        let out = src.iter().map(|&i| v[i]).collect();
        self.push(shape, out, Op::Gather { input, src }, &[input])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape(a), &[a]))
    }

    /// Elements `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut src = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            for j in start..end {
                let base = (o * len + j) * inner;
                src.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        Ok(self.gather(a, out_shape, src))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        if ax1 >= rank || ax2 >= rank {
            return Err(Error::invalid(
                "transpose",
                format!("axes ({ax1}, {ax2}) out of range for {shape:?}"),
            ));
        }
        let mut strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * shape[d + 1];
        }
        let mut out_shape = shape.clone();
        out_shape.swap(ax1, ax2);
        let mut in_strides = strides.clone();
        in_strides.swap(ax1, ax2);
        let total = numel(&shape);
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            src.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(self.gather(a, out_shape, src))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for {base:?}")));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &l) in inputs.iter().zip(&lens) {
                out.extend_from_slice(&self.value(v)[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                lens,
                outer,
                inner,
            },
            inputs,
        ))
    }

    /// Max-pool along the last axis. Windows that do not fit are dropped.
    pub fn maxpool_last(&mut self, a: Var, window: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let len = *shape.last().unwrap();
        if window == 0 || stride == 0 || len < window {
            return Err(Error::invalid(
                "maxpool",
                format!("window {window}, stride {stride} on length {len}"),
            ));
        }
        let len_out = (len - window) / stride + 1;
        let v = self.value(a);
        let outer = v.len() / len;
        let mut src = Vec::with_capacity(outer * len_out);
        for o in 0..outer {
            for j in 0..len_out {
                let start = o * len + j * stride;
                src.push(argmax_first(&v[start..start + window]) + start);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len_out;
        Ok(self.gather(a, out_shape, src))
    }

    // ---- reductions ----

    /// Max over the last axis (first index wins ties).
    pub fn max_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let len = *shape.last().unwrap();
        let src = self
            .value(a)
            .chunks(len)
            .enumerate()
            .map(|(o, c)| o * len + argmax_first(c))
            .collect();
        self.gather(a, reduced_shape(&shape), src)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().unwrap();
        let out = self.value(a).chunks(last).map(|c| c.iter().sum()).collect();
        self.push(reduced_shape(&shape), out, Op::SumLast { a, last }, &[a])
    }

    pub fn mean_last(&mut self, a: Var) -> Var {
        let last = *self.shape(a).last().unwrap() as f64;
        let s = self.sum_last(a);
        self.scale(s, 1.0 / last)
    }

    /// `log(sum(exp(x)))` over the last axis, restricted to entries whose
    /// mask value is `true` when a mask is given. Evaluated with the
    /// running-max shift.
    pub fn logsumexp_last(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().unwrap();
        let v = self.value(a);
        if let Some(m) = &mask {
            if m.len() != v.len() {
                return Err(shape_err("logsumexp mask", &shape, &[m.len()]));
            }
        }
        let out = v
            .chunks(last)
            .enumerate()
            .map(|(o, c)| {
                let keep = |j: usize| mask.as_ref().map_or(true, |m| m[o * last + j]);
                let max = (0..last)
                    .filter(|&j| keep(j))
                    .map(|j| c[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                let s: f64 = (0..last)
                    .filter(|&j| keep(j))
                    .map(|j| (c[j] - max).exp())
                    .sum();
                max + s.ln()
            })
            .collect();
        Ok(self.push(reduced_shape(&shape), out, Op::LogSumExp { a, last, mask }, &[a]))
    }

    // ---- reverse sweep ----

    /// Populates gradients of `loss` w.r.t. every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            } else if g.is_none() {
                *g = Some(vec![0.0; n.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Returns the accumulation buffer for `v`, or None if v needs no grad.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |ga| matmul_grad_a(g, vb, ga, m, k, n));
                acc(b, &mut |gb| matmul_grad_b(va, g, gb, m, k, n));
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |ga| {
                    for bi in 0..batch {
                        matmul_grad_a(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &vb[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                acc(b, &mut |gb| {
                    for bi in 0..batch {
                        matmul_grad_b(
                            &va[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            &Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
                pad_left,
            } => {
                let sx = &nodes[input.0].shape;
                let sw = &nodes[weight.0].shape;
                let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
                let (c_out, kernel) = (sw[0], sw[2]);
                let len_out = node.shape[2];
                let xv = &nodes[input.0].value;
                let wv = &nodes[weight.0].value;
                acc(input, &mut |gx| {
                    for b in 0..batch {
                        for co in 0..c_out {
                            let go = &g[(b * c_out + co) * len_out..][..len_out];
                            for ci in 0..c_in {
                                let gxr = &mut gx[(b * c_in + ci) * len..][..len];
                                for k in 0..kernel {
                                    let w = wv[(co * c_in + ci) * kernel + k];
                                    let (lo, hi, off) =
                                        conv_range(k * dilation, pad_left, len, len_out);
                                    for t in lo..hi {
                                        gxr[(t as isize + off) as usize] += w * go[t];
                                    }
                                }
                            }
                        }
                    }
                });
                acc(weight, &mut |gw| {
                    for b in 0..batch {
                        for co in 0..c_out {
                            let go = &g[(b * c_out + co) * len_out..][..len_out];
                            for ci in 0..c_in {
                                let x = &xv[(b * c_in + ci) * len..][..len];
                                for k in 0..kernel {
                                    let (lo, hi, off) =
                                        conv_range(k * dilation, pad_left, len, len_out);
                                    let mut s = 0.0;
                                    for t in lo..hi {
                                        s += go[t] * x[(t as isize + off) as usize];
                                    }
                                    gw[(co * c_in + ci) * kernel + k] += s;
                                }
                            }
                        }
                    }
                });
                if let Some(bv) = bias {
                    acc(bv, &mut |gb| {
                        for b in 0..batch {
                            for (co, gbc) in gb.iter_mut().enumerate() {
                                *gbc += g[(b * c_out + co) * len_out..][..len_out]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                    });
                }
            }
            &Op::Relu(a) => {
                let x = &nodes[a.0].value;
                acc(a, &mut |ga| {
                    for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            &Op::Exp(a) => {
                let y = &node.value;
                acc(a, &mut |ga| {
                    for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                });
            }
            &Op::Log(a) => {
                let x = &nodes[a.0].value;
                acc(a, &mut |ga| {
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |ga| {
                for (d, gi) in ga.iter_mut().zip(g) {
                    *d += gi * c;
                }
            }),
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_assign(ga, g));
                acc(b, &mut |gb| add_assign(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_assign(ga, g));
                acc(b, &mut |gb| {
                    for (d, gi) in gb.iter_mut().zip(g) {
                        *d -= gi;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |ga| {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((d, gi), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += gi * x;
                    }
                });
            }
            &Op::Div(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |ga| {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gi / y;
                    }
                });
                acc(b, &mut |gb| {
                    for (((d, gi), x), y) in gb.iter_mut().zip(g).zip(va).zip(vb) {
                        *d -= gi * x / (y * y);
                    }
                });
            }
            &Op::AddRow { a, row } => {
                acc(a, &mut |ga| add_assign(ga, g));
                acc(row, &mut |gr| {
                    let n = gr.len();
                    for c in g.chunks(n) {
                        add_assign(gr, c);
                    }
                });
            }
            Op::MaskMul { a, mask } => acc(*a, &mut |ga| {
                for ((d, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }),
            Op::Gather { input, src } => acc(*input, &mut |ga| {
                for (&s, gi) in src.iter().zip(g) {
                    ga[s] += gi;
                }
            }),
            Op::Concat {
                inputs,
                lens,
                outer,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&v, &l) in inputs.iter().zip(lens) {
                    acc(v, &mut |gv| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..][..l * inner];
                            add_assign(&mut gv[o * l * inner..][..l * inner], src);
                        }
                    });
                    offset += l;
                }
            }
            &Op::Reshape(a) => acc(a, &mut |ga| add_assign(ga, g)),
            &Op::SumAll(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            &Op::SumLast { a, last } => acc(a, &mut |ga| {
                for (c, gi) in ga.chunks_mut(last).zip(g) {
                    c.iter_mut().for_each(|d| *d += gi);
                }
            }),
            Op::LogSumExp { a, last, mask } => {
                let x = &nodes[a.0].value;
                let lse = &node.value;
                let last = *last;
                acc(*a, &mut |ga| {
                    for (o, (c, gi)) in ga.chunks_mut(last).zip(g).enumerate() {
                        for (j, d) in c.iter_mut().enumerate() {
                            let idx = o * last + j;
                            if mask.as_ref().map_or(true, |m| m[idx]) {
                                *d += gi * (x[idx] - lse[o]).exp();
                            }
                        }
                    }
                });
            }
            &Op::Dot(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |ga| {
                    for (d, y) in ga.iter_mut().zip(vb) {
                        *d += g[0] * y;
                    }
                });
                acc(b, &mut |gb| {
                    for (d, x) in gb.iter_mut().zip(va) {
                        *d += g[0] * x;
                    }
                });
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Valid output range `[lo, hi)` and input offset for one kernel tap.
fn conv_range(tap: usize, pad_left: usize, len: usize, len_out: usize) -> (usize, usize, isize) {
    let off = tap as isize - pad_left as isize;
    let lo = (-off).max(0) as usize;
    let hi = ((len as isize - off).max(0) as usize).min(len_out);
    (lo.min(hi), hi, off)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

// ga[i, p] += sum_j g[i, j] * b[p, j]
fn matmul_grad_a(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            ga[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// gb[p, j] += sum_i a[i, p] * g[i, j]
fn matmul_grad_b(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (d, x) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *d += aip * x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        let t = Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad();
        tape.leaf(&t)
    }

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 3], &[1.0, 2.0, 3.0]);
        let w = leaf(&mut tape, &[1, 1, 1], &[1.0]);
        let y = tape.conv1d(x, w, None, 1, 0, 0).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn same_padding_preserves_length() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 1, 7], &[0.5; 14]);
        for (kernel, dilation) in [(3, 1), (3, 4), (2, 3), (5, 2)] {
            let w = leaf(&mut tape, &[3, 1, kernel], &vec![0.1; 3 * kernel]);
            let y = tape.conv1d_same(x, w, None, dilation).unwrap();
            assert_eq!(tape.shape(y), &[2, 3, 7]);
        }
    }

    #[test]
    fn valid_conv_shrinks_by_span() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 10], &[1.0; 10]);
        let w = leaf(&mut tape, &[1, 1, 3], &[1.0; 3]);
        let y = tape.conv1d(x, w, None, 2, 0, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 6]);
        let w5 = leaf(&mut tape, &[1, 1, 5], &[1.0; 5]);
        assert!(tape.conv1d(x, w5, None, 3, 0, 0).is_err());
    }

    #[test]
    fn relu_and_maxpool() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[-1.0, 0.0, 2.0]);
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
        let p = leaf(&mut tape, &[4], &[3.0, 1.0, 4.0, 1.0]);
        let m = tape.maxpool_last(p, 2, 2).unwrap();
        assert_eq!(tape.value(m), &[3.0, 4.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[3.0]);
        let l = tape.dot(x, x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[-1.0, 2.0]);
        let r = tape.relu(x);
        let l = tape.sum_all(r);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut tape, &[2, 3], &[0.0; 6]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        match err {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.exp(a);
        assert!(!tape.requires_grad(b));
        assert!(matches!(tape.nodes[b.0].op, Op::Leaf));
    }

    #[test]
    fn transpose_and_concat_layout() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = tape.transpose(a, 0, 1).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.value(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let c = tape.concat(&[a, a], 1).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);
        let s = tape.slice(c, 1, 2, 4).unwrap();
        assert_eq!(tape.value(s), &[3.0, 1.0, 6.0, 4.0]);
    }

    #[test]
    fn masked_logsumexp() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1, 3], &[0.0, 1000.0, 0.0]);
        let l = tape
            .logsumexp_last(a, Some(vec![true, false, true]))
            .unwrap();
        assert!((tape.value(l)[0] - 2f64.ln()).abs() < 1e-12);
        let big = tape.logsumexp_last(a, None).unwrap();
        assert!((tape.value(big)[0] - 1000.0).abs() < 1e-9);
    }
}
