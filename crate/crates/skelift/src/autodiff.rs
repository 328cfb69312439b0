//! Minimal tape-based reverse-mode automatic differentiation over dense
//! f64 tensors.
//!
//! A [`Tape`] records the forward pass as a flat list of nodes; `backward`
//! sweeps the list in reverse and accumulates gradients for every leaf that
//! was created with `requires_grad`. Tapes are cheap to build and are meant
//! to be rebuilt per forward pass.
//!
//! Elementwise binary ops broadcast the second operand into the first:
//! shapes are aligned from the trailing axis and each axis of `b` must
//! either match `a` or be 1 (missing leading axes broadcast).

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How a masked softmax treats the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Masked positions are excluded from the softmax entirely and get
    /// weight exactly 0; rows with no unmasked position come out all-zero.
    Exclude,
    /// The literal reading of a multiplicative mask: logits are multiplied
    /// by the mask before a plain softmax, so masked positions keep weight
    /// proportional to e^0.
    MultiplyLogits,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Bmm(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    ConcatLast(usize, usize),
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    MaskedSoftmaxLast {
        input: usize,
        mask: Vec<f64>,
        mode: MaskMode,
    },
    LayerNormLast {
        input: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Gelu(usize),
    NormLast(usize),
    SumAll(usize),
    SumAxisKeep(usize, usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Forward-pass recording with reverse-mode gradient accumulation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat index map from an output shape to a broadcast operand shape
/// (trailing-aligned, axes of size 1 or missing broadcast).
fn broadcast_map(out_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    let offset = out_shape.len().checked_sub(b_shape.len())?;
    for (i, &bd) in b_shape.iter().enumerate() {
        if bd != 1 && bd != out_shape[offset + i] {
            return None;
        }
    }
    let out_strides = strides(out_shape);
    let b_strides = strides(b_shape);
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    for flat in 0..n {
        let mut b_idx = 0;
        for (i, &bd) in b_shape.iter().enumerate() {
            let out_axis = offset + i;
            let coord = (flat / out_strides[out_axis]) % out_shape[out_axis];
            if bd != 1 {
                b_idx += coord * b_strides[i];
            }
        }
        map.push(b_idx);
    }
    Some(map)
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    out_row[j] += av * b_row[j];
                }
            }
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf tensor; gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Var {
        assert_eq!(
            numel(shape),
            value.len(),
            "leaf value length does not match shape"
        );
        self.push(shape.to_vec(), value, Op::Leaf, requires_grad)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        self.leaf(value, shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value], &[1])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v`
    /// required a gradient and was on the path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn binary_shape(&self, a: Var, b: Var, op: &str) -> Vec<usize> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        assert!(
            broadcast_map(sa, sb).is_some(),
            "{op}: cannot broadcast {sb:?} into {sa:?}"
        );
        sa.clone()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_shape(a, b, "add");
        let value = self.broadcast_zip(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, value, Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_shape(a, b, "sub");
        let value = self.broadcast_zip(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, value, Op::Sub(a.0, b.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_shape(a, b, "mul");
        let value = self.broadcast_zip(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, value, Op::Mul(a.0, b.0), needs)
    }

    fn broadcast_zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if self.nodes[a.0].shape == self.nodes[b.0].shape {
            av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let map = broadcast_map(&self.nodes[a.0].shape, &self.nodes[b.0].shape)
                .expect("checked by binary_shape");
            av.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[map[i]]))
                .collect()
        }
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| -x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(shape, value, Op::Neg(a.0), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| c * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(shape, value, Op::Scale(a.0, c), needs)
    }

    /// `a [.., m, k] @ b [k, n]` with a shared 2-D right operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert!(sa.len() >= 2 && sb.len() == 2, "matmul shapes {sa:?} @ {sb:?}");
        let k = sa[sa.len() - 1];
        assert_eq!(k, sb[0], "matmul inner dims {sa:?} @ {sb:?}");
        let m: usize = sa[..sa.len() - 1].iter().product();
        let n = sb[1];
        let mut value = vec![0.0; m * n];
        mm(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut value);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, value, Op::MatMul(a.0, b.0), needs)
    }

    /// Batched matmul: `a [B, m, k] @ b [B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm shapes {sa:?} @ {sb:?}"
        );
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut value = vec![0.0; batch * m * n];
        for i in 0..batch {
            mm(
                &self.nodes[a.0].value[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].value[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut value[i * m * n..(i + 1) * m * n],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![batch, m, n], value, Op::Bmm(a.0, b.0), needs)
    }

    /// Axis permutation; `axes` is the source axis for each output axis.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        assert_eq!(axes.len(), sa.len(), "permute axes {axes:?} for {sa:?}");
        let out_shape: Vec<usize> = axes.iter().map(|&ax| sa[ax]).collect();
        let in_strides = strides(&sa);
        let out_strides = strides(&out_shape);
        let n = numel(&sa);
        let mut value = vec![0.0; n];
        let av = &self.nodes[a.0].value;
        for (flat, v) in value.iter_mut().enumerate() {
            let mut src = 0;
            for (out_axis, &in_axis) in axes.iter().enumerate() {
                let coord = (flat / out_strides[out_axis]) % out_shape[out_axis];
                src += coord * in_strides[in_axis];
            }
            *v = av[src];
        }
        let needs = self.needs(a);
        self.push(out_shape, value, Op::Permute(a.0, axes.to_vec()), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(
            numel(shape),
            self.nodes[a.0].value.len(),
            "reshape {:?} -> {shape:?}",
            self.nodes[a.0].shape
        );
        let value = self.nodes[a.0].value.clone();
        let needs = self.needs(a);
        self.push(shape.to_vec(), value, Op::Reshape(a.0), needs)
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat {sa:?} | {sb:?}");
        let d1 = sa[sa.len() - 1];
        let d2 = sb[sb.len() - 1];
        let rows = numel(&sa) / d1;
        let mut value = Vec::with_capacity(rows * (d1 + d2));
        for r in 0..rows {
            value.extend_from_slice(&self.nodes[a.0].value[r * d1..(r + 1) * d1]);
            value.extend_from_slice(&self.nodes[b.0].value[r * d2..(r + 1) * d2]);
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(d1 + d2);
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, value, Op::ConcatLast(a.0, b.0), needs)
    }

    /// Contiguous slice of `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        assert!(axis < sa.len() && start + len <= sa[axis], "narrow bounds");
        let mut out_shape = sa.clone();
        out_shape[axis] = len;
        let in_strides = strides(&sa);
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = in_strides[axis];
        let mut value = Vec::with_capacity(numel(&out_shape));
        let av = &self.nodes[a.0].value;
        for o in 0..outer {
            let base = o * sa[axis] * inner;
            value.extend_from_slice(&av[base + start * inner..base + (start + len) * inner]);
        }
        let needs = self.needs(a);
        self.push(
            out_shape,
            value,
            Op::Narrow {
                input: a.0,
                axis,
                start,
                len,
            },
            needs,
        )
    }

    /// Softmax over the last axis with a constant 0/1 mask broadcast over
    /// leading axes. See [`MaskMode`] for the two masking semantics.
    pub fn masked_softmax_last(&mut self, a: Var, mask: &[f64], mode: MaskMode) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        let d = sa[sa.len() - 1];
        let rows = numel(&sa) / d;
        assert_eq!(mask.len() % d, 0, "mask length must cover whole rows");
        let mask_rows = mask.len() / d;
        assert_eq!(rows % mask_rows, 0, "mask rows must divide logits rows");
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; av.len()];
        for r in 0..rows {
            let m_row = &mask[(r % mask_rows) * d..(r % mask_rows + 1) * d];
            let x_row = &av[r * d..(r + 1) * d];
            let out_row = &mut value[r * d..(r + 1) * d];
            match mode {
                MaskMode::Exclude => {
                    let mut max = f64::NEG_INFINITY;
                    for i in 0..d {
                        if m_row[i] != 0.0 && x_row[i] > max {
                            max = x_row[i];
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue; // fully masked row stays zero
                    }
                    let mut z = 0.0;
                    for i in 0..d {
                        if m_row[i] != 0.0 {
                            out_row[i] = (x_row[i] - max).exp();
                            z += out_row[i];
                        }
                    }
                    for v in out_row.iter_mut() {
                        *v /= z;
                    }
                }
                MaskMode::MultiplyLogits => {
                    let mut max = f64::NEG_INFINITY;
                    for i in 0..d {
                        let xi = x_row[i] * m_row[i];
                        if xi > max {
                            max = xi;
                        }
                    }
                    let mut z = 0.0;
                    for i in 0..d {
                        out_row[i] = (x_row[i] * m_row[i] - max).exp();
                        z += out_row[i];
                    }
                    for v in out_row.iter_mut() {
                        *v /= z;
                    }
                }
            }
        }
        let needs = self.needs(a);
        self.push(
            sa,
            value,
            Op::MaskedSoftmaxLast {
                input: a.0,
                mask: mask.to_vec(),
                mode,
            },
            needs,
        )
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm_last(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        let d = sa[sa.len() - 1];
        assert_eq!(self.nodes[gain.0].shape, vec![d], "layer norm gain shape");
        assert_eq!(self.nodes[bias.0].shape, vec![d], "layer norm bias shape");
        let rows = numel(&sa) / d;
        let av = &self.nodes[a.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut value = vec![0.0; av.len()];
        for r in 0..rows {
            let x = &av[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                value[r * d + i] = (x[i] - mean) * inv * gv[i] + bv[i];
            }
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        self.push(
            sa,
            value,
            Op::LayerNormLast {
                input: a.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            needs,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(shape, value, Op::Gelu(a.0), needs)
    }

    /// Euclidean norm over the last axis; the subgradient at the origin is 0.
    pub fn norm_last(&mut self, a: Var) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        let d = sa[sa.len() - 1];
        let rows = numel(&sa) / d;
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; rows];
        for (r, v) in value.iter_mut().enumerate() {
            *v = av[r * d..(r + 1) * d]
                .iter()
                .map(|&x| x * x)
                .sum::<f64>()
                .sqrt();
        }
        let shape = sa[..sa.len() - 1].to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        let needs = self.needs(a);
        self.push(shape, value, Op::NormLast(a.0), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = vec![self.nodes[a.0].value.iter().sum()];
        let needs = self.needs(a);
        self.push(vec![1], value, Op::SumAll(a.0), needs)
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis_keep(&mut self, a: Var, axis: usize) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        assert!(axis < sa.len());
        let mut out_shape = sa.clone();
        out_shape[axis] = 1;
        let in_strides = strides(&sa);
        let outer: usize = sa[..axis].iter().product();
        let inner = in_strides[axis];
        let mut value = vec![0.0; numel(&out_shape)];
        let av = &self.nodes[a.0].value;
        for o in 0..outer {
            for s in 0..sa[axis] {
                let base = (o * sa[axis] + s) * inner;
                let out_base = o * inner;
                for i in 0..inner {
                    value[out_base + i] += av[base + i];
                }
            }
        }
        let needs = self.needs(a);
        self.push(out_shape, value, Op::SumAxisKeep(a.0, axis), needs)
    }

    fn accumulate(&mut self, node: usize, grad: &[f64]) {
        if !self.nodes[node].needs_grad {
            return;
        }
        let slot = &mut self.grads[node];
        match slot {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(grad.iter()) {
                    *gi += d;
                }
            }
            None => *slot = Some(grad.to_vec()),
        }
    }

    /// Sums a gradient of the output shape back over broadcast axes to a
    /// broadcast operand's shape.
    fn reduce_to(&self, grad: &[f64], out_node: usize, b_node: usize) -> Vec<f64> {
        let out_shape = &self.nodes[out_node].shape;
        let b_shape = &self.nodes[b_node].shape;
        if out_shape == b_shape {
            return grad.to_vec();
        }
        let map = broadcast_map(out_shape, b_shape).expect("validated in forward");
        let mut reduced = vec![0.0; self.nodes[b_node].value.len()];
        for (i, &g) in grad.iter().enumerate() {
            reduced[map[i]] += g;
        }
        reduced
    }

    /// Reverse sweep from a scalar root. Gradients of leaves created with
    /// `requires_grad` become available through [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::ShapeMismatch(
                "backward root must be a scalar".into(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    let reduced = self.reduce_to(&grad, idx, b);
                    self.accumulate(b, &reduced);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|&g| -g).collect();
                    let reduced = self.reduce_to(&neg, idx, b);
                    self.accumulate(b, &reduced);
                }
                Op::Mul(a, b) => {
                    let map = if self.nodes[idx].shape == self.nodes[b].shape {
                        None
                    } else {
                        Some(
                            broadcast_map(&self.nodes[idx].shape, &self.nodes[b].shape)
                                .expect("validated in forward"),
                        )
                    };
                    if self.nodes[a].needs_grad {
                        let bv = &self.nodes[b].value;
                        let ga: Vec<f64> = grad
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| g * bv[map.as_ref().map_or(i, |m| m[i])])
                            .collect();
                        self.accumulate(a, &ga);
                    }
                    if self.nodes[b].needs_grad {
                        let av = &self.nodes[a].value;
                        let gb_full: Vec<f64> =
                            grad.iter().enumerate().map(|(i, &g)| g * av[i]).collect();
                        let reduced = self.reduce_to(&gb_full, idx, b);
                        self.accumulate(b, &reduced);
                    }
                }
                Op::Neg(a) => {
                    let ga: Vec<f64> = grad.iter().map(|&g| -g).collect();
                    self.accumulate(a, &ga);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = grad.iter().map(|&g| c * g).collect();
                    self.accumulate(a, &ga);
                }
                Op::MatMul(a, b) => {
                    let sa = self.nodes[a].shape.clone();
                    let sb = self.nodes[b].shape.clone();
                    let k = sa[sa.len() - 1];
                    let m: usize = sa[..sa.len() - 1].iter().product();
                    let n = sb[1];
                    if self.nodes[a].needs_grad {
                        let bt = transpose(&self.nodes[b].value, k, n);
                        let mut ga = vec![0.0; m * k];
                        mm(&grad, &bt, m, n, k, &mut ga);
                        self.accumulate(a, &ga);
                    }
                    if self.nodes[b].needs_grad {
                        let at = transpose(&self.nodes[a].value, m, k);
                        let mut gb = vec![0.0; k * n];
                        mm(&at, &grad, k, m, n, &mut gb);
                        self.accumulate(b, &gb);
                    }
                }
                Op::Bmm(a, b) => {
                    let sa = self.nodes[a].shape.clone();
                    let sb = self.nodes[b].shape.clone();
                    let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    if self.nodes[a].needs_grad {
                        let mut ga = vec![0.0; batch * m * k];
                        for i in 0..batch {
                            let bt =
                                transpose(&self.nodes[b].value[i * k * n..(i + 1) * k * n], k, n);
                            mm(
                                &grad[i * m * n..(i + 1) * m * n],
                                &bt,
                                m,
                                n,
                                k,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                        self.accumulate(a, &ga);
                    }
                    if self.nodes[b].needs_grad {
                        let mut gb = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            let at =
                                transpose(&self.nodes[a].value[i * m * k..(i + 1) * m * k], m, k);
                            mm(
                                &at,
                                &grad[i * m * n..(i + 1) * m * n],
                                k,
                                m,
                                n,
                                &mut gb[i * k * n..(i + 1) * k * n],
                            );
                        }
                        self.accumulate(b, &gb);
                    }
                }
                Op::Permute(a, axes) => {
                    let out_shape = self.nodes[idx].shape.clone();
                    let in_shape = self.nodes[a].shape.clone();
                    let in_strides = strides(&in_shape);
                    let out_strides = strides(&out_shape);
                    let mut ga = vec![0.0; numel(&in_shape)];
                    for (flat, &g) in grad.iter().enumerate() {
                        let mut src = 0;
                        for (out_axis, &in_axis) in axes.iter().enumerate() {
                            let coord = (flat / out_strides[out_axis]) % out_shape[out_axis];
                            src += coord * in_strides[in_axis];
                        }
                        ga[src] += g;
                    }
                    self.accumulate(a, &ga);
                }
                Op::Reshape(a) => {
                    self.accumulate(a, &grad);
                }
                Op::ConcatLast(a, b) => {
                    let d1 = *self.nodes[a].shape.last().unwrap();
                    let d2 = *self.nodes[b].shape.last().unwrap();
                    let rows = self.nodes[a].value.len() / d1;
                    let mut ga = vec![0.0; rows * d1];
                    let mut gb = vec![0.0; rows * d2];
                    for r in 0..rows {
                        ga[r * d1..(r + 1) * d1]
                            .copy_from_slice(&grad[r * (d1 + d2)..r * (d1 + d2) + d1]);
                        gb[r * d2..(r + 1) * d2]
                            .copy_from_slice(&grad[r * (d1 + d2) + d1..(r + 1) * (d1 + d2)]);
                    }
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Narrow {
                    input,
                    axis,
                    start,
                    len,
                } => {
                    let in_shape = self.nodes[input].shape.clone();
                    let in_strides = strides(&in_shape);
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner = in_strides[axis];
                    let mut ga = vec![0.0; numel(&in_shape)];
                    for o in 0..outer {
                        let base = o * in_shape[axis] * inner;
                        let g_base = o * len * inner;
                        ga[base + start * inner..base + (start + len) * inner]
                            .copy_from_slice(&grad[g_base..g_base + len * inner]);
                    }
                    self.accumulate(input, &ga);
                }
                Op::MaskedSoftmaxLast { input, mask, mode } => {
                    let y = self.nodes[idx].value.clone();
                    let d = *self.nodes[idx].shape.last().unwrap();
                    let rows = y.len() / d;
                    let mask_rows = mask.len() / d;
                    let mut ga = vec![0.0; y.len()];
                    for r in 0..rows {
                        let y_row = &y[r * d..(r + 1) * d];
                        let g_row = &grad[r * d..(r + 1) * d];
                        let dot: f64 = y_row.iter().zip(g_row.iter()).map(|(&a, &b)| a * b).sum();
                        let m_row = &mask[(r % mask_rows) * d..(r % mask_rows + 1) * d];
                        for i in 0..d {
                            let ds = y_row[i] * (g_row[i] - dot);
                            ga[r * d + i] = match mode {
                                MaskMode::Exclude => ds,
                                MaskMode::MultiplyLogits => ds * m_row[i],
                            };
                        }
                    }
                    self.accumulate(input, &ga);
                }
                Op::LayerNormLast {
                    input,
                    gain,
                    bias,
                    eps,
                } => {
                    let d = *self.nodes[idx].shape.last().unwrap();
                    let rows = self.nodes[idx].value.len() / d;
                    let x = self.nodes[input].value.clone();
                    let gv = self.nodes[gain].value.clone();
                    let mut g_in = vec![0.0; x.len()];
                    let mut g_gain = vec![0.0; d];
                    let mut g_bias = vec![0.0; d];
                    for r in 0..rows {
                        let xr = &x[r * d..(r + 1) * d];
                        let gr = &grad[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv).collect();
                        let gxhat: Vec<f64> =
                            gr.iter().zip(gv.iter()).map(|(&g, &gm)| g * gm).collect();
                        let mean_g = gxhat.iter().sum::<f64>() / d as f64;
                        let mean_gx = gxhat
                            .iter()
                            .zip(xhat.iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for i in 0..d {
                            g_in[r * d + i] = inv * (gxhat[i] - mean_g - xhat[i] * mean_gx);
                            g_gain[i] += gr[i] * xhat[i];
                            g_bias[i] += gr[i];
                        }
                    }
                    self.accumulate(input, &g_in);
                    self.accumulate(gain, &g_gain);
                    self.accumulate(bias, &g_bias);
                }
                Op::Gelu(a) => {
                    let ga: Vec<f64> = self.nodes[a]
                        .value
                        .iter()
                        .zip(grad.iter())
                        .map(|(&x, &g)| g * gelu_derivative(x))
                        .collect();
                    self.accumulate(a, &ga);
                }
                Op::NormLast(a) => {
                    let d = *self.nodes[a].shape.last().unwrap();
                    let rows = self.nodes[a].value.len() / d;
                    let av = &self.nodes[a].value;
                    let norms = &self.nodes[idx].value;
                    let mut ga = vec![0.0; av.len()];
                    for r in 0..rows {
                        if norms[r] > 0.0 {
                            let scale = grad[r] / norms[r];
                            for i in 0..d {
                                ga[r * d + i] = scale * av[r * d + i];
                            }
                        }
                    }
                    self.accumulate(a, &ga);
                }
                Op::SumAll(a) => {
                    let ga = vec![grad[0]; self.nodes[a].value.len()];
                    self.accumulate(a, &ga);
                }
                Op::SumAxisKeep(a, axis) => {
                    let in_shape = self.nodes[a].shape.clone();
                    let in_strides = strides(&in_shape);
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner = in_strides[axis];
                    let mut ga = vec![0.0; numel(&in_shape)];
                    for o in 0..outer {
                        for s in 0..in_shape[axis] {
                            let base = (o * in_shape[axis] + s) * inner;
                            let g_base = o * inner;
                            for i in 0..inner {
                                ga[base + i] = grad[g_base + i];
                            }
                        }
                    }
                    self.accumulate(a, &ga);
                }
            }
        }
        Ok(())
    }
}
