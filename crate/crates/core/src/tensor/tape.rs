use std::rc::Rc;

use super::{gemm_acc, gemm_nt_acc, gemm_tn_acc, sigmoid, softmax_into, AttentionMask, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Log,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Unary, Var),
    Affine(Var, f64),
    Clamp(Var, f64, f64),
    AddBias(Var, Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    GatherElements(Var, Vec<usize>),
    Reshape(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Sum(Var),
    /// Scalar function with precomputed local gradients, one buffer per input.
    ScalarFn(Vec<Var>, Vec<Vec<f64>>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of primitive operations.
///
/// Operands always precede their results, so the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers indexed by [`Var`]; `None` for tensors the loss does not depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var)
            .map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn broadcast_len(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        ))
    }
}

#[inline]
fn pick(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        self.value(var).dims2().ok_or_else(|| {
            Error::shape(op, format!("expected a matrix, got {:?}", self.shape(var)))
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            ng,
        )
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("[{m}×{k}] · [{n}×{k2}]ᵀ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(
            "matmul_nt",
            Tensor::new(vec![m, n], out)?,
            Op::MatMulNt(a, b),
            ng,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(x);
        self.push(
            "transpose",
            Tensor::new(vec![n, m], out)?,
            Op::Transpose(x),
            ng,
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = broadcast_len(name, self.value(a), self.value(b))?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = (0..n).map(|i| f(pick(ad, i), pick(bd, i))).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(name, Tensor::new(shape, out)?, op, ng)
    }

    /// Elementwise sum; shapes must match or one side must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, u: Unary, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (name, out): (&'static str, Vec<f64>) = match u {
            Unary::Neg => ("neg", src.data().iter().map(|v| -v).collect()),
            Unary::Tanh => ("tanh", src.data().iter().map(|v| v.tanh()).collect()),
            Unary::Sigmoid => ("sigmoid", src.data().iter().map(|&v| sigmoid(v)).collect()),
            Unary::Exp => ("exp", src.data().iter().map(|v| v.exp()).collect()),
            Unary::Log => {
                if let Some(&bad) = src.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::LogDomain {
                        op: "log",
                        value: bad,
                    });
                }
                ("log", src.data().iter().map(|v| v.ln()).collect())
            }
        };
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let ng = self.needs(x);
        self.push(name, value, Op::Unary(u, x), ng)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    /// `scale · x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let src = self.value(x);
        let out = src.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let ng = self.needs(x);
        self.push("affine", value, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let src = self.value(x);
        let out = src.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let ng = self.needs(x);
        self.push("clamp", value, Op::Clamp(x, lo, hi), ng)
    }

    /// Adds `bias[n]` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", x)?;
        if self.value(bias).numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("[{m}×{n}] + {:?}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(
            "add_bias",
            Tensor::new(vec![m, n], out)?,
            Op::AddBias(x, bias),
            ng,
        )
    }

    /// Softmax over the last dimension, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let last = *src.shape().last().unwrap_or(&0);
        if last == 0 {
            return Err(Error::EmptyDim { op: "softmax" });
        }
        let mut out = vec![0.0; src.numel()];
        for (row, o) in src.data().chunks(last).zip(out.chunks_mut(last)) {
            softmax_into(row, o);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let ng = self.needs(x);
        self.push("softmax", value, Op::Softmax(x), ng)
    }

    /// Row softmax of `x[T×T]` restricted to the keys `mask` allows; masked weights are zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<AttentionMask>) -> Result<Var> {
        let (m, n) = self.dims2("masked_softmax", x)?;
        if mask.len() != n || m != n {
            return Err(Error::shape(
                "masked_softmax",
                format!("scores [{m}×{n}] with mask of size {}", mask.len()),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for q in 0..m {
            let allowed = mask.row(q);
            let row = &src[q * n..(q + 1) * n];
            let max = row
                .iter()
                .zip(allowed)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMasked { row: q });
            }
            let o = &mut out[q * n..(q + 1) * n];
            let mut sum = 0.0;
            for k in 0..n {
                if allowed[k] {
                    o[k] = (row[k] - max).exp();
                    sum += o[k];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.needs(x);
        self.push(
            "masked_softmax",
            Tensor::new(vec![m, n], out)?,
            Op::MaskedSoftmax(x),
            ng,
        )
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape("layer_norm", "gain/bias width mismatch"));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let ng = self.needs(x);
        self.push(
            "gather_rows",
            Tensor::new(vec![rows.len(), n], out)?,
            Op::GatherRows(x, rows.to_vec()),
            ng,
        )
    }

    /// Selects individual elements by flat index into a 1-D result.
    pub fn gather_elements(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let numel = self.value(x).numel();
        if let Some(&bad) = flat.iter().find(|&&i| i >= numel) {
            return Err(Error::shape(
                "gather_elements",
                format!("index {bad} of {numel}"),
            ));
        }
        let src = self.value(x).data();
        let out = flat.iter().map(|&i| src[i]).collect();
        let ng = self.needs(x);
        self.push(
            "gather_elements",
            Tensor::new(vec![flat.len()], out)?,
            Op::GatherElements(x, flat.to_vec()),
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push("reshape", value, Op::Reshape(x), ng)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", x)?;
        if start > end || end > m {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {m}")));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let ng = self.needs(x);
        self.push(
            "slice_rows",
            Tensor::new(vec![end - start, n], out)?,
            Op::SliceRows(x, start),
            ng,
        )
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let (_, n) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, n2) = self.dims2("concat_rows", p)?;
            if n2 != n {
                return Err(Error::shape("concat_rows", format!("width {n2} vs {n}")));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Records an opaque scalar function whose gradient with respect to each input has already
    /// been computed (`local_grads[i]` has the size of `inputs[i]`).
    pub fn scalar_fn(
        &mut self,
        inputs: &[Var],
        value: f64,
        local_grads: Vec<Vec<f64>>,
    ) -> Result<Var> {
        if inputs.len() != local_grads.len()
            || inputs
                .iter()
                .zip(&local_grads)
                .any(|(&v, g)| self.value(v).numel() != g.len())
        {
            return Err(Error::shape(
                "scalar_fn",
                "local gradient sizes do not match inputs",
            ));
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            "scalar_fn",
            Tensor::scalar(value),
            Op::ScalarFn(inputs.to_vec(), local_grads),
            ng,
        )
    }

    /// Scaled dot-product attention. Returns the output `[T×d_v]` and the weight matrix `[T×T]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Rc<AttentionMask>,
    ) -> Result<(Var, Var)> {
        let (_, d) = self.dims2("attention", q)?;
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let weights = self.masked_softmax(scaled, mask)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].value.numel();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = node.value.shape()[1];
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm_nt_acc(g, val(*b), ga, m, n, k);
                }
                if self.needs(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    gemm_tn_acc(val(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a · bᵀ ; da = g · b ; db = gᵀ · a
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = node.value.shape()[1];
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm_acc(g, val(*b), ga, m, n, k);
                }
                if self.needs(*b) {
                    let gb = accumulate(&mut grads[b.0], n * k);
                    gemm_tn_acc(g, val(*a), gb, m, n, k);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.nodes[x.0].value.dims2().unwrap();
                let gx = accumulate(&mut grads[x.0], m * n);
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                for (operand, s) in [(*a, 1.0), (*b, sign)] {
                    if !self.needs(operand) {
                        continue;
                    }
                    let n = len(operand);
                    let go = accumulate(&mut grads[operand.0], n);
                    if n == g.len() {
                        for (o, gv) in go.iter_mut().zip(g) {
                            *o += s * gv;
                        }
                    } else {
                        go[0] += s * g.iter().sum::<f64>();
                    }
                }
            }
            Op::Mul(a, b) => {
                for (operand, other) in [(*a, *b), (*b, *a)] {
                    if !self.needs(operand) {
                        continue;
                    }
                    let n = len(operand);
                    let od = val(other);
                    let go = accumulate(&mut grads[operand.0], n);
                    if n == g.len() {
                        for (i, o) in go.iter_mut().enumerate() {
                            *o += g[i] * pick(od, i);
                        }
                    } else {
                        go[0] += g
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv * pick(od, i))
                            .sum::<f64>();
                    }
                }
            }
            Op::Unary(u, x) => {
                let xd = val(*x);
                let y = node.value.data();
                let gx = accumulate(&mut grads[x.0], xd.len());
                for i in 0..xd.len() {
                    let local = match u {
                        Unary::Neg => -1.0,
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Log => 1.0 / xd[i],
                        Unary::Exp => y[i],
                    };
                    gx[i] += g[i] * local;
                }
            }
            Op::Affine(x, s) => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += s * gv;
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xd = val(*x);
                let gx = accumulate(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    if xd[i] >= *lo && xd[i] <= *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::AddBias(x, b) => {
                let n = len(*b);
                if self.needs(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if self.needs(*b) {
                    let gb = accumulate(&mut grads[b.0], n);
                    for row in g.chunks(n) {
                        for (o, gv) in gb.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let last = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let gx = accumulate(&mut grads[x.0], g.len());
                for ((yr, gr), out) in y.chunks(last).zip(g.chunks(last)).zip(gx.chunks_mut(last)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..last {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = len(*gain);
                let gd = val(*gain);
                if self.needs(*gain) {
                    let gg = accumulate(&mut grads[gain.0], n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = accumulate(&mut grads[bias.0], n);
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            gb[j] += gr[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    let mut dxhat = vec![0.0; n];
                    for (i, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dxhat[j] = gr[j] * gd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let out = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            out[j] += rstd[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                let n = node.value.shape()[1];
                let gx = accumulate(&mut grads[x.0], len(*x));
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        gx[r * n + j] += g[k * n + j];
                    }
                }
            }
            Op::GatherElements(x, flat) => {
                let gx = accumulate(&mut grads[x.0], len(*x));
                for (k, &i) in flat.iter().enumerate() {
                    gx[i] += g[k];
                }
            }
            Op::Reshape(x) => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += gv;
                }
            }
            Op::SliceRows(x, start) => {
                let n = node.value.shape()[1];
                let gx = accumulate(&mut grads[x.0], len(*x));
                for (o, gv) in gx[start * n..].iter_mut().zip(g) {
                    *o += gv;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    if self.needs(p) {
                        let gp = accumulate(&mut grads[p.0], n);
                        for (o, gv) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *o += gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let gx = accumulate(&mut grads[x.0], len(*x));
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
            Op::ScalarFn(inputs, local) => {
                for (&x, lg) in inputs.iter().zip(local) {
                    if !self.needs(x) {
                        continue;
                    }
                    let gx = accumulate(&mut grads[x.0], lg.len());
                    for (o, l) in gx.iter_mut().zip(lg) {
                        *o += g[0] * l;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = mat(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = mat(&mut tape, &[vec![3.0], vec![4.0]]);
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let a = mat(&mut tape, &[vec![1.0, 2.0]]);
        let dot = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(dot).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = mat(&mut tape, &[vec![1.0, 2.0]]);
        let b = mat(&mut tape, &[vec![1.0, 2.0]]);
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.value(s).item(), Some(0.5));
        assert_eq!(tape.value(t).item(), Some(0.0));
        let one = tape.leaf(Tensor::scalar(1.0));
        let s1 = tape.sigmoid(one).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((tape.value(s1).item().unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn log_of_nonpositive_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::LogDomain { .. })));
    }

    #[test]
    fn incompatible_broadcast_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let s = tape.leaf(Tensor::scalar(2.0));
        let ok = tape.mul(b, s).unwrap();
        assert_eq!(tape.value(ok).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.leaf(Tensor::vector(vec![1000.0, 0.0]));
        let y = tape.softmax(big).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_empty_last_dim_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 0]));
        assert!(matches!(tape.softmax(x), Err(Error::EmptyDim { .. })));
    }

    #[test]
    fn attention_single_frame_and_symmetry() {
        let mut tape = Tape::new();
        let q = mat(&mut tape, &[vec![0.3, -0.2]]);
        let v = mat(&mut tape, &[vec![5.0, 7.0]]);
        let (out, w) = tape
            .attention(q, q, v, Rc::new(AttentionMask::full(1)))
            .unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(out).data(), &[5.0, 7.0]);

        let q2 = mat(&mut tape, &[vec![0.3, 1.0], vec![-0.5, 2.0]]);
        let k2 = mat(&mut tape, &[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let v2 = mat(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (_, w) = tape
            .attention(q2, k2, v2, Rc::new(AttentionMask::full(2)))
            .unwrap();
        for v in tape.value(w).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_attention_weights_are_lower_triangular() {
        let mut tape = Tape::new();
        let x = mat(
            &mut tape,
            &[vec![0.1, 0.2], vec![0.3, -0.4], vec![-0.5, 0.6]],
        );
        let (_, w) = tape
            .attention(x, x, x, Rc::new(AttentionMask::causal(3)))
            .unwrap();
        let wt = tape.value(w);
        for q in 0..3 {
            for k in 0..3 {
                if k > q {
                    assert_eq!(wt.get2(q, k), 0.0);
                } else {
                    assert!(wt.get2(q, k) > 0.0);
                }
            }
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, &[vec![0.1], vec![0.2]]);
        let mask = AttentionMask::from_fn(2, |q, _| q == 0);
        assert!(matches!(
            tape.attention(x, x, x, Rc::new(mask)),
            Err(Error::FullyMasked { row: 1 })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }
}
