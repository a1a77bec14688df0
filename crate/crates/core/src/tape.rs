//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive appends a node holding its value and enough context to
//! run its vector-Jacobian product. Nodes are appended in evaluation order, so
//! walking the tape backwards is a valid reverse topological order.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{config_err, contract_err, shape_err, Error, Result};
use crate::tensor::{numel, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Relu,
    Neg,
    Exp,
    Scale(f64),
    Offset(f64),
    Sigmoid,
    Abs,
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Scale(c) => c * x,
            UnaryOp::Offset(c) => x + c,
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Abs => x.abs(),
        }
    }

    /// Derivative given input `x` and output `y`. Kinks take the zero subgradient.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Scale(c) => c,
            UnaryOp::Offset(_) => 1.0,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for UnaryOp {
    type Err = Error;

    /// Parses `relu`, `neg`, `exp`, `sigmoid`, `abs`, `scale(c)` and `offset(c)`.
    fn from_str(tag: &str) -> Result<Self> {
        let tag = tag.trim();
        let with_arg = |prefix: &str| -> Option<Result<f64>> {
            let rest = tag.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(rest.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad constant in `{tag}`: {e}"))))
        };
        match tag {
            "relu" => Ok(UnaryOp::Relu),
            "neg" => Ok(UnaryOp::Neg),
            "exp" => Ok(UnaryOp::Exp),
            "sigmoid" => Ok(UnaryOp::Sigmoid),
            "abs" => Ok(UnaryOp::Abs),
            _ => {
                if let Some(c) = with_arg("scale") {
                    return c.map(UnaryOp::Scale);
                }
                if let Some(c) = with_arg("offset") {
                    return c.map(UnaryOp::Offset);
                }
                config_err(format!("unknown unary function tag `{tag}`"))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

impl FromStr for BinaryOp {
    type Err = Error;

    fn from_str(tag: &str) -> Result<Self> {
        match tag.trim() {
            "add" => Ok(BinaryOp::Add),
            "sub" => Ok(BinaryOp::Sub),
            "mul" => Ok(BinaryOp::Mul),
            "div" => Ok(BinaryOp::Div),
            "min" => Ok(BinaryOp::Min),
            "max" => Ok(BinaryOp::Max),
            other => config_err(format!("unknown binary function tag `{other}`")),
        }
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl ConvSpec {
    /// Output extent along one axis, or `None` when the dilated kernel does not fit.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-element source offsets for a broadcast binary op.
struct Broadcast {
    a: Vec<usize>,
    b: Vec<usize>,
}

enum Op {
    Leaf,
    Unary { x: usize, op: UnaryOp },
    Binary { a: usize, b: usize, op: BinaryOp, bcast: Option<Broadcast> },
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Conv2d { x: usize, w: usize, bias: Option<usize>, spec: ConvSpec },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape { x: usize },
    TransposeLast2 { x: usize },
    IndexSelect { x: usize, axis: usize, indices: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    Sum { x: usize },
    Mean { x: usize },
    BceLogits { z: usize, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary { .. } => "unary",
            Op::Binary { .. } => "binary",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape { .. } => "reshape",
            Op::TransposeLast2 { .. } => "transpose",
            Op::IndexSelect { .. } => "index_select",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::BceLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. Confined to one thread; build one per forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("id", &self.id).field("nodes", &self.nodes.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return contract_err("variable does not belong to this tape");
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a leaf; gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.value(v).grad()
    }

    /// Takes the value of `v` out as a detached tensor that carries its gradient.
    pub fn grad_tensor(&self, v: Var) -> Result<Tensor> {
        let t = self.value(v);
        match t.grad() {
            Some(g) => Tensor::new(t.shape(), g.to_vec()),
            None => contract_err("no gradient recorded; call backward first"),
        }
    }

    // ---- elementwise ---------------------------------------------------

    pub fn map_unary(&mut self, x: Var, op: UnaryOp) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.nodes[xi].value;
        let out = Tensor::new(src.shape(), src.data().iter().map(|&v| op.apply(v)).collect())?;
        Ok(self.push(out, Op::Unary { x: xi, op }, self.rg(xi)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, UnaryOp::Relu)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, UnaryOp::Neg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, UnaryOp::Exp)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, UnaryOp::Scale(c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, UnaryOp::Offset(c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, UnaryOp::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, UnaryOp::Abs)
    }

    /// Elementwise binary op with numpy-style broadcasting: shapes are aligned
    /// on their trailing axes and an extent of 1 stretches to match the other
    /// operand.
    pub fn map_binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
            BinaryOp::Min => x.min(y),
            BinaryOp::Max => x.max(y),
        };
        let (out, bcast) = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            (Tensor::new(av.shape(), data)?, None)
        } else {
            let (shape, bc) = broadcast(av.shape(), bv.shape())?;
            let data = bc.a.iter().zip(&bc.b).map(|(&i, &j)| f(av.data()[i], bv.data()[j])).collect();
            (Tensor::new(&shape, data)?, Some(bc))
        };
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::Binary { a: ai, b: bi, op, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(a, b, BinaryOp::Div)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(a, b, BinaryOp::Min)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(a, b, BinaryOp::Max)
    }

    // ---- linear algebra ------------------------------------------------

    /// `[.., m, k] × [.., k, n] → [.., m, n]`; leading batch extents must be equal.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return shape_err(format!("matmul needs equal-rank (≥2) operands with equal batch extents, got {sa:?} and {sb:?}"));
        }
        let r = sa.len();
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return shape_err(format!("matmul inner extents differ: {sa:?} × {sb:?}"));
        }
        let batch = numel(&sa[..r - 2]);
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let (ad, bd) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let mut out = vec![0.0; batch * m * n];
        for bt in 0..batch {
            let (ao, bo, oo) = (bt * m * k, bt * k * n, bt * m * n);
            for i in 0..m {
                let row = &mut out[oo + i * n..oo + (i + 1) * n];
                for p in 0..k {
                    let av = ad[ao + i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[bo + p * n..bo + (p + 1) * n];
                    row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
                }
            }
        }
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a: ai, b: bi, batch, m, k, n }, rg))
    }

    /// Direct 2-D convolution of a `C_in×H×W` map with a
    /// `C_out×(C_in/groups)×kh×kw` kernel and optional `C_out` bias.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(kernel)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let (xs, ws) = (self.nodes[xi].value.shape(), self.nodes[wi].value.shape());
        let geo = ConvGeometry::new(xs, ws, spec)?;
        if let Some(bi) = bi {
            let bs = self.nodes[bi].value.shape();
            if bs != [geo.cout] {
                return shape_err(format!("conv bias shape {bs:?} does not match kernel {ws:?}"));
            }
        }
        let mut out = vec![0.0; geo.cout * geo.oh * geo.ow];
        geo.forward(self.nodes[xi].value.data(), self.nodes[wi].value.data(), &mut out);
        if let Some(bi) = bi {
            let bd = self.nodes[bi].value.data();
            let plane = geo.oh * geo.ow;
            for (c, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bd[c]);
            }
        }
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        let shape = [geo.cout, geo.oh, geo.ow];
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x: xi, w: wi, bias: bi, spec }, rg))
    }

    // ---- normalisation -------------------------------------------------

    /// Numerically stable softmax (max-subtracted) along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if axis >= xv.rank() {
            return shape_err(format!("softmax axis {axis} invalid for shape {:?}", xv.shape()));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x: xi, axis }, self.rg(xi)))
    }

    /// Layer normalisation over the leading (channel) axis, independently at
    /// every remaining position, followed by a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xv = &self.nodes[xi].value;
        let c = xv.shape()[0];
        let (gs, bs) = (self.nodes[gi].value.shape(), self.nodes[bi].value.shape());
        if gs != [c] || bs != [c] {
            return shape_err(format!(
                "layer_norm affine shapes {gs:?}/{bs:?} do not match channel extent of {:?}",
                xv.shape()
            ));
        }
        let positions = xv.numel() / c;
        let xd = xv.data();
        let (gd, bd) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; positions];
        let mut out = vec![0.0; xd.len()];
        for p in 0..positions {
            let mean = (0..c).map(|ch| xd[ch * positions + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (xd[ch * positions + p] - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[p] = is;
            for ch in 0..c {
                let k = ch * positions + p;
                xhat[k] = (xd[k] - mean) * is;
                out[k] = gd[ch] * xhat[k] + bd[ch];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std }, rg))
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.clone().reshape(shape)?.with_requires_grad(false);
        Ok(self.push(out, Op::Reshape { x: xi }, self.rg(xi)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let r = xv.rank();
        if r < 2 {
            return shape_err(format!("transpose needs rank ≥ 2, got {:?}", xv.shape()));
        }
        let (m, n) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let batch = xv.numel() / (m * n);
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for bt in 0..batch {
            let o = bt * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = xd[o + i * n + j];
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(self.push(Tensor::new(&shape, out)?, Op::TransposeLast2 { x: xi }, self.rg(xi)))
    }

    /// Gathers `indices` along `axis`; indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if axis >= xv.rank() {
            return shape_err(format!("index_select axis {axis} invalid for shape {:?}", xv.shape()));
        }
        if indices.is_empty() {
            return shape_err("index_select with no indices");
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return shape_err(format!("index {bad} out of range for axis {axis} of {:?}", xv.shape()));
        }
        let xd = xv.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                let s = (o * len + j) * inner;
                out.extend_from_slice(&xd[s..s + inner]);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = indices.len();
        let op = Op::IndexSelect { x: xi, axis, indices: indices.to_vec() };
        Ok(self.push(Tensor::new(&shape, out)?, op, self.rg(xi)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let ids = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[ids[0]].value.shape().to_vec();
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} invalid for shape {first:?}"));
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err(format!("concat along axis {axis}: {s:?} incompatible with {first:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let v = &self.nodes[i].value;
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = ids.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { xs: ids, axis }, rg))
    }

    // ---- reductions and losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: xi }, self.rg(xi)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let m = v.sum() / v.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean { x: xi }, self.rg(xi)))
    }

    /// Elementwise binary cross-entropy between `sigmoid(z)` and fixed targets.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let zi = self.idx(z)?;
        let zv = &self.nodes[zi].value;
        if targets.len() != zv.numel() {
            return shape_err(format!("bce targets have {} entries for logits {:?}", targets.len(), zv.shape()));
        }
        let out = zv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let shape = zv.shape().to_vec();
        let op = Op::BceLogits { z: zi, targets: targets.to_vec() };
        Ok(self.push(Tensor::new(&shape, out)?, op, self.rg(zi)))
    }

    /// Every piecewise choice the recorded graph made: the side of each
    /// `relu`/`abs` input, the winner of each `minimum`/`maximum`, gathered
    /// indices and BCE targets. Two evaluations with equal signatures lie on
    /// the same smooth piece.
    pub fn branch_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary { x, op: UnaryOp::Relu | UnaryOp::Abs } => {
                    sig.extend(self.nodes[*x].value.data().iter().map(|&v| (v > 0.0) as u64));
                }
                Op::Binary { a, b, op: BinaryOp::Min | BinaryOp::Max, bcast } => {
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    match bcast {
                        None => sig.extend(av.iter().zip(bv).map(|(x, y)| (x <= y) as u64)),
                        Some(bc) => sig.extend(bc.a.iter().zip(&bc.b).map(|(&i, &j)| (av[i] <= bv[j]) as u64)),
                    }
                }
                Op::IndexSelect { indices, .. } => sig.extend(indices.iter().map(|&i| i as u64)),
                Op::BceLogits { targets, .. } => sig.extend(targets.iter().map(|t| t.to_bits())),
                _ => {}
            }
        }
        sig
    }

    // ---- reverse pass ----------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and stores the result
    /// on every leaf that requires a gradient. Fan-out accumulates additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss).map_err(|_| Error::Contract("loss is detached from this tape".into()))?;
        if self.nodes[li].value.numel() != 1 {
            return contract_err(format!("loss must be scalar, got shape {:?}", self.nodes[li].value.shape()));
        }
        if !self.nodes[li].requires_grad {
            return contract_err("loss does not depend on any trainable leaf");
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.vjp(i, &g, &mut grads)?;
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let n = node.value.numel();
                node.value.set_grad(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |j: usize| self.nodes[j].value.data();
        let wants = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Unary { x, op } => {
                if wants(*x) {
                    let xd = val(*x);
                    let acc = slot(grads, *x, xd.len());
                    for k in 0..g.len() {
                        acc[k] += g[k] * op.derivative(xd[k], out[k]);
                    }
                }
            }
            Op::Binary { a, b, op, bcast } => {
                let (ad, bd) = (val(*a), val(*b));
                let n = g.len();
                let ia = |k: usize| bcast.as_ref().map_or(k, |bc| bc.a[k]);
                let ib = |k: usize| bcast.as_ref().map_or(k, |bc| bc.b[k]);
                let partials = |k: usize| -> (f64, f64) {
                    let (x, y) = (ad[ia(k)], bd[ib(k)]);
                    match op {
                        BinaryOp::Add => (1.0, 1.0),
                        BinaryOp::Sub => (1.0, -1.0),
                        BinaryOp::Mul => (y, x),
                        BinaryOp::Div => (1.0 / y, -x / (y * y)),
                        BinaryOp::Min => {
                            if x <= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                        BinaryOp::Max => {
                            if x >= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                    }
                };
                if wants(*a) {
                    let acc = slot(grads, *a, ad.len());
                    for k in 0..n {
                        acc[ia(k)] += g[k] * partials(k).0;
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, bd.len());
                    for k in 0..n {
                        acc[ib(k)] += g[k] * partials(k).1;
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (val(*a), val(*b));
                if wants(*a) {
                    // dA = G · Bᵀ
                    let acc = slot(grads, *a, ad.len());
                    for bt in 0..*batch {
                        for i in 0..m {
                            for p in 0..k {
                                let grow = &g[bt * m * n + i * n..bt * m * n + (i + 1) * n];
                                let brow = &bd[bt * k * n + p * n..bt * k * n + (p + 1) * n];
                                acc[bt * m * k + i * k + p] += dot(grow, brow);
                            }
                        }
                    }
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let acc = slot(grads, *b, bd.len());
                    for bt in 0..*batch {
                        for i in 0..m {
                            let grow = &g[bt * m * n + i * n..bt * m * n + (i + 1) * n];
                            for p in 0..k {
                                let av = ad[bt * m * k + i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let dst = &mut acc[bt * k * n + p * n..bt * k * n + (p + 1) * n];
                                dst.iter_mut().zip(grow).for_each(|(d, &gv)| *d += av * gv);
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, bias, spec } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let geo = ConvGeometry::new(xv.shape(), wv.shape(), *spec)?;
                if wants(*x) {
                    let acc = slot(grads, *x, xv.numel());
                    geo.backward_input(wv.data(), g, acc);
                }
                if wants(*w) {
                    let acc = slot(grads, *w, wv.numel());
                    geo.backward_kernel(xv.data(), g, acc);
                }
                if let Some(bi) = bias.filter(|&b| wants(b)) {
                    let plane = geo.oh * geo.ow;
                    let acc = slot(grads, bi, geo.cout);
                    for (c, chunk) in g.chunks(plane).enumerate() {
                        acc[c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let acc = slot(grads, *x, out.len());
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let dotp: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                acc[at(j)] += out[at(j)] * (g[at(j)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = self.nodes[*x].value.shape()[0];
                let positions = out.len() / c;
                let gd = val(*gamma);
                if wants(*x) {
                    let acc = slot(grads, *x, out.len());
                    for p in 0..positions {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for ch in 0..c {
                            let k = ch * positions + p;
                            let gh = g[k] * gd[ch];
                            mean_g += gh;
                            mean_gx += gh * xhat[k];
                        }
                        mean_g /= c as f64;
                        mean_gx /= c as f64;
                        for ch in 0..c {
                            let k = ch * positions + p;
                            let gh = g[k] * gd[ch];
                            acc[k] += inv_std[p] * (gh - mean_g - xhat[k] * mean_gx);
                        }
                    }
                }
                if wants(*gamma) {
                    let acc = slot(grads, *gamma, c);
                    for ch in 0..c {
                        let r = ch * positions..(ch + 1) * positions;
                        acc[ch] += dot(&g[r.clone()], &xhat[r]);
                    }
                }
                if wants(*beta) {
                    let acc = slot(grads, *beta, c);
                    for ch in 0..c {
                        acc[ch] += g[ch * positions..(ch + 1) * positions].iter().sum::<f64>();
                    }
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    let acc = slot(grads, *x, g.len());
                    acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
                }
            }
            Op::TransposeLast2 { x } => {
                if wants(*x) {
                    let s = self.nodes[*x].value.shape();
                    let r = s.len();
                    let (m, n) = (s[r - 2], s[r - 1]);
                    let acc = slot(grads, *x, g.len());
                    for bt in 0..g.len() / (m * n) {
                        let o = bt * m * n;
                        for ii in 0..m {
                            for j in 0..n {
                                acc[o + ii * n + j] += g[o + j * m + ii];
                            }
                        }
                    }
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                if wants(*x) {
                    let xs = self.nodes[*x].value.shape();
                    let (outer, len, inner) = split_axis(xs, *axis);
                    let acc = slot(grads, *x, numel(xs));
                    let mut src = 0;
                    for o in 0..outer {
                        for &j in indices {
                            let d = (o * len + j) * inner;
                            for t in 0..inner {
                                acc[d + t] += g[src + t];
                            }
                            src += inner;
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &xi in xs {
                    let len = self.nodes[xi].value.shape()[*axis];
                    if wants(xi) {
                        let acc = slot(grads, xi, outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + start) * inner;
                            let d = o * len * inner;
                            for t in 0..len * inner {
                                acc[d + t] += g[s + t];
                            }
                        }
                    }
                    start += len;
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let n = self.nodes[*x].value.numel();
                    slot(grads, *x, n).iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean { x } => {
                if wants(*x) {
                    let n = self.nodes[*x].value.numel();
                    let share = g[0] / n as f64;
                    slot(grads, *x, n).iter_mut().for_each(|a| *a += share);
                }
            }
            Op::BceLogits { z, targets } => {
                if wants(*z) {
                    let zd = val(*z);
                    let acc = slot(grads, *z, zd.len());
                    for k in 0..g.len() {
                        acc[k] += g[k] * (sigmoid(zd[k]) - targets[k]);
                    }
                }
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient flowing out of {} node #{i}", node.op.name())));
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, n: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; n])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(outer, len, inner)` extents around `axis` for a row-major shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut shape = Vec::with_capacity(rank);
    for d in 0..rank {
        let e = match (pa[d], pb[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
        shape.push(e);
    }
    let strides = |p: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if p[d] == 1 { 0 } else { acc };
            acc *= p[d];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total = numel(&shape);
    let mut ia = Vec::with_capacity(total);
    let mut ib = Vec::with_capacity(total);
    let mut idx = vec![0; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..total {
        ia.push(oa);
        ib.push(ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
    Ok((shape, Broadcast { a: ia, b: ib }))
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], spec: ConvSpec) -> Result<Self> {
        if xs.len() != 3 || ws.len() != 4 {
            return shape_err(format!("conv2d expects C×H×W input and 4-D kernel, got {xs:?} and {ws:?}"));
        }
        if spec.groups == 0 || spec.stride == 0 || spec.dilation == 0 {
            return config_err(format!("conv2d needs positive stride, dilation and groups, got {spec:?}"));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin % spec.groups != 0 || cout % spec.groups != 0 {
            return config_err(format!(
                "conv2d channels (in {cin}, out {cout}) not divisible by {} groups",
                spec.groups
            ));
        }
        if cin / spec.groups != cin_g {
            return shape_err(format!("kernel {ws:?} expects {cin_g} channels per group, input {xs:?} gives {}", cin / spec.groups));
        }
        let (Some(oh), Some(ow)) = (spec.output_extent(h, kh), spec.output_extent(w, kw)) else {
            return shape_err(format!("kernel {ws:?} with {spec:?} produces negative output extent for {xs:?}"));
        };
        Ok(Self { cin, h, w, cout, kh, kw, oh, ow, spec })
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
    fn valid(&self, k: usize, input: usize, output: usize) -> (usize, usize) {
        let s = self.spec.stride as isize;
        let off = (k * self.spec.dilation) as isize - self.spec.padding as isize;
        // need 0 <= o*s + off < input
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = input as isize - off;
        let hi = if hi_num <= 0 { 0 } else { ((hi_num + s - 1) / s).min(output as isize) };
        (lo as usize, (hi.max(lo)) as usize)
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize, usize, usize)> + '_ {
        let g = self.spec.groups;
        let (cin_g, cout_g) = (self.cin / g, self.cout / g);
        (0..self.cout).flat_map(move |oc| {
            let grp = oc / cout_g;
            (0..cin_g).flat_map(move |ic| {
                (0..self.kh).flat_map(move |ky| (0..self.kw).map(move |kx| (oc, grp * cin_g + ic, ic, ky, kx)))
            })
        })
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let cin_g = self.cin / self.spec.groups;
        let (s, d, p) = (self.spec.stride, self.spec.dilation, self.spec.padding);
        for (oc, ci, ic, ky, kx) in self.taps() {
            let wv = w[((oc * cin_g + ic) * self.kh + ky) * self.kw + kx];
            if wv == 0.0 {
                continue;
            }
            let (y0, y1) = self.valid(ky, self.h, self.oh);
            let (x0, x1) = self.valid(kx, self.w, self.ow);
            for oy in y0..y1 {
                let iy = oy * s + ky * d - p;
                let orow = (oc * self.oh + oy) * self.ow;
                let irow = (ci * self.h + iy) * self.w;
                for ox in x0..x1 {
                    out[orow + ox] += wv * x[irow + ox * s + kx * d - p];
                }
            }
        }
    }

    fn backward_input(&self, w: &[f64], g: &[f64], gx: &mut [f64]) {
        let cin_g = self.cin / self.spec.groups;
        let (s, d, p) = (self.spec.stride, self.spec.dilation, self.spec.padding);
        for (oc, ci, ic, ky, kx) in self.taps() {
            let wv = w[((oc * cin_g + ic) * self.kh + ky) * self.kw + kx];
            if wv == 0.0 {
                continue;
            }
            let (y0, y1) = self.valid(ky, self.h, self.oh);
            let (x0, x1) = self.valid(kx, self.w, self.ow);
            for oy in y0..y1 {
                let iy = oy * s + ky * d - p;
                let orow = (oc * self.oh + oy) * self.ow;
                let irow = (ci * self.h + iy) * self.w;
                for ox in x0..x1 {
                    gx[irow + ox * s + kx * d - p] += wv * g[orow + ox];
                }
            }
        }
    }

    fn backward_kernel(&self, x: &[f64], g: &[f64], gw: &mut [f64]) {
        let cin_g = self.cin / self.spec.groups;
        let (s, d, p) = (self.spec.stride, self.spec.dilation, self.spec.padding);
        for (oc, ci, ic, ky, kx) in self.taps() {
            let (y0, y1) = self.valid(ky, self.h, self.oh);
            let (x0, x1) = self.valid(kx, self.w, self.ow);
            let mut acc = 0.0;
            for oy in y0..y1 {
                let iy = oy * s + ky * d - p;
                let orow = (oc * self.oh + oy) * self.ow;
                let irow = (ci * self.h + iy) * self.w;
                for ox in x0..x1 {
                    acc += g[orow + ox] * x[irow + ox * s + kx * d - p];
                }
            }
            gw[((oc * cin_g + ic) * self.kh + ky) * self.kw + kx] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn unary_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.scale(x, 1.0).unwrap();
        assert_eq!(tape.value(s).data(), tape.value(x).data());
        let y = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let e = tape.exp(y).unwrap();
        let ed = tape.value(e).data();
        assert!((ed[0] - 1.0).abs() < 1e-15 && (ed[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn unary_tags_parse() {
        assert_eq!("relu".parse::<UnaryOp>().unwrap(), UnaryOp::Relu);
        assert_eq!("scale(2.5)".parse::<UnaryOp>().unwrap(), UnaryOp::Scale(2.5));
        assert!(matches!("tanh".parse::<UnaryOp>(), Err(Error::Config(_))));
        assert!(matches!("scale(x)".parse::<UnaryOp>(), Err(Error::Config(_))));
        assert!(matches!("pow".parse::<BinaryOp>(), Err(Error::Config(_))));
    }

    #[test]
    fn binary_examples_and_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let o = tape.constant(Tensor::ones(&[2, 2]));
        let xz = tape.add(x, z).unwrap();
        let xo = tape.mul(x, o).unwrap();
        assert_eq!(tape.value(xz), tape.value(x));
        assert_eq!(tape.value(xo).data(), tape.value(x).data());

        let col = tape.constant(t(&[2, 1], &[10.0, 20.0]));
        let bc = tape.add(x, col).unwrap();
        assert_eq!(tape.value(bc).data(), &[11.0, 12.0, 23.0, 24.0]);

        let bad = tape.constant(Tensor::zeros(&[3]));
        match tape.add(x, bad) {
            Err(Error::Shape(msg)) => assert!(msg.contains("[2, 2]") && msg.contains("[3]"), "{msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ia = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(ia).data(), tape.value(a).data());
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).shape(), &[2, 1]);
        assert_eq!(tape.value(ab).data(), &[17.0, 39.0]);
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let az = tape.matmul(a, z).unwrap();
        assert!(tape.value(az).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(tape.matmul(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::uniform(&[2, 5, 5], 1.0, &mut rng));
        let eye = tape.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, eye, None, ConvSpec::default()).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let k = tape.constant(Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng));
        let spec = ConvSpec { padding: 2, dilation: 2, ..Default::default() };
        let y = tape.conv2d(x, k, None, spec).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 5, 5]);

        let ones = tape.constant(Tensor::ones(&[1, 3, 3]));
        let k1 = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(ones, k1, None, ConvSpec::default()).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let spec = ConvSpec { groups: 2, ..Default::default() };
        assert!(matches!(tape.conv2d(x, k, None, spec), Err(Error::Config(_))));
        let big = tape.constant(Tensor::zeros(&[1, 3, 5, 5]));
        assert!(matches!(tape.conv2d(x, big, None, ConvSpec::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn strided_conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = Tensor::uniform(&[4, 7, 6], 1.0, &mut rng);
        let ws = Tensor::uniform(&[6, 2, 3, 3], 1.0, &mut rng);
        let spec = ConvSpec { stride: 2, padding: 1, dilation: 2, groups: 2 };
        let mut tape = Tape::new();
        let (x, w) = (tape.constant(xs.clone()), tape.constant(ws.clone()));
        let y = tape.conv2d(x, w, None, spec).unwrap();
        let yv = tape.value(y);
        let (oh, ow) = (yv.shape()[1], yv.shape()[2]);
        for oc in 0..6 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..2 {
                        let ci = (oc / 3) * 2 + ic;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky * 2) as isize - 1;
                                let ix = (ox * 2 + kx * 2) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                    continue;
                                }
                                acc += ws.at(&[oc, ic, ky, kx]) * xs.at(&[ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                    assert!((acc - yv.at(&[oc, oy, ox])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(t(&[3], &[2.0, 2.0, 2.0]));
        let s = tape.softmax(u, 0).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        let sd = tape.value(s).data();
        assert!((sd[0] - 0.25).abs() < 1e-15 && (sd[1] - 0.75).abs() < 1e-15);
        let big = tape.constant(t(&[2, 3], &[1e4, -1e4, 0.0, -1e4, -1e4, -1e4]));
        let s = tape.softmax(big, 1).unwrap();
        for row in tape.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(matches!(tape.softmax(x, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let yd = tape.value(y).data();
        assert!((yd[0] + 1.0).abs() < 1e-9 && (yd[1] - 1.0).abs() < 1e-9);

        let c = tape.constant(Tensor::full(&[2, 2, 2], 4.0));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g0 = tape.constant(Tensor::zeros(&[2]));
        let beta = tape.constant(t(&[2], &[0.5, -1.5]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = tape.constant(Tensor::uniform(&[2, 3, 3], 2.0, &mut rng));
        let y = tape.layer_norm(r, g0, beta, 1e-5).unwrap();
        let yv = tape.value(y);
        assert!(yv.data()[..9].iter().all(|&v| v == 0.5));
        assert!(yv.data()[9..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn layer_norm_moments() {
        // spread large enough that σ²/(σ²+eps) is within 1e-5 of 1
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[6, 4, 4], 10.0, &mut rng));
        let g = tape.constant(Tensor::ones(&[6]));
        let b = tape.constant(Tensor::zeros(&[6]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let yd = tape.value(y).data();
        for p in 0..16 {
            let col: Vec<f64> = (0..6).map(|c| yd[c * 16 + p]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mean {mean} var {var}");
        }
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 5.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[0.0]));
        let r = tape.relu(x).unwrap();
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(Error::Contract(_))));
        let mut other = Tape::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn index_select_and_concat() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = tape.index_select(x, 0, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let cols = tape.index_select(x, 1, &[1]).unwrap();
        assert_eq!(tape.value(cols).data(), &[2.0, 4.0, 6.0]);
        let cat = tape.concat(&[rows, x], 0).unwrap();
        assert_eq!(tape.value(cat).shape(), &[6, 2]);
        let s = tape.sum(cat).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 1.0, 1.0, 3.0, 3.0]);
    }
}
