//! Layer parameter containers shared by the modules.
//!
//! Parameter structs are generic over their leaf type `P`: `Tensor` for
//! stored weights, [`Var`] once bound to a tape, or anything else produced by
//! [`Params::map_named`] (gradients, optimizer moments).

use rand::Rng;

use crate::error::{contract_err, Result};
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::Tensor;

/// A tree of named parameter leaves.
pub trait Params<P> {
    type Mapped<Q>;

    /// Rebuilds the tree with every leaf replaced by `f(path, leaf)`. Leaves are
    /// visited in a fixed order that is identical for every instance of a
    /// given configuration.
    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Records every parameter as a trainable leaf.
pub fn bind<T: Params<Tensor>>(params: &T, tape: &mut Tape) -> T::Mapped<Var> {
    params.map_named("", &mut |_, t| tape.param(t.clone()))
}

/// Records every parameter as a constant.
pub fn bind_frozen<T: Params<Tensor>>(params: &T, tape: &mut Tape) -> T::Mapped<Var> {
    params.map_named("", &mut |_, t| tape.constant(t.clone()))
}

/// `(path, tensor)` pairs in canonical order.
pub fn named_tensors<T: Params<Tensor>>(params: &T) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    params.map_named("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn param_count<T: Params<Tensor>>(params: &T) -> usize {
    let mut n = 0;
    params.map_named("", &mut |_, t| n += t.numel());
    n
}

/// Gradients of a bound tree after `backward`, in canonical order.
pub fn collect_grads<T: Params<Var>>(bound: &T, tape: &Tape) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut err = None;
    bound.map_named("", &mut |name, v| match tape.grad_tensor(*v) {
        Ok(g) => out.push(g),
        Err(e) => {
            err.get_or_insert(crate::Error::Contract(format!("{name}: {e}")));
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Replaces every leaf, in canonical order, with the next tensor from `values`.
pub fn load_flat<T: Params<Tensor>>(params: &mut T, values: Vec<Tensor>) -> Result<()> {
    let mut expected = 0;
    params.visit_mut("", &mut |_, _| expected += 1);
    if expected != values.len() {
        return contract_err(format!("expected {expected} parameter tensors, got {}", values.len()));
    }
    let mut shape_mismatch = None;
    let mut it = values.into_iter();
    params.visit_mut("", &mut |name, t| {
        let v = it.next().expect("length checked");
        if v.shape() != t.shape() {
            shape_mismatch.get_or_insert(format!("{name}: stored {:?}, got {:?}", t.shape(), v.shape()));
        } else {
            *t = v;
        }
    });
    match shape_mismatch {
        Some(m) => contract_err(m),
        None => Ok(()),
    }
}

/// 2-D convolution layer with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
    pub spec: ConvSpec,
}

impl Conv<Tensor> {
    /// Kernel uniform in ±1/√fan_in, zero bias.
    pub fn new(cin: usize, cout: usize, k: usize, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let cin_g = cin / spec.groups;
        let bound = 1.0 / ((cin_g * k * k) as f64).sqrt();
        Self { weight: Tensor::uniform(&[cout, cin_g, k, k], bound, rng), bias: Tensor::zeros(&[cout]), spec }
    }

    pub fn pointwise(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self::new(cin, cout, 1, ConvSpec::default(), rng)
    }

    /// 3×3 with `padding = dilation`, preserving spatial extents at stride 1.
    pub fn same3x3(cin: usize, cout: usize, dilation: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self::new(cin, cout, 3, ConvSpec { stride: 1, padding: dilation, dilation, groups }, rng)
    }

    pub fn zero(&mut self) {
        self.weight.data_mut().fill(0.0);
        self.bias.data_mut().fill(0.0);
    }
}

impl Conv<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, Some(self.bias), self.spec)
    }
}

impl<P> Params<P> for Conv<P> {
    type Mapped<Q> = Conv<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Conv<Q> {
        Conv { weight: f(&join(prefix, "weight"), &self.weight), bias: f(&join(prefix, "bias"), &self.bias), spec: self.spec }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<P, T: Params<P>> Params<P> for Vec<T> {
    type Mapped<Q> = Vec<T::Mapped<Q>>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q> {
        self.iter().enumerate().map(|(i, c)| c.map_named(&join(prefix, &i.to_string()), f)).collect()
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, c) in self.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// An absent sub-module contributes no leaves.
impl<P, T: Params<P>> Params<P> for Option<T> {
    type Mapped<Q> = Option<T::Mapped<Q>>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q> {
        self.as_ref().map(|t| t.map_named(prefix, f))
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        if let Some(t) = self {
            t.visit_mut(prefix, f);
        }
    }
}

/// Applies a stack of convolutions with no activation in between.
pub fn conv_stack(tape: &mut Tape, convs: &[Conv<Var>], mut x: Var) -> Result<Var> {
    for c in convs {
        x = c.forward(tape, x)?;
    }
    Ok(x)
}

/// Channel-axis layer normalisation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
    pub eps: f64,
}

pub const DEFAULT_LN_EPS: f64 = 1e-5;

impl Norm<Tensor> {
    pub fn new(channels: usize, eps: f64) -> Self {
        Self { gamma: Tensor::ones(&[channels]), beta: Tensor::zeros(&[channels]), eps }
    }
}

impl Norm<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, self.eps)
    }
}

impl<P> Params<P> for Norm<P> {
    type Mapped<Q> = Norm<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Norm<Q> {
        Norm { gamma: f(&join(prefix, "gamma"), &self.gamma), beta: f(&join(prefix, "beta"), &self.beta), eps: self.eps }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Draws every parameter uniformly in ±`bound`; used to get away from the
/// zero-initialised biases before gradient checks.
pub fn randomize<T: Params<Tensor>>(params: &mut T, bound: f64, rng: &mut impl Rng) {
    params.visit_mut("", &mut |_, t| {
        let shape = t.shape().to_vec();
        *t = Tensor::uniform(&shape, bound, rng);
    });
}

pub fn zero_all<T: Params<Tensor>>(params: &mut T) {
    params.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
}
