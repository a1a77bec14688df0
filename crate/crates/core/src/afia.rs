//! Adaptive feature interaction and augmentation.
//!
//! Two parallel paths over a normalised `C×H×W` map `X`:
//!
//! * the shuffle branch `F_cs = SConv3×3(Conv1×1(CS(X)))`;
//! * the attention branch, where `Q`, `K`, `V` come from a 1×1 conv followed
//!   by a 3×3 depthwise conv, logits are `QKᵀ/√d + B` with a learnable
//!   relative positional bias `B`, the dense map is `softmax(logits)`, the
//!   sparse map is `relu(logits)`, and the two are mixed with weights
//!   `w = softmax(a)` before being applied to `V` and projected by a 1×1 conv.
//!
//! The module output is `F_cs + F_att`, with no trailing activation.
//!
//! The sparse map is *not* row-normalised: its rows can sum to anything
//! non-negative, so its magnitude relative to the dense map depends on the
//! logit scale. The fusion weights are the only thing balancing the two.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{conv_stack, join, Conv, Params};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

/// Which AFIA paths are active. Used by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AfiaBranches {
    /// Channel-shuffle convolution branch.
    pub cs: bool,
    /// Dense (softmax) self-attention.
    pub dsa: bool,
    /// Sparse (ReLU) self-attention.
    pub ssa: bool,
}

impl Default for AfiaBranches {
    fn default() -> Self {
        Self { cs: true, dsa: true, ssa: true }
    }
}

impl AfiaBranches {
    pub fn attention(&self) -> bool {
        self.dsa || self.ssa
    }

    pub fn any(&self) -> bool {
        self.cs || self.attention()
    }
}

/// How the two fusion logits start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionInit {
    /// `a = (0, 0)`, i.e. equal weights.
    #[default]
    Zero,
    /// `a_i` set to the mean absolute output of branch `i` on the first batch.
    BranchActivation,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AfiaConfig {
    pub channels: usize,
    pub heads: usize,
    pub shuffle_groups: usize,
    /// Spatial extents the positional-bias table is built for.
    pub height: usize,
    pub width: usize,
    /// One bias table per head, or one shared by all heads.
    pub per_head_bias: bool,
    pub branches: AfiaBranches,
}

impl AfiaConfig {
    pub fn new(channels: usize, heads: usize, shuffle_groups: usize, height: usize, width: usize) -> Self {
        Self { channels, heads, shuffle_groups, height, width, per_head_bias: true, branches: AfiaBranches::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return config_err(format!("{} channels not divisible by {} heads", self.channels, self.heads));
        }
        if self.shuffle_groups == 0 || !self.channels.is_multiple_of(self.shuffle_groups) {
            return config_err(format!("{} channels not divisible by {} shuffle groups", self.channels, self.shuffle_groups));
        }
        if self.height == 0 || self.width == 0 {
            return config_err("AFIA spatial extents must be positive");
        }
        if !self.branches.any() {
            return config_err("AFIA with channel shuffle, dense and sparse attention all disabled has no active path");
        }
        Ok(())
    }

    pub fn key_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Number of distinct 2-D relative offsets, `(2H−1)(2W−1)`.
    pub fn offsets(&self) -> usize {
        (2 * self.height - 1) * (2 * self.width - 1)
    }

    fn bias_tables(&self) -> usize {
        if self.per_head_bias {
            self.heads
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AfiaParams<P> {
    pub cfg: AfiaConfig,
    pub shuffle_proj: Conv<P>,
    pub shuffle_stack: Vec<Conv<P>>,
    pub q_proj: Conv<P>,
    pub q_dw: Conv<P>,
    pub k_proj: Conv<P>,
    pub k_dw: Conv<P>,
    pub v_proj: Conv<P>,
    pub v_dw: Conv<P>,
    /// `[tables, (2H−1)(2W−1)]`, indexed by `(Δrow + H − 1)(2W − 1) + Δcol + W − 1`.
    pub rel_bias: P,
    /// The two fusion logits `(a₁, a₂)`.
    pub fusion: P,
    pub out_proj: Conv<P>,
}

impl AfiaParams<Tensor> {
    pub fn new(cfg: AfiaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            cfg,
            shuffle_proj: Conv::pointwise(c, c, rng),
            shuffle_stack: (0..3).map(|_| Conv::same3x3(c, c, 1, 1, rng)).collect(),
            q_proj: Conv::pointwise(c, c, rng),
            q_dw: Conv::same3x3(c, c, 1, c, rng),
            k_proj: Conv::pointwise(c, c, rng),
            k_dw: Conv::same3x3(c, c, 1, c, rng),
            v_proj: Conv::pointwise(c, c, rng),
            v_dw: Conv::same3x3(c, c, 1, c, rng),
            rel_bias: Tensor::zeros(&[cfg.bias_tables(), cfg.offsets()]),
            fusion: Tensor::zeros(&[2]),
            out_proj: Conv::pointwise(c, c, rng),
        })
    }

    /// Sets the fusion logits from the mean absolute output of each attention
    /// branch (`DSA·V` and `SSA·V`) on `x`.
    pub fn init_fusion_from_branches(&mut self, x: &Tensor) -> Result<()> {
        let mut tape = Tape::new();
        let bound = crate::nn::bind_frozen(self, &mut tape);
        let xv = tape.constant(x.clone());
        let att = attention_maps(&mut tape, xv, &bound)?;
        let v = att.v;
        let dense = tape.matmul(att.dsa, v)?;
        let sparse = tape.matmul(att.ssa, v)?;
        let mean_abs = |t: &Tensor| t.data().iter().map(|x| x.abs()).sum::<f64>() / t.numel() as f64;
        let a = [mean_abs(tape.value(dense)), mean_abs(tape.value(sparse))];
        self.fusion = Tensor::from_vec(a.to_vec());
        Ok(())
    }
}

impl<P> Params<P> for AfiaParams<P> {
    type Mapped<Q> = AfiaParams<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> AfiaParams<Q> {
        let p = |n: &str| join(prefix, n);
        AfiaParams {
            cfg: self.cfg,
            shuffle_proj: self.shuffle_proj.map_named(&p("shuffle_proj"), f),
            shuffle_stack: self.shuffle_stack.map_named(&p("shuffle_stack"), f),
            q_proj: self.q_proj.map_named(&p("q_proj"), f),
            q_dw: self.q_dw.map_named(&p("q_dw"), f),
            k_proj: self.k_proj.map_named(&p("k_proj"), f),
            k_dw: self.k_dw.map_named(&p("k_dw"), f),
            v_proj: self.v_proj.map_named(&p("v_proj"), f),
            v_dw: self.v_dw.map_named(&p("v_dw"), f),
            rel_bias: f(&p("rel_bias"), &self.rel_bias),
            fusion: f(&p("fusion"), &self.fusion),
            out_proj: self.out_proj.map_named(&p("out_proj"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        let p = |n: &str| join(prefix, n);
        self.shuffle_proj.visit_mut(&p("shuffle_proj"), f);
        self.shuffle_stack.visit_mut(&p("shuffle_stack"), f);
        self.q_proj.visit_mut(&p("q_proj"), f);
        self.q_dw.visit_mut(&p("q_dw"), f);
        self.k_proj.visit_mut(&p("k_proj"), f);
        self.k_dw.visit_mut(&p("k_dw"), f);
        self.v_proj.visit_mut(&p("v_proj"), f);
        self.v_dw.visit_mut(&p("v_dw"), f);
        f(&p("rel_bias"), &mut self.rel_bias);
        f(&p("fusion"), &mut self.fusion);
        self.out_proj.visit_mut(&p("out_proj"), f);
    }
}

/// Source channel for every output channel of a shuffle with `groups` groups.
///
/// Input channel `c` lands at output index `(c mod g)·(C/g) + ⌊c/g⌋`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return config_err(format!("{channels} channels not divisible by {groups} shuffle groups"));
    }
    let per = channels / groups;
    let mut src = vec![0; channels];
    for c in 0..channels {
        src[(c % groups) * per + c / groups] = c;
    }
    Ok(src)
}

/// Channel shuffle of a `C×H×W` tensor on the tape.
pub fn channel_shuffle(tape: &mut Tape, x: Var, groups: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return shape_err(format!("channel_shuffle expects C×H×W, got {shape:?}"));
    }
    let perm = shuffle_permutation(shape[0], groups)?;
    tape.index_select(x, 0, &perm)
}

/// `F_cs`: shuffle, 1×1 conv, then three stacked 3×3 convs.
pub fn shuffle_branch(tape: &mut Tape, x: Var, p: &AfiaParams<Var>) -> Result<Var> {
    check_input(tape, x, &p.cfg)?;
    let s = channel_shuffle(tape, x, p.cfg.shuffle_groups)?;
    let s = p.shuffle_proj.forward(tape, s)?;
    conv_stack(tape, &p.shuffle_stack, s)
}

/// Flat gather index materialising the `HW×HW` bias matrix from the offset table.
pub fn relative_bias_index(height: usize, width: usize) -> Vec<usize> {
    let n = height * width;
    let span = 2 * width - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = (i / width, i % width);
        for j in 0..n {
            let (rj, cj) = (j / width, j % width);
            let dr = ri + height - 1 - rj;
            let dc = ci + width - 1 - cj;
            idx.push(dr * span + dc);
        }
    }
    idx
}

/// `QKᵀ/√d + B` for `q`, `k` of shape `[heads, HW, d]` and bias
/// `[heads or 1, HW, HW]`.
pub fn attention_scores(tape: &mut Tape, q: Var, k: Var, bias: Var, d: usize) -> Result<Var> {
    if d == 0 {
        return config_err("attention key dimension must be positive");
    }
    let kt = tape.transpose(k)?;
    let qk = tape.matmul(q, kt)?;
    let scaled = tape.scale(qk, 1.0 / (d as f64).sqrt())?;
    tape.add(scaled, bias)
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what} logits")))
    }
}

/// Dense self-attention map: softmax over keys.
pub fn dsa(tape: &mut Tape, logits: Var) -> Result<Var> {
    check_finite(tape, logits, "dense attention")?;
    let last = tape.shape(logits).len() - 1;
    tape.softmax(logits, last)
}

/// Sparse self-attention map: ReLU of the logits, unnormalised.
pub fn ssa(tape: &mut Tape, logits: Var) -> Result<Var> {
    check_finite(tape, logits, "sparse attention")?;
    tape.relu(logits)
}

/// `w = softmax(a)` over the two fusion logits.
pub fn fuse_weights(a: (f64, f64)) -> Result<(f64, f64)> {
    if !a.0.is_finite() || !a.1.is_finite() {
        return Err(Error::Numeric(format!("non-finite fusion logits {a:?}")));
    }
    // softmax over two logits is a sigmoid of their difference
    let w1 = sigmoid(a.0 - a.1);
    Ok((w1, 1.0 - w1))
}

/// Intermediate attention tensors, all on the tape.
pub struct AttentionMaps {
    pub logits: Var,
    pub dsa: Var,
    pub ssa: Var,
    /// `[heads, HW, d]`
    pub v: Var,
}

fn to_heads(tape: &mut Tape, x: Var, cfg: &AfiaConfig) -> Result<Var> {
    let r = tape.reshape(x, &[cfg.heads, cfg.key_dim(), cfg.tokens()])?;
    tape.transpose(r)
}

fn attention_maps(tape: &mut Tape, x: Var, p: &AfiaParams<Var>) -> Result<AttentionMaps> {
    let cfg = &p.cfg;
    check_input(tape, x, cfg)?;
    let q = p.q_proj.forward(tape, x)?;
    let q = p.q_dw.forward(tape, q)?;
    let k = p.k_proj.forward(tape, x)?;
    let k = p.k_dw.forward(tape, k)?;
    let v = p.v_proj.forward(tape, x)?;
    let v = p.v_dw.forward(tape, v)?;
    let (q, k, v) = (to_heads(tape, q, cfg)?, to_heads(tape, k, cfg)?, to_heads(tape, v, cfg)?);

    let n = cfg.tokens();
    let idx = relative_bias_index(cfg.height, cfg.width);
    let bias = tape.index_select(p.rel_bias, 1, &idx)?;
    let bias = tape.reshape(bias, &[cfg.bias_tables(), n, n])?;

    let logits = attention_scores(tape, q, k, bias, cfg.key_dim())?;
    let dense = dsa(tape, logits)?;
    let sparse = ssa(tape, logits)?;
    Ok(AttentionMaps { logits, dsa: dense, ssa: sparse, v })
}

fn check_input(tape: &Tape, x: Var, cfg: &AfiaConfig) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 3 || s[0] != cfg.channels {
        return shape_err(format!("AFIA configured for {} channels, got input {s:?}", cfg.channels));
    }
    if s[1] != cfg.height || s[2] != cfg.width {
        return config_err(format!(
            "positional bias built for {}×{}, input is {}×{}",
            cfg.height, cfg.width, s[1], s[2]
        ));
    }
    Ok(())
}

pub struct AfiaOutput {
    /// `F_out = F_cs + F_att`, same shape as the input.
    pub out: Var,
    pub f_cs: Option<Var>,
    pub f_att: Option<Var>,
    pub maps: Option<AttentionMaps>,
    /// `w₁·DSA + w₂·SSA`, `[heads, HW, HW]`.
    pub fused: Option<Var>,
    /// `(w₁, w₂)` actually applied; a disabled branch has weight exactly 0.
    pub weights: (f64, f64),
    /// Fraction of exactly-zero entries in the sparse map.
    pub ssa_sparsity: f64,
    pub dsa_sparsity: f64,
}

fn zero_fraction(t: &Tensor) -> f64 {
    t.data().iter().filter(|&&v| v == 0.0).count() as f64 / t.numel() as f64
}

pub fn afia_forward(tape: &mut Tape, x: Var, p: &AfiaParams<Var>) -> Result<AfiaOutput> {
    let cfg = p.cfg;
    cfg.validate()?;
    check_input(tape, x, &cfg)?;
    let f_cs = if cfg.branches.cs { Some(shuffle_branch(tape, x, p)?) } else { None };

    let mut out = AfiaOutput {
        out: x,
        f_cs,
        f_att: None,
        maps: None,
        fused: None,
        weights: (0.0, 0.0),
        ssa_sparsity: 0.0,
        dsa_sparsity: 0.0,
    };

    if cfg.branches.attention() {
        let maps = attention_maps(tape, x, p)?;
        let (w, weights) = match (cfg.branches.dsa, cfg.branches.ssa) {
            (true, true) => {
                let w = tape.softmax(p.fusion, 0)?;
                let wv = tape.value(w).data();
                let weights = (wv[0], wv[1]);
                (w, weights)
            }
            (true, false) => (tape.constant(Tensor::from_vec(vec![1.0, 0.0])), (1.0, 0.0)),
            _ => (tape.constant(Tensor::from_vec(vec![0.0, 1.0])), (0.0, 1.0)),
        };
        let w1 = tape.index_select(w, 0, &[0])?;
        let w2 = tape.index_select(w, 0, &[1])?;
        let a = tape.mul(maps.dsa, w1)?;
        let b = tape.mul(maps.ssa, w2)?;
        let fused = tape.add(a, b)?;
        let attended = tape.matmul(fused, maps.v)?;
        let merged = tape.transpose(attended)?;
        let merged = tape.reshape(merged, &[cfg.channels, cfg.height, cfg.width])?;
        let f_att = p.out_proj.forward(tape, merged)?;

        out.weights = weights;
        out.ssa_sparsity = zero_fraction(tape.value(maps.ssa));
        out.dsa_sparsity = zero_fraction(tape.value(maps.dsa));
        out.f_att = Some(f_att);
        out.fused = Some(fused);
        out.maps = Some(maps);
    }

    out.out = match (out.f_cs, out.f_att) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("validated: at least one branch is active"),
    };
    Ok(out)
}
