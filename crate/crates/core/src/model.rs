//! The desk-scale detector: convolutional stem, AFE blocks over a feature
//! pyramid, and a dense per-cell box head.
//!
//! Each AFE block is pre-norm residual:
//! `y₁ = x + AFIA(LN(x))`, `y₂ = y₁ + SACI(LN(y₁))`.
//!
//! The head predicts, for every cell of every scale and every anchor slot,
//! `(tx, ty, tw, th, objectness, class logits…)`. Boxes decode as
//! `cx = (j + σ(tx))·S`, `cy = (i + σ(ty))·S`, `w = S·exp(tw)`, `h = S·exp(th)`
//! where `S` is the scale's stride in image pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::afia::{afia_forward, AfiaBranches, AfiaConfig, AfiaOutput, AfiaParams, FusionInit};
use crate::boxes::{canonical_order, BBox, Detection};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{bind_frozen, join, Conv, Norm, Params, DEFAULT_LN_EPS};
use crate::saci::{saci_forward, SaciConfig, SaciParams};
use crate::tape::{sigmoid, ConvSpec, Tape, Var};
use crate::tensor::Tensor;

/// `tw`/`th` are clamped here before `exp` so an untrained head cannot overflow.
pub const LOG_SIZE_CLAMP: f64 = 4.0;
/// Initial objectness bias; `σ(−2) ≈ 0.12`.
pub const OBJECTNESS_PRIOR: f64 = -2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AfeConfig {
    pub height: usize,
    pub width: usize,
    pub image_channels: usize,
    /// Feature width `C'` used by the stem, every AFE block and the head.
    pub channels: usize,
    /// Stem downsampling factor `s`, a power of two.
    pub downsample: usize,
    pub scales: usize,
    pub blocks_per_scale: usize,
    pub heads: usize,
    pub shuffle_groups: usize,
    pub per_head_bias: bool,
    pub n1: usize,
    pub n2: usize,
    pub boxes_per_cell: usize,
    pub classes: usize,
    /// Include AFIA in every block.
    pub afia: bool,
    pub branches: AfiaBranches,
    /// Include SACI in every block.
    pub saci: bool,
    pub fusion_init: FusionInit,
}

impl Default for AfeConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            image_channels: 3,
            channels: 32,
            downsample: 4,
            scales: 2,
            blocks_per_scale: 1,
            heads: 2,
            shuffle_groups: 4,
            per_head_bias: true,
            n1: crate::saci::DEFAULT_N1,
            n2: crate::saci::DEFAULT_N2,
            boxes_per_cell: 1,
            classes: 2,
            afia: true,
            branches: AfiaBranches::default(),
            saci: true,
            fusion_init: FusionInit::Zero,
        }
    }
}

impl AfeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.image_channels == 0 || self.channels == 0 {
            return config_err("image extents, image channels and feature channels must be positive");
        }
        if !self.downsample.is_power_of_two() {
            return config_err(format!("downsample factor {} is not a power of two", self.downsample));
        }
        if self.scales == 0 || self.blocks_per_scale == 0 {
            return config_err("need at least one scale and one block per scale");
        }
        if self.boxes_per_cell == 0 || self.classes == 0 {
            return config_err("need at least one box per cell and one class");
        }
        let coarsest = self.stride(self.scales - 1);
        if !self.height.is_multiple_of(coarsest) || !self.width.is_multiple_of(coarsest) {
            return config_err(format!(
                "{}×{} input is not divisible by the coarsest stride {coarsest}",
                self.height, self.width
            ));
        }
        let (h, w) = self.extents(self.scales - 1);
        if h < 2 || w < 2 {
            return config_err(format!("scale {} would be {h}×{w}; every scale needs at least 2×2", self.scales - 1));
        }
        if self.afia {
            self.afia_config(0).validate()?;
        }
        if self.saci {
            SaciConfig { channels: self.channels, n1: self.n1, n2: self.n2 }.validate()?;
        }
        Ok(())
    }

    /// Image pixels per cell at scale `k`.
    pub fn stride(&self, k: usize) -> usize {
        self.downsample << k
    }

    pub fn extents(&self, k: usize) -> (usize, usize) {
        (self.height / self.stride(k), self.width / self.stride(k))
    }

    /// Number of candidate detections the head emits.
    pub fn candidates(&self) -> usize {
        (0..self.scales).map(|k| self.extents(k)).map(|(h, w)| h * w * self.boxes_per_cell).sum()
    }

    pub fn afia_config(&self, k: usize) -> AfiaConfig {
        let (h, w) = self.extents(k);
        AfiaConfig {
            channels: self.channels,
            heads: self.heads,
            shuffle_groups: self.shuffle_groups,
            height: h,
            width: w,
            per_head_bias: self.per_head_bias,
            branches: self.branches,
        }
    }

    fn head_fields(&self) -> usize {
        5 + self.classes
    }
}

/// One AFE block. Missing sub-modules make their half of the block an identity.
#[derive(Clone, Debug, PartialEq)]
pub struct AfeBlock<P> {
    pub norm1: Option<Norm<P>>,
    pub afia: Option<AfiaParams<P>>,
    pub norm2: Option<Norm<P>>,
    pub saci: Option<SaciParams<P>>,
}

impl<P> Params<P> for AfeBlock<P> {
    type Mapped<Q> = AfeBlock<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> AfeBlock<Q> {
        let p = |n: &str| join(prefix, n);
        AfeBlock {
            norm1: self.norm1.map_named(&p("norm1"), f),
            afia: self.afia.map_named(&p("afia"), f),
            norm2: self.norm2.map_named(&p("norm2"), f),
            saci: self.saci.map_named(&p("saci"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        let p = |n: &str| join(prefix, n);
        self.norm1.visit_mut(&p("norm1"), f);
        self.afia.visit_mut(&p("afia"), f);
        self.norm2.visit_mut(&p("norm2"), f);
        self.saci.visit_mut(&p("saci"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<P> {
    pub cfg: AfeConfig,
    pub stem: Vec<Conv<P>>,
    /// Stride-2 convolutions feeding scales `1..scales`.
    pub downs: Vec<Conv<P>>,
    /// `blocks[k]` refines scale `k`.
    pub blocks: Vec<Vec<AfeBlock<P>>>,
    /// Per-scale head: 3×3 conv + ReLU, then a 1×1 conv to the raw fields.
    pub head_hidden: Vec<Conv<P>>,
    pub head_out: Vec<Conv<P>>,
}

impl<P> Params<P> for Model<P> {
    type Mapped<Q> = Model<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Model<Q> {
        let p = |n: &str| join(prefix, n);
        Model {
            cfg: self.cfg.clone(),
            stem: self.stem.map_named(&p("stem"), f),
            downs: self.downs.map_named(&p("downs"), f),
            blocks: self.blocks.map_named(&p("blocks"), f),
            head_hidden: self.head_hidden.map_named(&p("head_hidden"), f),
            head_out: self.head_out.map_named(&p("head_out"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        let p = |n: &str| join(prefix, n);
        self.stem.visit_mut(&p("stem"), f);
        self.downs.visit_mut(&p("downs"), f);
        self.blocks.visit_mut(&p("blocks"), f);
        self.head_hidden.visit_mut(&p("head_hidden"), f);
        self.head_out.visit_mut(&p("head_out"), f);
    }
}

fn stride2(cin: usize, cout: usize, rng: &mut impl Rng) -> Conv<Tensor> {
    Conv::new(cin, cout, 3, ConvSpec { stride: 2, padding: 1, dilation: 1, groups: 1 }, rng)
}

impl AfeBlock<Tensor> {
    pub fn new(cfg: &AfeConfig, scale: usize, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        let (norm1, afia) = if cfg.afia {
            (Some(Norm::new(c, DEFAULT_LN_EPS)), Some(AfiaParams::new(cfg.afia_config(scale), rng)?))
        } else {
            (None, None)
        };
        let (norm2, saci) = if cfg.saci {
            let sc = SaciConfig { channels: c, n1: cfg.n1, n2: cfg.n2 };
            (Some(Norm::new(c, DEFAULT_LN_EPS)), Some(SaciParams::new(sc, rng)?))
        } else {
            (None, None)
        };
        Ok(Self { norm1, afia, norm2, saci })
    }
}

impl Model<Tensor> {
    pub fn new(cfg: AfeConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let stem = if cfg.downsample == 1 {
            vec![Conv::same3x3(cfg.image_channels, c, 1, 1, rng)]
        } else {
            let layers = cfg.downsample.trailing_zeros() as usize;
            (0..layers).map(|i| stride2(if i == 0 { cfg.image_channels } else { c }, c, rng)).collect()
        };
        let downs = (1..cfg.scales).map(|_| stride2(c, c, rng)).collect();
        let mut blocks = Vec::with_capacity(cfg.scales);
        for k in 0..cfg.scales {
            blocks.push((0..cfg.blocks_per_scale).map(|_| AfeBlock::new(&cfg, k, rng)).collect::<Result<Vec<_>>>()?);
        }
        let mut head_hidden = Vec::with_capacity(cfg.scales);
        let mut head_out = Vec::with_capacity(cfg.scales);
        for _ in 0..cfg.scales {
            head_hidden.push(Conv::same3x3(c, c, 1, 1, rng));
            let mut out = Conv::pointwise(c, cfg.boxes_per_cell * cfg.head_fields(), rng);
            for a in 0..cfg.boxes_per_cell {
                out.bias.data_mut()[a * cfg.head_fields() + 4] = OBJECTNESS_PRIOR;
            }
            head_out.push(out);
        }
        Ok(Self { cfg, stem, downs, blocks, head_hidden, head_out })
    }

    /// Sets every AFIA fusion logit pair from branch activations on `image`,
    /// block by block, so later blocks see the re-initialised earlier ones.
    pub fn init_fusion_from_image(&mut self, image: &Tensor) -> Result<()> {
        let mut tape = Tape::new();
        let bound = bind_frozen(self, &mut tape);
        let x = tape.constant(image.clone());
        let mut h = stem_forward(&mut tape, x, &bound)?;
        for k in 0..self.cfg.scales {
            if k > 0 {
                let down = &bind_frozen(&self.downs[k - 1], &mut tape);
                h = down.forward(&mut tape, h)?;
            }
            for b in 0..self.blocks[k].len() {
                let block = &mut self.blocks[k][b];
                if let (Some(norm), Some(afia)) = (&block.norm1, &mut block.afia) {
                    let nb = bind_frozen(norm, &mut tape);
                    let normed = nb.forward(&mut tape, h)?;
                    afia.init_fusion_from_branches(tape.value(normed))?;
                }
                let bb = bind_frozen(&self.blocks[k][b], &mut tape);
                h = afe_block_forward(&mut tape, h, &bb)?.out;
            }
        }
        Ok(())
    }
}

/// Strided `conv → ReLU` stack producing `F_0` at `1/s` resolution.
pub fn stem_forward(tape: &mut Tape, image: Var, m: &Model<Var>) -> Result<Var> {
    let cfg = &m.cfg;
    let s = tape.shape(image);
    if s.len() != 3 || s[0] != cfg.image_channels {
        return shape_err(format!("stem expects {} image channels, got {s:?}", cfg.image_channels));
    }
    if !s[1].is_multiple_of(cfg.downsample) || !s[2].is_multiple_of(cfg.downsample) {
        return shape_err(format!("image {}×{} not divisible by downsample factor {}", s[1], s[2], cfg.downsample));
    }
    let mut h = image;
    for conv in &m.stem {
        h = conv.forward(tape, h)?;
        h = tape.relu(h)?;
    }
    Ok(h)
}

pub struct BlockOutput {
    pub out: Var,
    pub afia: Option<AfiaOutput>,
}

pub fn afe_block_forward(tape: &mut Tape, x: Var, block: &AfeBlock<Var>) -> Result<BlockOutput> {
    let mut y = x;
    let mut diag = None;
    if let (Some(norm), Some(afia)) = (&block.norm1, &block.afia) {
        let n = norm.forward(tape, y)?;
        let a = afia_forward(tape, n, afia)?;
        y = tape.add(y, a.out)?;
        diag = Some(a);
    }
    if let (Some(norm), Some(saci)) = (&block.norm2, &block.saci) {
        let n = norm.forward(tape, y)?;
        let s = saci_forward(tape, n, saci)?;
        y = tape.add(y, s)?;
    }
    Ok(BlockOutput { out: y, afia: diag })
}

pub struct Pyramid {
    /// Refined feature map per scale, finest first.
    pub maps: Vec<Var>,
    /// AFIA diagnostics of every block, in execution order.
    pub afia: Vec<AfiaOutput>,
}

pub fn pyramid_forward(tape: &mut Tape, f0: Var, m: &Model<Var>) -> Result<Pyramid> {
    m.cfg.validate()?;
    let mut maps = Vec::with_capacity(m.cfg.scales);
    let mut diags = Vec::new();
    let mut h = f0;
    for k in 0..m.cfg.scales {
        if k > 0 {
            h = m.downs[k - 1].forward(tape, h)?;
        }
        let s = tape.shape(h);
        if s[1] < 2 || s[2] < 2 {
            return config_err(format!("scale {k} features are {}×{}, below 2×2", s[1], s[2]));
        }
        for block in &m.blocks[k] {
            let out = afe_block_forward(tape, h, block)?;
            h = out.out;
            diags.extend(out.afia);
        }
        maps.push(h);
    }
    Ok(Pyramid { maps, afia: diags })
}

/// Raw head outputs for every candidate, all on the tape.
pub struct HeadOutput {
    /// `[N, 4]` boxes `(x, y, w, h)` in image pixels, unclamped.
    pub boxes: Var,
    /// `[N, 1]`
    pub objectness: Var,
    /// `[N, classes]`
    pub class_logits: Var,
}

/// Candidates are ordered scale-major, then cell row-major, then anchor.
pub fn head_forward(tape: &mut Tape, features: &[Var], m: &Model<Var>) -> Result<HeadOutput> {
    let cfg = &m.cfg;
    if features.len() != cfg.scales {
        return shape_err(format!("head expects {} feature maps, got {}", cfg.scales, features.len()));
    }
    let (a, f) = (cfg.boxes_per_cell, cfg.head_fields());
    let mut raws = Vec::with_capacity(features.len());
    let (mut gx, mut gy, mut stride) = (Vec::new(), Vec::new(), Vec::new());
    for (k, &feat) in features.iter().enumerate() {
        let (h, w) = cfg.extents(k);
        let s = tape.shape(feat);
        if s != [cfg.channels, h, w] {
            return shape_err(format!("scale {k} features {s:?}, expected [{}, {h}, {w}]", cfg.channels));
        }
        let hid = m.head_hidden[k].forward(tape, feat)?;
        let hid = tape.relu(hid)?;
        let out = m.head_out[k].forward(tape, hid)?;
        let out = tape.reshape(out, &[a * f, h * w])?;
        let out = tape.transpose(out)?;
        raws.push(tape.reshape(out, &[h * w * a, f])?);
        for i in 0..h {
            for j in 0..w {
                for _ in 0..a {
                    gx.push(j as f64);
                    gy.push(i as f64);
                    stride.push(cfg.stride(k) as f64);
                }
            }
        }
    }
    let raw = if raws.len() == 1 { raws[0] } else { tape.concat(&raws, 0)? };
    let n = gx.len();
    let gx = tape.constant(Tensor::new(&[n, 1], gx)?);
    let gy = tape.constant(Tensor::new(&[n, 1], gy)?);
    let st = tape.constant(Tensor::new(&[n, 1], stride)?);
    let clamp = tape.constant(Tensor::scalar(LOG_SIZE_CLAMP));

    let col = |tape: &mut Tape, c: usize| tape.index_select(raw, 1, &[c]);
    let (tx, ty, tw, th) = (col(tape, 0)?, col(tape, 1)?, col(tape, 2)?, col(tape, 3)?);
    let objectness = col(tape, 4)?;
    let class_logits = tape.index_select(raw, 1, &(5..f).collect::<Vec<_>>())?;

    let center = |tape: &mut Tape, t: Var, g: Var| -> Result<Var> {
        let s = tape.sigmoid(t)?;
        let c = tape.add(s, g)?;
        tape.mul(c, st)
    };
    let size = |tape: &mut Tape, t: Var| -> Result<Var> {
        let t = tape.minimum(t, clamp)?;
        let e = tape.exp(t)?;
        tape.mul(e, st)
    };
    let cx = center(tape, tx, gx)?;
    let cy = center(tape, ty, gy)?;
    let w = size(tape, tw)?;
    let h = size(tape, th)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    let x = tape.sub(cx, hw)?;
    let y = tape.sub(cy, hh)?;
    let boxes = tape.concat(&[x, y, w, h], 1)?;
    Ok(HeadOutput { boxes, objectness, class_logits })
}

/// Predicted boxes as plain values, unclamped.
pub fn raw_boxes(tape: &Tape, head: &HeadOutput) -> Vec<BBox> {
    tape.value(head.boxes).data().chunks(4).map(|c| BBox { x: c[0], y: c[1], w: c[2], h: c[3] }).collect()
}

/// Pre-threshold detections, one per candidate, boxes clamped to the image.
pub fn candidates(tape: &Tape, head: &HeadOutput, cfg: &AfeConfig) -> Vec<Detection> {
    let obj = tape.value(head.objectness).data();
    let cls = tape.value(head.class_logits).data();
    let k = cfg.classes;
    raw_boxes(tape, head)
        .into_iter()
        .enumerate()
        .map(|(n, b)| {
            let row = &cls[n * k..(n + 1) * k];
            let class_id = (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            Detection::new(b.clamp_to(cfg.width as f64, cfg.height as f64), sigmoid(obj[n]), class_id)
        })
        .collect()
}

/// Drops candidates scoring below `score_threshold`, then greedy NMS
/// suppressing IoU above `nms_iou`. Output is in canonical order.
pub fn postprocess(cands: &[Detection], score_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = cands.iter().filter(|d| d.score >= score_threshold).copied().collect();
    kept.sort_by(canonical_order);
    let mut out: Vec<Detection> = Vec::new();
    for d in kept {
        if out.iter().all(|o| o.bbox.iou(&d.bbox) <= nms_iou) {
            out.push(d);
        }
    }
    out
}

pub struct ModelOutput {
    pub head: HeadOutput,
    pub pyramid: Pyramid,
}

pub fn forward(tape: &mut Tape, image: Var, m: &Model<Var>) -> Result<ModelOutput> {
    let f0 = stem_forward(tape, image, m)?;
    let pyramid = pyramid_forward(tape, f0, m)?;
    let head = head_forward(tape, &pyramid.maps, m)?;
    Ok(ModelOutput { head, pyramid })
}

/// Inference with frozen parameters.
pub fn detect(model: &Model<Tensor>, image: &Tensor, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let bound = bind_frozen(model, &mut tape);
    let x = tape.constant(image.clone());
    let out = forward(&mut tape, x, &bound)?;
    Ok(postprocess(&candidates(&tape, &out.head, &model.cfg), score_threshold, nms_iou))
}
