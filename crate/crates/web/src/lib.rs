//! Browser bindings: synthetic frames, AFIA attention maps and a GIoU explorer.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use afe::afia::afia_forward;
use afe::boxes::BBox;
use afe::losses::{giou, giou_loss, l1_distance};
use afe::model::{stem_forward, AfeConfig, Model};
use afe::nn::bind_frozen;
use afe::synth::{generate_clip, SynthClipSpec};
use afe::tape::Tape;
use afe::tensor::Tensor;

fn js_err(e: afe::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Frame {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    boxes: Vec<f64>,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major RGBA bytes.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Flat `(x, y, w, h, class)` quintuples.
    pub fn boxes(&self) -> Vec<f64> {
        self.boxes.clone()
    }
}

fn to_rgba(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(h * w * 4);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn spec(seed: u64, artifacts: bool) -> SynthClipSpec {
    let s = SynthClipSpec { seed, ..SynthClipSpec::default() };
    if artifacts {
        s
    } else {
        s.clean()
    }
}

/// Frame `index` of the clip generated from `seed`.
#[wasm_bindgen]
pub fn render_frame(seed: u64, index: usize, artifacts: bool) -> Result<Frame, JsError> {
    let sp = spec(seed, artifacts);
    let clip = generate_clip(&sp).map_err(js_err)?;
    let t = index.min(clip.frames.len() - 1);
    let boxes = clip.annotations[t].iter().flat_map(|a| [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h, a.class_id as f64]).collect();
    Ok(Frame { width: sp.width, height: sp.height, rgba: to_rgba(&clip.frames[t]), boxes })
}

#[wasm_bindgen]
pub struct AttentionView {
    side: usize,
    dense: Vec<f64>,
    sparse: Vec<f64>,
    fused: Vec<f64>,
    weights: Vec<f64>,
    sparse_zero_fraction: f64,
}

#[wasm_bindgen]
impl AttentionView {
    /// Feature-grid side length; each map has `side × side` entries.
    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dense(&self) -> Vec<f64> {
        self.dense.clone()
    }

    pub fn sparse(&self) -> Vec<f64> {
        self.sparse.clone()
    }

    pub fn fused(&self) -> Vec<f64> {
        self.fused.clone()
    }

    /// The applied `(w₁, w₂)`.
    pub fn weights(&self) -> Vec<f64> {
        self.weights.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn sparse_zero_fraction(&self) -> f64 {
        self.sparse_zero_fraction
    }
}

/// Attention of one query cell over the finest feature grid of a freshly
/// initialised model, with the fusion logits set to `(a1, a2)`. Maps are for
/// the first head.
#[wasm_bindgen]
pub fn attention(seed: u64, index: usize, query_row: usize, query_col: usize, a1: f64, a2: f64) -> Result<AttentionView, JsError> {
    let sp = spec(seed, true);
    let clip = generate_clip(&sp).map_err(js_err)?;
    let cfg = AfeConfig::default();
    let mut model = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).map_err(js_err)?;
    let block = &mut model.blocks[0][0];
    let afia = block.afia.as_mut().ok_or_else(|| JsError::new("model has no AFIA"))?;
    afia.fusion = Tensor::from_vec(vec![a1, a2]);

    let mut tape = Tape::new();
    let bound = bind_frozen(&model, &mut tape);
    let x = tape.constant(clip.frames[index.min(clip.frames.len() - 1)].clone());
    let f0 = stem_forward(&mut tape, x, &bound).map_err(js_err)?;
    let b = &bound.blocks[0][0];
    let normed = b.norm1.as_ref().expect("AFIA comes with its norm").forward(&mut tape, f0).map_err(js_err)?;
    let out = afia_forward(&mut tape, normed, b.afia.as_ref().expect("checked above")).map_err(js_err)?;

    let (side, _) = cfg.extents(0);
    let hw = side * side;
    let q = query_row.min(side - 1) * side + query_col.min(side - 1);
    let row = |v| tape.value(v).data()[q * hw..(q + 1) * hw].to_vec();
    let maps = out.maps.as_ref().expect("attention enabled");
    Ok(AttentionView {
        side,
        dense: row(maps.dsa),
        sparse: row(maps.ssa),
        fused: row(out.fused.expect("attention enabled")),
        weights: vec![out.weights.0, out.weights.1],
        sparse_zero_fraction: out.ssa_sparsity,
    })
}

/// `[IoU, GIoU, GIoU loss, L1 distance]` for two `(x, y, w, h)` boxes.
#[wasm_bindgen]
pub fn box_metrics(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>, JsError> {
    let b = |v: &[f64]| -> Result<BBox, JsError> {
        match v {
            [x, y, w, h] => Ok(BBox { x: *x, y: *y, w: *w, h: *h }),
            _ => Err(JsError::new("a box needs exactly four numbers")),
        }
    };
    let (p, g) = (b(pred)?, b(gt)?);
    Ok(vec![p.iou(&g), giou(&p, &g), giou_loss(&p, &g), l1_distance(&p, &g)])
}
