//! Synthetic colonoscopy clips.
//!
//! A clip is a static scene (mucosa background plus elliptical polyps) seen
//! through a camera that drifts and zooms a little every frame, with
//! transient artifacts layered on top: specular glints, air bubbles and
//! motion blur.
//!
//! The scene lives in frame-0 pixel coordinates. Frame `t` maps a scene point
//! `p` to `c + zᵗ·(p − c) + t·d`, where `c` is the image centre, `z` the
//! per-frame zoom and `d` the per-frame drift. Polyps are axis-aligned
//! ellipses, so their annotated boxes are exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

const PLACEMENT_TRIES: usize = 200;
/// Width of the soft rim, in units of the normalised ellipse radius.
const RIM: f64 = 0.25;
/// Largest box IoU allowed between two polyps of one scene.
const MAX_POLYP_OVERLAP: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthClipSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of polyps per clip.
    pub polyp_count: [usize; 2],
    /// Polyp diameter as a fraction of the shorter image side.
    pub polyp_scale: [f64; 2],
    /// Mucosal fold stripes across the image width.
    pub fold_frequency: f64,
    pub vessel_amplitude: f64,
    pub motion_blur: bool,
    /// Blur kernel length in pixels.
    pub blur_length: usize,
    /// Blur direction in degrees.
    pub blur_angle: f64,
    pub specular: bool,
    pub specular_count: usize,
    pub specular_radius: f64,
    pub bubbles: bool,
    pub bubble_count: usize,
    pub bubble_radius: f64,
    /// Camera translation per frame, pixels.
    pub drift: [f64; 2],
    /// Camera zoom factor per frame.
    pub zoom: f64,
    /// Fraction of polyps drawn as class 1 (adenomatous).
    pub class1_fraction: f64,
    pub seed: u64,
}

impl Default for SynthClipSpec {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            polyp_count: [1, 3],
            polyp_scale: [0.2, 0.4],
            fold_frequency: 3.0,
            vessel_amplitude: 0.06,
            motion_blur: true,
            blur_length: 3,
            blur_angle: 30.0,
            specular: true,
            specular_count: 2,
            specular_radius: 1.0,
            bubbles: true,
            bubble_count: 1,
            bubble_radius: 2.5,
            drift: [0.4, 0.2],
            zoom: 1.01,
            class1_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return config_err("a clip needs at least one frame");
        }
        if self.height < 4 || self.width < 4 {
            return config_err(format!("frames of {}×{} are too small", self.height, self.width));
        }
        if self.polyp_count[0] > self.polyp_count[1] {
            return config_err(format!("polyp count range {:?} is empty", self.polyp_count));
        }
        let [lo, hi] = self.polyp_scale;
        if !(lo > 0.0 && lo <= hi && hi < 0.9) {
            return config_err(format!("polyp scale range {:?} must satisfy 0 < lo ≤ hi < 0.9", self.polyp_scale));
        }
        if !(self.zoom.is_finite() && self.zoom > 0.0) || !self.drift.iter().all(|d| d.is_finite()) {
            return config_err("zoom must be positive and drift finite");
        }
        if !(0.0..=1.0).contains(&self.class1_fraction) {
            return config_err(format!("class-1 fraction {} outside [0, 1]", self.class1_fraction));
        }
        if self.motion_blur && self.blur_length == 0 {
            return config_err("motion blur needs a kernel length of at least 1");
        }
        Ok(())
    }

    /// Same spec with every artifact off and a static camera.
    pub fn clean(&self) -> Self {
        Self { motion_blur: false, specular: false, bubbles: false, drift: [0.0, 0.0], zoom: 1.0, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `3×H×W`, values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    pub annotations: Vec<Vec<Annotation>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Polyp {
    pub center: (f64, f64),
    /// Semi-axes along x and y.
    pub axes: (f64, f64),
    pub class_id: usize,
    texture_freq: (f64, f64),
    texture_phase: f64,
}

impl Polyp {
    /// Normalised radius of scene point `(x, y)`; 1 on the boundary.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.center.0) / self.axes.0;
        let v = (y - self.center.1) / self.axes.1;
        (u * u + v * v).sqrt()
    }

    fn alpha(&self, x: f64, y: f64) -> f64 {
        ((1.0 - self.radius(x, y)) / RIM).clamp(0.0, 1.0)
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let r = self.radius(x, y);
        let u = (x - self.center.0) / self.axes.0;
        let v = (y - self.center.1) / self.axes.1;
        let dome = 0.75 + 0.25 * (1.0 - r * r).max(0.0).sqrt();
        let (base, amp) = if self.class_id == 1 { ([0.80, 0.33, 0.30], 0.15) } else { ([0.88, 0.64, 0.56], 0.04) };
        let tex = 1.0 + amp * (self.texture_freq.0 * u + self.texture_phase).sin() * (self.texture_freq.1 * v).sin();
        base.map(|c| (c * dome * tex).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Background {
    fold_dir: (f64, f64),
    fold_phase: f64,
    /// `(kx, ky, phase)` of each vessel wave.
    vessels: Vec<(f64, f64, f64)>,
}

/// A placed scene that can render any frame of its clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SynthClipSpec,
    pub polyps: Vec<Polyp>,
    background: Background,
}

impl Scene {
    pub fn new(spec: &SynthClipSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let background = Background {
            fold_dir: (theta.cos(), theta.sin()),
            fold_phase: rng.random_range(0.0..std::f64::consts::TAU),
            vessels: (0..4)
                .map(|_| (rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(0.0..std::f64::consts::TAU)))
                .collect(),
        };
        let count = rng.random_range(spec.polyp_count[0]..=spec.polyp_count[1]);
        let side = spec.height.min(spec.width) as f64;
        let mut scene = Scene { spec: spec.clone(), polyps: Vec::with_capacity(count), background };
        for i in 0..count {
            let mut last_bad_frame = 0;
            let mut placed = None;
            for _ in 0..PLACEMENT_TRIES {
                let diameter = rng.random_range(spec.polyp_scale[0]..=spec.polyp_scale[1]) * side;
                let aspect: f64 = rng.random_range(0.75..1.33);
                let axes = (diameter / 2.0 * aspect.sqrt(), diameter / 2.0 / aspect.sqrt());
                let center = (rng.random_range(0.0..spec.width as f64), rng.random_range(0.0..spec.height as f64));
                let class_id = rng.random_bool(spec.class1_fraction) as usize;
                let texture_freq = (rng.random_range(4.0..9.0), rng.random_range(4.0..9.0));
                let texture_phase = rng.random_range(0.0..std::f64::consts::TAU);
                let p = Polyp { center, axes, class_id, texture_freq, texture_phase };
                match scene.first_frame_outside(&p) {
                    Some(t) => last_bad_frame = t,
                    None => {
                        let b0 = scene.box_at(&p, 0);
                        if scene.polyps.iter().all(|q| scene.box_at(q, 0).iou(&b0) <= MAX_POLYP_OVERLAP) {
                            placed = Some(p);
                            break;
                        }
                    }
                }
            }
            match placed {
                Some(p) => scene.polyps.push(p),
                None => {
                    return Err(Error::Generation(format!(
                        "polyp {i} could not be placed inside frame {last_bad_frame} after {PLACEMENT_TRIES} tries"
                    )))
                }
            }
        }
        Ok(scene)
    }

    fn center(&self) -> (f64, f64) {
        (self.spec.width as f64 / 2.0, self.spec.height as f64 / 2.0)
    }

    /// Zoom applied at frame `t`.
    pub fn scale_at(&self, t: usize) -> f64 {
        self.spec.zoom.powi(t as i32)
    }

    fn to_image(&self, t: usize, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        let s = self.scale_at(t);
        (cx + s * (x - cx) + t as f64 * self.spec.drift[0], cy + s * (y - cy) + t as f64 * self.spec.drift[1])
    }

    fn to_scene(&self, t: usize, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        let s = self.scale_at(t);
        (cx + (x - cx - t as f64 * self.spec.drift[0]) / s, cy + (y - cy - t as f64 * self.spec.drift[1]) / s)
    }

    /// Tight box of polyp `p` in frame `t`.
    pub fn box_at(&self, p: &Polyp, t: usize) -> BBox {
        let (x, y) = self.to_image(t, p.center.0, p.center.1);
        let s = self.scale_at(t);
        let (a, b) = (p.axes.0 * s, p.axes.1 * s);
        BBox { x: x - a, y: y - b, w: 2.0 * a, h: 2.0 * b }
    }

    fn first_frame_outside(&self, p: &Polyp) -> Option<usize> {
        (0..self.spec.frames).find(|&t| {
            let b = self.box_at(p, t);
            b.x < 0.0 || b.y < 0.0 || b.right() > self.spec.width as f64 || b.bottom() > self.spec.height as f64
        })
    }

    pub fn annotations(&self, t: usize) -> Vec<Annotation> {
        self.polyps.iter().map(|p| Annotation { bbox: self.box_at(p, t), class_id: p.class_id }).collect()
    }

    /// Opacity of polyp `i` at the centre of pixel `(row, col)` in frame `t`.
    pub fn polyp_alpha(&self, i: usize, t: usize, row: usize, col: usize) -> f64 {
        let (x, y) = self.to_scene(t, col as f64 + 0.5, row as f64 + 0.5);
        self.polyps[i].alpha(x, y)
    }

    fn background(&self, x: f64, y: f64) -> [f64; 3] {
        let bg = &self.background;
        let w = self.spec.width as f64;
        let along = (bg.fold_dir.0 * x + bg.fold_dir.1 * y) / w;
        let fold = 1.0 - 0.25 * (0.5 + 0.5 * (std::f64::consts::TAU * self.spec.fold_frequency * along + bg.fold_phase).sin());
        let vessel: f64 = bg.vessels.iter().map(|&(kx, ky, ph)| (kx * x + ky * y + ph).sin()).sum::<f64>() / bg.vessels.len() as f64;
        let v = self.spec.vessel_amplitude * vessel;
        [0.70 * fold + 0.3 * v, (0.38 - v) * fold, (0.33 - v) * fold].map(|c| c.clamp(0.0, 1.0))
    }

    /// Frame `t` before transient artifacts.
    fn render_scene(&self, t: usize) -> Vec<[f64; 3]> {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut px = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                let (x, y) = self.to_scene(t, col as f64 + 0.5, row as f64 + 0.5);
                let mut c = self.background(x, y);
                for p in &self.polyps {
                    let a = p.alpha(x, y);
                    if a > 0.0 {
                        let pc = p.color(x, y);
                        for k in 0..3 {
                            c[k] = c[k] * (1.0 - a) + pc[k] * a;
                        }
                    }
                }
                px.push(c);
            }
        }
        px
    }

    pub fn render(&self, t: usize) -> Tensor {
        let spec = &self.spec;
        let (h, w) = (spec.height, spec.width);
        let mut px = self.render_scene(t);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1 + t as u64);
        let dist2 = |row: usize, col: usize, cx: f64, cy: f64| {
            let (dx, dy) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
            dx * dx + dy * dy
        };
        if spec.specular {
            for _ in 0..spec.specular_count {
                let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                let r2 = spec.specular_radius.max(1e-3).powi(2);
                for row in 0..h {
                    for col in 0..w {
                        let g = (-dist2(row, col, cx, cy) / r2).exp();
                        px[row * w + col] = px[row * w + col].map(|c| c + (1.0 - c) * g);
                    }
                }
            }
        }
        if spec.bubbles {
            for _ in 0..spec.bubble_count {
                let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                let r = spec.bubble_radius * rng.random_range(0.7..1.3);
                for row in 0..h {
                    for col in 0..w {
                        let d = dist2(row, col, cx, cy).sqrt();
                        let ring = 0.6 * (-(d - r).powi(2) / 0.5).exp() + if d < r { 0.08 } else { 0.0 };
                        px[row * w + col] = px[row * w + col].map(|c| c + (1.0 - c) * ring);
                    }
                }
            }
        }
        if spec.motion_blur && spec.blur_length > 1 {
            px = motion_blur(&px, h, w, spec.blur_length, spec.blur_angle);
        }
        let mut data = vec![0.0; 3 * h * w];
        for (i, c) in px.iter().enumerate() {
            for k in 0..3 {
                data[k * h * w + i] = c[k].clamp(0.0, 1.0);
            }
        }
        Tensor::new(&[3, h, w], data).expect("extents match")
    }
}

/// Averages `length` bilinear samples along a line through every pixel.
fn motion_blur(px: &[[f64; 3]], h: usize, w: usize, length: usize, angle_deg: f64) -> Vec<[f64; 3]> {
    let (dx, dy) = (angle_deg.to_radians().cos(), angle_deg.to_radians().sin());
    let sample = |x: f64, y: f64| -> [f64; 3] {
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = px[y0 * w + x0][k] * (1.0 - fx) + px[y0 * w + x1][k] * fx;
            let bot = px[y1 * w + x0][k] * (1.0 - fx) + px[y1 * w + x1][k] * fx;
            out[k] = top * (1.0 - fy) + bot * fy;
        }
        out
    };
    let half = (length - 1) as f64 / 2.0;
    let mut out = Vec::with_capacity(px.len());
    for row in 0..h {
        for col in 0..w {
            let mut acc = [0.0; 3];
            for s in 0..length {
                let o = s as f64 - half;
                let v = sample(col as f64 + o * dx, row as f64 + o * dy);
                for k in 0..3 {
                    acc[k] += v[k];
                }
            }
            out.push(acc.map(|a| a / length as f64));
        }
    }
    out
}

pub fn generate_clip(spec: &SynthClipSpec) -> Result<Clip> {
    let scene = Scene::new(spec)?;
    let frames = (0..spec.frames).map(|t| scene.render(t)).collect();
    let annotations = (0..spec.frames).map(|t| scene.annotations(t)).collect();
    Ok(Clip { frames, annotations })
}

/// `count` clips whose seeds are `spec.seed`, `spec.seed + 1`, ….
pub fn generate_clips(spec: &SynthClipSpec, count: usize) -> Result<Vec<Clip>> {
    let specs: Vec<SynthClipSpec> = (0..count).map(|i| SynthClipSpec { seed: spec.seed.wrapping_add(i as u64), ..spec.clone() }).collect();
    crate::par_map(&specs, generate_clip).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_clean_clip_repeats_frame_zero() {
        let spec = SynthClipSpec { seed: 3, ..SynthClipSpec::default() }.clean();
        let clip = generate_clip(&spec).unwrap();
        for t in 1..spec.frames {
            assert_eq!(clip.frames[t], clip.frames[0]);
            assert_eq!(clip.annotations[t], clip.annotations[0]);
        }
    }

    #[test]
    fn zoom_scales_boxes() {
        let spec = SynthClipSpec { zoom: 1.05, drift: [0.0, 0.0], polyp_scale: [0.15, 0.25], seed: 4, ..SynthClipSpec::default() };
        let clip = generate_clip(&spec).unwrap();
        for t in 1..spec.frames {
            for (a, b) in clip.annotations[t - 1].iter().zip(&clip.annotations[t]) {
                assert!((b.bbox.w - a.bbox.w * 1.05).abs() < 1.0);
                assert!((b.bbox.h - a.bbox.h * 1.05).abs() < 1.0);
            }
        }
    }

    #[test]
    fn same_seed_same_clip() {
        let spec = SynthClipSpec { seed: 9, ..SynthClipSpec::default() };
        assert_eq!(generate_clip(&spec).unwrap(), generate_clip(&spec).unwrap());
        let other = generate_clip(&SynthClipSpec { seed: 10, ..spec.clone() }).unwrap();
        assert_ne!(generate_clip(&spec).unwrap().frames[0], other.frames[0]);
    }

    #[test]
    fn boxes_inside_and_support_inside_boxes() {
        for seed in 0..20 {
            let spec = SynthClipSpec { seed, polyp_count: [3, 3], ..SynthClipSpec::default() };
            let scene = Scene::new(&spec).unwrap();
            for t in 0..spec.frames {
                for (i, a) in scene.annotations(t).iter().enumerate() {
                    let b = a.bbox;
                    assert!(b.x >= 0.0 && b.y >= 0.0 && b.right() <= 32.0 && b.bottom() <= 32.0);
                    for row in 0..32 {
                        for col in 0..32 {
                            if scene.polyp_alpha(i, t, row, col) > 0.0 {
                                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                                assert!(x >= b.x - 1.0 && x <= b.right() + 1.0 && y >= b.y - 1.0 && y <= b.bottom() + 1.0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn frames_in_unit_range() {
        let clip = generate_clip(&SynthClipSpec::default()).unwrap();
        assert!(clip.frames.iter().all(|f| f.shape() == [3, 32, 32] && f.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn unplaceable_polyp_names_frame() {
        let spec = SynthClipSpec { polyp_scale: [0.8, 0.85], zoom: 1.3, polyp_count: [1, 1], ..SynthClipSpec::default() };
        match Scene::new(&spec) {
            Err(Error::Generation(msg)) => assert!(msg.contains("frame"), "{msg}"),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let base = SynthClipSpec::default();
        for bad in [
            SynthClipSpec { frames: 0, ..base.clone() },
            SynthClipSpec { polyp_scale: [0.5, 0.95], ..base.clone() },
            SynthClipSpec { polyp_count: [3, 1], ..base.clone() },
            SynthClipSpec { zoom: 0.0, ..base.clone() },
        ] {
            assert!(matches!(generate_clip(&bad), Err(Error::Config(_))));
        }
    }
}
