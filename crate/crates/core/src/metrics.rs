//! Detection metrics: matching, precision, recall, F1, AP and throughput.
//!
//! Matching is greedy in canonical score order (score descending, ties broken
//! by box coordinates). A detection is a true positive when its best
//! still-unmatched ground truth has IoU at or above the threshold.
//!
//! AP is the literal discrete sum `Σ P(n)·ΔR(n)` over distinct score
//! thresholds, with no interpolation.

use serde::Serialize;

use crate::boxes::{canonical_order, BBox, Detection};
use crate::error::{contract_err, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `true` for a true positive, one entry per detection in canonical order.
    pub flags: Vec<bool>,
    /// Input index of each entry of `flags`.
    pub order: Vec<usize>,
    /// Ground truth matched by each entry of `flags`.
    pub matched_gt: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn gt_count(&self) -> usize {
        self.tp + self.fn_
    }

    /// Adds another frame's counts; flags are not merged.
    pub fn accumulate(&mut self, other: &MatchResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Indices of `dets` sorted into canonical order.
pub fn canonical_indices(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| canonical_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    idx
}

pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let order = canonical_indices(dets);
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    let mut matched_gt = Vec::with_capacity(dets.len());
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = dets[i].bbox.iou(gt);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        flags.push(best.is_some());
        matched_gt.push(best.map(|(g, _)| g));
    }
    let tp = flags.iter().filter(|&&f| f).count();
    MatchResult { tp, fp: dets.len() - tp, fn_: gts.len() - tp, flags, order, matched_gt }
}

/// A ratio metric with a marker for the conventions applied to empty denominators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

/// `TP / (TP + FP)`; 0 with the degenerate flag when there are no detections.
pub fn precision(m: &MatchResult) -> Ratio {
    let n = m.tp + m.fp;
    if n == 0 {
        Ratio { value: 0.0, degenerate: true }
    } else {
        Ratio { value: m.tp as f64 / n as f64, degenerate: false }
    }
}

/// `TP / (TP + FN)`. With no ground truths the value is 1 when there are
/// also no detections and 0 otherwise, and the degenerate flag is set.
pub fn recall(m: &MatchResult) -> Ratio {
    let n = m.tp + m.fn_;
    if n == 0 {
        Ratio { value: if m.fp == 0 { 1.0 } else { 0.0 }, degenerate: true }
    } else {
        Ratio { value: m.tp as f64 / n as f64, degenerate: false }
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Precision/recall after each distinct score threshold, highest first.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PrCurve {
    /// `(precision, recall)`
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

impl PrCurve {
    /// `Σ P(n)·(R(n) − R(n−1))` with `R(0) = 0`.
    pub fn area(&self) -> f64 {
        let mut prev = 0.0;
        let mut ap = 0.0;
        for &(p, r) in &self.points {
            ap += p * (r - prev);
            prev = r;
        }
        ap
    }
}

/// Builds the curve from `(score, is_tp)` pairs already in canonical order.
fn curve_from_ranked(ranked: &[(f64, bool)], gt_total: usize) -> PrCurve {
    let mut curve = PrCurve::default();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let s = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == s {
            tp += ranked[i].1 as usize;
            seen += 1;
            i += 1;
        }
        curve.points.push((tp as f64 / seen as f64, tp as f64 / gt_total as f64));
        curve.thresholds.push(s);
    }
    curve
}

pub fn pr_curve(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> Result<PrCurve> {
    pr_curve_frames(&[(dets.to_vec(), gts.to_vec())], iou_threshold)
}

/// Curve over several frames: matching stays within each frame, ranking is
/// global.
pub fn pr_curve_frames(frames: &[(Vec<Detection>, Vec<BBox>)], iou_threshold: f64) -> Result<PrCurve> {
    let gt_total: usize = frames.iter().map(|(_, g)| g.len()).sum();
    if gt_total == 0 {
        return contract_err("average precision needs at least one ground truth");
    }
    let mut ranked: Vec<(Detection, bool)> = Vec::new();
    for (dets, gts) in frames {
        let m = match_detections(dets, gts, iou_threshold);
        ranked.extend(m.order.iter().zip(&m.flags).map(|(&i, &f)| (dets[i], f)));
    }
    ranked.sort_by(|a, b| canonical_order(&a.0, &b.0));
    let ranked: Vec<(f64, bool)> = ranked.into_iter().map(|(d, f)| (d.score, f)).collect();
    Ok(curve_from_ranked(&ranked, gt_total))
}

pub fn average_precision(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> Result<f64> {
    Ok(pr_curve(dets, gts, iou_threshold)?.area())
}

pub fn average_precision_frames(frames: &[(Vec<Detection>, Vec<BBox>)], iou_threshold: f64) -> Result<f64> {
    Ok(pr_curve_frames(frames, iou_threshold)?.area())
}

/// AP of each class (ground truths and detections filtered by class); `None`
/// for classes without ground truths.
pub fn per_class_ap(frames: &[(Vec<Detection>, Vec<(BBox, usize)>)], classes: usize, iou_threshold: f64) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let filtered: Vec<(Vec<Detection>, Vec<BBox>)> = frames
                .iter()
                .map(|(d, g)| {
                    (
                        d.iter().filter(|x| x.class_id == c).copied().collect(),
                        g.iter().filter(|(_, k)| *k == c).map(|(b, _)| *b).collect(),
                    )
                })
                .collect();
            average_precision_frames(&filtered, iou_threshold).ok()
        })
        .collect()
}

/// Mean of the defined per-class APs.
pub fn macro_ap(per_class: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Aggregate metrics over one clip.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Class-agnostic AP; `None` when the clip has no ground truths.
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub class_ap: Vec<Option<f64>>,
    pub macro_ap: Option<f64>,
    pub fps: Option<f64>,
    pub precision_degenerate: bool,
    pub recall_degenerate: bool,
    pub ap_degenerate: bool,
}

/// Pools per-frame matching into one report. Frames pair detections with
/// class-labelled ground truths.
pub fn evaluate_frames(frames: &[(Vec<Detection>, Vec<(BBox, usize)>)], classes: usize, iou_threshold: f64) -> MetricsReport {
    let agnostic: Vec<(Vec<Detection>, Vec<BBox>)> =
        frames.iter().map(|(d, g)| (d.clone(), g.iter().map(|(b, _)| *b).collect())).collect();
    let mut total = MatchResult::default();
    for (d, g) in &agnostic {
        total.accumulate(&match_detections(d, g, iou_threshold));
    }
    let p = precision(&total);
    let r = recall(&total);
    let ap = average_precision_frames(&agnostic, iou_threshold).ok();
    let (class_ap, macro_ap) = if classes > 1 {
        let per = per_class_ap(frames, classes, iou_threshold);
        let m = macro_ap(&per);
        (per, m)
    } else {
        (Vec::new(), None)
    };
    MetricsReport {
        ap,
        precision: p.value,
        recall: r.value,
        f1: f1(p.value, r.value),
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        class_ap,
        macro_ap,
        fps: None,
        precision_degenerate: p.degenerate,
        recall_degenerate: r.degenerate,
        ap_degenerate: ap.is_none(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FpsReport {
    /// Timed frames divided by total timed seconds.
    pub mean: f64,
    /// Standard deviation of the per-frame rates.
    pub std: f64,
    pub frames_timed: usize,
}

/// Times `infer` (which should include post-processing) on every frame after
/// the first `warmup`.
pub fn measure_fps<T, F>(frames: &[T], warmup: usize, mut infer: F) -> Result<FpsReport>
where
    F: FnMut(&T) -> Result<Vec<Detection>>,
{
    if frames.is_empty() {
        return contract_err("measure_fps needs at least one frame");
    }
    if warmup >= frames.len() {
        return contract_err(format!("warmup {warmup} leaves no frames out of {}", frames.len()));
    }
    for f in &frames[..warmup] {
        std::hint::black_box(infer(f)?);
    }
    let mut secs = Vec::with_capacity(frames.len() - warmup);
    for f in &frames[warmup..] {
        let t = std::time::Instant::now();
        std::hint::black_box(infer(f)?);
        secs.push(t.elapsed().as_secs_f64().max(1e-9));
    }
    let n = secs.len() as f64;
    let mean = n / secs.iter().sum::<f64>();
    let rates: Vec<f64> = secs.iter().map(|s| 1.0 / s).collect();
    let rate_mean = rates.iter().sum::<f64>() / n;
    let std = (rates.iter().map(|r| (r - rate_mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(FpsReport { mean, std, frames_timed: secs.len() })
}
