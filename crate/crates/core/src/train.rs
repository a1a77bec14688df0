//! Training and evaluation harness.
//!
//! Every frame contributes `w_giou·GIoU + w_l1·L1 + w_obj·BCE(objectness) +
//! w_cls·BCE(class)`, where the box terms are averaged over the
//! ground truths matched by [`assign_boxes`], objectness is averaged over matched and unmatched
//! candidates separately and the two means are averaged, and the class term is averaged
//! over matched candidates. A batch loss is the mean over its frames.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boxes::{BBox, Detection};
use crate::checkpoint::{self, records_of, restore, with_prefix};
use crate::config::{EvalConfig, ExperimentConfig, TrainConfig};
use crate::error::{contract_err, Error, Result};
use crate::losses::{assign_boxes, box_losses_on_tape, boxes_tensor, LossWeights};
use crate::metrics::{evaluate_frames, MetricsReport};
use crate::model::{candidates, detect, forward, raw_boxes, Model};
use crate::nn::{bind, bind_frozen, collect_grads, named_tensors, Params};
use crate::optim::{adamw_step, AdamState};
use crate::synth::{generate_clips, Annotation, Clip};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Loss components, each already averaged as described in the module docs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub giou: f64,
    pub l1: f64,
    /// `w_giou·giou + w_l1·l1`
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub objectness: f64,
    pub class: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.giou += s * o.giou;
        self.l1 += s * o.l1;
        self.box_loss += s * o.box_loss;
        self.objectness += s * o.objectness;
        self.class += s * o.class;
        self.total += s * o.total;
    }

    pub fn is_finite(&self) -> bool {
        [self.giou, self.l1, self.box_loss, self.objectness, self.class, self.total].iter().all(|v| v.is_finite())
    }
}

/// Builds one frame's loss on `tape`.
pub fn frame_loss(tape: &mut Tape, model: &Model<Var>, image: &Tensor, annots: &[Annotation], w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let x = tape.constant(image.clone());
    let head = forward(tape, x, model)?.head;
    let preds = raw_boxes(tape, &head);
    let gts: Vec<BBox> = annots.iter().map(|a| a.bbox).collect();
    let assignment = assign_boxes(&preds, &gts);

    let mut targets = vec![0.0; preds.len()];
    for &(p, _) in &assignment.pairs {
        targets[p] = 1.0;
    }
    let obj = tape.bce_with_logits(head.objectness, &targets)?;
    let obj = balanced_mean(tape, obj, &targets)?;
    let mut parts = LossBreakdown { objectness: tape.value(obj).item(), ..Default::default() };
    let mut total = tape.scale(obj, w.objectness)?;

    if !assignment.pairs.is_empty() {
        let pi: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
        let matched: Vec<BBox> = assignment.pairs.iter().map(|&(_, g)| gts[g]).collect();
        let pb = tape.index_select(head.boxes, 0, &pi)?;
        let gb = tape.constant(boxes_tensor(&matched)?);
        let (giou, l1) = box_losses_on_tape(tape, pb, gb)?;

        let k = model.cfg.classes;
        let mut onehot = vec![0.0; pi.len() * k];
        for (row, &(_, g)) in assignment.pairs.iter().enumerate() {
            onehot[row * k + annots[g].class_id.min(k - 1)] = 1.0;
        }
        let logits = tape.index_select(head.class_logits, 0, &pi)?;
        let cls = tape.bce_with_logits(logits, &onehot)?;
        let cls = tape.mean(cls)?;

        parts.giou = tape.value(giou).item();
        parts.l1 = tape.value(l1).item();
        parts.class = tape.value(cls).item();
        parts.box_loss = w.giou * parts.giou + w.l1 * parts.l1;
        for (v, c) in [(giou, w.giou), (l1, w.l1), (cls, w.class)] {
            let s = tape.scale(v, c)?;
            total = tape.add(total, s)?;
        }
    }
    parts.total = tape.value(total).item();
    Ok((total, parts))
}

/// Half the mean over positives plus half the mean over negatives, or the
/// plain mean when either set is empty.
fn balanced_mean(tape: &mut Tape, per_elem: Var, targets: &[f64]) -> Result<Var> {
    let pos = targets.iter().filter(|&&t| t > 0.5).count();
    let neg = targets.len() - pos;
    if pos == 0 || neg == 0 {
        return tape.mean(per_elem);
    }
    let w: Vec<f64> = targets.iter().map(|&t| if t > 0.5 { 0.5 / pos as f64 } else { 0.5 / neg as f64 }).collect();
    let w = tape.constant(Tensor::new(tape.shape(per_elem), w)?);
    let weighted = tape.mul(per_elem, w)?;
    tape.sum(weighted)
}

pub type Sample<'a> = (&'a Tensor, &'a [Annotation]);

/// Model parameters plus optimizer state; the only writer of both.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<Tensor>,
    pub state: AdamState,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model<Tensor>, cfg: TrainConfig) -> Self {
        Self { model, state: AdamState::default(), cfg }
    }

    /// Mean loss over `batch` without touching any state.
    pub fn loss(&self, batch: &[Sample]) -> Result<LossBreakdown> {
        let parts = crate::par_map(batch, |&(img, ann)| {
            let mut tape = Tape::new();
            let bound = bind_frozen(&self.model, &mut tape);
            frame_loss(&mut tape, &bound, img, ann, &self.cfg.loss).map(|(_, p)| p)
        });
        let mut mean = LossBreakdown::default();
        for p in parts {
            mean.add_scaled(&p?, 1.0 / batch.len() as f64);
        }
        Ok(mean)
    }

    /// Mean loss and mean parameter gradients over `batch`. Frames run in
    /// parallel; their gradients are summed in batch order.
    pub fn gradients(&self, batch: &[Sample]) -> Result<(LossBreakdown, Vec<Tensor>)> {
        if batch.is_empty() {
            return contract_err("empty batch");
        }
        let per_frame = crate::par_map(batch, |&(img, ann)| -> Result<(LossBreakdown, Vec<Tensor>)> {
            let mut tape = Tape::new();
            let bound = bind(&self.model, &mut tape);
            let (loss, parts) = frame_loss(&mut tape, &bound, img, ann, &self.cfg.loss)?;
            if !parts.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {parts:?}")));
            }
            tape.backward(loss)?;
            Ok((parts, collect_grads(&bound, &tape)?))
        });
        let scale = 1.0 / batch.len() as f64;
        let mut mean = LossBreakdown::default();
        let mut grads: Vec<Tensor> = Vec::new();
        for r in per_frame {
            let (parts, g) = r?;
            mean.add_scaled(&parts, scale);
            if grads.is_empty() {
                grads = g.iter().map(|t| Tensor::zeros(t.shape())).collect();
            }
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += scale * b;
                }
            }
        }
        Ok((mean, grads))
    }

    /// One AdamW step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &[Sample]) -> Result<LossBreakdown> {
        let (loss, grads) = self.gradients(batch)?;
        adamw_step(&mut self.model, &grads, &mut self.state, &self.cfg.adamw())?;
        Ok(loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_f1: f64,
    /// Zero when the validation split has no ground truths.
    pub val_ap: f64,
}

/// Indices of the train, test and validation clips, split 7:2:1. With fewer
/// than three clips every split uses all of them.
pub fn split_clips(n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    if n < 3 {
        let all: Vec<usize> = (0..n).collect();
        return (all.clone(), all.clone(), all);
    }
    let test = ((n as f64 * 0.2).round() as usize).max(1);
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    let train = n - test - val;
    ((0..train).collect(), (train..train + test).collect(), (train + test..n).collect())
}

/// Frame-level outputs of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameDetections {
    pub clip: usize,
    pub frame: usize,
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClipMetrics {
    pub clip: usize,
    #[serde(flatten)]
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Pooled over every evaluated frame.
    pub overall: MetricsReport,
    pub per_clip: Vec<ClipMetrics>,
    pub detections: Vec<FrameDetections>,
}

/// Runs inference and post-processing on every frame of the given clips.
/// AP ranks every post-NMS candidate; precision, recall, F1 and the written
/// detections use only those scoring at least `eval.score_threshold`.
pub fn evaluate(model: &Model<Tensor>, clips: &[(usize, &Clip)], eval: &EvalConfig) -> Result<Evaluation> {
    let jobs: Vec<(usize, usize, &Tensor)> =
        clips.iter().flat_map(|&(c, clip)| clip.frames.iter().enumerate().map(move |(f, img)| (c, f, img))).collect();
    let ranked = crate::par_map(&jobs, |&(_, _, img)| detect(model, img, 0.0, eval.nms_iou));
    let ranked: Vec<Vec<Detection>> = ranked.into_iter().collect::<Result<_>>()?;
    let dets: Vec<Vec<Detection>> =
        ranked.iter().map(|r| r.iter().filter(|d| d.score >= eval.score_threshold).copied().collect()).collect();
    let k_classes = model.cfg.classes;
    let report = |kept: Vec<(Vec<Detection>, Vec<(BBox, usize)>)>, all: Vec<(Vec<Detection>, Vec<(BBox, usize)>)>| {
        let mut r = evaluate_frames(&kept, k_classes, eval.iou_threshold);
        let a = evaluate_frames(&all, k_classes, eval.iou_threshold);
        r.ap = a.ap;
        r.class_ap = a.class_ap;
        r.macro_ap = a.macro_ap;
        r.ap_degenerate = a.ap_degenerate;
        r
    };

    let mut all = Vec::new();
    let mut all_ranked = Vec::new();
    let mut per_clip = Vec::new();
    let mut detections = Vec::new();
    let mut k = 0;
    for &(c, clip) in clips {
        let mut frames = Vec::new();
        let mut frames_ranked = Vec::new();
        for (f, ann) in clip.annotations.iter().enumerate() {
            let d = &dets[k];
            let gts: Vec<(BBox, usize)> = ann.iter().map(|a| (a.bbox, a.class_id)).collect();
            frames_ranked.push((ranked[k].clone(), gts.clone()));
            k += 1;
            detections.push(FrameDetections {
                clip: c,
                frame: f,
                boxes: d.iter().map(|x| x.bbox.to_array()).collect(),
                scores: d.iter().map(|x| x.score).collect(),
                classes: d.iter().map(|x| x.class_id).collect(),
            });
            frames.push((d.clone(), gts));
        }
        per_clip.push(ClipMetrics { clip: c, report: report(frames.clone(), frames_ranked.clone()) });
        all.extend(frames);
        all_ranked.extend(frames_ranked);
    }
    Ok(Evaluation { overall: report(all, all_ranked), per_clip, detections })
}

/// Un-thresholded candidates of one frame, for inspection.
pub fn raw_candidates(model: &Model<Tensor>, image: &Tensor) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let bound = bind_frozen(model, &mut tape);
    let x = tape.constant(image.clone());
    let out = forward(&mut tape, x, &bound)?;
    Ok(candidates(&tape, &out.head, &model.cfg))
}

/// Everything needed to continue a run after its last completed epoch.
#[derive(Clone, Debug)]
pub struct ResumeState {
    pub trainer: Trainer,
    pub next_epoch: usize,
    pub best: Model<Tensor>,
    /// Validation `(F1, AP)` of `best`, compared lexicographically.
    pub best_score: (f64, f64),
    pub best_epoch: usize,
    pub stale: usize,
    pub history: Vec<EpochRecord>,
}

const HISTORY_FIELDS: usize = 9;

impl ResumeState {
    /// Checkpoint records: the best model under plain names, resume state
    /// under `resume.`.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut out = records_of(&self.best, "");
        out.extend(records_of(&self.trainer.model, "resume.model."));
        let names: Vec<String> = named_tensors(&self.trainer.model).into_iter().map(|(n, _)| n).collect();
        for (prefix, moments) in [("resume.m.", &self.trainer.state.m), ("resume.v.", &self.trainer.state.v)] {
            for (n, t) in names.iter().zip(moments.iter()) {
                out.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        let counters = vec![
            self.trainer.state.step as f64,
            self.next_epoch as f64,
            self.best_score.0,
            self.best_score.1,
            self.best_epoch as f64,
            self.stale as f64,
        ];
        out.push(("resume.counters".into(), Tensor::from_vec(counters)));
        let mut hist = Vec::with_capacity(self.history.len() * HISTORY_FIELDS);
        for h in &self.history {
            let l = &h.loss;
            hist.extend([h.epoch as f64, l.giou, l.l1, l.box_loss, l.objectness, l.class, l.total, h.val_f1, h.val_ap]);
        }
        if !self.history.is_empty() {
            out.push(("resume.history".into(), Tensor::new(&[self.history.len(), HISTORY_FIELDS], hist).expect("sized")));
        }
        out
    }

    pub fn from_records(records: &[(String, Tensor)], cfg: &ExperimentConfig) -> Result<Self> {
        let template = Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut best = template.clone();
        restore(&mut best, records)?;
        let mut model = template;
        restore(&mut model, &with_prefix(records, "resume.model."))?;
        let pick = |prefix: &str| -> Result<Vec<Tensor>> {
            let mut moments = best.clone();
            restore(&mut moments, &with_prefix(records, prefix))?;
            Ok(named_tensors(&moments).into_iter().map(|(_, t)| t).collect())
        };
        let counters = records
            .iter()
            .find(|(n, _)| n == "resume.counters")
            .map(|(_, t)| t.data().to_vec())
            .filter(|c| c.len() == 6)
            .ok_or_else(|| Error::Format("checkpoint has no resume state".into()))?;
        let history = records
            .iter()
            .find(|(n, _)| n == "resume.history")
            .map(|(_, t)| {
                t.data()
                    .chunks(HISTORY_FIELDS)
                    .map(|r| EpochRecord {
                        epoch: r[0] as usize,
                        loss: LossBreakdown { giou: r[1], l1: r[2], box_loss: r[3], objectness: r[4], class: r[5], total: r[6] },
                        val_f1: r[7],
                        val_ap: r[8],
                    })
                    .collect()
            })
            .unwrap_or_default();
        let state = AdamState { step: counters[0] as u64, m: pick("resume.m.")?, v: pick("resume.v.")? };
        Ok(Self {
            trainer: Trainer { model, state, cfg: cfg.train.clone() },
            next_epoch: counters[1] as usize,
            best,
            best_score: (counters[2], counters[3]),
            best_epoch: counters[4] as usize,
            stale: counters[5] as usize,
            history,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Test-split evaluation of the best-validation model.
    pub evaluation: Evaluation,
    pub checkpoint: Option<PathBuf>,
    pub state: ResumeState,
    pub wall_clock_secs: f64,
}

/// Generates the configured clips; frames are flattened per split.
pub fn build_data(cfg: &ExperimentConfig) -> Result<Vec<Clip>> {
    generate_clips(&cfg.data.clip, cfg.data.clips)
}

fn samples<'a>(clips: &'a [Clip], idx: &[usize]) -> Vec<Sample<'a>> {
    idx.iter().flat_map(|&c| clips[c].frames.iter().zip(&clips[c].annotations).map(|(f, a)| (f, a.as_slice()))).collect()
}

fn indexed<'a>(clips: &'a [Clip], idx: &[usize]) -> Vec<(usize, &'a Clip)> {
    idx.iter().map(|&i| (i, &clips[i])).collect()
}

/// Frame order for `epoch`, a pure function of the seed and the epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn init_model(cfg: &ExperimentConfig, first_frame: Option<&Tensor>) -> Result<Model<Tensor>> {
    let mut model = Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    if let (crate::afia::FusionInit::BranchActivation, Some(img)) = (cfg.model.fusion_init, first_frame) {
        model.init_fusion_from_image(img)?;
    }
    Ok(model)
}

/// Full training run with early stopping on validation F1, ties broken by
/// validation AP. When `run_dir` is
/// given, every output file is written there at the end.
pub fn train(cfg: &ExperimentConfig, run_dir: Option<&Path>, resume: Option<ResumeState>) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let clips = build_data(cfg)?;
    let (train_idx, test_idx, val_idx) = split_clips(clips.len());
    let train_set = samples(&clips, &train_idx);
    let val = indexed(&clips, &val_idx);

    let mut st = match resume {
        Some(s) => s,
        None => {
            let model = init_model(cfg, train_set.first().map(|s| s.0))?;
            ResumeState {
                trainer: Trainer::new(model.clone(), cfg.train.clone()),
                next_epoch: 0,
                best: model,
                best_score: (f64::NEG_INFINITY, f64::NEG_INFINITY),
                best_epoch: 0,
                stale: 0,
                history: Vec::new(),
            }
        }
    };
    st.trainer.cfg = cfg.train.clone();

    let mut stopped_early = st.stale >= cfg.train.patience && st.next_epoch > 0;
    while st.next_epoch < cfg.train.epochs && !stopped_early {
        let epoch = st.next_epoch;
        let order = epoch_order(cfg.train.seed, epoch, train_set.len());
        let batches: Vec<&[usize]> = order.chunks(cfg.train.batch_size).collect();
        let mut mean = LossBreakdown::default();
        for (b, chunk) in batches.iter().enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let loss = st.trainer.step(&batch).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{msg} at epoch {epoch}, batch {b} (train frames {chunk:?}, train seed {}, data seed {})",
                    cfg.train.seed, cfg.data.clip.seed
                )),
                other => other,
            })?;
            mean.add_scaled(&loss, 1.0 / batches.len() as f64);
        }
        let val_report = evaluate(&st.trainer.model, &val, &cfg.eval)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{msg} during validation after epoch {epoch} (train seed {}, data seed {})",
                    cfg.train.seed, cfg.data.clip.seed
                )),
                other => other,
            })?
            .overall;
        let score = (val_report.f1, val_report.ap.unwrap_or(0.0));
        st.history.push(EpochRecord { epoch, loss: mean, val_f1: score.0, val_ap: score.1 });
        if score > st.best_score {
            st.best_score = score;
            st.best_epoch = epoch;
            st.best = st.trainer.model.clone();
            st.stale = 0;
        } else {
            st.stale += 1;
        }
        st.next_epoch += 1;
        stopped_early = st.stale >= cfg.train.patience;
    }

    let evaluation = evaluate(&st.best, &indexed(&clips, &test_idx), &cfg.eval)?;
    let mut record = RunRecord {
        config: cfg.clone(),
        history: st.history.clone(),
        best_epoch: st.best_epoch,
        stopped_early,
        evaluation,
        checkpoint: None,
        state: st,
        wall_clock_secs: 0.0,
    };
    if let Some(dir) = run_dir {
        write_run_dir(dir, &record)?;
        record.checkpoint = Some(dir.join("checkpoint.afed"));
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

/// Loads the evaluation model (plain-named records) from a checkpoint file.
pub fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<Model<Tensor>> {
    let records = checkpoint::load(path)?;
    let mut model = Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    restore(&mut model, &records)?;
    Ok(model)
}

/// Evaluates `model` on the test split of the configured data.
pub fn evaluate_test_split(model: &Model<Tensor>, cfg: &ExperimentConfig) -> Result<Evaluation> {
    cfg.validate()?;
    let clips = build_data(cfg)?;
    let (_, test_idx, _) = split_clips(clips.len());
    evaluate(model, &indexed(&clips, &test_idx), &cfg.eval)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

pub fn metrics_text(report: &MetricsReport) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    kv("ap", opt(report.ap));
    kv("precision", report.precision.to_string());
    kv("recall", report.recall.to_string());
    kv("f1", report.f1.to_string());
    kv("tp", report.tp.to_string());
    kv("fp", report.fp.to_string());
    kv("fn", report.fn_.to_string());
    for (c, ap) in report.class_ap.iter().enumerate() {
        kv(&format!("ap_class{c}"), opt(*ap));
    }
    if !report.class_ap.is_empty() {
        kv("macro_ap", opt(report.macro_ap));
    }
    kv("fps", opt(report.fps));
    kv("precision_degenerate", report.precision_degenerate.to_string());
    kv("recall_degenerate", report.recall_degenerate.to_string());
    kv("ap_degenerate", report.ap_degenerate.to_string());
    s
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("plain data") + "\n").collect()
}

/// Writes `metrics.txt`, `metrics.jsonl` and `detections.jsonl`.
pub fn write_evaluation(dir: &Path, ev: &Evaluation, extra: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = metrics_text(&ev.overall);
    for (k, v) in extra {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(dir.join("metrics.txt"), text)?;
    std::fs::write(dir.join("metrics.jsonl"), jsonl(&ev.per_clip))?;
    std::fs::write(dir.join("detections.jsonl"), jsonl(&ev.detections))?;
    Ok(())
}

pub fn losses_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,giou,l1,box,objectness,class,total,val_f1,val_ap\n");
    for h in history {
        let l = &h.loss;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            h.epoch, l.giou, l.l1, l.box_loss, l.objectness, l.class, l.total, h.val_f1, h.val_ap
        ));
    }
    s
}

pub fn write_run_dir(dir: &Path, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.snapshot"), record.config.to_toml())?;
    std::fs::write(dir.join("losses.csv"), losses_csv(&record.history))?;
    let extra = vec![
        ("epochs_run".to_string(), record.history.len().to_string()),
        ("best_epoch".to_string(), record.best_epoch.to_string()),
        ("stopped_early".to_string(), record.stopped_early.to_string()),
    ];
    write_evaluation(dir, &record.evaluation, &extra)?;
    checkpoint::save(&dir.join("checkpoint.afed"), &record.state.to_records())
}

/// Every trainable leaf of a model, for reporting.
pub fn parameter_count(model: &Model<Tensor>) -> usize {
    let mut n = 0;
    model.map_named("", &mut |_, t| n += t.numel());
    n
}
