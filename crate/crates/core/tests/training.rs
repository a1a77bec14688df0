use afe::checkpoint;
use afe::config::{EvalConfig, ExperimentConfig};
use afe::error::Error;
use afe::metrics::measure_fps;
use afe::model::{pyramid_forward, stem_forward, Model};
use afe::nn::bind_frozen;
use afe::synth::{generate_clip, SynthClipSpec};
use afe::tape::Tape;
use afe::tensor::Tensor;
use afe::train::{evaluate, init_model, train, write_evaluation, ResumeState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.clips = 3;
    cfg.data.clip.frames = 4;
    cfg.train.epochs = epochs;
    cfg.train.patience = 100;
    cfg.with_seed(11)
}

#[test]
fn resume_continues_the_same_trajectory() {
    let full = train(&tiny(4), None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    train(&tiny(2), Some(dir.path()), None).unwrap();
    let records = checkpoint::load(&dir.path().join("checkpoint.afed")).unwrap();
    let state = ResumeState::from_records(&records, &tiny(4)).unwrap();
    let resumed = train(&tiny(4), None, Some(state)).unwrap();

    assert_eq!(resumed.history.len(), 4);
    for (a, b) in full.history.iter().zip(&resumed.history) {
        assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits(), "epoch {}", a.epoch);
        assert_eq!(a.val_f1.to_bits(), b.val_f1.to_bits());
    }
    assert_eq!(full.state.trainer.model, resumed.state.trainer.model);
}

#[test]
fn non_finite_loss_aborts_without_checkpoint() {
    let mut cfg = tiny(2);
    cfg.train.lr = 1e250;
    let dir = tempfile::tempdir().unwrap();
    match train(&cfg, Some(dir.path()), None) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("seed"), "{msg}"),
        other => panic!("expected a numeric error, got {:?}", other.map(|r| r.history.len())),
    }
    assert!(!dir.path().join("checkpoint.afed").exists());
}

#[test]
fn zero_polyp_clip_reports_degenerate_flags() {
    let spec = SynthClipSpec { polyp_count: [0, 0], seed: 2, ..SynthClipSpec::default() };
    let clip = generate_clip(&spec).unwrap();
    assert!(clip.annotations.iter().all(Vec::is_empty));
    let model = init_model(&ExperimentConfig::default(), None).unwrap();
    let eval = EvalConfig { score_threshold: 1.0, ..EvalConfig::default() };
    let ev = evaluate(&model, &[(0, &clip)], &eval).unwrap();
    let r = &ev.overall;
    assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 0));
    assert!(r.precision_degenerate && r.recall_degenerate && r.ap_degenerate);
    assert_eq!(r.ap, None);
    assert!(r.f1.is_finite());
}

#[test]
fn repeated_evaluation_writes_identical_reports() {
    let cfg = tiny(1);
    let clip = generate_clip(&cfg.data.clip).unwrap();
    let model = init_model(&cfg, None).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let ev = evaluate(&model, &[(0, &clip)], &cfg.eval).unwrap();
        write_evaluation(d.path(), &ev, &[]).unwrap();
    }
    for f in ["metrics.txt", "metrics.jsonl", "detections.jsonl"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn pyramid_stays_finite_over_random_forwards() {
    let cfg = ExperimentConfig::default();
    let model = Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let img = Tensor::uniform(&[3, 32, 32], 1.0, &mut rng);
        let mut tape = Tape::new();
        let m = bind_frozen(&model, &mut tape);
        let x = tape.constant(img);
        let f0 = stem_forward(&mut tape, x, &m).unwrap();
        let p = pyramid_forward(&mut tape, f0, &m).unwrap();
        for v in p.maps {
            let d = tape.value(v).data();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
            assert!(mean.is_finite() && var.is_finite());
        }
    }
}

#[test]
fn fps_reports_positive_rates() {
    let frames = vec![0u8; 6];
    let r = measure_fps(&frames, 2, |_| {
        std::thread::sleep(std::time::Duration::from_millis(2));
        Ok(Vec::new())
    })
    .unwrap();
    assert_eq!(r.frames_timed, 4);
    assert!(r.mean > 0.0 && r.mean < 600.0 && r.std >= 0.0);
    assert!(measure_fps(&frames, 6, |_| Ok(Vec::new())).is_err());
}
