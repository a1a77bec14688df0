use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use afe::ablation::{ablate, render_table, TABLE_ROWS};
use afe::checkpoint;
use afe::checks::run_suite;
use afe::config::ExperimentConfig;
use afe::metrics::measure_fps;
use afe::model::detect;
use afe::synth::generate_clips;
use afe::tensor::Tensor;
use afe::train::{self, evaluate_test_split, load_model, write_evaluation, ResumeState};
use afe::{Error, Result};

#[derive(Parser)]
#[command(name = "afe", version, about = "Train and evaluate the AFE polyp detector on synthetic endoscopy clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for parameter initialisation, data generation and epoch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    score_threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on generated clips and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the resume state stored in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of the configured data.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.afed`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random instances per component.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Measure inference frames per second, post-processing included.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Uses freshly initialised parameters when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        warmup: usize,
    },
    /// Train every component variant under the same seed and budget.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Write generated clips as PNG frames plus annotations.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured clip count.
        #[arg(long)]
        clips: Option<usize>,
    },
}

fn load_config(common: &Common, fallback: Option<&Path>) -> Result<ExperimentConfig> {
    let path = common.config.clone().or_else(|| fallback.map(Path::to_path_buf).filter(|p| p.exists()));
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(t) = common.iou_threshold {
        cfg.eval.iou_threshold = t;
    }
    if let Some(t) = common.score_threshold {
        cfg.eval.score_threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig, default: &str) -> PathBuf {
    common.out.clone().or_else(|| cfg.train.out_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(default))
}

fn cmd_train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(common, None)?;
    let out = out_dir(common, &cfg, "run");
    let state = match resume {
        Some(p) => Some(ResumeState::from_records(&checkpoint::load(p)?, &cfg)?),
        None => None,
    };
    match train::train(&cfg, Some(&out), state) {
        Ok(rec) => {
            let m = &rec.evaluation.overall;
            println!(
                "trained {} epochs (best {}){} in {:.1}s",
                rec.history.len(),
                rec.best_epoch,
                if rec.stopped_early { ", stopped early" } else { "" },
                rec.wall_clock_secs
            );
            println!("test AP {} P {:.4} R {:.4} F1 {:.4}", fmt_opt(m.ap), m.precision, m.recall, m.f1);
            println!("run directory {}", out.display());
            Ok(())
        }
        Err(e @ Error::Numeric(_)) => {
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("diagnostic.txt"), format!("{e}\n"))?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn cmd_eval(common: &Common, ckpt: Option<&Path>) -> Result<()> {
    let ckpt_path = match (ckpt, &common.out) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(o)) => o.join("checkpoint.afed"),
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --out".into())),
    };
    let snapshot = ckpt_path.parent().map(|d| d.join("config.snapshot"));
    let cfg = load_config(common, snapshot.as_deref())?;
    let model = load_model(&ckpt_path, &cfg)?;
    let ev = evaluate_test_split(&model, &cfg)?;
    let out = out_dir(common, &cfg, "eval");
    write_evaluation(&out, &ev, &[])?;
    let m = &ev.overall;
    println!("AP {} P {:.4} R {:.4} F1 {:.4} (tp {} fp {} fn {})", fmt_opt(m.ap), m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_);
    Ok(())
}

fn cmd_gradcheck(common: &Common, seeds: u64) -> Result<()> {
    let outcomes = run_suite(seeds)?;
    let mut text = String::new();
    for o in &outcomes {
        text.push_str(&format!(
            "{:<16} {} max_rel_err={:.3e} tol={:.0e} checked={} skipped={} redraws={} worst={}\n",
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.max_rel_error,
            o.tol,
            o.checked,
            o.skipped,
            o.redraws,
            o.worst_group
        ));
    }
    print!("{text}");
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("gradcheck.txt"), &text)?;
    }
    match outcomes.iter().find(|o| !o.pass) {
        Some(o) => Err(Error::Numeric(format!("gradient check failed for {}", o.name))),
        None => Ok(()),
    }
}

fn cmd_bench(common: &Common, ckpt: Option<&Path>, frames: usize, warmup: usize) -> Result<()> {
    let cfg = load_config(common, None)?;
    let model = match ckpt {
        Some(p) => load_model(p, &cfg)?,
        None => train::init_model(&cfg, None)?,
    };
    let mut spec = cfg.data.clip.clone();
    spec.frames = frames;
    let clip = generate_clips(&spec, 1)?.remove(0);
    let e = cfg.eval;
    let r = measure_fps(&clip.frames, warmup, |f: &Tensor| detect(&model, f, e.score_threshold, e.nms_iou))?;
    let text = format!("fps = {}\nfps_std = {}\nframes_timed = {}\n", r.mean, r.std, r.frames_timed);
    print!("{text}");
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("bench.txt"), text)?;
    }
    Ok(())
}

fn cmd_ablate(common: &Common) -> Result<()> {
    let cfg = load_config(common, None)?;
    let out = out_dir(common, &cfg, "ablation");
    let rows = ablate(&cfg, &TABLE_ROWS, Some(&out))?;
    print!("{}", render_table(&rows));
    Ok(())
}

fn to_png(frame: &Tensor) -> image::RgbImage {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let d = frame.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    })
}

fn cmd_gen_data(common: &Common, clips: Option<usize>) -> Result<()> {
    let cfg = load_config(common, None)?;
    let out = out_dir(common, &cfg, "data");
    let data = generate_clips(&cfg.data.clip, clips.unwrap_or(cfg.data.clips))?;
    std::fs::create_dir_all(&out)?;
    let mut ann = String::new();
    for (c, clip) in data.iter().enumerate() {
        let dir = out.join(format!("clip{c:03}"));
        std::fs::create_dir_all(&dir)?;
        for (f, frame) in clip.frames.iter().enumerate() {
            to_png(frame)
                .save(dir.join(format!("frame{f:03}.png")))
                .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
            let rec = serde_json::json!({ "clip": c, "frame": f, "annotations": clip.annotations[f] });
            ann.push_str(&rec.to_string());
            ann.push('\n');
        }
    }
    std::fs::write(out.join("annotations.jsonl"), ann)?;
    std::fs::write(out.join("config.snapshot"), cfg.to_toml())?;
    println!("wrote {} clips to {}", data.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { common, resume } => cmd_train(common, resume.as_deref()),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint.as_deref()),
        Command::Gradcheck { common, seeds } => cmd_gradcheck(common, *seeds),
        Command::Bench { common, checkpoint, frames, warmup } => cmd_bench(common, checkpoint.as_deref(), *frames, *warmup),
        Command::Ablate { common } => cmd_ablate(common),
        Command::GenData { common, clips } => cmd_gen_data(common, *clips),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
