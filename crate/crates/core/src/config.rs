//! Experiment configuration: model, training, data and evaluation sections,
//! read from and written to TOML.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::losses::LossWeights;
use crate::metrics::DEFAULT_IOU_THRESHOLD;
use crate::model::AfeConfig;
use crate::optim::AdamWConfig;
use crate::synth::SynthClipSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds parameter initialisation and the frame order of every epoch.
    pub seed: u64,
    /// Epochs without a validation (F1, AP) improvement before stopping.
    pub patience: usize,
    pub loss: LossWeights,
    /// Run directory; the command line's `--out` takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            epochs: 60,
            batch_size: 4,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            patience: 20,
            loss: LossWeights::default(),
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return config_err(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if self.batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return config_err("AdamW needs betas in [0, 1) and a positive eps");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return config_err("weight decay must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Clips generated with seeds `clip.seed`, `clip.seed + 1`, … and split 7:2:1
    /// into train, test and validation.
    pub clips: usize,
    pub clip: SynthClipSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { clips: 10, clip: SynthClipSpec::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    /// IoU above which NMS suppresses the lower-scored box.
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: DEFAULT_IOU_THRESHOLD, score_threshold: 0.5, nms_iou: 0.5 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return config_err(format!("IoU threshold {} must lie in (0, 1)", self.iou_threshold));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return config_err("score threshold and NMS IoU must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: AfeConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.clip.validate()?;
        self.eval.validate()?;
        if self.data.clips == 0 {
            return config_err("need at least one clip");
        }
        let (m, c) = (&self.model, &self.data.clip);
        if (m.height, m.width) != (c.height, c.width) || m.image_channels != 3 {
            return config_err(format!(
                "model expects {}×{}×{} images, data produces 3×{}×{}",
                m.image_channels, m.height, m.width, c.height, c.width
            ));
        }
        if m.classes < 2 && c.class1_fraction > 0.0 {
            return config_err("data contains class 1 but the model has a single class");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }

    /// Uses `seed` for both parameter initialisation and data generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.clip.seed = seed;
        self
    }
}
