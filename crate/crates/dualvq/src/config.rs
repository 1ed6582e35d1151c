//! Experiment configuration: one TOML file per experiment, with command
//! line flags overriding file values and file values overriding defaults.
//! `DUALVQ_OUT_ROOT` re-roots all relative artifact paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusParams;
use crate::model::{ModelConfig, ReconLoss, Variant};
use crate::numerics::OptimizerKind;
use crate::training::TrainOptions;

pub const OUT_ROOT_ENV: &str = "DUALVQ_OUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Where checkpoints, reports and plots land.
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub dir: PathBuf,
    #[serde(flatten)]
    pub params: CorpusParams,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("corpus"),
            params: CorpusParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub dsf: usize,
    pub local_k: usize,
    pub global_k: usize,
    pub embed_d: usize,
    pub hidden: usize,
    pub adv_lambda: f64,
    pub asoftmax_margin: u32,
    pub recon_loss: ReconLoss,
    /// Model init seed.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            variant: m.variant,
            dsf: m.dsf,
            local_k: m.local_k,
            global_k: m.global_k,
            embed_d: m.embed_d,
            hidden: m.hidden,
            adv_lambda: m.adv_lambda,
            asoftmax_margin: m.asoftmax_margin,
            recon_loss: m.recon_loss,
            seed: 0,
        }
    }
}

impl ModelSection {
    /// Materialize a full model config against a concrete corpus: the
    /// speaker inventory and sample rate come from the corpus, not the
    /// config file.
    pub fn to_model_config(&self, n_speakers: usize, sample_rate: u32) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            dsf: self.dsf,
            local_k: self.local_k,
            global_k: self.global_k,
            embed_d: self.embed_d,
            n_speakers,
            hidden: self.hidden,
            adv_lambda: self.adv_lambda,
            asoftmax_margin: self.asoftmax_margin,
            recon_loss: self.recon_loss,
            sample_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// `adam` or `sgd`.
    pub optimizer: String,
    /// Negative means "use the variant default" (1.0, with beta 0.25 for
    /// base and 1.0 for dual variants).
    pub alpha: f64,
    pub beta: f64,
    pub crop_ms: f64,
    pub val_every: u64,
    pub seed: u64,
    /// Base checkpoint to copy the local pathway from (dual variants).
    pub warm_start: Option<PathBuf>,
    /// Checkpoint to fine-tune with speaker components frozen.
    pub freeze_fine_tune_from: Option<PathBuf>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            lr: 1e-3,
            optimizer: "adam".into(),
            alpha: -1.0,
            beta: -1.0,
            crop_ms: 400.0,
            val_every: 50,
            seed: 0,
            warm_start: None,
            freeze_fine_tune_from: None,
        }
    }
}

impl TrainingSection {
    pub fn to_train_options(&self, variant: Variant) -> Result<TrainOptions, ConfigError> {
        let mut opts = TrainOptions::default_for(variant);
        opts.steps = self.steps;
        opts.batch_size = self.batch_size.max(1);
        opts.lr = self.lr;
        opts.optimizer = match self.optimizer.as_str() {
            "adam" => OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            "sgd" => OptimizerKind::Sgd,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown optimizer `{other}` (want adam or sgd)"
                )))
            }
        };
        if self.alpha >= 0.0 {
            opts.alpha = self.alpha;
        }
        if self.beta >= 0.0 {
            opts.beta = self.beta;
        }
        opts.crop_ms = self.crop_ms;
        opts.val_every = self.val_every.max(1);
        opts.seed = self.seed;
        Ok(opts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub diarization_window_s: f64,
    pub diarization_overlap_s: f64,
    /// Two-speaker files built per condition.
    pub diarization_files_per_condition: usize,
    /// Enrollment utterances reserved per speaker.
    pub enrollment_utts: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seed: 0,
            diarization_window_s: 2.0,
            diarization_overlap_s: 0.25,
            diarization_files_per_condition: 2,
            enrollment_utts: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.eval.diarization_overlap_s >= self.eval.diarization_window_s {
            return Err(ConfigError::Invalid(
                "diarization overlap must be below the window length".into(),
            ));
        }
        if self.eval.diarization_window_s <= 0.0 || !self.eval.diarization_window_s.is_finite() {
            return Err(ConfigError::Invalid("bad diarization window".into()));
        }
        if self.training.crop_ms <= 0.0 || !self.training.crop_ms.is_finite() {
            return Err(ConfigError::Invalid("crop_ms must be positive".into()));
        }
        if !self.training.lr.is_finite() || self.training.lr < 0.0 {
            return Err(ConfigError::Invalid("lr must be non-negative".into()));
        }
        self.model
            .to_model_config(1, 16000)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Apply the `DUALVQ_OUT_ROOT` re-rooting to a relative path.
    pub fn rooted(path: &Path) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if path.is_relative() => PathBuf::from(root).join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        Self::rooted(&self.output_dir)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        Self::rooted(&self.corpus.dir)
    }
}
