//! Run configuration: one TOML file plus flag overrides; flags win.

use crate::CliError;
use riqa_core::distort::{DistortionKind, DistortionSpec};
use riqa_core::trainer::{RankStrategy, TrainConfig, TrainPhase};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Corpus directory; defaults to `<out>/corpus`.
    pub corpus_dir: Option<PathBuf>,
    pub references: ReferencesConfig,
    pub distortions: DistortionsConfig,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub gradcheck: GradcheckSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 7,
            out: PathBuf::from("runs/riqa"),
            corpus_dir: None,
            references: ReferencesConfig::default(),
            distortions: DistortionsConfig::default(),
            train: TrainSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ReferencesConfig {
    /// Directory of reference PGM images. Ignored when `synthetic` is set.
    pub dir: Option<PathBuf>,
    /// Generate structured synthetic references instead of reading files.
    pub synthetic: bool,
    pub count: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for ReferencesConfig {
    fn default() -> Self {
        ReferencesConfig {
            dir: None,
            synthetic: true,
            count: 100,
            width: 96,
            height: 96,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DistortionsConfig {
    pub kinds: Vec<String>,
    /// Level grid overrides; defaults are the built-in grids.
    pub gaussian_blur: Option<Vec<f32>>,
    pub gaussian_noise: Option<Vec<f32>>,
    pub jpeg_proxy: Option<Vec<f32>>,
}

impl Default for DistortionsConfig {
    fn default() -> Self {
        DistortionsConfig {
            kinds: DistortionKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
            gaussian_blur: None,
            gaussian_noise: None,
            jpeg_proxy: None,
        }
    }
}

impl DistortionsConfig {
    pub fn resolve(&self) -> Result<Vec<(DistortionKind, Vec<f32>)>, CliError> {
        let mut out = Vec::new();
        for name in &self.kinds {
            let kind: DistortionKind = name
                .parse()
                .map_err(|e| CliError::User(format!("{e}")))?;
            let levels = match kind {
                DistortionKind::GaussianBlur => self.gaussian_blur.clone(),
                DistortionKind::GaussianNoise => self.gaussian_noise.clone(),
                DistortionKind::JpegProxy => self.jpeg_proxy.clone(),
            }
            .unwrap_or_else(|| DistortionSpec::default_levels(kind));
            DistortionSpec::new(kind, levels.clone(), 0).map_err(|e| CliError::User(e.to_string()))?;
            out.push((kind, levels));
        }
        if out.is_empty() {
            return Err(CliError::User("no distortion kinds configured".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: u64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_step: u64,
    pub weight_decay: f64,
    pub margin: f32,
    pub groups_per_batch: usize,
    pub pairs_per_iteration: Option<usize>,
    pub patch: usize,
    pub strategy: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::desk_rank(0);
        TrainSection {
            iterations: d.iterations,
            learning_rate: d.learning_rate,
            lr_decay: d.lr_decay,
            lr_step: d.lr_step,
            weight_decay: d.weight_decay,
            margin: d.margin,
            groups_per_batch: d.groups_per_batch,
            pairs_per_iteration: None,
            patch: d.patch,
            strategy: "efficient".into(),
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            phase: TrainPhase::Rank,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            lr_step: self.lr_step,
            weight_decay: self.weight_decay,
            margin: self.margin,
            groups_per_batch: self.groups_per_batch,
            pairs_per_iteration: self.pairs_per_iteration,
            batch_size: 1,
            patch: self.patch,
            seed,
        }
    }

    pub fn strategy(&self) -> Result<RankStrategy, CliError> {
        self.strategy.parse().map_err(|e: riqa_core::Error| CliError::User(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub iterations: u64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_step: u64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patch: usize,
    /// Ranking checkpoint to start from; defaults to the efficient-strategy
    /// checkpoint in the output directory.
    pub init_from: Option<PathBuf>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = TrainConfig::desk_finetune(0);
        FinetuneSection {
            iterations: d.iterations,
            learning_rate: d.learning_rate,
            lr_decay: d.lr_decay,
            lr_step: d.lr_step,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            patch: d.patch,
            init_from: None,
        }
    }
}

impl FinetuneSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            phase: TrainPhase::Finetune,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            lr_step: self.lr_step,
            weight_decay: self.weight_decay,
            margin: 1.0,
            groups_per_batch: 1,
            pairs_per_iteration: None,
            batch_size: self.batch_size,
            patch: self.patch,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Checkpoint to evaluate; defaults to `<out>/finetune.riqa`.
    pub checkpoint: Option<PathBuf>,
    pub crops_per_image: usize,
    pub patch: usize,
    pub test_fraction: f64,
    /// Which side of the reference split to evaluate: test | train | all.
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: None,
            crops_per_image: 30,
            patch: 32,
            test_fraction: 0.2,
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub levels: Vec<usize>,
    pub patch: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            levels: vec![2, 4, 6, 8],
            patch: 48,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub step: f64,
    pub tolerance: f64,
    pub samples_per_param: usize,
    pub batch: usize,
    pub patch: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_param: 40,
            batch: 6,
            patch: 24,
        }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<AppConfig, CliError> {
        match path {
            None => Ok(AppConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::User(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::User(format!("bad config {}: {e}", p.display())))
            }
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| self.out.join("corpus"))
    }

    pub fn labels_path(&self) -> PathBuf {
        self.corpus_dir().join(riqa_core::corpus::LABELS_FILE)
    }
}
