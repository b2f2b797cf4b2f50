//! Run configuration: one TOML file, every section optional, unknown keys rejected.
//!
//! Relative paths resolve against the directory of the config file. Command-line
//! flags (`--seed`, `--out`) are applied on top and are part of the hashed
//! effective configuration.

use std::path::{Path, PathBuf};

use rotreg_core::data::{BinCounts, DEFAULT_NOISE_SIGMA};
use rotreg_core::geometry::{CameraIntrinsics, ChannelMode};
use rotreg_core::model::{ArchitectureSpec, Variant};
use rotreg_core::train::DEFAULT_BATCH_SIZE;
use rotreg_core::tensor::AdamState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
    pub camera: Option<CameraConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Built-in shape (`l-shape`, `bar`) or path to an ASCII "x y z" point list.
    pub object: String,
    pub dir: PathBuf,
    pub seed: u64,
    pub noise_sigma: f64,
    pub train: BinCounts,
    pub test: BinCounts,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            object: "l-shape".into(),
            dir: "data".into(),
            seed: 0,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            train: BinCounts::default(),
            test: BinCounts::default(),
        }
    }
}

/// Unset widths take the variant's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub point_mlp_dims: Option<Vec<usize>>,
    pub global_feature_dim: Option<usize>,
    pub head_dims: Option<Vec<usize>>,
    pub k: usize,
    pub num_points: usize,
    pub channel_mode: ChannelMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::PointNet,
            point_mlp_dims: None,
            global_feature_dim: None,
            head_dims: None,
            k: ArchitectureSpec::DEFAULT_K,
            num_points: ArchitectureSpec::DEFAULT_POINTS,
            channel_mode: ChannelMode::Xyz,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ArchitectureSpec> {
        let mut spec = match self.variant {
            Variant::PointNet => ArchitectureSpec::pointnet(),
            Variant::DynamicGraph => ArchitectureSpec::dynamic_graph(),
        };
        if let Some(d) = &self.point_mlp_dims {
            spec.point_mlp_dims = d.clone();
        }
        if let Some(g) = self.global_feature_dim {
            spec.global_feature_dim = g;
        }
        if let Some(h) = &self.head_dims {
            spec.head_dims = h.clone();
        }
        spec.k = self.k;
        spec.num_points = self.num_points;
        spec.input_dim = self.channel_mode.dim();
        spec.validate().map_err(|e| CliError::Config(format!("[model] {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Dataset directory; defaults to `data.dir`.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Seed of the weight initialization; defaults to `seed`.
    pub init_seed: Option<u64>,
    /// Evaluate the mean training error every this many iterations (0 disables).
    pub check_every: u64,
    /// Training samples used by each check.
    pub check_samples: usize,
    /// Stop once a check reports a mean training error below this many degrees.
    pub stop_below_degrees: Option<f64>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: None,
            out: "run".into(),
            lr: AdamState::DEFAULT_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            iterations: 2000,
            seed: 0,
            init_seed: None,
            check_every: 100,
            check_samples: 256,
            stop_below_degrees: None,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    #[default]
    Model,
    /// Uses the ground-truth rotations as predictions; exercises the metric path.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Dataset directory; defaults to `data.dir`.
    pub dataset: Option<PathBuf>,
    /// Defaults to the best checkpoint in `train.out`.
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub label: Option<String>,
    pub split: SplitChoice,
    pub seed: u64,
    /// Standard deviation (meters) of the Gaussian error added to the translation
    /// removed from each segment.
    pub translation_sigma: f64,
    /// Accuracy-curve thresholds; defaults to 1°, 2°, …, 180°.
    pub thresholds_degrees: Option<Vec<f64>>,
    /// ADD correctness threshold in meters; no ADD accuracy when unset.
    pub add_threshold: Option<f64>,
    pub predictor: Predictor,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dataset: None,
            checkpoint: None,
            out: "eval".into(),
            label: None,
            split: SplitChoice::Test,
            seed: 0,
            translation_sigma: 0.0,
            thresholds_degrees: None,
            add_threshold: None,
            predictor: Predictor::Model,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Evaluation report files to tabulate.
    pub inputs: Vec<PathBuf>,
    /// Row labels; default to each report's own label.
    pub labels: Option<Vec<String>>,
    pub out: PathBuf,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { inputs: Vec::new(), labels: None, out: "report".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| CliError::Config(format!("[camera] {e}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::parse(&text, &base).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn train_dataset(&self) -> PathBuf {
        self.resolve(self.train.dataset.as_ref().unwrap_or(&self.data.dir))
    }

    pub fn eval_dataset(&self) -> PathBuf {
        self.resolve(self.eval.dataset.as_ref().unwrap_or(&self.data.dir))
    }

    pub fn eval_checkpoint(&self) -> PathBuf {
        match &self.eval.checkpoint {
            Some(p) => self.resolve(p),
            None => self.resolve(&self.train.out).join(crate::formats::BEST_CHECKPOINT),
        }
    }

    /// Canonical TOML of the effective configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of [`RunConfig::canonical`], hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_has_documented_defaults() {
        let cfg = RunConfig::parse("", Path::new("")).unwrap();
        assert_eq!(cfg.model.num_points, 256);
        assert_eq!(cfg.model.k, 10);
        assert_eq!(cfg.train.lr, 0.008);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.model.channel_mode, ChannelMode::Xyz);
        assert_eq!(cfg.eval.translation_sigma, 0.0);
        let spec = cfg.model.spec().unwrap();
        assert_eq!(spec, ArchitectureSpec::pointnet());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("[train]\nlearning_rate = 0.1\n", Path::new("")).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = RunConfig::parse("[data.train]\nlow = 1\nhigh = 2\n", Path::new("")).unwrap_err();
        assert!(err.to_string().contains("high"), "{err}");
        let err = RunConfig::parse("[gpu]\n", Path::new("")).unwrap_err();
        assert!(err.to_string().contains("gpu"), "{err}");
    }

    #[test]
    fn model_section_overrides_widths() {
        let cfg = RunConfig::parse(
            "[model]\nvariant = \"dg\"\npoint_mlp_dims = [8, 16]\nglobal_feature_dim = 32\nhead_dims = [16, 3]\nk = 4\n",
            Path::new(""),
        )
        .unwrap();
        let spec = cfg.model.spec().unwrap();
        assert_eq!(spec.variant, Variant::DynamicGraph);
        assert_eq!((spec.point_mlp_dims, spec.global_feature_dim, spec.k), (vec![8, 16], 32, 4));
        let bad = RunConfig::parse("[model]\nhead_dims = [16, 4]\n", Path::new("")).unwrap();
        assert!(matches!(bad.model.spec(), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_tracks_effective_values() {
        let a = RunConfig::parse("[data]\nseed = 1\n", Path::new("")).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.data.seed = 2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let cfg = RunConfig::parse("[data]\ndir = \"d\"\n", Path::new("/tmp/x")).unwrap();
        assert_eq!(cfg.train_dataset(), PathBuf::from("/tmp/x/d"));
        assert_eq!(cfg.eval_checkpoint(), PathBuf::from("/tmp/x/run/checkpoint-best.json"));
    }
}
