//! Staged training, evaluation grid and reports.

mod eval;
mod gradcheck;
mod report;
mod train;

pub use eval::{evaluate, layerdrop_probe, ASYMMETRIC, EstimatorComparison, EvalReport, EvalRow, TraceLine};
pub use gradcheck::{gradcheck_suite, CheckResult, SuiteReport};
pub use report::{read_report, write_metrics_csv, write_outputs, write_traces, write_utilization_csv};
pub use train::{fusion_init, load_stage, train_stage, StageLog, STAGES};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::controller::ControllerError;
use crate::cost::{CostError, CostModel};
use crate::data::{DataError, SceneParams};
use crate::net::{ModelSpec, NetError};
use crate::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("stage {stage} needs checkpoint {path}; train the earlier stage first or pass the override flag")]
    MissingCheckpoint { stage: usize, path: PathBuf },
    #[error("unknown stage {0}; stages are 1..=5")]
    UnknownStage(usize),
    #[error("gradient leaked into frozen parameter `{name}` (max |grad| = {value:e}) during stage {stage}")]
    GradientLeak { stage: usize, name: String, value: f64 },
    #[error("budget {budget} exceeds the {layers} backbone layers")]
    BudgetTooLarge { budget: usize, layers: usize },
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneParams,
    pub train_samples: usize,
    /// Severity range of corrupted training scenes (stages 3 to 5).
    pub train_severity: [f64; 2],
    /// Train the fused backbone (stage 2) on corrupted scenes too.
    pub corrupt_fusion: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneParams::default(),
            train_samples: 256,
            train_severity: [0.4, 1.0],
            corrupt_fusion: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpochConfig {
    pub unimodal: usize,
    pub fusion: usize,
    pub controller: usize,
    pub skipgate: usize,
    pub prune_soft: usize,
    pub prune_hard: usize,
}

impl Default for EpochConfig {
    fn default() -> Self {
        EpochConfig {
            unimodal: 20,
            fusion: 12,
            controller: 16,
            skipgate: 16,
            prune_soft: 16,
            prune_hard: 16,
        }
    }
}

/// What stage 5's hard phase trains besides the pruner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadRetrain {
    /// Every head parameter.
    Full,
    /// Only the per-modality token projections; the shared bias stays.
    Projection,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Optimizer settings of stage 3.
    pub controller_lr: f64,
    pub controller_batch_size: usize,
    /// Learning rate of stage 4.
    pub skipgate_lr: f64,
    pub epochs: EpochConfig,
    /// Weight of the corruption-classification loss.
    pub alpha1: f64,
    /// Weight of the SkipGate utilization hinge.
    pub alpha2: f64,
    /// Weight of the kept-token count.
    pub alpha3: f64,
    /// Hinge offset of the SkipGate utilization loss.
    pub beta: f64,
    /// Per-modality hinge scale; defaults to each backbone's depth.
    pub beta_m: Option<Vec<f64>>,
    pub layerdrop_rate: f64,
    pub modality_dropout: f64,
    /// Initial controller temperature, divided by the epoch number.
    pub tau_controller: f64,
    /// Initial SkipGate temperature, divided by the epoch number.
    pub tau_skipgate: f64,
    pub tau_floor: f64,
    pub gumbel_noise: bool,
    pub detach_z: bool,
    pub head_retrain: HeadRetrain,
    /// Also train the straight-through baseline controller in stage 3.
    pub train_baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            controller_lr: 3e-3,
            controller_batch_size: 8,
            skipgate_lr: 3e-3,
            epochs: EpochConfig::default(),
            alpha1: 1.0,
            alpha2: 0.0025,
            alpha3: 2e-4,
            beta: 2.0,
            beta_m: None,
            layerdrop_rate: 0.2,
            modality_dropout: 0.1,
            tau_controller: 0.5,
            tau_skipgate: 0.25,
            tau_floor: 0.05,
            gumbel_noise: true,
            detach_z: false,
            head_retrain: HeadRetrain::Full,
            train_baseline: true,
        }
    }
}

impl TrainConfig {
    pub fn tau(&self, base: f64, epoch: usize) -> f64 {
        (base / epoch.max(1) as f64).max(self.tau_floor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples_per_cell: usize,
    /// Severity range of corrupted evaluation scenes.
    pub severity: [f64; 2],
    /// Traces written per grid cell (the first samples of the cell).
    pub traces_per_cell: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_cell: 500,
            severity: [0.7, 1.0],
            traces_per_cell: 4,
        }
    }
}

/// Everything a run depends on. Stored as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSpec,
    pub cost: CostModel,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            model: ModelSpec::default(),
            cost: CostModel::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| HarnessError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|message| HarnessError::Config {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| HarnessError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.model.backbone.validate().map_err(|e| e.to_string())?;
        self.cost.validate().map_err(|e| e.to_string())?;
        let m = self.model.backbone.modalities();
        if m != 2 {
            return Err(format!("scenes have two modalities, backbone has {m}"));
        }
        if self.cost.layer_cost.len() != m {
            return Err(format!("cost.layer_cost needs {m} entries"));
        }
        if let Some(bm) = &self.train.beta_m {
            if bm.len() != m || bm.iter().any(|&v| v <= 0.0) {
                return Err(format!("train.beta_m needs {m} positive entries"));
            }
        }
        let total = self.model.backbone.total_layers();
        if let Some(&b) = self.model.controller.budgets.iter().find(|&&b| b > total || b < m) {
            return Err(format!("budget {b} outside [{m}, {total}]"));
        }
        if self.model.backbone.grid_height != self.data.scene.height || self.model.backbone.grid_width != self.data.scene.width {
            return Err("model grid and scene grid differ".into());
        }
        if self.train.batch_size == 0 || self.train.controller_batch_size == 0 || self.data.train_samples == 0 {
            return Err("batch size and training set must be non-empty".into());
        }
        Ok(())
    }

    pub fn beta_m(&self) -> Vec<f64> {
        self.train
            .beta_m
            .clone()
            .unwrap_or_else(|| self.model.backbone.layers.iter().map(|&l| l as f64).collect())
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }
}

/// Trains stages 1 to 5 in order, evaluates the grid and writes every output
/// file into the run directory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<EvalReport> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    cfg.save(&cfg.path("config.toml"))?;
    for stage in STAGES {
        train_stage(cfg, stage, false)?;
    }
    let (report, traces) = evaluate(cfg)?;
    write_outputs(&report, &cfg.out_dir)?;
    write_traces(&traces, &cfg.path("traces.jsonl"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let cfg = RunConfig::default();
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
        std::fs::write(&path, "seed = 7\n[train]\nalpha3 = 0.0\n").unwrap();
        let partial = RunConfig::load(&path).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.train.alpha3, 0.0);
        assert_eq!(partial.train.alpha2, 0.0025);
        std::fs::write(&path, "sed = 7\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(HarnessError::Config { .. })));
    }

    #[test]
    fn temperature_schedule() {
        let t = TrainConfig::default();
        assert_eq!(t.tau(0.5, 1), 0.5);
        assert_eq!(t.tau(0.5, 5), 0.1);
        assert_eq!(t.tau(0.5, 20), 0.05);
        assert_eq!(RunConfig::default().beta_m(), vec![8.0, 12.0]);
    }
}
