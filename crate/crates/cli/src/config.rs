//! Run configuration: a TOML file with one table per stage. Every table and
//! key is optional; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! precision = "f32"
//! threads = 1
//!
//! [synth]
//! count = 250
//! bands = 8
//!
//! [split]
//! fraction = 0.8
//!
//! [solver]
//! lambda_u = 1e-3
//! steps = "auto"          # or set eta_u / eta_v / eta_c
//!
//! [network]
//! features = 8
//! stages = 2
//!
//! [train]
//! learning_rate = 1e-2
//! epochs = 30
//! crop = 32
//!
//! [gradcheck]
//! samples = 200
//!
//! [eval]
//! ratio = 4
//!
//! [paths]
//! manifest = "data/train.jsonl"
//! ```

use std::path::{Path, PathBuf};

use proxpan::dataset::{MsSource, SynthConfig};
use proxpan::model::PriorWeights;
use proxpan::net::NetShape;
use proxpan::solver::{SolverConfig, StepSizes};
use proxpan::train::TrainConfig;
use proxpan::Precision;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds generation, splitting, initialisation and training.
    pub seed: u64,
    pub precision: Precision,
    pub threads: usize,
    pub synth: SynthSection,
    pub split: SplitSection,
    pub solver: SolverSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub gradcheck: GradcheckSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            threads: 1,
            synth: SynthSection::default(),
            split: SplitSection::default(),
            solver: SolverSection::default(),
            network: NetworkSection::default(),
            train: TrainSection::default(),
            gradcheck: GradcheckSection::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub features: usize,
    pub kernel: usize,
    pub ratio: usize,
    pub sparsity: f64,
    pub unique_sparsity: f64,
    pub ms_source: MsSource,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            count: d.count,
            height: d.height,
            width: d.width,
            bands: d.bands,
            features: d.features,
            kernel: d.kernel,
            ratio: d.ratio,
            sparsity: d.sparsity,
            unique_sparsity: d.unique_sparsity,
            ms_source: d.ms_source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { fraction: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Auto,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub lambda_u: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub steps: StepMode,
    pub eta_u: f64,
    pub eta_v: f64,
    pub eta_c: f64,
    pub max_sweeps: usize,
    pub rel_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            lambda_u: d.weights.lambda_u,
            lambda_v: d.weights.lambda_v,
            lambda_c: d.weights.lambda_c,
            steps: StepMode::Auto,
            eta_u: 0.1,
            eta_v: 0.1,
            eta_c: 0.1,
            max_sweeps: d.max_sweeps,
            rel_tol: d.rel_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub features: usize,
    pub kernel: usize,
    pub bands: usize,
    pub prox_kernel: usize,
    pub prox_channels: usize,
    pub stages: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetShape::desk(8);
        Self {
            features: d.features,
            kernel: d.kernel,
            bands: d.bands,
            prox_kernel: d.prox_kernel,
            prox_channels: d.prox_channels,
            stages: d.stages,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            decay_factor: d.decay_factor,
            decay_every: d.decay_every,
            epochs: d.epochs,
            batch_size: d.batch_size,
            crop: d.crop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    /// Number of randomly drawn parameters to perturb.
    pub samples: usize,
    pub perturbation: f64,
    pub tolerance: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            samples: 200,
            perturbation: 1e-5,
            tolerance: 1e-4,
            height: 8,
            width: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ratio: usize,
    /// Bands shown in PPM previews, as red, green, blue.
    pub preview_bands: [usize; 3],
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ratio: 4,
            preview_bands: [0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub pan: Option<PathBuf>,
    pub ms: Option<PathBuf>,
    pub ms_up: Option<PathBuf>,
    pub pan_lr: Option<PathBuf>,
    pub fused: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

impl PathsSection {
    /// Fills every unset path from `other`.
    pub fn override_with(&mut self, other: &PathsSection) {
        let pairs = [
            (&mut self.manifest, &other.manifest),
            (&mut self.checkpoint, &other.checkpoint),
            (&mut self.generator, &other.generator),
            (&mut self.pan, &other.pan),
            (&mut self.ms, &other.ms),
            (&mut self.ms_up, &other.ms_up),
            (&mut self.pan_lr, &other.pan_lr),
            (&mut self.fused, &other.fused),
            (&mut self.reference, &other.reference),
        ];
        for (mine, theirs) in pairs {
            if theirs.is_some() {
                mine.clone_from(theirs);
            }
        }
    }
}

pub fn require<'a>(path: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("missing path `{name}` (flag --{} or [paths] {name})", name.replace('_', "-"))))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            count: s.count,
            height: s.height,
            width: s.width,
            bands: s.bands,
            features: s.features,
            kernel: s.kernel,
            ratio: s.ratio,
            sparsity: s.sparsity,
            unique_sparsity: s.unique_sparsity,
            seed: self.seed,
            ms_source: s.ms_source,
        }
    }

    pub fn solver_config(&self) -> Result<SolverConfig, CliError> {
        let s = &self.solver;
        let weights = PriorWeights::new(s.lambda_u, s.lambda_v, s.lambda_c).map_err(config_err)?;
        let steps = match s.steps {
            StepMode::Auto => StepSizes::Auto,
            StepMode::Explicit => StepSizes::Explicit {
                eta_u: s.eta_u,
                eta_v: s.eta_v,
                eta_c: s.eta_c,
            },
        };
        let cfg = SolverConfig {
            weights,
            steps,
            max_sweeps: s.max_sweeps,
            rel_tol: s.rel_tol,
            track_objective: true,
        };
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    pub fn net_shape(&self) -> Result<NetShape, CliError> {
        let n = &self.network;
        let shape = NetShape {
            features: n.features,
            kernel: n.kernel,
            bands: n.bands,
            prox_kernel: n.prox_kernel,
            prox_channels: n.prox_channels,
            stages: n.stages,
        };
        shape.validate().map_err(config_err)?;
        Ok(shape)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let cfg = TrainConfig {
            learning_rate: t.learning_rate,
            decay_factor: t.decay_factor,
            decay_every: t.decay_every,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            crop: t.crop,
        };
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    /// Checks everything that does not depend on input files.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.threads == 0 {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        self.synth_config().validate().map_err(config_err)?;
        if !(self.split.fraction > 0.0 && self.split.fraction < 1.0) {
            return Err(CliError::Config(format!("split fraction must be in (0, 1), got {}", self.split.fraction)));
        }
        self.solver_config()?;
        self.net_shape()?;
        self.train_config()?;
        let g = &self.gradcheck;
        if !(g.perturbation > 0.0 && g.tolerance > 0.0) || g.height == 0 || g.width == 0 {
            return Err(CliError::Config("gradcheck perturbation, tolerance and size must be positive".into()));
        }
        if self.eval.ratio == 0 {
            return Err(CliError::Config("eval ratio must be >= 1".into()));
        }
        Ok(())
    }
}

fn config_err(e: proxpan::Error) -> CliError {
    CliError::Config(e.to_string())
}
