//! The run configuration: one TOML document in which every field has a
//! default. The resolved form, with derived seeds filled in, is hashed and
//! echoed next to every artifact.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hypowatch_core::classical::{ForestParams, GbtParams, KnnParams, LogisticParams};
use hypowatch_core::dataset::{Modality, WindowConfig};
use hypowatch_core::eval::BootstrapCfg;
use hypowatch_core::features::FeatureParams;
use hypowatch_core::preprocess::PreprocessConfig;
use hypowatch_core::rng::derive_seed;
use hypowatch_core::synthgen::SimConfig;
use hypowatch_nn::model::{CnnSpec, MlpSpec, TcnSpec};
use hypowatch_nn::{Family, TrainOpts, Weighting};

use crate::CliError;

/// Sub-stream indices under the master seed.
const COHORT_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
pub const MODEL_STREAM: u64 = 2;
const BOOTSTRAP_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    /// A `manifest.csv` as written by `simulate`, or a directory holding one.
    Csv,
    /// A directory of per-patient XML files.
    Ohio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataCfg {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Cohort size for the synthetic source.
    pub subjects: usize,
    /// Seed of the synthetic cohort; derived from the master seed if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub sim: SimConfig,
}

impl Default for DataCfg {
    fn default() -> Self {
        Self { source: DataSource::Synthetic, path: None, subjects: 12, seed: None, sim: SimConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Prevalence-stratified fractional split, or leave-one-subject-out when
    /// there are fewer than three subjects.
    Stratified,
    Loso,
    /// Partitions listed in the config.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCfg {
    pub mode: SplitMode,
    pub fractions: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Default for SplitCfg {
    fn default() -> Self {
        Self {
            mode: SplitMode::Stratified,
            fractions: [0.8, 0.1, 0.1],
            seed: None,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicalCfg {
    pub weighting: Weighting,
    pub lr: LogisticParams,
    pub knn: KnnParams,
    pub rf: ForestParams,
    pub gbt: GbtParams,
}

impl Default for ClassicalCfg {
    fn default() -> Self {
        Self {
            weighting: Weighting::Balanced,
            lr: LogisticParams::default(),
            knn: KnnParams::default(),
            rf: ForestParams::default(),
            gbt: GbtParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalCfg {
    pub hidden: usize,
    pub cnn: CnnSpec,
    pub tcn: TcnSpec,
    pub mlp: MlpSpec,
    /// `train.seed` is replaced per model and modality during a run.
    pub train: TrainOpts,
}

impl Default for TemporalCfg {
    fn default() -> Self {
        Self {
            hidden: 32,
            cnn: CnnSpec::default(),
            tcn: TcnSpec::default(),
            mlp: MlpSpec::default(),
            train: TrainOpts::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    Weighted,
    Stack,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Fixed { value: f64 },
    /// Maximize validation F1; falls back to 0.5 without validation data.
    TuneOnVal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCfg {
    /// `bootstrap.seed` is derived from the master seed.
    pub bootstrap: BootstrapCfg,
    pub threshold: ThresholdPolicy,
}

impl Default for EvalCfg {
    fn default() -> Self {
        Self { bootstrap: BootstrapCfg::default(), threshold: ThresholdPolicy::Fixed { value: 0.5 } }
    }
}

/// A modality selector: the three input modalities plus late fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalitySel {
    GsrOnly,
    HrOnly,
    FusedEarly,
    LateFusion,
}

impl ModalitySel {
    pub const ALL: [ModalitySel; 4] =
        [ModalitySel::GsrOnly, ModalitySel::HrOnly, ModalitySel::FusedEarly, ModalitySel::LateFusion];

    pub fn input(self) -> Option<Modality> {
        match self {
            ModalitySel::GsrOnly => Some(Modality::GsrOnly),
            ModalitySel::HrOnly => Some(Modality::HrOnly),
            ModalitySel::FusedEarly => Some(Modality::FusedEarly),
            ModalitySel::LateFusion => None,
        }
    }
}

pub const LATE_FUSION_NAME: &str = "GSR & HR (late)";

/// A model family named in `models`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Lr,
    Knn,
    Rf,
    Gbt,
    Net(Family),
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LR" => Some(ModelKind::Lr),
            "KNN" => Some(ModelKind::Knn),
            "RF" => Some(ModelKind::Rf),
            "GBT" => Some(ModelKind::Gbt),
            other => Family::parse(other).map(ModelKind::Net),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lr => "LR",
            ModelKind::Knn => "KNN",
            ModelKind::Rf => "RF",
            ModelKind::Gbt => "GBT",
            ModelKind::Net(f) => f.name(),
        }
    }

    /// Stable code used to derive per-model seeds.
    pub fn code(self) -> u64 {
        match self {
            ModelKind::Lr => 0,
            ModelKind::Knn => 1,
            ModelKind::Rf => 2,
            ModelKind::Gbt => 3,
            ModelKind::Net(Family::Mlp) => 4,
            ModelKind::Net(Family::Cnn1d) => 5,
            ModelKind::Net(Family::Lstm) => 6,
            ModelKind::Net(Family::Gru) => 7,
            ModelKind::Net(Family::Tcn) => 8,
        }
    }

    /// Whether the model consumes handcrafted feature vectors.
    pub fn uses_features(self) -> bool {
        !matches!(self, ModelKind::Net(f) if f.is_sequence())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub models: Vec<String>,
    pub modalities: Vec<ModalitySel>,
    pub data: DataCfg,
    pub preprocess: PreprocessConfig,
    pub window: WindowConfig,
    pub split: SplitCfg,
    pub features: FeatureParams,
    pub classical: ClassicalCfg,
    pub temporal: TemporalCfg,
    pub fusion: FusionRule,
    pub eval: EvalCfg,
    /// Output directory; not part of the hashed configuration.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            models: vec!["LR".into(), "GBT".into(), "LSTM".into()],
            modalities: vec![ModalitySel::GsrOnly, ModalitySel::HrOnly, ModalitySel::FusedEarly],
            data: DataCfg::default(),
            preprocess: PreprocessConfig::default(),
            window: WindowConfig::default(),
            split: SplitCfg::default(),
            features: FeatureParams::default(),
            classical: ClassicalCfg::default(),
            temporal: TemporalCfg::default(),
            fusion: FusionRule::Weighted,
            eval: EvalCfg::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn model_kinds(&self) -> Result<Vec<ModelKind>, CliError> {
        self.models
            .iter()
            .map(|m| ModelKind::parse(m).ok_or_else(|| CliError::Config(format!("models: unknown model {m:?}"))))
            .collect()
    }

    /// Fill derived seeds and check every section. Resolution is idempotent.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let bad = |field: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{field}: {e}"));
        self.data.seed.get_or_insert(derive_seed(self.seed, COHORT_STREAM));
        self.split.seed.get_or_insert(derive_seed(self.seed, SPLIT_STREAM));
        self.eval.bootstrap.seed = derive_seed(self.seed, BOOTSTRAP_STREAM);
        self.temporal.train.seed = derive_seed(self.seed, MODEL_STREAM);

        if self.models.is_empty() {
            return Err(CliError::Config("models: at least one model required".into()));
        }
        self.model_kinds()?;
        if self.modalities.is_empty() {
            return Err(CliError::Config("modalities: at least one modality required".into()));
        }
        self.modalities.sort();
        self.modalities.dedup();
        match self.data.source {
            DataSource::Synthetic => {
                self.data.sim.validate().map_err(|e| bad("data.sim", &e))?;
                if self.data.subjects == 0 {
                    return Err(CliError::Config("data.subjects must be >= 1".into()));
                }
            }
            DataSource::Csv | DataSource::Ohio if self.data.path.is_none() => {
                return Err(CliError::Config("data.path is required for csv and ohio sources".into()));
            }
            _ => {}
        }
        self.preprocess.filter.validate().map_err(|e| bad("preprocess.filter", &e))?;
        self.preprocess.eda.validate().map_err(|e| bad("preprocess.eda", &e))?;
        if self.window.length == 0 || self.window.stride == 0 {
            return Err(CliError::Config("window.length and window.stride must be >= 1".into()));
        }
        self.eval.bootstrap.validate().map_err(|e| bad("eval.bootstrap", &e))?;
        if let ThresholdPolicy::Fixed { value } = self.eval.threshold {
            if !(0.0..=1.0).contains(&value) {
                return Err(CliError::Config(format!("eval.threshold.value must lie in [0, 1], got {value}")));
            }
        }
        let t = &self.temporal.train;
        if !(t.lr >= 0.0) || t.batch_size == 0 || !(0.0..1.0).contains(&t.momentum) {
            return Err(CliError::Config(
                "temporal.train: lr >= 0, batch_size >= 1 and momentum in [0, 1) required".into(),
            ));
        }
        if self.split.mode == SplitMode::Explicit && (self.split.train.is_empty() || self.split.test.is_empty()) {
            return Err(CliError::Config("split: explicit mode needs train and test subjects".into()));
        }
        Ok(self)
    }

    /// Canonical TOML text of the resolved configuration.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// SHA-256 of [`Self::to_toml`], hex encoded.
    pub fn hash(&self) -> Result<String, CliError> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Per-model training seed, stable under adding or removing other models.
    pub fn model_seed(&self, kind: ModelKind, modality: Modality) -> u64 {
        let m = Modality::ALL.iter().position(|x| *x == modality).unwrap_or(0) as u64;
        derive_seed(self.temporal.train.seed, kind.code() * 8 + m)
    }
}
