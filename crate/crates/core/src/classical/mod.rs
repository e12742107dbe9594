//! Classical learners on handcrafted feature rows: weighted logistic
//! regression, k-nearest neighbours, a random forest and second-order
//! gradient-boosted trees. Every model outputs probabilities in `[0, 1]`;
//! thresholding is left to evaluation.

pub mod gbt;
pub mod knn;
pub mod logistic;
pub mod tree;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gbt::{train_gbt, GbtModel, GbtParams};
pub use knn::{knn_predict, KnnModel, KnnParams};
pub use logistic::{train_logistic, LogisticModel, LogisticParams};
pub use tree::{train_forest, ForestModel, ForestParams};

/// Version of the serialized model document layout.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ClassicalError {
    #[error("no training rows")]
    EmptyTraining,
    #[error("row {row} has {found} features, expected {expected}")]
    ShapeMismatch { row: usize, expected: usize, found: usize },
    #[error("{rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidParams(String),
    #[error("model document: {0}")]
    Document(String),
}

/// Per-class loss weights. `w_pos = n_neg / n_pos` on training labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_pos: f64,
    pub w_neg: f64,
}

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights { w_pos: 1.0, w_neg: 1.0 };

    /// Balanced weights; falls back to uniform when a class is absent.
    pub fn balanced(y: &[f64]) -> Self {
        let n_pos = y.iter().filter(|&&v| v > 0.5).count();
        let n_neg = y.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Self::UNIFORM;
        }
        Self { w_pos: n_neg as f64 / n_pos as f64, w_neg: 1.0 }
    }

    pub fn of(&self, label: f64) -> f64 {
        if label > 0.5 {
            self.w_pos
        } else {
            self.w_neg
        }
    }
}

/// Column-wise z-scoring fitted on training rows. Constant columns get
/// scale 1 so they map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self, ClassicalError> {
        let d = check_rows(x)?;
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in x {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / (n - 1.0).max(1.0)).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn transform(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect())
            .collect()
    }
}

/// Check that all rows share one width and return it.
pub(crate) fn check_rows(x: &[Vec<f64>]) -> Result<usize, ClassicalError> {
    let d = x.first().ok_or(ClassicalError::EmptyTraining)?.len();
    for (row, r) in x.iter().enumerate() {
        if r.len() != d {
            return Err(ClassicalError::ShapeMismatch { row, expected: d, found: r.len() });
        }
    }
    Ok(d)
}

pub(crate) fn check_xy(x: &[Vec<f64>], y: &[f64]) -> Result<usize, ClassicalError> {
    if x.len() != y.len() {
        return Err(ClassicalError::LengthMismatch { rows: x.len(), labels: y.len() });
    }
    check_rows(x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Hyperparameters of one classical family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ClassicalSpec {
    Logistic(LogisticParams),
    Knn(KnnParams),
    Forest(ForestParams),
    Gbt(GbtParams),
}

impl ClassicalSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ClassicalSpec::Logistic(_) => "LR",
            ClassicalSpec::Knn(_) => "KNN",
            ClassicalSpec::Forest(_) => "RF",
            ClassicalSpec::Gbt(_) => "GBT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ClassicalModel {
    Logistic(LogisticModel),
    Knn(KnnModel),
    Forest(ForestModel),
    Gbt(GbtModel),
}

impl ClassicalModel {
    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Vec<f64> {
        match self {
            ClassicalModel::Logistic(m) => m.predict_proba(x),
            ClassicalModel::Knn(m) => m.predict_proba(x),
            ClassicalModel::Forest(m) => m.predict_proba(x),
            ClassicalModel::Gbt(m) => m.predict_proba(x),
        }
    }
}

/// A standardizer plus the model trained on standardized rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedClassical {
    pub spec: ClassicalSpec,
    pub class_weights: ClassWeights,
    pub standardizer: Standardizer,
    pub model: ClassicalModel,
}

impl FittedClassical {
    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Vec<f64> {
        self.model.predict_proba(&self.standardizer.transform(x))
    }

    /// Versioned JSON document with sorted keys.
    pub fn to_document(&self) -> Result<String, ClassicalError> {
        to_document(self)
    }

    pub fn from_document(s: &str) -> Result<Self, ClassicalError> {
        from_document(s)
    }
}

#[derive(Serialize, Deserialize)]
struct Document<T> {
    format_version: u32,
    model: T,
}

/// Serialize through `serde_json::Value`, whose maps are ordered, so key
/// order is deterministic regardless of struct field order.
pub fn to_document<T: Serialize>(model: &T) -> Result<String, ClassicalError> {
    let v = serde_json::to_value(Document { format_version: MODEL_FORMAT_VERSION, model })
        .map_err(|e| ClassicalError::Document(e.to_string()))?;
    serde_json::to_string_pretty(&v).map_err(|e| ClassicalError::Document(e.to_string()))
}

pub fn from_document<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, ClassicalError> {
    let d: Document<T> = serde_json::from_str(s).map_err(|e| ClassicalError::Document(e.to_string()))?;
    if d.format_version != MODEL_FORMAT_VERSION {
        return Err(ClassicalError::Document(format!("unsupported format version {}", d.format_version)));
    }
    Ok(d.model)
}

/// Standardize, then train `spec`. `weights` applies to the loss-based
/// learners (logistic, forest, GBT); KNN votes are unweighted.
pub fn train_classical(
    spec: &ClassicalSpec,
    x_train: &[Vec<f64>],
    y_train: &[f64],
    val: Option<(&[Vec<f64>], &[f64])>,
    weights: ClassWeights,
    seed: u64,
) -> Result<FittedClassical, ClassicalError> {
    check_xy(x_train, y_train)?;
    let standardizer = Standardizer::fit(x_train)?;
    let xs = standardizer.transform(x_train);
    let val_s = val.map(|(x, y)| (standardizer.transform(x), y));
    let model = match spec {
        ClassicalSpec::Logistic(p) => ClassicalModel::Logistic(train_logistic(&xs, y_train, weights, p)?),
        ClassicalSpec::Knn(p) => ClassicalModel::Knn(KnnModel::fit(&xs, y_train, p)?),
        ClassicalSpec::Forest(p) => ClassicalModel::Forest(train_forest(&xs, y_train, weights, p, seed)?),
        ClassicalSpec::Gbt(p) => {
            let v = val_s.as_ref().map(|(x, y)| (x.as_slice(), *y));
            ClassicalModel::Gbt(train_gbt(&xs, y_train, v, weights.w_pos / weights.w_neg, p)?)
        }
    };
    Ok(FittedClassical { spec: spec.clone(), class_weights: weights, standardizer, model })
}
