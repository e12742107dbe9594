//! k-nearest-neighbour vote with Euclidean distance. Equal distances are
//! ordered by training-row index.

use serde::{Deserialize, Serialize};

use super::{check_xy, ClassicalError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnParams {
    pub k: usize,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self { k: 5 }
    }
}

/// KNN keeps its (standardized) training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl KnnModel {
    pub fn fit(x: &[Vec<f64>], y: &[f64], p: &KnnParams) -> Result<Self, ClassicalError> {
        check_xy(x, y)?;
        if p.k == 0 || p.k > x.len() {
            return Err(ClassicalError::InvalidParams(format!("k = {} with {} training rows", p.k, x.len())));
        }
        Ok(Self { k: p.k, x: x.to_vec(), y: y.to_vec() })
    }

    pub fn predict_proba(&self, q: &[Vec<f64>]) -> Vec<f64> {
        let mut buf: Vec<(f64, usize)> = Vec::with_capacity(self.x.len());
        q.iter()
            .map(|row| {
                buf.clear();
                buf.extend(self.x.iter().enumerate().map(|(i, r)| {
                    let d2: f64 = r.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2, i)
                }));
                let k = self.k;
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if k < buf.len() {
                    buf.select_nth_unstable_by(k - 1, cmp);
                }
                let pos = buf[..k].iter().filter(|(_, i)| self.y[*i] > 0.5).count();
                pos as f64 / k as f64
            })
            .collect()
    }
}

pub fn knn_predict(
    x_train: &[Vec<f64>],
    y_train: &[f64],
    p: &KnnParams,
    x_query: &[Vec<f64>],
) -> Result<Vec<f64>, ClassicalError> {
    Ok(KnnModel::fit(x_train, y_train, p)?.predict_proba(x_query))
}
