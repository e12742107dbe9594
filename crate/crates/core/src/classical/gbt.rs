//! Second-order gradient boosting on the logistic loss with exact greedy
//! splits.
//!
//! Positives carry weight `pos_weight` in both gradient and hessian. Leaf
//! values are `-lr * G / (H + lambda)`; the initial score is the log-odds of
//! the weighted prevalence.

use serde::{Deserialize, Serialize};

use super::logistic::logloss_from_logit;
use super::tree::{grow_tree, Criterion, Presorted, Tree, TreeParams};
use super::{check_rows, check_xy, sigmoid, ClassicalError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub rounds: usize,
    pub lr: f64,
    pub max_depth: usize,
    pub lambda: f64,
    pub early_stop_patience: usize,
    pub min_child_hess: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self { rounds: 300, lr: 0.1, max_depth: 4, lambda: 1.0, early_stop_patience: 20, min_child_hess: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub base_score: f64,
    /// Trees whose leaves already include the learning rate.
    pub trees: Vec<Tree>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_round: usize,
}

impl GbtModel {
    pub fn score_row(&self, r: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict_row(r)).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|r| sigmoid(self.score_row(r))).collect()
    }
}

/// `log(W_pos / W_neg)` of the weighted class masses.
pub fn initial_score(y: &[f64], pos_weight: f64) -> f64 {
    let wp: f64 = y.iter().filter(|&&v| v > 0.5).count() as f64 * pos_weight;
    let wn = y.iter().filter(|&&v| v <= 0.5).count() as f64;
    match (wp > 0.0, wn > 0.0) {
        (true, true) => (wp / wn).ln(),
        (false, _) => -10.0,
        (_, false) => 10.0,
    }
}

/// Weighted per-sample gradient and hessian of the logistic loss at score `s`.
pub fn grad_hess(s: f64, y: f64, pos_weight: f64) -> (f64, f64) {
    let p = sigmoid(s);
    let w = if y > 0.5 { pos_weight } else { 1.0 };
    (w * (p - y), w * p * (1.0 - p))
}

fn weighted_logloss(scores: &[f64], y: &[f64], pos_weight: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&s, &yi) in scores.iter().zip(y) {
        let w = if yi > 0.5 { pos_weight } else { 1.0 };
        num += w * logloss_from_logit(s, yi);
        den += w;
    }
    num / den
}

pub fn train_gbt(
    x: &[Vec<f64>],
    y: &[f64],
    val: Option<(&[Vec<f64>], &[f64])>,
    pos_weight: f64,
    p: &GbtParams,
) -> Result<GbtModel, ClassicalError> {
    let d = check_xy(x, y)?;
    if let Some((vx, vy)) = val {
        if vx.len() != vy.len() {
            return Err(ClassicalError::LengthMismatch { rows: vx.len(), labels: vy.len() });
        }
        if !vx.is_empty() && check_rows(vx)? != d {
            return Err(ClassicalError::ShapeMismatch { row: 0, expected: d, found: vx[0].len() });
        }
    }
    if !(pos_weight > 0.0 && p.lr > 0.0 && p.lambda >= 0.0) || p.max_depth == 0 {
        return Err(ClassicalError::InvalidParams("pos_weight, lr, max_depth must be positive".into()));
    }
    let n = x.len();
    let data = Presorted::new(x);
    let base_score = initial_score(y, pos_weight);
    let mut scores = vec![base_score; n];
    let val = val.filter(|(vx, _)| !vx.is_empty());
    let mut vscores = val.map(|(vx, _)| vec![base_score; vx.len()]);
    let tp = TreeParams {
        max_depth: p.max_depth,
        min_leaf: 1,
        min_child_b: p.min_child_hess,
        mtry: None,
        min_gain: 1e-12,
    };
    let mult = vec![1u32; n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut trees = Vec::new();
    let mut train_loss = vec![weighted_logloss(&scores, y, pos_weight)];
    let mut val_loss = Vec::new();
    if let (Some((_, vy)), Some(vs)) = (val, &vscores) {
        val_loss.push(weighted_logloss(vs, vy, pos_weight));
    }
    let mut best_round = 0;
    let mut best_val = val_loss.first().copied().unwrap_or(f64::INFINITY);
    for round in 1..=p.rounds {
        for i in 0..n {
            (g[i], h[i]) = grad_hess(scores[i], y[i], pos_weight);
        }
        let (mut tree, _) = grow_tree(&data, &g, &h, &mult, Criterion::Newton { lambda: p.lambda }, tp, None);
        for node in &mut tree.nodes {
            if let super::tree::Node::Leaf { value } = node {
                *value *= p.lr;
            }
        }
        for (s, r) in scores.iter_mut().zip(x) {
            *s += tree.predict_row(r);
        }
        train_loss.push(weighted_logloss(&scores, y, pos_weight));
        trees.push(tree);
        if let (Some((vx, vy)), Some(vs)) = (val, vscores.as_mut()) {
            let t = trees.last().expect("just pushed");
            for (s, r) in vs.iter_mut().zip(vx) {
                *s += t.predict_row(r);
            }
            let l = weighted_logloss(vs, vy, pos_weight);
            val_loss.push(l);
            if l < best_val {
                best_val = l;
                best_round = round;
            } else if round - best_round >= p.early_stop_patience {
                break;
            }
        } else {
            best_round = round;
        }
    }
    trees.truncate(best_round);
    Ok(GbtModel { base_score, trees, train_loss, val_loss, best_round })
}
