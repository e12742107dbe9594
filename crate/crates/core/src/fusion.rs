//! Decision-level fusion of per-modality probability streams.
//!
//! Only probability vectors enter here; early fusion of raw sequences is
//! done when batches are assembled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classical::logistic::{train_logistic, LogisticParams};
use crate::classical::{sigmoid, ClassWeights, ClassicalError};
use crate::dataset::Partition;
use crate::eval::{confusion, metrics};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("stream lengths differ: gsr {gsr}, hr {hr}, labels {labels:?}")]
    LengthMismatch { gsr: usize, hr: usize, labels: Option<usize> },
    #[error("weight {0} outside [0, 1]")]
    BadWeight(f64),
    #[error(transparent)]
    Stack(#[from] ClassicalError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LateFusion {
    WeightedAverage { w: f64 },
    LogisticStack { intercept: f64, coef_gsr: f64, coef_hr: f64 },
}

impl LateFusion {
    pub fn name(&self) -> &'static str {
        match self {
            Self::WeightedAverage { .. } => "late-weighted",
            Self::LogisticStack { .. } => "late-stack",
        }
    }

    pub fn apply(&self, p_gsr: &[f64], p_hr: &[f64]) -> Result<Vec<f64>, FusionError> {
        match *self {
            Self::WeightedAverage { w } => fuse_weighted(p_gsr, p_hr, w),
            Self::LogisticStack { intercept, coef_gsr, coef_hr } => {
                check(p_gsr, p_hr, None)?;
                Ok(p_gsr.iter().zip(p_hr).map(|(g, h)| sigmoid(intercept + coef_gsr * g + coef_hr * h)).collect())
            }
        }
    }
}

fn check(p_gsr: &[f64], p_hr: &[f64], labels: Option<&[f64]>) -> Result<(), FusionError> {
    let n = p_gsr.len();
    if p_hr.len() != n || labels.is_some_and(|l| l.len() != n) {
        return Err(FusionError::LengthMismatch { gsr: n, hr: p_hr.len(), labels: labels.map(<[f64]>::len) });
    }
    Ok(())
}

/// `w * p_gsr + (1 - w) * p_hr` elementwise.
pub fn fuse_weighted(p_gsr: &[f64], p_hr: &[f64], w: f64) -> Result<Vec<f64>, FusionError> {
    check(p_gsr, p_hr, None)?;
    if !(0.0..=1.0).contains(&w) {
        return Err(FusionError::BadWeight(w));
    }
    Ok(p_gsr.iter().zip(p_hr).map(|(g, h)| w * g + (1.0 - w) * h).collect())
}

/// Weight in `{0, 0.05, ..., 1}` maximizing F1 at threshold 0.5; ties go to
/// the smaller weight.
pub fn fit_weight(p_gsr: &[f64], p_hr: &[f64], labels: &[f64]) -> Result<f64, FusionError> {
    check(p_gsr, p_hr, Some(labels))?;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..=20 {
        let w = k as f64 / 20.0;
        let fused = fuse_weighted(p_gsr, p_hr, w)?;
        let f1 = metrics(&confusion(&fused, labels, 0.5).expect("lengths checked")).f1;
        if f1 > best.0 {
            best = (f1, w);
        }
    }
    Ok(best.1)
}

pub fn stack_params() -> LogisticParams {
    LogisticParams { epochs: 1000, lr: 0.5, ..Default::default() }
}

/// Class-weighted two-feature logistic regression on the raw probabilities.
pub fn fit_stack(p_gsr: &[f64], p_hr: &[f64], labels: &[f64]) -> Result<LateFusion, FusionError> {
    check(p_gsr, p_hr, Some(labels))?;
    let x: Vec<Vec<f64>> = p_gsr.iter().zip(p_hr).map(|(&g, &h)| vec![g, h]).collect();
    let m = train_logistic(&x, labels, ClassWeights::balanced(labels), &stack_params())?;
    Ok(LateFusion::LogisticStack { intercept: m.intercept, coef_gsr: m.coef[0], coef_hr: m.coef[1] })
}

/// A fusion rule with the partition it was fit on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedFusion {
    pub rule: LateFusion,
    pub fit_partition: Partition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedScores {
    pub probs: Vec<f64>,
    /// Set when the rule is scored on the partition it was fit on.
    pub leakage: Option<String>,
}

impl FittedFusion {
    pub fn apply(&self, p_gsr: &[f64], p_hr: &[f64], partition: Partition) -> Result<FusedScores, FusionError> {
        let leakage = (partition == self.fit_partition).then(|| {
            format!("leakage: {} fit and scored on the {:?} partition", self.rule.name(), partition)
        });
        Ok(FusedScores { probs: self.rule.apply(p_gsr, p_hr)?, leakage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn weighted_examples() {
        assert_eq!(fuse_weighted(&[0.2, 0.9], &[0.6, 0.1], 1.0).unwrap(), vec![0.2, 0.9]);
        assert_eq!(fuse_weighted(&[0.2], &[0.6], 0.5).unwrap(), vec![0.4]);
        assert!(matches!(fuse_weighted(&[0.2], &[0.6, 0.1], 0.5), Err(FusionError::LengthMismatch { .. })));
        assert_eq!(fuse_weighted(&[0.2], &[0.6], 1.5), Err(FusionError::BadWeight(1.5)));
    }

    proptest! {
        #[test]
        fn weighted_is_bounded_and_monotone(
            g in 0.0f64..1.0, h in 0.0f64..1.0, d in 0.0f64..0.5, w in 0.0f64..=1.0
        ) {
            let f = fuse_weighted(&[g], &[h], w).unwrap()[0];
            prop_assert!(f >= g.min(h) - 1e-15 && f <= g.max(h) + 1e-15);
            let fg = fuse_weighted(&[(g + d).min(1.0)], &[h], w).unwrap()[0];
            let fh = fuse_weighted(&[g], &[(h + d).min(1.0)], w).unwrap()[0];
            prop_assert!(fg >= f && fh >= f);
        }
    }

    #[test]
    fn perfect_gsr_stream_gets_smallest_perfect_weight() {
        let mut rng = rng_from_seed(5);
        let labels: Vec<f64> = (0..200).map(|i| (i % 7 == 0) as u8 as f64).collect();
        let p_gsr: Vec<f64> = labels.iter().map(|&y| if y > 0.5 { 0.9 } else { 0.1 }).collect();
        let p_hr: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Oracle: evaluate the grid by hand and find the first maximizer.
        let f1_at = |w: f64| {
            let fused: Vec<f64> = p_gsr.iter().zip(&p_hr).map(|(g, h)| w * g + (1.0 - w) * h).collect();
            metrics(&confusion(&fused, &labels, 0.5).unwrap()).f1
        };
        assert_eq!(f1_at(1.0), 1.0);
        let w = fit_weight(&p_gsr, &p_hr, &labels).unwrap();
        assert_eq!(f1_at(w), 1.0);
        assert!((0..=20).map(|k| k as f64 / 20.0).filter(|&v| v < w).all(|v| f1_at(v) < 1.0));
        // Below w = 5/9 a negative with p_hr near 1 still crosses 0.5.
        assert!(w > 0.5);
    }

    #[test]
    fn identical_streams_pick_zero() {
        let p = [0.1, 0.7, 0.4, 0.9];
        assert_eq!(fit_weight(&p, &p, &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn stack_with_duplicate_streams_matches_single_input_fit() {
        let mut rng = rng_from_seed(9);
        let labels: Vec<f64> = (0..150).map(|i| (i % 6 == 0) as u8 as f64).collect();
        let p: Vec<f64> = labels.iter().map(|&y| (0.3 * y + rng.gen_range(0.0..0.7f64)).min(1.0)).collect();
        let stack = fit_stack(&p, &p, &labels).unwrap();
        // Symmetric gradient descent keeps both coefficients equal, which is
        // one input scaled by sqrt(2) under the same penalty.
        let x: Vec<Vec<f64>> = p.iter().map(|&v| vec![v * 2f64.sqrt()]).collect();
        let single = train_logistic(&x, &labels, ClassWeights::balanced(&labels), &stack_params()).unwrap();
        let a = stack.apply(&p, &p).unwrap();
        let b = single.predict_proba(&x);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn all_negative_stack_predicts_negative() {
        let p: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        let s = fit_stack(&p, &p, &[0.0; 50]).unwrap();
        assert!(s.apply(&p, &p).unwrap().iter().all(|&v| v < 0.5));
    }

    #[test]
    fn scoring_on_fit_partition_is_flagged() {
        let f = FittedFusion { rule: LateFusion::WeightedAverage { w: 0.5 }, fit_partition: Partition::Val };
        assert!(f.apply(&[0.1], &[0.2], Partition::Val).unwrap().leakage.is_some());
        assert!(f.apply(&[0.1], &[0.2], Partition::Test).unwrap().leakage.is_none());
    }
}
