//! L2-regularized, class-weighted logistic regression by full-batch
//! gradient descent.
//!
//! Loss: `(1/n) sum_i w_i * logloss(y_i, sigmoid(b + x_i . beta)) + (l2/2) |beta|^2`.
//! The intercept is not penalized.

use serde::{Deserialize, Serialize};

use super::{check_xy, sigmoid, ClassWeights, ClassicalError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticParams {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
    pub grad_tol: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self { l2: 1e-3, epochs: 500, lr: 0.1, grad_tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub epochs_run: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn decision(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|r| sigmoid(self.decision(r))).collect()
    }
}

/// Numerically stable `-[y log p + (1-y) log(1-p)]` with `p = sigmoid(z)`.
pub fn logloss_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Loss and gradient; `grad[0]` is the intercept component.
pub fn loss_and_grad(
    x: &[Vec<f64>],
    y: &[f64],
    cw: ClassWeights,
    l2: f64,
    intercept: f64,
    coef: &[f64],
) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let mut grad = vec![0.0; coef.len() + 1];
    let mut loss = 0.0;
    for (r, &yi) in x.iter().zip(y) {
        let w = cw.of(yi);
        let z = intercept + r.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>();
        loss += w * logloss_from_logit(z, yi);
        let e = w * (sigmoid(z) - yi);
        grad[0] += e;
        for (g, v) in grad[1..].iter_mut().zip(r) {
            *g += e * v;
        }
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    for (g, c) in grad[1..].iter_mut().zip(coef) {
        *g += l2 * c;
    }
    loss += 0.5 * l2 * coef.iter().map(|c| c * c).sum::<f64>();
    (loss, grad)
}

pub fn train_logistic(
    x: &[Vec<f64>],
    y: &[f64],
    cw: ClassWeights,
    p: &LogisticParams,
) -> Result<LogisticModel, ClassicalError> {
    let d = check_xy(x, y)?;
    if !(p.lr >= 0.0 && p.l2 >= 0.0) {
        return Err(ClassicalError::InvalidParams("lr and l2 must be >= 0".into()));
    }
    let mut intercept = 0.0;
    let mut coef = vec![0.0; d];
    let mut converged = false;
    let mut epochs_run = 0;
    for _ in 0..p.epochs {
        let (_, g) = loss_and_grad(x, y, cw, p.l2, intercept, &coef);
        if g.iter().all(|v| v.abs() < p.grad_tol) {
            converged = true;
            break;
        }
        intercept -= p.lr * g[0];
        for (c, gi) in coef.iter_mut().zip(&g[1..]) {
            *c -= p.lr * gi;
        }
        epochs_run += 1;
    }
    Ok(LogisticModel { intercept, coef, epochs_run, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn separable_1d() {
        let x: Vec<Vec<f64>> = (-10..=10).filter(|&i| i != 0).map(|i| vec![i as f64 / 5.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| (r[0] > 0.0) as u8 as f64).collect();
        let m = train_logistic(&x, &y, ClassWeights::UNIFORM, &LogisticParams::default()).unwrap();
        let p = m.predict_proba(&[vec![-0.5], vec![0.5], vec![-1.5], vec![1.5]]);
        assert!(p[0] < 0.5 && p[1] > 0.5 && p[2] < 0.5 && p[3] > 0.5);
    }

    #[test]
    fn all_negative_labels_push_intercept_down() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin()]).collect();
        let y = vec![0.0; 40];
        let m = train_logistic(&x, &y, ClassWeights::balanced(&y), &LogisticParams::default()).unwrap();
        // Gradient descent on the intercept alone follows b' = -lr * sigmoid(b);
        // after 500 steps of 0.1 it sits near -ln(50), so p ~ 0.02.
        let mut b = 0.0;
        for _ in 0..500 {
            b -= 0.1 * sigmoid(b);
        }
        assert!(sigmoid(b) < 0.05);
        assert!(m.intercept < -3.0, "{}", m.intercept);
        assert!(m.predict_proba(&x).iter().all(|&p| p < 0.05));
    }

    #[test]
    fn duplicating_samples_keeps_optimum() {
        let mut rng = rng_from_seed(3);
        let x: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = x.iter().map(|r| (r[0] + 0.3 * r[1] > 0.1) as u8 as f64).collect();
        let p = LogisticParams { epochs: 200, ..Default::default() };
        let a = train_logistic(&x, &y, ClassWeights::balanced(&y), &p).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
        let b = train_logistic(&x2, &y2, ClassWeights::balanced(&y2), &p).unwrap();
        assert!((a.intercept - b.intercept).abs() < 1e-12);
        for (u, v) in a.coef.iter().zip(&b.coef) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rng_from_seed(11);
        for _ in 0..20 {
            let n = rng.gen_range(3..12);
            let d = rng.gen_range(1..5);
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
            let cw = ClassWeights { w_pos: rng.gen_range(0.5..5.0), w_neg: 1.0 };
            let b0 = rng.gen_range(-1.0..1.0);
            let c0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, g) = loss_and_grad(&x, &y, cw, 0.01, b0, &c0);
            let h = 1e-6;
            for k in 0..=d {
                let eval = |delta: f64| {
                    let mut b = b0;
                    let mut c = c0.clone();
                    if k == 0 {
                        b += delta;
                    } else {
                        c[k - 1] += delta;
                    }
                    loss_and_grad(&x, &y, cw, 0.01, b, &c).0
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (num - g[k]).abs() / num.abs().max(g[k].abs()).max(1e-8);
                assert!(rel < 1e-6, "component {k}: analytic {} numeric {num} rel {rel}", g[k]);
            }
        }
    }

    #[test]
    fn logloss_is_stable() {
        assert!((logloss_from_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(logloss_from_logit(1000.0, 1.0).abs() < 1e-12);
        assert!((logloss_from_logit(-1000.0, 1.0) - 1000.0).abs() < 1e-9);
    }
}
