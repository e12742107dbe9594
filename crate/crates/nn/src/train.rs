//! Minibatch SGD with momentum, class-weighted BCE, and early stopping on
//! validation F1.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use hypowatch_core::classical::{ClassWeights, Standardizer};
use hypowatch_core::dataset::SequenceBatch;
use hypowatch_core::eval::{confusion, metrics};
use hypowatch_core::rng::{derive_seed, rng_from_seed};

use crate::model::{Family, Net};
use crate::tape::{bce_term, Graph};
use crate::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Positive weight `n_neg / n_pos` from the training labels.
    Balanced,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOpts {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weighting: Weighting,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, batch_size: 64, max_epochs: 50, patience: 5, weighting: Weighting::Balanced, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_f1: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch (0-based) whose parameters were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn weights_for(labels: &[f64], cw: ClassWeights) -> Vec<f64> {
    labels.iter().map(|&y| cw.of(y)).collect()
}

/// Weighted mean BCE of `net` over `batch`.
pub fn mean_loss(net: &Net, batch: &SequenceBatch, cw: ClassWeights) -> Result<f64, NnError> {
    let p = net.predict_proba(batch)?;
    let eps = 1e-15;
    let total: f64 = p
        .iter()
        .zip(&batch.labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -cw.of(y) * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / batch.n.max(1) as f64)
}

/// Train `net` in place of a copy and return the best-validation parameters.
///
/// Epoch `e` shuffles with the stream `derive_seed(seed, e)`. Without
/// validation data every epoch runs and the last parameters are kept.
/// An epoch improves when validation F1 rises, or ties with lower
/// validation loss.
pub fn train(
    net: &Net,
    train: &SequenceBatch,
    val: Option<&SequenceBatch>,
    opts: &TrainOpts,
) -> Result<(Net, History), NnError> {
    if train.n == 0 || train.labels.len() != train.n {
        return Err(NnError::ShapeMismatch("empty or unlabeled training batch".into()));
    }
    if opts.batch_size == 0 || !(opts.lr >= 0.0) || !(0.0..1.0).contains(&opts.momentum) {
        return Err(NnError::InvalidSpec("batch_size > 0, lr >= 0 and momentum in [0, 1) required".into()));
    }
    let mut net = net.clone();
    if net.spec.family == Family::Mlp {
        let rows: Vec<Vec<f64>> = (0..train.n).map(|i| train.sample(i).to_vec()).collect();
        net.input_scaler = Some(Standardizer::fit(&rows).map_err(|e| NnError::ShapeMismatch(e.to_string()))?);
    }
    let cw = match opts.weighting {
        Weighting::Balanced => ClassWeights::balanced(&train.labels),
        Weighting::Uniform => ClassWeights::UNIFORM,
    };
    let weights = weights_for(&train.labels, cw);
    let mut velocity: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
    let mut history = History::default();
    let mut best: Option<(f64, f64, Net)> = None;
    let mut since_best = 0;
    let mut per_sample = vec![0.0; train.n];
    let mut order: Vec<usize> = (0..train.n).collect();

    for epoch in 0..opts.max_epochs {
        let mut rng = rng_from_seed(derive_seed(opts.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let tensors = net.tensors();
            let mut g = Graph::new(&tensors);
            let x = g.input(net.input_for(train, chunk)?);
            let z = net.logits(&mut g, x)?;
            let labels: Vec<f64> = chunk.iter().map(|&i| train.labels[i]).collect();
            let w: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            for ((&i, &zi), (&y, &wi)) in chunk.iter().zip(g.value(z)).zip(labels.iter().zip(&w)) {
                per_sample[i] = bce_term(zi, y, wi);
            }
            let loss = g.bce_with_logits(z, &labels, &w)?;
            if !g.value(loss)[0].is_finite() {
                return Err(NnError::Diverged { epoch });
            }
            let grads = g.backward(loss)?;
            drop(g);
            for ((p, v), gr) in net.params.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((pv, vv), gv) in p.tensor.data.iter_mut().zip(v.iter_mut()).zip(gr) {
                    *vv = opts.momentum * *vv + gv;
                    *pv -= opts.lr * *vv;
                }
            }
        }
        // Summed in sample order so the value does not depend on shuffling.
        let epoch_loss = per_sample.iter().sum::<f64>() / train.n as f64;
        if !epoch_loss.is_finite() || net.params.iter().any(|p| p.tensor.data.iter().any(|v| !v.is_finite())) {
            return Err(NnError::Diverged { epoch });
        }
        history.train_loss.push(epoch_loss);

        let Some(vb) = val.filter(|v| v.n > 0) else {
            history.best_epoch = epoch;
            continue;
        };
        let probs = net.predict_proba(vb)?;
        let f1 = metrics(&confusion(&probs, &vb.labels, 0.5).map_err(|e| NnError::ShapeMismatch(e.to_string()))?).f1;
        let vloss = mean_loss(&net, vb, cw)?;
        history.val_f1.push(f1);
        history.val_loss.push(vloss);
        let improved = match &best {
            None => true,
            Some((bf, bl, _)) => f1 > *bf || (f1 == *bf && vloss < *bl),
        };
        if improved {
            best = Some((f1, vloss, net.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    let out = match best {
        Some((_, _, b)) => b,
        None => net,
    };
    Ok((out, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, Init, ModelSpec};
    use rand::Rng;

    /// Windows with a bump injected at a random position for positives.
    fn motif(n: usize, seed: u64) -> SequenceBatch {
        let mut rng = rng_from_seed(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let pos = i % 4 == 0;
            let mut x: Vec<f64> = (0..12).map(|_| rng.gen_range(-0.3..0.3)).collect();
            if pos {
                let at = rng.gen_range(2..10);
                x[at - 1] += 1.0;
                x[at] += 2.0;
                x[at + 1] += 1.0;
            }
            data.extend(x);
            labels.push(pos as u8 as f64);
        }
        SequenceBatch { n, channels: 1, length: 12, data, labels }
    }

    #[test]
    fn cnn_learns_separable_motif() {
        let spec = ModelSpec::new(Family::Cnn1d, 1, 12);
        let net = build(&spec, 1, Init::Glorot).unwrap();
        let (tr, va) = (motif(400, 1), motif(200, 2));
        let (trained, h) = train(&net, &tr, Some(&va), &TrainOpts { seed: 3, ..Default::default() }).unwrap();
        let best = h.val_f1[h.best_epoch];
        assert!(best >= 0.9, "best F1 {best}, history {:?}", h.val_f1);
        let p = trained.predict_proba(&va).unwrap();
        let f1 = metrics(&confusion(&p, &va.labels, 0.5).unwrap()).f1;
        assert_eq!(f1, best);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let spec = ModelSpec::new(Family::Gru, 1, 12);
        let net = build(&spec, 4, Init::Glorot).unwrap();
        let tr = motif(100, 5);
        let opts = TrainOpts { lr: 0.0, max_epochs: 4, ..Default::default() };
        let (out, h) = train(&net, &tr, None, &opts).unwrap();
        assert_eq!(out.flat_params(), net.flat_params());
        assert!(h.train_loss.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn same_seed_same_history() {
        let spec = ModelSpec::new(Family::Lstm, 1, 12);
        let net = build(&spec, 6, Init::Glorot).unwrap();
        let (tr, va) = (motif(128, 7), motif(64, 8));
        let opts = TrainOpts { max_epochs: 3, seed: 1, ..Default::default() };
        let a = train(&net, &tr, Some(&va), &opts).unwrap();
        let b = train(&net, &tr, Some(&va), &opts).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn non_finite_loss_reports_divergence() {
        let spec = ModelSpec::new(Family::Cnn1d, 1, 12);
        let net = build(&spec, 6, Init::Glorot).unwrap();
        let mut tr = motif(64, 7);
        tr.data[5] = f64::INFINITY;
        let opts = TrainOpts { max_epochs: 5, ..Default::default() };
        assert_eq!(train(&net, &tr, None, &opts).unwrap_err(), NnError::Diverged { epoch: 0 });
    }
}
