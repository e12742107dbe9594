//! Central finite-difference check of the tape gradients.

use hypowatch_core::classical::ClassWeights;
use hypowatch_core::dataset::SequenceBatch;

use crate::model::Net;
use crate::tape::Graph;
use crate::NnError;

/// Weighted BCE of `net` on the whole `batch` and its parameter gradients.
pub fn loss_and_grads(net: &Net, batch: &SequenceBatch, cw: ClassWeights) -> Result<(f64, Vec<Vec<f64>>), NnError> {
    let tensors = net.tensors();
    let mut g = Graph::new(&tensors);
    let idx: Vec<usize> = (0..batch.n).collect();
    let x = g.input(net.input_for(batch, &idx)?);
    let z = net.logits(&mut g, x)?;
    let w: Vec<f64> = batch.labels.iter().map(|&y| cw.of(y)).collect();
    let loss = g.bce_with_logits(z, &batch.labels, &w)?;
    let value = g.value(loss)[0];
    Ok((value, g.backward(loss)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter name, element)` of the worst entry.
    pub worst: (String, usize),
}

/// Compare every parameter gradient with `(f(p + eps) - f(p - eps)) / 2 eps`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// gradients that are zero up to rounding from dominating the maximum.
pub fn gradcheck(net: &Net, batch: &SequenceBatch, cw: ClassWeights, eps: f64) -> Result<GradcheckReport, NnError> {
    let (_, analytic) = loss_and_grads(net, batch, cw)?;
    let mut probe = net.clone();
    let mut report = GradcheckReport { checked: 0, max_rel_err: 0.0, worst: (String::new(), 0) };
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe.params[pi].tensor.data[j];
            probe.params[pi].tensor.data[j] = orig + eps;
            let up = loss_and_grads(&probe, batch, cw)?.0;
            probe.params[pi].tensor.data[j] = orig - eps;
            let down = loss_and_grads(&probe, batch, cw)?.0;
            probe.params[pi].tensor.data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (net.params[pi].name.clone(), j);
            }
        }
    }
    Ok(report)
}
