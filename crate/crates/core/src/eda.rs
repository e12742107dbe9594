//! Tonic/phasic decomposition of skin conductance.
//!
//! The observed signal `r` is modelled as a smooth tonic level `t` plus a
//! phasic part `B d`, where `B` is causal convolution with a Bateman impulse
//! response and `d >= 0` is a sparse sudomotor driver:
//!
//! ```text
//! minimize  1/2 |r - t - B d|^2 + alpha * sum(d) + lambda * |D2 t|^2   s.t. d >= 0
//! ```
//!
//! For a fixed driver the tonic minimizer solves the banded SPD system
//! `(I + 2 lambda D2'D2) t = r - B d`, so the solver runs projected gradient
//! with backtracking on the driver alone and eliminates the tonic exactly at
//! every trial point. Each accepted step satisfies the sufficient-decrease
//! test, so the objective trace never increases.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSeries, GRID_STEP_S};

#[derive(Debug, Error)]
pub enum EdaError {
    #[error("invalid EDA parameters: {0}")]
    InvalidParams(String),
    #[error("input has {0} missing bins; forward-fill before decomposing")]
    MissingBins(usize),
    #[error("input too short: {0} bins (need at least 8)")]
    TooShort(usize),
    #[error("solver stopped after {} iterations without converging", .0.iterations)]
    NonConvergence(Box<EdaDecomposition>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdaParams {
    pub tau1_s: f64,
    pub tau2_s: f64,
    pub alpha_l1: f64,
    pub lambda_smooth: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub scr_threshold: f64,
    pub scr_min_sep_bins: usize,
}

impl Default for EdaParams {
    fn default() -> Self {
        Self {
            tau1_s: 10.0,
            tau2_s: 1.0,
            alpha_l1: 0.05,
            lambda_smooth: 10.0,
            max_iters: 10_000,
            rel_tol: 1e-8,
            scr_threshold: 0.05,
            scr_min_sep_bins: 1,
        }
    }
}

impl EdaParams {
    pub fn validate(&self) -> Result<(), EdaError> {
        if !(self.tau2_s > 0.0 && self.tau1_s > self.tau2_s) {
            return Err(EdaError::InvalidParams("require tau1_s > tau2_s > 0".into()));
        }
        if !(self.alpha_l1 >= 0.0) {
            return Err(EdaError::InvalidParams("alpha_l1 must be >= 0".into()));
        }
        if !(self.lambda_smooth >= 0.0) {
            return Err(EdaError::InvalidParams("lambda_smooth must be >= 0".into()));
        }
        if !(self.rel_tol > 0.0) || self.max_iters == 0 {
            return Err(EdaError::InvalidParams("rel_tol and max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Bateman impulse response `exp(-k s / tau1) - exp(-k s / tau2)`, scaled to
/// unit peak. An all-zero response (e.g. `len == 1`) is returned unscaled.
pub fn bateman_kernel(p: &EdaParams, step_s: f64, len: usize) -> Vec<f64> {
    let mut h: Vec<f64> = (0..len)
        .map(|k| {
            let t = k as f64 * step_s;
            (-t / p.tau1_s).exp() - (-t / p.tau2_s).exp()
        })
        .collect();
    let peak = h.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        h.iter_mut().for_each(|v| *v /= peak);
    }
    h
}

/// Kernel for a given sample spacing, truncated once the tail falls below
/// `1e-10` of the peak (at least two taps, at most `max_len`).
pub fn trimmed_kernel(p: &EdaParams, step_s: f64, max_len: usize) -> Vec<f64> {
    // Decay to 1e-10 of peak takes about tau1 * ln(1e10) seconds.
    let span = (p.tau1_s * 23.1 / step_s).ceil() as usize + 2;
    let mut h = bateman_kernel(p, step_s, span.min(max_len).max(2));
    while h.len() > 2 && h.last().is_some_and(|&v| v < 1e-10) {
        h.pop();
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdaDecomposition {
    pub tonic: GridSeries,
    pub phasic: GridSeries,
    pub driver: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub scr_count_total: usize,
    pub iterations: usize,
    pub converged: bool,
    /// `|r - tonic - phasic|`.
    pub residual_norm: f64,
}

/// Raw solver output on plain vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Deconvolution {
    pub tonic: Vec<f64>,
    pub driver: Vec<f64>,
    pub phasic: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Causal convolution `(B d)[i] = sum_k h[k] d[i - k]`.
pub fn convolve_causal(kernel: &[f64], d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut out = vec![0.0; n];
    for (j, &dj) in d.iter().enumerate() {
        if dj == 0.0 {
            continue;
        }
        for (k, &hk) in kernel.iter().enumerate().take(n - j) {
            out[j + k] += hk * dj;
        }
    }
    out
}

/// Adjoint of [`convolve_causal`]: `(B' r)[j] = sum_k h[k] r[j + k]`.
fn correlate_adjoint(kernel: &[f64], r: &[f64]) -> Vec<f64> {
    let n = r.len();
    (0..n)
        .map(|j| kernel.iter().zip(&r[j..]).map(|(h, v)| h * v).sum())
        .collect()
}

fn second_difference_energy(t: &[f64]) -> f64 {
    t.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).powi(2)).sum()
}

/// Full objective at `(tonic, driver)`.
pub fn objective(signal: &[f64], kernel: &[f64], tonic: &[f64], driver: &[f64], p: &EdaParams) -> f64 {
    let phasic = convolve_causal(kernel, driver);
    let fit: f64 = signal
        .iter()
        .zip(tonic)
        .zip(&phasic)
        .map(|((r, t), b)| (r - t - b).powi(2))
        .sum();
    0.5 * fit + p.alpha_l1 * driver.iter().sum::<f64>() + p.lambda_smooth * second_difference_energy(tonic)
}

/// `LDL'` factor of the pentadiagonal matrix `I + 2 lambda D2'D2`.
struct TonicSystem {
    d: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl TonicSystem {
    fn new(n: usize, lambda: f64) -> Self {
        let mut diag = vec![1.0; n];
        let mut off1 = vec![0.0; n];
        let mut off2 = vec![0.0; n];
        let c = [1.0, -2.0, 1.0];
        for r in 0..n.saturating_sub(2) {
            for a in 0..3 {
                diag[r + a] += 2.0 * lambda * c[a] * c[a];
                if a < 2 {
                    off1[r + a] += 2.0 * lambda * c[a] * c[a + 1];
                }
            }
            off2[r] += 2.0 * lambda * c[0] * c[2];
        }
        let mut d = vec![0.0f64; n];
        let mut l1 = vec![0.0f64; n];
        let mut l2 = vec![0.0f64; n];
        for i in 0..n {
            let mut di = diag[i];
            if i >= 1 {
                di -= l1[i - 1].powi(2) * d[i - 1];
            }
            if i >= 2 {
                di -= l2[i - 2].powi(2) * d[i - 2];
            }
            d[i] = di;
            if i + 1 < n {
                let mut v = off1[i];
                if i >= 1 {
                    v -= l2[i - 1] * l1[i - 1] * d[i - 1];
                }
                l1[i] = v / di;
            }
            if i + 2 < n {
                l2[i] = off2[i] / di;
            }
        }
        Self { d, l1, l2 }
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut y = b.to_vec();
        for i in 0..n {
            if i >= 1 {
                y[i] -= self.l1[i - 1] * y[i - 1];
            }
            if i >= 2 {
                y[i] -= self.l2[i - 2] * y[i - 2];
            }
        }
        for i in 0..n {
            y[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            if i + 1 < n {
                y[i] -= self.l1[i] * y[i + 1];
            }
            if i + 2 < n {
                y[i] -= self.l2[i] * y[i + 2];
            }
        }
        y
    }
}

/// Solve the deconvolution problem for an arbitrary kernel.
pub fn solve_deconvolution(signal: &[f64], kernel: &[f64], p: &EdaParams) -> Deconvolution {
    let n = signal.len();
    let system = TonicSystem::new(n, p.lambda_smooth);
    let eval = |driver: &[f64]| {
        let phasic = convolve_causal(kernel, driver);
        let rhs: Vec<f64> = signal.iter().zip(&phasic).map(|(r, b)| r - b).collect();
        let tonic = system.solve(&rhs);
        let f = objective(signal, kernel, &tonic, driver, p);
        (tonic, phasic, f)
    };

    let mut driver = vec![0.0; n];
    let (mut tonic, mut phasic, mut f) = eval(&driver);
    let mut trace = vec![f];
    let h1: f64 = kernel.iter().map(|v| v.abs()).sum();
    // |B|^2 <= |h|_1^2 bounds the Lipschitz constant of the reduced gradient.
    let mut step = 1.0 / h1.powi(2).max(1e-12);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < p.max_iters {
        iterations += 1;
        let resid: Vec<f64> = (0..n).map(|i| signal[i] - tonic[i] - phasic[i]).collect();
        let grad: Vec<f64> = correlate_adjoint(kernel, &resid)
            .into_iter()
            .map(|g| -g + p.alpha_l1)
            .collect();

        let mut accepted = None;
        while step > 1e-30 {
            let cand: Vec<f64> = driver
                .iter()
                .zip(&grad)
                .map(|(d, g)| (d - step * g).max(0.0))
                .collect();
            let (mut lin, mut sq) = (0.0, 0.0);
            for i in 0..n {
                let dx = cand[i] - driver[i];
                lin += grad[i] * dx;
                sq += dx * dx;
            }
            if sq == 0.0 {
                break;
            }
            let (t_c, b_c, f_c) = eval(&cand);
            if f_c <= f + lin + sq / (2.0 * step) && f_c <= f {
                accepted = Some((cand, t_c, b_c, f_c));
                break;
            }
            step *= 0.5;
        }

        let Some((cand, t_c, b_c, f_c)) = accepted else {
            // Stationary (projected gradient vanished) or no further descent.
            converged = true;
            break;
        };
        let rel = (f - f_c) / f.abs().max(f64::MIN_POSITIVE);
        driver = cand;
        tonic = t_c;
        phasic = b_c;
        f = f_c;
        trace.push(f);
        if rel < p.rel_tol {
            converged = true;
            break;
        }
        step *= 1.5;
    }

    if !converged {
        // Tolerate a slow tail: only flag when still decreasing quickly.
        let k = trace.len();
        let rel = if k >= 2 {
            (trace[k - 2] - trace[k - 1]) / trace[k - 2].abs().max(f64::MIN_POSITIVE)
        } else {
            0.0
        };
        converged = rel <= 100.0 * p.rel_tol;
    }

    Deconvolution { tonic, driver, phasic, objective_trace: trace, iterations, converged }
}

/// Decompose a gap-free GSR grid series into tonic and phasic components.
pub fn decompose(gsr: &GridSeries, p: &EdaParams) -> Result<EdaDecomposition, EdaError> {
    p.validate()?;
    let missing = gsr.len() - gsr.observed_count();
    if missing > 0 {
        return Err(EdaError::MissingBins(missing));
    }
    if gsr.len() < 8 {
        return Err(EdaError::TooShort(gsr.len()));
    }
    let signal = gsr.raw_values().to_vec();
    let kernel = trimmed_kernel(p, GRID_STEP_S as f64, signal.len());
    let sol = solve_deconvolution(&signal, &kernel, p);

    let residual_norm = signal
        .iter()
        .zip(&sol.tonic)
        .zip(&sol.phasic)
        .map(|((r, t), b)| (r - t - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let tonic = gsr.with_options(&sol.tonic.iter().map(|&v| Some(v)).collect::<Vec<_>>());
    let phasic = gsr.with_options(&sol.phasic.iter().map(|&v| Some(v)).collect::<Vec<_>>());
    let scr_count_total = count_scrs(&phasic, p);
    let out = EdaDecomposition {
        tonic,
        phasic,
        driver: sol.driver,
        objective_trace: sol.objective_trace,
        scr_count_total,
        iterations: sol.iterations,
        converged: sol.converged,
        residual_norm,
    };
    if out.converged {
        Ok(out)
    } else {
        Err(EdaError::NonConvergence(Box::new(out)))
    }
}

/// Count strict local maxima of `x` (both neighbours present and lower) with
/// amplitude `>= threshold`. A peak is kept only if it lies more than
/// `min_sep` bins after the previously kept one. Missing values (`None`)
/// never form or bound a peak.
pub fn count_peaks(x: &[Option<f64>], threshold: f64, min_sep: usize) -> usize {
    let mut count = 0;
    let mut last: Option<usize> = None;
    for i in 1..x.len().saturating_sub(1) {
        let (Some(a), Some(b), Some(c)) = (x[i - 1], x[i], x[i + 1]) else { continue };
        if b > a && b > c && b >= threshold && last.map_or(true, |l| i - l > min_sep) {
            count += 1;
            last = Some(i);
        }
    }
    count
}

pub fn count_scrs(phasic: &GridSeries, p: &EdaParams) -> usize {
    count_peaks(&phasic.to_options(), p.scr_threshold, p.scr_min_sep_bins)
}
