//! Reverse-mode autodiff over dense row-major tensors.
//!
//! A [`Graph`] records one forward pass. Parameters are borrowed from the
//! caller and referenced by index; [`Graph::backward`] returns one gradient
//! buffer per parameter. Tensors are 2-D `(rows, cols)` or 3-D sequence
//! batches `(batch, channels, time)`.

use serde::{Deserialize, Serialize};

use crate::NnError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::ShapeMismatch(format!("shape {shape:?} holds {} values", data.len())));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    /// Row-broadcast of a vector over the last axis of a 2-D tensor.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Var, Var),
    Narrow { x: Var, start: usize },
    Conv1d { x: Var, w: Var, b: Var, dilation: usize },
    MeanTime(Var),
    SliceTime { x: Var, t: usize },
    Bce { logits: Var, labels: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    /// Empty for parameters, whose values live in the borrowed store.
    value: Vec<f64>,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> NnError {
    NnError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-sample weighted logistic loss from a logit.
pub fn bce_term(z: f64, y: f64, w: f64) -> f64 {
    w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
}

/// `c[n,m] += a[n,k] b[k,m]`, row-major.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (cv, bv) in ci.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *cv += aip * bv;
            }
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params[i].data,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, shape, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t.shape, t.data, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.push(Op::Input, shape, vec![0.0; n], false)
    }

    pub fn param(&mut self, index: usize) -> Var {
        let p = &self.params[index];
        self.push(Op::Param(index), p.shape.clone(), Vec::new(), p.requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm_acc(self.value(a), self.value(b), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), vec![n, m], out, ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape, out, ng))
    }

    /// Elementwise sum; a 1-D `b` matching the last axis of a 2-D `a` is
    /// broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let m = sb[0];
            let bv = self.value(b).to_vec();
            let mut out = self.value(a).to_vec();
            for row in out.chunks_mut(m) {
                for (o, x) in row.iter_mut().zip(&bv) {
                    *o += x;
                }
            }
            let ng = self.ng(a) || self.ng(b);
            return Ok(self.push(Op::AddRow(a, b), sa, out, ng));
        }
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push(op, shape, out, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Concatenate along axis 1; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(mismatch("concat", &sa, &sb));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut out = Vec::with_capacity(sa[0] * (ca + cb));
        for r in 0..sa[0] {
            out.extend_from_slice(&self.value(a)[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.value(b)[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Concat(a, b), shape, out, ng))
    }

    /// `x[:, start..start + len]` along axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return Err(NnError::ShapeMismatch(format!("narrow {start}+{len} of {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let row = s[1] * inner;
        let mut out = Vec::with_capacity(s[0] * len * inner);
        for r in 0..s[0] {
            let base = r * row + start * inner;
            out.extend_from_slice(&self.value(x)[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let ng = self.ng(x);
        Ok(self.push(Op::Narrow { x, start }, shape, out, ng))
    }

    /// Causal dilated convolution: `x (B, Cin, T)`, `w (Cout, Cin, K)`,
    /// `b (Cout)`. Output `t` reads inputs `t - (K - 1 - k) * dilation`;
    /// reads before the start are zero.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var, NnError> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sb != [sw[0]] || sw[1] != sx[1] || dilation == 0 {
            return Err(NnError::ShapeMismatch(format!("conv1d x {sx:?} w {sw:?} b {sb:?} d {dilation}")));
        }
        let (bn, cin, t_len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; bn * cout * t_len];
        for n in 0..bn {
            for o in 0..cout {
                let orow = &mut out[(n * cout + o) * t_len..(n * cout + o + 1) * t_len];
                orow.iter_mut().for_each(|v| *v = bv[o]);
                for c in 0..cin {
                    let xrow = &xv[(n * cin + c) * t_len..(n * cin + c + 1) * t_len];
                    for kk in 0..k {
                        let wt = wv[(o * cin + c) * k + kk];
                        let shift = (k - 1 - kk) * dilation;
                        if shift >= t_len {
                            continue;
                        }
                        for (ov, xvv) in orow[shift..].iter_mut().zip(xrow) {
                            *ov += wt * xvv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Op::Conv1d { x, w, b, dilation }, vec![bn, cout, t_len], out, ng))
    }

    /// Mean over the time axis: `(B, C, T) -> (B, C)`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[2] == 0 {
            return Err(NnError::ShapeMismatch(format!("mean_time of {s:?}")));
        }
        let t = s[2];
        let out = self.value(x).chunks(t).map(|r| r.iter().sum::<f64>() / t as f64).collect();
        let ng = self.ng(x);
        Ok(self.push(Op::MeanTime(x), vec![s[0], s[1]], out, ng))
    }

    /// One time step: `(B, C, T) -> (B, C)`.
    pub fn slice_time(&mut self, x: Var, t: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || t >= s[2] {
            return Err(NnError::ShapeMismatch(format!("slice_time {t} of {s:?}")));
        }
        let out = self.value(x).chunks(s[2]).map(|r| r[t]).collect();
        let ng = self.ng(x);
        Ok(self.push(Op::SliceTime { x, t }, vec![s[0], s[1]], out, ng))
    }

    pub fn slice_last(&mut self, x: Var) -> Result<Var, NnError> {
        let t = *self.shape(x).get(2).ok_or_else(|| NnError::ShapeMismatch("slice_last needs 3-D".into()))?;
        if t == 0 {
            return Err(NnError::ShapeMismatch("slice_last of empty sequence".into()));
        }
        self.slice_time(x, t - 1)
    }

    /// Mean over samples of `w_i * logloss(y_i, sigmoid(z_i))`; `logits` has
    /// one value per sample.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], weights: &[f64]) -> Result<Var, NnError> {
        let z = self.value(logits);
        if z.len() != labels.len() || z.len() != weights.len() || z.is_empty() {
            return Err(NnError::ShapeMismatch(format!(
                "bce: {} logits, {} labels, {} weights",
                z.len(),
                labels.len(),
                weights.len()
            )));
        }
        let loss = z.iter().zip(labels).zip(weights).map(|((&z, &y), &w)| bce_term(z, y, w)).sum::<f64>()
            / z.len() as f64;
        let ng = self.ng(logits);
        let op = Op::Bce { logits, labels: labels.to_vec(), weights: weights.to_vec() };
        Ok(self.push(op, vec![1], vec![loss], ng))
    }

    /// Gradients of the scalar `loss` with respect to every parameter, in
    /// store order. Parameters not reached get zeros.
    pub fn backward(&self, loss: Var) -> Result<Vec<Vec<f64>>, NnError> {
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(NnError::ShapeMismatch(format!("backward from {:?}", self.nodes[loss.0].shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut pgrads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let n = nodes[v.0].shape.iter().product();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(i) => {
                    for (p, v) in pgrads[*i].iter_mut().zip(&g) {
                        *p += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                    let (n, k, m) = (sa[0], sa[1], sb[1]);
                    if let Some(ga) = acc(&mut grads, &self.nodes, *a) {
                        // dA = dC B^T, as row axpys over B^T so the inner loop vectorizes.
                        let bv = self.value(*b);
                        let mut bt = vec![0.0; m * k];
                        for p in 0..k {
                            for j in 0..m {
                                bt[j * k + p] = bv[p * m + j];
                            }
                        }
                        gemm_acc(&g, &bt, ga, n, m, k);
                    }
                    if let Some(gb) = acc(&mut grads, &self.nodes, *b) {
                        let av = self.value(*a);
                        for i in 0..n {
                            let gi = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (o, x) in gb[p * m..(p + 1) * m].iter_mut().zip(gi) {
                                    *o += aip * x;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if let Some(ga) = acc(&mut grads, &self.nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    }
                    if let Some(gb) = acc(&mut grads, &self.nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(o, x)| *o += sign * x);
                    }
                }
                Op::AddRow(a, b) => {
                    if let Some(ga) = acc(&mut grads, &self.nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    }
                    if let Some(gb) = acc(&mut grads, &self.nodes, *b) {
                        let m = gb.len();
                        for row in g.chunks(m) {
                            gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(ga) = acc(&mut grads, &self.nodes, *a) {
                        let bv = self.value(*b);
                        for ((o, x), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += x * y;
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &self.nodes, *b) {
                        let av = self.value(*a);
                        for ((o, x), y) in gb.iter_mut().zip(&g).zip(av) {
                            *o += x * y;
                        }
                    }
                }
                Op::Sigmoid(x) | Op::Tanh(x) | Op::Relu(x) => {
                    let y = &node.value;
                    let xv = self.value(*x);
                    if let Some(gx) = acc(&mut grads, &self.nodes, *x) {
                        for i in 0..gx.len() {
                            let d = match node.op {
                                Op::Sigmoid(_) => y[i] * (1.0 - y[i]),
                                Op::Tanh(_) => 1.0 - y[i] * y[i],
                                _ => (xv[i] > 0.0) as u8 as f64,
                            };
                            gx[i] += g[i] * d;
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                    let inner: usize = sa[2..].iter().product();
                    let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                    let rows = sa[0];
                    if let Some(ga) = acc(&mut grads, &self.nodes, *a) {
                        for r in 0..rows {
                            for j in 0..ca {
                                ga[r * ca + j] += g[r * (ca + cb) + j];
                            }
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &self.nodes, *b) {
                        for r in 0..rows {
                            for j in 0..cb {
                                gb[r * cb + j] += g[r * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                Op::Narrow { x, start } => {
                    let s = &self.nodes[x.0].shape;
                    let inner: usize = s[2..].iter().product();
                    let row = s[1] * inner;
                    let len = node.shape[1] * inner;
                    if let Some(gx) = acc(&mut grads, &self.nodes, *x) {
                        for r in 0..s[0] {
                            let base = r * row + start * inner;
                            for j in 0..len {
                                gx[base + j] += g[r * len + j];
                            }
                        }
                    }
                }
                Op::Conv1d { x, w, b, dilation } => {
                    let sx = &self.nodes[x.0].shape;
                    let sw = &self.nodes[w.0].shape;
                    let (bn, cin, t_len, cout, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
                    if let Some(gbias) = acc(&mut grads, &self.nodes, *b) {
                        for n in 0..bn {
                            for o in 0..cout {
                                gbias[o] += g[(n * cout + o) * t_len..(n * cout + o + 1) * t_len].iter().sum::<f64>();
                            }
                        }
                    }
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    if let Some(gw) = acc(&mut grads, &self.nodes, *w) {
                        for n in 0..bn {
                            for o in 0..cout {
                                let grow = &g[(n * cout + o) * t_len..(n * cout + o + 1) * t_len];
                                for c in 0..cin {
                                    let xrow = &xv[(n * cin + c) * t_len..(n * cin + c + 1) * t_len];
                                    for kk in 0..k {
                                        let shift = (k - 1 - kk) * dilation;
                                        if shift >= t_len {
                                            continue;
                                        }
                                        gw[(o * cin + c) * k + kk] +=
                                            grow[shift..].iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gx) = acc(&mut grads, &self.nodes, *x) {
                        for n in 0..bn {
                            for o in 0..cout {
                                let grow = &g[(n * cout + o) * t_len..(n * cout + o + 1) * t_len];
                                for c in 0..cin {
                                    let gxrow = &mut gx[(n * cin + c) * t_len..(n * cin + c + 1) * t_len];
                                    for kk in 0..k {
                                        let shift = (k - 1 - kk) * dilation;
                                        if shift >= t_len {
                                            continue;
                                        }
                                        let wt = wv[(o * cin + c) * k + kk];
                                        for (gv, go) in gxrow.iter_mut().zip(&grow[shift..]) {
                                            *gv += wt * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MeanTime(x) => {
                    let t = self.nodes[x.0].shape[2];
                    if let Some(gx) = acc(&mut grads, &self.nodes, *x) {
                        for (row, gv) in gx.chunks_mut(t).zip(&g) {
                            row.iter_mut().for_each(|o| *o += gv / t as f64);
                        }
                    }
                }
                Op::SliceTime { x, t } => {
                    let tl = self.nodes[x.0].shape[2];
                    if let Some(gx) = acc(&mut grads, &self.nodes, *x) {
                        for (row, gv) in gx.chunks_mut(tl).zip(&g) {
                            row[*t] += gv;
                        }
                    }
                }
                Op::Bce { logits, labels, weights } => {
                    let z = self.value(*logits).to_vec();
                    let n = z.len() as f64;
                    if let Some(gz) = acc(&mut grads, &self.nodes, *logits) {
                        for i in 0..z.len() {
                            gz[i] += g[0] * weights[i] * (sigmoid(z[i]) - labels[i]) / n;
                        }
                    }
                }
            }
        }
        Ok(pgrads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let params = vec![p(vec![1, 1], vec![0.0])];
        let mut g = Graph::new(&params);
        let x = g.param(0);
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads[0], vec![0.25]);
    }

    #[test]
    fn matmul_values_and_shapes() {
        let params = vec![p(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]), p(vec![3, 1], vec![1., 0., -1.])];
        let mut g = Graph::new(&params);
        let (a, b) = (g.param(0), g.param(1));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[-2.0, -2.0]);
        assert!(matches!(g.matmul(b, b), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn conv_is_causal() {
        let w = p(vec![2, 1, 3], vec![0.3, -0.2, 0.5, 1.0, 0.7, -0.4]);
        let b = p(vec![2], vec![0.1, -0.1]);
        let params = vec![w, b];
        let x: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let run = |x: Vec<f64>| {
            let mut g = Graph::new(&params);
            let xi = g.input(Tensor::new(vec![1, 1, 10], x).unwrap());
            let (w, b) = (g.param(0), g.param(1));
            let y = g.conv1d(xi, w, b, 2).unwrap();
            g.value(y).to_vec()
        };
        let base = run(x.clone());
        let mut later = x.clone();
        later[7] += 5.0;
        let pert = run(later);
        for ch in 0..2 {
            for t in 0..7 {
                assert_eq!(base[ch * 10 + t], pert[ch * 10 + t]);
            }
            assert_ne!(base[ch * 10 + 7], pert[ch * 10 + 7]);
        }
        // First output sees only x[0] through the last tap.
        assert!((base[0] - (0.1 + 0.5 * x[0])).abs() < 1e-15);
    }

    #[test]
    fn bce_weighted_unit_equals_plain() {
        let params = vec![p(vec![3, 1], vec![0.3, -2.0, 5.0])];
        let mut g = Graph::new(&params);
        let z = g.param(0);
        let y = [1.0, 0.0, 1.0];
        let l = g.bce_with_logits(z, &y, &[1.0; 3]).unwrap();
        let plain: f64 = [0.3f64, -2.0, 5.0]
            .iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((g.value(l)[0] - plain).abs() < 1e-14);
    }

    #[test]
    fn concat_narrow_round_trip() {
        let params = vec![p(vec![2, 2], vec![1., 2., 3., 4.]), p(vec![2, 1], vec![5., 6.])];
        let mut g = Graph::new(&params);
        let (a, b) = (g.param(0), g.param(1));
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c), &[1., 2., 5., 3., 4., 6.]);
        let n = g.narrow(c, 1, 2).unwrap();
        assert_eq!(g.value(n), &[2., 5., 4., 6.]);
    }
}
