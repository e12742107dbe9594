//! Sequence architectures over the autodiff tape.
//!
//! Recurrent nets read the last step's hidden state, convolutional nets
//! mean-pool over time, and the MLP takes a flat feature vector. Every
//! family ends in a dense layer producing one logit.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use hypowatch_core::classical::Standardizer;
use hypowatch_core::dataset::SequenceBatch;
use hypowatch_core::rng::rng_from_seed;

use crate::tape::{Graph, Tensor, Var};
use crate::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "CNN")]
    Cnn1d,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "GRU")]
    Gru,
    #[serde(rename = "TCN")]
    Tcn,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Mlp, Family::Cnn1d, Family::Lstm, Family::Gru, Family::Tcn];

    pub fn name(self) -> &'static str {
        match self {
            Family::Mlp => "MLP",
            Family::Cnn1d => "CNN",
            Family::Lstm => "LSTM",
            Family::Gru => "GRU",
            Family::Tcn => "TCN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name().eq_ignore_ascii_case(s))
    }

    pub fn is_sequence(self) -> bool {
        self != Family::Mlp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnSpec {
    pub kernel: usize,
    pub layers: usize,
    pub channels: usize,
}

impl Default for CnnSpec {
    fn default() -> Self {
        Self { kernel: 3, layers: 2, channels: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnSpec {
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub channels: usize,
    pub residual: bool,
}

impl Default for TcnSpec {
    fn default() -> Self {
        Self { kernel: 3, dilations: vec![1, 2, 4], channels: 16, residual: true }
    }
}

impl TcnSpec {
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel.saturating_sub(1)) * self.dilations.iter().sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpSpec {
    pub layers: Vec<usize>,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self { layers: vec![64, 32] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// Sequence channels, or the feature count for the MLP.
    pub in_channels: usize,
    /// Time steps per sample (1 for the MLP).
    pub seq_len: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub cnn: CnnSpec,
    #[serde(default)]
    pub tcn: TcnSpec,
    #[serde(default)]
    pub mlp: MlpSpec,
}

fn default_hidden() -> usize {
    32
}

impl ModelSpec {
    pub fn new(family: Family, in_channels: usize, seq_len: usize) -> Self {
        Self {
            family,
            in_channels,
            seq_len,
            hidden: default_hidden(),
            cnn: CnnSpec::default(),
            tcn: TcnSpec::default(),
            mlp: MlpSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidSpec(m));
        if self.in_channels == 0 || self.seq_len == 0 {
            return bad("in_channels and seq_len must be positive".into());
        }
        match self.family {
            Family::Mlp if self.mlp.layers.contains(&0) => bad("MLP layer of width 0".into()),
            Family::Lstm | Family::Gru if self.hidden == 0 => bad("hidden must be positive".into()),
            Family::Cnn1d if self.cnn.kernel == 0 || self.cnn.layers == 0 || self.cnn.channels == 0 => {
                bad("CNN kernel, layers and channels must be positive".into())
            }
            Family::Tcn => {
                if self.tcn.kernel == 0 || self.tcn.channels == 0 || self.tcn.dilations.is_empty() {
                    return bad("TCN kernel, channels and dilations must be non-empty".into());
                }
                if self.tcn.dilations.contains(&0) {
                    return bad("TCN dilation 0".into());
                }
                if self.tcn.receptive_field() < self.seq_len {
                    return bad(format!(
                        "TCN receptive field {} shorter than sequence length {}",
                        self.tcn.receptive_field(),
                        self.seq_len
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Values per sample expected on input.
    pub fn sample_len(&self) -> usize {
        self.in_channels * self.seq_len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Glorot-uniform weights, zero biases, LSTM forget bias 1.
    Glorot,
    /// Every parameter zero.
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub spec: ModelSpec,
    pub params: Vec<NamedParam>,
    /// Feature scaling for the MLP, fitted on training rows.
    pub input_scaler: Option<Standardizer>,
}

struct Builder<'a> {
    rng: &'a mut hypowatch_core::rng::Rng,
    init: Init,
    out: Vec<NamedParam>,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) {
        let n: usize = shape.iter().product();
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = match self.init {
            Init::Glorot => (0..n).map(|_| self.rng.gen_range(-a..=a)).collect(),
            Init::Zeros => vec![0.0; n],
        };
        self.out.push(NamedParam { name, tensor: Tensor::param(shape, data).expect("sized") });
    }

    fn bias(&mut self, name: String, len: usize) {
        self.out.push(NamedParam { name, tensor: Tensor::param(vec![len], vec![0.0; len]).expect("sized") });
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.weight(format!("{name}.w"), vec![fan_in, fan_out], fan_in, fan_out);
        self.bias(format!("{name}.b"), fan_out);
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.weight(format!("{name}.w"), vec![cout, cin, k], cin * k, cout * k);
        self.bias(format!("{name}.b"), cout);
    }
}

/// Parameters in build order; the forward pass consumes them in the same
/// order.
pub fn build(spec: &ModelSpec, seed: u64, init: Init) -> Result<Net, NnError> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut b = Builder { rng: &mut rng, init, out: Vec::new() };
    let c = spec.in_channels;
    let h = spec.hidden;
    let head_in = match spec.family {
        Family::Mlp => {
            let mut fan_in = spec.sample_len();
            for (i, &w) in spec.mlp.layers.iter().enumerate() {
                b.dense(&format!("dense{i}"), fan_in, w);
                fan_in = w;
            }
            fan_in
        }
        Family::Cnn1d => {
            let mut cin = c;
            for l in 0..spec.cnn.layers {
                b.conv(&format!("conv{l}"), cin, spec.cnn.channels, spec.cnn.kernel);
                cin = spec.cnn.channels;
            }
            cin
        }
        Family::Tcn => {
            let mut cin = c;
            for (l, _) in spec.tcn.dilations.iter().enumerate() {
                b.conv(&format!("block{l}.conv"), cin, spec.tcn.channels, spec.tcn.kernel);
                if spec.tcn.residual && cin != spec.tcn.channels {
                    b.conv(&format!("block{l}.downsample"), cin, spec.tcn.channels, 1);
                }
                cin = spec.tcn.channels;
            }
            cin
        }
        Family::Lstm => {
            b.weight("lstm.w".into(), vec![c + h, 4 * h], c + h, 4 * h);
            b.bias("lstm.b".into(), 4 * h);
            if init == Init::Glorot {
                // Gate order i, f, g, o.
                let bias = &mut b.out.last_mut().expect("just pushed").tensor.data;
                bias[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            }
            h
        }
        Family::Gru => {
            b.weight("gru.w_zr".into(), vec![c + h, 2 * h], c + h, 2 * h);
            b.bias("gru.b_zr".into(), 2 * h);
            b.weight("gru.w_xn".into(), vec![c, h], c, h);
            b.bias("gru.b_xn".into(), h);
            b.weight("gru.w_hn".into(), vec![h, h], h, h);
            b.bias("gru.b_hn".into(), h);
            h
        }
    };
    b.dense("head", head_in, 1);
    let params = b.out;
    Ok(Net { spec: spec.clone(), params, input_scaler: None })
}

impl Net {
    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.tensor.data.iter().copied()).collect()
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Input tensor for rows `idx` of `batch`, scaled when the net carries a
    /// scaler.
    pub fn input_for(&self, batch: &SequenceBatch, idx: &[usize]) -> Result<Tensor, NnError> {
        let per = batch.channels * batch.length;
        if per != self.spec.sample_len() || (self.spec.family.is_sequence() && batch.channels != self.spec.in_channels) {
            return Err(NnError::ShapeMismatch(format!(
                "batch {}x{} for spec {}x{}",
                batch.channels, batch.length, self.spec.in_channels, self.spec.seq_len
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            let s = batch.sample(i);
            match &self.input_scaler {
                Some(sc) => data.extend(s.iter().zip(sc.mean.iter().zip(&sc.scale)).map(|(v, (m, k))| (v - m) / k)),
                None => data.extend_from_slice(s),
            }
        }
        let shape = if self.spec.family.is_sequence() {
            vec![idx.len(), batch.channels, batch.length]
        } else {
            vec![idx.len(), per]
        };
        Tensor::new(shape, data)
    }

    /// Logits `(B, 1)` for an input node.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let mut next = 0usize;
        let mut take = |g: &mut Graph| {
            let v = g.param(next);
            next += 1;
            v
        };
        let spec = &self.spec;
        let feat = match spec.family {
            Family::Mlp => {
                let mut a = x;
                for _ in &spec.mlp.layers {
                    let (w, b) = (take(g), take(g));
                    let z = g.matmul(a, w)?;
                    let z = g.add(z, b)?;
                    a = g.relu(z);
                }
                a
            }
            Family::Cnn1d => {
                let mut a = x;
                for _ in 0..spec.cnn.layers {
                    let (w, b) = (take(g), take(g));
                    let z = g.conv1d(a, w, b, 1)?;
                    a = g.relu(z);
                }
                g.mean_time(a)?
            }
            Family::Tcn => {
                let mut a = x;
                let mut cin = spec.in_channels;
                for &d in &spec.tcn.dilations {
                    let (w, b) = (take(g), take(g));
                    let z = g.conv1d(a, w, b, d)?;
                    let y = g.relu(z);
                    a = if spec.tcn.residual {
                        let skip = if cin != spec.tcn.channels {
                            let (wr, br) = (take(g), take(g));
                            g.conv1d(a, wr, br, 1)?
                        } else {
                            a
                        };
                        let s = g.add(y, skip)?;
                        g.relu(s)
                    } else {
                        y
                    };
                    cin = spec.tcn.channels;
                }
                g.mean_time(a)?
            }
            Family::Lstm => {
                let (w, b) = (take(g), take(g));
                let (bn, t_len) = (g.shape(x)[0], g.shape(x)[2]);
                let hd = spec.hidden;
                let mut h = g.zeros(vec![bn, hd]);
                let mut c = g.zeros(vec![bn, hd]);
                for t in 0..t_len {
                    let xt = g.slice_time(x, t)?;
                    let z = g.concat(xt, h)?;
                    let gates = g.matmul(z, w)?;
                    let gates = g.add(gates, b)?;
                    let i = g.narrow(gates, 0, hd)?;
                    let i = g.sigmoid(i);
                    let f = g.narrow(gates, hd, hd)?;
                    let f = g.sigmoid(f);
                    let cand = g.narrow(gates, 2 * hd, hd)?;
                    let cand = g.tanh(cand);
                    let o = g.narrow(gates, 3 * hd, hd)?;
                    let o = g.sigmoid(o);
                    let fc = g.mul(f, c)?;
                    let ic = g.mul(i, cand)?;
                    c = g.add(fc, ic)?;
                    let tc = g.tanh(c);
                    h = g.mul(o, tc)?;
                }
                h
            }
            Family::Gru => {
                let (w_zr, b_zr, w_xn, b_xn, w_hn, b_hn) = (take(g), take(g), take(g), take(g), take(g), take(g));
                let (bn, t_len) = (g.shape(x)[0], g.shape(x)[2]);
                let hd = spec.hidden;
                let mut h = g.zeros(vec![bn, hd]);
                for t in 0..t_len {
                    let xt = g.slice_time(x, t)?;
                    let xh = g.concat(xt, h)?;
                    let zr = g.matmul(xh, w_zr)?;
                    let zr = g.add(zr, b_zr)?;
                    let zr = g.sigmoid(zr);
                    let z = g.narrow(zr, 0, hd)?;
                    let r = g.narrow(zr, hd, hd)?;
                    let xn = g.matmul(xt, w_xn)?;
                    let xn = g.add(xn, b_xn)?;
                    let hn = g.matmul(h, w_hn)?;
                    let hn = g.add(hn, b_hn)?;
                    let rhn = g.mul(r, hn)?;
                    let n = g.add(xn, rhn)?;
                    let n = g.tanh(n);
                    // h' = (1 - z) n + z h = n + z (h - n)
                    let diff = g.sub(h, n)?;
                    let zd = g.mul(z, diff)?;
                    h = g.add(n, zd)?;
                }
                h
            }
        };
        let (w, b) = (take(g), take(g));
        let out = g.matmul(feat, w)?;
        g.add(out, b)
    }

    /// Sigmoid of the logit for every row of `batch`.
    pub fn predict_proba(&self, batch: &SequenceBatch) -> Result<Vec<f64>, NnError> {
        let tensors = self.tensors();
        let mut out = Vec::with_capacity(batch.n);
        let idx: Vec<usize> = (0..batch.n).collect();
        for chunk in idx.chunks(256) {
            let mut g = Graph::new(&tensors);
            let x = g.input(self.input_for(batch, chunk)?);
            let z = self.logits(&mut g, x)?;
            out.extend(g.value(z).iter().map(|&v| hypowatch_core::classical::sigmoid(v)));
        }
        Ok(out)
    }

    pub fn to_document(&self) -> Result<String, NnError> {
        let doc = serde_json::json!({ "format_version": 1, "model": self });
        serde_json::to_string_pretty(&doc).map_err(|e| NnError::Document(e.to_string()))
    }

    pub fn from_document(text: &str) -> Result<Self, NnError> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| NnError::Document(e.to_string()))?;
        if v.get("format_version").and_then(|x| x.as_u64()) != Some(1) {
            return Err(NnError::Document("unsupported format_version".into()));
        }
        let mut net: Net =
            serde_json::from_value(v["model"].clone()).map_err(|e| NnError::Document(e.to_string()))?;
        for p in &mut net.params {
            p.tensor.requires_grad = true;
            if p.tensor.shape.iter().product::<usize>() != p.tensor.data.len() {
                return Err(NnError::Document(format!("parameter {} has inconsistent shape", p.name)));
            }
        }
        let reference = build(&net.spec, 0, Init::Zeros)?;
        let shapes = |n: &Net| n.params.iter().map(|p| p.tensor.shape.clone()).collect::<Vec<_>>();
        if shapes(&reference) != shapes(&net) {
            return Err(NnError::Document("parameter shapes do not match the model spec".into()));
        }
        Ok(net)
    }
}
