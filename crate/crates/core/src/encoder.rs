//! Fully connected encoder producing relaxed codes, trained with SGD.
//!
//! Hidden layers use a rectifier, the output layer a sigmoid, so every code
//! lands in `[0,1]^q`. All arithmetic is `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::LossConfig;

pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Encoder parameters: a chain of dense layers from the feature dimension
/// to the code length.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    layers: Vec<Dense>,
}

/// Parameter gradients, shaped like the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

/// Per-layer activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Array2<f64>,
    /// Output of each layer after its nonlinearity; the last one holds the codes.
    activations: Vec<Array2<f64>>,
}

impl Trace {
    pub fn codes(&self) -> &Array2<f64> {
        self.activations.last().expect("encoder has at least one layer")
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Encoder {
    /// `dims = [d, hidden..., q]`, weights and biases drawn uniformly from
    /// `±1/sqrt(fan_in)`.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut layer = Dense::zeros(w[0], w[1]);
                layer.weights.mapv_inplace(|_| rng.random_range(-bound..=bound));
                layer.bias.mapv_inplace(|_| rng.random_range(-bound..=bound));
                layer
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("encoder needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weights.nrows() {
                return Err(Error::Dimension {
                    expected: layer.weights.nrows(),
                    actual: layer.bias.len(),
                });
            }
            if l > 0 && layers[l - 1].weights.nrows() != layer.weights.ncols() {
                return Err(Error::Dimension {
                    expected: layers[l - 1].weights.nrows(),
                    actual: layer.weights.ncols(),
                });
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite parameter in layer {l}")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weights.nrows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn code_len(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Relaxed codes for a batch of feature rows.
    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut trace = self.forward_trace(inputs)?;
        Ok(trace.activations.pop().unwrap())
    }

    pub fn forward_trace(&self, inputs: ArrayView2<'_, f64>) -> Result<Trace> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: inputs.ncols(),
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite encoder input".into()));
        }
        let last = self.layers.len() - 1;
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().map_or(inputs, |a| a.view());
            let mut z = prev.dot(&layer.weights.t()) + &layer.bias;
            if l == last {
                z.mapv_inplace(sigmoid);
            } else {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z);
        }
        Ok(Trace {
            inputs: inputs.to_owned(),
            activations,
        })
    }

    /// Chains `grad_codes` (d objective / d code) back to the parameters.
    pub fn backward(&self, trace: &Trace, grad_codes: ArrayView2<'_, f64>) -> Result<Gradients> {
        let codes = trace.codes();
        if grad_codes.dim() != codes.dim() {
            return Err(Error::Dimension {
                expected: codes.len(),
                actual: grad_codes.len(),
            });
        }
        let mut delta = Zip::from(&grad_codes)
            .and(codes)
            .map_collect(|&g, &s| g * s * (1.0 - s));
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let prev = if l == 0 {
                trace.inputs.view()
            } else {
                trace.activations[l - 1].view()
            };
            grads.push(Dense {
                weights: delta.t().dot(&prev),
                bias: delta.sum_axis(Axis(0)),
            });
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].weights);
                Zip::from(&mut back).and(&prev).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Parameters in checkpoint order: per layer, weights row-major then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    /// SHA-256 over the little-endian parameter blob, as lowercase hex.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.flat_params() {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Config(format!("invalid layer sizes {dims:?}")));
    }
    Ok(())
}

/// `[d, hidden..., q]`.
pub fn layer_dims(input: usize, hidden: &[usize], bits: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(bits);
    dims
}

impl Gradients {
    pub fn zeros_like(enc: &Encoder) -> Self {
        Self {
            layers: enc
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.ncols(), l.weights.nrows()))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `decay_factor` every this many epochs;
    /// 0 disables the schedule.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            decay_every: 50,
            decay_factor: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && self.decay_factor > 0.0
            && self.decay_factor.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 {
            return self.lr;
        }
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Momentum SGD with L2 weight decay:
/// `v ← μv − lr·(g + wd·w)`, `w ← w + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Dense>,
    lr: f64,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, enc: &Encoder) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: Gradients::zeros_like(enc).layers,
            lr: cfg.lr,
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn velocity(&self) -> &[Dense] {
        &self.velocity
    }

    /// Applies the step-decay schedule for the epoch about to start.
    pub fn begin_epoch(&mut self, epoch: usize) {
        self.lr = self.cfg.lr_at_epoch(epoch);
    }

    pub fn step(&mut self, enc: &mut Encoder, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != enc.layers.len() {
            return Err(Error::Dimension {
                expected: enc.layers.len(),
                actual: grads.layers.len(),
            });
        }
        for (g, w) in grads.layers.iter().zip(&enc.layers) {
            if g.weights.dim() != w.weights.dim() || g.bias.dim() != w.bias.dim() {
                return Err(Error::Dimension {
                    expected: w.param_count(),
                    actual: g.param_count(),
                });
            }
        }
        let (mu, lr, wd) = (self.cfg.momentum, self.lr, self.cfg.weight_decay);
        let mut next = self.velocity.clone();
        for ((v, g), w) in next.iter_mut().zip(&grads.layers).zip(&enc.layers) {
            Zip::from(&mut v.weights)
                .and(&g.weights)
                .and(&w.weights)
                .for_each(|v, &g, &w| *v = mu * *v - lr * (g + wd * w));
            Zip::from(&mut v.bias)
                .and(&g.bias)
                .and(&w.bias)
                .for_each(|v, &g, &w| *v = mu * *v - lr * (g + wd * w));
        }
        if let Some(l) = next
            .iter()
            .position(|v| v.weights.iter().chain(&v.bias).any(|x| !x.is_finite()))
        {
            return Err(Error::Numeric(format!(
                "non-finite parameter update in layer {l} (lr {lr:e})"
            )));
        }
        for (w, v) in enc.layers.iter_mut().zip(&next) {
            w.weights += &v.weights;
            w.bias += &v.bias;
        }
        self.velocity = next;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: Vec<usize>,
    pub sgd: SgdConfig,
    #[serde(default)]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub method: Option<String>,
    pub epoch: usize,
    pub seed: u64,
}

/// One JSON header line, then the parameters as little-endian `f64`s.
pub fn write_checkpoint<W: Write>(mut w: W, header: &CheckpointHeader, enc: &Encoder) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for v in enc.flat_params() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Encoder)> {
    let bad = |msg: String| Error::InvalidInput(format!("checkpoint: {msg}"));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    let mut enc = Encoder::zeros(&header.dims)?;
    let blob = &bytes[nl + 1..];
    if blob.len() != enc.param_count() * 8 {
        return Err(bad(format!(
            "expected {} parameter bytes, found {}",
            enc.param_count() * 8,
            blob.len()
        )));
    }
    let flat: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter".into()));
    }
    enc.set_flat_params(&flat)?;
    Ok((header, enc))
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, enc: &Encoder) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, header, enc).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Encoder)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
