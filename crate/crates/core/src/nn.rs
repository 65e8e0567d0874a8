//! Small dense feedforward networks with exact backpropagation.
//!
//! Hidden layers use a rectifier and the output layer is linear. Weights are
//! stored input-major (`w[i * outputs + o]` connects input `i` to output `o`)
//! so forward and backward passes can skip zero inputs, which dominate the
//! one-hot and count features fed to these nets.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer { inputs, outputs, w: vec![0.0; inputs * outputs], b: vec![0.0; outputs] }
    }

    pub fn weight(&self, input: usize, output: usize) -> f64 {
        self.w[input * self.outputs + output]
    }

    pub fn set_weight(&mut self, input: usize, output: usize, value: f64) {
        self.w[input * self.outputs + output] = value;
    }

    pub fn bias(&self, output: usize) -> f64 {
        self.b[output]
    }

    pub fn set_bias(&mut self, output: usize, value: f64) {
        self.b[output] = value;
    }

    fn affine_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w[i * self.outputs..(i + 1) * self.outputs];
            for (o, &wio) in out.iter_mut().zip(row) {
                *o += xi * wio;
            }
        }
    }
}

/// Feedforward net: affine + rectifier on every hidden layer, affine output.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Cached activations of a batch forward pass, consumed by [`DenseNet::backprop`].
#[derive(Clone, Debug)]
pub struct Trace {
    batch: usize,
    /// `acts[0]` is the input batch, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Flat `batch x outputs` network outputs.
    pub fn outputs(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input layer")
    }

    pub fn output(&self, row: usize) -> &[f64] {
        let out = self.outputs();
        let width = out.len() / self.batch.max(1);
        &out[row * width..(row + 1) * width]
    }
}

/// Parameter gradients with the same shapes as the net.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            layers: net.layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|g| *g *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, b)| *a += b);
            b.iter_mut().zip(ob).for_each(|(a, b)| *a += b);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b.iter()).copied()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|(w, b)| w.iter().chain(b.iter()).all(|g| *g == 0.0))
    }
}

/// One supervised example for the masked squared-error loss.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub target: &'a [f64],
    /// Outputs with `false` contribute nothing to the loss.
    pub mask: Option<&'a [bool]>,
}

impl DenseNet {
    /// Fan-in/fan-out scaled uniform init, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = DenseNet::zeros(layer_sizes)?;
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.w {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes {layer_sizes:?} need at least two non-zero entries"
            )));
        }
        let layers = layer_sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(DenseNet { layers })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs).chain(self.layers.iter().map(|l| l.outputs)).collect()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|p| p.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            layer.affine_into(&cur, &mut next);
            if li < last {
                relu(&mut next);
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Forward pass over a batch, keeping activations for backprop.
    pub fn trace<X: AsRef<[f64]>>(&self, inputs: &[X]) -> Result<Trace> {
        let batch = inputs.len();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut first = Vec::with_capacity(batch * self.input_size());
        for x in inputs {
            let x = x.as_ref();
            self.check_input(x.len())?;
            first.extend_from_slice(x);
        }
        acts.push(first);
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let prev = &acts[li];
            let mut out = vec![0.0; batch * layer.outputs];
            for b in 0..batch {
                let x = &prev[b * layer.inputs..(b + 1) * layer.inputs];
                let o = &mut out[b * layer.outputs..(b + 1) * layer.outputs];
                layer.affine_into(x, o);
                if li < last {
                    relu(o);
                }
            }
            acts.push(out);
        }
        Ok(Trace { batch, acts })
    }

    /// Gradients of `sum_b out_grad[b] . y_b` with respect to every parameter,
    /// where `out_grad` is the flat `batch x outputs` derivative of the loss.
    pub fn backprop(&self, trace: &Trace, out_grad: &[f64]) -> Result<Gradients> {
        let batch = trace.batch;
        let expected = batch * self.output_size();
        if out_grad.len() != expected {
            return Err(Error::Dimension { expected, got: out_grad.len() });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = out_grad.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &trace.acts[li];
            let (gw, gb) = &mut grads.layers[li];
            for b in 0..batch {
                let d = &delta[b * layer.outputs..(b + 1) * layer.outputs];
                let x = &input[b * layer.inputs..(b + 1) * layer.inputs];
                for (g, &dv) in gb.iter_mut().zip(d) {
                    *g += dv;
                }
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &mut gw[i * layer.outputs..(i + 1) * layer.outputs];
                    for (g, &dv) in row.iter_mut().zip(d) {
                        *g += xi * dv;
                    }
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; batch * layer.inputs];
                for b in 0..batch {
                    let d = &delta[b * layer.outputs..(b + 1) * layer.outputs];
                    let x = &input[b * layer.inputs..(b + 1) * layer.inputs];
                    let p = &mut prev[b * layer.inputs..(b + 1) * layer.inputs];
                    for i in 0..layer.inputs {
                        // rectifier derivative, taken as 0 at the kink
                        if x[i] <= 0.0 {
                            continue;
                        }
                        let row = &layer.w[i * layer.outputs..(i + 1) * layer.outputs];
                        p[i] = row.iter().zip(d).map(|(w, dv)| w * dv).sum();
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    /// Masked mean squared error: `L = 1/B sum_b sum_k m_bk (y_bk - t_bk)^2`.
    /// Returns the loss and its exact gradients.
    pub fn mse_gradients(&self, batch: &[Sample<'_>]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let outs = self.output_size();
        let inputs: Vec<&[f64]> = batch.iter().map(|s| s.input).collect();
        let trace = self.trace(&inputs)?;
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; batch.len() * outs];
        for (b, s) in batch.iter().enumerate() {
            if s.target.len() != outs {
                return Err(Error::Dimension { expected: outs, got: s.target.len() });
            }
            if let Some(m) = s.mask {
                if m.len() != outs {
                    return Err(Error::Dimension { expected: outs, got: m.len() });
                }
            }
            let y = trace.output(b);
            for k in 0..outs {
                if s.mask.is_some_and(|m| !m[k]) {
                    continue;
                }
                let e = y[k] - s.target[k];
                loss += e * e / n;
                grad[b * outs + k] = 2.0 * e / n;
            }
        }
        let g = self.backprop(&trace, &grad)?;
        Ok((loss, g))
    }

    /// Independent deep copy (target network).
    pub fn hard_copy(&self) -> DenseNet {
        self.clone()
    }

    /// Flat parameter vector in layer order (weights then biases).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied()).collect()
    }

    /// Mutable access to every parameter in [`DenseNet::flatten`] order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_size() {
            return Err(Error::Dimension { expected: self.input_size(), got: len });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layer_sizes: self.layer_sizes(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams { weights: l.w.clone(), biases: l.b.clone() })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &NetCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported net checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut net = DenseNet::zeros(&ck.layer_sizes)?;
        if ck.layers.len() != net.layers.len() {
            return Err(Error::Checkpoint("layer count does not match layer_sizes".into()));
        }
        for (layer, p) in net.layers.iter_mut().zip(&ck.layers) {
            if p.weights.len() != layer.w.len() || p.biases.len() != layer.b.len() {
                return Err(Error::Checkpoint("parameter array has the wrong length".into()));
            }
            layer.w.copy_from_slice(&p.weights);
            layer.b.copy_from_slice(&p.biases);
        }
        if !net.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: NetCheckpoint = serde_json::from_reader(f)?;
        DenseNet::from_checkpoint(&ck)
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "droplab.densenet";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: layer sizes plus per-layer parameter arrays. Weights are
/// listed input-major (`weights[i * out + o]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub format: String,
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<LayerParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Adaptive-moment optimizer state for one net.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        Adam::with_params(net, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_params(net: &DenseNet, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let n = net.num_params();
        Adam { lr, beta1, beta2, eps, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected update.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        if net.num_params() != self.m.len() {
            return Err(Error::Dimension { expected: self.m.len(), got: net.num_params() });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut k = 0;
        for (layer, (gw, gb)) in net.layers.iter_mut().zip(&grads.layers) {
            if gw.len() != layer.w.len() || gb.len() != layer.b.len() {
                return Err(Error::Dimension { expected: layer.w.len(), got: gw.len() });
            }
            for (p, g) in layer.w.iter_mut().chain(layer.b.iter_mut()).zip(gw.iter().chain(gb.iter())) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
                k += 1;
            }
        }
        Ok(())
    }
}

/// Index of the largest value among `active` entries; ties go to the lowest index.
pub fn masked_argmax(values: &[f64], active: usize) -> usize {
    let mut best = 0;
    for i in 1..active.min(values.len()) {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}
