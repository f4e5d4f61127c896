//! Small frozen-base classifiers whose linear layers can carry adapters.
//!
//! Two architectures are provided: a single linear layer (features → logits),
//! and an MLP `[linear → layernorm → relu] × 3 → head` whose three body
//! linears are adapted. Backprop is written out by hand; it reaches the
//! adapter vector `v`, and optionally the head or (for pretraining) every
//! linear layer.
//!
//! Batch reductions split the index list into fixed chunks of
//! [`REDUCE_CHUNK`] examples, reduce each chunk sequentially (possibly on
//! different threads), then add the chunk partials in order. The result is
//! therefore bit-identical for any worker count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::data::LabeledDataset;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{norm2, Matrix};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};

pub const REDUCE_CHUNK: usize = 64;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn random(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (2.0 / input as f64).sqrt();
        let weight = Matrix::from_fn(output, input, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        });
        Self {
            weight,
            bias: vec![0.0; output],
        }
    }

    fn num_params(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        for (yi, b) in y.iter_mut().zip(&self.bias) {
            *yi += b;
        }
        Ok(y)
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(&self.bias);
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        let nw = self.weight.data().len();
        self.weight.data_mut().copy_from_slice(&src[..nw]);
        let nb = self.bias.len();
        self.bias.copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }

    /// Adds `dy ⊗ x` and `dy` into a flat `[weight, bias]` slice.
    fn accumulate_grad(dst: &mut [f64], dy: &[f64], x: &[f64]) {
        let (dw, db) = dst.split_at_mut(dy.len() * x.len());
        for (i, &g) in dy.iter().enumerate() {
            for (d, xj) in dw[i * x.len()..(i + 1) * x.len()].iter_mut().zip(x) {
                *d += g * xj;
            }
            db[i] += g;
        }
    }
}

/// Layer normalization with a frozen per-feature affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Linear(Linear),
    LayerNorm(LayerNorm),
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp,
}

/// Logits of one example plus its margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// Correct logit minus the best other logit.
    pub margin: f64,
    /// `margin > 0`; exact ties count as wrong.
    pub correct: bool,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>, label: usize) -> Self {
        let (_, best_other) = runner_up(&logits, label);
        let margin = logits[label] - best_other;
        Self {
            logits,
            margin,
            correct: margin > 0.0,
        }
    }
}

/// Index and value of the largest logit other than `label`.
fn runner_up(logits: &[f64], label: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (j, &z) in logits.iter().enumerate() {
        if j != label && z > best.1 {
            best = (j, z);
        }
    }
    best
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[i]` is the input of layer `i`; the last entry is the body output.
    inputs: Vec<Vec<f64>>,
    /// Normalized activations and inverse std of layer-norm layers.
    ln_cache: Vec<Option<(Vec<f64>, f64)>>,
    pub logits: Vec<f64>,
}

/// Which gradients [`FrozenModel::backward`] should produce beyond the
/// per-module upstream gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardRequest {
    pub head: bool,
    pub layers: bool,
}

#[derive(Debug, Clone)]
pub struct BackwardOut {
    /// `∂L/∂(output of adapted module m)`.
    pub module_upstream: Vec<Vec<f64>>,
    /// Inputs of the adapted modules for the traced example.
    pub module_inputs: Vec<Vec<f64>>,
    /// Flat `[weight, bias]` head gradient.
    pub head: Option<Vec<f64>>,
    /// Flat gradient over every body linear layer (in order) then the head.
    pub layers: Option<Vec<f64>>,
}

/// Frozen classifier body with an optional trainable head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenModel {
    layers: Vec<Layer>,
    adapted: Vec<usize>,
    head: Option<Linear>,
    input_dim: usize,
    num_classes: usize,
}

impl FrozenModel {
    pub fn from_parts(layers: Vec<Layer>, adapted: Vec<usize>, head: Option<Linear>) -> Result<Self> {
        if adapted.is_empty() {
            return Err(Error::Config("model has no adapted layers".into()));
        }
        if adapted.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("adapted layer indices must be strictly increasing".into()));
        }
        for &a in &adapted {
            if !matches!(layers.get(a), Some(Layer::Linear(_))) {
                return Err(Error::Config(format!("adapted layer {a} is not a linear layer")));
            }
        }
        let input_dim = match layers.first() {
            Some(Layer::Linear(l)) => l.weight.cols(),
            _ => return Err(Error::Config("first layer must be linear".into())),
        };
        let body_out = layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Linear(l) => Some(l.weight.rows()),
                _ => None,
            })
            .expect("first layer is linear");
        let num_classes = match &head {
            Some(h) => {
                if h.weight.cols() != body_out {
                    return Err(shape_err("head", body_out, h.weight.cols()));
                }
                h.weight.rows()
            }
            None => body_out,
        };
        if num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(Self {
            layers,
            adapted,
            head,
            input_dim,
            num_classes,
        })
    }

    /// `features → classes`, the one linear layer adapted.
    pub fn linear_classifier(input_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![Layer::Linear(Linear::random(input_dim, classes, &mut rng))];
        Self::from_parts(layers, vec![0], None)
    }

    /// `[linear → layernorm → relu] × 3 → head`, the three body linears adapted.
    pub fn mlp(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut adapted = Vec::new();
        let mut width = input_dim;
        for _ in 0..3 {
            adapted.push(layers.len());
            layers.push(Layer::Linear(Linear::random(width, hidden, &mut rng)));
            layers.push(Layer::LayerNorm(LayerNorm::new(hidden)));
            layers.push(Layer::Relu);
            width = hidden;
        }
        let head = Linear::random(hidden, classes, &mut rng);
        Self::from_parts(layers, adapted, Some(head))
    }

    pub fn build(arch: Architecture, input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        match arch {
            Architecture::Linear => Self::linear_classifier(input_dim, classes, seed),
            Architecture::Mlp => Self::mlp(input_dim, hidden, classes, seed),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of adapted modules `M`.
    pub fn num_adapted(&self) -> usize {
        self.adapted.len()
    }

    pub fn adapted_layer_indices(&self) -> &[usize] {
        &self.adapted
    }

    pub fn adapted_weight(&self, module: usize) -> &Matrix {
        match &self.layers[self.adapted[module]] {
            Layer::Linear(l) => &l.weight,
            _ => unreachable!("checked at construction"),
        }
    }

    pub fn adapted_weights(&self) -> Vec<&Matrix> {
        (0..self.num_adapted()).map(|m| self.adapted_weight(m)).collect()
    }

    /// Smallest dimension over the adapted weights.
    pub fn min_adapted_dim(&self) -> usize {
        self.adapted_weights()
            .iter()
            .map(|w| w.rows().min(w.cols()))
            .min()
            .unwrap_or(0)
    }

    /// Folds `delta` into the weight of adapted module `module`.
    pub fn merge_delta(&mut self, module: usize, delta: &Matrix) -> Result<()> {
        let idx = self.adapted[module];
        match &mut self.layers[idx] {
            Layer::Linear(l) => l.weight.add_assign(delta),
            _ => unreachable!("checked at construction"),
        }
    }

    /// Merges every module's `ΔW` and returns the merged deltas.
    pub fn merge_adapter(&mut self, adapter: &AdapterState) -> Result<Vec<Matrix>> {
        self.check_adapter(adapter)?;
        let deltas = (0..adapter.num_modules())
            .map(|m| adapter.delta(m))
            .collect::<Result<Vec<_>>>()?;
        for (m, d) in deltas.iter().enumerate() {
            self.merge_delta(m, d)?;
        }
        Ok(deltas)
    }

    pub fn head(&self) -> Option<&Linear> {
        self.head.as_ref()
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    pub fn head_params(&self) -> Option<Vec<f64>> {
        self.head.as_ref().map(|h| {
            let mut out = Vec::with_capacity(h.num_params());
            h.write_params(&mut out);
            out
        })
    }

    pub fn set_head_params(&mut self, params: &[f64]) -> Result<()> {
        let head = self
            .head
            .as_mut()
            .ok_or_else(|| Error::Config("model has no head".into()))?;
        if params.len() != head.num_params() {
            return Err(shape_err("set_head_params", head.num_params(), params.len()));
        }
        head.read_params(params);
        Ok(())
    }

    /// All linear parameters (body linears in order, then the head).
    pub fn linear_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Linear(l) = l {
                l.write_params(&mut out);
            }
        }
        if let Some(h) = &self.head {
            h.write_params(&mut out);
        }
        out
    }

    pub fn set_linear_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_linear_params() {
            return Err(shape_err("set_linear_params", self.num_linear_params(), params.len()));
        }
        let mut at = 0;
        for l in &mut self.layers {
            if let Layer::Linear(l) = l {
                at += l.read_params(&params[at..]);
            }
        }
        if let Some(h) = &mut self.head {
            h.read_params(&params[at..]);
        }
        Ok(())
    }

    pub fn num_linear_params(&self) -> usize {
        let body: usize = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Linear(l) => l.num_params(),
                _ => 0,
            })
            .sum();
        body + self.head.as_ref().map_or(0, Linear::num_params)
    }

    fn num_head_params(&self) -> usize {
        self.head.as_ref().map_or(0, Linear::num_params)
    }

    fn check_adapter(&self, adapter: &AdapterState) -> Result<()> {
        if adapter.num_modules() != self.num_adapted() {
            return Err(shape_err("adapter", self.num_adapted(), adapter.num_modules()));
        }
        Ok(())
    }

    fn module_of_layer(&self, layer: usize) -> Option<usize> {
        self.adapted.iter().position(|&a| a == layer)
    }

    /// Forward pass keeping everything backprop needs. With an adapter,
    /// `ΔW·h` is added live at every adapted layer.
    pub fn trace(&self, x: &[f64], adapter: Option<&AdapterState>) -> Result<Trace> {
        if x.len() != self.input_dim {
            return Err(shape_err("forward", self.input_dim, x.len()));
        }
        if let Some(a) = adapter {
            self.check_adapter(a)?;
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut ln_cache = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = match layer {
                Layer::Linear(l) => {
                    let mut y = l.forward(&cur)?;
                    if let (Some(a), Some(m)) = (adapter, self.module_of_layer(i)) {
                        for (yi, d) in y.iter_mut().zip(a.apply(m, &cur)?) {
                            *yi += d;
                        }
                    }
                    (y, None)
                }
                Layer::LayerNorm(ln) => {
                    let n = cur.len() as f64;
                    let mean = cur.iter().sum::<f64>() / n;
                    let var = cur.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = cur.iter().map(|v| (v - mean) * inv).collect();
                    let y = xhat
                        .iter()
                        .zip(ln.gamma.iter().zip(&ln.beta))
                        .map(|(h, (g, b))| g * h + b)
                        .collect();
                    (y, Some((xhat, inv)))
                }
                Layer::Relu => (cur.iter().map(|v| v.max(0.0)).collect(), None),
            };
            inputs.push(std::mem::replace(&mut cur, next));
            ln_cache.push(cache);
        }
        let logits = match &self.head {
            Some(h) => h.forward(&cur)?,
            None => cur.clone(),
        };
        inputs.push(cur);
        Ok(Trace {
            inputs,
            ln_cache,
            logits,
        })
    }

    pub fn forward(&self, x: &[f64], label: usize, adapter: Option<&AdapterState>) -> Result<Prediction> {
        Ok(Prediction::from_logits(self.trace(x, adapter)?.logits, label))
    }

    /// Input activations of every adapted layer.
    pub fn hidden_states(&self, x: &[f64], adapter: Option<&AdapterState>) -> Result<Vec<Vec<f64>>> {
        let t = self.trace(x, adapter)?;
        Ok(self.adapted.iter().map(|&i| t.inputs[i].clone()).collect())
    }

    /// Backpropagates `dlogits` through the traced pass.
    pub fn backward(
        &self,
        trace: &Trace,
        dlogits: &[f64],
        adapter: Option<&AdapterState>,
        req: BackwardRequest,
    ) -> Result<BackwardOut> {
        if dlogits.len() != self.num_classes {
            return Err(shape_err("backward", self.num_classes, dlogits.len()));
        }
        let body_out = trace.inputs.last().expect("nonempty trace");
        let mut head_grad = None;
        let mut layer_grad = req.layers.then(|| vec![0.0; self.num_linear_params()]);
        let mut dy = match &self.head {
            Some(h) => {
                if req.head || req.layers {
                    let mut g = vec![0.0; h.num_params()];
                    Linear::accumulate_grad(&mut g, dlogits, body_out);
                    if let Some(lg) = layer_grad.as_mut() {
                        let off = lg.len() - g.len();
                        lg[off..].copy_from_slice(&g);
                    }
                    if req.head {
                        head_grad = Some(g);
                    }
                }
                h.weight.tr_matvec(dlogits)?
            }
            None => dlogits.to_vec(),
        };

        let mut module_upstream = vec![Vec::new(); self.num_adapted()];
        let mut module_inputs = vec![Vec::new(); self.num_adapted()];
        // flat offset of each linear layer's block in `layer_grad`
        let mut offset = self.num_linear_params() - self.num_head_params();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            dy = match layer {
                Layer::Linear(l) => {
                    offset -= l.num_params();
                    if let Some(lg) = layer_grad.as_mut() {
                        Linear::accumulate_grad(&mut lg[offset..offset + l.num_params()], &dy, x);
                    }
                    let mut dx = l.weight.tr_matvec(&dy)?;
                    if let Some(m) = self.module_of_layer(i) {
                        if let Some(a) = adapter {
                            for (d, e) in dx.iter_mut().zip(a.apply_transpose(m, &dy)?) {
                                *d += e;
                            }
                        }
                        module_inputs[m] = x.clone();
                        module_upstream[m] = dy;
                    }
                    dx
                }
                Layer::LayerNorm(ln) => {
                    let (xhat, inv) = trace.ln_cache[i].as_ref().expect("layernorm cache");
                    let n = xhat.len() as f64;
                    let dxhat: Vec<f64> = dy.iter().zip(&ln.gamma).map(|(d, g)| d * g).collect();
                    let sum: f64 = dxhat.iter().sum();
                    let dot_xhat: f64 = dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum();
                    dxhat
                        .iter()
                        .zip(xhat)
                        .map(|(d, h)| inv / n * (n * d - sum - h * dot_xhat))
                        .collect()
                }
                Layer::Relu => dy
                    .iter()
                    .zip(x)
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect(),
            };
        }
        Ok(BackwardOut {
            module_upstream,
            module_inputs,
            head: head_grad,
            layers: layer_grad,
        })
    }

    /// Flat `∂/∂v` (groups concatenated) from a backward pass.
    pub fn adapter_grad(&self, back: &BackwardOut, adapter: &AdapterState, out: &mut [f64]) -> Result<()> {
        let offsets = group_offsets(adapter);
        for m in 0..self.num_adapted() {
            let g = adapter.modules()[m].group;
            let phi = adapter.module_feature(m, &back.module_inputs[m], &back.module_upstream[m])?;
            for (o, p) in out[offsets[g]..].iter_mut().zip(phi) {
                *o += p;
            }
        }
        Ok(())
    }

    /// Feature vector `φ(x)` of the margin: for every tying group, the sum
    /// over its modules of the feature map with the margin gradient at the
    /// module output as readout. `⟨v, φ(x)⟩` is the first-order margin change
    /// produced by the adapter.
    pub fn margin_features(&self, x: &[f64], label: usize, adapter: &AdapterState) -> Result<Vec<f64>> {
        let trace = self.trace(x, Some(adapter))?;
        let (rival, _) = runner_up(&trace.logits, label);
        let mut dlogits = vec![0.0; self.num_classes];
        dlogits[label] = 1.0;
        dlogits[rival] = -1.0;
        let back = self.backward(&trace, &dlogits, Some(adapter), BackwardRequest::default())?;
        let mut phi = vec![0.0; adapter.num_params()];
        self.adapter_grad(&back, adapter, &mut phi)?;
        Ok(phi)
    }
}

fn group_offsets(adapter: &AdapterState) -> Vec<usize> {
    let mut offs = Vec::with_capacity(adapter.num_groups());
    let mut at = 0;
    for g in adapter.groups() {
        offs.push(at);
        at += g.v.len();
    }
    offs
}

/// Softmax cross-entropy of one example and `∂/∂logits`.
fn xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Sums `f(i, acc)` over `indices` with the fixed-chunk reduction described
/// in the module docs. Returns the summed scalar and accumulator.
pub fn chunked_sum<F>(indices: &[usize], width: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &mut [f64]) -> Result<f64> + Sync,
{
    let partials: Vec<Result<(f64, Vec<f64>)>> = indices
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; width];
            let mut s = 0.0;
            for &i in chunk {
                s += f(i, &mut acc)?;
            }
            Ok((s, acc))
        })
        .collect();
    let mut total = vec![0.0; width];
    let mut s = 0.0;
    for p in partials {
        let (ps, acc) = p?;
        s += ps;
        for (t, a) in total.iter_mut().zip(acc) {
            *t += a;
        }
    }
    Ok((s, total))
}

/// Mean loss and gradients over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub loss: f64,
    /// Per tying group; empty without an adapter.
    pub grad_v: Vec<Vec<f64>>,
    /// Flat `[weight, bias]`; `None` unless the head was requested.
    pub grad_head: Option<Vec<f64>>,
}

impl LossGrads {
    pub fn grad_v_flat(&self) -> Vec<f64> {
        self.grad_v.concat()
    }
}

/// Mean cross-entropy over `batch` (indices into `data`) with gradients for
/// the adapter vector and, when `train_head`, the head.
pub fn xent_loss_and_grads(
    model: &FrozenModel,
    data: &LabeledDataset,
    batch: &[usize],
    adapter: Option<&AdapterState>,
    train_head: bool,
) -> Result<LossGrads> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if train_head && !model.has_head() {
        return Err(Error::Config("model has no head to train".into()));
    }
    let nv = adapter.map_or(0, AdapterState::num_params);
    let nh = if train_head { model.num_head_params() } else { 0 };
    let req = BackwardRequest {
        head: train_head,
        layers: false,
    };
    let (loss, acc) = chunked_sum(batch, nv + nh, |i, acc| {
        let trace = model.trace(data.x(i), adapter)?;
        let (loss, dlogits) = xent(&trace.logits, data.y(i));
        let back = model.backward(&trace, &dlogits, adapter, req)?;
        if let Some(a) = adapter {
            model.adapter_grad(&back, a, &mut acc[..nv])?;
        }
        if let Some(h) = back.head {
            for (o, g) in acc[nv..].iter_mut().zip(h) {
                *o += g;
            }
        }
        Ok(loss)
    })?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad_v = Vec::new();
    if let Some(a) = adapter {
        let mut at = 0;
        for g in a.groups() {
            grad_v.push(acc[at..at + g.v.len()].iter().map(|x| x * scale).collect());
            at += g.v.len();
        }
    }
    let grad_head = train_head.then(|| acc[nv..].iter().map(|x| x * scale).collect());
    Ok(LossGrads {
        loss: loss * scale,
        grad_v,
        grad_head,
    })
}

/// Mean cross-entropy and the flat gradient over every linear parameter.
pub fn full_loss_and_grads(model: &FrozenModel, data: &LabeledDataset, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let req = BackwardRequest {
        head: false,
        layers: true,
    };
    let (loss, acc) = chunked_sum(batch, model.num_linear_params(), |i, acc| {
        let trace = model.trace(data.x(i), None)?;
        let (loss, dlogits) = xent(&trace.logits, data.y(i));
        let back = model.backward(&trace, &dlogits, None, req)?;
        for (o, g) in acc.iter_mut().zip(back.layers.expect("requested")) {
            *o += g;
        }
        Ok(loss)
    })?;
    let scale = 1.0 / batch.len() as f64;
    Ok((loss * scale, acc.into_iter().map(|x| x * scale).collect()))
}

/// Accuracy, failure indices and per-example predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub failures: Vec<usize>,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn margins(&self) -> Vec<f64> {
        self.predictions.iter().map(|p| p.margin).collect()
    }

    pub fn correct_count(&self) -> usize {
        self.predictions.len() - self.failures.len()
    }
}

pub fn evaluate(model: &FrozenModel, data: &LabeledDataset, adapter: Option<&AdapterState>) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let predictions = (0..data.len())
        .into_par_iter()
        .map(|i| model.forward(data.x(i), data.y(i), adapter))
        .collect::<Result<Vec<_>>>()?;
    let failures: Vec<usize> = predictions
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.correct)
        .map(|(i, _)| i)
        .collect();
    let n = predictions.len();
    Ok(Evaluation {
        accuracy: (n - failures.len()) as f64 / n as f64,
        failures,
        predictions,
    })
}

/// `H`: the largest 2-norm of any adapted layer's input over the dataset.
pub fn max_hidden_norm(model: &FrozenModel, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let norms = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let hs = model.hidden_states(data.x(i), None)?;
            Ok(hs.iter().map(|h| norm2(h)).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(norms.into_iter().fold(0.0, f64::max))
}

/// Full-parameter training used to give the base weights a non-degenerate
/// spectrum before freezing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Trains every linear parameter with AdamW; returns the per-step losses.
pub fn pretrain(model: &mut FrozenModel, data: &LabeledDataset, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch_size must be positive".into()));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.lr, steps_per_epoch * cfg.epochs, 0.1);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        model.num_linear_params(),
    );
    let mut params = model.linear_params();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(steps_per_epoch * cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = full_loss_and_grads(model, data, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { what: "pretraining loss", round: 0 });
            }
            opt.step(&mut params, &grads, schedule.lr(step));
            model.set_linear_params(&params)?;
            losses.push(loss);
            step += 1;
        }
    }
    Ok(losses)
}
