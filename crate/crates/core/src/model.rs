//! Click model: hashed embeddings feeding a first-order term, a second-order
//! factorization-machine term and a ReLU MLP with dropout on its hidden
//! layers. Trained one example at a time with Adagrad.
//!
//! ```text
//! logit = bias + Σ_f w_f + ½(‖Σ_f e_f‖² − Σ_f ‖e_f‖²) + mlp([e_1 … e_F])
//! ```
//!
//! Dropout is inverted: kept hidden activations are divided by the keep
//! probability, so the deterministic pass needs no rescaling.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureVector, DUMMY_INDEX, NUM_FIELDS};
use crate::rng::SimRng;

/// Logits are clamped to this magnitude when converted to probabilities so
/// that predictions stay strictly inside (0, 1).
const LOGIT_LIMIT: f64 = 35.0;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("non-finite value in {0}")]
    Diverged(&'static str),
    #[error("index {index} outside hash space {space} of field {field}")]
    IndexOutOfRange { field: usize, index: u32, space: u32 },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model snapshot: {0}")]
    Snapshot(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub adagrad_eps: f64,
    /// Starting value of every squared-gradient accumulator.
    pub adagrad_init_accum: f64,
    /// Std of the initial embedding entries.
    pub init_std: f64,
    /// L2 penalty on the embedding rows an example touches, added to their
    /// gradient before the Adagrad step.
    pub embedding_l2: f64,
    /// Per-field override of `init_std`, in field order.
    pub field_init_std: Option<[f64; NUM_FIELDS]>,
    pub init_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 8,
            hidden: vec![32, 16],
            dropout: 0.2,
            learning_rate: 0.05,
            adagrad_eps: 1e-8,
            adagrad_init_accum: 1.0,
            embedding_l2: 0.02,
            init_std: 0.05,
            field_init_std: Some([0.5, 0.05, 0.05, 0.05, 0.05]),
            init_bias: -4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty with positive widths");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.adagrad_eps > 0.0) {
            return bad("learning_rate and adagrad_eps must be positive");
        }
        if !(self.adagrad_init_accum >= 0.0) || !self.adagrad_init_accum.is_finite() {
            return bad("adagrad_init_accum must be finite and non-negative");
        }
        if !(self.init_std >= 0.0) || !self.init_bias.is_finite() {
            return bad("init_std must be non-negative and init_bias finite");
        }
        if !(self.embedding_l2 >= 0.0) || !self.embedding_l2.is_finite() {
            return bad("embedding_l2 must be finite and non-negative");
        }
        if self.field_init_std.iter().flatten().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return bad("field_init_std entries must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    Deterministic,
    Stochastic,
}

/// Fully connected layer, weights stored row-major as `outputs × inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        }));
    }
}

/// Every trainable parameter of the model. The last entry of `layers` is
/// the single-unit output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub bias: f64,
    pub first_order: Vec<Vec<f64>>,
    /// Per field, `space × dim` row-major.
    pub embeddings: Vec<Vec<f64>>,
    pub layers: Vec<Dense>,
}

impl Params {
    fn zeros(spaces: &[u32; NUM_FIELDS], dim: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut inputs = NUM_FIELDS * dim;
        for &h in hidden {
            layers.push(Dense::zeros(inputs, h));
            inputs = h;
        }
        layers.push(Dense::zeros(inputs, 1));
        Self {
            bias: 0.0,
            first_order: spaces.iter().map(|&s| vec![0.0; s as usize]).collect(),
            embeddings: spaces.iter().map(|&s| vec![0.0; s as usize * dim]).collect(),
            layers,
        }
    }

    fn fill(&mut self, v: f64) {
        self.bias = v;
        self.first_order.iter_mut().flatten().for_each(|x| *x = v);
        self.embeddings.iter_mut().flatten().for_each(|x| *x = v);
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x = v);
        }
    }

    fn all_finite(&self) -> bool {
        self.bias.is_finite()
            && self.first_order.iter().flatten().all(|v| v.is_finite())
            && self.embeddings.iter().flatten().all(|v| v.is_finite())
            && self
                .layers
                .iter()
                .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Keep flags for every hidden unit of one stochastic pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropoutMask {
    pub layers: Vec<Vec<bool>>,
}

impl DropoutMask {
    pub fn all_kept(hidden: &[usize]) -> Self {
        Self {
            layers: hidden.iter().map(|&h| vec![true; h]).collect(),
        }
    }

    /// Each unit kept independently with probability `1 − p`.
    pub fn sample(hidden: &[usize], p: f64, rng: &mut SimRng) -> Self {
        Self {
            layers: hidden
                .iter()
                .map(|&h| (0..h).map(|_| rng.random::<f64>() >= p).collect())
                .collect(),
        }
    }
}

/// Addresses one scalar parameter touched by a given feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Bias,
    FirstOrder { field: usize },
    Embedding { field: usize, k: usize },
    Weight { layer: usize, out: usize, input: usize },
    LayerBias { layer: usize, out: usize },
}

/// Gradient of the log loss for one example. Sparse parts hold only the
/// rows selected by the example's feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub bias: f64,
    pub first_order: [f64; NUM_FIELDS],
    pub embeddings: Vec<Vec<f64>>,
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn get(&self, r: ParamRef) -> f64 {
        match r {
            ParamRef::Bias => self.bias,
            ParamRef::FirstOrder { field } => self.first_order[field],
            ParamRef::Embedding { field, k } => self.embeddings[field][k],
            ParamRef::Weight { layer, out, input } => {
                let l = &self.layers[layer];
                l.weights[out * l.inputs + input]
            }
            ParamRef::LayerBias { layer, out } => self.layers[layer].bias[out],
        }
    }

    fn all_finite(&self) -> bool {
        self.bias.is_finite()
            && self.first_order.iter().all(|v| v.is_finite())
            && self.embeddings.iter().flatten().all(|v| v.is_finite())
            && self
                .layers
                .iter()
                .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Intermediate values of one forward pass.
struct Trace {
    /// Concatenated field embeddings, the MLP input.
    input: Vec<f64>,
    emb_sum: Vec<f64>,
    /// Per hidden layer: pre-activations and post-dropout activations.
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    logit: f64,
}

/// Request-independent part of a pass: everything up to and including the
/// first hidden layer's ReLU.
struct Prefix {
    linear: f64,
    first_pre: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format_version: u32,
    config: ModelConfig,
    spaces: [u32; NUM_FIELDS],
    params: Params,
    accum: Params,
}

#[derive(Debug)]
pub struct CtrModel {
    cfg: ModelConfig,
    spaces: [u32; NUM_FIELDS],
    params: Params,
    /// Adagrad squared-gradient accumulators, shaped like `params`.
    accum: Params,
    forward_passes: AtomicU64,
}

impl Clone for CtrModel {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            spaces: self.spaces,
            params: self.params.clone(),
            accum: self.accum.clone(),
            forward_passes: AtomicU64::new(self.forward_passes()),
        }
    }
}

impl PartialEq for CtrModel {
    /// Compares configuration and all trainable state, not the pass counter.
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg
            && self.spaces == other.spaces
            && self.params == other.params
            && self.accum == other.accum
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-LOGIT_LIMIT, LOGIT_LIMIT)).exp())
}

fn log_loss_from_logit(logit: f64, label: bool) -> f64 {
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    if label {
        softplus - logit
    } else {
        softplus
    }
}

impl CtrModel {
    /// Random initialization: embeddings `N(0, init_std)` (or the field's
    /// entry in `field_init_std`) except the reserved
    /// dummy row, which stays zero; He-normal hidden weights; zero first-order
    /// weights and layer biases.
    pub fn new(cfg: ModelConfig, spaces: [u32; NUM_FIELDS], rng: &mut SimRng) -> Result<Self, ModelError> {
        let mut model = Self::zeros(cfg, spaces)?;
        let dim = model.cfg.embedding_dim;
        let stds = model.cfg.field_init_std.unwrap_or([model.cfg.init_std; NUM_FIELDS]);
        for (table, std) in model.params.embeddings.iter_mut().zip(stds) {
            for (i, v) in table.iter_mut().enumerate() {
                if i / dim != DUMMY_INDEX as usize {
                    *v = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        for layer in &mut model.params.layers {
            let scale = (2.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        model.params.bias = model.cfg.init_bias;
        Ok(model)
    }

    /// All parameters zero.
    pub fn zeros(cfg: ModelConfig, spaces: [u32; NUM_FIELDS]) -> Result<Self, ModelError> {
        cfg.validate()?;
        let params = Params::zeros(&spaces, cfg.embedding_dim, &cfg.hidden);
        let mut accum = params.clone();
        accum.fill(cfg.adagrad_init_accum);
        Ok(Self {
            cfg,
            spaces,
            params,
            accum,
            forward_passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn spaces(&self) -> [u32; NUM_FIELDS] {
        self.spaces
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn dropout(&self) -> f64 {
        self.cfg.dropout
    }

    /// Number of forward passes run since construction or the last reset.
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    fn count(&self, n: u64) {
        self.forward_passes.fetch_add(n, Ordering::Relaxed);
    }

    fn check(&self, fv: &FeatureVector) -> Result<(), ModelError> {
        for (field, (&index, &space)) in fv.indices.iter().zip(&self.spaces).enumerate() {
            if index >= space {
                return Err(ModelError::IndexOutOfRange { field, index, space });
            }
        }
        Ok(())
    }

    fn embedding(&self, field: usize, index: u32) -> &[f64] {
        let dim = self.cfg.embedding_dim;
        let start = index as usize * dim;
        &self.params.embeddings[field][start..start + dim]
    }

    fn keep_prob(&self) -> f64 {
        1.0 - self.cfg.dropout
    }

    /// Gathers embeddings and computes the first-order and FM terms.
    fn embed(&self, fv: &FeatureVector, input: &mut Vec<f64>, emb_sum: &mut Vec<f64>) -> f64 {
        let dim = self.cfg.embedding_dim;
        input.clear();
        emb_sum.clear();
        emb_sum.resize(dim, 0.0);
        let mut linear = self.params.bias;
        let mut sq_norms = 0.0;
        for (field, &index) in fv.indices.iter().enumerate() {
            linear += self.params.first_order[field][index as usize];
            let e = self.embedding(field, index);
            for (s, v) in emb_sum.iter_mut().zip(e) {
                *s += v;
            }
            sq_norms += e.iter().map(|v| v * v).sum::<f64>();
            input.extend_from_slice(e);
        }
        let fm = 0.5 * (emb_sum.iter().map(|v| v * v).sum::<f64>() - sq_norms);
        linear + fm
    }

    fn apply_mask(&self, act: &mut [f64], keep: Option<&[bool]>) {
        let keep_prob = self.keep_prob();
        for (j, a) in act.iter_mut().enumerate() {
            let relu = a.max(0.0);
            *a = match keep {
                None => relu,
                Some(k) if k[j] => relu / keep_prob,
                Some(_) => 0.0,
            };
        }
    }

    fn trace(&self, fv: &FeatureVector, mask: Option<&DropoutMask>) -> Trace {
        let mut input = Vec::with_capacity(NUM_FIELDS * self.cfg.embedding_dim);
        let mut emb_sum = Vec::new();
        let linear = self.embed(fv, &mut input, &mut emb_sum);
        let n_hidden = self.cfg.hidden.len();
        let mut pre = Vec::with_capacity(n_hidden);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_hidden);
        for (l, layer) in self.params.layers[..n_hidden].iter().enumerate() {
            let x = if l == 0 { &input } else { &post[l - 1] };
            let mut z = Vec::with_capacity(layer.outputs);
            layer.forward_into(x, &mut z);
            let mut a = z.clone();
            self.apply_mask(&mut a, mask.map(|m| m.layers[l].as_slice()));
            pre.push(z);
            post.push(a);
        }
        let out_layer = &self.params.layers[n_hidden];
        let last = post.last().map(Vec::as_slice).unwrap_or(&input);
        let mut out = Vec::with_capacity(1);
        out_layer.forward_into(last, &mut out);
        Trace {
            input,
            emb_sum,
            pre,
            post,
            logit: linear + out[0],
        }
    }

    fn prefix(&self, fv: &FeatureVector) -> Prefix {
        let mut input = Vec::with_capacity(NUM_FIELDS * self.cfg.embedding_dim);
        let mut emb_sum = Vec::new();
        let linear = self.embed(fv, &mut input, &mut emb_sum);
        let mut first_pre = Vec::with_capacity(self.cfg.hidden[0]);
        self.params.layers[0].forward_into(&input, &mut first_pre);
        Prefix { linear, first_pre }
    }

    /// Runs the layers after the first hidden pre-activation, drawing the
    /// dropout keep flags in the same order as [`DropoutMask::sample`].
    fn finish(&self, prefix: &Prefix, mut rng: Option<&mut SimRng>, a: &mut Vec<f64>, z: &mut Vec<f64>) -> f64 {
        let p = self.cfg.dropout;
        let keep_prob = self.keep_prob();
        let n_hidden = self.cfg.hidden.len();
        a.clear();
        a.extend_from_slice(&prefix.first_pre);
        for l in 0..n_hidden {
            if l > 0 {
                self.params.layers[l].forward_into(a, z);
                std::mem::swap(a, z);
            }
            match rng.as_deref_mut() {
                Some(rng) if p > 0.0 => {
                    for v in a.iter_mut() {
                        let kept = rng.random::<f64>() >= p;
                        *v = if kept { v.max(0.0) / keep_prob } else { 0.0 };
                    }
                }
                _ => a.iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        self.params.layers[n_hidden].forward_into(a, z);
        prefix.linear + z[0]
    }

    /// Logit of one forward pass with an explicit mask (`None` = no dropout).
    pub fn logit_with_mask(&self, fv: &FeatureVector, mask: Option<&DropoutMask>) -> Result<f64, ModelError> {
        self.check(fv)?;
        self.count(1);
        let logit = self.trace(fv, mask).logit;
        if !logit.is_finite() {
            return Err(ModelError::Diverged("forward pass"));
        }
        Ok(logit)
    }

    /// Click probability. `Stochastic` samples a fresh dropout mask from
    /// `rng`; `Deterministic` ignores `rng`. With dropout 0 both modes are
    /// identical.
    pub fn predict(&self, fv: &FeatureVector, mode: PredictMode, rng: &mut SimRng) -> Result<f64, ModelError> {
        self.check(fv)?;
        self.count(1);
        let prefix = self.prefix(fv);
        let (mut a, mut z) = (Vec::new(), Vec::new());
        let logit = match mode {
            PredictMode::Deterministic => self.finish(&prefix, None, &mut a, &mut z),
            PredictMode::Stochastic => self.finish(&prefix, Some(rng), &mut a, &mut z),
        };
        if !logit.is_finite() {
            return Err(ModelError::Diverged("forward pass"));
        }
        Ok(sigmoid(logit))
    }

    pub fn predict_deterministic(&self, fv: &FeatureVector) -> Result<f64, ModelError> {
        self.check(fv)?;
        self.count(1);
        let prefix = self.prefix(fv);
        let logit = self.finish(&prefix, None, &mut Vec::new(), &mut Vec::new());
        if !logit.is_finite() {
            return Err(ModelError::Diverged("forward pass"));
        }
        Ok(sigmoid(logit))
    }

    /// `n` stochastic passes on one input. The part before the first dropout
    /// layer is shared; each pass draws its own masks. Bit-identical to `n`
    /// sequential `predict(.., Stochastic, rng)` calls on the same stream.
    pub fn predict_samples(&self, fv: &FeatureVector, n: usize, rng: &mut SimRng) -> Result<Vec<f64>, ModelError> {
        self.check(fv)?;
        self.count(n as u64);
        let prefix = self.prefix(fv);
        let (mut a, mut z) = (Vec::new(), Vec::new());
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let logit = self.finish(&prefix, Some(rng), &mut a, &mut z);
            if !logit.is_finite() {
                return Err(ModelError::Diverged("forward pass"));
            }
            out.push(sigmoid(logit));
        }
        Ok(out)
    }

    /// Log loss and its gradient for one example under `mask`.
    pub fn loss_and_gradient(
        &self,
        fv: &FeatureVector,
        label: bool,
        mask: Option<&DropoutMask>,
    ) -> Result<(f64, Gradients), ModelError> {
        self.check(fv)?;
        self.count(1);
        let t = self.trace(fv, mask);
        if !t.logit.is_finite() {
            return Err(ModelError::Diverged("forward pass"));
        }
        let loss = log_loss_from_logit(t.logit, label);
        let g = sigmoid(t.logit) - if label { 1.0 } else { 0.0 };
        let dim = self.cfg.embedding_dim;
        let n_hidden = self.cfg.hidden.len();
        let keep_prob = self.keep_prob();

        let mut embeddings: Vec<Vec<f64>> = fv
            .indices
            .iter()
            .enumerate()
            .map(|(f, &idx)| {
                self.embedding(f, idx)
                    .iter()
                    .zip(&t.emb_sum)
                    .map(|(e, s)| g * (s - e))
                    .collect()
            })
            .collect();

        let mut layers: Vec<Dense> = self
            .params
            .layers
            .iter()
            .map(|l| Dense::zeros(l.inputs, l.outputs))
            .collect();
        // d loss / d (output of the layer below), starting at the logit.
        let mut upstream = vec![g];
        for l in (0..=n_hidden).rev() {
            let layer = &self.params.layers[l];
            let x: &[f64] = if l == 0 { &t.input } else { &t.post[l - 1] };
            // dz for this layer
            let dz: Vec<f64> = if l == n_hidden {
                upstream.clone()
            } else {
                upstream
                    .iter()
                    .enumerate()
                    .map(|(j, &d)| {
                        let kept = mask.map_or(true, |m| m.layers[l][j]);
                        if !kept || t.pre[l][j] <= 0.0 {
                            0.0
                        } else if mask.is_some() {
                            d / keep_prob
                        } else {
                            d
                        }
                    })
                    .collect()
            };
            let grad = &mut layers[l];
            for (o, &d) in dz.iter().enumerate() {
                grad.bias[o] = d;
                for (i, &xi) in x.iter().enumerate() {
                    grad.weights[o * layer.inputs + i] = d * xi;
                }
            }
            let mut below = vec![0.0; layer.inputs];
            for (o, &d) in dz.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (b, w) in below.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            upstream = below;
        }
        for (f, emb) in embeddings.iter_mut().enumerate() {
            for (k, v) in emb.iter_mut().enumerate() {
                *v += upstream[f * dim + k];
            }
        }

        let grads = Gradients {
            bias: g,
            first_order: [g; NUM_FIELDS],
            embeddings,
            layers,
        };
        if !grads.all_finite() {
            return Err(ModelError::Diverged("gradient"));
        }
        Ok((loss, grads))
    }

    /// One online update on a single example with training-time dropout.
    /// Returns the loss before the update.
    pub fn train_step(&mut self, fv: &FeatureVector, label: bool, rng: &mut SimRng) -> Result<f64, ModelError> {
        let mask = (self.cfg.dropout > 0.0).then(|| DropoutMask::sample(&self.cfg.hidden, self.cfg.dropout, rng));
        let (loss, grads) = self.loss_and_gradient(fv, label, mask.as_ref())?;
        self.apply(fv, &grads);
        if !self.params.bias.is_finite() {
            return Err(ModelError::Diverged("parameters"));
        }
        Ok(loss)
    }

    /// Adagrad: `acc += g²; w −= lr · g / sqrt(acc + ε)`, with `acc` starting
    /// at `adagrad_init_accum`, touching only the
    /// embedding and first-order rows selected by `fv`.
    pub fn apply(&mut self, fv: &FeatureVector, grads: &Gradients) {
        let lr = self.cfg.learning_rate;
        let eps = self.cfg.adagrad_eps;
        let l2 = self.cfg.embedding_l2;
        let step = |w: &mut f64, acc: &mut f64, g: f64| {
            *acc += g * g;
            *w -= lr * g / (*acc + eps).sqrt();
        };
        step(&mut self.params.bias, &mut self.accum.bias, grads.bias);
        let dim = self.cfg.embedding_dim;
        for (f, &idx) in fv.indices.iter().enumerate() {
            let i = idx as usize;
            step(
                &mut self.params.first_order[f][i],
                &mut self.accum.first_order[f][i],
                grads.first_order[f],
            );
            let rows = i * dim..(i + 1) * dim;
            let w = &mut self.params.embeddings[f][rows.clone()];
            let acc = &mut self.accum.embeddings[f][rows];
            for ((w, acc), &g) in w.iter_mut().zip(acc).zip(&grads.embeddings[f]) {
                let g = g + l2 * *w;
                step(w, acc, g);
            }
        }
        for ((layer, acc), grad) in self
            .params
            .layers
            .iter_mut()
            .zip(&mut self.accum.layers)
            .zip(&grads.layers)
        {
            for ((w, a), &g) in layer.weights.iter_mut().zip(&mut acc.weights).zip(&grad.weights) {
                step(w, a, g);
            }
            for ((w, a), &g) in layer.bias.iter_mut().zip(&mut acc.bias).zip(&grad.bias) {
                step(w, a, g);
            }
        }
    }

    /// Every scalar parameter that influences the prediction for `fv`.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs = vec![ParamRef::Bias];
        for field in 0..NUM_FIELDS {
            refs.push(ParamRef::FirstOrder { field });
            for k in 0..self.cfg.embedding_dim {
                refs.push(ParamRef::Embedding { field, k });
            }
        }
        for (layer, l) in self.params.layers.iter().enumerate() {
            for out in 0..l.outputs {
                refs.push(ParamRef::LayerBias { layer, out });
                for input in 0..l.inputs {
                    refs.push(ParamRef::Weight { layer, out, input });
                }
            }
        }
        refs
    }

    pub fn param_mut(&mut self, fv: &FeatureVector, r: ParamRef) -> &mut f64 {
        let dim = self.cfg.embedding_dim;
        match r {
            ParamRef::Bias => &mut self.params.bias,
            ParamRef::FirstOrder { field } => &mut self.params.first_order[field][fv.indices[field] as usize],
            ParamRef::Embedding { field, k } => {
                &mut self.params.embeddings[field][fv.indices[field] as usize * dim + k]
            }
            ParamRef::Weight { layer, out, input } => {
                let l = &mut self.params.layers[layer];
                &mut l.weights[out * l.inputs + input]
            }
            ParamRef::LayerBias { layer, out } => &mut self.params.layers[layer].bias[out],
        }
    }

    /// Hidden-layer pre-activations of a deterministic pass.
    pub fn hidden_preactivations(&self, fv: &FeatureVector) -> Vec<Vec<f64>> {
        self.trace(fv, None).pre
    }

    pub fn is_finite(&self) -> bool {
        self.params.all_finite()
    }

    pub fn to_snapshot_json(&self) -> String {
        let snap = Snapshot {
            format_version: SNAPSHOT_VERSION,
            config: self.cfg.clone(),
            spaces: self.spaces,
            params: self.params.clone(),
            accum: self.accum.clone(),
        };
        serde_json::to_string(&snap).expect("model snapshot serializes")
    }

    pub fn from_snapshot_json(json: &str) -> Result<Self, ModelError> {
        let snap: Snapshot = serde_json::from_str(json).map_err(|e| ModelError::Snapshot(e.to_string()))?;
        if snap.format_version != SNAPSHOT_VERSION {
            return Err(ModelError::Snapshot(format!(
                "unsupported format version {}",
                snap.format_version
            )));
        }
        snap.config.validate()?;
        let expected = Params::zeros(&snap.spaces, snap.config.embedding_dim, &snap.config.hidden);
        let same_shape = |p: &Params| {
            p.first_order.iter().map(Vec::len).eq(expected.first_order.iter().map(Vec::len))
                && p.embeddings.iter().map(Vec::len).eq(expected.embeddings.iter().map(Vec::len))
                && p.layers.iter().map(|l| (l.inputs, l.outputs, l.weights.len(), l.bias.len())).eq(expected
                    .layers
                    .iter()
                    .map(|l| (l.inputs, l.outputs, l.weights.len(), l.bias.len())))
        };
        if !same_shape(&snap.params) || !same_shape(&snap.accum) {
            return Err(ModelError::Snapshot("parameter shapes do not match config".into()));
        }
        Ok(Self {
            cfg: snap.config,
            spaces: snap.spaces,
            params: snap.params,
            accum: snap.accum,
            forward_passes: AtomicU64::new(0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;

    const SPACES: [u32; NUM_FIELDS] = [6, 5, 4, 7, 3];

    fn fv() -> FeatureVector {
        FeatureVector { indices: [2, 1, 3, 4, 1] }
    }

    fn cfg(hidden: Vec<usize>, dropout: f64) -> ModelConfig {
        ModelConfig {
            embedding_dim: 2,
            hidden,
            dropout,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = CtrModel::zeros(cfg(vec![4, 3], 0.3), SPACES).unwrap();
        let mut rng = derive(0, 0);
        assert_eq!(m.predict(&fv(), PredictMode::Deterministic, &mut rng).unwrap(), 0.5);
        assert_eq!(m.predict(&fv(), PredictMode::Stochastic, &mut rng).unwrap(), 0.5);
    }

    #[test]
    fn zero_dropout_modes_agree_bitwise() {
        let m = CtrModel::new(cfg(vec![5, 4], 0.0), SPACES, &mut derive(1, 0)).unwrap();
        let mut rng = derive(2, 0);
        let d = m.predict(&fv(), PredictMode::Deterministic, &mut rng).unwrap();
        for _ in 0..10 {
            assert_eq!(m.predict(&fv(), PredictMode::Stochastic, &mut rng).unwrap().to_bits(), d.to_bits());
        }
    }

    #[test]
    fn one_hidden_unit_matches_hand_computation() {
        // Only the MLP path is non-zero: logit = w2 · relu(w1 · x) · mask / (1 − p).
        let p = 0.5;
        let mut m = CtrModel::zeros(
            ModelConfig { embedding_dim: 1, hidden: vec![1], dropout: p, ..ModelConfig::default() },
            SPACES,
        )
        .unwrap();
        let x = fv();
        let e = [0.3, -0.2, 0.5, 0.1, 0.4];
        let w1 = [1.5, 0.5, 2.0, -1.0, 0.25];
        for f in 0..NUM_FIELDS {
            *m.param_mut(&x, ParamRef::Embedding { field: f, k: 0 }) = e[f];
            *m.param_mut(&x, ParamRef::Weight { layer: 0, out: 0, input: f }) = w1[f];
        }
        let w2 = 1.7;
        *m.param_mut(&x, ParamRef::Weight { layer: 1, out: 0, input: 0 }) = w2;
        // The FM term is non-zero here and enters the expectation directly.
        let sum: f64 = e.iter().sum();
        let fm = 0.5 * (sum * sum - e.iter().map(|v| v * v).sum::<f64>());
        let h = (w1.iter().zip(&e).map(|(w, v)| w * v).sum::<f64>()).max(0.0);
        for keep in [false, true] {
            let mask = DropoutMask { layers: vec![vec![keep]] };
            let expected_logit = fm + w2 * h * if keep { 1.0 } else { 0.0 } / (1.0 - p);
            let got = m.logit_with_mask(&x, Some(&mask)).unwrap();
            assert!((got - expected_logit).abs() < 1e-14, "{got} vs {expected_logit}");
        }
    }

    #[test]
    fn predict_samples_equals_sequential_stochastic_predictions() {
        let m = CtrModel::new(cfg(vec![6, 5], 0.3), SPACES, &mut derive(4, 0)).unwrap();
        let batch = m.predict_samples(&fv(), 20, &mut derive(9, 9)).unwrap();
        let mut rng = derive(9, 9);
        let seq: Vec<f64> = (0..20)
            .map(|_| m.predict(&fv(), PredictMode::Stochastic, &mut rng).unwrap())
            .collect();
        assert_eq!(batch, seq);
    }

    #[test]
    fn mask_passes_match_sampled_masks() {
        let m = CtrModel::new(cfg(vec![6, 5], 0.3), SPACES, &mut derive(4, 0)).unwrap();
        let mut a = derive(3, 3);
        let mut b = derive(3, 3);
        for _ in 0..10 {
            let mask = DropoutMask::sample(&[6, 5], 0.3, &mut a);
            let p = sigmoid(m.logit_with_mask(&fv(), Some(&mask)).unwrap());
            let q = m.predict(&fv(), PredictMode::Stochastic, &mut b).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn counter_tracks_passes() {
        let m = CtrModel::new(cfg(vec![3], 0.2), SPACES, &mut derive(4, 0)).unwrap();
        let mut rng = derive(0, 0);
        m.predict_deterministic(&fv()).unwrap();
        m.predict(&fv(), PredictMode::Stochastic, &mut rng).unwrap();
        m.predict_samples(&fv(), 7, &mut rng).unwrap();
        assert_eq!(m.forward_passes(), 9);
        m.reset_forward_passes();
        assert_eq!(m.forward_passes(), 0);
    }

    #[test]
    fn loss_at_half_is_ln2() {
        let mut m = CtrModel::zeros(cfg(vec![3], 0.0), SPACES).unwrap();
        let loss = m.train_step(&fv(), true, &mut derive(0, 0)).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn repeated_training_reduces_loss() {
        let mut m = CtrModel::new(cfg(vec![8, 4], 0.0), SPACES, &mut derive(5, 0)).unwrap();
        let mut rng = derive(0, 0);
        let losses: Vec<f64> = (0..50).map(|_| m.train_step(&fv(), true, &mut rng).unwrap()).collect();
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} then {}", w[0], w[1]);
        }
        assert!(losses[49] < 0.1 * losses[0]);
    }

    #[test]
    fn clone_is_independent() {
        let a = CtrModel::new(cfg(vec![4], 0.2), SPACES, &mut derive(5, 0)).unwrap();
        let mut b = a.clone();
        assert_eq!(a, b);
        assert_eq!(a, a.clone().clone());
        let before = a.predict_deterministic(&fv()).unwrap();
        for _ in 0..5 {
            b.train_step(&fv(), true, &mut derive(1, 1)).unwrap();
        }
        assert_ne!(a, b);
        assert_eq!(a.predict_deterministic(&fv()).unwrap(), before);
    }

    #[test]
    fn dummy_row_starts_at_zero() {
        let m = CtrModel::new(cfg(vec![4], 0.2), SPACES, &mut derive(5, 0)).unwrap();
        for f in 0..NUM_FIELDS {
            assert!(m.params().embeddings[f][..2].iter().all(|&v| v == 0.0));
            assert!(m.params().embeddings[f][2..].iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn out_of_range_index_rejected() {
        let m = CtrModel::zeros(cfg(vec![3], 0.0), SPACES).unwrap();
        let bad = FeatureVector { indices: [6, 0, 0, 0, 0] };
        assert_eq!(
            m.predict_deterministic(&bad),
            Err(ModelError::IndexOutOfRange { field: 0, index: 6, space: 6 })
        );
    }

    #[test]
    fn non_finite_parameters_reported() {
        let mut m = CtrModel::zeros(cfg(vec![3], 0.0), SPACES).unwrap();
        m.params_mut().bias = f64::NAN;
        assert_eq!(m.predict_deterministic(&fv()), Err(ModelError::Diverged("forward pass")));
        assert!(m.train_step(&fv(), true, &mut derive(0, 0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CtrModel::zeros(cfg(vec![], 0.0), SPACES).is_err());
        assert!(CtrModel::zeros(cfg(vec![3], 1.0), SPACES).is_err());
        assert!(CtrModel::zeros(cfg(vec![3], -0.1), SPACES).is_err());
    }

    #[test]
    fn extreme_logits_stay_inside_unit_interval() {
        let mut m = CtrModel::zeros(cfg(vec![3], 0.0), SPACES).unwrap();
        m.params_mut().bias = 1e4;
        let p = m.predict_deterministic(&fv()).unwrap();
        assert!(p > 0.0 && p < 1.0);
        m.params_mut().bias = -1e4;
        let p = m.predict_deterministic(&fv()).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut m = CtrModel::new(cfg(vec![4, 2], 0.2), SPACES, &mut derive(5, 0)).unwrap();
        m.train_step(&fv(), true, &mut derive(1, 1)).unwrap();
        let back = CtrModel::from_snapshot_json(&m.to_snapshot_json()).unwrap();
        assert_eq!(back, m);
        let tampered = m.to_snapshot_json().replace("\"format_version\":1", "\"format_version\":9");
        assert!(CtrModel::from_snapshot_json(&tampered).is_err());
    }
}
