//! Small differentiable MLP classifiers: forward pass, softmax
//! cross-entropy loss, exact analytic per-parameter gradients, and the
//! attacker-inserted imprint front layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DgpError, Result};
use crate::numerics::{gaussian, Rng, Tensor};

/// Coupling weight from imprint outputs into the original first layer.
/// Nonzero so gradients flow back through the imprint rows; small so the
/// classifier still trains on the pass-through features.
const IMPRINT_COUPLING: f64 = 1.0;

/// One fully connected layer: `weight` is `[out x in]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// MLP with ReLU between layers and identity at the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// A batch of training samples. Inputs are `[B x d]`, labels in `[0, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(DgpError::InvalidArgument(
                "batch inputs must be [B x d]".into(),
            ));
        }
        if inputs.shape()[0] != labels.len() || labels.is_empty() {
            return Err(DgpError::InvalidArgument(format!(
                "batch size {} does not match label count {}",
                inputs.shape()[0],
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Single sample as a `[1 x d]` batch.
    pub fn single(input: &[f64], label: usize) -> Self {
        let d = input.len();
        Batch {
            inputs: Tensor::new(vec![1, d], input.to_vec()).unwrap(),
            labels: vec![label],
        }
    }

    pub fn sample_input(&self, i: usize) -> Tensor {
        let d = self.input_dim();
        Tensor::new(vec![d], self.inputs.data()[i * d..(i + 1) * d].to_vec()).unwrap()
    }
}

/// Named per-tensor gradients mirroring a model's structure.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientSet {
    tensors: BTreeMap<String, Tensor>,
}

impl GradientSet {
    pub fn new() -> Self {
        GradientSet::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(id.into(), tensor);
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.tensors.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.tensors.values().map(Tensor::norm_sq).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn add(&self, other: &GradientSet) -> Result<GradientSet> {
        self.zip_with(other, |a, b| a.add(b))
    }

    pub fn sub(&self, other: &GradientSet) -> Result<GradientSet> {
        self.zip_with(other, |a, b| a.sub(b))
    }

    pub fn scale(&self, factor: f64) -> GradientSet {
        let tensors = self
            .tensors
            .iter()
            .map(|(id, t)| (id.clone(), t.scale(factor)))
            .collect();
        GradientSet { tensors }
    }

    pub fn dot(&self, other: &GradientSet) -> Result<f64> {
        let mut acc = 0.0;
        for (id, a) in &self.tensors {
            let b = other.tensors.get(id).ok_or_else(|| {
                DgpError::InvalidArgument(format!("missing tensor {id} in operand"))
            })?;
            acc += a.dot(b)?;
        }
        Ok(acc)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Zero gradients with the same structure as `self`.
    pub fn zeros_like(&self) -> GradientSet {
        let tensors = self
            .tensors
            .iter()
            .map(|(id, t)| (id.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        GradientSet { tensors }
    }

    fn zip_with(
        &self,
        other: &GradientSet,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<GradientSet> {
        if self.tensors.len() != other.tensors.len() {
            return Err(DgpError::InvalidArgument(
                "gradient sets have different tensor counts".into(),
            ));
        }
        let mut tensors = BTreeMap::new();
        for (id, a) in &self.tensors {
            let b = other.tensors.get(id).ok_or_else(|| {
                DgpError::InvalidArgument(format!("missing tensor {id} in operand"))
            })?;
            tensors.insert(id.clone(), f(a, b)?);
        }
        Ok(GradientSet { tensors })
    }
}

/// Imprint layer specification chosen by an active attacker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImprintSpec {
    /// Scalar measurement applied to the input, e.g. a mean-brightness vector.
    pub measurement: Tensor,
    /// Strictly increasing bin thresholds `c_1..c_R`.
    pub thresholds: Vec<f64>,
    /// Append the original features after the imprint outputs so the
    /// classifier still trains.
    pub pass_through: bool,
}

impl ImprintSpec {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.len() < 2 {
            return Err(DgpError::InvalidConfig(
                "imprint spec needs at least 2 thresholds".into(),
            ));
        }
        if !self.thresholds.windows(2).all(|w| w[0] < w[1]) {
            return Err(DgpError::InvalidConfig(
                "imprint thresholds must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.thresholds.len()
    }

    /// Bin index of an input: the largest `k` with `measurement . x > c_k`,
    /// or `None` when the measurement falls below every threshold.
    pub fn bin_of(&self, input: &Tensor) -> Option<usize> {
        let m = self.measurement.dot(input).ok()?;
        let mut bin = None;
        for (k, c) in self.thresholds.iter().enumerate() {
            if m > *c {
                bin = Some(k);
            }
        }
        bin
    }
}

impl MlpModel {
    /// Build a model from explicit layers; adjacent dims must chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DgpError::InvalidConfig("model needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(DgpError::InvalidConfig(format!(
                    "layer dims do not chain: {} -> {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        Ok(MlpModel { layers })
    }

    /// Random init with He-style scaling, fully determined by `rng`.
    pub fn random(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(DgpError::InvalidConfig("need at least input and output dims".into()));
        }
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let (d_in, d_out) = (w[0], w[1]);
            let std = (2.0 / d_in as f64).sqrt();
            layers.push(Layer {
                weight: gaussian(rng, &[d_out, d_in], 0.0, std)?,
                bias: Tensor::zeros(vec![d_out]),
            });
        }
        MlpModel::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn weight_id(layer: usize) -> String {
        format!("layer{layer:02}.weight")
    }

    pub fn bias_id(layer: usize) -> String {
        format!("layer{layer:02}.bias")
    }

    /// Zero gradients shaped like this model.
    pub fn zero_grads(&self) -> GradientSet {
        let mut grads = GradientSet::new();
        for (l, layer) in self.layers.iter().enumerate() {
            grads.insert(Self::weight_id(l), Tensor::zeros(layer.weight.shape().to_vec()));
            grads.insert(Self::bias_id(l), Tensor::zeros(layer.bias.shape().to_vec()));
        }
        grads
    }

    /// Apply a delta: `W -= update` for every parameter tensor.
    pub fn apply_update(&mut self, update: &GradientSet) -> Result<()> {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let w = update.get(&Self::weight_id(l)).ok_or_else(|| {
                DgpError::InvalidArgument(format!("update missing layer {l} weight"))
            })?;
            let b = update.get(&Self::bias_id(l)).ok_or_else(|| {
                DgpError::InvalidArgument(format!("update missing layer {l} bias"))
            })?;
            layer.weight.scaled_add(-1.0, w)?;
            layer.bias.scaled_add(-1.0, b)?;
        }
        Ok(())
    }

    /// Parameters flattened into a GradientSet-shaped container.
    pub fn params(&self) -> GradientSet {
        let mut out = GradientSet::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.insert(Self::weight_id(l), layer.weight.clone());
            out.insert(Self::bias_id(l), layer.bias.clone());
        }
        out
    }

    /// Logits for a `[B x d]` input batch.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let acts = self.forward_activations(inputs)?;
        Ok(acts.pre_activations.last().unwrap().clone())
    }

    /// Forward pass keeping per-layer pre-activations for the backward pass.
    fn forward_activations(&self, inputs: &Tensor) -> Result<Activations> {
        if inputs.shape().len() != 2 || inputs.shape()[1] != self.input_dim() {
            return Err(DgpError::ShapeMismatch {
                expected: vec![inputs.shape().first().copied().unwrap_or(1), self.input_dim()],
                got: inputs.shape().to_vec(),
            });
        }
        let batch = inputs.shape()[0];
        let mut layer_inputs = vec![inputs.clone()];
        let mut pre_activations = Vec::new();
        let mut current = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = linear_forward(layer, &current, batch);
            pre_activations.push(z.clone());
            if l + 1 < self.layers.len() {
                let a = relu(&z);
                layer_inputs.push(a.clone());
                current = a;
            }
        }
        Ok(Activations { layer_inputs, pre_activations })
    }

    /// Mean softmax cross-entropy over the batch and exact analytic
    /// gradients for every parameter tensor.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, GradientSet)> {
        let classes = self.num_classes();
        for &y in &batch.labels {
            if y >= classes {
                return Err(DgpError::InvalidArgument(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
        }
        let b = batch.size();
        let acts = self.forward_activations(&batch.inputs)?;
        let logits = acts.pre_activations.last().unwrap();

        // delta at the output: (softmax - onehot) / B, log-sum-exp stabilized.
        let mut loss = 0.0;
        let mut delta = Tensor::zeros(vec![b, classes]);
        for s in 0..b {
            let row = &logits.data()[s * classes..(s + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|r| (r - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            loss += log_z - row[batch.labels[s]];
            for j in 0..classes {
                let p = (row[j] - max).exp() / sum_exp;
                let indicator = if j == batch.labels[s] { 1.0 } else { 0.0 };
                delta.data_mut()[s * classes + j] = (p - indicator) / b as f64;
            }
        }
        loss /= b as f64;

        let mut grads = GradientSet::new();
        let mut delta_cur = delta;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a_in = &acts.layer_inputs[l];
            let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());

            // dW = delta^T a_in, db = column sums of delta
            let mut dw = Tensor::zeros(vec![out_dim, in_dim]);
            let mut db = Tensor::zeros(vec![out_dim]);
            for s in 0..b {
                for j in 0..out_dim {
                    let d = delta_cur.data()[s * out_dim + j];
                    db.data_mut()[j] += d;
                    for i in 0..in_dim {
                        dw.data_mut()[j * in_dim + i] += d * a_in.data()[s * in_dim + i];
                    }
                }
            }
            grads.insert(Self::weight_id(l), dw);
            grads.insert(Self::bias_id(l), db);

            if l > 0 {
                // delta_prev = (W^T delta) * relu'(z_{l-1})
                let z_prev = &acts.pre_activations[l - 1];
                let mut next = Tensor::zeros(vec![b, in_dim]);
                for s in 0..b {
                    for i in 0..in_dim {
                        if z_prev.data()[s * in_dim + i] > 0.0 {
                            let mut acc = 0.0;
                            for j in 0..out_dim {
                                acc += layer.weight.data()[j * in_dim + i]
                                    * delta_cur.data()[s * out_dim + j];
                            }
                            next.data_mut()[s * in_dim + i] = acc;
                        }
                    }
                }
                delta_cur = next;
            }
        }

        if !loss.is_finite() || !grads.all_finite() {
            return Err(DgpError::NonFinite("loss_and_grad produced non-finite values".into()));
        }
        Ok((loss, grads))
    }

    /// Softmax probabilities for a single `[1 x d]` input.
    pub fn softmax(&self, input: &Tensor) -> Result<Vec<f64>> {
        let logits = self.forward(input)?;
        let row = logits.data();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|r| (r - max).exp()).sum();
        Ok(row.iter().map(|r| (r - max).exp() / sum_exp).collect())
    }

    /// New model with an imprint front layer per `spec`.
    ///
    /// Row `k` of the new first layer has weights equal to the measurement
    /// vector and bias `-c_k`; with pass-through the original inputs are
    /// appended after the imprint outputs via identity rows.
    pub fn insert_imprint(&self, spec: &ImprintSpec) -> Result<MlpModel> {
        spec.validate()?;
        let d = self.input_dim();
        if spec.measurement.len() != d {
            return Err(DgpError::ShapeMismatch {
                expected: vec![d],
                got: spec.measurement.shape().to_vec(),
            });
        }
        let r = spec.num_bins();
        let out = if spec.pass_through { r + d } else { r };

        let mut weight = Tensor::zeros(vec![out, d]);
        let mut bias = Tensor::zeros(vec![out]);
        for k in 0..r {
            for i in 0..d {
                weight.data_mut()[k * d + i] = spec.measurement.data()[i];
            }
            bias.data_mut()[k] = -spec.thresholds[k];
        }
        if spec.pass_through {
            for i in 0..d {
                weight.data_mut()[(r + i) * d + i] = 1.0;
            }
        }
        let imprint_layer = Layer { weight, bias };

        // Rewire the original first layer: constant small coupling on the
        // imprint outputs, original weights on the pass-through block.
        let old = &self.layers[0];
        let (old_out, old_in) = (old.out_dim(), old.in_dim());
        let mut w1 = Tensor::zeros(vec![old_out, out]);
        for j in 0..old_out {
            for k in 0..r {
                w1.data_mut()[j * out + k] = IMPRINT_COUPLING;
            }
            if spec.pass_through {
                for i in 0..old_in {
                    w1.data_mut()[j * out + r + i] = old.weight.data()[j * old_in + i];
                }
            }
        }
        let mut layers = vec![imprint_layer, Layer { weight: w1, bias: old.bias.clone() }];
        layers.extend(self.layers[1..].iter().cloned());
        MlpModel::new(layers)
    }

    /// Serialize as `{tensor_id -> {shape, data}}` with deterministic key order.
    pub fn to_checkpoint_json(&self) -> String {
        #[derive(Serialize)]
        struct Entry<'a> {
            shape: &'a [usize],
            data: &'a [f64],
        }
        let mut map = BTreeMap::new();
        for (l, layer) in self.layers.iter().enumerate() {
            map.insert(
                Self::weight_id(l),
                Entry { shape: layer.weight.shape(), data: layer.weight.data() },
            );
            map.insert(
                Self::bias_id(l),
                Entry { shape: layer.bias.shape(), data: layer.bias.data() },
            );
        }
        serde_json::to_string_pretty(&map).expect("checkpoint serialization")
    }

    pub fn from_checkpoint_json(json: &str) -> Result<MlpModel> {
        #[derive(Deserialize)]
        struct Entry {
            shape: Vec<usize>,
            data: Vec<f64>,
        }
        let map: BTreeMap<String, Entry> = serde_json::from_str(json)?;
        let mut layers = Vec::new();
        for l in 0.. {
            let (wid, bid) = (Self::weight_id(l), Self::bias_id(l));
            match (map.get(&wid), map.get(&bid)) {
                (Some(w), Some(b)) => layers.push(Layer {
                    weight: Tensor::new(w.shape.clone(), w.data.clone())?,
                    bias: Tensor::new(b.shape.clone(), b.data.clone())?,
                }),
                (None, None) => break,
                _ => {
                    return Err(DgpError::InvalidConfig(format!(
                        "checkpoint has partial layer {l}"
                    )))
                }
            }
        }
        MlpModel::new(layers)
    }
}

struct Activations {
    /// Input to each layer (post-activation of the previous one).
    layer_inputs: Vec<Tensor>,
    /// Pre-activation `z_l = W_l a_l + b_l` per layer.
    pre_activations: Vec<Tensor>,
}

fn linear_forward(layer: &Layer, inputs: &Tensor, batch: usize) -> Tensor {
    let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
    let mut z = Tensor::zeros(vec![batch, out_dim]);
    for s in 0..batch {
        for j in 0..out_dim {
            let mut acc = layer.bias.data()[j];
            for i in 0..in_dim {
                acc += layer.weight.data()[j * in_dim + i] * inputs.data()[s * in_dim + i];
            }
            z.data_mut()[s * out_dim + j] = acc;
        }
    }
    z
}

fn relu(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Central finite-difference gradients of the batch loss; test oracle for
/// the analytic backward pass, also used by attack gradient checks.
pub fn finite_difference_grads(model: &MlpModel, batch: &Batch, h: f64) -> Result<GradientSet> {
    let mut grads = GradientSet::new();
    for l in 0..model.num_layers() {
        for (id, is_weight) in [(MlpModel::weight_id(l), true), (MlpModel::bias_id(l), false)] {
            let shape = if is_weight {
                model.layers()[l].weight.shape().to_vec()
            } else {
                model.layers()[l].bias.shape().to_vec()
            };
            let n: usize = shape.iter().product();
            let mut g = Tensor::zeros(shape);
            for i in 0..n {
                let mut plus = model.clone();
                let mut minus = model.clone();
                {
                    let t = if is_weight {
                        &mut plus.layers[l].weight
                    } else {
                        &mut plus.layers[l].bias
                    };
                    t.data_mut()[i] += h;
                }
                {
                    let t = if is_weight {
                        &mut minus.layers[l].weight
                    } else {
                        &mut minus.layers[l].bias
                    };
                    t.data_mut()[i] -= h;
                }
                let (lp, _) = plus.loss_and_grad(batch)?;
                let (lm, _) = minus.loss_and_grad(batch)?;
                g.data_mut()[i] = (lp - lm) / (2.0 * h);
            }
            grads.insert(id, g);
        }
    }
    Ok(grads)
}
