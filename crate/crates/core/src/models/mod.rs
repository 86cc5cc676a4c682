//! Classifier construction with an explicit feature-extractor / head split.
//!
//! A model is an ordered stack of layers producing the penultimate
//! representation, an optional width adapter, and a single affine head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{PassLedger, Phase};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine { out: usize },
    Conv { filters: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    Flatten,
    AvgPool { size: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    /// Per-sample input shape, e.g. `[55]` or `[3, 32, 32]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Width of the extractor output (before any adapter).
    pub penultimate_dim: usize,
    pub classes: usize,
    /// Width of the adapter appended after the extractor, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<usize>,
}

impl ArchDescriptor {
    /// Fully connected ReLU network; the last hidden width is the penultimate width.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Affine { out: h });
            layers.push(LayerSpec::Relu);
        }
        Self {
            input_shape: vec![inputs],
            penultimate_dim: hidden.last().copied().unwrap_or(inputs),
            layers,
            classes,
            adapter: None,
        }
    }

    /// Convolutional extractor: `3x3 conv -> relu -> 2x2 pool` per entry of
    /// `channels`, then one affine+relu layer of width `penultimate`.
    pub fn cnn(input: [usize; 3], channels: &[usize], penultimate: usize, classes: usize) -> Self {
        let mut layers = Vec::new();
        for &c in channels {
            layers.push(LayerSpec::Conv { filters: c, kernel: 3, stride: 1, pad: 1 });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::AvgPool { size: 2 });
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Affine { out: penultimate });
        layers.push(LayerSpec::Relu);
        Self { input_shape: input.to_vec(), layers, penultimate_dim: penultimate, classes, adapter: None }
    }

    /// Width of the representation returned by [`Model::features`].
    pub fn feature_dim(&self) -> usize {
        self.adapter.unwrap_or(self.penultimate_dim)
    }

    /// Shapes of every parameter in canonical order, checking consistency.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Affine { out: width } => {
                    if shape.len() != 1 {
                        return Err(Error::Config(format!(
                            "layer {i} (affine) expects a flat input but receives {shape:?}; add a flatten layer"
                        )));
                    }
                    if width == 0 {
                        return Err(Error::Config(format!("layer {i} (affine) has zero width")));
                    }
                    out.push((format!("l{i}.weight"), vec![shape[0], width]));
                    out.push((format!("l{i}.bias"), vec![width]));
                    shape = vec![width];
                }
                LayerSpec::Conv { filters, kernel, stride, pad } => {
                    if shape.len() != 3 {
                        return Err(Error::Config(format!(
                            "layer {i} (conv) expects [channels, h, w] input, receives {shape:?}"
                        )));
                    }
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Config(format!("layer {i} (conv) has a zero hyperparameter")));
                    }
                    if kernel > h + 2 * pad
                        || kernel > w + 2 * pad
                        || (h + 2 * pad - kernel) % stride != 0
                        || (w + 2 * pad - kernel) % stride != 0
                    {
                        return Err(Error::Config(format!(
                            "layer {i} (conv) kernel {kernel}, stride {stride}, pad {pad} does not tile input {shape:?}"
                        )));
                    }
                    out.push((format!("l{i}.weight"), vec![filters, c, kernel, kernel]));
                    out.push((format!("l{i}.bias"), vec![filters]));
                    shape = vec![filters, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1];
                }
                LayerSpec::Relu => {}
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
                LayerSpec::AvgPool { size } => {
                    if shape.len() != 3 || size == 0 || !shape[1].is_multiple_of(size) || !shape[2].is_multiple_of(size)
                    {
                        return Err(Error::Config(format!(
                            "layer {i} (avg pool {size}) does not tile input {shape:?}"
                        )));
                    }
                    shape = vec![shape[0], shape[1] / size, shape[2] / size];
                }
            }
        }
        if shape != [self.penultimate_dim] {
            return Err(Error::Config(format!(
                "extractor produces {shape:?} but penultimate_dim is {}",
                self.penultimate_dim
            )));
        }
        if let Some(a) = self.adapter {
            if a == 0 {
                return Err(Error::Config("adapter width must be positive".into()));
            }
            out.push(("adapter.weight".into(), vec![self.penultimate_dim, a]));
            out.push(("adapter.bias".into(), vec![a]));
        }
        out.push(("head.weight".into(), vec![self.feature_dim(), self.classes]));
        out.push(("head.bias".into(), vec![self.classes]));
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Where a model's parameters came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub seed: u64,
    /// Wall-clock training time, reported as the teacher cost of downstream runs.
    /// Not written to checkpoints, so repeated runs produce identical files.
    #[serde(skip)]
    pub train_time_s: f64,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub features: Var,
    pub logits: Var,
    /// Parameter leaves, in [`Model::params`] order.
    pub params: Vec<Var>,
}

#[derive(Debug)]
pub struct Model {
    desc: ArchDescriptor,
    params: Vec<Param>,
    frozen: bool,
    pub provenance: Provenance,
    ledger: Arc<PassLedger>,
}

impl Clone for Model {
    /// Copies parameters; the clone starts with a fresh pass ledger.
    fn clone(&self) -> Self {
        Self {
            desc: self.desc.clone(),
            params: self.params.clone(),
            frozen: self.frozen,
            provenance: self.provenance.clone(),
            ledger: Arc::new(PassLedger::new()),
        }
    }
}

/// Kaiming-uniform weights, zero biases.
pub fn build_model<R: Rng + ?Sized>(desc: &ArchDescriptor, rng: &mut R) -> Result<Model> {
    let shapes = desc.param_shapes()?;
    let params = shapes
        .into_iter()
        .map(|(name, shape)| {
            let value = init_param(&name, shape, rng);
            Param { name, value }
        })
        .collect();
    Ok(Model::from_parts(desc.clone(), params))
}

fn init_param<R: Rng + ?Sized>(name: &str, shape: Vec<usize>, rng: &mut R) -> Tensor {
    if name.ends_with(".bias") {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape, data)
}

impl Model {
    pub(crate) fn from_parts(desc: ArchDescriptor, params: Vec<Param>) -> Self {
        Self { desc, params, frozen: false, provenance: Provenance::default(), ledger: Arc::new(PassLedger::new()) }
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.desc
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn feature_dim(&self) -> usize {
        self.desc.feature_dim()
    }

    pub fn classes(&self) -> usize {
        self.desc.classes
    }

    pub fn ledger(&self) -> &PassLedger {
        &self.ledger
    }

    /// Indices into [`Model::params`] of the head weight and bias.
    pub fn head_param_indices(&self) -> [usize; 2] {
        let n = self.params.len();
        [n - 2, n - 1]
    }

    /// Hash of every parameter's name, shape and bit pattern.
    pub fn param_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.desc.input_shape.len() + 1 || x.shape()[1..] != self.desc.input_shape[..] {
            return Err(Error::Dimension(format!(
                "model expects [n, {:?}] input, got {:?}",
                self.desc.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Records one forward evaluation on `g`. Parameters become gradient
    /// leaves when `trainable`, constants otherwise.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool, phase: Phase) -> Result<ForwardPass> {
        let params = self.params.iter().map(|p| g.leaf(p.value.clone(), trainable)).collect::<Result<Vec<_>>>()?;
        self.forward_with(g, x, params, phase)
    }

    /// Like [`Model::forward`] but evaluates the architecture with caller
    /// supplied parameter nodes, in [`Model::params`] order.
    pub fn forward_with(&self, g: &mut Graph, x: Var, params: Vec<Var>, phase: Phase) -> Result<ForwardPass> {
        self.check_input(g.value(x))?;
        if params.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "architecture has {} parameter tensors, {} supplied",
                self.params.len(),
                params.len()
            )));
        }
        for (v, p) in params.iter().zip(&self.params) {
            if g.value(*v).shape() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "{} expects shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    g.value(*v).shape()
                )));
            }
        }
        let mut h = x;
        let mut pi = 0;
        for layer in &self.desc.layers {
            h = match *layer {
                LayerSpec::Affine { .. } => {
                    pi += 2;
                    g.affine(h, params[pi - 2], params[pi - 1])?
                }
                LayerSpec::Conv { stride, pad, .. } => {
                    pi += 2;
                    let c = g.conv2d(h, params[pi - 2], stride, pad)?;
                    g.channel_bias(c, params[pi - 1])?
                }
                LayerSpec::Relu => g.relu(h),
                LayerSpec::Flatten => g.flatten(h)?,
                LayerSpec::AvgPool { size } => g.avg_pool2d(h, size)?,
            };
        }
        if self.desc.adapter.is_some() {
            h = g.affine(h, params[pi], params[pi + 1])?;
            pi += 2;
        }
        let logits = g.affine(h, params[pi], params[pi + 1])?;
        self.ledger.record_forward(phase);
        Ok(ForwardPass { features: h, logits, params })
    }

    /// Backward sweep from `sink` through a graph built by [`Model::forward`].
    pub fn backward(&self, g: &mut Graph, sink: Var, phase: Phase) -> Result<()> {
        g.backward(sink)?;
        self.ledger.record_backward(phase);
        Ok(())
    }

    /// Penultimate representation (after the adapter, if any).
    pub fn features(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let fp = self.forward(&mut g, xv, false, phase)?;
        Ok(g.value(fp.features).clone())
    }

    pub fn logits(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let fp = self.forward(&mut g, xv, false, phase)?;
        Ok(g.value(fp.logits).clone())
    }

    /// Applies only the classifier head to precomputed features. Not counted
    /// as a pass.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let [wi, bi] = self.head_param_indices();
        let mut g = Graph::new();
        let f = g.constant(features.clone())?;
        let w = g.constant(self.params[wi].value.clone())?;
        let b = g.constant(self.params[bi].value.clone())?;
        let y = g.affine(f, w, b)?;
        Ok(g.value(y).clone())
    }

    pub fn predict(&self, x: &Tensor, phase: Phase) -> Result<Vec<usize>> {
        Ok(self.logits(x, phase)?.argmax_rows())
    }

    /// In-place `p -= step * direction` for every parameter. Callers enforce
    /// the frozen contract.
    pub(crate) fn apply_step(&mut self, directions: &[Vec<f64>], step: f64) {
        for (p, d) in self.params.iter_mut().zip(directions) {
            p.value.data_mut().iter_mut().zip(d).for_each(|(v, g)| *v -= step * g);
        }
    }
}

/// Inserts an affine layer after the extractor mapping its output down to
/// `target_dim`, and rebuilds the head on the new width.
///
/// Only narrowing is accepted: the adapter belongs on the model with the
/// wider representation.
pub fn attach_adapter<R: Rng + ?Sized>(model: Model, target_dim: usize, rng: &mut R) -> Result<Model> {
    let current = model.feature_dim();
    if target_dim == current {
        return Err(Error::Config(format!(
            "adapter target width {target_dim} equals the current width; no adapter is needed"
        )));
    }
    if model.desc.adapter.is_some() {
        return Err(Error::Config("model already carries an adapter".into()));
    }
    if target_dim == 0 || target_dim > current {
        return Err(Error::Config(format!(
            "adapters only narrow representations ({current} -> {target_dim}); attach it to the wider model instead"
        )));
    }
    let mut desc = model.desc.clone();
    desc.adapter = Some(target_dim);
    let mut params: Vec<Param> = model.params[..model.params.len() - 2].to_vec();
    for (name, shape) in desc.param_shapes()?.into_iter().skip(params.len()) {
        let value = init_param(&name, shape, rng);
        params.push(Param { name, value });
    }
    let mut adapted = Model::from_parts(desc, params);
    adapted.frozen = model.frozen;
    adapted.provenance = model.provenance;
    Ok(adapted)
}
