//! Feedforward softmax classifiers with randomly drawn architectures.
//!
//! Networks are plain stacks of dense layers (ReLU hidden units, softmax
//! output) trained with mini-batch gradient descent on cross-entropy. They
//! are the members of the advice ensembles.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{rank_desc, Scalar};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged (non-finite loss at epoch {epoch})")]
    DivergenceDetected { epoch: usize },
    #[error("input has {found} features, network expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Bounds for randomly generated architectures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub max_depth: usize,
    pub min_width: usize,
    pub max_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            max_depth: 3,
            min_width: 16,
            max_width: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl NetworkSpec {
    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden_layers.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect()
    }
}

/// Dense layer `z = W a + b` with `W` stored as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weights: Array2<T>,
    pub biases: Array1<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Encoded inputs and their class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    inputs: Array2<T>,
    targets: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(rows: Vec<Vec<T>>, targets: Vec<usize>, classes: usize) -> Result<Self, NetError> {
        if rows.len() != targets.len() {
            return Err(NetError::InvalidDims(format!(
                "{} rows but {} targets",
                rows.len(),
                targets.len()
            )));
        }
        if classes == 0 {
            return Err(NetError::InvalidDims("zero classes".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(NetError::InvalidDims(format!("class {bad} >= {classes}")));
        }
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(NetError::InvalidDims("ragged rows".into()));
        }
        let flat: Vec<T> = rows.into_iter().flatten().collect();
        let inputs = Array2::from_shape_vec((targets.len(), dim), flat)
            .map_err(|e| NetError::InvalidDims(e.to_string()))?;
        Ok(Self {
            inputs,
            targets,
            classes,
        })
    }

    pub fn from_array(inputs: Array2<T>, targets: Vec<usize>, classes: usize) -> Result<Self, NetError> {
        if inputs.nrows() != targets.len() {
            return Err(NetError::InvalidDims("row/target count mismatch".into()));
        }
        if targets.iter().any(|&t| t >= classes) {
            return Err(NetError::InvalidDims("class index out of range".into()));
        }
        Ok(Self {
            inputs,
            targets,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> ArrayView2<'_, T> {
        self.inputs.view()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        self.inputs.row(i).to_vec()
    }

    /// Rows at `indices`, in that order (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &t in &self.targets {
            counts[t] += 1;
        }
        counts
    }

    /// Accuracy of always predicting the most frequent class.
    pub fn majority_baseline(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let max = self.class_counts().into_iter().max().unwrap_or(0);
        max as f64 / self.len() as f64
    }
}

/// Gradient of the mean cross-entropy with respect to one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient<T> {
    pub weights: Array2<T>,
    pub biases: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer<T>>,
}

/// Draws an architecture within `arch` and initialises weights, all keyed on `seed`.
pub fn generate_random_network<T: Scalar>(
    seed: u64,
    input_dim: usize,
    output_dim: usize,
    arch: &ArchConfig,
) -> Result<Network<T>, NetError> {
    if input_dim == 0 || output_dim == 0 {
        return Err(NetError::InvalidDims(format!(
            "input_dim={input_dim}, output_dim={output_dim}"
        )));
    }
    if arch.max_depth == 0 || arch.min_width == 0 || arch.min_width > arch.max_width {
        return Err(NetError::InvalidDims(format!("bad architecture bounds {arch:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=arch.max_depth);
    let hidden_layers = (0..depth)
        .map(|_| rng.random_range(arch.min_width..=arch.max_width))
        .collect();
    let spec = NetworkSpec {
        input_dim,
        output_dim,
        hidden_layers,
        activation: Activation::Relu,
        seed,
    };
    Ok(Network::initialise(spec, &mut rng))
}

impl<T: Scalar> Network<T> {
    /// Builds a network with the given layout. Hidden layers use He-uniform
    /// limits, the output layer Glorot-uniform; biases start at zero.
    pub fn from_spec(spec: NetworkSpec) -> Result<Self, NetError> {
        if spec.input_dim == 0 || spec.output_dim == 0 || spec.hidden_layers.contains(&0) {
            return Err(NetError::InvalidDims(format!("{:?}", spec.widths())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(Self::initialise(spec, &mut rng))
    }

    fn initialise(spec: NetworkSpec, rng: &mut ChaCha8Rng) -> Self {
        let widths = spec.widths();
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = if l == last {
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    T::from_f64_lossy(rng.random_range(-limit..limit))
                });
                Layer {
                    weights,
                    biases: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { spec, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|w| w.is_finite()) && l.biases.iter().all(|b| b.is_finite())
        })
    }

    /// Pre-activations and activations for every layer; the last activation is the softmax.
    fn forward_trace(&self, inputs: ArrayView2<'_, T>) -> (Vec<Array2<T>>, Vec<Array2<T>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = acts[l].dot(&layer.weights.t()) + &layer.biases;
            let a = if l + 1 == self.layers.len() {
                softmax_rows(&z)
            } else {
                z.mapv(|v| if v > T::zero() { v } else { T::zero() })
            };
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }

    /// Class probabilities for a batch, one row per input.
    pub fn predict_batch(&self, inputs: ArrayView2<'_, T>) -> Result<Array2<T>, NetError> {
        if inputs.ncols() != self.input_dim() {
            return Err(NetError::DimMismatch {
                expected: self.input_dim(),
                found: inputs.ncols(),
            });
        }
        let mut a = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weights.t()) + &layer.biases;
            a = if l + 1 == self.layers.len() {
                softmax_rows(&z)
            } else {
                z.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
            };
        }
        Ok(a)
    }

    /// Single-row forward pass (matrix-vector products, no batch packing).
    pub fn predict(&self, x: &[T]) -> Result<Vec<T>, NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::DimMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let mut a = ndarray::ArrayView1::from(x).to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.dot(&a);
            z += &layer.biases;
            a = if l + 1 == self.layers.len() {
                let max = z.fold(T::neg_infinity(), |m, &v| m.max(v));
                z.mapv_inplace(|v| (v - max).exp());
                let sum: T = z.sum();
                z.mapv_inplace(|v| v / sum);
                z
            } else {
                z.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
            };
        }
        Ok(a.to_vec())
    }

    /// Most probable class; lowest index wins ties.
    pub fn predict_class(&self, x: &[T]) -> Result<usize, NetError> {
        let p = self.predict(x)?;
        Ok(crate::scalar::argmax(&p).expect("non-empty output"))
    }

    /// Mean cross-entropy over the dataset.
    pub fn loss(&self, data: &LabeledDataset<T>) -> Result<T, NetError> {
        if data.is_empty() {
            return Err(NetError::EmptyDataset);
        }
        let probs = self.predict_batch(data.inputs())?;
        Ok(cross_entropy(&probs, data.targets()))
    }

    /// Mean cross-entropy and its analytic gradient by backpropagation.
    pub fn loss_and_gradients(
        &self,
        data: &LabeledDataset<T>,
    ) -> Result<(T, Vec<LayerGradient<T>>), NetError> {
        if data.is_empty() {
            return Err(NetError::EmptyDataset);
        }
        if data.dim() != self.input_dim() {
            return Err(NetError::DimMismatch {
                expected: self.input_dim(),
                found: data.dim(),
            });
        }
        let (pre, acts) = self.forward_trace(data.inputs());
        let probs = acts.last().expect("output layer");
        let loss = cross_entropy(probs, data.targets());

        let batch = T::from_usize(data.len()).expect("batch size");
        let mut delta = probs.clone();
        for (r, &t) in data.targets().iter().enumerate() {
            delta[[r, t]] -= T::one();
        }
        delta.mapv_inplace(|v| v / batch);

        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let weights = delta.t().dot(&acts[l]);
            let biases = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].weights);
                back.zip_mut_with(&pre[l - 1], |g, &z| {
                    if z <= T::zero() {
                        *g = T::zero();
                    }
                });
                delta = back;
            }
            grads.push(LayerGradient { weights, biases });
        }
        grads.reverse();
        Ok((loss, grads))
    }

    /// Mini-batch gradient descent on cross-entropy. Batch order is shuffled per
    /// epoch from the network seed. The parameters with the lowest full-dataset
    /// loss seen (initial state included) are returned.
    pub fn train(&self, data: &LabeledDataset<T>, hyper: &TrainConfig) -> Result<Self, NetError> {
        if data.is_empty() {
            return Err(NetError::EmptyDataset);
        }
        if !(hyper.learning_rate > 0.0) || hyper.batch_size == 0 {
            return Err(NetError::InvalidHyper(format!("{hyper:?}")));
        }
        if data.dim() != self.input_dim() {
            return Err(NetError::DimMismatch {
                expected: self.input_dim(),
                found: data.dim(),
            });
        }
        if data.classes() > self.output_dim() {
            return Err(NetError::InvalidDims(format!(
                "{} classes but {} outputs",
                data.classes(),
                self.output_dim()
            )));
        }
        let lr = T::from_f64_lossy(hyper.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x7472_6169_6e00_0000);
        let mut net = self.clone();
        let mut best = self.clone();
        let mut best_loss = self.loss(data)?;
        if !best_loss.is_finite() {
            return Err(NetError::DivergenceDetected { epoch: 0 });
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 1..=hyper.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(hyper.batch_size) {
                let batch = data.subset(chunk);
                let (_, grads) = net.loss_and_gradients(&batch)?;
                for (layer, grad) in net.layers.iter_mut().zip(&grads) {
                    layer.weights.scaled_add(-lr, &grad.weights);
                    layer.biases.scaled_add(-lr, &grad.biases);
                }
            }
            let loss = net.loss(data)?;
            if !loss.is_finite() || !net.is_finite() {
                return Err(NetError::DivergenceDetected { epoch });
            }
            if loss <= best_loss {
                best_loss = loss;
                best = net.clone();
            }
        }
        Ok(best)
    }

    /// Fraction of rows whose true class is among the `k` most probable classes.
    pub fn accuracy(&self, data: &LabeledDataset<T>, k: usize) -> Result<f64, NetError> {
        if data.is_empty() {
            return Err(NetError::EmptyDataset);
        }
        let probs = self.predict_batch(data.inputs())?;
        Ok(top_k_accuracy(probs.view(), data.targets(), k))
    }

    /// Argmax class for every row.
    pub fn predict_classes(&self, inputs: ArrayView2<'_, T>) -> Result<Vec<usize>, NetError> {
        let probs = self.predict_batch(inputs)?;
        Ok(probs
            .outer_iter()
            .map(|row| crate::scalar::argmax(row.as_slice().expect("standard layout")).expect("outputs"))
            .collect())
    }

    pub fn to_record(&self, catalog_hash: Option<String>) -> NetworkRecord<T> {
        NetworkRecord {
            format_version: MODEL_FORMAT_VERSION,
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    weights: l.weights.iter().copied().collect(),
                    biases: l.biases.to_vec(),
                })
                .collect(),
            catalog_hash,
        }
    }

    pub fn from_record(record: NetworkRecord<T>) -> Result<Self, NetError> {
        if record.format_version != MODEL_FORMAT_VERSION {
            return Err(NetError::Format(format!(
                "unsupported format version {}",
                record.format_version
            )));
        }
        let widths = record.spec.widths();
        if record.layers.len() + 1 != widths.len() {
            return Err(NetError::Format("layer count does not match spec".into()));
        }
        let layers = record
            .layers
            .into_iter()
            .zip(widths.windows(2))
            .map(|(l, pair)| {
                if l.inputs != pair[0] || l.outputs != pair[1] || l.biases.len() != l.outputs {
                    return Err(NetError::Format("layer dims do not match spec".into()));
                }
                let weights = Array2::from_shape_vec((l.outputs, l.inputs), l.weights)
                    .map_err(|e| NetError::Format(e.to_string()))?;
                Ok(Layer {
                    weights,
                    biases: Array1::from(l.biases),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            spec: record.spec,
            layers,
        })
    }
}

/// Row-major serialized form of a [`Network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NetworkRecord<T> {
    pub format_version: u32,
    pub spec: NetworkSpec,
    pub layers: Vec<LayerRecord<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerRecord<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

/// Fraction of rows whose target is among the `k` highest scores (lowest index wins ties).
pub fn top_k_accuracy<T: Scalar>(scores: ArrayView2<'_, T>, targets: &[usize], k: usize) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = scores
        .outer_iter()
        .zip(targets)
        .filter(|(row, &t)| {
            let row = row.to_vec();
            rank_desc(&row).iter().take(k).any(|&c| c == t)
        })
        .count();
    hits as f64 / targets.len() as f64
}

fn softmax_rows<T: Scalar>(z: &Array2<T>) -> Array2<T> {
    let mut out = z.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn cross_entropy<T: Scalar>(probs: &Array2<T>, targets: &[usize]) -> T {
    let floor = T::min_positive_value();
    let total: T = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| -(probs[[r, t]].max(floor)).ln())
        .sum();
    total / T::from_usize(targets.len()).expect("row count")
}
