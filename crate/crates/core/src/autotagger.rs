//! Two-stage message tagging: a per-label category detector followed by a
//! per-category value classifier, both linear models over a pluggable text encoder.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::vectorcore::{Schema, TagEvent, TagSource, UNKNOWN};

pub const TAGGER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("tagging corpus is empty")]
    EmptyCorpus,
    #[error("gold category {0:?} is not in the schema")]
    CategoryOutsideSchema(String),
    #[error("tagger was trained for schema {trained}, active schema is {active}")]
    SchemaMismatch { trained: String, active: String },
    #[error("tagger bundle: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercased alphanumeric tokens; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sparse feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatures<T> {
    pub indices: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> SparseFeatures<T> {
    pub fn to_dense(&self, dim: usize) -> Vec<T> {
        let mut out = vec![T::zero(); dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] += v;
        }
        out
    }

    fn dot_row(&self, weights: &Array2<T>, row: usize) -> T {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| weights[[row, i]] * v)
            .sum()
    }
}

/// Maps message text to fixed-width features.
pub trait TextEncoder<T> {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> SparseFeatures<T>;
}

/// Hashed bag of tokens: FNV-1a bucket counts divided by the square root of the token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedBagEncoder {
    pub dim: usize,
}

impl Default for HashedBagEncoder {
    fn default() -> Self {
        Self { dim: 2048 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl<T: Scalar> TextEncoder<T> for HashedBagEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> SparseFeatures<T> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return SparseFeatures {
                indices: Vec::new(),
                values: Vec::new(),
            };
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for t in &tokens {
            *counts.entry((fnv1a(t.as_bytes()) % self.dim as u64) as usize).or_default() += 1;
        }
        let scale = 1.0 / (tokens.len() as f64).sqrt();
        let (indices, values) = counts
            .into_iter()
            .map(|(i, c)| (i, T::from_f64_lossy(c as f64 * scale)))
            .unzip();
        SparseFeatures { indices, values }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoldTag {
    pub category: String,
    pub value: String,
}

impl GoldTag {
    pub fn new(category: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            category: category.into(),
            value: value.into(),
        }
    }
}

/// A message with its gold (category, value) tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedMessage {
    pub text: String,
    pub tags: Vec<GoldTag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Default category decision threshold.
    pub tau_cat: f64,
    pub seed: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        Self {
            dim: 2048,
            epochs: 30,
            learning_rate: 0.5,
            l2: 1e-5,
            tau_cat: 0.5,
            seed: 0,
        }
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// One-vs-rest logistic classifiers, one per label.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryDetector<T> {
    pub labels: Vec<String>,
    pub weights: Array2<T>,
    pub biases: Array1<T>,
    pub thresholds: Vec<T>,
}

impl<T: Scalar> CategoryDetector<T> {
    /// Independent presence probability per label.
    pub fn probabilities(&self, x: &SparseFeatures<T>) -> Vec<T> {
        (0..self.labels.len())
            .map(|l| sigmoid(x.dot_row(&self.weights, l) + self.biases[l]))
            .collect()
    }

    /// Labels whose probability exceeds their threshold.
    pub fn detect(&self, x: &SparseFeatures<T>) -> Vec<usize> {
        self.probabilities(x)
            .into_iter()
            .enumerate()
            .filter(|(l, p)| *p > self.thresholds[*l])
            .map(|(l, _)| l)
            .collect()
    }
}

/// Softmax classifier over `vocab(label) ∪ {"unknown"}` for one label.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueClassifier<T> {
    pub classes: Vec<String>,
    pub weights: Array2<T>,
    pub biases: Array1<T>,
    /// Tokens of each class value; a value is only chosen when all its tokens occur in the message.
    pub value_tokens: Vec<Vec<String>>,
}

impl<T: Scalar> ValueClassifier<T> {
    pub fn probabilities(&self, x: &SparseFeatures<T>) -> Vec<T> {
        let logits: Vec<T> = (0..self.classes.len())
            .map(|c| x.dot_row(&self.weights, c) + self.biases[c])
            .collect();
        softmax(&logits)
    }

    /// Most probable value among those with lexical support in `tokens`; `"unknown"` otherwise.
    pub fn classify(&self, x: &SparseFeatures<T>, tokens: &BTreeSet<String>) -> String {
        let probs = self.probabilities(x);
        let mut best: Option<(usize, T)> = None;
        for (c, p) in probs.into_iter().enumerate() {
            let supported = !self.value_tokens[c].is_empty()
                && self.value_tokens[c].iter().all(|t| tokens.contains(t));
            if !supported {
                continue;
            }
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((c, p));
            }
        }
        best.map_or_else(|| UNKNOWN.to_string(), |(c, _)| self.classes[c].clone())
    }
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Where an automatic tag is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagContext {
    pub session_id: String,
    pub message_index: usize,
    pub timestamp: u64,
}

/// Trained two-stage tagger.
#[derive(Debug, Clone, PartialEq)]
pub struct Tagger<T, E = HashedBagEncoder> {
    pub encoder: E,
    pub schema_hash: String,
    pub detector: CategoryDetector<T>,
    pub values: Vec<ValueClassifier<T>>,
}

/// Trains both stages: stage 1 on multi-label presence targets over the whole
/// corpus, stage 2 per label on the messages gold-tagged with that label.
pub fn train_tagger<T: Scalar, E: TextEncoder<T> + Clone>(
    corpus: &[TaggedMessage],
    schema: &Schema,
    encoder: E,
    config: &TaggerConfig,
) -> Result<Tagger<T, E>, TaggerError> {
    if corpus.is_empty() {
        return Err(TaggerError::EmptyCorpus);
    }
    for tag in corpus.iter().flat_map(|m| &m.tags) {
        if !schema.labels.contains(&tag.category) {
            return Err(TaggerError::CategoryOutsideSchema(tag.category.clone()));
        }
    }
    let dim = encoder.dim();
    let n = schema.n;
    let features: Vec<SparseFeatures<T>> = corpus.iter().map(|m| encoder.encode(&m.text)).collect();
    let lr = T::from_f64_lossy(config.learning_rate);
    let l2 = T::from_f64_lossy(config.l2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // stage 1
    let presence: Vec<Vec<bool>> = corpus
        .iter()
        .map(|m| {
            let mut row = vec![false; n];
            for t in &m.tags {
                row[schema.labels.index_of(&t.category).expect("checked above")] = true;
            }
            row
        })
        .collect();
    let mut weights = Array2::<T>::zeros((n, dim));
    let mut biases = Array1::<T>::zeros(n);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &r in &order {
            let x = &features[r];
            for l in 0..n {
                let p = sigmoid(x.dot_row(&weights, l) + biases[l]);
                let target = if presence[r][l] { T::one() } else { T::zero() };
                let g = p - target;
                for (&i, &v) in x.indices.iter().zip(&x.values) {
                    let w = weights[[l, i]];
                    weights[[l, i]] = w - lr * (g * v + l2 * w);
                }
                biases[l] -= lr * g;
            }
        }
    }
    let detector = CategoryDetector {
        labels: schema.labels.labels().to_vec(),
        weights,
        biases,
        thresholds: vec![T::from_f64_lossy(config.tau_cat); n],
    };

    // stage 2
    let mut values = Vec::with_capacity(n);
    for label in schema.labels.labels() {
        let mut classes: Vec<String> = schema.vocab.words(label).to_vec();
        classes.push(UNKNOWN.to_string());
        let unknown = classes.len() - 1;
        let rows: Vec<(usize, usize)> = corpus
            .iter()
            .enumerate()
            .flat_map(|(r, m)| {
                m.tags
                    .iter()
                    .filter(|t| schema.labels.index_of(&t.category) == schema.labels.index_of(label))
                    .map(move |t| (r, t))
            })
            .map(|(r, t)| {
                let class = classes
                    .iter()
                    .position(|c| *c == t.value.trim())
                    .unwrap_or(unknown);
                (r, class)
            })
            .collect();
        let k = classes.len();
        let mut weights = Array2::<T>::zeros((k, dim));
        let mut biases = Array1::<T>::zeros(k);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for &j in &order {
                let (r, target) = rows[j];
                let x = &features[r];
                let logits: Vec<T> = (0..k).map(|c| x.dot_row(&weights, c) + biases[c]).collect();
                let probs = softmax(&logits);
                for c in 0..k {
                    let g = probs[c] - if c == target { T::one() } else { T::zero() };
                    for (&i, &v) in x.indices.iter().zip(&x.values) {
                        let w = weights[[c, i]];
                        weights[[c, i]] = w - lr * (g * v + l2 * w);
                    }
                    biases[c] -= lr * g;
                }
            }
        }
        let value_tokens = classes
            .iter()
            .enumerate()
            .map(|(c, v)| if c == unknown { Vec::new() } else { tokenize(v) })
            .collect();
        values.push(ValueClassifier {
            classes,
            weights,
            biases,
            value_tokens,
        });
    }

    Ok(Tagger {
        encoder,
        schema_hash: schema.hash(),
        detector,
        values,
    })
}

impl<T: Scalar, E: TextEncoder<T>> Tagger<T, E> {
    pub fn check_schema(&self, schema: &Schema) -> Result<(), TaggerError> {
        let active = schema.hash();
        if active != self.schema_hash {
            return Err(TaggerError::SchemaMismatch {
                trained: self.schema_hash.clone(),
                active,
            });
        }
        Ok(())
    }

    /// Predicted (category, value) pairs for one message.
    pub fn predict(&self, text: &str) -> Vec<GoldTag> {
        let x = self.encoder.encode(text);
        let tokens: BTreeSet<String> = tokenize(text).into_iter().collect();
        self.detector
            .detect(&x)
            .into_iter()
            .map(|l| GoldTag::new(self.detector.labels[l].clone(), self.values[l].classify(&x, &tokens)))
            .collect()
    }

    /// Automatic tag events for a message, one per detected category.
    pub fn auto_tag(&self, schema: &Schema, text: &str, ctx: &TagContext) -> Result<Vec<TagEvent>, TaggerError> {
        self.check_schema(schema)?;
        Ok(self
            .predict(text)
            .into_iter()
            .map(|g| TagEvent {
                session_id: ctx.session_id.clone(),
                category: g.category,
                value: g.value,
                message_index: ctx.message_index,
                timestamp: ctx.timestamp,
                source: TagSource::Auto,
            })
            .collect())
    }

    /// Per-label thresholds maximising F1 of category detection on `validation`.
    pub fn tune_thresholds(&mut self, validation: &[TaggedMessage]) {
        let grid: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
        let probs: Vec<Vec<T>> = validation
            .iter()
            .map(|m| self.detector.probabilities(&self.encoder.encode(&m.text)))
            .collect();
        for l in 0..self.detector.labels.len() {
            let label = &self.detector.labels[l];
            let truth: Vec<bool> = validation
                .iter()
                .map(|m| m.tags.iter().any(|t| &t.category == label))
                .collect();
            if !truth.iter().any(|&t| t) {
                continue;
            }
            let mut best = (f64::MIN, self.detector.thresholds[l]);
            for &tau in &grid {
                let tau_t = T::from_f64_lossy(tau);
                let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
                for (p, &t) in probs.iter().zip(&truth) {
                    match (p[l] > tau_t, t) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fneg += 1,
                        _ => {}
                    }
                }
                let f1 = 2.0 * tp as f64 / (2 * tp + fp + fneg).max(1) as f64;
                if f1 > best.0 {
                    best = (f1, tau_t);
                }
            }
            self.detector.thresholds[l] = best.1;
        }
    }
}

/// Micro-averaged precision/recall/F1 over exact (category, value) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl F1Report {
    /// Precision with no predictions, recall with no gold, and F1 with `P + R = 0` are reported as 0.
    pub fn from_counts(tp: usize, fp: usize, fneg: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fneg,
        }
    }
}

/// Scores per-message predicted tag sets against gold tag sets.
pub fn f1_from_predictions(predicted: &[Vec<GoldTag>], gold: &[TaggedMessage]) -> F1Report {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (pred, msg) in predicted.iter().zip(gold) {
        let pred: BTreeSet<&GoldTag> = pred.iter().collect();
        let truth: BTreeSet<&GoldTag> = msg.tags.iter().collect();
        tp += pred.intersection(&truth).count();
        fp += pred.difference(&truth).count();
        fneg += truth.difference(&pred).count();
    }
    F1Report::from_counts(tp, fp, fneg)
}

pub fn f1_eval<T: Scalar, E: TextEncoder<T>>(
    tagger: &Tagger<T, E>,
    gold: &[TaggedMessage],
) -> Result<F1Report, TaggerError> {
    if gold.is_empty() {
        return Err(TaggerError::EmptyCorpus);
    }
    let predicted: Vec<Vec<GoldTag>> = gold.iter().map(|m| tagger.predict(&m.text)).collect();
    Ok(f1_from_predictions(&predicted, gold))
}

/// F1 of a tagger trained on a random half of the training rows versus one
/// trained on all of them, both scored on the same test rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub train_rows: usize,
    pub test_rows: usize,
    pub half: F1Report,
    pub full: F1Report,
}

impl GrowthReport {
    pub fn improvement(&self) -> f64 {
        self.full.f1 - self.half.f1
    }
}

pub fn data_growth<T: Scalar>(
    train: &[TaggedMessage],
    test: &[TaggedMessage],
    schema: &Schema,
    config: &TaggerConfig,
    seed: u64,
) -> Result<GrowthReport, TaggerError> {
    let mut shuffled = train.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = &shuffled[..shuffled.len() / 2];
    let small: Tagger<T> = train_tagger(half, schema, HashedBagEncoder::default(), config)?;
    let large: Tagger<T> = train_tagger(train, schema, HashedBagEncoder::default(), config)?;
    Ok(GrowthReport {
        train_rows: train.len(),
        test_rows: test.len(),
        half: f1_eval(&small, test)?,
        full: f1_eval(&large, test)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar, E: Serialize", deserialize = "T: Scalar, E: DeserializeOwned"))]
struct TaggerRecord<T, E> {
    format_version: u32,
    encoder: E,
    schema_hash: String,
    labels: Vec<String>,
    thresholds: Vec<T>,
    detector_weights: Vec<Vec<T>>,
    detector_biases: Vec<T>,
    value_classifiers: Vec<ValueRecord<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ValueRecord<T> {
    classes: Vec<String>,
    weights: Vec<Vec<T>>,
    biases: Vec<T>,
}

fn rows_of<T: Scalar>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn from_rows<T: Scalar>(rows: Vec<Vec<T>>, cols: usize) -> Result<Array2<T>, TaggerError> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(TaggerError::Format("weight row width mismatch".into()));
    }
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| TaggerError::Format(e.to_string()))
}

impl<T: Scalar, E: TextEncoder<T> + Serialize + DeserializeOwned> Tagger<T, E> {
    pub fn to_json(&self) -> String {
        let record = TaggerRecord {
            format_version: TAGGER_FORMAT_VERSION,
            encoder: &self.encoder,
            schema_hash: self.schema_hash.clone(),
            labels: self.detector.labels.clone(),
            thresholds: self.detector.thresholds.clone(),
            detector_weights: rows_of(&self.detector.weights),
            detector_biases: self.detector.biases.to_vec(),
            value_classifiers: self
                .values
                .iter()
                .map(|v| ValueRecord {
                    classes: v.classes.clone(),
                    weights: rows_of(&v.weights),
                    biases: v.biases.to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&record).expect("tagger serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TaggerError> {
        let r: TaggerRecord<T, E> =
            serde_json::from_str(text).map_err(|e| TaggerError::Format(e.to_string()))?;
        if r.format_version != TAGGER_FORMAT_VERSION {
            return Err(TaggerError::Format(format!("unsupported version {}", r.format_version)));
        }
        let dim = r.encoder.dim();
        let n = r.labels.len();
        if r.thresholds.len() != n || r.detector_biases.len() != n || r.value_classifiers.len() != n {
            return Err(TaggerError::Format("label count mismatch".into()));
        }
        let values = r
            .value_classifiers
            .into_iter()
            .map(|v| {
                if v.biases.len() != v.classes.len() || v.classes.last().map(String::as_str) != Some(UNKNOWN) {
                    return Err(TaggerError::Format("value classifier classes malformed".into()));
                }
                let unknown = v.classes.len() - 1;
                let value_tokens = v
                    .classes
                    .iter()
                    .enumerate()
                    .map(|(c, s)| if c == unknown { Vec::new() } else { tokenize(s) })
                    .collect();
                Ok(ValueClassifier {
                    weights: from_rows(v.weights, dim)?,
                    biases: Array1::from(v.biases),
                    classes: v.classes,
                    value_tokens,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            encoder: r.encoder,
            schema_hash: r.schema_hash,
            detector: CategoryDetector {
                labels: r.labels,
                weights: from_rows(r.detector_weights, dim)?,
                biases: Array1::from(r.detector_biases),
                thresholds: r.thresholds,
            },
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TaggerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TaggerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
