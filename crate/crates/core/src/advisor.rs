//! Advice from demonstrations: extraction of `(X_j, A_j)` pairs, training of
//! gated random-network ensembles, and thresholded two-option voting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest;
use crate::nnet::{
    generate_random_network, ArchConfig, LabeledDataset, NetError, Network, NetworkRecord,
    TrainConfig,
};
use crate::scalar::{rank_desc, Scalar};
use crate::sessionlog::{Actor, EventBody, SessionLog};
use crate::vectorcore::{InformationVector, LabelList, Schema, TagEvent, TagSource, VectorError};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AdvisorError {
    #[error("session log is not time-ordered (event {0})")]
    UnorderedLog(usize),
    #[error("unknown action reference {0:?}")]
    UnknownActionRef(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no candidate passed the accuracy gate {p_threshold:.4} after {attempts} attempts")]
    GateUnsatisfiable { attempts: usize, p_threshold: f64 },
    #[error("advice catalog: {0}")]
    Catalog(String),
    #[error("bundle: {0}")]
    Format(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdviceType {
    /// What the operator should ask next.
    TopicAcquisition,
    /// What the operator should answer.
    Resolution,
    /// Which resource or calculator to use.
    UsefulInformation,
}

impl AdviceType {
    pub const ALL: [AdviceType; 3] = [
        AdviceType::TopicAcquisition,
        AdviceType::Resolution,
        AdviceType::UsefulInformation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdviceType::TopicAcquisition => "topic_acquisition",
            AdviceType::Resolution => "resolution",
            AdviceType::UsefulInformation => "useful_information",
        }
    }
}

impl fmt::Display for AdviceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "target", rename_all = "snake_case")]
pub enum ActionRef {
    /// Ask the client about a label.
    Ask(String),
    /// Open an information resource.
    Resource(String),
    /// Run a calculator.
    Calculator(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdviceItem {
    pub id: String,
    #[serde(rename = "type")]
    pub advice_type: AdviceType,
    pub display_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_ref: Option<ActionRef>,
}

impl AdviceItem {
    pub fn asked_label(&self) -> Option<&str> {
        match &self.action_ref {
            Some(ActionRef::Ask(label)) => Some(label),
            _ => None,
        }
    }

    pub fn resource_id(&self) -> Option<&str> {
        match &self.action_ref {
            Some(ActionRef::Resource(id)) | Some(ActionRef::Calculator(id)) => Some(id),
            _ => None,
        }
    }
}

/// All advice items an operator can be offered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AdviceItem>", into = "Vec<AdviceItem>")]
pub struct AdviceCatalog {
    items: Vec<AdviceItem>,
}

impl TryFrom<Vec<AdviceItem>> for AdviceCatalog {
    type Error = AdvisorError;

    fn try_from(items: Vec<AdviceItem>) -> Result<Self, Self::Error> {
        AdviceCatalog::new(items)
    }
}

impl From<AdviceCatalog> for Vec<AdviceItem> {
    fn from(c: AdviceCatalog) -> Self {
        c.items
    }
}

impl AdviceCatalog {
    pub fn new(items: Vec<AdviceItem>) -> Result<Self, AdvisorError> {
        let mut seen = BTreeSet::new();
        for item in &items {
            if !seen.insert(item.id.as_str()) {
                return Err(AdvisorError::Catalog(format!("duplicate id {:?}", item.id)));
            }
            if item.advice_type == AdviceType::TopicAcquisition && item.asked_label().is_none() {
                return Err(AdvisorError::Catalog(format!(
                    "topic acquisition item {:?} does not name a label",
                    item.id
                )));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[AdviceItem] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&AdviceItem> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Every topic-acquisition item must ask about a label in `labels`.
    pub fn check_labels(&self, labels: &LabelList) -> Result<(), AdvisorError> {
        for item in &self.items {
            if let Some(label) = item.asked_label() {
                if !labels.contains(label) {
                    return Err(AdvisorError::Catalog(format!(
                        "item {:?} asks about {label:?}, which is not in the label list",
                        item.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Items realised by opening resource `resource_id`.
    pub fn for_resource(&self, resource_id: &str) -> Vec<&AdviceItem> {
        self.items
            .iter()
            .filter(|i| i.resource_id() == Some(resource_id))
            .collect()
    }

    /// Items whose display text appears verbatim (case-insensitively) in `text`.
    pub fn matched_in_text(&self, text: &str) -> Vec<&AdviceItem> {
        let lower = text.to_lowercase();
        self.items
            .iter()
            .filter(|i| !i.display_text.is_empty() && lower.contains(&i.display_text.to_lowercase()))
            .collect()
    }

    pub fn hash(&self) -> String {
        digest::json_digest(&self.items)
    }

    pub fn load(path: &Path) -> Result<Self, AdvisorError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| AdvisorError::Catalog(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), AdvisorError> {
        let text = serde_json::to_string_pretty(&self.items)
            .map_err(|e| AdvisorError::Catalog(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Sorted advice item ids; the empty set is the silent class.
pub type AdviceSet = Vec<String>;

/// Closed universe of advice sets for one advice type. Class 0 is always the silent set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    classes: Vec<AdviceSet>,
}

impl Default for ClassCatalog {
    fn default() -> Self {
        Self {
            classes: vec![Vec::new()],
        }
    }
}

impl ClassCatalog {
    pub const SILENT: usize = 0;

    /// Catalog of the distinct sets in first-seen order, after the silent class.
    pub fn from_sets<'a>(sets: impl IntoIterator<Item = &'a AdviceSet>) -> Self {
        let mut catalog = Self::default();
        for set in sets {
            catalog.intern(set);
        }
        catalog
    }

    pub fn intern(&mut self, set: &AdviceSet) -> usize {
        if let Some(i) = self.index_of(set) {
            return i;
        }
        self.classes.push(set.clone());
        self.classes.len() - 1
    }

    pub fn index_of(&self, set: &AdviceSet) -> Option<usize> {
        self.classes.iter().position(|c| c == set)
    }

    pub fn items(&self, class: usize) -> &[String] {
        &self.classes[class]
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn hash(&self) -> String {
        digest::json_digest(&self.classes)
    }
}

/// One `(X_j, A_j)` pair: a snapshot and the advice set realised next, per type.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub session_id: String,
    pub client_id: String,
    pub vector: InformationVector,
    pub targets: BTreeMap<AdviceType, AdviceSet>,
}

/// Advice sets realised by one operator event, keyed by type.
fn realised_items(
    body: &EventBody,
    actor: Actor,
    catalog: &AdviceCatalog,
) -> Result<BTreeMap<AdviceType, BTreeSet<String>>, AdvisorError> {
    let mut out: BTreeMap<AdviceType, BTreeSet<String>> = BTreeMap::new();
    let mut add = |item: &AdviceItem| {
        out.entry(item.advice_type).or_default().insert(item.id.clone());
    };
    match body {
        EventBody::Message(m) if actor == Actor::Operator => {
            if m.refs.is_empty() {
                catalog.matched_in_text(&m.text).into_iter().for_each(&mut add);
            } else {
                for id in &m.refs {
                    let item = catalog
                        .get(id)
                        .ok_or_else(|| AdvisorError::UnknownActionRef(id.clone()))?;
                    add(item);
                }
            }
        }
        EventBody::ResourceUse(r) => {
            let items = catalog.for_resource(&r.resource_id);
            if items.is_empty() {
                return Err(AdvisorError::UnknownActionRef(r.resource_id.clone()));
            }
            items.into_iter().for_each(&mut add);
        }
        _ => {}
    }
    Ok(out)
}

/// Walks each client's conversation and pairs every information-vector snapshot
/// with the next operator action of each advice type (silent set when none follows).
pub fn extract_demonstrations(
    log: &SessionLog,
    schema: &Schema,
    catalog: &AdviceCatalog,
) -> Result<Vec<Demonstration>, AdvisorError> {
    if let Some(i) = log.events.windows(2).position(|w| w[0].ts_ms > w[1].ts_ms) {
        return Err(AdvisorError::UnorderedLog(i + 1));
    }
    let mut out = Vec::new();
    for client in log.clients() {
        // (position in client stream, snapshot)
        let mut snapshots: Vec<(usize, InformationVector)> = vec![(0, schema.empty_vector())];
        // (position, items by type)
        let mut actions: Vec<(usize, BTreeMap<AdviceType, BTreeSet<String>>)> = Vec::new();
        let mut session_id = String::new();
        for (pos, event) in log.for_client(&client).enumerate() {
            session_id.clone_from(&event.session_id);
            match &event.body {
                EventBody::Tag(tag) => {
                    if !schema.labels.contains(&tag.category) {
                        continue;
                    }
                    let e = TagEvent {
                        session_id: event.session_id.clone(),
                        category: tag.category.clone(),
                        value: tag.value.clone(),
                        message_index: tag.message_index,
                        timestamp: event.ts_ms,
                        source: tag.source,
                    };
                    let current = &snapshots.last().expect("initial snapshot").1;
                    let next = schema.apply_tag(current, &e)?;
                    snapshots.push((pos + 1, next));
                }
                body => {
                    let items = realised_items(body, event.actor, catalog)?;
                    if !items.is_empty() {
                        actions.push((pos, items));
                    }
                }
            }
        }
        for (pos, vector) in snapshots {
            let targets = AdviceType::ALL
                .iter()
                .map(|&ty| {
                    let set = actions
                        .iter()
                        .filter(|(p, _)| *p >= pos)
                        .find_map(|(_, items)| items.get(&ty))
                        .map(|s| s.iter().cloned().collect())
                        .unwrap_or_default();
                    (ty, set)
                })
                .collect();
            out.push(Demonstration {
                session_id: session_id.clone(),
                client_id: client.clone(),
                vector,
                targets,
            });
        }
    }
    Ok(out)
}

/// Encoded demonstrations for one advice type.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedDataset<T> {
    pub advice_type: AdviceType,
    pub classes: ClassCatalog,
    pub data: LabeledDataset<T>,
}

/// Encodes demonstrations into one dataset per advice type, interning advice sets
/// into class catalogs in first-seen order.
pub fn build_datasets<T: Scalar>(
    demos: &[Demonstration],
    schema: &Schema,
) -> Result<BTreeMap<AdviceType, TypedDataset<T>>, AdvisorError> {
    let dim = schema.encoded_len();
    let mut flat: Vec<T> = Vec::with_capacity(demos.len() * dim);
    for d in demos {
        flat.extend(schema.encode::<T>(&d.vector)?.features);
    }
    let inputs = Array2::from_shape_vec((demos.len(), dim), flat)
        .map_err(|e| AdvisorError::Format(e.to_string()))?;
    let mut out = BTreeMap::new();
    for ty in AdviceType::ALL {
        let mut classes = ClassCatalog::default();
        let targets: Vec<usize> = demos
            .iter()
            .map(|d| classes.intern(d.targets.get(&ty).unwrap_or(&Vec::new())))
            .collect();
        let data = LabeledDataset::from_array(inputs.clone(), targets, classes.len())?;
        out.insert(
            ty,
            TypedDataset {
                advice_type: ty,
                classes,
                data,
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteThresholds {
    /// Minimum vote share (exclusive) for the most voted option.
    pub first: f64,
    /// Minimum vote share (exclusive) for the runner-up.
    pub secondary: f64,
}

impl Default for VoteThresholds {
    fn default() -> Self {
        Self {
            first: 0.40,
            secondary: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub ensemble_size: usize,
    pub thresholds: VoteThresholds,
    /// Fixed gate; `None` means held-out majority baseline plus `gate_margin`.
    pub p_threshold: Option<f64>,
    pub gate_margin: f64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub test_fraction: f64,
    /// Share of training rows drawn (without replacement) for a random subset.
    pub subset_fraction: f64,
    pub min_rows_per_member: usize,
    pub max_attempts: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 25,
            thresholds: VoteThresholds::default(),
            p_threshold: None,
            gate_margin: 0.05,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            test_fraction: 0.2,
            subset_fraction: 0.7,
            min_rows_per_member: 10,
            max_attempts: 200,
        }
    }
}

/// An option chosen by the vote, with the items it stands for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedSet {
    pub class: usize,
    /// Vote share in `[0, 1]`.
    pub rank: f64,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Recommendation {
    pub items: Vec<RecommendedSet>,
    pub silent: bool,
}

impl Recommendation {
    pub fn silent() -> Self {
        Self {
            items: Vec::new(),
            silent: true,
        }
    }

    pub fn from_sets(items: Vec<RecommendedSet>) -> Self {
        let silent = items.is_empty();
        Self { items, silent }
    }

    /// Advice item ids in rank order.
    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().flat_map(|s| s.items.iter().map(String::as_str))
    }
}

/// A class picked by the thresholded vote before mapping to items.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VotedOption {
    pub class: usize,
    pub rank: f64,
}

/// The thresholded two-option vote over member predictions.
///
/// Options are ordered by vote count, lower class index first on ties; only
/// classes that received votes are options. The first option is kept iff its
/// vote share exceeds `thresholds.first`, the second iff its share exceeds
/// `thresholds.secondary`. A kept silent class contributes nothing.
pub fn tally_votes(predictions: &[usize], classes: usize, thresholds: &VoteThresholds) -> Vec<VotedOption> {
    if predictions.is_empty() {
        return Vec::new();
    }
    let mut votes = vec![0usize; classes];
    for &p in predictions {
        votes[p] += 1;
    }
    let members = predictions.len() as f64;
    let best: Vec<usize> = rank_desc(&votes)
        .into_iter()
        .filter(|&c| votes[c] > 0)
        .take(2)
        .collect();
    let mut out = Vec::new();
    for (slot, &class) in best.iter().enumerate() {
        let rank = votes[class] as f64 / members;
        let threshold = if slot == 0 {
            thresholds.first
        } else {
            thresholds.secondary
        };
        if rank > threshold && class != ClassCatalog::SILENT {
            out.push(VotedOption { class, rank });
        }
    }
    out
}

/// Gated members trained for one advice type.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    pub advice_type: AdviceType,
    pub members: Vec<Network<T>>,
    pub classes: ClassCatalog,
    pub thresholds: VoteThresholds,
    pub p_threshold: f64,
    pub ensemble_size: usize,
    /// Held-out rows every member was gated on.
    pub holdout: LabeledDataset<T>,
    pub train_digest: String,
    pub test_digest: String,
    pub attempts: usize,
}

pub fn dataset_digest<T: Scalar>(data: &LabeledDataset<T>) -> String {
    let values: Vec<f64> = data.inputs().iter().map(|v| v.to_f64_lossy()).collect();
    digest::json_digest(&(data.len(), data.dim(), data.classes(), values, data.targets()))
}

/// Algorithm-1 training loop: random or class-balanced subset, random
/// architecture, train, keep iff held-out top-1 accuracy beats the gate.
pub fn train_ensemble<T: Scalar>(
    typed: &TypedDataset<T>,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<Ensemble<T>, AdvisorError> {
    let data = &typed.data;
    let present = data.class_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(AdvisorError::InsufficientData(format!(
            "{} has {present} observed class(es), need 2",
            typed.advice_type
        )));
    }
    let floor = config.min_rows_per_member * config.ensemble_size;
    if data.len() < floor {
        return Err(AdvisorError::InsufficientData(format!(
            "{} has {} rows, need {floor}",
            typed.advice_type,
            data.len()
        )));
    }
    if config.ensemble_size == 0 {
        return Err(AdvisorError::InsufficientData("ensemble size is zero".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let test_len = ((data.len() as f64 * config.test_fraction).round() as usize).clamp(1, data.len() - 1);
    let (test_idx, train_idx) = order.split_at(test_len);
    let test = data.subset(test_idx);
    let train = data.subset(train_idx);

    let p_threshold = config
        .p_threshold
        .unwrap_or_else(|| majority_baseline_on(&train, &test) + config.gate_margin);

    let mut members = Vec::with_capacity(config.ensemble_size);
    let mut attempts = 0;
    while members.len() < config.ensemble_size {
        if attempts >= config.max_attempts {
            return Err(AdvisorError::GateUnsatisfiable {
                attempts,
                p_threshold,
            });
        }
        attempts += 1;
        let num: f64 = rng.random();
        let subset = if num > 0.5 {
            random_subset(&train, config.subset_fraction, &mut rng)
        } else {
            balanced_subset(&train, &mut rng)
        };
        let net_seed: u64 = rng.random();
        let net = generate_random_network::<T>(net_seed, data.dim(), data.classes(), &config.arch)?;
        let net = net.train(&subset, &config.train)?;
        let p_net = net.accuracy(&test, 1)?;
        if p_net > p_threshold {
            members.push(net);
        }
    }

    Ok(Ensemble {
        advice_type: typed.advice_type,
        members,
        classes: typed.classes.clone(),
        thresholds: config.thresholds,
        p_threshold,
        ensemble_size: config.ensemble_size,
        train_digest: dataset_digest(&train),
        test_digest: dataset_digest(&test),
        holdout: test,
        attempts,
    })
}

/// Test-set accuracy of always answering the training majority class.
pub fn majority_baseline_on<T: Scalar>(train: &LabeledDataset<T>, test: &LabeledDataset<T>) -> f64 {
    let counts = train.class_counts();
    let majority = rank_desc(&counts)[0];
    let hits = test.targets().iter().filter(|&&t| t == majority).count();
    hits as f64 / test.len().max(1) as f64
}

fn random_subset<T: Scalar>(train: &LabeledDataset<T>, fraction: f64, rng: &mut ChaCha8Rng) -> LabeledDataset<T> {
    let k = ((train.len() as f64 * fraction).round() as usize).clamp(1, train.len());
    let mut picked = index::sample(rng, train.len(), k).into_vec();
    picked.sort_unstable();
    train.subset(&picked)
}

/// Equal draws (with replacement) per observed class, each of the median class frequency.
fn balanced_subset<T: Scalar>(train: &LabeledDataset<T>, rng: &mut ChaCha8Rng) -> LabeledDataset<T> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in train.targets().iter().enumerate() {
        by_class.entry(t).or_default().push(i);
    }
    let mut freqs: Vec<usize> = by_class.values().map(Vec::len).collect();
    freqs.sort_unstable();
    let per_class = freqs[freqs.len() / 2].max(1);
    let mut picked = Vec::with_capacity(per_class * by_class.len());
    for rows in by_class.values() {
        for _ in 0..per_class {
            picked.push(rows[rng.random_range(0..rows.len())]);
        }
    }
    train.subset(&picked)
}

impl<T: Scalar> Ensemble<T> {
    pub fn input_dim(&self) -> usize {
        self.holdout.dim()
    }

    /// Each member's argmax class for `x`.
    pub fn member_votes(&self, x: &[T]) -> Result<Vec<usize>, AdvisorError> {
        self.members
            .iter()
            .map(|m| m.predict_class(x).map_err(AdvisorError::from))
            .collect()
    }

    pub fn vote(&self, x: &[T]) -> Result<Recommendation, AdvisorError> {
        if x.len() != self.input_dim() {
            return Err(NetError::DimMismatch {
                expected: self.input_dim(),
                found: x.len(),
            }
            .into());
        }
        let votes = self.member_votes(x)?;
        let options = tally_votes(&votes, self.classes.len(), &self.thresholds);
        Ok(Recommendation::from_sets(
            options
                .into_iter()
                .map(|o| RecommendedSet {
                    class: o.class,
                    rank: o.rank,
                    items: self.classes.items(o.class).to_vec(),
                })
                .collect(),
        ))
    }

    /// Per-row class scores: vote counts, with summed member probabilities
    /// (scaled below one vote) breaking ties between equally voted classes.
    pub fn vote_scores(&self, inputs: ndarray::ArrayView2<'_, T>) -> Result<Array2<f64>, AdvisorError> {
        let classes = self.classes.len();
        let mut scores = Array2::<f64>::zeros((inputs.nrows(), classes));
        let tie_scale = 1.0 / (self.members.len() as f64 + 1.0);
        for member in &self.members {
            let probs = member.predict_batch(inputs)?;
            for (r, row) in probs.outer_iter().enumerate() {
                let row: Vec<T> = row.to_vec();
                let best = crate::scalar::argmax(&row).expect("outputs");
                scores[[r, best]] += 1.0;
                for c in 0..classes {
                    scores[[r, c]] += tie_scale * row[c].to_f64_lossy() / self.members.len() as f64;
                }
            }
        }
        Ok(scores)
    }

    /// Fraction of rows whose true class is among the `k` best-voted classes.
    pub fn evaluate_top_k(&self, test: &LabeledDataset<T>, k: usize) -> Result<f64, AdvisorError> {
        if test.is_empty() {
            return Err(NetError::EmptyDataset.into());
        }
        let scores = self.vote_scores(test.inputs())?;
        Ok(crate::nnet::top_k_accuracy(scores.view(), test.targets(), k))
    }

    /// Top-`k` accuracy of each member on its own.
    pub fn member_accuracies(&self, test: &LabeledDataset<T>, k: usize) -> Result<Vec<f64>, AdvisorError> {
        self.members
            .iter()
            .map(|m| m.accuracy(test, k).map_err(AdvisorError::from))
            .collect()
    }

    /// Members whose held-out top-1 accuracy does not beat the gate (should be none).
    pub fn gate_violations(&self) -> Result<Vec<(usize, f64)>, AdvisorError> {
        if dataset_digest(&self.holdout) != self.test_digest {
            return Err(AdvisorError::Format("held-out data does not match its digest".into()));
        }
        let mut out = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let acc = m.accuracy(&self.holdout, 1)?;
            if !(acc > self.p_threshold) {
                out.push((i, acc));
            }
        }
        Ok(out)
    }
}

/// Trained ensembles for every advice type, tied to one schema and catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvisorBundle<T> {
    pub schema: Schema,
    pub catalog: AdviceCatalog,
    pub ensembles: BTreeMap<AdviceType, Ensemble<T>>,
}

impl<T: Scalar> AdvisorBundle<T> {
    /// One recommendation per advice type. Types without an ensemble stay silent;
    /// questions about labels already present in `x` are dropped.
    pub fn advise(&self, x: &InformationVector) -> Result<BTreeMap<AdviceType, Recommendation>, AdvisorError> {
        let encoded = self.schema.encode::<T>(x)?;
        let mut out = BTreeMap::new();
        for ty in AdviceType::ALL {
            let rec = match self.ensembles.get(&ty) {
                Some(e) => e.vote(encoded.as_slice())?,
                None => Recommendation::silent(),
            };
            let rec = if ty == AdviceType::TopicAcquisition {
                self.suppress_known(rec, x)
            } else {
                rec
            };
            out.insert(ty, rec);
        }
        Ok(out)
    }

    fn suppress_known(&self, rec: Recommendation, x: &InformationVector) -> Recommendation {
        let known = |id: &String| {
            self.catalog
                .get(id)
                .and_then(AdviceItem::asked_label)
                .and_then(|label| self.schema.labels.index_of(label))
                .is_some_and(|i| x.is_present(i))
        };
        Recommendation::from_sets(
            rec.items
                .into_iter()
                .filter_map(|mut set| {
                    set.items.retain(|id| !known(id));
                    (!set.items.is_empty()).then_some(set)
                })
                .collect(),
        )
    }

    pub fn schema_hash(&self) -> String {
        self.schema.hash()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&BundleRecord::from(self)).expect("bundle serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AdvisorError> {
        let record: BundleRecord<T> =
            serde_json::from_str(text).map_err(|e| AdvisorError::Format(e.to_string()))?;
        record.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<(), AdvisorError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AdvisorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Accuracy of one advice type's ensemble on external demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeEvaluation {
    pub rows: usize,
    /// Rows whose advice set the ensemble never saw; they count as misses.
    pub unseen: usize,
    pub ensemble_top1: f64,
    pub ensemble_top2: f64,
    pub member_top2: Vec<f64>,
    /// Share of the most frequent advice set among the evaluated rows.
    pub majority_baseline: f64,
}

impl TypeEvaluation {
    pub fn best_member_top2(&self) -> f64 {
        self.member_top2.iter().copied().fold(0.0, f64::max)
    }
}

impl<T: Scalar> Ensemble<T> {
    /// Scores the ensemble on demonstrations labelled with its own class catalog.
    pub fn evaluate_demonstrations(&self, demos: &[Demonstration], schema: &Schema) -> Result<TypeEvaluation, AdvisorError> {
        if demos.is_empty() {
            return Err(NetError::EmptyDataset.into());
        }
        let empty = Vec::new();
        let mut frequency: BTreeMap<&AdviceSet, usize> = BTreeMap::new();
        let mut flat = Vec::new();
        let mut targets = Vec::new();
        for d in demos {
            let set = d.targets.get(&self.advice_type).unwrap_or(&empty);
            *frequency.entry(set).or_default() += 1;
            if let Some(class) = self.classes.index_of(set) {
                flat.extend(schema.encode::<T>(&d.vector)?.features);
                targets.push(class);
            }
        }
        let rows = demos.len();
        let seen = targets.len();
        let majority = frequency.values().copied().max().unwrap_or(0) as f64 / rows as f64;
        let scale = seen as f64 / rows as f64;
        let (top1, top2, members) = if seen == 0 {
            (0.0, 0.0, vec![0.0; self.members.len()])
        } else {
            let inputs = Array2::from_shape_vec((seen, schema.encoded_len()), flat)
                .map_err(|e| AdvisorError::Format(e.to_string()))?;
            let data = LabeledDataset::from_array(inputs, targets, self.classes.len())?;
            (
                self.evaluate_top_k(&data, 1)? * scale,
                self.evaluate_top_k(&data, 2)? * scale,
                self.member_accuracies(&data, 2)?.into_iter().map(|a| a * scale).collect(),
            )
        };
        Ok(TypeEvaluation {
            rows,
            unseen: rows - seen,
            ensemble_top1: top1,
            ensemble_top2: top2,
            member_top2: members,
            majority_baseline: majority,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct DatasetRecord<T> {
    dim: usize,
    classes: usize,
    rows: Vec<T>,
    targets: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct EnsembleRecord<T> {
    classes: ClassCatalog,
    thresholds: VoteThresholds,
    p_threshold: f64,
    ensemble_size: usize,
    attempts: usize,
    train_digest: String,
    test_digest: String,
    holdout: DatasetRecord<T>,
    members: Vec<NetworkRecord<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct BundleRecord<T> {
    format_version: u32,
    schema_hash: String,
    schema: Schema,
    catalog: AdviceCatalog,
    ensembles: BTreeMap<AdviceType, EnsembleRecord<T>>,
}

impl<T: Scalar> From<&AdvisorBundle<T>> for BundleRecord<T> {
    fn from(b: &AdvisorBundle<T>) -> Self {
        let ensembles = b
            .ensembles
            .iter()
            .map(|(&ty, e)| {
                let catalog_hash = e.classes.hash();
                (
                    ty,
                    EnsembleRecord {
                        classes: e.classes.clone(),
                        thresholds: e.thresholds,
                        p_threshold: e.p_threshold,
                        ensemble_size: e.ensemble_size,
                        attempts: e.attempts,
                        train_digest: e.train_digest.clone(),
                        test_digest: e.test_digest.clone(),
                        holdout: DatasetRecord {
                            dim: e.holdout.dim(),
                            classes: e.holdout.classes(),
                            rows: e.holdout.inputs().iter().copied().collect(),
                            targets: e.holdout.targets().to_vec(),
                        },
                        members: e
                            .members
                            .iter()
                            .map(|m| m.to_record(Some(catalog_hash.clone())))
                            .collect(),
                    },
                )
            })
            .collect();
        Self {
            format_version: BUNDLE_FORMAT_VERSION,
            schema_hash: b.schema.hash(),
            schema: b.schema.clone(),
            catalog: b.catalog.clone(),
            ensembles,
        }
    }
}

impl<T: Scalar> TryFrom<BundleRecord<T>> for AdvisorBundle<T> {
    type Error = AdvisorError;

    fn try_from(r: BundleRecord<T>) -> Result<Self, Self::Error> {
        if r.format_version != BUNDLE_FORMAT_VERSION {
            return Err(AdvisorError::Format(format!(
                "unsupported bundle version {}",
                r.format_version
            )));
        }
        if r.schema.hash() != r.schema_hash {
            return Err(AdvisorError::Format("schema hash mismatch".into()));
        }
        let mut ensembles = BTreeMap::new();
        for (ty, e) in r.ensembles {
            let catalog_hash = e.classes.hash();
            let members = e
                .members
                .into_iter()
                .map(|m| {
                    if m.catalog_hash.as_deref() != Some(catalog_hash.as_str()) {
                        return Err(AdvisorError::Format("member class catalog mismatch".into()));
                    }
                    Network::from_record(m).map_err(AdvisorError::from)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let holdout = LabeledDataset::from_array(
                Array2::from_shape_vec((e.holdout.targets.len(), e.holdout.dim), e.holdout.rows)
                    .map_err(|err| AdvisorError::Format(err.to_string()))?,
                e.holdout.targets,
                e.holdout.classes,
            )?;
            if members.iter().any(|m| m.input_dim() != holdout.dim()) {
                return Err(AdvisorError::Format("member input width mismatch".into()));
            }
            ensembles.insert(
                ty,
                Ensemble {
                    advice_type: ty,
                    members,
                    classes: e.classes,
                    thresholds: e.thresholds,
                    p_threshold: e.p_threshold,
                    ensemble_size: e.ensemble_size,
                    holdout,
                    train_digest: e.train_digest,
                    test_digest: e.test_digest,
                    attempts: e.attempts,
                },
            );
        }
        Ok(Self {
            schema: r.schema,
            catalog: r.catalog,
            ensembles,
        })
    }
}

/// Tag events recorded in a log (both sources), in log order.
pub fn tag_events(log: &SessionLog) -> Vec<TagEvent> {
    log.events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::Tag(t) => Some(TagEvent {
                session_id: e.session_id.clone(),
                category: t.category.clone(),
                value: t.value.clone(),
                message_index: t.message_index,
                timestamp: e.ts_ms,
                source: t.source,
            }),
            _ => None,
        })
        .collect()
}

/// Counts of manual vs automatic tags, for reports.
pub fn tag_source_counts(log: &SessionLog) -> (usize, usize) {
    tag_events(log).iter().fold((0, 0), |(m, a), t| match t.source {
        TagSource::Manual => (m + 1, a),
        TagSource::Auto => (m, a + 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{LayerRecord, NetworkSpec, MODEL_FORMAT_VERSION};
    use crate::sessionlog::{LogEvent, MessagePayload, Mode, ResourceUsePayload, SessionEndPayload, TagPayload};
    use crate::vectorcore::{KnownWordTable, Slot};

    fn th(first: f64, secondary: f64) -> VoteThresholds {
        VoteThresholds { first, secondary }
    }

    fn votes(counts: &[(usize, usize)]) -> Vec<usize> {
        counts.iter().flat_map(|&(c, k)| std::iter::repeat(c).take(k)).collect()
    }

    #[test]
    fn unanimous_vote() {
        let out = tally_votes(&votes(&[(2, 7)]), 4, &th(0.5, 0.3));
        assert_eq!(out, vec![VotedOption { class: 2, rank: 1.0 }]);
    }

    #[test]
    fn split_vote_follows_literal_thresholds() {
        // A=1 (40), B=2 (35), C=3 (25)
        let out = tally_votes(&votes(&[(1, 40), (2, 35), (3, 25)]), 4, &th(0.5, 0.3));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].class, 2);
        assert!((out[0].rank - 0.35).abs() < 1e-12);
    }

    #[test]
    fn all_silent_votes_abstain() {
        assert!(tally_votes(&votes(&[(0, 5)]), 3, &th(0.0, 0.0)).is_empty());
        // silent as runner-up only removes the second option
        let out = tally_votes(&votes(&[(1, 3), (0, 2)]), 3, &th(0.0, 0.0));
        assert_eq!(out.iter().map(|o| o.class).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn equal_votes_prefer_lower_class() {
        let out = tally_votes(&votes(&[(3, 2), (1, 2)]), 4, &th(0.0, 0.0));
        assert_eq!(out.iter().map(|o| o.class).collect::<Vec<_>>(), vec![1, 3]);
    }

    fn catalog() -> AdviceCatalog {
        let item = |id: &str, ty, text: &str, r: Option<ActionRef>| AdviceItem {
            id: id.into(),
            advice_type: ty,
            display_text: text.into(),
            action_ref: r,
        };
        AdviceCatalog::new(vec![
            item("ask_university", AdviceType::TopicAcquisition, "Which university?", Some(ActionRef::Ask("university".into()))),
            item("ask_savings", AdviceType::TopicAcquisition, "How much have you saved?", Some(ActionRef::Ask("savings".into()))),
            item("explain_federal", AdviceType::Resolution, "Federal loans have fixed rates.", None),
            item("loan_calculator", AdviceType::UsefulInformation, "Loan payment calculator", Some(ActionRef::Calculator("loan_calculator".into()))),
        ])
        .unwrap()
    }

    fn schema() -> Schema {
        let labels = LabelList::new(["savings", "university"]).unwrap();
        let mut vocab = KnownWordTable::new();
        vocab.insert("university", "UCLA");
        vocab.insert("savings", "20k");
        Schema::new(labels, vocab)
    }

    fn ev(ts: u64, actor: Actor, body: EventBody) -> LogEvent {
        LogEvent {
            ts_ms: ts,
            session_id: "s".into(),
            client_id: "c1".into(),
            actor,
            body,
        }
    }

    fn msg(i: usize, text: &str, refs: &[&str]) -> EventBody {
        EventBody::Message(MessagePayload {
            message_index: i,
            text: text.into(),
            refs: refs.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn tag(category: &str, value: &str, i: usize) -> EventBody {
        EventBody::Tag(TagPayload {
            category: category.into(),
            value: value.into(),
            message_index: i,
            source: TagSource::Manual,
            in_schema: true,
        })
    }

    /// client asks, operator asks university, client answers, tag, calculator, answer.
    fn fixture_log() -> SessionLog {
        SessionLog::new(vec![
            ev(0, Actor::Client, msg(0, "I need a loan for my daughter", &[])),
            ev(10, Actor::Operator, msg(1, "Which university?", &[])),
            ev(20, Actor::Client, msg(2, "She got into UCLA", &[])),
            ev(25, Actor::Operator, tag("university", "UCLA", 2)),
            ev(30, Actor::Operator, EventBody::ResourceUse(ResourceUsePayload { resource_id: "loan_calculator".into() })),
            ev(40, Actor::Operator, msg(3, "Federal loans have fixed rates.", &["explain_federal"])),
        ])
    }

    #[test]
    fn demonstrations_follow_next_operator_action() {
        let demos = extract_demonstrations(&fixture_log(), &schema(), &catalog()).unwrap();
        assert_eq!(demos.len(), 2);
        let x0 = &demos[0];
        assert_eq!(x0.vector, schema().empty_vector());
        assert_eq!(x0.targets[&AdviceType::TopicAcquisition], vec!["ask_university".to_string()]);
        assert_eq!(x0.targets[&AdviceType::Resolution], vec!["explain_federal".to_string()]);
        assert_eq!(x0.targets[&AdviceType::UsefulInformation], vec!["loan_calculator".to_string()]);
        let x1 = &demos[1];
        assert_eq!(x1.vector.values()[1], Slot::Known("UCLA".into()));
        assert!(x1.targets[&AdviceType::TopicAcquisition].is_empty());
        assert_eq!(x1.targets[&AdviceType::UsefulInformation], vec!["loan_calculator".to_string()]);
    }

    #[test]
    fn final_snapshot_is_silent_for_all_types() {
        let mut log = fixture_log();
        log.events.push(ev(50, Actor::Operator, tag("savings", "20k", 2)));
        log.events.push(ev(60, Actor::Client, EventBody::SessionEnd(SessionEndPayload { reason: "done".into(), mode: Mode::Collect })));
        let demos = extract_demonstrations(&log, &schema(), &catalog()).unwrap();
        let last = demos.last().unwrap();
        assert!(last.targets.values().all(Vec::is_empty));
    }

    #[test]
    fn extraction_errors() {
        let mut log = fixture_log();
        log.events.swap(0, 1);
        assert!(matches!(
            extract_demonstrations(&log, &schema(), &catalog()),
            Err(AdvisorError::UnorderedLog(_))
        ));
        let mut log = fixture_log();
        log.events.push(ev(99, Actor::Operator, msg(4, "x", &["nope"])));
        assert!(matches!(
            extract_demonstrations(&log, &schema(), &catalog()),
            Err(AdvisorError::UnknownActionRef(id)) if id == "nope"
        ));
    }

    #[test]
    fn catalog_rules() {
        let bad = AdviceItem {
            id: "q".into(),
            advice_type: AdviceType::TopicAcquisition,
            display_text: "?".into(),
            action_ref: None,
        };
        assert!(AdviceCatalog::new(vec![bad]).is_err());
        let c = catalog();
        assert!(c.check_labels(&schema().labels).is_ok());
        assert!(c.check_labels(&LabelList::new(["savings"]).unwrap()).is_err());
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<AdviceCatalog>(&json).unwrap(), c);
    }

    /// Network sending one-hot input `i` to class `map[i]`.
    pub(crate) fn mapping_net(map: &[usize], classes: usize) -> Network<f64> {
        let n = map.len();
        let hidden: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
        let out: Vec<f64> = (0..classes * n)
            .map(|k| if map[k % n] == k / n { 10.0 } else { 0.0 })
            .collect();
        Network::from_record(crate::nnet::NetworkRecord {
            format_version: MODEL_FORMAT_VERSION,
            spec: NetworkSpec {
                input_dim: n,
                output_dim: classes,
                hidden_layers: vec![n],
                activation: Default::default(),
                seed: 0,
            },
            layers: vec![
                LayerRecord { inputs: n, outputs: n, weights: hidden, biases: vec![0.0; n] },
                LayerRecord { inputs: n, outputs: classes, weights: out, biases: vec![0.0; classes] },
            ],
            catalog_hash: None,
        })
        .unwrap()
    }

    fn one_hot(i: usize, n: usize) -> Vec<f64> {
        (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
    }

    fn hand_ensemble(maps: &[&[usize]], classes: usize, holdout: LabeledDataset<f64>) -> Ensemble<f64> {
        let mut catalog = ClassCatalog::default();
        for c in 1..classes {
            catalog.intern(&vec![format!("item{c}")]);
        }
        Ensemble {
            advice_type: AdviceType::Resolution,
            members: maps.iter().map(|m| mapping_net(m, classes)).collect(),
            classes: catalog,
            thresholds: VoteThresholds::default(),
            p_threshold: 0.0,
            ensemble_size: maps.len(),
            test_digest: dataset_digest(&holdout),
            train_digest: String::new(),
            holdout,
            attempts: maps.len(),
        }
    }

    #[test]
    fn top_k_on_hand_counted_rows() {
        // inputs 0..4; members map input -> class
        let maps: [&[usize]; 3] = [&[1, 2, 3, 0], &[1, 2, 0, 0], &[2, 2, 3, 1]];
        // votes per input: 0:{1,1,2} 1:{2,2,2} 2:{3,0,3} 3:{0,0,1}
        let inputs = [0, 1, 2, 3, 0, 1, 2, 3, 2, 0];
        let truth = [1, 2, 0, 1, 2, 3, 3, 0, 3, 0];
        // top-1 (votes, then probability mass): 0->1, 1->2, 2->3, 3->0
        // top-2: 0->{1,2}, 1->{2, next by prob mass}, 2->{3,0}, 3->{0,1}
        let rows = inputs.iter().map(|&i| one_hot(i, 4)).collect();
        let test = LabeledDataset::new(rows, truth.to_vec(), 4).unwrap();
        let e = hand_ensemble(&maps, 4, test.clone());
        // top-1 hits: rows 0 (1), 1 (2), 6 (3), 7 (0), 8 (3) = 5/10
        assert!((e.evaluate_top_k(&test, 1).unwrap() - 0.5).abs() < 1e-12);
        // top-2 adds: row 2 (truth 0 at input 2), row 3 (truth 1 at input 3), row 4 (truth 2 at input 0) = 8/10
        assert!((e.evaluate_top_k(&test, 2).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(e.evaluate_top_k(&test, 4).unwrap(), 1.0);
    }

    #[test]
    fn single_perfect_member_scores_one() {
        let rows = (0..8).map(|i| one_hot(i % 4, 4)).collect();
        let targets: Vec<usize> = (0..8).map(|i| (i % 4 + 1) % 4).collect();
        let test = LabeledDataset::new(rows, targets, 4).unwrap();
        let e = hand_ensemble(&[&[1, 2, 3, 0]], 4, test.clone());
        assert_eq!(e.evaluate_top_k(&test, 2).unwrap(), 1.0);
        assert_eq!(e.evaluate_top_k(&test, 1).unwrap(), 1.0);
        assert!(e.gate_violations().unwrap().is_empty());
    }

    #[test]
    fn vote_maps_classes_to_items() {
        let test = LabeledDataset::new(vec![one_hot(0, 3)], vec![0], 3).unwrap();
        let e = hand_ensemble(&[&[1, 0, 0], &[1, 0, 0], &[2, 0, 0]], 3, test);
        let rec = e.vote(&one_hot(0, 3)).unwrap();
        // shares 2/3 and 1/3 clear 0.40 and 0.25
        assert_eq!(rec.items.len(), 2);
        assert_eq!(rec.items[0].items, vec!["item1".to_string()]);
        assert_eq!(rec.items[1].items, vec!["item2".to_string()]);
        assert!(!rec.silent);
        let rec = e.vote(&one_hot(1, 3)).unwrap();
        assert!(rec.silent && rec.items.is_empty());
        assert!(matches!(e.vote(&[1.0]), Err(AdvisorError::Net(NetError::DimMismatch { .. }))));
    }

    fn synthetic_typed(rows: usize, seed: u64, noise: f64) -> TypedDataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..rows {
            let i = rng.random_range(0..4);
            xs.push(one_hot(i, 4));
            ys.push(if rng.random::<f64>() < noise { rng.random_range(0..3) } else { i % 3 });
        }
        let mut classes = ClassCatalog::default();
        classes.intern(&vec!["a".into()]);
        classes.intern(&vec!["b".into()]);
        TypedDataset {
            advice_type: AdviceType::TopicAcquisition,
            classes,
            data: LabeledDataset::new(xs, ys, 3).unwrap(),
        }
    }

    fn small_config() -> EnsembleConfig {
        EnsembleConfig {
            ensemble_size: 3,
            arch: ArchConfig { max_depth: 2, min_width: 8, max_width: 16 },
            train: TrainConfig { epochs: 10, learning_rate: 0.1, batch_size: 16 },
            ..Default::default()
        }
    }

    #[test]
    fn vacuous_gate_keeps_first_candidates() {
        let data = synthetic_typed(200, 1, 0.1);
        let config = EnsembleConfig { p_threshold: Some(0.0), ..small_config() };
        let e = train_ensemble(&data, &config, 5).unwrap();
        assert_eq!(e.attempts, 3);
        assert_eq!(e.members.len(), 3);
        assert_eq!(e, train_ensemble(&data, &config, 5).unwrap());
    }

    #[test]
    fn impossible_gate_fails() {
        let data = synthetic_typed(200, 2, 0.3);
        let config = EnsembleConfig { p_threshold: Some(1.0), max_attempts: 5, ..small_config() };
        assert!(matches!(
            train_ensemble(&data, &config, 1),
            Err(AdvisorError::GateUnsatisfiable { attempts: 5, .. })
        ));
    }

    #[test]
    fn too_little_data_rejected() {
        let data = synthetic_typed(20, 3, 0.0);
        assert!(matches!(
            train_ensemble(&data, &small_config(), 1),
            Err(AdvisorError::InsufficientData(_))
        ));
        let mut one_class = synthetic_typed(100, 3, 0.0);
        one_class.data = LabeledDataset::new(vec![vec![1.0]; 100], vec![1; 100], 3).unwrap();
        assert!(matches!(
            train_ensemble(&one_class, &small_config(), 1),
            Err(AdvisorError::InsufficientData(_))
        ));
    }

    #[test]
    fn default_gate_members_beat_baseline() {
        let data = synthetic_typed(300, 4, 0.1);
        let e = train_ensemble(&data, &small_config(), 9).unwrap();
        assert!(e.gate_violations().unwrap().is_empty());
        assert!(e.p_threshold > 0.05);
    }

    #[test]
    fn advise_suppresses_known_labels_and_round_trips() {
        let schema = schema();
        let demos = extract_demonstrations(&fixture_log(), &schema, &catalog()).unwrap();
        let datasets = build_datasets::<f64>(&demos, &schema).unwrap();
        let ta = &datasets[&AdviceType::TopicAcquisition];
        assert_eq!(ta.classes.len(), 2);
        // every member asks about university regardless of input
        let dim = schema.encoded_len();
        let ask_all: Vec<usize> = vec![1; dim];
        let mut e = hand_ensemble(&[&ask_all], 2, ta.data.clone());
        e.classes = ta.classes.clone();
        e.advice_type = AdviceType::TopicAcquisition;
        let bundle = AdvisorBundle {
            schema: schema.clone(),
            catalog: catalog(),
            ensembles: BTreeMap::from([(AdviceType::TopicAcquisition, e)]),
        };
        let mut x = schema.empty_vector();
        // one-hot input: the empty vector lights several inputs, all mapped to class 1
        let rec = bundle.advise(&x).unwrap();
        assert_eq!(rec[&AdviceType::TopicAcquisition].item_ids().collect::<Vec<_>>(), ["ask_university"]);
        assert!(rec[&AdviceType::Resolution].silent);
        let tag = TagEvent::new("s", "university", "UCLA", 0, 0, TagSource::Manual).unwrap();
        x = schema.apply_tag(&x, &tag).unwrap();
        assert!(bundle.advise(&x).unwrap()[&AdviceType::TopicAcquisition].silent);

        let back = AdvisorBundle::<f64>::from_json(&bundle.to_json()).unwrap();
        assert_eq!(back, bundle);
    }
}
