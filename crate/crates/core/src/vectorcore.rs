//! Tag schema and per-client information vectors.
//!
//! A conversation is summarised as `X = concat(V, W)` over the `n` labels of
//! a [`LabelList`]: `V[i]` holds the symbolic value tagged for label `i`
//! (a known word, `"unknown"`, or `"-"`), and `W[i]` is the presence bit.
//! Every applied tag produces a new snapshot of the vector.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest;

/// Slot value for a label that has not been tagged.
pub const EMPTY: &str = "-";
/// Slot value for a label tagged with a word outside the known vocabulary.
pub const UNKNOWN: &str = "unknown";

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_LABEL_COUNT: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VectorError {
    #[error("tag corpus is empty")]
    EmptyCorpus,
    #[error("requested more labels than the {0} distinct categories available")]
    NotEnoughCategories(usize),
    #[error("label count must be positive")]
    ZeroLabels,
    #[error("malformed information vector: {0}")]
    MalformedVector(String),
    #[error("tag category is empty")]
    EmptyCategory,
    #[error("schema error: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagSource {
    Manual,
    Auto,
}

/// One tagging act by an operator or by the automatic tagger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagEvent {
    pub session_id: String,
    pub category: String,
    pub value: String,
    pub message_index: usize,
    /// Milliseconds since session start.
    pub timestamp: u64,
    pub source: TagSource,
}

impl TagEvent {
    pub fn new(
        session_id: impl Into<String>,
        category: impl Into<String>,
        value: impl Into<String>,
        message_index: usize,
        timestamp: u64,
        source: TagSource,
    ) -> Result<Self, VectorError> {
        let category = category.into().trim().to_string();
        if category.is_empty() {
            return Err(VectorError::EmptyCategory);
        }
        Ok(Self {
            session_id: session_id.into(),
            category,
            value: value.into(),
            message_index,
            timestamp,
            source,
        })
    }
}

/// Ordering key for labels: case-insensitive first, raw bytes as the casing tiebreak.
fn collation_key(s: &str) -> (String, &str) {
    (s.to_lowercase(), s)
}

/// The `n` most common tag categories in alphabetical order; fixes the vector layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelList {
    labels: Vec<String>,
}

impl LabelList {
    /// Builds a label list from an explicit set of labels, sorting them into canonical order.
    pub fn new<I, S>(labels: I) -> Result<Self, VectorError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut labels: Vec<String> = labels
            .into_iter()
            .map(|s| s.into().trim().to_string())
            .collect();
        if labels.is_empty() {
            return Err(VectorError::ZeroLabels);
        }
        if labels.iter().any(|l| l.is_empty()) {
            return Err(VectorError::EmptyCategory);
        }
        labels.sort_by(|a, b| collation_key(a).cmp(&collation_key(b)));
        let before = labels.len();
        labels.dedup();
        if labels.len() != before {
            return Err(VectorError::Schema("duplicate label".into()));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    /// Position of a category, matched exactly after trimming.
    pub fn index_of(&self, category: &str) -> Option<usize> {
        let category = category.trim();
        self.labels
            .binary_search_by(|probe| collation_key(probe).cmp(&collation_key(category)))
            .ok()
    }

    pub fn contains(&self, category: &str) -> bool {
        self.index_of(category).is_some()
    }
}

impl TryFrom<Vec<String>> for LabelList {
    type Error = VectorError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        LabelList::new(value)
    }
}

impl From<LabelList> for Vec<String> {
    fn from(value: LabelList) -> Self {
        value.labels
    }
}

/// Picks the `n` most frequent categories (ties broken by collation order) and
/// returns them sorted alphabetically.
pub fn build_label_list(events: &[TagEvent], n: usize) -> Result<LabelList, VectorError> {
    if events.is_empty() {
        return Err(VectorError::EmptyCorpus);
    }
    if n == 0 {
        return Err(VectorError::ZeroLabels);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in events {
        let category = e.category.trim();
        if category.is_empty() {
            continue;
        }
        *counts.entry(category).or_default() += 1;
    }
    if counts.len() < n {
        return Err(VectorError::NotEnoughCategories(counts.len()));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| collation_key(a.0).cmp(&collation_key(b.0)))
    });
    LabelList::new(ranked.into_iter().take(n).map(|(c, _)| c.to_string()))
}

/// Per-label vocabulary of values seen during training ingestion, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KnownWordTable {
    vocab: BTreeMap<String, Vec<String>>,
}

impl KnownWordTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `value` as known for `label`. Sentinels and empty strings are ignored.
    /// Returns whether the value was newly added.
    pub fn insert(&mut self, label: &str, value: &str) -> bool {
        let value = value.trim();
        if value.is_empty() || value == EMPTY || value == UNKNOWN {
            return false;
        }
        let words = self.vocab.entry(label.trim().to_string()).or_default();
        if words.iter().any(|w| w == value) {
            return false;
        }
        words.push(value.to_string());
        true
    }

    /// Builds the table from tag events, keeping only categories present in `labels`.
    pub fn from_events(events: &[TagEvent], labels: &LabelList) -> Self {
        let mut table = Self::new();
        for label in labels.labels() {
            table.vocab.entry(label.clone()).or_default();
        }
        for e in events {
            if let Some(i) = labels.index_of(&e.category) {
                table.insert(&labels.labels()[i], &e.value);
            }
        }
        table
    }

    pub fn words(&self, label: &str) -> &[String] {
        self.vocab.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, label: &str, value: &str) -> bool {
        self.words(label).iter().any(|w| w == value.trim())
    }

    pub fn position(&self, label: &str, value: &str) -> Option<usize> {
        self.words(label).iter().position(|w| w == value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.vocab.iter()
    }
}

/// Symbolic content of one label slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Empty,
    Unknown,
    Known(String),
}

impl Slot {
    pub fn as_str(&self) -> &str {
        match self {
            Slot::Empty => EMPTY,
            Slot::Unknown => UNKNOWN,
            Slot::Known(w) => w,
        }
    }

    pub fn parse(s: &str) -> Self {
        match s {
            EMPTY => Slot::Empty,
            UNKNOWN => Slot::Unknown,
            w => Slot::Known(w.to_string()),
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Slot {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Slot {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(Slot::parse(&s))
    }
}

/// `X_t = concat(V, W)` after `t` applied tags.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InformationVector {
    #[serde(rename = "V")]
    values: Vec<Slot>,
    #[serde(rename = "W")]
    present: Vec<u8>,
    t: usize,
}

impl InformationVector {
    /// The all-`"-"` vector for `n` labels.
    pub fn empty(n: usize) -> Self {
        Self {
            values: vec![Slot::Empty; n],
            present: vec![0; n],
            t: 0,
        }
    }

    pub fn from_parts(values: Vec<Slot>, present: Vec<u8>, t: usize) -> Result<Self, VectorError> {
        let x = Self { values, present, t };
        x.validate(x.values.len())?;
        Ok(x)
    }

    pub fn values(&self) -> &[Slot] {
        &self.values
    }

    pub fn presence(&self) -> &[u8] {
        &self.present
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.present.get(i).copied() == Some(1)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The flat symbolic form `V ++ W`, length `2n`.
    pub fn concat(&self) -> Vec<String> {
        self.values
            .iter()
            .map(|s| s.as_str().to_string())
            .chain(self.present.iter().map(|b| b.to_string()))
            .collect()
    }

    pub fn validate(&self, n: usize) -> Result<(), VectorError> {
        if self.values.len() != n || self.present.len() != n {
            return Err(VectorError::MalformedVector(format!(
                "expected {n} slots, found V={} W={}",
                self.values.len(),
                self.present.len()
            )));
        }
        for (i, (v, w)) in self.values.iter().zip(&self.present).enumerate() {
            let consistent = match w {
                0 => *v == Slot::Empty,
                1 => *v != Slot::Empty,
                _ => false,
            };
            if !consistent {
                return Err(VectorError::MalformedVector(format!(
                    "slot {i}: V={v} W={w}"
                )));
            }
        }
        Ok(())
    }

    /// Returns the vector after applying `e`. Tags on categories outside `labels`
    /// leave the vector (and `t`) unchanged.
    pub fn apply_tag(
        &self,
        e: &TagEvent,
        labels: &LabelList,
        vocab: &KnownWordTable,
    ) -> Result<Self, VectorError> {
        self.validate(labels.len())?;
        let mut next = self.clone();
        let Some(i) = labels.index_of(&e.category) else {
            return Ok(next);
        };
        let label = &labels.labels()[i];
        let value = e.value.trim();
        next.values[i] = if vocab.contains(label, value) {
            Slot::Known(value.to_string())
        } else {
            Slot::Unknown
        };
        next.present[i] = 1;
        next.t += 1;
        Ok(next)
    }
}

/// Snapshots after each in-label tag; element 0 is the all-`"-"` vector.
pub fn snapshot_stream(
    tags: &[TagEvent],
    labels: &LabelList,
    vocab: &KnownWordTable,
) -> Vec<InformationVector> {
    let mut current = InformationVector::empty(labels.len());
    let mut out = vec![current.clone()];
    for tag in tags {
        if !labels.contains(&tag.category) {
            continue;
        }
        current = current
            .apply_tag(tag, labels, vocab)
            .expect("vector built from the same label list");
        out.push(current.clone());
    }
    out
}

/// Dense numeric encoding of an [`InformationVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector<T = f64> {
    pub features: Vec<T>,
}

impl<T> EncodedVector<T> {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.features
    }
}

/// Label list plus known-word table; the layout contract shared by all models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub version: u32,
    pub n: usize,
    pub labels: LabelList,
    pub vocab: KnownWordTable,
}

impl Schema {
    pub fn new(labels: LabelList, vocab: KnownWordTable) -> Self {
        let mut vocab = vocab;
        for label in labels.labels() {
            vocab.vocab.entry(label.clone()).or_default();
        }
        Self {
            version: SCHEMA_VERSION,
            n: labels.len(),
            labels,
            vocab,
        }
    }

    /// Builds the schema from ingested tags: label list, then vocabulary.
    pub fn from_events(events: &[TagEvent], n: usize) -> Result<Self, VectorError> {
        let labels = build_label_list(events, n)?;
        let vocab = KnownWordTable::from_events(events, &labels);
        Ok(Self::new(labels, vocab))
    }

    pub fn check(&self) -> Result<(), VectorError> {
        if self.n != self.labels.len() {
            return Err(VectorError::Schema(format!(
                "n={} but {} labels",
                self.n,
                self.labels.len()
            )));
        }
        for (label, words) in self.vocab.iter() {
            if !self.labels.contains(label) {
                return Err(VectorError::Schema(format!("vocab for unknown label {label:?}")));
            }
            if words.iter().any(|w| w == EMPTY || w == UNKNOWN) {
                return Err(VectorError::Schema(format!("reserved word in vocab of {label:?}")));
            }
        }
        Ok(())
    }

    pub fn empty_vector(&self) -> InformationVector {
        InformationVector::empty(self.n)
    }

    pub fn apply_tag(
        &self,
        x: &InformationVector,
        e: &TagEvent,
    ) -> Result<InformationVector, VectorError> {
        x.apply_tag(e, &self.labels, &self.vocab)
    }

    pub fn snapshots(&self, tags: &[TagEvent]) -> Vec<InformationVector> {
        snapshot_stream(tags, &self.labels, &self.vocab)
    }

    /// Width of the one-hot block for label `i`: `"-"`, `"unknown"`, then the vocabulary.
    fn block_width(&self, i: usize) -> usize {
        2 + self.vocab.words(&self.labels.labels()[i]).len()
    }

    /// Total encoded length: `n + Σ_i (2 + |vocab(i)|)`.
    pub fn encoded_len(&self) -> usize {
        self.n + (0..self.n).map(|i| self.block_width(i)).sum::<usize>()
    }

    pub fn encode<T: num_traits::Float>(
        &self,
        x: &InformationVector,
    ) -> Result<EncodedVector<T>, VectorError> {
        x.validate(self.n)?;
        let mut features = vec![T::zero(); self.encoded_len()];
        let mut offset = 0;
        for (i, slot) in x.values.iter().enumerate() {
            let label = &self.labels.labels()[i];
            let pos = match slot {
                Slot::Empty => 0,
                Slot::Unknown => 1,
                Slot::Known(w) => {
                    2 + self.vocab.position(label, w).ok_or_else(|| {
                        VectorError::MalformedVector(format!(
                            "slot {i} holds {w:?}, not in vocabulary of {label:?}"
                        ))
                    })?
                }
            };
            features[offset + pos] = T::one();
            offset += self.block_width(i);
        }
        for (i, w) in x.present.iter().enumerate() {
            if *w == 1 {
                features[offset + i] = T::one();
            }
        }
        Ok(EncodedVector { features })
    }

    /// Inverse of [`Schema::encode`]; `t` is not recoverable and is set to the number of present slots.
    pub fn decode<T: num_traits::Float>(
        &self,
        encoded: &EncodedVector<T>,
    ) -> Result<InformationVector, VectorError> {
        if encoded.len() != self.encoded_len() {
            return Err(VectorError::MalformedVector(format!(
                "encoded length {} != {}",
                encoded.len(),
                self.encoded_len()
            )));
        }
        let mut values = Vec::with_capacity(self.n);
        let mut offset = 0;
        for i in 0..self.n {
            let width = self.block_width(i);
            let block = &encoded.features[offset..offset + width];
            let hot: Vec<usize> = (0..width).filter(|&j| block[j] == T::one()).collect();
            let [pos] = hot[..] else {
                return Err(VectorError::MalformedVector(format!(
                    "block {i} is not one-hot"
                )));
            };
            let label = &self.labels.labels()[i];
            values.push(match pos {
                0 => Slot::Empty,
                1 => Slot::Unknown,
                p => Slot::Known(self.vocab.words(label)[p - 2].clone()),
            });
            offset += width;
        }
        let present: Vec<u8> = encoded.features[offset..]
            .iter()
            .map(|v| u8::from(*v == T::one()))
            .collect();
        let t = present.iter().filter(|&&b| b == 1).count();
        InformationVector::from_parts(values, present, t)
    }

    /// Stable digest of the schema; models record it to detect layout drift.
    pub fn hash(&self) -> String {
        digest::json_digest(self)
    }

    pub fn load(path: &Path) -> Result<Self, VectorError> {
        let text = std::fs::read_to_string(path).map_err(|e| VectorError::Schema(e.to_string()))?;
        let schema: Schema =
            serde_json::from_str(&text).map_err(|e| VectorError::Schema(e.to_string()))?;
        if schema.version != SCHEMA_VERSION {
            return Err(VectorError::Schema(format!(
                "unsupported schema version {}",
                schema.version
            )));
        }
        schema.check()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
    }
}

/// One line of a snapshot export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub t: usize,
    #[serde(rename = "V")]
    pub values: Vec<String>,
    #[serde(rename = "W")]
    pub present: Vec<u8>,
}

impl From<&InformationVector> for SnapshotRecord {
    fn from(x: &InformationVector) -> Self {
        Self {
            t: x.t,
            values: x.values.iter().map(|s| s.as_str().to_string()).collect(),
            present: x.present.clone(),
        }
    }
}

/// Serializes snapshots as JSON lines, one record per snapshot.
pub fn export_snapshots(snapshots: &[InformationVector]) -> String {
    let mut out = String::new();
    for x in snapshots {
        out.push_str(&serde_json::to_string(&SnapshotRecord::from(x)).expect("plain record"));
        out.push('\n');
    }
    out
}
