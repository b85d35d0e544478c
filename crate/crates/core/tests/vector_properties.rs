use std::collections::{BTreeMap, BTreeSet};

use assist_core::vectorcore::{
    build_label_list, snapshot_stream, KnownWordTable, LabelList, Schema, TagEvent, TagSource, EMPTY, UNKNOWN,
};
use proptest::prelude::*;

const CATEGORIES: &[&str] = &["university", "University", "income", "savings", "job", "pet", "state", "Age", "degree"];
const VALUES: &[&str] = &["UCLA", "MIT", "20k", "nurse", " MIT ", "-", "unknown", "texas", "cat"];

fn tag(category: &str, value: &str, i: usize) -> TagEvent {
    TagEvent::new("s", category, value, i, i as u64, TagSource::Manual).unwrap()
}

/// Training tags, with the schema built from them, plus an unrelated stream of tags to fold.
fn scenario() -> impl Strategy<Value = (Vec<TagEvent>, usize, Vec<TagEvent>)> {
    let pair = (0..CATEGORIES.len(), 0..VALUES.len());
    (
        prop::collection::vec(pair.clone(), 1..40),
        1usize..6,
        prop::collection::vec(pair, 0..30),
    )
        .prop_map(|(train, n, stream)| {
            let mk = |v: Vec<(usize, usize)>| -> Vec<TagEvent> {
                v.into_iter().enumerate().map(|(i, (c, w))| tag(CATEGORIES[c], VALUES[w], i)).collect()
            };
            let train = mk(train);
            let distinct = train.iter().map(|e| e.category.as_str()).collect::<BTreeSet<_>>().len();
            (train, n.min(distinct), mk(stream))
        })
}

fn collation(s: &str) -> (String, String) {
    (s.to_lowercase(), s.to_string())
}

proptest! {
    #[test]
    fn label_list_is_sorted_unique_and_sized((train, n, _) in scenario()) {
        let labels = build_label_list(&train, n).unwrap();
        prop_assert_eq!(labels.len(), n);
        let keys: Vec<_> = labels.labels().iter().map(|l| collation(l)).collect();
        prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
        // Every kept label is at least as frequent as every dropped one.
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &train {
            *counts.entry(e.category.as_str()).or_default() += 1;
        }
        let kept_min = labels.labels().iter().map(|l| counts[l.as_str()]).min().unwrap();
        let dropped_max = counts.iter().filter(|(c, _)| !labels.contains(c)).map(|(_, k)| *k).max().unwrap_or(0);
        prop_assert!(kept_min >= dropped_max);
    }

    #[test]
    fn vocabularies_never_hold_sentinels((train, n, _) in scenario()) {
        let schema = Schema::from_events(&train, n).unwrap();
        for (_, words) in schema.vocab.iter() {
            prop_assert!(words.iter().all(|w| w != EMPTY && w != UNKNOWN && w.trim() == w));
        }
    }

    #[test]
    fn snapshots_keep_the_vector_invariants((train, n, stream) in scenario()) {
        let schema = Schema::from_events(&train, n).unwrap();
        let snaps = schema.snapshots(&stream);
        let in_label = stream.iter().filter(|e| schema.labels.contains(&e.category)).count();
        prop_assert_eq!(snaps.len(), in_label + 1);
        for (t, x) in snaps.iter().enumerate() {
            prop_assert_eq!(x.t(), t);
            prop_assert_eq!(x.values().len(), n);
            prop_assert_eq!(x.presence().len(), n);
            for i in 0..n {
                prop_assert_eq!(x.presence()[i] == 1, x.values()[i].as_str() != EMPTY);
            }
            prop_assert_eq!(x.concat().len(), 2 * n);
        }
        // Once present, a slot stays present.
        for w in snaps.windows(2) {
            for i in 0..n {
                prop_assert!(w[1].presence()[i] >= w[0].presence()[i]);
            }
        }
    }

    #[test]
    fn encoding_is_one_hot_and_invertible((train, n, stream) in scenario()) {
        let schema = Schema::from_events(&train, n).unwrap();
        let widths: Vec<usize> = schema.labels.labels().iter().map(|l| 2 + schema.vocab.words(l).len()).collect();
        prop_assert_eq!(schema.encoded_len(), n + widths.iter().sum::<usize>());
        for x in schema.snapshots(&stream) {
            let enc = schema.encode::<f64>(&x).unwrap();
            prop_assert_eq!(enc.len(), schema.encoded_len());
            let mut offset = 0;
            for w in &widths {
                let block = &enc.features[offset..offset + w];
                prop_assert_eq!(block.iter().filter(|&&v| v == 1.0).count(), 1);
                prop_assert!(block.iter().all(|&v| v == 0.0 || v == 1.0));
                offset += w;
            }
            let back = schema.decode(&enc).unwrap();
            prop_assert_eq!(back.values(), x.values());
            prop_assert_eq!(back.presence(), x.presence());
            // f32 encodes the same layout.
            let enc32 = schema.encode::<f32>(&x).unwrap();
            prop_assert!(enc32.features.iter().zip(&enc.features).all(|(a, b)| f64::from(*a) == *b));
        }
    }

    #[test]
    fn out_of_label_tags_change_nothing((train, n, stream) in scenario()) {
        let schema = Schema::from_events(&train, n).unwrap();
        let foreign: Vec<TagEvent> = stream.iter().map(|e| tag(&format!("zz_{}", e.category), &e.value, e.message_index)).collect();
        let mut mixed = Vec::new();
        for (a, b) in stream.iter().zip(&foreign) {
            mixed.push(b.clone());
            mixed.push(a.clone());
        }
        prop_assert_eq!(schema.snapshots(&mixed), schema.snapshots(&stream));
    }

    #[test]
    fn last_value_wins(values in prop::collection::vec(0..VALUES.len(), 1..10)) {
        let labels = LabelList::new(["university"]).unwrap();
        let mut vocab = KnownWordTable::new();
        vocab.insert("university", "UCLA");
        vocab.insert("university", "MIT");
        let stream: Vec<TagEvent> = values.iter().enumerate().map(|(i, &v)| tag("university", VALUES[v], i)).collect();
        let last = snapshot_stream(&stream, &labels, &vocab).pop().unwrap();
        let value = VALUES[*values.last().unwrap()].trim();
        let expected = if vocab.contains("university", value) { value } else { UNKNOWN };
        prop_assert_eq!(last.values()[0].as_str(), expected);
    }
}
