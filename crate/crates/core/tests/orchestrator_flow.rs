use std::sync::OnceLock;

use assist_core::domain::Domain;
use assist_core::orchestrator::{create_session, export_logs, export_training_data, ExportOptions, SessionConfig};
use assist_core::sessionlog::{Actor, EventBody, LogEvent, Mode};
use assist_core::simulate::{bootstrap, Bootstrap, PipelineConfig};
use assist_core::vectorcore::TagSource;
use assist_core::{Models, Session};

/// A small bootstrap shared by the whole file.
fn boot() -> &'static Bootstrap<f64> {
    static B: OnceLock<Bootstrap<f64>> = OnceLock::new();
    B.get_or_init(|| {
        let config = PipelineConfig {
            bootstrap_sessions: 40,
            seed: 11,
            ..PipelineConfig::default()
        };
        bootstrap::<f64>(&Domain::student_loans(), &config).unwrap()
    })
}

fn session(mode: Mode) -> Session {
    let b = boot();
    let models = match mode {
        Mode::Collect => Models {
            schema: Some(b.schema.clone().into()),
            ..Models::default()
        },
        _ => Models::new(b.advisor.clone(), b.tagger.clone()),
    };
    create_session(SessionConfig::new("flow", vec!["c1".into(), "c2".into()], mode), models).unwrap()
}

fn kinds(events: &[LogEvent]) -> Vec<&'static str> {
    events.iter().map(|e| e.body.kind()).collect()
}

/// A client message that the tagger labels, taken from the bootstrap corpus.
fn taggable_text() -> String {
    let b = boot();
    b.export
        .corpus
        .iter()
        .find(|m| !m.tags.is_empty() && !b.tagger.predict(&m.text).is_empty())
        .map(|m| m.text.clone())
        .expect("some corpus message is auto-tagged")
}

#[test]
fn client_message_then_tags_then_advice() {
    let mut s = session(Mode::AdviseAndCollect);
    let out = s.post_message("c1", Actor::Client, &taggable_text(), vec![], 1_000).unwrap();
    let k = kinds(&out);
    assert_eq!(k[0], "message");
    let first_non_tag = k[1..].iter().position(|&x| x != "tag").map_or(k.len(), |p| p + 1);
    assert!(first_non_tag > 1, "expected auto tags: {k:?}");
    assert!(k[first_non_tag..].iter().all(|&x| x == "advice"), "{k:?}");
    for e in &out[1..first_non_tag] {
        match &e.body {
            EventBody::Tag(t) => {
                assert_eq!(t.source, TagSource::Auto);
                assert_eq!(e.actor, Actor::Agent);
                assert_eq!(t.message_index, 0);
            }
            _ => unreachable!(),
        }
    }
    // Events only touch the client they belong to.
    assert!(out.iter().all(|e| e.client_id == "c1"));
    assert_eq!(s.vector("c2").unwrap().t(), 0);
}

#[test]
fn operator_messages_are_not_auto_tagged() {
    let mut s = session(Mode::AdviseAndCollect);
    let out = s.post_message("c1", Actor::Operator, &taggable_text(), vec![], 1_000).unwrap();
    assert!(kinds(&out).iter().all(|&k| k != "tag"), "{:?}", kinds(&out));
    assert_eq!(s.vector("c1").unwrap().t(), 0);
    assert!(s.post_message("c1", Actor::Agent, "hi", vec![], 1_001).is_err());
}

#[test]
fn unchanged_advice_is_not_pushed_again() {
    let mut s = session(Mode::AdviseOnly);
    let text = taggable_text();
    s.post_message("c1", Actor::Client, &text, vec![], 1_000).unwrap();
    let again = s.post_message("c1", Actor::Client, &text, vec![], 2_000).unwrap();
    assert!(!kinds(&again).contains(&"advice"), "{:?}", kinds(&again));
    let advice_ids: Vec<&str> = s
        .events()
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::Advice(a) => Some(a.advice_id.as_str()),
            _ => None,
        })
        .collect();
    let mut unique = advice_ids.clone();
    unique.dedup();
    assert_eq!(unique, advice_ids);
}

#[test]
fn later_manual_tag_overrides_the_slot() {
    let b = boot();
    let label = b
        .schema
        .labels
        .labels()
        .iter()
        .find(|l| b.schema.vocab.words(l).len() >= 2)
        .expect("a label with two known values")
        .clone();
    let words = b.schema.vocab.words(&label);
    let slot = b.schema.labels.index_of(&label).unwrap();
    let mut s = session(Mode::AdviseAndCollect);
    s.post_message("c1", Actor::Client, "hello", vec![], 1_000).unwrap();
    s.record_tag("c1", &label, &words[0], 0, 1_100).unwrap();
    assert_eq!(s.vector("c1").unwrap().values()[slot].as_str(), words[0]);
    let out = s.record_tag("c1", &label, &words[1], 0, 1_200).unwrap();
    assert_eq!(out[0].actor, Actor::Operator);
    assert_eq!(s.vector("c1").unwrap().values()[slot].as_str(), words[1]);
    assert!(s.record_tag("c1", &label, &words[0], 5, 1_300).is_err());
}

#[test]
fn collect_mode_only_records() {
    let mut s = session(Mode::Collect);
    let out = s.post_message("c1", Actor::Client, &taggable_text(), vec![], 1_000).unwrap();
    assert_eq!(kinds(&out), ["message"]);
    s.end_client("c1", Actor::Client, "done", 2_000).unwrap();
    let rest = s.shutdown(3_000);
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0].client_id, "c2");
    assert!(s.is_closed());
}

#[test]
fn session_limits_are_enforced() {
    let b = boot();
    let clients: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
    assert!(create_session::<f64>(SessionConfig::new("x", clients, Mode::Collect), Models::default()).is_err());
    let dup = vec!["a".to_string(), "a".to_string()];
    assert!(create_session::<f64>(SessionConfig::new("x", dup, Mode::Collect), Models::default()).is_err());
    // Advising without a tagger is refused.
    let models = Models {
        advisor: Some(b.advisor.clone().into()),
        ..Models::default()
    };
    assert!(create_session(SessionConfig::new("x", vec!["a".into()], Mode::AdviseOnly), models).is_err());
}

#[test]
fn export_counts_match_the_logs() {
    let b = boot();
    let logs: Vec<_> = b.logs.iter().enumerate().map(|(i, l)| (format!("{i}"), Ok(l.clone()))).collect();
    let export = export_logs(logs, ExportOptions::default());
    let count = |f: &dyn Fn(&LogEvent) -> bool| b.logs.iter().flat_map(|l| &l.events).filter(|e| f(e)).count();
    assert_eq!(export.report.sessions_used, b.logs.len());
    assert_eq!(export.corpus.len(), count(&|e| matches!(e.body, EventBody::Message(_)) && e.actor == Actor::Client));
    assert_eq!(export.report.client_messages, export.corpus.len());
    assert_eq!(
        export.report.manual_tags,
        count(&|e| matches!(&e.body, EventBody::Tag(t) if t.source == TagSource::Manual))
    );

    let manual = export_logs(
        b.logs.iter().map(|l| (String::new(), Ok(l.clone()))).collect(),
        ExportOptions { manual_tags_only: true },
    );
    assert_eq!(manual.report.auto_tags, 0);
}

#[test]
fn empty_directory_exports_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let export = export_training_data(dir.path(), ExportOptions::default()).unwrap();
    assert!(export.corpus.is_empty() && export.logs.is_empty());
    assert_eq!(export.report.files, 0);
}
