use std::collections::BTreeMap;
use std::path::PathBuf;

use assist_core::advisor::{build_datasets, train_ensemble, AdviceType, Demonstration, EnsembleConfig};
use assist_core::clientsim::read_storyboard_dir;
use assist_core::domain::Domain;
use assist_core::orchestrator::{export_logs, ExportOptions, TrainingExport};
use assist_core::simulate::{schema_for, simulate_batch, train_advisor_bundle, SimConfig, StoryboardSource};
use assist_core::nnet::TrainConfig;
use assist_core::vectorcore::{InformationVector, Schema, TagEvent, TagSource};
use assist_core::{AdvisorBundle, Models};

fn storyboards() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/storyboards")
}

/// Collect-mode sessions over the fixture storyboards, one client each.
fn export(sessions: usize, seed: u64) -> TrainingExport {
    let domain = Domain::student_loans();
    let library = read_storyboard_dir(&storyboards(), &domain).unwrap();
    let config = SimConfig {
        clients: 1,
        ..SimConfig::collect()
    };
    let logs = simulate_batch::<f64>(&domain, &StoryboardSource::Library(library), &Models::default(), &config, sessions, seed).unwrap();
    export_logs(logs.into_iter().map(|l| (String::new(), Ok(l))).collect(), ExportOptions::default())
}

fn train(export: &TrainingExport, seed: u64) -> (Schema, AdvisorBundle) {
    let schema = schema_for(export, 32).unwrap();
    let catalog = Domain::student_loans().advice_catalog();
    let (bundle, _) = train_advisor_bundle(export, &schema, &catalog, &EnsembleConfig::default(), seed).unwrap();
    (schema, bundle)
}

#[test]
fn male_federal_applicant_is_pointed_at_selective_service() {
    let export = export(48, 3);
    let (schema, bundle) = train(&export, 4);
    let catalog = &bundle.catalog;
    let sss: Vec<String> = catalog.for_resource("sss_info").iter().map(|i| i.id.clone()).collect();
    assert!(!sss.is_empty());
    let sex = schema.labels.index_of("sex").expect("sex is a label");

    let topic = schema.labels.index_of("topic").expect("topic is a label");

    // Demonstration targets look ahead to the operator's next action, so keep
    // the states where the applicant is already known to be a male asking
    // about federal loans and the operator went on to the Selective Service page.
    let demos = export.demonstrations(&schema, catalog).unwrap();
    let states: Vec<_> = demos
        .iter()
        .filter(|d| d.vector.values()[sex].as_str() == "male" && d.vector.values()[topic].as_str() == "federal loans")
        .filter(|d| {
            d.targets
                .get(&AdviceType::UsefulInformation)
                .is_some_and(|set| set.iter().any(|i| sss.contains(i)))
        })
        .collect();
    assert!(!states.is_empty(), "no sss_info demonstrations");

    let hits = states
        .iter()
        .filter(|d| {
            let advice = bundle.advise(&d.vector).unwrap();
            let hit = advice[&AdviceType::UsefulInformation].item_ids().any(|i| sss.iter().any(|s| s == i));
            hit
        })
        .count();
    assert!(hits * 2 > states.len(), "sss_info advised in {hits}/{} states", states.len());
}

/// 20 hand-made demonstrations: with nothing known the operator opens by
/// asking the topic (12 times); once the topic is known they ask the university.
#[test]
fn toy_ensembles_open_with_the_majority_question() {
    let tag = |c: &str, v: &str| TagEvent::new("toy", c, v, 0, 0, TagSource::Manual).unwrap();
    let schema = Schema::from_events(&[tag("topic", "federal loans"), tag("university", "MIT")], 2).unwrap();
    let known = schema.apply_tag(&schema.empty_vector(), &tag("topic", "federal loans")).unwrap();
    let demo = |vector: &InformationVector, ask: &str| Demonstration {
        session_id: "toy".into(),
        client_id: "c1".into(),
        vector: vector.clone(),
        targets: BTreeMap::from([(AdviceType::TopicAcquisition, vec![ask.to_string()])]),
    };
    let demos: Vec<Demonstration> = (0..20)
        .map(|i| if i < 12 { demo(&schema.empty_vector(), "ask_topic") } else { demo(&known, "ask_university") })
        .collect();
    let config = EnsembleConfig {
        ensemble_size: 5,
        min_rows_per_member: 2,
        p_threshold: Some(0.5),
        train: TrainConfig { epochs: 200, ..TrainConfig::default() },
        ..EnsembleConfig::default()
    };
    let mut datasets = build_datasets::<f64>(&demos, &schema).unwrap();
    let typed = datasets.remove(&AdviceType::TopicAcquisition).unwrap();
    let ensemble = train_ensemble(&typed, &config, 21).unwrap();
    let bundle = AdvisorBundle {
        schema: schema.clone(),
        catalog: Domain::student_loans().advice_catalog(),
        ensembles: BTreeMap::from([(AdviceType::TopicAcquisition, ensemble)]),
    };

    let opening = bundle.advise(&schema.empty_vector()).unwrap();
    let ask: Vec<&str> = opening[&AdviceType::TopicAcquisition].item_ids().collect();
    assert_eq!(ask.first(), Some(&"ask_topic"), "{opening:?}");
    assert!(opening[&AdviceType::Resolution].silent && opening[&AdviceType::UsefulInformation].silent);

    // With every slot known, all questions are suppressed.
    let full = schema.apply_tag(&known, &tag("university", "MIT")).unwrap();
    assert!(bundle.advise(&full).unwrap()[&AdviceType::TopicAcquisition].silent);
}
