//! Discrete-event simulation of one operator serving storyboard bots, and
//! the bootstrap pipeline: collect-mode sessions → corpora → trained models.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advisor::{
    build_datasets, train_ensemble, AdviceCatalog, AdviceType, AdvisorBundle, AdvisorError, EnsembleConfig,
};
use crate::autotagger::{data_growth, train_tagger, GoldTag, GrowthReport, HashedBagEncoder, Tagger, TaggerConfig, TaggerError};
use crate::clientsim::{bot_respond, random_storyboard, BotState, ClientMessage, Storyboard};
use crate::domain::Domain;
use crate::operator::{scripted_operator_step_with, ClientView, DelayModel, OperatorAction, OperatorMode};
use crate::orchestrator::{
    compute_time_metrics, create_session, export_logs, mean_metrics, ExportOptions, Models, OrchestratorError,
    SessionConfig, TimeMetrics, TrainingExport,
};
use crate::sessionlog::{Actor, EventBody, Mode, SessionLog};
use crate::vectorcore::{Schema, DEFAULT_LABEL_COUNT};
use crate::Scalar;

/// splitmix64 step, used to derive independent per-session seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub clients: usize,
    pub mode: Mode,
    pub operator: OperatorMode,
    pub delays: DelayModel,
    /// Probability of asking a missing attribute out of the fixed order.
    pub order_noise: f64,
    /// The operator marks gold tags by hand (collect-style sessions).
    pub manual_tagging: bool,
    /// Safety valve: sessions are shut down after this many queue events.
    pub max_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            clients: 3,
            mode: Mode::Collect,
            operator: OperatorMode::IgnoresAdvice,
            delays: DelayModel::default(),
            order_noise: 0.0,
            manual_tagging: true,
            max_steps: 10_000,
        }
    }
}

impl SimConfig {
    /// Phase-1 style: collect mode, hand tagging, a slightly inconsistent expert.
    pub fn collect() -> Self {
        Self {
            order_noise: 0.2,
            ..Self::default()
        }
    }

    /// Assisted operation: automatic tagging and advice on screen.
    pub fn advise(operator: OperatorMode) -> Self {
        Self {
            mode: Mode::AdviseAndCollect,
            operator,
            manual_tagging: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
enum Ev {
    Client { client: usize, msg: ClientMessage },
    Tag { client: usize, tag: GoldTag, message_index: usize },
    Resource { client: usize, resource_id: String, accept: Option<(String, String)> },
    Operator { client: usize, text: String, item_id: String, accept: Option<(String, String)> },
    OperatorFree,
}

struct SimClient {
    id: String,
    bot: BotState,
    view: ClientView,
    waiting_since: Option<u64>,
    /// Client messages the operator has not tagged yet.
    untagged: Vec<(usize, Vec<GoldTag>)>,
    ended: bool,
}

/// Runs one session to completion and returns its log.
#[allow(clippy::too_many_arguments)]
pub fn run_session<T: Scalar>(
    session_id: &str,
    storyboards: &[Storyboard],
    domain: &Domain,
    catalog: &AdviceCatalog,
    models: &Models<T>,
    config: &SimConfig,
    seed: u64,
) -> Result<SessionLog, OrchestratorError> {
    let ids: Vec<String> = (0..storyboards.len()).map(|k| format!("c{}", k + 1)).collect();
    let mut session_config = SessionConfig::new(session_id, ids.clone(), config.mode);
    session_config.max_clients = session_config.max_clients.max(storyboards.len());
    let mut session = create_session(session_config, models.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = &config.delays;

    let mut queue: BTreeMap<(u64, u64), Ev> = BTreeMap::new();
    let mut seq = 0u64;
    let mut schedule = |queue: &mut BTreeMap<(u64, u64), Ev>, t: u64, ev: Ev| {
        queue.insert((t, seq), ev);
        seq += 1;
    };

    let mut clients: Vec<SimClient> = Vec::new();
    for (k, sb) in storyboards.iter().enumerate() {
        let bot = BotState::new(sb.clone(), derive_seed(seed, k as u64 + 1));
        let (opening, bot) = bot_respond(&bot, "", domain);
        schedule(&mut queue, k as u64 * d.arrival_gap_ms, Ev::Client { client: k, msg: opening });
        clients.push(SimClient {
            id: ids[k].clone(),
            bot,
            view: ClientView::new(ids[k].clone()),
            waiting_since: None,
            untagged: Vec::new(),
            ended: false,
        });
    }

    let mut operator_busy = false;
    let mut steps = 0;
    let mut now = 0;
    while let Some(((t, _), ev)) = queue.pop_first() {
        now = t;
        steps += 1;
        if steps > config.max_steps {
            break;
        }
        match ev {
            Ev::Client { client, msg } => {
                let c = &mut clients[client];
                let events = session.post_message(&c.id, Actor::Client, &msg.text, vec![], t)?;
                let index = match &events[0].body {
                    EventBody::Message(m) => m.message_index,
                    _ => unreachable!("post_message starts with the message"),
                };
                c.view.observe(&msg.tags, domain);
                if msg.ends_session {
                    session.end_client(&c.id, Actor::Client, "completed", t)?;
                    c.ended = true;
                    c.waiting_since = None;
                    continue;
                }
                if config.manual_tagging && !msg.tags.is_empty() {
                    c.untagged.push((index, msg.tags.clone()));
                }
                c.waiting_since.get_or_insert(t);
                if !operator_busy {
                    operator_busy = true;
                    schedule(&mut queue, t, Ev::OperatorFree);
                }
            }
            Ev::Tag { client, tag, message_index } => {
                session.record_tag(&clients[client].id, &tag.category, &tag.value, message_index, t)?;
            }
            Ev::Resource { client, resource_id, accept } => {
                if let Some((advice, item)) = accept {
                    session.accept_advice(&advice, &item, t)?;
                }
                session.resource_use(&clients[client].id, &resource_id, t)?;
            }
            Ev::Operator { client, text, item_id, accept } => {
                let c = &mut clients[client];
                if let Some((advice, item)) = accept {
                    session.accept_advice(&advice, &item, t)?;
                }
                session.post_message(&c.id, Actor::Operator, &text, vec![item_id], t)?;
                let (reply, bot) = bot_respond(&c.bot, &text, domain);
                c.bot = bot;
                let delay = rng.random_range(d.client_reply_min_ms..=d.client_reply_max_ms);
                schedule(&mut queue, t + delay, Ev::Client { client, msg: reply });
            }
            Ev::OperatorFree => {
                let next = clients
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| !c.ended)
                    .filter_map(|(i, c)| c.waiting_since.map(|w| (w, i)))
                    .min();
                let Some((_, client)) = next else {
                    operator_busy = false;
                    continue;
                };
                let mut cur = t;
                let c = &mut clients[client];
                c.waiting_since = None;
                for (message_index, tags) in std::mem::take(&mut c.untagged) {
                    for tag in tags {
                        cur += d.tag_ms;
                        schedule(&mut queue, cur, Ev::Tag { client, tag, message_index });
                    }
                }
                let advice = if config.mode.advises() {
                    session.latest_advice(&c.id).map(|(id, recs)| (id.to_string(), recs.clone()))
                } else {
                    None
                };
                let mut sent = false;
                for _ in 0..4 {
                    let step = scripted_operator_step_with(
                        &c.view,
                        domain,
                        catalog,
                        advice.as_ref().map(|(_, r)| r),
                        config.operator,
                        d,
                        config.order_noise,
                        &mut rng,
                    );
                    cur += step.think_ms + step.lookup_ms;
                    let accept = step
                        .followed
                        .clone()
                        .and_then(|item| advice.as_ref().map(|(id, _)| (id.clone(), item)));
                    c.view.record(&step.action);
                    match step.action {
                        OperatorAction::UseResource { resource_id, .. } => {
                            schedule(&mut queue, cur, Ev::Resource { client, resource_id, accept });
                        }
                        action => {
                            cur += d.type_ms;
                            let text = action.text().expect("message action").to_string();
                            let item_id = action.item_id().to_string();
                            schedule(&mut queue, cur, Ev::Operator { client, text, item_id, accept });
                            sent = true;
                            break;
                        }
                    }
                }
                debug_assert!(sent, "expert policy sends a message within four steps");
                schedule(&mut queue, cur, Ev::OperatorFree);
            }
        }
    }
    if !session.is_closed() {
        session.shutdown(now + 1);
    }
    Ok(session.log())
}

/// Where simulated clients come from.
#[derive(Debug, Clone, PartialEq)]
pub enum StoryboardSource {
    /// Cycle through a fixed library.
    Library(Vec<Storyboard>),
    /// Fresh random personas per session.
    Random,
}

impl StoryboardSource {
    fn pick(&self, domain: &Domain, session: usize, clients: usize, rng: &mut ChaCha8Rng) -> Vec<Storyboard> {
        match self {
            Self::Library(lib) => (0..clients)
                .map(|k| lib[(session * clients + k) % lib.len()].clone())
                .collect(),
            Self::Random => (0..clients)
                .map(|k| random_storyboard(domain, rng, format!("gen{session}_{k}")))
                .collect(),
        }
    }
}

/// Runs `sessions` seeded sessions; session `i` uses seed `derive_seed(seed, i)`.
pub fn simulate_batch<T: Scalar>(
    domain: &Domain,
    source: &StoryboardSource,
    models: &Models<T>,
    config: &SimConfig,
    sessions: usize,
    seed: u64,
) -> Result<Vec<SessionLog>, OrchestratorError> {
    let catalog = domain.advice_catalog();
    (0..sessions)
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let boards = source.pick(domain, i, config.clients, &mut rng);
            run_session(&format!("s{i:04}"), &boards, domain, &catalog, models, config, s ^ 0x5eed)
        })
        .collect()
}

pub fn batch_metrics(logs: &[SessionLog]) -> Result<(TimeMetrics, Vec<TimeMetrics>), OrchestratorError> {
    let per: Vec<TimeMetrics> = logs.iter().map(compute_time_metrics).collect::<Result<_, _>>()?;
    let mean = mean_metrics(&per).ok_or_else(|| OrchestratorError::IncompleteLog("no sessions".into()))?;
    Ok((mean, per))
}

/// Trains one ensemble per advice type. Types without enough signal are
/// left out (the bundle stays silent for them) and reported.
pub fn train_advisor_bundle<T: Scalar>(
    export: &TrainingExport,
    schema: &Schema,
    catalog: &AdviceCatalog,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<(AdvisorBundle<T>, Vec<(AdviceType, String)>), AdvisorError> {
    let demos = export
        .demonstrations(schema, catalog)
        .map_err(|e| AdvisorError::InsufficientData(e.to_string()))?;
    if demos.is_empty() {
        return Err(AdvisorError::InsufficientData("no demonstrations".into()));
    }
    let datasets = build_datasets::<T>(&demos, schema)?;
    let mut ensembles = BTreeMap::new();
    let mut skipped = Vec::new();
    for (i, (ty, typed)) in datasets.iter().enumerate() {
        match train_ensemble(typed, config, derive_seed(seed, i as u64)) {
            Ok(e) => {
                ensembles.insert(*ty, e);
            }
            Err(AdvisorError::InsufficientData(why)) => skipped.push((*ty, why)),
            Err(e) => return Err(e),
        }
    }
    Ok((
        AdvisorBundle {
            schema: schema.clone(),
            catalog: catalog.clone(),
            ensembles,
        },
        skipped,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub bootstrap_sessions: usize,
    pub clients: usize,
    pub labels: usize,
    pub tagger: TaggerConfig,
    pub ensemble: EnsembleConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bootstrap_sessions: 80,
            clients: 3,
            labels: DEFAULT_LABEL_COUNT,
            tagger: TaggerConfig::default(),
            ensemble: EnsembleConfig::default(),
            seed: 0,
        }
    }
}

/// Schema over the corpus' categories; `labels` is capped at the number of
/// distinct categories seen.
pub fn schema_for(export: &TrainingExport, labels: usize) -> Result<Schema, crate::vectorcore::VectorError> {
    let events = export.tag_events();
    let distinct: std::collections::BTreeSet<&str> = events.iter().map(|e| e.category.as_str()).collect();
    Schema::from_events(&events, labels.min(distinct.len()).max(1))
}

pub struct Bootstrap<T> {
    pub logs: Vec<SessionLog>,
    pub export: TrainingExport,
    pub schema: Schema,
    pub tagger: Tagger<T>,
    pub advisor: AdvisorBundle<T>,
    pub skipped_types: Vec<(AdviceType, String)>,
}

/// Phase-1 style bootstrap: simulate collect-mode sessions with random
/// personas, export them, and train the tagger and advisor.
pub fn bootstrap<T: Scalar>(domain: &Domain, config: &PipelineConfig) -> Result<Bootstrap<T>, OrchestratorError> {
    let sim = SimConfig {
        clients: config.clients,
        ..SimConfig::collect()
    };
    let logs = simulate_batch::<T>(
        domain,
        &StoryboardSource::Random,
        &Models::default(),
        &sim,
        config.bootstrap_sessions,
        config.seed,
    )?;
    let export = export_logs(
        logs.iter().enumerate().map(|(i, l)| (format!("s{i:04}"), Ok(l.clone()))).collect(),
        ExportOptions::default(),
    );
    let schema = schema_for(&export, config.labels)?;
    let tagger_config = TaggerConfig {
        seed: derive_seed(config.seed, 1001),
        ..config.tagger
    };
    let tagger = train_tagger(&export.corpus, &schema, HashedBagEncoder::default(), &tagger_config)?;
    let (advisor, skipped_types) = train_advisor_bundle(
        &export,
        &schema,
        &domain.advice_catalog(),
        &config.ensemble,
        derive_seed(config.seed, 1002),
    )?;
    Ok(Bootstrap {
        logs,
        export,
        schema,
        tagger,
        advisor,
        skipped_types,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum GrowthError {
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Tagger(#[from] TaggerError),
    #[error(transparent)]
    Vector(#[from] crate::vectorcore::VectorError),
}

/// Tagger data-growth experiment on a synthetic corpus: `sessions` collect-mode
/// sessions with random personas, the first 80% for training and the rest for
/// testing (split by session so no conversation straddles both).
pub fn tagger_data_growth<T: Scalar>(
    domain: &Domain,
    sessions: usize,
    clients: usize,
    config: &TaggerConfig,
    seed: u64,
) -> Result<GrowthReport, GrowthError> {
    let sim = SimConfig {
        clients,
        ..SimConfig::collect()
    };
    let logs = simulate_batch::<T>(domain, &StoryboardSource::Random, &Models::default(), &sim, sessions, seed)?;
    let cut = (sessions * 4).div_ceil(5).clamp(1, sessions.saturating_sub(1).max(1));
    let export = |part: &[SessionLog]| {
        export_logs(
            part.iter().enumerate().map(|(i, l)| (format!("s{i:04}"), Ok(l.clone()))).collect(),
            ExportOptions::default(),
        )
    };
    let train = export(&logs[..cut]);
    let test = export(&logs[cut..]);
    let schema = schema_for(&train, DEFAULT_LABEL_COUNT)?;
    let config = TaggerConfig {
        seed: derive_seed(seed, 2001),
        ..*config
    };
    Ok(data_growth::<T>(&train.corpus, &test.corpus, &schema, &config, derive_seed(seed, 2002))?)
}

/// Mean time metrics of both operator policies on the same seeded sessions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub sessions: usize,
    pub follows: TimeMetrics,
    pub ignores: TimeMetrics,
}

impl ModeComparison {
    pub fn session_time_reduction(&self) -> f64 {
        1.0 - self.follows.total_session_time / self.ignores.total_session_time
    }

    pub fn waiting_time_reduction(&self) -> f64 {
        1.0 - self.follows.total_waiting_time / self.ignores.total_waiting_time
    }
}

pub fn compare_modes<T: Scalar>(
    domain: &Domain,
    source: &StoryboardSource,
    models: &Models<T>,
    clients: usize,
    sessions: usize,
    seed: u64,
) -> Result<ModeComparison, OrchestratorError> {
    let run = |operator| -> Result<TimeMetrics, OrchestratorError> {
        let config = SimConfig {
            clients,
            ..SimConfig::advise(operator)
        };
        let logs = simulate_batch(domain, source, models, &config, sessions, seed)?;
        Ok(batch_metrics(&logs)?.0)
    };
    Ok(ModeComparison {
        sessions,
        follows: run(OperatorMode::FollowsAdvice)?,
        ignores: run(OperatorMode::IgnoresAdvice)?,
    })
}
