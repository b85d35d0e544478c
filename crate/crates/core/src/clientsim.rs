//! Storyboard-driven client bots: keyword-matched answers to operator
//! questions, objectives raised one at a time, bounded patience.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autotagger::{tokenize, GoldTag};
use crate::domain::{Domain, TOPIC};

pub const DEFAULT_P_ASK: f64 = 0.6;
pub const DEFAULT_PATIENCE: u32 = 40;

#[derive(Debug, Error)]
pub enum StoryboardError {
    #[error("storyboard parse error: {0}")]
    Parse(String),
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("objective {0:?} cannot be resolved with this domain and persona")]
    UnresolvableObjective(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Disclosure {
    /// Mentioned unprompted when the client opens the chat.
    Volunteers,
    #[default]
    AnswersIfAsked,
    /// One vague answer, then the real one.
    EvasiveOnce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoryboardDoc {
    #[serde(default)]
    name: Option<String>,
    objectives: Vec<String>,
    persona: BTreeMap<String, String>,
    #[serde(default)]
    disclosure_policy: BTreeMap<String, Disclosure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Storyboard {
    pub name: String,
    pub persona: BTreeMap<String, String>,
    /// Objective ids in the order the client raises them.
    pub objectives: Vec<String>,
    pub disclosure: BTreeMap<String, Disclosure>,
}

impl Storyboard {
    pub fn policy(&self, attribute: &str) -> Disclosure {
        self.disclosure.get(attribute).copied().unwrap_or_default()
    }

    /// TOML document that `load_storyboard` reads back into an equal storyboard.
    pub fn to_toml(&self, domain: &Domain) -> String {
        let doc = StoryboardDoc {
            name: Some(self.name.clone()),
            objectives: self
                .objectives
                .iter()
                .map(|id| domain.objective(id).map_or(id.clone(), |o| o.goal.clone()))
                .collect(),
            persona: self.persona.clone(),
            disclosure_policy: self.disclosure.clone(),
        };
        toml::to_string(&doc).expect("storyboards serialize")
    }
}

/// Parses and validates a storyboard document against `domain`.
pub fn load_storyboard(document: &str, domain: &Domain) -> Result<Storyboard, StoryboardError> {
    let doc: StoryboardDoc = toml::from_str(document).map_err(|e| StoryboardError::Parse(e.to_string()))?;
    for name in doc.persona.keys().chain(doc.disclosure_policy.keys()) {
        if name == TOPIC || domain.attribute(name).is_none() {
            return Err(StoryboardError::UnknownAttribute(name.clone()));
        }
    }
    if doc.objectives.is_empty() {
        return Err(StoryboardError::Parse("storyboard has no objectives".into()));
    }
    let catalog = domain.advice_catalog();
    let mut objectives = Vec::new();
    for goal in &doc.objectives {
        let o = domain
            .objective_for_goal(goal)
            .filter(|o| catalog.get(&o.resolution_item()).is_some())
            .filter(|o| o.required.iter().all(|a| doc.persona.contains_key(a)))
            .ok_or_else(|| StoryboardError::UnresolvableObjective(goal.clone()))?;
        if !objectives.contains(&o.id) {
            objectives.push(o.id.clone());
        }
    }
    Ok(Storyboard {
        name: doc.name.unwrap_or_else(|| "storyboard".into()),
        persona: doc.persona,
        objectives,
        disclosure: doc.disclosure_policy,
    })
}

pub fn read_storyboard(path: &Path, domain: &Domain) -> Result<Storyboard, StoryboardError> {
    let mut sb = load_storyboard(&std::fs::read_to_string(path)?, domain)?;
    if sb.name == "storyboard" {
        if let Some(stem) = path.file_stem() {
            sb.name = stem.to_string_lossy().into_owned();
        }
    }
    Ok(sb)
}

/// All `*.storyboard` files in `dir`, sorted by file name.
pub fn read_storyboard_dir(dir: &Path, domain: &Domain) -> Result<Vec<Storyboard>, StoryboardError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "storyboard"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_storyboard(p, domain)).collect()
}

/// A random persona: 1–3 objectives, their required attributes plus a few
/// extras, values from the domain pools, mixed disclosure policies.
pub fn random_storyboard<R: Rng>(domain: &Domain, rng: &mut R, name: String) -> Storyboard {
    let n_obj = rng.random_range(1..=3.min(domain.objectives.len()));
    let objectives: Vec<String> = rand::seq::index::sample(rng, domain.objectives.len(), n_obj)
        .into_iter()
        .map(|i| domain.objectives[i].id.clone())
        .collect();
    let mut attrs: BTreeSet<String> = objectives
        .iter()
        .flat_map(|id| domain.objective(id).expect("sampled from domain").required.clone())
        .collect();
    let pool: Vec<&str> = domain
        .attributes
        .iter()
        .map(|a| a.name.as_str())
        .filter(|a| *a != TOPIC)
        .collect();
    for _ in 0..rng.random_range(1..=3) {
        attrs.insert(pool.choose(rng).expect("domain has attributes").to_string());
    }
    let mut persona = BTreeMap::new();
    let mut disclosure = BTreeMap::new();
    for a in attrs {
        let def = domain.attribute(&a).expect("attribute from domain");
        persona.insert(a.clone(), def.values.choose(rng).expect("value pool").clone());
        let r: f64 = rng.random();
        let policy = if r < 0.25 {
            Disclosure::Volunteers
        } else if r < 0.8 {
            Disclosure::AnswersIfAsked
        } else {
            Disclosure::EvasiveOnce
        };
        disclosure.insert(a, policy);
    }
    Storyboard {
        name,
        persona,
        objectives,
        disclosure,
    }
}

/// One client turn, with the gold tags a careful human tagger would mark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMessage {
    pub text: String,
    pub tags: Vec<GoldTag>,
    pub ends_session: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BotState {
    pub storyboard: Storyboard,
    /// Attributes the operator has asked about.
    pub asked: BTreeSet<String>,
    /// Objective ids answered by the operator.
    pub satisfied: BTreeSet<String>,
    /// Attributes already stated in the chat.
    pub revealed: BTreeSet<String>,
    /// Evasive attributes that already got their vague answer.
    pub evaded: BTreeSet<String>,
    /// Objectives already put to the operator.
    pub raised: BTreeSet<String>,
    pub patience: u32,
    pub p_ask: f64,
    pub seed: u64,
    pub ended: bool,
    #[serde(skip)]
    rng: ChaCha8Rng,
}

impl BotState {
    pub fn new(storyboard: Storyboard, seed: u64) -> Self {
        Self {
            storyboard,
            asked: BTreeSet::new(),
            satisfied: BTreeSet::new(),
            revealed: BTreeSet::new(),
            evaded: BTreeSet::new(),
            raised: BTreeSet::new(),
            patience: DEFAULT_PATIENCE,
            p_ask: DEFAULT_P_ASK,
            seed,
            ended: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_p_ask(mut self, p_ask: f64) -> Self {
        self.p_ask = p_ask;
        self
    }

    pub fn with_patience(mut self, patience: u32) -> Self {
        self.patience = patience;
        self
    }

    fn next_objective(&self) -> Option<&String> {
        self.storyboard.objectives.iter().find(|o| !self.satisfied.contains(*o))
    }

    fn all_satisfied(&self) -> bool {
        self.next_objective().is_none()
    }
}

const GREETINGS: [&str; 3] = ["Hi!", "Hello,", "Good morning."];
const ACKS: [&str; 3] = ["ok, thanks", "I see", "great, thank you"];
const NUDGES: [&str; 2] = ["any news on my question?", "still waiting on that"];

fn render_answer<R: Rng>(domain: &Domain, attribute: &str, value: &str, rng: &mut R) -> String {
    let def = domain.attribute(attribute).expect("storyboards hold domain attributes");
    def.answers.choose(rng).expect("templates").replace("{value}", value)
}

/// The attribute an operator message asks about: the first attribute (domain
/// order) with a keyword among the message tokens.
pub fn matched_attribute<'d>(domain: &'d Domain, text: &str) -> Option<&'d str> {
    let tokens: BTreeSet<String> = tokenize(text).into_iter().collect();
    domain
        .attributes
        .iter()
        .find(|a| a.keywords.iter().any(|k| tokens.contains(k)))
        .map(|a| a.name.as_str())
}

/// Next client message given the operator's last message (empty text opens the chat).
pub fn bot_respond(state: &BotState, last_operator_message: &str, domain: &Domain) -> (ClientMessage, BotState) {
    let mut s = state.clone();
    let msg = respond(&mut s, last_operator_message, domain);
    (msg, s)
}

fn respond(s: &mut BotState, op: &str, domain: &Domain) -> ClientMessage {
    let op_lower = op.to_lowercase();
    let mut resolved_now = false;
    for id in s.storyboard.objectives.clone() {
        let o = domain.objective(&id).expect("validated objective");
        if !s.satisfied.contains(&id) && op_lower.contains(&o.marker) {
            s.satisfied.insert(id);
            resolved_now = true;
        }
    }

    if s.all_satisfied() {
        s.ended = true;
        return ClientMessage {
            text: "Thanks, that's everything I needed. Bye!".into(),
            tags: vec![],
            ends_session: true,
        };
    }
    s.patience = s.patience.saturating_sub(1);
    if s.patience == 0 {
        s.ended = true;
        return ClientMessage {
            text: "I have to go now, I'll call back later.".into(),
            tags: vec![],
            ends_session: true,
        };
    }

    if s.raised.is_empty() {
        return open_chat(s, domain);
    }

    if !resolved_now {
        if let Some(attr) = matched_attribute(domain, op) {
            return answer(s, attr, domain);
        }
    }

    let pending_raised = s
        .storyboard
        .objectives
        .iter()
        .any(|o| s.raised.contains(o) && !s.satisfied.contains(o));
    if !pending_raised && s.rng.random_bool(s.p_ask) {
        let next = s.next_objective().expect("not all satisfied").clone();
        return raise(s, &next, domain, String::new());
    }
    let pool: &[&str] = if pending_raised { &NUDGES } else { &ACKS };
    ClientMessage {
        text: pool.choose(&mut s.rng).expect("non-empty").to_string(),
        tags: vec![],
        ends_session: false,
    }
}

fn open_chat(s: &mut BotState, domain: &Domain) -> ClientMessage {
    let greeting = GREETINGS.choose(&mut s.rng).expect("non-empty").to_string();
    let first = s.next_objective().expect("storyboards have objectives").clone();
    let mut msg = raise(s, &first, domain, greeting);
    let volunteered: Vec<(String, String)> = s
        .storyboard
        .persona
        .iter()
        .filter(|(a, _)| s.storyboard.policy(a) == Disclosure::Volunteers)
        .map(|(a, v)| (a.clone(), v.clone()))
        .collect();
    for (a, v) in volunteered {
        let sentence = render_answer(domain, &a, &v, &mut s.rng);
        msg.text = format!("{} {}.", msg.text, sentence);
        msg.tags.push(GoldTag::new(a.clone(), v));
        s.revealed.insert(a);
    }
    msg
}

fn raise(s: &mut BotState, objective: &str, domain: &Domain, prefix: String) -> ClientMessage {
    let o = domain.objective(objective).expect("validated objective");
    let q = o.questions.choose(&mut s.rng).expect("questions").clone();
    s.raised.insert(objective.to_string());
    let text = if prefix.is_empty() { q } else { format!("{prefix} {q}") };
    ClientMessage {
        text,
        tags: vec![GoldTag::new(TOPIC, o.topic.clone())],
        ends_session: false,
    }
}

fn answer(s: &mut BotState, attr: &str, domain: &Domain) -> ClientMessage {
    s.asked.insert(attr.to_string());
    let Some(value) = s.storyboard.persona.get(attr).cloned() else {
        return ClientMessage {
            text: "I don't know, sorry.".into(),
            tags: vec![],
            ends_session: false,
        };
    };
    if s.storyboard.policy(attr) == Disclosure::EvasiveOnce && s.evaded.insert(attr.to_string()) {
        let vague = domain.attribute(attr).expect("domain attribute").vague.clone();
        return ClientMessage {
            text: vague,
            tags: vec![],
            ends_session: false,
        };
    }
    s.revealed.insert(attr.to_string());
    ClientMessage {
        text: render_answer(domain, attr, &value, &mut s.rng),
        tags: vec![GoldTag::new(attr, value)],
        ends_session: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NURSE: &str = include_str!("../fixtures/storyboards/nurse_ucla.storyboard");

    fn domain() -> Domain {
        Domain::student_loans()
    }

    #[test]
    fn minimal_document() {
        // The bundled objectives all need two attributes; trim one down.
        let d = Domain::from_toml(
            &include_str!("../fixtures/student_loans.domain.toml")
                .replace("required = [\"profession\", \"degree\"]", "required = [\"profession\"]"),
        )
        .unwrap();
        let sb = load_storyboard("objectives = [\"check loan forgiveness\"]\n[persona]\nprofession = \"nurse\"\n", &d).unwrap();
        assert_eq!(sb.persona.len(), 1);
        assert_eq!(sb.objectives, vec!["loan_forgiveness"]);
        assert_eq!(sb.policy("profession"), Disclosure::AnswersIfAsked);
    }

    #[test]
    fn unknown_attribute_rejected() {
        let err = load_storyboard(
            "objectives = [\"find grants\"]\n[persona]\nfavorite_color = \"blue\"\n",
            &domain(),
        )
        .unwrap_err();
        assert!(matches!(err, StoryboardError::UnknownAttribute(a) if a == "favorite_color"));
    }

    #[test]
    fn unresolvable_objective_rejected() {
        let d = domain();
        let err = load_storyboard("objectives = [\"buy a boat\"]\n[persona]\nsex = \"male\"\n", &d).unwrap_err();
        assert!(matches!(err, StoryboardError::UnresolvableObjective(_)));
        // Known objective, but the persona cannot answer what it requires.
        let err = load_storyboard("objectives = [\"find grants\"]\n[persona]\nsex = \"male\"\n", &d).unwrap_err();
        assert!(matches!(err, StoryboardError::UnresolvableObjective(_)));
        assert!(matches!(
            load_storyboard("objectives = [", &d).unwrap_err(),
            StoryboardError::Parse(_)
        ));
    }

    #[test]
    fn nurse_fixture_shape() {
        let sb = load_storyboard(NURSE, &domain()).unwrap();
        assert_eq!(sb.persona.len(), 6);
        assert_eq!(sb.objectives.len(), 2);
        assert_eq!(sb.persona["university"], "UCLA");
    }

    #[test]
    fn opening_raises_first_objective() {
        let d = domain();
        let sb = load_storyboard(NURSE, &d).unwrap();
        let first = d.objective(&sb.objectives[0]).unwrap().clone();
        let (msg, st) = bot_respond(&BotState::new(sb, 1), "", &d);
        assert!(msg.text.contains(&first.topic));
        assert!(msg.tags.contains(&GoldTag::new(TOPIC, first.topic)));
        assert!(st.raised.contains(&first.id));
        assert!(!msg.ends_session);
    }

    #[test]
    fn answers_university_question_from_template() {
        let d = domain();
        let sb = load_storyboard(NURSE, &d).unwrap();
        assert_eq!(sb.policy("university"), Disclosure::AnswersIfAsked);
        let (_, st) = bot_respond(&BotState::new(sb, 3), "", &d);
        let (msg, st) = bot_respond(&st, "Which university will you attend?", &d);
        let templates: Vec<String> = d
            .attribute("university")
            .unwrap()
            .answers
            .iter()
            .map(|t| t.replace("{value}", "UCLA"))
            .collect();
        assert!(templates.contains(&msg.text), "{}", msg.text);
        assert_eq!(msg.tags, vec![GoldTag::new("university", "UCLA")]);
        assert!(st.asked.contains("university"));
    }

    #[test]
    fn evasive_once_then_answers() {
        let d = domain();
        let sb = load_storyboard(NURSE, &d).unwrap();
        assert_eq!(sb.policy("savings"), Disclosure::EvasiveOnce);
        let (_, st) = bot_respond(&BotState::new(sb, 5), "", &d);
        let q = &d.attribute("savings").unwrap().question;
        let (first, st) = bot_respond(&st, q, &d);
        assert!(first.tags.is_empty());
        assert_eq!(first.text, d.attribute("savings").unwrap().vague);
        let (second, _) = bot_respond(&st, q, &d);
        assert_eq!(second.tags, vec![GoldTag::new("savings", "20k")]);
    }

    #[test]
    fn all_satisfied_closes() {
        let d = domain();
        let sb = load_storyboard(NURSE, &d).unwrap();
        let mut st = BotState::new(sb.clone(), 9);
        for id in &sb.objectives {
            let (_, next) = bot_respond(&st, &d.objective(id).unwrap().resolution, &d);
            st = next;
        }
        assert!(st.ended);
        assert_eq!(st.satisfied.len(), 2);
    }

    #[test]
    fn patience_bounds_conversation() {
        let d = domain();
        let sb = load_storyboard(NURSE, &d).unwrap();
        let mut st = BotState::new(sb, 2).with_patience(5);
        let mut turns = 0;
        loop {
            let (msg, next) = bot_respond(&st, "hmm", &d);
            st = next;
            turns += 1;
            if msg.ends_session {
                break;
            }
        }
        assert_eq!(turns, 5);
    }

    #[test]
    fn deterministic_given_seed() {
        let d = domain();
        let sb = load_storyboard(NURSE, &d).unwrap();
        let run = || {
            let mut st = BotState::new(sb.clone(), 42);
            let mut out = Vec::new();
            for op in ["", "ok", "What do you do for work?", "ok", "hmm"] {
                let (m, next) = bot_respond(&st, op, &d);
                out.push(m.text);
                st = next;
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn random_storyboards_round_trip() {
        let d = domain();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..50 {
            let sb = random_storyboard(&d, &mut rng, format!("gen{i}"));
            let back = load_storyboard(&sb.to_toml(&d), &d).unwrap();
            assert_eq!(back, sb);
        }
    }
}
