//! Scripted operator for simulations: an expert policy with a fixed question
//! order, optionally steered by the advisor's recommendations.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advisor::{AdviceCatalog, AdviceItem, AdviceType, Recommendation};
use crate::autotagger::GoldTag;
use crate::domain::{ask_item_id, Domain, TOPIC};

/// An operator gives up on an attribute after this many unanswered questions.
pub const MAX_ASKS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorMode {
    FollowsAdvice,
    IgnoresAdvice,
}

impl std::str::FromStr for OperatorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "follows_advice" | "follows" => Ok(Self::FollowsAdvice),
            "ignores_advice" | "ignores" => Ok(Self::IgnoresAdvice),
            other => Err(format!("unknown operator mode {other:?}")),
        }
    }
}

/// Simulated durations in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    /// Deciding what to do next without help.
    pub think_ms: u64,
    /// Deciding when an applicable recommendation is on screen.
    pub think_assisted_ms: u64,
    pub type_ms: u64,
    /// Searching for the right resource without help.
    pub lookup_ms: u64,
    /// Opening a resource the advice points at.
    pub lookup_assisted_ms: u64,
    /// Marking one tag by hand.
    pub tag_ms: u64,
    pub client_reply_min_ms: u64,
    pub client_reply_max_ms: u64,
    /// Gap between successive clients joining.
    pub arrival_gap_ms: u64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self {
            think_ms: 8_000,
            think_assisted_ms: 3_000,
            type_ms: 10_000,
            lookup_ms: 60_000,
            lookup_assisted_ms: 12_000,
            tag_ms: 4_000,
            client_reply_min_ms: 8_000,
            client_reply_max_ms: 20_000,
            arrival_gap_ms: 30_000,
        }
    }
}

/// What the operator knows about one client.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientView {
    pub client_id: String,
    /// Attribute values read from the client's messages.
    pub known: BTreeMap<String, String>,
    pub asked: BTreeMap<String, u32>,
    /// Objective ids raised and not yet answered, oldest first.
    pub pending: Vec<String>,
    pub resolved: BTreeSet<String>,
    pub resources_used: BTreeSet<String>,
}

impl ClientView {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            ..Self::default()
        }
    }

    /// Reads one client message's content.
    pub fn observe(&mut self, tags: &[GoldTag], domain: &Domain) {
        for t in tags {
            if t.category == TOPIC {
                if let Some(o) = domain.objective_for_topic(&t.value) {
                    if !self.resolved.contains(&o.id) && !self.pending.contains(&o.id) {
                        self.pending.push(o.id.clone());
                    }
                }
            }
            self.known.insert(t.category.clone(), t.value.clone());
        }
    }

    /// Records the effect of an action the operator carried out.
    pub fn record(&mut self, action: &OperatorAction) {
        match action {
            OperatorAction::Ask { label, .. } => *self.asked.entry(label.clone()).or_default() += 1,
            OperatorAction::UseResource { resource_id, .. } => {
                self.resources_used.insert(resource_id.clone());
            }
            OperatorAction::Resolve { objective, .. } => {
                self.pending.retain(|o| o != objective);
                self.resolved.insert(objective.clone());
            }
            OperatorAction::Prompt { .. } => {}
        }
    }

    fn can_ask(&self, label: &str) -> bool {
        !self.known.contains_key(label) && self.asked.get(label).copied().unwrap_or(0) < MAX_ASKS
    }

    fn missing_for(&self, objective: &str, domain: &Domain) -> Vec<String> {
        domain
            .objective(objective)
            .map(|o| o.required.iter().filter(|a| self.can_ask(a)).cloned().collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum OperatorAction {
    Ask { label: String, item_id: String, text: String },
    UseResource { resource_id: String, item_id: String },
    Resolve { objective: String, item_id: String, text: String },
    /// Invite the client to continue when nothing is pending.
    Prompt { item_id: String, text: String },
}

impl OperatorAction {
    pub fn item_id(&self) -> &str {
        match self {
            Self::Ask { item_id, .. }
            | Self::UseResource { item_id, .. }
            | Self::Resolve { item_id, .. }
            | Self::Prompt { item_id, .. } => item_id,
        }
    }

    /// Chat text for message actions; resource use sends nothing.
    pub fn text(&self) -> Option<&str> {
        match self {
            Self::Ask { text, .. } | Self::Resolve { text, .. } | Self::Prompt { text, .. } => Some(text),
            Self::UseResource { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorStep {
    pub action: OperatorAction,
    /// The advice item that was followed, if any.
    pub followed: Option<String>,
    pub think_ms: u64,
    /// Extra time spent on a resource lookup.
    pub lookup_ms: u64,
}

fn ask(domain: &Domain, label: &str) -> OperatorAction {
    let def = domain.attribute(label).expect("label from domain");
    OperatorAction::Ask {
        label: label.to_string(),
        item_id: ask_item_id(label),
        text: def.question.clone(),
    }
}

fn resolve(domain: &Domain, objective: &str) -> OperatorAction {
    let o = domain.objective(objective).expect("objective from domain");
    OperatorAction::Resolve {
        objective: objective.to_string(),
        item_id: o.resolution_item(),
        text: o.resolution.clone(),
    }
}

/// The unassisted expert policy. With `order_noise > 0` the next missing
/// attribute is sometimes picked at random instead of in the fixed order.
pub fn expert_action<R: Rng>(view: &ClientView, domain: &Domain, order_noise: f64, rng: &mut R) -> OperatorAction {
    let Some(objective) = view.pending.first() else {
        return OperatorAction::Prompt {
            item_id: ask_item_id(TOPIC),
            text: domain.attribute(TOPIC).map_or_else(String::new, |a| a.question.clone()),
        };
    };
    let missing = view.missing_for(objective, domain);
    if !missing.is_empty() {
        let pick = if missing.len() > 1 && order_noise > 0.0 && rng.random_bool(order_noise) {
            rng.random_range(0..missing.len())
        } else {
            0
        };
        return ask(domain, &missing[pick]);
    }
    let o = domain.objective(objective).expect("pending objective from domain");
    let resource = o.resource_for(&view.known);
    if !view.resources_used.contains(resource) {
        return OperatorAction::UseResource {
            resource_id: resource.to_string(),
            item_id: resource.to_string(),
        };
    }
    resolve(domain, objective)
}

/// Turns one advice item into an action if it makes sense for this client now.
fn applicable(item: &AdviceItem, view: &ClientView, domain: &Domain) -> Option<OperatorAction> {
    match item.advice_type {
        AdviceType::TopicAcquisition => {
            let label = item.asked_label()?;
            (label != TOPIC && domain.attribute(label).is_some() && view.can_ask(label)).then(|| ask(domain, label))
        }
        AdviceType::UsefulInformation => {
            let rid = item.resource_id()?;
            let relevant = view
                .pending
                .iter()
                .filter_map(|id| domain.objective(id))
                .any(|o| o.candidate_resources().any(|r| r == rid));
            (relevant && !view.resources_used.contains(rid)).then(|| OperatorAction::UseResource {
                resource_id: rid.to_string(),
                item_id: item.id.clone(),
            })
        }
        AdviceType::Resolution => {
            let o = domain.objectives.iter().find(|o| o.resolution_item() == item.id)?;
            let ready = view.pending.contains(&o.id) && view.missing_for(&o.id, domain).is_empty();
            ready.then(|| resolve(domain, &o.id))
        }
    }
}

/// Preference order when several recommendations apply.
const FOLLOW_ORDER: [AdviceType; 3] = [
    AdviceType::Resolution,
    AdviceType::UsefulInformation,
    AdviceType::TopicAcquisition,
];

/// One operator decision for `view`. Following advice means taking the
/// highest-ranked applicable recommended item (resolutions first, then
/// resources, then questions); anything else falls back to the expert order.
pub fn scripted_operator_step(
    view: &ClientView,
    domain: &Domain,
    catalog: &AdviceCatalog,
    advice: Option<&BTreeMap<AdviceType, Recommendation>>,
    mode: OperatorMode,
    delays: &DelayModel,
) -> OperatorStep {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    scripted_operator_step_with(view, domain, catalog, advice, mode, delays, 0.0, &mut rng)
}

#[allow(clippy::too_many_arguments)]
pub fn scripted_operator_step_with<R: Rng>(
    view: &ClientView,
    domain: &Domain,
    catalog: &AdviceCatalog,
    advice: Option<&BTreeMap<AdviceType, Recommendation>>,
    mode: OperatorMode,
    delays: &DelayModel,
    order_noise: f64,
    rng: &mut R,
) -> OperatorStep {
    if mode == OperatorMode::FollowsAdvice {
        if let Some(recs) = advice {
            for ty in FOLLOW_ORDER {
                let Some(rec) = recs.get(&ty) else { continue };
                for id in rec.item_ids() {
                    let Some(item) = catalog.get(id) else { continue };
                    if let Some(action) = applicable(item, view, domain) {
                        let lookup_ms = match action {
                            OperatorAction::UseResource { .. } => delays.lookup_assisted_ms,
                            _ => 0,
                        };
                        return OperatorStep {
                            action,
                            followed: Some(id.to_string()),
                            think_ms: delays.think_assisted_ms,
                            lookup_ms,
                        };
                    }
                }
            }
        }
    }
    let action = expert_action(view, domain, order_noise, rng);
    let lookup_ms = match action {
        OperatorAction::UseResource { .. } => delays.lookup_ms,
        _ => 0,
    };
    OperatorStep {
        action,
        followed: None,
        think_ms: delays.think_ms,
        lookup_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advisor::RecommendedSet;

    fn setup() -> (Domain, AdviceCatalog) {
        let d = Domain::student_loans();
        let c = d.advice_catalog();
        (d, c)
    }

    fn advice(ty: AdviceType, ids: &[&str]) -> BTreeMap<AdviceType, Recommendation> {
        let mut m: BTreeMap<AdviceType, Recommendation> =
            AdviceType::ALL.iter().map(|&t| (t, Recommendation::silent())).collect();
        m.insert(
            ty,
            Recommendation::from_sets(vec![RecommendedSet {
                class: 1,
                rank: 1.0,
                items: ids.iter().map(|s| s.to_string()).collect(),
            }]),
        );
        m
    }

    fn monthly_view() -> ClientView {
        let mut v = ClientView::new("c1");
        v.pending.push("monthly_payment".into());
        v
    }

    #[test]
    fn follows_ask_advice() {
        let (d, c) = setup();
        let mut v = monthly_view();
        v.pending = vec!["federal_loans".into()];
        let a = advice(AdviceType::TopicAcquisition, &["ask_university"]);
        let step = scripted_operator_step(&v, &d, &c, Some(&a), OperatorMode::FollowsAdvice, &DelayModel::default());
        assert!(matches!(&step.action, OperatorAction::Ask { label, .. } if label == "university"));
        assert_eq!(step.followed.as_deref(), Some("ask_university"));
        assert_eq!(step.think_ms, DelayModel::default().think_assisted_ms);
    }

    #[test]
    fn silent_advice_falls_back_to_fixed_order() {
        let (d, c) = setup();
        let v = monthly_view();
        let silent: BTreeMap<_, _> = AdviceType::ALL.iter().map(|&t| (t, Recommendation::silent())).collect();
        for mode in [OperatorMode::FollowsAdvice, OperatorMode::IgnoresAdvice] {
            let step = scripted_operator_step(&v, &d, &c, Some(&silent), mode, &DelayModel::default());
            // `university` precedes `savings` in the objective's order.
            assert!(matches!(&step.action, OperatorAction::Ask { label, .. } if label == "university"));
            assert!(step.followed.is_none());
        }
    }

    #[test]
    fn ignores_mode_pays_lookup_delay() {
        let (d, c) = setup();
        let mut v = monthly_view();
        v.known.insert("university".into(), "UCLA".into());
        v.known.insert("savings".into(), "20k".into());
        let a = advice(AdviceType::UsefulInformation, &["loan_calculator"]);
        let delays = DelayModel::default();
        let ignored = scripted_operator_step(&v, &d, &c, Some(&a), OperatorMode::IgnoresAdvice, &delays);
        assert_eq!(ignored.lookup_ms, delays.lookup_ms);
        let followed = scripted_operator_step(&v, &d, &c, Some(&a), OperatorMode::FollowsAdvice, &delays);
        assert_eq!(followed.action, ignored.action);
        assert_eq!(followed.lookup_ms, delays.lookup_assisted_ms);
    }

    #[test]
    fn expert_sequence_ask_lookup_resolve() {
        let (d, c) = setup();
        let mut v = monthly_view();
        let delays = DelayModel::default();
        let mut kinds = Vec::new();
        for _ in 0..4 {
            let step = scripted_operator_step(&v, &d, &c, None, OperatorMode::IgnoresAdvice, &delays);
            if let OperatorAction::Ask { label, .. } = &step.action {
                v.known.insert(label.clone(), "x".into());
            }
            v.record(&step.action);
            kinds.push(step.action.item_id().to_string());
        }
        assert_eq!(kinds, ["ask_university", "ask_savings", "loan_calculator", "resolve_monthly_payment"]);
        assert!(v.pending.is_empty());
    }

    #[test]
    fn irrelevant_advice_is_not_followed() {
        let (d, c) = setup();
        let v = monthly_view();
        let a = advice(AdviceType::UsefulInformation, &["sss_info"]);
        let step = scripted_operator_step(&v, &d, &c, Some(&a), OperatorMode::FollowsAdvice, &DelayModel::default());
        assert!(step.followed.is_none());
    }
}
