//! Call-center domain definition: the attributes operators collect, the
//! objectives clients bring, and the resources that answer them. The advice
//! catalog is derived from it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{ActionRef, AdviceCatalog, AdviceItem, AdviceType};

const STUDENT_LOANS: &str = include_str!("../fixtures/student_loans.domain.toml");

/// Attribute holding the client's current request.
pub const TOPIC: &str = "topic";

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("domain parse error: {0}")]
    Parse(String),
    #[error("invalid domain: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    /// Lower-case tokens that identify a question about this attribute.
    pub keywords: Vec<String>,
    /// What the operator types to ask for it.
    pub question: String,
    /// Client answer templates; `{value}` is replaced by the persona value.
    pub answers: Vec<String>,
    pub vague: String,
    /// Value pool for generated personas.
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalResource {
    pub attribute: String,
    pub value: String,
    pub resource: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveDef {
    pub id: String,
    /// Storyboard spelling of the objective.
    pub goal: String,
    /// Value of the topic attribute when a client raises it.
    pub topic: String,
    pub questions: Vec<String>,
    /// Attributes the operator needs before answering, in asking order.
    pub required: Vec<String>,
    pub resource: String,
    #[serde(default)]
    pub resource_if: Option<ConditionalResource>,
    pub resolution: String,
    /// Lower-case phrase whose presence tells the client the objective is answered.
    pub marker: String,
}

impl ObjectiveDef {
    /// The resource an expert opens for this objective given what is known.
    pub fn resource_for(&self, known: &BTreeMap<String, String>) -> &str {
        match &self.resource_if {
            Some(c) if known.get(&c.attribute) == Some(&c.value) => &c.resource,
            _ => &self.resource,
        }
    }

    pub fn candidate_resources(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.resource.as_str()).chain(self.resource_if.iter().map(|c| c.resource.as_str()))
    }

    pub fn resolution_item(&self) -> String {
        format!("resolve_{}", self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Resource,
    Calculator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceDef {
    pub id: String,
    pub kind: ResourceKind,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub attributes: Vec<AttributeDef>,
    pub objectives: Vec<ObjectiveDef>,
    pub resources: Vec<ResourceDef>,
}

pub fn ask_item_id(attribute: &str) -> String {
    format!("ask_{attribute}")
}

impl Domain {
    /// The bundled student-loan desk.
    pub fn student_loans() -> Self {
        Self::from_toml(STUDENT_LOANS).expect("bundled domain is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, DomainError> {
        let d: Domain = toml::from_str(text).map_err(|e| DomainError::Parse(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self, DomainError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), DomainError> {
        let invalid = |m: String| Err(DomainError::Invalid(m));
        for o in &self.objectives {
            for a in &o.required {
                if self.attribute(a).is_none() {
                    return invalid(format!("objective {} requires unknown attribute {a}", o.id));
                }
            }
            for r in o.candidate_resources() {
                if self.resource(r).is_none() {
                    return invalid(format!("objective {} uses unknown resource {r}", o.id));
                }
            }
            if !o.resolution.to_lowercase().contains(&o.marker) {
                return invalid(format!("objective {} resolution lacks its marker", o.id));
            }
            if o.questions.iter().any(|q| !q.contains(&o.topic)) {
                return invalid(format!("objective {} has a question without its topic", o.id));
            }
        }
        for a in &self.attributes {
            if a.answers.iter().any(|t| !t.contains("{value}")) {
                return invalid(format!("attribute {} has an answer template without {{value}}", a.name));
            }
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn objective(&self, id: &str) -> Option<&ObjectiveDef> {
        self.objectives.iter().find(|o| o.id == id)
    }

    /// Looks an objective up by its goal phrase or id, ignoring case.
    pub fn objective_for_goal(&self, goal: &str) -> Option<&ObjectiveDef> {
        let g = goal.trim().to_lowercase();
        self.objectives
            .iter()
            .find(|o| o.goal.to_lowercase() == g || o.id.to_lowercase() == g)
    }

    pub fn objective_for_topic(&self, topic: &str) -> Option<&ObjectiveDef> {
        self.objectives.iter().find(|o| o.topic.eq_ignore_ascii_case(topic))
    }

    pub fn resource(&self, id: &str) -> Option<&ResourceDef> {
        self.resources.iter().find(|r| r.id == id)
    }

    /// Ask items for every attribute, one resolution per objective, one item per resource.
    pub fn advice_catalog(&self) -> AdviceCatalog {
        let mut items = Vec::new();
        for a in &self.attributes {
            items.push(AdviceItem {
                id: ask_item_id(&a.name),
                advice_type: AdviceType::TopicAcquisition,
                display_text: a.question.clone(),
                action_ref: Some(ActionRef::Ask(a.name.clone())),
            });
        }
        for o in &self.objectives {
            items.push(AdviceItem {
                id: o.resolution_item(),
                advice_type: AdviceType::Resolution,
                display_text: o.resolution.clone(),
                action_ref: None,
            });
        }
        for r in &self.resources {
            let action = match r.kind {
                ResourceKind::Resource => ActionRef::Resource(r.id.clone()),
                ResourceKind::Calculator => ActionRef::Calculator(r.id.clone()),
            };
            items.push(AdviceItem {
                id: r.id.clone(),
                advice_type: AdviceType::UsefulInformation,
                display_text: r.description.clone(),
                action_ref: Some(action),
            });
        }
        AdviceCatalog::new(items).expect("domain ids are unique")
    }
}
