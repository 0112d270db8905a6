//! Grounding protocol, crisis detection and the resource list shown in
//! crisis mode.

use crate::elicitation::{PromptSet, ResponseClassification, DISSOCIATION_RUN};
use crate::events::{EventPayload, SessionEvent};
use crate::types::CrisisCause;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grounding cycles allowed per session before it is closed.
pub const MAX_GROUNDING_CYCLES: u32 = 2;

#[derive(Debug, Error, PartialEq)]
pub enum SafetyError {
    #[error("invalid crisis resource file: {0}")]
    InvalidResources(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingScript {
    pub steps: Vec<String>,
}

impl GroundingScript {
    pub fn from_prompts(prompts: &PromptSet) -> Self {
        Self {
            steps: prompts.grounding.clone(),
        }
    }

    /// Text of a 1-based step.
    pub fn step(&self, step: u8) -> Option<&str> {
        self.steps.get(usize::from(step).checked_sub(1)?).map(String::as_str)
    }

    pub fn len(&self) -> u8 {
        self.steps.len() as u8
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// The bundled three-step grounding script.
pub fn grounding_sequence() -> GroundingScript {
    GroundingScript::from_prompts(&PromptSet::default())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrisisResource {
    pub label: String,
    /// How to reach the resource, as shown to the patient.
    pub contact: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceConfig {
    pub version: u32,
    pub resources: Vec<CrisisResource>,
}

impl ResourceConfig {
    pub fn from_json(json: &str) -> Result<Self, SafetyError> {
        let cfg: ResourceConfig = serde_json::from_str(json).map_err(|e| SafetyError::InvalidResources(e.to_string()))?;
        if cfg.resources.is_empty() {
            return Err(SafetyError::InvalidResources("at least one resource is required".into()));
        }
        if cfg
            .resources
            .iter()
            .any(|r| r.label.trim().is_empty() || r.contact.trim().is_empty())
        {
            return Err(SafetyError::InvalidResources("resource with empty label or contact".into()));
        }
        Ok(cfg)
    }
}

impl Default for ResourceConfig {
    fn default() -> Self {
        Self::from_json(crate::data::CRISIS_RESOURCES).expect("bundled resources are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrisisAssessment {
    pub triggered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<CrisisCause>,
    pub resources: Vec<CrisisResource>,
}

/// Empty or incoherent patient responses at the end of `events`.
pub fn trailing_empty_responses(events: &[SessionEvent]) -> u32 {
    let mut run = 0;
    for ev in events.iter().rev() {
        match ev.payload {
            EventPayload::PatientResponse { empty: true, .. } => run += 1,
            EventPayload::PatientResponse { empty: false, .. } => break,
            _ => {}
        }
    }
    run
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyPolicy {
    pub resources: ResourceConfig,
    pub grounding: GroundingScript,
    pub dissociation_run: u32,
    pub max_grounding_cycles: u32,
}

impl Default for SafetyPolicy {
    fn default() -> Self {
        Self {
            resources: ResourceConfig::default(),
            grounding: grounding_sequence(),
            dissociation_run: DISSOCIATION_RUN,
            max_grounding_cycles: MAX_GROUNDING_CYCLES,
        }
    }
}

impl SafetyPolicy {
    /// `recent_events` should end with the response that was classified.
    pub fn assess_crisis(&self, classification: &ResponseClassification, recent_events: &[SessionEvent]) -> CrisisAssessment {
        let cause = if classification.crisis {
            Some(classification.crisis_cause.unwrap_or(CrisisCause::CrisisLexicon))
        } else if trailing_empty_responses(recent_events) >= self.dissociation_run {
            Some(CrisisCause::DissociationPattern)
        } else {
            None
        };
        CrisisAssessment {
            triggered: cause.is_some(),
            cause,
            resources: self.resources.resources.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ActivationZone;

    fn quiet() -> ResponseClassification {
        ResponseClassification {
            layer_depth: 1,
            activation_zone: ActivationZone::Within,
            crisis: false,
            crisis_cause: None,
            confidence: 1.0,
            matched: vec![],
        }
    }

    fn response(empty: bool) -> SessionEvent {
        SessionEvent::new(
            0,
            EventPayload::PatientResponse {
                event_index: 0,
                choice: None,
                layer_ack: None,
                free_text: None,
                self_report: None,
                empty,
            },
        )
    }

    #[test]
    fn grounding_script_has_three_ordered_steps() {
        let g = grounding_sequence();
        assert_eq!(g.len(), 3);
        assert!(g.step(1).unwrap().contains("notice where you are"));
        assert!(g.step(2).unwrap().contains("breath"));
        assert!(g.step(3).unwrap().contains("five things"));
        assert_eq!(g.step(0), None);
        assert_eq!(g, grounding_sequence());
    }

    #[test]
    fn classifier_crisis_triggers() {
        let mut c = quiet();
        c.crisis = true;
        c.crisis_cause = Some(CrisisCause::MaxActivation);
        let a = SafetyPolicy::default().assess_crisis(&c, &[]);
        assert!(a.triggered);
        assert_eq!(a.cause, Some(CrisisCause::MaxActivation));
        assert!(!a.resources.is_empty());
    }

    #[test]
    fn three_empty_responses_trigger() {
        let policy = SafetyPolicy::default();
        let events = vec![response(false), response(true), response(true), response(true)];
        let a = policy.assess_crisis(&quiet(), &events);
        assert_eq!(a.cause, Some(CrisisCause::DissociationPattern));
        assert!(!policy.assess_crisis(&quiet(), &events[..3]).triggered);
    }

    #[test]
    fn ordinary_response_does_not_trigger() {
        let a = SafetyPolicy::default().assess_crisis(&quiet(), &[response(false)]);
        assert!(!a.triggered);
        assert_eq!(a.cause, None);
    }

    #[test]
    fn resource_file_validation() {
        assert!(ResourceConfig::from_json(r#"{"version":1,"resources":[]}"#).is_err());
        assert!(ResourceConfig::from_json(r#"{"version":1,"resources":[{"label":"","contact":"x"}]}"#).is_err());
        assert_eq!(ResourceConfig::default().resources.len(), 3);
    }
}
