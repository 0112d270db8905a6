//! Patient-specific six-level stimulus ladder and the advancement rules that
//! move a patient along it.
//!
//! Level 1 holds conceptual items (a single word tied to the trauma domain).
//! Levels 2 to 5 form the daily working range. Level 6 is only ever presented
//! in weekly deep sessions, one level above the daily position.

use crate::types::SessionType;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

pub const MIN_LEVEL: u8 = 1;
pub const MAX_LEVEL: u8 = 6;
pub const MAX_DAILY_LEVEL: u8 = 5;
/// Consecutive stable sessions required before advancing.
pub const STABLE_SESSIONS_TO_ADVANCE: u32 = 3;
/// How many of the patient's strongest trigger categories are instantiated.
const TOP_CATEGORIES: usize = 3;

/// Template slot for level-1 conceptual items.
pub const SLOT_CONCEPT: &str = "concept";
/// Template slot for domain context scenes, tagged with the primary trigger.
pub const SLOT_CONTEXT: &str = "context";
/// Generic template slot; `{category}` is replaced by the trigger label.
pub const SLOT_ANY: &str = "any";
/// Category label given to level-1 items.
pub const CONCEPT_CATEGORY: &str = "concept";

#[derive(Debug, Error, PartialEq)]
pub enum LadderError {
    #[error("patient profile has no triggers")]
    EmptyProfile,
    #[error("invalid patient profile: {0}")]
    InvalidProfile(String),
    #[error("templates for domain `{domain}` do not cover level {level}")]
    MissingTemplates { domain: String, level: u8 },
    #[error("invalid template set: {0}")]
    InvalidTemplates(String),
    #[error("session outcome at level {got} does not match current level {expected}")]
    LevelMismatch { expected: u8, got: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub category: String,
    /// Self-rated intensity, 0 to 10.
    pub intensity: u8,
}

impl Trigger {
    pub fn new(category: impl Into<String>, intensity: u8) -> Self {
        Self {
            category: category.into(),
            intensity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorPractice {
    None,
    Some,
    Extensive,
}

/// Intake record from which the ladder is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub patient_id: String,
    pub trauma_domain: String,
    pub triggers: Vec<Trigger>,
    #[serde(default)]
    pub avoidance_patterns: Vec<String>,
    pub prior_practice: PriorPractice,
    /// PCL-5 convention, 0 to 80.
    pub baseline_severity: u8,
}

impl PatientProfile {
    pub fn validate(&self) -> Result<(), LadderError> {
        if self.triggers.is_empty() {
            return Err(LadderError::EmptyProfile);
        }
        if let Some(t) = self.triggers.iter().find(|t| t.intensity > 10) {
            return Err(LadderError::InvalidProfile(format!(
                "trigger `{}` intensity {} outside 0..=10",
                t.category, t.intensity
            )));
        }
        if self.triggers.iter().any(|t| t.category.trim().is_empty()) {
            return Err(LadderError::InvalidProfile("empty trigger category".into()));
        }
        if self.baseline_severity > 80 {
            return Err(LadderError::InvalidProfile(format!(
                "baseline severity {} outside 0..=80",
                self.baseline_severity
            )));
        }
        Ok(())
    }

    /// Distinct trigger categories, strongest first. Ties keep intake order.
    pub fn ranked_categories(&self) -> Vec<&str> {
        let mut ranked: Vec<&Trigger> = self.triggers.iter().collect();
        ranked.sort_by_key(|t| std::cmp::Reverse(t.intensity));
        let mut seen = HashSet::new();
        ranked
            .into_iter()
            .filter(|t| seen.insert(t.category.to_lowercase()))
            .map(|t| t.category.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusItem {
    pub level: u8,
    pub category: String,
    /// Second-person, present-tense prompt.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusLadder {
    pub items: Vec<StimulusItem>,
    pub built_from: String,
}

impl StimulusLadder {
    pub fn validate(&self) -> Result<(), LadderError> {
        for level in MIN_LEVEL..=MAX_LEVEL {
            if !self.items.iter().any(|i| i.level == level) {
                return Err(LadderError::MissingTemplates {
                    domain: self.built_from.clone(),
                    level,
                });
            }
        }
        if let Some(bad) = self
            .items
            .iter()
            .find(|i| !(MIN_LEVEL..=MAX_LEVEL).contains(&i.level) || i.text.trim().is_empty())
        {
            return Err(LadderError::InvalidTemplates(format!(
                "bad ladder item at level {}",
                bad.level
            )));
        }
        Ok(())
    }

    pub fn level_items(&self, level: u8) -> impl Iterator<Item = &StimulusItem> {
        self.items.iter().filter(move |i| i.level == level)
    }

    /// Round-robin selection within a level.
    pub fn item_at(&self, level: u8, rotation: usize) -> Option<&StimulusItem> {
        let count = self.level_items(level).count();
        if count == 0 {
            return None;
        }
        self.level_items(level).nth(rotation % count)
    }
}

/// One entry of the ladder template file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderTemplate {
    pub domain: String,
    pub level: u8,
    pub category_slot: String,
    pub text_template: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: u32,
    pub templates: Vec<LadderTemplate>,
}

impl TemplateSet {
    pub fn from_json(json: &str) -> Result<Self, LadderError> {
        let set: TemplateSet =
            serde_json::from_str(json).map_err(|e| LadderError::InvalidTemplates(e.to_string()))?;
        if let Some(t) = set
            .templates
            .iter()
            .find(|t| !(MIN_LEVEL..=MAX_LEVEL).contains(&t.level) || t.text_template.trim().is_empty())
        {
            return Err(LadderError::InvalidTemplates(format!(
                "template for `{}` level {} is invalid",
                t.domain, t.level
            )));
        }
        Ok(set)
    }

    fn for_level<'a>(&'a self, domain: &'a str, level: u8) -> impl Iterator<Item = &'a LadderTemplate> {
        self.templates
            .iter()
            .filter(move |t| t.level == level && t.domain.eq_ignore_ascii_case(domain))
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::from_json(crate::data::LADDER_TEMPLATES).expect("bundled ladder templates are valid")
    }
}

/// Builds the ladder for `profile` from the template file.
///
/// Level 1 uses the domain's conceptual templates. For levels 2 to 6, domain
/// context scenes are tagged with the strongest trigger category, and each
/// of the top trigger categories gets its category-specific template. A
/// category without a specific template falls back to the generic `any`
/// template, but only on levels that carry no context scenes.
pub fn build_ladder(profile: &PatientProfile, templates: &TemplateSet) -> Result<StimulusLadder, LadderError> {
    profile.validate()?;
    let domain = profile.trauma_domain.as_str();
    let ranked = profile.ranked_categories();
    let top = &ranked[..ranked.len().min(TOP_CATEGORIES)];
    let primary = top[0];

    let mut items = Vec::new();
    for level in MIN_LEVEL..=MAX_LEVEL {
        let before = items.len();
        if level == MIN_LEVEL {
            items.extend(
                templates
                    .for_level(domain, level)
                    .filter(|t| t.category_slot == SLOT_CONCEPT)
                    .map(|t| StimulusItem {
                        level,
                        category: CONCEPT_CATEGORY.to_string(),
                        text: t.text_template.clone(),
                    }),
            );
        } else {
            let context: Vec<_> = templates
                .for_level(domain, level)
                .filter(|t| t.category_slot == SLOT_CONTEXT)
                .collect();
            let generic: Vec<_> = templates
                .for_level(domain, level)
                .filter(|t| t.category_slot == SLOT_ANY)
                .collect();
            for &category in top {
                let specific: Vec<_> = templates
                    .for_level(domain, level)
                    .filter(|t| t.category_slot.eq_ignore_ascii_case(category))
                    .collect();
                let chosen = if !specific.is_empty() {
                    specific
                } else if context.is_empty() {
                    generic.clone()
                } else {
                    Vec::new()
                };
                items.extend(chosen.into_iter().map(|t| StimulusItem {
                    level,
                    category: category.to_string(),
                    text: t.text_template.replace("{category}", category),
                }));
            }
            items.extend(context.iter().map(|t| StimulusItem {
                level,
                category: primary.to_string(),
                text: t.text_template.clone(),
            }));
        }
        if items.len() == before {
            return Err(LadderError::MissingTemplates {
                domain: domain.to_string(),
                level,
            });
        }
    }

    let ladder = StimulusLadder {
        items,
        built_from: profile.patient_id.clone(),
    };
    ladder.validate()?;
    Ok(ladder)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionEntry {
    pub session_id: String,
    pub level: u8,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderPosition {
    pub current_daily_level: u8,
    pub consecutive_stable_sessions: u32,
    pub history: Vec<PositionEntry>,
}

impl Default for LadderPosition {
    fn default() -> Self {
        Self::at_level(MIN_LEVEL)
    }
}

impl LadderPosition {
    pub fn at_level(level: u8) -> Self {
        Self {
            current_daily_level: level.clamp(MIN_LEVEL, MAX_DAILY_LEVEL),
            consecutive_stable_sessions: 0,
            history: Vec::new(),
        }
    }
}

/// Closed-session facts the ladder cares about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub session_id: String,
    pub level: u8,
    pub stable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderAction {
    Advance,
    Hold,
    Regress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionReason {
    ThreeStable,
    InsufficientStable,
    ToleranceBreach,
    DistressReport,
    /// Session type that does not feed the stable-session run.
    NotCounted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderDecision {
    pub action: LadderAction,
    pub new_level: u8,
    pub reason: DecisionReason,
}

/// Folds one closed session into the position.
pub fn record_session_outcome(pos: &LadderPosition, outcome: &SessionOutcome) -> Result<LadderPosition, LadderError> {
    if outcome.level != pos.current_daily_level {
        return Err(LadderError::LevelMismatch {
            expected: pos.current_daily_level,
            got: outcome.level,
        });
    }
    let mut next = pos.clone();
    next.consecutive_stable_sessions = if outcome.stable {
        pos.consecutive_stable_sessions + 1
    } else {
        0
    };
    next.history.push(PositionEntry {
        session_id: outcome.session_id.clone(),
        level: outcome.level,
        stable: outcome.stable,
    });
    Ok(next)
}

/// Advance after three consecutive stable sessions, otherwise hold.
/// Regression is never decided here.
pub fn evaluate_advancement(pos: &LadderPosition) -> LadderDecision {
    let level = pos.current_daily_level;
    if pos.consecutive_stable_sessions >= STABLE_SESSIONS_TO_ADVANCE && level < MAX_DAILY_LEVEL {
        LadderDecision {
            action: LadderAction::Advance,
            new_level: level + 1,
            reason: DecisionReason::ThreeStable,
        }
    } else {
        LadderDecision {
            action: LadderAction::Hold,
            new_level: level,
            reason: DecisionReason::InsufficientStable,
        }
    }
}

/// One-level step down, floored at level 1.
pub fn regress(pos: &LadderPosition, reason: DecisionReason) -> LadderDecision {
    LadderDecision {
        action: LadderAction::Regress,
        new_level: pos.current_daily_level.saturating_sub(1).max(MIN_LEVEL),
        reason,
    }
}

/// Applies a decision. Any level change resets the stable-session counter.
pub fn apply_decision(pos: &LadderPosition, decision: &LadderDecision) -> LadderPosition {
    let mut next = pos.clone();
    let new_level = decision.new_level.clamp(MIN_LEVEL, MAX_DAILY_LEVEL);
    if new_level != pos.current_daily_level {
        next.current_daily_level = new_level;
        next.consecutive_stable_sessions = 0;
    }
    next
}

pub fn select_session_level(pos: &LadderPosition, session_type: SessionType) -> u8 {
    match session_type {
        SessionType::Daily | SessionType::RealWorld => pos.current_daily_level,
        SessionType::WeeklyDeep => (pos.current_daily_level + 1).min(MAX_LEVEL),
    }
}
