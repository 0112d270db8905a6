//! Layer prompts and two-axis response classification.
//!
//! Every response is classified along layer depth reached (0 to 3) and
//! activation zone. Classification sits behind [`ClassifierPort`]; the
//! bundled [`RuleClassifier`] is deterministic and lexicon driven, and
//! [`StructuredOutputClassifier`] adapts any model that emits the structured
//! classification JSON documented in `docs/classifier_output.schema.json`.

use crate::events::{EventKind, SessionEvent};
use crate::ladder::StimulusItem;
use crate::types::{ActivationZone, CrisisCause, FeelingTone, LayerAck, SessionType};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ElicitationError {
    #[error("response precedes its prompt ({prompt_ms} > {response_ms})")]
    NegativeInterval { prompt_ms: u64, response_ms: u64 },
    #[error("latency needs a prompt and a response event, got {0:?} and {1:?}")]
    WrongEventKinds(EventKind, EventKind),
    #[error("invalid patient input: {0}")]
    InvalidInput(String),
    #[error("invalid data file: {0}")]
    InvalidData(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientInput {
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_choice: Option<FeelingTone>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_ack: Option<LayerAck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_report_activation: Option<f64>,
}

impl PatientInput {
    pub fn validate(&self) -> Result<(), ElicitationError> {
        if self.structured_choice.is_none()
            && self.layer_ack.is_none()
            && self.free_text.is_none()
            && self.self_report_activation.is_none()
        {
            return Err(ElicitationError::InvalidInput("no response field populated".into()));
        }
        if let Some(a) = self.self_report_activation {
            if !(a.is_finite() && (0.0..=10.0).contains(&a)) {
                return Err(ElicitationError::InvalidInput(format!("activation {a} outside 0..=10")));
            }
        }
        Ok(())
    }

    /// No structured field and no readable words. Counts toward the
    /// dissociation run.
    pub fn is_empty_or_incoherent(&self) -> bool {
        self.structured_choice.is_none()
            && self.layer_ack.is_none()
            && self.self_report_activation.is_none()
            && self
                .free_text
                .as_deref()
                .is_none_or(|t| t.chars().filter(|c| c.is_alphabetic()).count() < 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LexiconAxis {
    FeelingTone,
    Decentering,
    Belief,
    Crisis,
    Escalation,
    /// Belief-content words that must never appear in a belief inquiry.
    Suggestion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub entry: String,
    pub axis: LexiconAxis,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub version: u32,
    pub entries: Vec<LexiconEntry>,
}

/// Lowercases and strips punctuation so that phrase lookups match on word
/// boundaries. Apostrophes are kept.
pub(crate) fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push(' ');
    let mut last_space = true;
    for c in text.chars().flat_map(char::to_lowercase) {
        let c = if c == '\u{2019}' { '\'' } else { c };
        if c.is_alphanumeric() || c == '\'' {
            out.push(c);
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    if !last_space {
        out.push(' ');
    }
    out
}

impl Lexicon {
    pub fn from_json(json: &str) -> Result<Self, ElicitationError> {
        let lex: Lexicon = serde_json::from_str(json).map_err(|e| ElicitationError::InvalidData(e.to_string()))?;
        if lex.entries.iter().any(|e| e.entry.trim().is_empty()) {
            return Err(ElicitationError::InvalidData("empty lexicon entry".into()));
        }
        Ok(lex)
    }

    pub fn axis(&self, axis: LexiconAxis) -> impl Iterator<Item = &LexiconEntry> {
        self.entries.iter().filter(move |e| e.axis == axis)
    }

    /// Entries of `axis` found in `text` as whole words or phrases.
    pub fn matches<'a>(&'a self, text: &str, axis: LexiconAxis) -> Vec<&'a LexiconEntry> {
        let hay = normalize(text);
        self.axis(axis)
            .filter(|e| hay.contains(&normalize(&e.entry)))
            .collect()
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_json(crate::data::LEXICON).expect("bundled lexicon is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconHit {
    pub entry: String,
    pub axis: LexiconAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseClassification {
    /// 0 when no feeling-tone label was produced.
    pub layer_depth: u8,
    pub activation_zone: ActivationZone,
    pub crisis: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crisis_cause: Option<CrisisCause>,
    pub confidence: f64,
    #[serde(default)]
    pub matched: Vec<LexiconHit>,
}

/// What the classifier knows about the moment a response arrives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierContext {
    /// Deepest layer the current prompt can award (0 when no layer prompt
    /// is open).
    pub prompted_layer: u8,
    pub last_zone: Option<ActivationZone>,
    /// Empty or incoherent responses immediately before this one.
    pub consecutive_empty: u32,
    pub session_type: SessionType,
}

impl ClassifierContext {
    pub fn new(prompted_layer: u8, session_type: SessionType) -> Self {
        Self {
            prompted_layer,
            last_zone: None,
            consecutive_empty: 0,
            session_type,
        }
    }
}

/// Response classification capability.
///
/// Implementations must never award a layer above `ctx.prompted_layer`, must
/// flag every input in the crisis fixture set, and should be deterministic;
/// those that are not must say so through [`ClassifierPort::is_deterministic`].
/// [`conformance::check`] verifies the contract.
pub trait ClassifierPort {
    fn classify(&self, ctx: &ClassifierContext, input: &PatientInput) -> ResponseClassification;

    fn is_deterministic(&self) -> bool {
        true
    }
}

impl<C: ClassifierPort + ?Sized> ClassifierPort for Box<C> {
    fn classify(&self, ctx: &ClassifierContext, input: &PatientInput) -> ResponseClassification {
        (**self).classify(ctx, input)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

/// Zone boundaries on the 0 to 10 self-report scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneThresholds {
    /// Highest activation still within the window.
    pub within_max: f64,
    /// Highest activation classified as approaching the upper boundary.
    pub approaching_max: f64,
}

impl Default for ZoneThresholds {
    fn default() -> Self {
        Self {
            within_max: 7.0,
            approaching_max: 8.5,
        }
    }
}

impl ZoneThresholds {
    pub fn zone(&self, activation: f64) -> ActivationZone {
        if activation <= self.within_max {
            ActivationZone::Within
        } else if activation <= self.approaching_max {
            ActivationZone::Approaching
        } else {
            ActivationZone::Exceeding
        }
    }
}

/// Consecutive empty or incoherent responses that count as a dissociation
/// pattern.
pub const DISSOCIATION_RUN: u32 = 3;

/// Deterministic lexicon and threshold classifier.
#[derive(Debug, Clone, Default)]
pub struct RuleClassifier {
    pub lexicon: Lexicon,
    pub zones: ZoneThresholds,
}

impl RuleClassifier {
    pub fn new(lexicon: Lexicon, zones: ZoneThresholds) -> Self {
        Self { lexicon, zones }
    }

    fn hits(&self, text: &str, axis: LexiconAxis) -> Vec<&LexiconEntry> {
        self.lexicon.matches(text, axis)
    }
}

impl ClassifierPort for RuleClassifier {
    fn classify(&self, ctx: &ClassifierContext, input: &PatientInput) -> ResponseClassification {
        let text = input.free_text.as_deref().unwrap_or("");
        let mut matched = Vec::new();
        let mut record = |entries: &[&LexiconEntry]| {
            matched.extend(entries.iter().map(|e| LexiconHit {
                entry: e.entry.clone(),
                axis: e.axis,
            }))
        };

        let tone_hits = self.hits(text, LexiconAxis::FeelingTone);
        let decenter_hits = self.hits(text, LexiconAxis::Decentering);
        let belief_hits = self.hits(text, LexiconAxis::Belief);
        let crisis_hits = self.hits(text, LexiconAxis::Crisis);
        let escalation_hits = self.hits(text, LexiconAxis::Escalation);

        let cap = ctx.prompted_layer.min(3);
        let mut depth = 0;
        if cap >= 1 && (input.structured_choice.is_some() || !tone_hits.is_empty()) {
            depth = 1;
            record(&tone_hits);
        }
        if cap >= 2 && (input.layer_ack == Some(LayerAck::Layer2Confirm) || !decenter_hits.is_empty()) {
            depth = 2;
            record(&decenter_hits);
        }
        if cap >= 3 && (input.layer_ack == Some(LayerAck::Layer3BeliefNamed) || !belief_hits.is_empty()) {
            depth = 3;
            record(&belief_hits);
        }

        let reported = input.self_report_activation.map(|a| self.zones.zone(a));
        let escalated = escalation_hits
            .iter()
            .map(|e| {
                if e.weight >= 2.0 {
                    ActivationZone::Exceeding
                } else {
                    ActivationZone::Approaching
                }
            })
            .max();
        record(&escalation_hits);
        let zone = match (reported, escalated) {
            (None, None) => ctx.last_zone.unwrap_or(ActivationZone::Within),
            (a, b) => a.max(b).unwrap_or(ActivationZone::Within),
        };

        let empty = input.is_empty_or_incoherent();
        let crisis_cause = if input.self_report_activation.is_some_and(|a| a >= 10.0) {
            Some(CrisisCause::MaxActivation)
        } else if !crisis_hits.is_empty() {
            Some(CrisisCause::CrisisLexicon)
        } else if empty && ctx.consecutive_empty + 1 >= DISSOCIATION_RUN {
            Some(CrisisCause::DissociationPattern)
        } else {
            None
        };
        record(&crisis_hits);

        let confidence = if empty {
            0.0
        } else if input.structured_choice.is_some() || input.layer_ack.is_some() || input.self_report_activation.is_some() {
            1.0
        } else if !matched.is_empty() {
            0.7
        } else {
            0.3
        };

        ResponseClassification {
            layer_depth: if empty { 0 } else { depth },
            activation_zone: zone,
            crisis: crisis_cause.is_some(),
            crisis_cause,
            confidence,
            matched,
        }
    }
}

/// Classifies with the bundled lexicon and default thresholds.
pub fn classify_default(ctx: &ClassifierContext, input: &PatientInput) -> ResponseClassification {
    RuleClassifier::default().classify(ctx, input)
}

/// Request handed to a structured-output backend.
#[derive(Debug, Clone, Serialize)]
pub struct ClassificationRequest<'a> {
    pub prompted_layer: u8,
    pub session_type: SessionType,
    pub input: &'a PatientInput,
}

/// A text-generation backend that answers with classification JSON.
pub trait StructuredBackend {
    fn complete(&self, request: &ClassificationRequest<'_>) -> Result<String, String>;

    fn is_deterministic(&self) -> bool {
        false
    }
}

/// Adapter from a structured-output model to [`ClassifierPort`].
///
/// The model's answer is clamped to the prompted layer, and the rule
/// classifier's crisis detection is always applied on top, so a model can
/// add a crisis flag but never remove one. Unparseable answers fall back to
/// the rule classifier.
pub struct StructuredOutputClassifier<B> {
    backend: B,
    floor: RuleClassifier,
}

impl<B: StructuredBackend> StructuredOutputClassifier<B> {
    pub fn new(backend: B, floor: RuleClassifier) -> Self {
        Self { backend, floor }
    }
}

impl<B: StructuredBackend> ClassifierPort for StructuredOutputClassifier<B> {
    fn classify(&self, ctx: &ClassifierContext, input: &PatientInput) -> ResponseClassification {
        let floor = self.floor.classify(ctx, input);
        let request = ClassificationRequest {
            prompted_layer: ctx.prompted_layer,
            session_type: ctx.session_type,
            input,
        };
        let parsed = self
            .backend
            .complete(&request)
            .ok()
            .and_then(|raw| serde_json::from_str::<ResponseClassification>(&raw).ok());
        let Some(mut out) = parsed else {
            return floor;
        };
        out.layer_depth = out.layer_depth.min(ctx.prompted_layer);
        out.confidence = out.confidence.clamp(0.0, 1.0);
        if floor.crisis {
            out.crisis = true;
            out.crisis_cause = floor.crisis_cause;
        } else if out.crisis && out.crisis_cause.is_none() {
            out.crisis_cause = Some(CrisisCause::CrisisLexicon);
        }
        out
    }

    fn is_deterministic(&self) -> bool {
        self.backend.is_deterministic()
    }
}

/// Prompt texts, loaded from the versioned prompt file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub version: u32,
    pub settling: String,
    pub feeling_tone: String,
    pub layer1_confirm: String,
    pub layer2: String,
    pub layer3: String,
    pub hold: String,
    pub missed_gap: String,
    pub real_world_open: String,
    pub real_world_confirm: String,
    pub weekly_open: String,
    pub close: String,
    pub crisis: String,
    pub grounding: Vec<String>,
}

impl PromptSet {
    pub fn from_json(json: &str) -> Result<Self, ElicitationError> {
        let set: PromptSet = serde_json::from_str(json).map_err(|e| ElicitationError::InvalidData(e.to_string()))?;
        if set.grounding.len() != 3 {
            return Err(ElicitationError::InvalidData(format!(
                "grounding script needs 3 steps, found {}",
                set.grounding.len()
            )));
        }
        Ok(set)
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::from_json(crate::data::PROMPTS).expect("bundled prompts are valid")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptContext {
    /// What the patient named at Layer 1, echoed back in the confirmation.
    pub label: Option<String>,
}

/// Prompt for a layer target: 0 is the bare feeling-tone question, 1 the
/// label confirmation, 2 the decentering reframe, 3 the open belief inquiry.
///
/// The stimulus is deliberately not woven into any layer prompt.
pub fn render_prompt(prompts: &PromptSet, layer_target: u8, _stimulus: Option<&StimulusItem>, ctx: &PromptContext) -> String {
    match layer_target {
        0 => prompts.feeling_tone.clone(),
        1 => prompts
            .layer1_confirm
            .replace("{label}", ctx.label.as_deref().unwrap_or("something")),
        2 => prompts.layer2.clone(),
        _ => prompts.layer3.clone(),
    }
}

/// Feeling-tone recognition latency between a prompt and its response.
pub fn measure_latency(prompt: &SessionEvent, response: &SessionEvent) -> Result<u64, ElicitationError> {
    if prompt.kind() != EventKind::PromptShown || response.kind() != EventKind::PatientResponse {
        return Err(ElicitationError::WrongEventKinds(prompt.kind(), response.kind()));
    }
    latency_between(prompt.timestamp_ms, response.timestamp_ms)
}

pub fn latency_between(prompt_ms: u64, response_ms: u64) -> Result<u64, ElicitationError> {
    response_ms
        .checked_sub(prompt_ms)
        .ok_or(ElicitationError::NegativeInterval { prompt_ms, response_ms })
}

/// Conformance suite for any [`ClassifierPort`] implementation.
pub mod conformance {
    use super::*;

    #[derive(Debug, Clone, Deserialize)]
    struct Fixtures {
        inputs: Vec<PatientInput>,
    }

    pub fn crisis_fixtures() -> Vec<PatientInput> {
        serde_json::from_str::<Fixtures>(crate::data::CRISIS_FIXTURES)
            .expect("bundled crisis fixtures are valid")
            .inputs
    }

    /// Probe inputs spanning every field combination the engine sends.
    pub fn probe_inputs() -> Vec<PatientInput> {
        let mut out = Vec::new();
        let texts = [
            None,
            Some(""),
            Some("..."),
            Some("fear, heart racing"),
            Some("the picture is just words, the tightness is in me"),
            Some("it says someone is going to die"),
            Some("this is too much"),
            Some("panic, I can't breathe"),
            Some("nothing much"),
        ];
        let choices = [None, Some(FeelingTone::Unpleasant), Some(FeelingTone::Neutral)];
        let acks = [None, Some(LayerAck::Layer2Confirm), Some(LayerAck::Layer3BeliefNamed)];
        let reports = [None, Some(0.0), Some(5.0), Some(7.0), Some(7.5), Some(8.5), Some(9.0), Some(10.0)];
        for t in texts {
            for c in choices {
                for a in acks {
                    for r in reports {
                        let input = PatientInput {
                            timestamp_ms: 0,
                            structured_choice: c,
                            layer_ack: a,
                            free_text: t.map(str::to_string),
                            self_report_activation: r,
                        };
                        if input.validate().is_ok() {
                            out.push(input);
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns a description of every contract breach found.
    pub fn check<C: ClassifierPort>(classifier: &C) -> Vec<String> {
        let mut failures = Vec::new();
        let contexts: Vec<ClassifierContext> = (0..=3u8)
            .flat_map(|layer| {
                [0u32, 2].into_iter().map(move |empty| ClassifierContext {
                    prompted_layer: layer,
                    last_zone: None,
                    consecutive_empty: empty,
                    session_type: SessionType::Daily,
                })
            })
            .collect();
        for ctx in &contexts {
            for input in probe_inputs() {
                let out = classifier.classify(ctx, &input);
                if out.layer_depth > ctx.prompted_layer {
                    failures.push(format!(
                        "awarded layer {} above prompted {} for {input:?}",
                        out.layer_depth, ctx.prompted_layer
                    ));
                }
                if !(0.0..=1.0).contains(&out.confidence) {
                    failures.push(format!("confidence {} outside [0,1]", out.confidence));
                }
                if classifier.is_deterministic() && classifier.classify(ctx, &input) != out {
                    failures.push(format!("nondeterministic output for {input:?}"));
                }
            }
            for input in crisis_fixtures() {
                if !classifier.classify(ctx, &input).crisis {
                    failures.push(format!("crisis fixture not flagged: {input:?}"));
                }
            }
        }
        failures
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{EventPayload, PromptPurpose};

    fn ctx(layer: u8) -> ClassifierContext {
        ClassifierContext::new(layer, SessionType::Daily)
    }

    fn input() -> PatientInput {
        PatientInput::default()
    }

    #[test]
    fn choice_with_moderate_report_is_layer_one_within() {
        let out = classify_default(
            &ctx(1),
            &PatientInput {
                structured_choice: Some(FeelingTone::Unpleasant),
                self_report_activation: Some(5.0),
                ..input()
            },
        );
        assert_eq!((out.layer_depth, out.activation_zone, out.crisis), (1, ActivationZone::Within, false));
    }

    #[test]
    fn free_text_label_reaches_layer_one() {
        let mut c = ctx(1);
        c.session_type = SessionType::RealWorld;
        let out = classify_default(
            &c,
            &PatientInput {
                free_text: Some("fear, heart racing".into()),
                ..input()
            },
        );
        assert_eq!(out.layer_depth, 1);
        assert!(out.matched.iter().any(|h| h.entry == "fear"));
    }

    #[test]
    fn max_activation_is_crisis() {
        let out = classify_default(
            &ctx(1),
            &PatientInput {
                self_report_activation: Some(10.0),
                ..input()
            },
        );
        assert!(out.crisis);
        assert_eq!(out.crisis_cause, Some(CrisisCause::MaxActivation));
    }

    #[test]
    fn deeper_layers_need_their_prompt() {
        let text = PatientInput {
            free_text: Some("the picture is just words, the tightness is in me".into()),
            ..input()
        };
        assert_eq!(classify_default(&ctx(1), &text).layer_depth, 1);
        assert_eq!(classify_default(&ctx(2), &text).layer_depth, 2);
        let belief = PatientInput {
            free_text: Some("it says someone is going to die, it always says that".into()),
            ..input()
        };
        assert_eq!(classify_default(&ctx(2), &belief).layer_depth, 0);
        assert_eq!(classify_default(&ctx(3), &belief).layer_depth, 3);
        let ack = PatientInput {
            layer_ack: Some(LayerAck::Layer3BeliefNamed),
            ..input()
        };
        assert_eq!(classify_default(&ctx(3), &ack).layer_depth, 3);
        assert_eq!(classify_default(&ctx(0), &ack).layer_depth, 0);
    }

    #[test]
    fn zone_thresholds() {
        let z = ZoneThresholds::default();
        assert_eq!(z.zone(7.0), ActivationZone::Within);
        assert_eq!(z.zone(7.01), ActivationZone::Approaching);
        assert_eq!(z.zone(8.5), ActivationZone::Approaching);
        assert_eq!(z.zone(8.51), ActivationZone::Exceeding);
    }

    #[test]
    fn escalation_lexicon_sets_zone() {
        let out = classify_default(
            &ctx(1),
            &PatientInput {
                free_text: Some("this is too much".into()),
                ..input()
            },
        );
        assert_eq!(out.activation_zone, ActivationZone::Approaching);
        let out = classify_default(
            &ctx(1),
            &PatientInput {
                free_text: Some("panic".into()),
                self_report_activation: Some(2.0),
                ..input()
            },
        );
        assert_eq!(out.activation_zone, ActivationZone::Exceeding);
    }

    #[test]
    fn unparseable_input_carries_zone() {
        let mut c = ctx(1);
        c.last_zone = Some(ActivationZone::Approaching);
        let out = classify_default(
            &c,
            &PatientInput {
                free_text: Some("  ".into()),
                ..input()
            },
        );
        assert_eq!(out.layer_depth, 0);
        assert_eq!(out.activation_zone, ActivationZone::Approaching);
        assert_eq!(out.confidence, 0.0);
        assert!(!out.crisis);
    }

    #[test]
    fn third_empty_response_is_dissociation() {
        let mut c = ctx(1);
        c.consecutive_empty = 2;
        let out = classify_default(
            &c,
            &PatientInput {
                free_text: Some(String::new()),
                ..input()
            },
        );
        assert_eq!(out.crisis_cause, Some(CrisisCause::DissociationPattern));
    }

    #[test]
    fn word_boundary_matching() {
        let lex = Lexicon::default();
        assert!(lex.matches("I feel tense", LexiconAxis::FeelingTone).iter().any(|e| e.entry == "tense"));
        assert!(lex.matches("intense", LexiconAxis::FeelingTone).is_empty());
        assert!(!lex.matches("I CAN'T GO ON", LexiconAxis::Crisis).is_empty());
        assert!(!lex.matches("I can\u{2019}t go on", LexiconAxis::Crisis).is_empty());
    }

    #[test]
    fn prompts_render() {
        let p = PromptSet::default();
        let any = StimulusItem {
            level: 2,
            category: "vehicles".into(),
            text: "You hear distant vehicles approaching on a road ahead.".into(),
        };
        let none = PromptContext::default();
        assert!(render_prompt(&p, 0, Some(&any), &none).contains("pleasant, unpleasant, or neutral"));
        assert!(render_prompt(&p, 2, Some(&any), &none).contains("The scenario is just words"));
        let l3 = render_prompt(&p, 3, Some(&any), &none);
        assert!(l3.contains("If the feeling could speak, what would it say?"));
        let lex = Lexicon::default();
        assert!(lex.matches(&l3, LexiconAxis::Suggestion).is_empty());
        let label = PromptContext {
            label: Some("tightness".into()),
        };
        assert_eq!(render_prompt(&p, 1, None, &label), "You noticed tightness. Can you stay with that for a moment?");
    }

    #[test]
    fn latency() {
        let prompt = SessionEvent::new(
            1000,
            EventPayload::PromptShown {
                purpose: PromptPurpose::FeelingTone,
                layer_target: Some(0),
            },
        );
        let response = |t| {
            SessionEvent::new(
                t,
                EventPayload::PatientResponse {
                    event_index: 0,
                    choice: None,
                    layer_ack: None,
                    free_text: None,
                    self_report: Some(3.0),
                    empty: false,
                },
            )
        };
        assert_eq!(measure_latency(&prompt, &response(4500)), Ok(3500));
        assert_eq!(latency_between(5000, 5000), Ok(0));
        assert_eq!(
            measure_latency(&prompt, &response(900)),
            Err(ElicitationError::NegativeInterval {
                prompt_ms: 1000,
                response_ms: 900
            })
        );
        assert!(matches!(
            measure_latency(&response(0), &prompt),
            Err(ElicitationError::WrongEventKinds(..))
        ));
    }

    #[test]
    fn rule_classifier_conforms() {
        let failures = conformance::check(&RuleClassifier::default());
        assert!(failures.is_empty(), "{failures:#?}");
    }

    struct CannedBackend(&'static str);

    impl StructuredBackend for CannedBackend {
        fn complete(&self, _: &ClassificationRequest<'_>) -> Result<String, String> {
            Ok(self.0.to_string())
        }

        fn is_deterministic(&self) -> bool {
            true
        }
    }

    #[test]
    fn structured_adapter_conforms_even_with_an_overreaching_model() {
        let eager = CannedBackend(r#"{"layer_depth":3,"activation_zone":"within","crisis":false,"confidence":1.7}"#);
        let adapter = StructuredOutputClassifier::new(eager, RuleClassifier::default());
        let failures = conformance::check(&adapter);
        assert!(failures.is_empty(), "{failures:#?}");

        let broken = StructuredOutputClassifier::new(CannedBackend("not json"), RuleClassifier::default());
        assert!(conformance::check(&broken).is_empty());
    }

    #[test]
    fn bad_classifier_is_caught() {
        struct Liar;
        impl ClassifierPort for Liar {
            fn classify(&self, _: &ClassifierContext, _: &PatientInput) -> ResponseClassification {
                ResponseClassification {
                    layer_depth: 3,
                    activation_zone: ActivationZone::Within,
                    crisis: false,
                    crisis_cause: None,
                    confidence: 1.0,
                    matched: vec![],
                }
            }
        }
        let failures = conformance::check(&Liar);
        assert!(failures.iter().any(|f| f.contains("above prompted")));
        assert!(failures.iter().any(|f| f.contains("crisis fixture")));
    }
}
