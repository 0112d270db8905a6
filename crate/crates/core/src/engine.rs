//! Per-session state machine.
//!
//! The engine is a pure transition function: `(state, input) -> (state,
//! action)`. It holds no clock and no mutable state of its own, so sessions
//! can be driven from any thread and replays are bit-for-bit deterministic.
//!
//! ```text
//! checkin -> settling -> contact_presented -> awaiting_feeling_tone
//!     -> layer1 -> layer2 [-> layer3] -> next contact | closing
//! any responding phase --exceeding--> grounding -> next contact (level - 1)
//! any live phase --crisis--> crisis
//! ```

use crate::elicitation::{
    latency_between, render_prompt, ClassifierContext, ClassifierPort, PatientInput, PromptContext, PromptSet,
    ResponseClassification, RuleClassifier,
};
use crate::events::{ContactOutcome, EventPayload, PromptPurpose, SessionEvent, SessionRecord};
use crate::ladder::{select_session_level, DecisionReason, LadderPosition, StimulusItem, StimulusLadder, MIN_LEVEL};
use crate::safety::{CrisisResource, SafetyPolicy};
use crate::types::{ActivationZone, CrisisCause, SessionType, DAY_MS};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("another session is already open")]
    SessionAlreadyOpen,
    #[error("check-in activation {0} outside 0..=10")]
    InvalidActivation(f64),
    #[error("{input} is not accepted in phase {phase}")]
    PhaseMismatch { phase: Phase, input: InputKind },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("timestamp {got} precedes the last event at {last}")]
    NonMonotonicTimestamp { last: u64, got: u64 },
    #[error("post-stimulus pause has {remaining_ms} ms left")]
    PauseNotElapsed { remaining_ms: u64 },
    #[error("session in phase {0} cannot be closed")]
    NotClosable(Phase),
    #[error("ladder has no stimulus at level {0}")]
    NoStimulus(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Checkin,
    Settling,
    ContactPresented,
    AwaitingFeelingTone,
    Layer1,
    Layer2,
    Layer3,
    Grounding,
    Crisis,
    Closing,
    Closed,
}

impl Phase {
    pub const ALL: [Phase; 11] = [
        Phase::Checkin,
        Phase::Settling,
        Phase::ContactPresented,
        Phase::AwaitingFeelingTone,
        Phase::Layer1,
        Phase::Layer2,
        Phase::Layer3,
        Phase::Grounding,
        Phase::Crisis,
        Phase::Closing,
        Phase::Closed,
    ];

    /// Phases that `next_step` never leaves. `checkin` is transient and is
    /// never held between calls.
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Checkin | Phase::Crisis | Phase::Closing | Phase::Closed)
    }

    /// Phases in which a layer prompt is open and a response is awaited.
    pub fn accepts_response(self) -> bool {
        matches!(self, Phase::AwaitingFeelingTone | Phase::Layer1 | Phase::Layer2 | Phase::Layer3)
    }

    /// Deepest layer a response in this phase can reach.
    pub fn prompted_layer(self) -> u8 {
        match self {
            Phase::AwaitingFeelingTone | Phase::Layer1 => 1,
            Phase::Layer2 => 2,
            Phase::Layer3 => 3,
            _ => 0,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    SettleComplete,
    PauseElapsed,
    Respond,
    GroundingAck,
    EndSession,
}

impl InputKind {
    pub const ALL: [InputKind; 5] = [
        InputKind::SettleComplete,
        InputKind::PauseElapsed,
        InputKind::Respond,
        InputKind::GroundingAck,
        InputKind::EndSession,
    ];
}

impl fmt::Display for InputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

/// Client-driven inputs. The client owns the clock and the timers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "input", rename_all = "snake_case")]
pub enum StepInput {
    SettleComplete { timestamp_ms: u64 },
    PauseElapsed { timestamp_ms: u64 },
    Respond(PatientInput),
    GroundingAck { timestamp_ms: u64 },
    EndSession { timestamp_ms: u64 },
}

impl StepInput {
    pub fn timestamp_ms(&self) -> u64 {
        match self {
            StepInput::SettleComplete { timestamp_ms }
            | StepInput::PauseElapsed { timestamp_ms }
            | StepInput::GroundingAck { timestamp_ms }
            | StepInput::EndSession { timestamp_ms } => *timestamp_ms,
            StepInput::Respond(input) => input.timestamp_ms,
        }
    }

    pub fn kind(&self) -> InputKind {
        match self {
            StepInput::SettleComplete { .. } => InputKind::SettleComplete,
            StepInput::PauseElapsed { .. } => InputKind::PauseElapsed,
            StepInput::Respond(_) => InputKind::Respond,
            StepInput::GroundingAck { .. } => InputKind::GroundingAck,
            StepInput::EndSession { .. } => InputKind::EndSession,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    ShowPrompt,
    ShowStimulus,
    BeginGrounding,
    EnterCrisis,
    AdvanceLayer,
    NextContactEvent,
    CloseSession,
}

/// What the client should do next. Exactly one per transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineAction {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_text: Option<String>,
    /// Short acknowledgement shown before the main prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding_step: Option<u8>,
    /// Stabilisation steps, populated in crisis mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<String>,
    /// Clinical contact pathway, populated in crisis and real-world sessions.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resources: Vec<CrisisResource>,
}

impl EngineAction {
    fn new(kind: ActionKind, prompt_text: impl Into<String>) -> Self {
        Self {
            kind,
            prompt_text: Some(prompt_text.into()),
            note: None,
            layer: None,
            grounding_step: None,
            steps: Vec::new(),
            resources: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub daily_events: u32,
    pub weekly_events: u32,
    pub real_world_events: u32,
    /// Advisory; the client runs the settling timer.
    pub settle_ms: u64,
    pub pause_ms: u64,
    /// Prior closed sessions reaching Layer 2 before Layer 3 is offered.
    pub layer3_prior_sessions: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            daily_events: 3,
            weekly_events: 8,
            real_world_events: 1,
            settle_ms: 90_000,
            pause_ms: 5_000,
            layer3_prior_sessions: 3,
        }
    }
}

impl EngineConfig {
    pub fn event_budget(&self, session_type: SessionType) -> u32 {
        match session_type {
            SessionType::Daily => self.daily_events,
            SessionType::WeeklyDeep => self.weekly_events,
            SessionType::RealWorld => self.real_world_events,
        }
    }
}

/// Category recorded for the single contact of a real-world session.
pub const REAL_WORLD_CATEGORY: &str = "real world";

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub session_id: String,
    pub session_type: SessionType,
    pub phase: Phase,
    /// Working level; lowered by step-backs for the rest of the session.
    pub stimulus_level: u8,
    /// Level the session opened at.
    pub session_level: u8,
    pub events_completed: u32,
    pub event_budget: u32,
    pub current_layer_reached: u8,
    pub checkin_activation: f64,
    pub events: Vec<SessionEvent>,

    pub ladder: StimulusLadder,
    pub rotation: usize,
    pub prior_layer2_sessions: u32,
    pub grounding_cycles: u32,
    pub grounding_step: u8,
    pub step_back_count: u32,
    pub last_zone: Option<ActivationZone>,
    pub consecutive_empty: u32,
    pub contacts: Vec<ContactOutcome>,
    pub open_contact: Option<ContactOutcome>,
    pub any_outside_window: bool,
    pub crisis: Option<CrisisCause>,
    pub last_label: Option<String>,
    pub stimulus_shown_at: Option<u64>,
    pub feeling_tone_prompt_at: Option<u64>,
    pub latency_taken: bool,
    pub latencies_ms: Vec<u64>,
    pub closing_activation: f64,
}

impl SessionState {
    pub fn last_timestamp(&self) -> u64 {
        self.events.last().map_or(0, |e| e.timestamp_ms)
    }

    pub fn is_open(&self) -> bool {
        self.phase != Phase::Closed
    }

    fn log(&mut self, timestamp_ms: u64, payload: EventPayload) {
        self.events.push(SessionEvent::new(timestamp_ms, payload));
    }

    fn prompt(&mut self, timestamp_ms: u64, purpose: PromptPurpose, layer_target: Option<u8>) {
        self.log(timestamp_ms, EventPayload::PromptShown { purpose, layer_target });
    }

    fn reach_layer(&mut self, timestamp_ms: u64, layer: u8) {
        if layer > self.current_layer_reached {
            self.current_layer_reached = layer;
            if let Some(c) = self.open_contact.as_mut() {
                c.layer = layer;
            }
            let event_index = self.events_completed;
            self.log(timestamp_ms, EventPayload::LayerReached { event_index, layer });
        }
    }

    fn settle_contact(&mut self) {
        if let Some(c) = self.open_contact.take() {
            self.contacts.push(c);
        }
    }

    fn budget_spent(&self) -> bool {
        self.events_completed >= self.event_budget
    }
}

/// Facts from outside the session that the engine needs at start.
#[derive(Debug, Clone, Copy)]
pub struct SessionContext<'a> {
    pub ladder: &'a StimulusLadder,
    pub position: &'a LadderPosition,
    /// Closed sessions so far, oldest first.
    pub prior_records: &'a [SessionRecord],
    pub has_open_session: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRequest {
    pub session_id: String,
    pub session_type: SessionType,
    pub checkin_activation: f64,
    #[serde(default)]
    pub body_markers: Vec<String>,
    pub timestamp_ms: u64,
}

pub struct ProtocolEngine<C = RuleClassifier> {
    pub config: EngineConfig,
    pub prompts: PromptSet,
    pub safety: SafetyPolicy,
    pub classifier: C,
}

impl Default for ProtocolEngine<RuleClassifier> {
    fn default() -> Self {
        Self::new(EngineConfig::default(), RuleClassifier::default())
    }
}

impl<C: ClassifierPort> ProtocolEngine<C> {
    pub fn new(config: EngineConfig, classifier: C) -> Self {
        Self {
            config,
            prompts: PromptSet::default(),
            safety: SafetyPolicy::default(),
            classifier,
        }
    }

    pub fn start_session(
        &self,
        ctx: SessionContext<'_>,
        req: StartRequest,
    ) -> Result<(SessionState, EngineAction), EngineError> {
        if ctx.has_open_session {
            return Err(EngineError::SessionAlreadyOpen);
        }
        let activation = req.checkin_activation;
        if !(activation.is_finite() && (0.0..=10.0).contains(&activation)) {
            return Err(EngineError::InvalidActivation(activation));
        }
        let level = select_session_level(ctx.position, req.session_type);
        let budget = self.config.event_budget(req.session_type);
        let ts = req.timestamp_ms;
        let mut s = SessionState {
            session_id: req.session_id,
            session_type: req.session_type,
            phase: Phase::Checkin,
            stimulus_level: level,
            session_level: level,
            events_completed: 0,
            event_budget: budget,
            current_layer_reached: 0,
            checkin_activation: activation,
            events: Vec::new(),
            ladder: ctx.ladder.clone(),
            rotation: ctx.prior_records.len(),
            prior_layer2_sessions: ctx.prior_records.iter().filter(|r| r.max_layer_reached >= 2).count() as u32,
            grounding_cycles: 0,
            grounding_step: 0,
            step_back_count: 0,
            last_zone: None,
            consecutive_empty: 0,
            contacts: Vec::new(),
            open_contact: None,
            any_outside_window: false,
            crisis: None,
            last_label: None,
            stimulus_shown_at: None,
            feeling_tone_prompt_at: None,
            latency_taken: false,
            latencies_ms: Vec::new(),
            closing_activation: activation,
        };
        s.log(
            ts,
            EventPayload::Checkin {
                session_type: req.session_type,
                stimulus_level: level,
                daily_level: ctx.position.current_daily_level,
                activation,
                body_markers: req.body_markers,
                event_budget: budget,
            },
        );

        let action = match req.session_type {
            SessionType::Daily => {
                s.log(ts, EventPayload::SettleStart);
                s.prompt(ts, PromptPurpose::Settling, None);
                s.phase = Phase::Settling;
                EngineAction::new(ActionKind::ShowPrompt, &self.prompts.settling)
            }
            SessionType::WeeklyDeep => {
                let summary = self.week_summary(ctx, ts);
                s.prompt(ts, PromptPurpose::WeekSummary, None);
                s.log(ts, EventPayload::SettleStart);
                s.prompt(ts, PromptPurpose::Settling, None);
                s.phase = Phase::Settling;
                let mut a = EngineAction::new(ActionKind::ShowPrompt, &self.prompts.settling);
                a.note = Some(summary);
                a
            }
            SessionType::RealWorld => {
                // The environment is the stimulus: one contact, opened at once.
                s.open_contact = Some(ContactOutcome {
                    level,
                    category: REAL_WORLD_CATEGORY.into(),
                    layer: 0,
                });
                s.log(
                    ts,
                    EventPayload::StimulusShown {
                        event_index: 0,
                        level,
                        category: REAL_WORLD_CATEGORY.into(),
                        text: "(present environment)".into(),
                    },
                );
                s.stimulus_shown_at = Some(ts);
                s.prompt(ts, PromptPurpose::RealWorldOpen, None);
                s.prompt(ts, PromptPurpose::FeelingTone, Some(0));
                s.feeling_tone_prompt_at = Some(ts);
                s.phase = Phase::AwaitingFeelingTone;
                let mut a = EngineAction::new(ActionKind::ShowPrompt, &self.prompts.feeling_tone);
                a.note = Some(self.prompts.real_world_open.clone());
                a.resources = self.resources();
                a
            }
        };
        Ok((s, action))
    }

    pub fn next_step(&self, state: &SessionState, input: &StepInput) -> Result<(SessionState, EngineAction), EngineError> {
        let kind = input.kind();
        let mismatch = EngineError::PhaseMismatch {
            phase: state.phase,
            input: kind,
        };
        if state.phase.is_terminal() {
            return Err(mismatch);
        }
        let ts = input.timestamp_ms();
        if ts < state.last_timestamp() {
            return Err(EngineError::NonMonotonicTimestamp {
                last: state.last_timestamp(),
                got: ts,
            });
        }
        let mut s = state.clone();
        match input {
            StepInput::Respond(patient) => {
                patient.validate().map_err(|e| EngineError::InvalidInput(e.to_string()))?;
                self.respond(s, patient, mismatch)
            }
            StepInput::SettleComplete { .. } if s.phase == Phase::Settling => {
                let action = self.present_stimulus(&mut s, ts, ActionKind::ShowStimulus, None)?;
                Ok((s, action))
            }
            StepInput::PauseElapsed { .. } if s.phase == Phase::ContactPresented => {
                let shown = s.stimulus_shown_at.unwrap_or(ts);
                let due = shown + self.config.pause_ms;
                if ts < due {
                    return Err(EngineError::PauseNotElapsed { remaining_ms: due - ts });
                }
                s.prompt(ts, PromptPurpose::FeelingTone, Some(0));
                s.feeling_tone_prompt_at = Some(ts);
                s.phase = Phase::AwaitingFeelingTone;
                let text = render_prompt(&self.prompts, 0, None, &PromptContext::default());
                Ok((s, EngineAction::new(ActionKind::ShowPrompt, text)))
            }
            StepInput::GroundingAck { .. } if s.phase == Phase::Grounding => {
                let action = self.grounding_ack(&mut s, ts)?;
                Ok((s, action))
            }
            StepInput::EndSession { .. } => {
                s.settle_contact();
                s.phase = Phase::Closing;
                Ok((s, EngineAction::new(ActionKind::CloseSession, &self.prompts.close)))
            }
            _ => Err(mismatch),
        }
    }

    /// Closes a session in `closing` or `crisis` and returns its record.
    pub fn close_session(&self, state: &SessionState, timestamp_ms: u64) -> Result<(SessionState, SessionRecord), EngineError> {
        if !matches!(state.phase, Phase::Closing | Phase::Crisis) {
            return Err(EngineError::NotClosable(state.phase));
        }
        if timestamp_ms < state.last_timestamp() {
            return Err(EngineError::NonMonotonicTimestamp {
                last: state.last_timestamp(),
                got: timestamp_ms,
            });
        }
        let mut s = state.clone();
        s.settle_contact();
        let completed = s.crisis.is_none() && s.budget_spent();
        let crisis = s.crisis.is_some();
        let stable = SessionRecord::is_stable(completed, &s.contacts, !s.any_outside_window, s.step_back_count, crisis);
        let max_layer = s.contacts.iter().map(|c| c.layer).max().unwrap_or(0);
        s.log(
            timestamp_ms,
            EventPayload::SessionClosed {
                stable,
                max_layer,
                completed,
            },
        );
        s.phase = Phase::Closed;
        let record = SessionRecord {
            session_id: s.session_id.clone(),
            session_type: s.session_type,
            stimulus_level: s.session_level,
            opened_at: s.events.first().map_or(timestamp_ms, |e| e.timestamp_ms),
            closed_at: timestamp_ms,
            stable,
            max_layer_reached: max_layer,
            opening_activation: s.checkin_activation,
            closing_activation: s.closing_activation,
            step_back_count: s.step_back_count,
            crisis,
            completed,
            latencies_ms: s.latencies_ms.clone(),
            contacts: s.contacts.clone(),
        };
        Ok((s, record))
    }

    pub fn resources(&self) -> Vec<CrisisResource> {
        self.safety.resources.resources.clone()
    }

    fn week_summary(&self, ctx: SessionContext<'_>, ts: u64) -> String {
        let since = ts.saturating_sub(7 * DAY_MS);
        let week: Vec<&SessionRecord> = ctx
            .prior_records
            .iter()
            .filter(|r| r.opened_at >= since && r.opened_at < ts)
            .collect();
        let practice: Vec<f64> = week
            .iter()
            .filter(|r| r.session_type.is_practice())
            .map(|r| r.opening_activation)
            .collect();
        let trajectory = match (practice.first(), practice.last()) {
            (Some(a), Some(b)) => format!("{a:.1} to {b:.1}"),
            _ => "not yet recorded".to_string(),
        };
        let layer = week.iter().map(|r| r.max_layer_reached).max().unwrap_or(0);
        self.prompts
            .weekly_open
            .replace("{sessions}", &week.len().to_string())
            .replace("{trajectory}", &trajectory)
            .replace("{layer}", &layer.to_string())
            .replace("{level}", &ctx.position.current_daily_level.to_string())
    }

    fn stimulus_for(&self, s: &SessionState) -> Result<StimulusItem, EngineError> {
        let rotation = s.rotation + s.events_completed as usize;
        s.ladder
            .item_at(s.stimulus_level, rotation)
            .cloned()
            .ok_or(EngineError::NoStimulus(s.stimulus_level))
    }

    fn present_stimulus(
        &self,
        s: &mut SessionState,
        ts: u64,
        kind: ActionKind,
        note: Option<String>,
    ) -> Result<EngineAction, EngineError> {
        let item = self.stimulus_for(s)?;
        s.settle_contact();
        s.open_contact = Some(ContactOutcome {
            level: item.level,
            category: item.category.clone(),
            layer: 0,
        });
        s.current_layer_reached = 0;
        s.last_label = None;
        s.feeling_tone_prompt_at = None;
        s.latency_taken = false;
        s.stimulus_shown_at = Some(ts);
        s.log(
            ts,
            EventPayload::StimulusShown {
                event_index: s.events_completed,
                level: item.level,
                category: item.category.clone(),
                text: item.text.clone(),
            },
        );
        s.phase = Phase::ContactPresented;
        let mut action = EngineAction::new(kind, item.text);
        action.note = note;
        Ok(action)
    }

    /// Finishes the current contact, then shows the next one or closes.
    fn end_contact(&self, s: &mut SessionState, ts: u64, note: Option<String>) -> Result<EngineAction, EngineError> {
        s.settle_contact();
        s.events_completed += 1;
        if s.budget_spent() {
            s.phase = Phase::Closing;
            s.prompt(ts, PromptPurpose::Close, None);
            let text = if s.session_type == SessionType::RealWorld {
                &self.prompts.real_world_confirm
            } else {
                &self.prompts.close
            };
            let mut action = EngineAction::new(ActionKind::CloseSession, text);
            action.note = note;
            Ok(action)
        } else {
            self.present_stimulus(s, ts, ActionKind::NextContactEvent, note)
        }
    }

    fn respond(
        &self,
        mut s: SessionState,
        patient: &PatientInput,
        mismatch: EngineError,
    ) -> Result<(SessionState, EngineAction), EngineError> {
        let ts = patient.timestamp_ms;
        let prompted = s.phase.prompted_layer();
        let ctx = ClassifierContext {
            prompted_layer: prompted,
            last_zone: s.last_zone,
            consecutive_empty: s.consecutive_empty,
            session_type: s.session_type,
        };
        let mut cls = self.classifier.classify(&ctx, patient);
        // Defend the port contract even if an adapter misbehaves.
        cls.layer_depth = cls.layer_depth.min(prompted);
        let empty = patient.is_empty_or_incoherent();

        let response = EventPayload::PatientResponse {
            event_index: s.events_completed,
            choice: patient.structured_choice,
            layer_ack: patient.layer_ack,
            free_text: patient.free_text.clone(),
            self_report: patient.self_report_activation,
            empty,
        };
        let mut probe = s.events.clone();
        probe.push(SessionEvent::new(ts, response.clone()));
        let assessment = self.safety.assess_crisis(&cls, &probe);

        if !s.phase.accepts_response() && !assessment.triggered {
            return Err(mismatch);
        }

        s.log(ts, response);
        self.log_classification(&mut s, ts, prompted, &cls);
        s.consecutive_empty = if empty { s.consecutive_empty + 1 } else { 0 };
        if let Some(a) = patient.self_report_activation {
            s.closing_activation = a;
        }
        if let (Some(at), false) = (s.feeling_tone_prompt_at, s.latency_taken) {
            if s.open_contact.is_some() {
                s.latency_taken = true;
                s.latencies_ms
                    .push(latency_between(at, ts).map_err(|e| EngineError::InvalidInput(e.to_string()))?);
            }
        }

        if let Some(cause) = assessment.cause {
            s.settle_contact();
            s.crisis = Some(cause);
            s.log(ts, EventPayload::CrisisEnter { cause });
            s.phase = Phase::Crisis;
            let mut action = EngineAction::new(ActionKind::EnterCrisis, &self.prompts.crisis);
            action.steps = self.safety.grounding.steps.clone();
            action.resources = assessment.resources;
            return Ok((s, action));
        }

        s.last_zone = Some(cls.activation_zone);
        if cls.activation_zone != ActivationZone::Within {
            s.any_outside_window = true;
        }
        match cls.activation_zone {
            ActivationZone::Exceeding => {
                let reason = if patient.self_report_activation.is_some() {
                    DecisionReason::DistressReport
                } else {
                    DecisionReason::ToleranceBreach
                };
                let action = self.begin_grounding(&mut s, ts, reason);
                Ok((s, action))
            }
            ActivationZone::Approaching => {
                // Credit what was produced, but do not deepen.
                s.reach_layer(ts, cls.layer_depth);
                s.prompt(ts, PromptPurpose::Hold, Some(prompted));
                let mut action = EngineAction::new(ActionKind::ShowPrompt, &self.prompts.hold);
                action.layer = Some(s.current_layer_reached);
                Ok((s, action))
            }
            ActivationZone::Within => {
                let action = self.advance_within(&mut s, ts, patient, &cls)?;
                Ok((s, action))
            }
        }
    }

    fn log_classification(&self, s: &mut SessionState, ts: u64, prompted: u8, cls: &ResponseClassification) {
        let event_index = s.events_completed;
        s.log(
            ts,
            EventPayload::Classification {
                event_index,
                prompted_layer: prompted,
                layer_depth: cls.layer_depth,
                zone: cls.activation_zone,
                crisis: cls.crisis,
                confidence: cls.confidence,
                matched: cls.matched.iter().map(|h| h.entry.clone()).collect(),
            },
        );
    }

    fn advance_within(
        &self,
        s: &mut SessionState,
        ts: u64,
        patient: &PatientInput,
        cls: &ResponseClassification,
    ) -> Result<EngineAction, EngineError> {
        match s.phase {
            Phase::AwaitingFeelingTone => {
                if cls.layer_depth.max(s.current_layer_reached) == 0 {
                    s.prompt(ts, PromptPurpose::MissedGap, None);
                    return self.end_contact(s, ts, Some(self.prompts.missed_gap.clone()));
                }
                s.reach_layer(ts, 1);
                if s.session_type == SessionType::RealWorld {
                    return self.end_contact(s, ts, None);
                }
                s.last_label = label_of(patient, cls);
                let ctx = PromptContext {
                    label: s.last_label.clone(),
                };
                s.prompt(ts, PromptPurpose::Layer1Confirm, Some(1));
                s.phase = Phase::Layer1;
                let mut action = EngineAction::new(ActionKind::AdvanceLayer, render_prompt(&self.prompts, 1, None, &ctx));
                action.layer = Some(1);
                Ok(action)
            }
            Phase::Layer1 => {
                // Layer-2 gate: Layer 1 reached on this contact.
                s.prompt(ts, PromptPurpose::Decentering, Some(2));
                s.phase = Phase::Layer2;
                let mut action = EngineAction::new(
                    ActionKind::AdvanceLayer,
                    render_prompt(&self.prompts, 2, None, &PromptContext::default()),
                );
                action.layer = Some(2);
                Ok(action)
            }
            Phase::Layer2 => {
                if cls.layer_depth >= 2 {
                    s.reach_layer(ts, 2);
                }
                if s.current_layer_reached >= 2 && self.layer3_gate_open(s) {
                    s.prompt(ts, PromptPurpose::BeliefInquiry, Some(3));
                    s.phase = Phase::Layer3;
                    let mut action = EngineAction::new(
                        ActionKind::AdvanceLayer,
                        render_prompt(&self.prompts, 3, None, &PromptContext::default()),
                    );
                    action.layer = Some(3);
                    return Ok(action);
                }
                self.end_contact(s, ts, None)
            }
            Phase::Layer3 => {
                s.reach_layer(ts, cls.layer_depth);
                self.end_contact(s, ts, None)
            }
            phase => unreachable!("response accepted in phase {phase}"),
        }
    }

    pub fn layer3_gate_open(&self, s: &SessionState) -> bool {
        s.session_type != SessionType::RealWorld && s.prior_layer2_sessions >= self.config.layer3_prior_sessions
    }

    fn begin_grounding(&self, s: &mut SessionState, ts: u64, reason: DecisionReason) -> EngineAction {
        s.settle_contact();
        s.events_completed += 1;
        s.grounding_cycles += 1;
        s.grounding_step = 1;
        s.log(
            ts,
            EventPayload::GroundingStep {
                cycle: s.grounding_cycles,
                step: 1,
            },
        );
        // A real-world session has no ladder stimulus to step back from.
        if s.session_type != SessionType::RealWorld {
            let from = s.stimulus_level;
            let to = from.saturating_sub(1).max(MIN_LEVEL);
            s.stimulus_level = to;
            s.step_back_count += 1;
            s.log(
                ts,
                EventPayload::StepBack {
                    from_level: from,
                    to_level: to,
                    reason,
                },
            );
        }
        s.phase = Phase::Grounding;
        let mut action = EngineAction::new(ActionKind::BeginGrounding, self.safety.grounding.step(1).unwrap_or_default());
        action.grounding_step = Some(1);
        action
    }

    fn grounding_ack(&self, s: &mut SessionState, ts: u64) -> Result<EngineAction, EngineError> {
        if s.grounding_step < self.safety.grounding.len() {
            s.grounding_step += 1;
            let step = s.grounding_step;
            s.log(
                ts,
                EventPayload::GroundingStep {
                    cycle: s.grounding_cycles,
                    step,
                },
            );
            let mut action = EngineAction::new(ActionKind::ShowPrompt, self.safety.grounding.step(step).unwrap_or_default());
            action.grounding_step = Some(step);
            return Ok(action);
        }
        s.grounding_step = 0;
        s.last_zone = None;
        if s.grounding_cycles >= self.safety.max_grounding_cycles || s.budget_spent() {
            s.phase = Phase::Closing;
            s.prompt(ts, PromptPurpose::Close, None);
            return Ok(EngineAction::new(ActionKind::CloseSession, &self.prompts.close));
        }
        self.present_stimulus(s, ts, ActionKind::NextContactEvent, None)
    }
}

/// What to echo back at Layer 1: the first lexicon label, else the choice.
fn label_of(patient: &PatientInput, cls: &ResponseClassification) -> Option<String> {
    cls.matched
        .iter()
        .find(|h| h.axis == crate::elicitation::LexiconAxis::FeelingTone)
        .map(|h| h.entry.clone())
        .or_else(|| patient.structured_choice.map(|c| c.as_str().to_string()))
}
