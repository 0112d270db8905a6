//! Session event trail and the fold that turns it into a [`SessionRecord`].
//!
//! Events are the only persisted session data. Records, ladder positions and
//! progress proxies are all derived from them.

use crate::ladder::{DecisionReason, LadderAction};
use crate::types::{ActivationZone, CrisisCause, FeelingTone, LayerAck, SessionType};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl SessionEvent {
    pub fn new(timestamp_ms: u64, payload: EventPayload) -> Self {
        Self { timestamp_ms, payload }
    }

    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }
}

/// Why a prompt was shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPurpose {
    Settling,
    WeekSummary,
    RealWorldOpen,
    FeelingTone,
    Layer1Confirm,
    Decentering,
    BeliefInquiry,
    Hold,
    MissedGap,
    Close,
    Crisis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventPayload {
    Checkin {
        session_type: SessionType,
        stimulus_level: u8,
        daily_level: u8,
        activation: f64,
        #[serde(default)]
        body_markers: Vec<String>,
        event_budget: u32,
    },
    SettleStart,
    StimulusShown {
        event_index: u32,
        level: u8,
        category: String,
        text: String,
    },
    PromptShown {
        purpose: PromptPurpose,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layer_target: Option<u8>,
    },
    PatientResponse {
        event_index: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        choice: Option<FeelingTone>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layer_ack: Option<LayerAck>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        free_text: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        self_report: Option<f64>,
        empty: bool,
    },
    Classification {
        event_index: u32,
        prompted_layer: u8,
        layer_depth: u8,
        zone: ActivationZone,
        crisis: bool,
        confidence: f64,
        #[serde(default)]
        matched: Vec<String>,
    },
    StepBack {
        from_level: u8,
        to_level: u8,
        reason: DecisionReason,
    },
    GroundingStep {
        cycle: u32,
        step: u8,
    },
    CrisisEnter {
        cause: CrisisCause,
    },
    LayerReached {
        event_index: u32,
        layer: u8,
    },
    SessionClosed {
        stable: bool,
        max_layer: u8,
        completed: bool,
    },
    /// Patient's answer to the functioning question asked at weekly review.
    FunctioningReported { improved: bool },
    /// Ladder bookkeeping written by the service after a session closes.
    LadderUpdate {
        action: LadderAction,
        from_level: u8,
        to_level: u8,
        reason: DecisionReason,
        /// Whether the session counted toward the stable-session run.
        counted: bool,
        consecutive_stable: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Checkin,
    SettleStart,
    StimulusShown,
    PromptShown,
    PatientResponse,
    Classification,
    StepBack,
    GroundingStep,
    CrisisEnter,
    LayerReached,
    SessionClosed,
    FunctioningReported,
    LadderUpdate,
}

impl EventKind {
    /// Service bookkeeping written after `session_closed`.
    pub fn is_post_close(self) -> bool {
        matches!(self, EventKind::FunctioningReported | EventKind::LadderUpdate)
    }
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::Checkin { .. } => EventKind::Checkin,
            EventPayload::SettleStart => EventKind::SettleStart,
            EventPayload::StimulusShown { .. } => EventKind::StimulusShown,
            EventPayload::PromptShown { .. } => EventKind::PromptShown,
            EventPayload::PatientResponse { .. } => EventKind::PatientResponse,
            EventPayload::Classification { .. } => EventKind::Classification,
            EventPayload::StepBack { .. } => EventKind::StepBack,
            EventPayload::GroundingStep { .. } => EventKind::GroundingStep,
            EventPayload::CrisisEnter { .. } => EventKind::CrisisEnter,
            EventPayload::LayerReached { .. } => EventKind::LayerReached,
            EventPayload::SessionClosed { .. } => EventKind::SessionClosed,
            EventPayload::FunctioningReported { .. } => EventKind::FunctioningReported,
            EventPayload::LadderUpdate { .. } => EventKind::LadderUpdate,
        }
    }
}

/// Per contact event outcome inside a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactOutcome {
    pub level: u8,
    pub category: String,
    pub layer: u8,
}

/// Summary of one closed session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub session_type: SessionType,
    pub stimulus_level: u8,
    pub opened_at: u64,
    pub closed_at: u64,
    pub stable: bool,
    pub max_layer_reached: u8,
    pub opening_activation: f64,
    pub closing_activation: f64,
    pub step_back_count: u32,
    pub crisis: bool,
    /// The full contact-event budget was worked through.
    pub completed: bool,
    /// Feeling-tone recognition latency per contact event.
    pub latencies_ms: Vec<u64>,
    pub contacts: Vec<ContactOutcome>,
}

impl SessionRecord {
    pub fn outcome(&self) -> crate::ladder::SessionOutcome {
        crate::ladder::SessionOutcome {
            session_id: self.session_id.clone(),
            level: self.stimulus_level,
            stable: self.stable,
        }
    }

    /// Stability: the whole budget was worked, every contact event reached at
    /// least Layer 1, every classification stayed within the window, and the
    /// session saw no step-back and no crisis.
    pub fn is_stable(
        completed: bool,
        contacts: &[ContactOutcome],
        all_within: bool,
        step_backs: u32,
        crisis: bool,
    ) -> bool {
        completed
            && !crisis
            && step_backs == 0
            && all_within
            && !contacts.is_empty()
            && contacts.iter().all(|c| c.layer >= 1)
    }

    /// Rebuilds a record from a session's raw events. Returns `None` if the
    /// events do not describe a closed session.
    pub fn from_events(session_id: &str, events: &[SessionEvent]) -> Option<SessionRecord> {
        struct Open {
            contact: ContactOutcome,
            prompt_at: Option<u64>,
            latency_taken: bool,
        }

        let mut checkin = None;
        let mut contacts: Vec<ContactOutcome> = Vec::new();
        let mut current: Option<Open> = None;
        let mut latencies = Vec::new();
        let mut all_within = true;
        let mut step_backs = 0;
        let mut crisis = false;
        let mut closing = None;
        let mut closed = None;

        for ev in events {
            match &ev.payload {
                EventPayload::Checkin {
                    session_type,
                    stimulus_level,
                    activation,
                    ..
                } => checkin = Some((*session_type, *stimulus_level, *activation, ev.timestamp_ms)),
                EventPayload::StimulusShown { level, category, .. } => {
                    if let Some(open) = current.take() {
                        contacts.push(open.contact);
                    }
                    current = Some(Open {
                        contact: ContactOutcome {
                            level: *level,
                            category: category.clone(),
                            layer: 0,
                        },
                        prompt_at: None,
                        latency_taken: false,
                    });
                }
                EventPayload::PromptShown {
                    purpose: PromptPurpose::FeelingTone,
                    ..
                } => {
                    if let Some(open) = current.as_mut() {
                        if open.prompt_at.is_none() {
                            open.prompt_at = Some(ev.timestamp_ms);
                        }
                    }
                }
                EventPayload::PatientResponse { self_report, .. } => {
                    if let Some(a) = self_report {
                        closing = Some(*a);
                    }
                    if let Some(open) = current.as_mut() {
                        if let (Some(at), false) = (open.prompt_at, open.latency_taken) {
                            open.latency_taken = true;
                            latencies.push(ev.timestamp_ms.saturating_sub(at));
                        }
                    }
                }
                EventPayload::Classification { zone, .. } => {
                    if *zone != ActivationZone::Within {
                        all_within = false;
                    }
                }
                EventPayload::LayerReached { layer, .. } => {
                    if let Some(open) = current.as_mut() {
                        open.contact.layer = open.contact.layer.max(*layer);
                    }
                }
                EventPayload::GroundingStep { step: 1, .. } => {
                    if let Some(open) = current.take() {
                        contacts.push(open.contact);
                    }
                }
                EventPayload::StepBack { .. } => step_backs += 1,
                EventPayload::CrisisEnter { .. } => crisis = true,
                EventPayload::SessionClosed { completed, .. } => closed = Some((*completed, ev.timestamp_ms)),
                _ => {}
            }
        }
        if let Some(open) = current.take() {
            contacts.push(open.contact);
        }

        let (session_type, level, opening, opened_at) = checkin?;
        let (completed, closed_at) = closed?;
        let stable = Self::is_stable(completed, &contacts, all_within, step_backs, crisis);
        Some(SessionRecord {
            session_id: session_id.to_string(),
            session_type,
            stimulus_level: level,
            opened_at,
            closed_at,
            stable,
            max_layer_reached: contacts.iter().map(|c| c.layer).max().unwrap_or(0),
            opening_activation: opening,
            closing_activation: closing.unwrap_or(opening),
            step_back_count: step_backs,
            crisis,
            completed,
            latencies_ms: latencies,
            contacts,
        })
    }
}
