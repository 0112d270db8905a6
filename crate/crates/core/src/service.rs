//! Request handlers behind the local HTTP API.
//!
//! Handlers are transport-free: the CLI crate binds them to loopback HTTP,
//! and the simulator calls them in-process. Every state-changing handler
//! writes its events to the store before it returns.

use crate::elicitation::{ClassifierPort, RuleClassifier, ZoneThresholds};
use crate::engine::{EngineAction, EngineConfig, EngineError, Phase, ProtocolEngine, SessionContext, StartRequest, StepInput};
use crate::events::{EventPayload, SessionEvent, SessionRecord};
use crate::ladder::{
    apply_decision, build_ladder, evaluate_advancement, record_session_outcome, regress, DecisionReason, LadderAction,
    LadderDecision, LadderError, LadderPosition, PatientProfile, PositionEntry, StimulusLadder, TemplateSet,
};
use crate::progress::{
    compute_proxies, evaluate_maintenance, generate_monthly_summary_with, month_of, months_covered, FunctioningReport,
    MaintenanceDecision, MaintenanceThresholds, MonthlySummary, ProgressError, ProxyReport,
};
use crate::safety::{ResourceConfig, SafetyPolicy};
use crate::store::{export_summary, write_export, ConsentChallenge, ConsentGate, EventStore, ExportError, RecordRange, StoreError};
use crate::types::{day_index, SessionType};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use thiserror::Error;

/// Error with the HTTP status the binding should answer with.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[error("{status} {code}: {message}")]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
        }
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(404, "unknown_session", format!("no open session `{id}`"))
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (status, code) = match &e {
            EngineError::SessionAlreadyOpen => (409, "session_open"),
            EngineError::InvalidActivation(_) => (422, "invalid_checkin"),
            EngineError::PhaseMismatch { .. } => (409, "phase_mismatch"),
            EngineError::InvalidInput(_) => (422, "invalid_input"),
            EngineError::NonMonotonicTimestamp { .. } => (422, "non_monotonic_timestamp"),
            EngineError::PauseNotElapsed { .. } => (409, "pause_not_elapsed"),
            EngineError::NotClosable(_) => (409, "not_closable"),
            EngineError::NoStimulus(_) => (500, "ladder_incomplete"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::StoreLocked => Self::new(423, "store_locked", e.to_string()),
            _ => Self::new(500, "store_error", e.to_string()),
        }
    }
}

impl From<ExportError> for ApiError {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::NoConsent => Self::new(403, "no_consent", e.to_string()),
            ExportError::EmptySummaries => Self::new(204, "no_data", e.to_string()),
            ExportError::Io(_) => Self::new(500, "export_failed", e.to_string()),
        }
    }
}

impl From<ProgressError> for ApiError {
    fn from(e: ProgressError) -> Self {
        match e {
            ProgressError::EmptyRecords | ProgressError::EmptyMonth(_) => Self::new(204, "no_data", e.to_string()),
            _ => Self::new(422, "invalid_query", e.to_string()),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Ladder(#[from] LadderError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("refusing to bind non-loopback address {0}")]
    NonLoopbackBind(String),
}

/// Service configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub profile: PatientProfile,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub zones: ZoneThresholds,
    #[serde(default)]
    pub maintenance: MaintenanceThresholds,
    #[serde(default = "default_window")]
    pub window_days: u32,
}

fn default_window() -> u32 {
    7
}

impl ServiceConfig {
    pub fn from_json(json: &str) -> Result<Self, ServiceError> {
        let cfg: ServiceConfig = serde_json::from_str(json).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.profile.validate()?;
        if cfg.window_days < crate::progress::MIN_WINDOW_DAYS {
            return Err(ServiceError::Config(format!("window_days {} below 7", cfg.window_days)));
        }
        Ok(cfg)
    }
}

/// Accepts only loopback socket addresses.
pub fn ensure_loopback(addr: &str) -> Result<SocketAddr, ServiceError> {
    let parsed: SocketAddr = addr.parse().map_err(|_| ServiceError::NonLoopbackBind(addr.to_string()))?;
    let loopback = match parsed.ip() {
        IpAddr::V4(ip) => ip.is_loopback(),
        IpAddr::V6(ip) => ip.is_loopback(),
    };
    if loopback {
        Ok(parsed)
    } else {
        Err(ServiceError::NonLoopbackBind(addr.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkin {
    pub activation: f64,
    #[serde(default)]
    pub body_markers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSessionRequest {
    pub session_type: SessionType,
    pub checkin: Checkin,
    pub timestamp_ms: u64,
}

/// What the UI may know about a live session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub session_type: SessionType,
    pub phase: Phase,
    pub stimulus_level: u8,
    pub events_completed: u32,
    pub event_budget: u32,
    pub current_layer_reached: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSessionResponse {
    pub session_id: String,
    pub first_action: EngineAction,
    pub state: StateSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondResponse {
    pub next_action: EngineAction,
    pub state: StateSummary,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CloseRequest {
    pub timestamp_ms: u64,
    /// Answer to the weekly functioning question, if it was asked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functioning_improved: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderUpdateView {
    pub action: LadderAction,
    pub from_level: u8,
    pub to_level: u8,
    pub reason: DecisionReason,
    pub counted: bool,
    pub consecutive_stable: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseResponse {
    pub record: SessionRecord,
    pub ladder: LadderUpdateView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressResponse {
    pub current_daily_level: u8,
    pub report: ProxyReport,
    pub months: Vec<MonthlySummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maintenance: Option<MaintenanceDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRequest {
    pub challenge_id: String,
    /// The consent phrase as typed by the patient.
    pub confirmation: String,
    pub recipient_label: String,
    /// Patient-chosen destination. Existing files are never overwritten.
    pub path: PathBuf,
    /// Program months to include; all months when absent.
    #[serde(default)]
    pub months: Option<Vec<u32>>,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub path: PathBuf,
    pub bytes: usize,
    pub months: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub store_sequence: u64,
    pub open_session: bool,
}

/// The open session of the single local patient.
#[derive(Debug, Clone)]
pub struct ApiSession {
    pub session_id: String,
    pub patient_id: String,
    pub state: crate::engine::SessionState,
    persisted: usize,
}

pub struct SessionService<C: ClassifierPort = RuleClassifier> {
    engine: ProtocolEngine<C>,
    config: ServiceConfig,
    ladder: StimulusLadder,
    position: LadderPosition,
    store: EventStore,
    records: Vec<SessionRecord>,
    open: Option<ApiSession>,
    consent: ConsentGate,
    next_id: u64,
}

impl SessionService<RuleClassifier> {
    pub fn new(config: ServiceConfig, templates: &TemplateSet, store: EventStore) -> Result<Self, ServiceError> {
        let classifier = RuleClassifier::new(Default::default(), config.zones);
        Self::with_classifier(config, templates, store, classifier, ResourceConfig::default())
    }
}

impl<C: ClassifierPort> SessionService<C> {
    pub fn with_classifier(
        config: ServiceConfig,
        templates: &TemplateSet,
        store: EventStore,
        classifier: C,
        resources: ResourceConfig,
    ) -> Result<Self, ServiceError> {
        config.profile.validate()?;
        let ladder = build_ladder(&config.profile, templates)?;
        let mut engine = ProtocolEngine::new(config.engine, classifier);
        engine.safety = SafetyPolicy {
            resources,
            ..SafetyPolicy::default()
        };
        let snapshot = store.snapshot()?;
        let records = snapshot.records(RecordRange::ALL);
        let position = rebuild_position(&snapshot.envelopes.iter().map(|e| (e.session_id.as_str(), &e.event)).collect::<Vec<_>>());
        let next_id = snapshot.sessions().len() as u64 + 1;
        Ok(Self {
            engine,
            config,
            ladder,
            position,
            store,
            records,
            open: None,
            consent: ConsentGate::new(),
            next_id,
        })
    }

    pub fn position(&self) -> &LadderPosition {
        &self.position
    }

    pub fn records(&self) -> &[SessionRecord] {
        &self.records
    }

    pub fn store(&self) -> &EventStore {
        &self.store
    }

    pub fn into_store(self) -> EventStore {
        self.store
    }

    pub fn open_session(&self) -> Option<&ApiSession> {
        self.open.as_ref()
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn summary(state: &crate::engine::SessionState) -> StateSummary {
        StateSummary {
            session_type: state.session_type,
            phase: state.phase,
            stimulus_level: state.stimulus_level,
            events_completed: state.events_completed,
            event_budget: state.event_budget,
            current_layer_reached: state.current_layer_reached,
        }
    }

    fn persist(&mut self, session_id: &str, events: &[SessionEvent]) -> Result<(), ApiError> {
        for ev in events {
            self.store.append_event(session_id, ev.clone())?;
        }
        Ok(())
    }

    pub fn handle_start(&mut self, req: StartSessionRequest) -> Result<StartSessionResponse, ApiError> {
        if self.store.is_locked() {
            return Err(StoreError::StoreLocked.into());
        }
        let session_id = format!("S{:06}", self.next_id);
        let ctx = SessionContext {
            ladder: &self.ladder,
            position: &self.position,
            prior_records: &self.records,
            has_open_session: self.open.is_some(),
        };
        let (state, action) = self.engine.start_session(
            ctx,
            StartRequest {
                session_id: session_id.clone(),
                session_type: req.session_type,
                checkin_activation: req.checkin.activation,
                body_markers: req.checkin.body_markers,
                timestamp_ms: req.timestamp_ms,
            },
        )?;
        self.persist(&session_id, &state.events)?;
        self.next_id += 1;
        let response = StartSessionResponse {
            session_id: session_id.clone(),
            first_action: action,
            state: Self::summary(&state),
        };
        self.open = Some(ApiSession {
            session_id,
            patient_id: self.config.profile.patient_id.clone(),
            persisted: state.events.len(),
            state,
        });
        Ok(response)
    }

    fn open_mut(&mut self, session_id: &str) -> Result<&mut ApiSession, ApiError> {
        match self.open.as_mut() {
            Some(s) if s.session_id == session_id => Ok(s),
            _ => Err(ApiError::unknown_session(session_id)),
        }
    }

    pub fn handle_respond(&mut self, session_id: &str, input: StepInput) -> Result<RespondResponse, ApiError> {
        let current = self.open_mut(session_id)?.state.clone();
        let (state, action) = self.engine.next_step(&current, &input)?;
        let persisted = self.open_mut(session_id)?.persisted;
        self.persist(session_id, &state.events[persisted..])?;
        let session = self.open_mut(session_id)?;
        session.persisted = state.events.len();
        let response = RespondResponse {
            next_action: action,
            state: Self::summary(&state),
        };
        session.state = state;
        Ok(response)
    }

    pub fn handle_close(&mut self, session_id: &str, req: CloseRequest) -> Result<CloseResponse, ApiError> {
        let current = self.open_mut(session_id)?.state.clone();
        let (state, record) = self.engine.close_session(&current, req.timestamp_ms)?;
        let persisted = self.open_mut(session_id)?.persisted;
        self.persist(session_id, &state.events[persisted..])?;
        self.open = None;

        let ts = req.timestamp_ms;
        if let Some(improved) = req.functioning_improved {
            self.persist(session_id, &[SessionEvent::new(ts, EventPayload::FunctioningReported { improved })])?;
        }
        let view = self.update_ladder(&state.events, &record);
        self.persist(
            session_id,
            &[SessionEvent::new(
                ts,
                EventPayload::LadderUpdate {
                    action: view.action,
                    from_level: view.from_level,
                    to_level: view.to_level,
                    reason: view.reason,
                    counted: view.counted,
                    consecutive_stable: view.consecutive_stable,
                },
            )],
        )?;
        self.records.push(record.clone());
        Ok(CloseResponse { record, ladder: view })
    }

    /// Applies the ladder rules for a closed session.
    ///
    /// Any step-back regresses the daily level, whatever the session type.
    /// Only daily sessions feed the stable-session run. A crisis ends the
    /// run but does not regress on its own.
    fn update_ladder(&mut self, events: &[SessionEvent], record: &SessionRecord) -> LadderUpdateView {
        let from = self.position.current_daily_level;
        let counted = record.session_type == SessionType::Daily && record.stimulus_level == from;
        let mut pos = self.position.clone();
        if counted {
            pos = record_session_outcome(&pos, &record.outcome()).expect("level checked above");
        }
        let decision = if record.step_back_count > 0 {
            let reason = events
                .iter()
                .find_map(|e| match e.payload {
                    EventPayload::StepBack { reason, .. } => Some(reason),
                    _ => None,
                })
                .unwrap_or(DecisionReason::ToleranceBreach);
            regress(&pos, reason)
        } else if counted {
            evaluate_advancement(&pos)
        } else {
            LadderDecision {
                action: LadderAction::Hold,
                new_level: from,
                reason: DecisionReason::NotCounted,
            }
        };
        pos = apply_decision(&pos, &decision);
        self.position = pos;
        LadderUpdateView {
            action: decision.action,
            from_level: from,
            to_level: self.position.current_daily_level,
            reason: decision.reason,
            counted,
            consecutive_stable: self.position.consecutive_stable_sessions,
        }
    }

    fn functioning_reports(&self) -> Result<Vec<FunctioningReport>, ApiError> {
        let Some(first) = self.records.first() else {
            return Ok(Vec::new());
        };
        let origin = day_index(first.opened_at);
        let mut latest: HashMap<u32, bool> = HashMap::new();
        for env in self.store.envelopes()? {
            if let EventPayload::FunctioningReported { improved } = env.event.payload {
                latest.insert(month_of(origin, env.event.timestamp_ms), improved);
            }
        }
        let mut out: Vec<FunctioningReport> = latest
            .into_iter()
            .map(|(month, improved)| FunctioningReport { month, improved })
            .collect();
        out.sort_by_key(|r| r.month);
        Ok(out)
    }

    pub fn monthly_summaries(&self) -> Result<Vec<MonthlySummary>, ApiError> {
        let months = months_covered(&self.records);
        let mut out = Vec::new();
        for m in 1..=months {
            match generate_monthly_summary_with(&self.records, m, &self.config.maintenance) {
                Ok(s) => out.push(s),
                Err(ProgressError::EmptyMonth(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }

    pub fn handle_progress(&self, window_days: Option<u32>) -> Result<ProgressResponse, ApiError> {
        if self.store.is_locked() {
            return Err(StoreError::StoreLocked.into());
        }
        let report = compute_proxies(&self.records, window_days.unwrap_or(self.config.window_days))?;
        let maintenance = evaluate_maintenance(&self.records, &self.functioning_reports()?, &self.config.maintenance).ok();
        Ok(ProgressResponse {
            current_daily_level: self.position.current_daily_level,
            report,
            months: self.monthly_summaries()?,
            maintenance,
        })
    }

    pub fn handle_consent_request(&mut self) -> ConsentChallenge {
        self.consent.request()
    }

    pub fn handle_export(&mut self, req: ExportRequest) -> Result<ExportResponse, ApiError> {
        let token = self.consent.confirm(&req.challenge_id, &req.confirmation)?;
        let mut summaries = self.monthly_summaries()?;
        if let Some(months) = &req.months {
            summaries.retain(|s| months.contains(&s.month));
        }
        let bytes = export_summary(&mut self.consent, Some(&token), &req.recipient_label, &summaries, req.timestamp_ms)?;
        write_export(&req.path, &bytes)?;
        Ok(ExportResponse {
            path: req.path,
            bytes: bytes.len(),
            months: summaries.iter().map(|s| s.month).collect(),
        })
    }

    pub fn health(&self) -> Health {
        Health {
            status: if self.store.is_locked() { "locked" } else { "ok" }.into(),
            store_sequence: self.store.last_sequence(),
            open_session: self.open.is_some(),
        }
    }
}

/// Replays ladder bookkeeping events into a position.
pub fn rebuild_position(events: &[(&str, &SessionEvent)]) -> LadderPosition {
    let mut pos = LadderPosition::default();
    let mut stable_by_session: HashMap<&str, bool> = HashMap::new();
    for (id, ev) in events {
        match ev.payload {
            EventPayload::SessionClosed { stable, .. } => {
                stable_by_session.insert(id, stable);
            }
            EventPayload::LadderUpdate {
                from_level,
                to_level,
                counted,
                consecutive_stable,
                ..
            } => {
                if counted {
                    pos.history.push(PositionEntry {
                        session_id: id.to_string(),
                        level: from_level,
                        stable: stable_by_session.get(id).copied().unwrap_or(false),
                    });
                }
                pos.current_daily_level = to_level;
                pos.consecutive_stable_sessions = consecutive_stable;
            }
            _ => {}
        }
    }
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elicitation::PatientInput;
    use crate::ladder::{PriorPractice, Trigger};
    use crate::store::KdfParams;
    use crate::types::FeelingTone;

    fn config() -> ServiceConfig {
        ServiceConfig {
            profile: PatientProfile {
                patient_id: "p1".into(),
                trauma_domain: "combat".into(),
                triggers: vec![Trigger::new("loud sounds", 9)],
                avoidance_patterns: vec![],
                prior_practice: PriorPractice::None,
                baseline_severity: 40,
            },
            engine: EngineConfig::default(),
            zones: ZoneThresholds::default(),
            maintenance: MaintenanceThresholds::default(),
            window_days: 7,
        }
    }

    fn service() -> SessionService {
        let store = EventStore::in_memory("pw", KdfParams::insecure_fast()).unwrap();
        SessionService::new(config(), &TemplateSet::default(), store).unwrap()
    }

    fn start(svc: &mut SessionService, activation: f64) -> Result<StartSessionResponse, ApiError> {
        svc.handle_start(StartSessionRequest {
            session_type: SessionType::Daily,
            checkin: Checkin {
                activation,
                body_markers: vec![],
            },
            timestamp_ms: 1_000,
        })
    }

    #[test]
    fn start_conflict_and_invalid_checkin() {
        let mut svc = service();
        assert_eq!(start(&mut svc, -1.0).unwrap_err().status, 422);
        let first = start(&mut svc, 6.8).unwrap();
        assert_eq!(first.first_action.kind, crate::engine::ActionKind::ShowPrompt);
        assert_eq!(first.state.phase, Phase::Settling);
        assert_eq!(start(&mut svc, 5.0).unwrap_err().status, 409);
    }

    #[test]
    fn respond_persists_and_crisis_carries_resources() {
        let mut svc = service();
        let id = start(&mut svc, 5.0).unwrap().session_id;
        let before = svc.store().last_sequence();
        let r = svc
            .handle_respond(
                &id,
                StepInput::Respond(PatientInput {
                    timestamp_ms: 2_000,
                    self_report_activation: Some(10.0),
                    ..Default::default()
                }),
            )
            .unwrap();
        assert_eq!(r.next_action.kind, crate::engine::ActionKind::EnterCrisis);
        assert!(!r.next_action.resources.is_empty());
        assert!(svc.store().last_sequence() > before);
        let closed = svc.handle_close(&id, CloseRequest { timestamp_ms: 3_000, ..Default::default() }).unwrap();
        assert!(closed.record.crisis);
        assert_eq!(closed.ladder.to_level, 1);
        let err = svc
            .handle_respond(
                &id,
                StepInput::Respond(PatientInput {
                    timestamp_ms: 4_000,
                    structured_choice: Some(FeelingTone::Neutral),
                    ..Default::default()
                }),
            )
            .unwrap_err();
        assert_eq!(err.status, 404);
    }

    #[test]
    fn empty_progress_is_204_and_export_needs_consent() {
        let mut svc = service();
        assert_eq!(svc.handle_progress(None).unwrap_err().status, 204);
        let err = svc
            .handle_export(ExportRequest {
                challenge_id: "made-up".into(),
                confirmation: crate::store::CONSENT_PHRASE.into(),
                recipient_label: "clinic".into(),
                path: std::env::temp_dir().join("never-written.json"),
                months: None,
                timestamp_ms: 0,
            })
            .unwrap_err();
        assert_eq!(err.status, 403);
    }

    #[test]
    fn loopback_guard() {
        assert!(ensure_loopback("127.0.0.1:8080").is_ok());
        assert!(ensure_loopback("[::1]:8080").is_ok());
        assert!(ensure_loopback("0.0.0.0:8080").is_err());
        assert!(ensure_loopback("192.168.1.4:8080").is_err());
        assert!(ensure_loopback("localhost:8080").is_err());
    }
}
