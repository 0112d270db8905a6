//! Scripted-patient harness.
//!
//! A [`PatientScript`] describes how a simulated patient answers each prompt,
//! week by week. [`run_scenario`] drives the real [`SessionService`] handlers
//! in-process over an in-memory store and reports the resulting trajectory
//! together with every invariant violation found in the raw event log.

use crate::elicitation::PatientInput;
use crate::engine::{Phase, StepInput};
use crate::events::{EventKind, EventPayload, PromptPurpose, SessionEvent, SessionRecord};
use crate::ladder::{LadderAction, PatientProfile, TemplateSet, MAX_DAILY_LEVEL, MAX_LEVEL, MIN_LEVEL, STABLE_SESSIONS_TO_ADVANCE};
use crate::progress::{compute_proxies, generate_monthly_summary, months_covered};
use crate::service::{ApiError, Checkin, CloseRequest, ServiceConfig, SessionService, StartSessionRequest};
use crate::store::{EventStore, KdfParams, RecordRange, StoreError};
use crate::types::{day_index, FeelingTone, LayerAck, SessionType, DAY_MS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("script `{script}` has no response for week {week} slot {slot}: {detail}")]
    ScriptGap {
        script: String,
        week: u32,
        slot: usize,
        detail: String,
    },
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("service rejected a scripted step: {0}")]
    Api(#[from] ApiError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub daily_per_week: u32,
    pub weekly_per_week: u32,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            daily_per_week: 7,
            weekly_per_week: 1,
        }
    }
}

impl Schedule {
    pub fn slots(&self) -> usize {
        (self.daily_per_week + self.weekly_per_week) as usize
    }
}

/// Reply texts chosen to steer clear of unintended lexicon matches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTexts {
    /// Said when the reaction was already under way before noticing.
    pub missed: String,
    /// Layer-1 confirmation.
    pub ack: String,
    pub layer2: String,
    pub layer3: String,
    /// Reply that does not reach the prompted layer.
    pub shallow: String,
}

/// One scripted reply outside the regular policy.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptedInput {
    #[serde(default)]
    pub choice: Option<FeelingTone>,
    #[serde(default)]
    pub layer_ack: Option<LayerAck>,
    #[serde(default)]
    pub free_text: Option<String>,
    #[serde(default)]
    pub self_report: Option<f64>,
    #[serde(default = "default_delay")]
    pub delay_ms: u64,
}

fn default_delay() -> u64 {
    4_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealWorldEvent {
    /// Day of the week, 0 to 6.
    pub day: u32,
    pub checkin: f64,
    /// Replies in order, one per prompt.
    pub responses: Vec<ScriptedInput>,
}

/// How the patient behaves during one week. Slot lists index the week's
/// sessions: dailies first, then weekly deep sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekPolicy {
    pub opening_activation: f64,
    /// Self-report attached to in-session replies; defaults to the opening.
    #[serde(default)]
    pub contact_activation: Option<f64>,
    pub feeling_tone: FeelingTone,
    /// Delay from the feeling-tone prompt to the reply.
    pub latency_ms: u64,
    /// Deepest layer reached per slot.
    pub depth: Vec<u8>,
    /// Slots whose first contact is noticed only after the reaction.
    #[serde(default)]
    pub missed_gap: Vec<usize>,
    /// Slots whose first reply approaches the tolerance boundary.
    #[serde(default)]
    pub approach: Vec<usize>,
    /// Slots whose first reply exceeds the window.
    #[serde(default)]
    pub exceed: Vec<usize>,
    /// Slots whose first reply reports maximum activation.
    #[serde(default)]
    pub crisis: Vec<usize>,
    #[serde(default)]
    pub real_world: Vec<RealWorldEvent>,
    /// Answer to the functioning question at the weekly session.
    #[serde(default)]
    pub functioning_improved: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientScript {
    pub name: String,
    pub profile: PatientProfile,
    #[serde(default)]
    pub schedule: Schedule,
    pub texts: ScriptTexts,
    #[serde(default)]
    pub weeks: Vec<WeekPolicy>,
    /// Used for weeks past the end of `weeks`.
    #[serde(default)]
    pub default_week: Option<WeekPolicy>,
}

impl PatientScript {
    pub fn from_json(json: &str) -> Result<Self, SimError> {
        let script: PatientScript = serde_json::from_str(json).map_err(|e| SimError::InvalidScript(e.to_string()))?;
        script
            .profile
            .validate()
            .map_err(|e| SimError::InvalidScript(e.to_string()))?;
        Ok(script)
    }

    pub fn marcus() -> Self {
        Self::from_json(crate::data::MARCUS_SCRIPT).expect("bundled script is valid")
    }

    pub fn crisis_prone() -> Self {
        Self::from_json(crate::data::CRISIS_PRONE_SCRIPT).expect("bundled script is valid")
    }

    pub fn plateau() -> Self {
        Self::from_json(crate::data::PLATEAU_SCRIPT).expect("bundled script is valid")
    }

    /// Bundled script by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "marcus" => Some(Self::marcus()),
            "crisis_prone" => Some(Self::crisis_prone()),
            "plateau" => Some(Self::plateau()),
            _ => None,
        }
    }

    /// Policy for a 1-based week.
    pub fn week(&self, week: u32) -> Option<&WeekPolicy> {
        self.weeks
            .get(week as usize - 1)
            .or(self.default_week.as_ref())
    }
}

/// One line of the plaintext event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub session_id: String,
    pub event: SessionEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub name: String,
    pub session_id: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthLayerStats {
    pub month: u32,
    pub practice_sessions: u32,
    pub layer2_proportion: Option<f64>,
    pub layer3_proportion: Option<f64>,
    pub mean_opening_activation: Option<f64>,
    pub last_opening_activation: Option<f64>,
    pub max_stimulus_level: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub scenario: String,
    pub weeks: u32,
    pub sessions: u32,
    /// Mean opening activation of practice sessions per week.
    pub weekly_opening_activation: Vec<Option<f64>>,
    /// Daily ladder level in force at the end of each week.
    pub daily_level_by_week: Vec<u8>,
    /// Highest stimulus level presented in each week.
    pub max_stimulus_level_by_week: Vec<u8>,
    pub median_latency_by_week: Vec<Option<f64>>,
    pub months: Vec<MonthLayerStats>,
    pub activation_reduction_pct: Option<f64>,
    pub crisis_sessions: Vec<String>,
    pub step_backs: u32,
    pub violations: Vec<Violation>,
    /// SHA-256 of the JSONL event log.
    pub log_digest: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: TrajectoryReport,
    pub log: Vec<LogEntry>,
    /// Records as returned live by the close handler.
    pub live_records: Vec<SessionRecord>,
    /// Records folded back out of the store after the run.
    pub stored_records: Vec<SessionRecord>,
}

/// First simulated day, as a day index. Arbitrary but fixed for determinism.
pub const EPOCH_DAY: u64 = 20_454;
const DAILY_AT_MS: u64 = 8 * 3_600_000;
const REAL_WORLD_AT_MS: u64 = 13 * 3_600_000;
const WEEKLY_AT_MS: u64 = 18 * 3_600_000;
const STEP_MS: u64 = 8_000;
const GROUNDING_STEP_MS: u64 = 20_000;

struct Driver<'a> {
    script: &'a PatientScript,
    policy: &'a WeekPolicy,
    week: u32,
    slot: usize,
}

impl Driver<'_> {
    fn gap(&self, detail: impl Into<String>) -> SimError {
        SimError::ScriptGap {
            script: self.script.name.clone(),
            week: self.week,
            slot: self.slot,
            detail: detail.into(),
        }
    }

    fn contact_activation(&self) -> f64 {
        self.policy.contact_activation.unwrap_or(self.policy.opening_activation)
    }

    /// Reply to a layer prompt, plus the delay before sending it.
    fn reply(&self, phase: Phase, contact: u32, attempt: u32) -> Result<(ScriptedInput, u64), SimError> {
        let p = self.policy;
        let texts = &self.script.texts;
        let depth = *p
            .depth
            .get(self.slot)
            .ok_or_else(|| self.gap(format!("depth list has {} entries", p.depth.len())))?;
        let first = contact == 0 && attempt == 0;
        let within = Some(self.contact_activation());
        let tone = ScriptedInput {
            choice: Some(p.feeling_tone),
            self_report: within,
            ..Default::default()
        };
        Ok(match phase {
            Phase::AwaitingFeelingTone => {
                let mut input = tone;
                if first && p.crisis.contains(&self.slot) {
                    input.self_report = Some(10.0);
                } else if first && p.exceed.contains(&self.slot) {
                    input.self_report = Some(9.0);
                } else if first && p.approach.contains(&self.slot) {
                    input.self_report = Some(7.5);
                } else if contact == 0 && p.missed_gap.contains(&self.slot) {
                    input = ScriptedInput {
                        free_text: Some(texts.missed.clone()),
                        self_report: within,
                        ..Default::default()
                    };
                }
                (input, p.latency_ms)
            }
            Phase::Layer1 => (
                ScriptedInput {
                    free_text: Some(texts.ack.clone()),
                    self_report: within,
                    ..Default::default()
                },
                STEP_MS,
            ),
            Phase::Layer2 | Phase::Layer3 => {
                let target = if phase == Phase::Layer2 { 2 } else { 3 };
                let input = if depth >= target {
                    ScriptedInput {
                        layer_ack: Some(if target == 2 {
                            LayerAck::Layer2Confirm
                        } else {
                            LayerAck::Layer3BeliefNamed
                        }),
                        free_text: Some(if target == 2 { texts.layer2.clone() } else { texts.layer3.clone() }),
                        self_report: within,
                        ..Default::default()
                    }
                } else {
                    ScriptedInput {
                        free_text: Some(texts.shallow.clone()),
                        self_report: within,
                        ..Default::default()
                    }
                };
                (input, STEP_MS)
            }
            other => return Err(self.gap(format!("no reply defined for phase {other}"))),
        })
    }
}

fn to_input(s: &ScriptedInput, ts: u64) -> PatientInput {
    PatientInput {
        timestamp_ms: ts,
        structured_choice: s.choice,
        layer_ack: s.layer_ack,
        free_text: s.free_text.clone(),
        self_report_activation: s.self_report,
    }
}

struct SessionPlan<'a> {
    session_type: SessionType,
    start_ms: u64,
    checkin: f64,
    real_world: Option<&'a RealWorldEvent>,
    functioning: Option<bool>,
}

fn drive_session<C: crate::elicitation::ClassifierPort>(
    svc: &mut SessionService<C>,
    driver: &Driver<'_>,
    plan: SessionPlan<'_>,
    live: &mut Vec<SessionRecord>,
) -> Result<(), SimError> {
    let started = svc.handle_start(StartSessionRequest {
        session_type: plan.session_type,
        checkin: Checkin {
            activation: plan.checkin,
            body_markers: vec!["tightness".into()],
        },
        timestamp_ms: plan.start_ms,
    })?;
    let id = started.session_id;
    let mut state = started.state;
    let mut ts = plan.start_ms;
    let mut attempts: HashMap<(u32, Phase), u32> = HashMap::new();
    let mut rw_replies = plan.real_world.map(|e| e.responses.iter());

    // Each transition consumes one input; a session cannot run forever.
    for _ in 0..10_000 {
        let input = match state.phase {
            Phase::Settling => {
                ts += svc.config().engine.settle_ms;
                StepInput::SettleComplete { timestamp_ms: ts }
            }
            Phase::ContactPresented => {
                ts += svc.config().engine.pause_ms;
                StepInput::PauseElapsed { timestamp_ms: ts }
            }
            Phase::Grounding => {
                ts += GROUNDING_STEP_MS;
                StepInput::GroundingAck { timestamp_ms: ts }
            }
            Phase::Closing | Phase::Crisis => {
                ts += STEP_MS;
                let closed = svc.handle_close(
                    &id,
                    CloseRequest {
                        timestamp_ms: ts,
                        functioning_improved: plan.functioning,
                    },
                )?;
                live.push(closed.record);
                return Ok(());
            }
            phase if phase.accepts_response() => {
                let (reply, delay) = match rw_replies.as_mut() {
                    Some(replies) => {
                        let r = replies
                            .next()
                            .ok_or_else(|| driver.gap("real-world session ran out of scripted replies"))?;
                        (r.clone(), r.delay_ms)
                    }
                    None => {
                        let attempt = attempts.entry((state.events_completed, phase)).or_insert(0);
                        let out = driver.reply(phase, state.events_completed, *attempt)?;
                        *attempt += 1;
                        out
                    }
                };
                ts += delay;
                StepInput::Respond(to_input(&reply, ts))
            }
            other => return Err(driver.gap(format!("unexpected phase {other}"))),
        };
        let step = svc.handle_respond(&id, input)?;
        state = step.state;
    }
    Err(driver.gap("session did not terminate"))
}

/// Runs `weeks` weeks of the script through the service.
pub fn run_scenario(script: &PatientScript, weeks: u32, schedule: Option<Schedule>) -> Result<ScenarioRun, SimError> {
    if weeks == 0 {
        return Err(SimError::InvalidScript("weeks must be at least 1".into()));
    }
    let schedule = schedule.unwrap_or(script.schedule);
    if schedule.daily_per_week > 7 {
        return Err(SimError::InvalidScript("at most 7 daily sessions per week".into()));
    }
    let config = ServiceConfig {
        profile: script.profile.clone(),
        engine: Default::default(),
        zones: Default::default(),
        maintenance: Default::default(),
        window_days: 7,
    };
    let store = EventStore::in_memory("simulation", KdfParams::insecure_fast())?;
    let mut svc = SessionService::new(config, &TemplateSet::default(), store).map_err(|e| SimError::InvalidScript(e.to_string()))?;
    let mut live = Vec::new();

    for week in 1..=weeks {
        let policy = script.week(week).ok_or_else(|| SimError::ScriptGap {
            script: script.name.clone(),
            week,
            slot: 0,
            detail: "no policy for this week".into(),
        })?;
        if policy.depth.len() < schedule.slots() {
            return Err(SimError::ScriptGap {
                script: script.name.clone(),
                week,
                slot: policy.depth.len(),
                detail: format!("{} slots scheduled, depth covers {}", schedule.slots(), policy.depth.len()),
            });
        }
        let week_start = (EPOCH_DAY + u64::from(week - 1) * 7) * DAY_MS;
        for day in 0..7u32 {
            let day_start = week_start + u64::from(day) * DAY_MS;
            if day < schedule.daily_per_week {
                let driver = Driver {
                    script,
                    policy,
                    week,
                    slot: day as usize,
                };
                let plan = SessionPlan {
                    session_type: SessionType::Daily,
                    start_ms: day_start + DAILY_AT_MS,
                    checkin: policy.opening_activation,
                    real_world: None,
                    functioning: None,
                };
                drive_session(&mut svc, &driver, plan, &mut live)?;
            }
            for event in policy.real_world.iter().filter(|e| e.day == day) {
                let driver = Driver {
                    script,
                    policy,
                    week,
                    slot: usize::MAX,
                };
                let plan = SessionPlan {
                    session_type: SessionType::RealWorld,
                    start_ms: day_start + REAL_WORLD_AT_MS,
                    checkin: event.checkin,
                    real_world: Some(event),
                    functioning: None,
                };
                drive_session(&mut svc, &driver, plan, &mut live)?;
            }
            if day == 6 {
                for k in 0..schedule.weekly_per_week {
                    let driver = Driver {
                        script,
                        policy,
                        week,
                        slot: (schedule.daily_per_week + k) as usize,
                    };
                    let plan = SessionPlan {
                        session_type: SessionType::WeeklyDeep,
                        start_ms: day_start + WEEKLY_AT_MS + u64::from(k) * 3_600_000,
                        checkin: policy.opening_activation,
                        real_world: None,
                        functioning: policy.functioning_improved,
                    };
                    drive_session(&mut svc, &driver, plan, &mut live)?;
                }
            }
        }
    }

    let store = svc.into_store();
    let log: Vec<LogEntry> = store
        .envelopes()?
        .iter()
        .map(|e| LogEntry {
            seq: e.seq,
            session_id: e.session_id.clone(),
            event: e.event.clone(),
        })
        .collect();
    let stored_records = store.load_records(RecordRange::ALL)?;
    let report = trajectory_report(&script.name, weeks, &log, &stored_records);
    Ok(ScenarioRun {
        report,
        log,
        live_records: live,
        stored_records,
    })
}

/// Serializes a log as JSON lines.
pub fn log_to_jsonl(log: &[LogEntry]) -> String {
    let mut out = String::new();
    for entry in log {
        out.push_str(&serde_json::to_string(entry).expect("log entries serialize"));
        out.push('\n');
    }
    out
}

pub fn log_from_jsonl(text: &str) -> Result<Vec<LogEntry>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

fn trajectory_report(name: &str, weeks: u32, log: &[LogEntry], records: &[SessionRecord]) -> TrajectoryReport {
    let origin = records.first().map_or(EPOCH_DAY as i64, |r| day_index(r.opened_at));
    let week_of = |ts: u64| ((day_index(ts) - origin).max(0) / 7) as usize;
    let n = weeks as usize;

    let proxies = compute_proxies(records, 7).ok();
    let weekly = |f: &dyn Fn(&crate::progress::WindowStats) -> Option<f64>| -> Vec<Option<f64>> {
        (0..n)
            .map(|w| proxies.as_ref().and_then(|p| p.windows.get(w)).and_then(f))
            .collect()
    };

    let mut daily_level = vec![0u8; n];
    let mut max_level = vec![0u8; n];
    let mut level = MIN_LEVEL;
    let mut crisis_sessions = Vec::new();
    let mut step_backs = 0;
    let mut last_week = 0;
    for entry in log {
        let w = week_of(entry.event.timestamp_ms).min(n.saturating_sub(1));
        while last_week < w {
            daily_level[last_week] = level;
            last_week += 1;
        }
        match &entry.event.payload {
            EventPayload::StimulusShown { level: l, .. } if entry.event.timestamp_ms > 0 => {
                max_level[w] = max_level[w].max(*l);
            }
            EventPayload::LadderUpdate { to_level, .. } => level = *to_level,
            EventPayload::CrisisEnter { .. } => crisis_sessions.push(entry.session_id.clone()),
            EventPayload::StepBack { .. } => step_backs += 1,
            _ => {}
        }
    }
    for slot in daily_level.iter_mut().skip(last_week) {
        *slot = level;
    }

    let months = (1..=months_covered(records))
        .filter_map(|m| generate_monthly_summary(records, m).ok())
        .map(|s| MonthLayerStats {
            month: s.month,
            practice_sessions: s.session_counts.daily + s.session_counts.weekly_deep,
            layer2_proportion: s.layer2_proportion,
            layer3_proportion: s.layer3_proportion,
            mean_opening_activation: s.activation.map(|a| a.mean),
            last_opening_activation: s.activation.map(|a| a.last),
            max_stimulus_level: s.max_stimulus_level,
        })
        .collect();

    TrajectoryReport {
        scenario: name.to_string(),
        weeks,
        sessions: records.len() as u32,
        weekly_opening_activation: weekly(&|w| w.mean_opening_activation),
        daily_level_by_week: daily_level,
        max_stimulus_level_by_week: max_level,
        median_latency_by_week: weekly(&|w| w.median_latency_ms),
        months,
        activation_reduction_pct: proxies.as_ref().and_then(|p| p.activation_reduction_pct),
        crisis_sessions,
        step_backs,
        violations: check_invariants(log),
        log_digest: hex::encode(Sha256::digest(log_to_jsonl(log).as_bytes())),
    }
}

#[derive(Default)]
struct SessionScan {
    session_type: Option<SessionType>,
    last_ts: u64,
    closed: bool,
    crisis: bool,
    stimuli: u32,
    layers_reached: u32,
    contact_layer: u8,
    max_layer: u8,
    step_backs: u32,
    stable: Option<bool>,
    /// Kind of the event that must come next, if any.
    expect_next: Option<(EventKind, &'static str)>,
    events: Vec<SessionEvent>,
}

/// Checks the protocol invariants against a raw event log.
///
/// Catalog: `timestamps_decreasing`, `stimulus_after_crisis`,
/// `grounding_not_immediate`, `crisis_not_immediate`, `layer3_without_gate`,
/// `real_world_multiple_stimuli`, `real_world_multiple_layers`,
/// `level_out_of_range`, `advance_without_three_stable`, `missing_advance`,
/// `stable_flag_mismatch`, `events_after_close`, `unknown_session`.
pub fn check_invariants(log: &[LogEntry]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |name: &str, id: &str, detail: String| {
        out.push(Violation {
            name: name.into(),
            session_id: id.into(),
            detail,
        })
    };
    let mut sessions: HashMap<&str, SessionScan> = HashMap::new();
    let mut layer2_sessions = 0u32;
    let mut run = 0u32;

    for entry in log {
        let id = entry.session_id.as_str();
        let ev = &entry.event;
        let kind = ev.kind();
        if kind == EventKind::Checkin {
            sessions.entry(id).or_default();
        }
        let Some(s) = sessions.get_mut(id) else {
            push("unknown_session", id, format!("seq {} has no check-in", entry.seq));
            continue;
        };

        if ev.timestamp_ms < s.last_ts {
            push("timestamps_decreasing", id, format!("seq {}: {} < {}", entry.seq, ev.timestamp_ms, s.last_ts));
        }
        s.last_ts = s.last_ts.max(ev.timestamp_ms);
        if let Some((expected, name)) = s.expect_next.take() {
            if kind != expected {
                push(name, id, format!("seq {}: {kind:?} where {expected:?} was required", entry.seq));
            }
        }
        if s.closed && !kind.is_post_close() {
            push("events_after_close", id, format!("seq {}: {kind:?}", entry.seq));
        }
        if !kind.is_post_close() {
            s.events.push(ev.clone());
        }

        match &ev.payload {
            EventPayload::Checkin {
                session_type,
                stimulus_level,
                ..
            } => {
                s.session_type = Some(*session_type);
                if !(MIN_LEVEL..=MAX_LEVEL).contains(stimulus_level) {
                    push("level_out_of_range", id, format!("session level {stimulus_level}"));
                }
            }
            EventPayload::StimulusShown { level, .. } => {
                if s.crisis {
                    push("stimulus_after_crisis", id, format!("seq {}", entry.seq));
                }
                if !(MIN_LEVEL..=MAX_LEVEL).contains(level) {
                    push("level_out_of_range", id, format!("stimulus level {level}"));
                }
                s.stimuli += 1;
                s.contact_layer = 0;
                if s.session_type == Some(SessionType::RealWorld) && s.stimuli > 1 {
                    push("real_world_multiple_stimuli", id, format!("{} stimuli", s.stimuli));
                }
            }
            EventPayload::Classification { zone, crisis, .. } => {
                if *crisis {
                    s.expect_next = Some((EventKind::CrisisEnter, "crisis_not_immediate"));
                } else if *zone == crate::types::ActivationZone::Exceeding {
                    s.expect_next = Some((EventKind::GroundingStep, "grounding_not_immediate"));
                }
            }
            EventPayload::LayerReached { layer, .. } => {
                s.layers_reached += 1;
                s.contact_layer = s.contact_layer.max(*layer);
                s.max_layer = s.max_layer.max(*layer);
                if s.session_type == Some(SessionType::RealWorld) && s.layers_reached > 1 {
                    push("real_world_multiple_layers", id, format!("{} layer advances", s.layers_reached));
                }
            }
            EventPayload::PromptShown {
                purpose: PromptPurpose::BeliefInquiry,
                ..
            } => {
                if s.contact_layer < 2 || layer2_sessions < 3 {
                    push(
                        "layer3_without_gate",
                        id,
                        format!(
                            "seq {}: contact layer {}, prior Layer-2 sessions {layer2_sessions}",
                            entry.seq, s.contact_layer
                        ),
                    );
                }
            }
            EventPayload::StepBack { .. } => s.step_backs += 1,
            EventPayload::CrisisEnter { .. } => s.crisis = true,
            EventPayload::SessionClosed { stable, max_layer, .. } => {
                s.closed = true;
                s.stable = Some(*stable);
                if *max_layer >= 2 {
                    layer2_sessions += 1;
                }
                if let Some(rec) = SessionRecord::from_events(id, &s.events) {
                    if rec.stable != *stable {
                        push("stable_flag_mismatch", id, format!("logged {stable}, events say {}", rec.stable));
                    }
                }
            }
            EventPayload::LadderUpdate {
                action,
                from_level,
                to_level,
                counted,
                ..
            } => {
                if !(MIN_LEVEL..=MAX_DAILY_LEVEL).contains(to_level) {
                    push("level_out_of_range", id, format!("daily level {to_level}"));
                }
                if *counted {
                    run = if s.stable == Some(true) { run + 1 } else { 0 };
                    let due = run >= STABLE_SESSIONS_TO_ADVANCE && *from_level < MAX_DAILY_LEVEL && s.step_backs == 0;
                    if *action == LadderAction::Advance && !due {
                        push(
                            "advance_without_three_stable",
                            id,
                            format!("advanced after {run} consecutive stable sessions"),
                        );
                    } else if due && *action != LadderAction::Advance {
                        push("missing_advance", id, format!("{run} consecutive stable sessions at level {from_level}"));
                    }
                }
                if to_level != from_level {
                    run = 0;
                }
            }
            _ => {}
        }
    }
    for (id, s) in &sessions {
        if let Some((expected, name)) = s.expect_next {
            push(name, id, format!("log ends where {expected:?} was required"));
        }
    }
    out.sort_by(|a, b| (&a.session_id, &a.name).cmp(&(&b.session_id, &b.name)));
    out
}
