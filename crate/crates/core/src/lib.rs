//! Protocol engine for feeling-tone based trauma practice.
//!
//! Everything here runs on the patient's device. The crate has no network
//! dependency; the HTTP binding lives in the `mindgap` CLI crate.

pub mod data;
pub mod elicitation;
pub mod engine;
pub mod events;
pub mod ladder;
pub mod types;
pub mod progress;
pub mod safety;
pub mod service;
pub mod simulator;
pub mod store;

pub use elicitation::{ClassifierPort, PatientInput, ResponseClassification, RuleClassifier};
pub use engine::{EngineAction, EngineConfig, Phase, ProtocolEngine, SessionState, StepInput};
pub use events::{EventKind, EventPayload, SessionEvent, SessionRecord};
pub use ladder::{LadderPosition, PatientProfile, StimulusItem, StimulusLadder};
pub use types::{ActivationZone, CrisisCause, FeelingTone, LayerAck, SessionType};
