//! Small enums shared across the engine, store and service layers.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Kind of practice session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionType {
    Daily,
    WeeklyDeep,
    RealWorld,
}

impl SessionType {
    /// Scheduled practice sessions (daily and weekly). Real-world support
    /// sessions are unscheduled and opened in an already activated state.
    pub fn is_practice(self) -> bool {
        !matches!(self, SessionType::RealWorld)
    }

    pub const ALL: [SessionType; 3] = [
        SessionType::Daily,
        SessionType::WeeklyDeep,
        SessionType::RealWorld,
    ];
}

impl fmt::Display for SessionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionType::Daily => "daily",
            SessionType::WeeklyDeep => "weekly_deep",
            SessionType::RealWorld => "real_world",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeelingTone {
    Pleasant,
    Unpleasant,
    Neutral,
}

impl FeelingTone {
    pub fn as_str(self) -> &'static str {
        match self {
            FeelingTone::Pleasant => "pleasant",
            FeelingTone::Unpleasant => "unpleasant",
            FeelingTone::Neutral => "neutral",
        }
    }
}

/// Explicit acknowledgement buttons for the deeper layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerAck {
    Layer2Confirm,
    Layer3BeliefNamed,
}

/// Position of momentary activation relative to the window of tolerance.
///
/// Ordered: `Within < Approaching < Exceeding`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationZone {
    Within,
    Approaching,
    Exceeding,
}

/// What caused a crisis transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrisisCause {
    MaxActivation,
    CrisisLexicon,
    DissociationPattern,
}

/// Self-reported activation on the 0 to 10 scale.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Activation(f64);

impl Activation {
    pub const MAX: f64 = 10.0;

    pub fn new(value: f64) -> Option<Self> {
        (value.is_finite() && (0.0..=Self::MAX).contains(&value)).then_some(Self(value))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

pub const DAY_MS: u64 = 86_400_000;

/// Whole-day index of a client timestamp.
pub fn day_index(timestamp_ms: u64) -> i64 {
    (timestamp_ms / DAY_MS) as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_range() {
        assert!(Activation::new(0.0).is_some());
        assert!(Activation::new(10.0).is_some());
        assert!(Activation::new(10.01).is_none());
        assert!(Activation::new(-1.0).is_none());
        assert!(Activation::new(f64::NAN).is_none());
    }

    #[test]
    fn zone_ordering() {
        assert!(ActivationZone::Within < ActivationZone::Approaching);
        assert!(ActivationZone::Approaching < ActivationZone::Exceeding);
    }
}
