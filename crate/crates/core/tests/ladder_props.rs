use mindgap_core::ladder::{
    apply_decision, evaluate_advancement, record_session_outcome, regress, select_session_level, DecisionReason,
    LadderAction, LadderError, SessionOutcome,
};
use mindgap_core::{LadderPosition, SessionType};
use proptest::prelude::*;

#[derive(Debug, Clone, Copy)]
struct Step {
    stable: bool,
    step_back: bool,
}

fn steps() -> impl Strategy<Value = Vec<Step>> {
    // Bias toward stable sessions so the upper levels are reached.
    let step = (0u8..10, any::<bool>()).prop_map(|(roll, breach)| Step {
        stable: roll < 7 && !(roll == 6 && breach),
        step_back: roll == 9 && breach,
    });
    prop::collection::vec(step, 0..60)
}

/// Straight-line restatement of the advancement rule.
fn oracle(steps: &[Step]) -> Vec<(LadderAction, u8, u32)> {
    let (mut level, mut run) = (1u8, 0u32);
    let mut out = Vec::new();
    for s in steps {
        run = if s.stable && !s.step_back { run + 1 } else { 0 };
        let (action, next) = if s.step_back {
            (LadderAction::Regress, if level > 1 { level - 1 } else { 1 })
        } else if run >= 3 && level < 5 {
            (LadderAction::Advance, level + 1)
        } else {
            (LadderAction::Hold, level)
        };
        if next != level {
            run = 0;
        }
        level = next;
        out.push((action, level, run));
    }
    out
}

fn fold(steps: &[Step]) -> Vec<(LadderAction, u8, u32)> {
    let mut pos = LadderPosition::default();
    let mut out = Vec::new();
    for (i, s) in steps.iter().enumerate() {
        let outcome = SessionOutcome {
            session_id: format!("s{i}"),
            level: pos.current_daily_level,
            stable: s.stable && !s.step_back,
        };
        pos = record_session_outcome(&pos, &outcome).unwrap();
        let decision = if s.step_back {
            regress(&pos, DecisionReason::ToleranceBreach)
        } else {
            evaluate_advancement(&pos)
        };
        pos = apply_decision(&pos, &decision);
        out.push((decision.action, pos.current_daily_level, pos.consecutive_stable_sessions));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn decisions_match_fold_oracle(seq in steps()) {
        prop_assert_eq!(fold(&seq), oracle(&seq));
    }
}

proptest! {
    #[test]
    fn levels_stay_in_bounds(seq in steps()) {
        for (_, level, _) in fold(&seq) {
            prop_assert!((1..=5).contains(&level));
        }
    }

    #[test]
    fn no_advance_without_three_stable(seq in steps()) {
        let decisions = fold(&seq);
        for (i, (action, _, _)) in decisions.iter().enumerate() {
            if *action == LadderAction::Advance {
                prop_assert!(i >= 2);
                prop_assert!(seq[i - 2..=i].iter().all(|s| s.stable && !s.step_back));
            }
        }
    }

    #[test]
    fn weekly_level_is_one_above_daily(level in 1u8..=5) {
        let pos = LadderPosition::at_level(level);
        prop_assert_eq!(select_session_level(&pos, SessionType::WeeklyDeep), level + 1);
        prop_assert_eq!(select_session_level(&pos, SessionType::Daily), level);
        prop_assert_eq!(select_session_level(&pos, SessionType::RealWorld), level);
    }
}

#[test]
fn outcome_at_wrong_level_is_rejected() {
    let pos = LadderPosition::at_level(2);
    let outcome = SessionOutcome {
        session_id: "x".into(),
        level: 3,
        stable: true,
    };
    assert!(matches!(
        record_session_outcome(&pos, &outcome),
        Err(LadderError::LevelMismatch { expected: 2, got: 3 })
    ));
}

#[test]
fn regress_floors_at_level_one() {
    let pos = LadderPosition::at_level(1);
    let d = regress(&pos, DecisionReason::DistressReport);
    assert_eq!(d.new_level, 1);
    assert_eq!(apply_decision(&pos, &d).current_daily_level, 1);
}

#[test]
fn top_level_holds_after_three_stable() {
    let mut pos = LadderPosition::at_level(5);
    for i in 0..4 {
        let outcome = SessionOutcome {
            session_id: format!("s{i}"),
            level: 5,
            stable: true,
        };
        pos = record_session_outcome(&pos, &outcome).unwrap();
        assert_eq!(evaluate_advancement(&pos).action, LadderAction::Hold);
    }
}
