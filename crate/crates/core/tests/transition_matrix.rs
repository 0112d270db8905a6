use mindgap_core::elicitation::PatientInput;
use mindgap_core::engine::{EngineError, InputKind, SessionContext, StartRequest};
use mindgap_core::ladder::{build_ladder, PatientProfile, PriorPractice, TemplateSet, Trigger};
use mindgap_core::{FeelingTone, LadderPosition, LayerAck, Phase, ProtocolEngine, SessionState, SessionType, StepInput};

const T0: u64 = 1_760_000_000_000;

fn profile() -> PatientProfile {
    PatientProfile {
        patient_id: "matrix".into(),
        trauma_domain: "combat".into(),
        triggers: vec![Trigger::new("loud sounds", 9), Trigger::new("crowds", 7)],
        avoidance_patterns: vec![],
        prior_practice: PriorPractice::None,
        baseline_severity: 50,
    }
}

fn calm(ts: u64) -> PatientInput {
    PatientInput {
        timestamp_ms: ts,
        structured_choice: Some(FeelingTone::Unpleasant),
        self_report_activation: Some(5.0),
        ..Default::default()
    }
}

fn with_ack(ts: u64, ack: LayerAck) -> PatientInput {
    PatientInput {
        layer_ack: Some(ack),
        structured_choice: None,
        ..calm(ts)
    }
}

fn input_for(kind: InputKind, ts: u64, phase: Phase) -> StepInput {
    match kind {
        InputKind::SettleComplete => StepInput::SettleComplete { timestamp_ms: ts },
        InputKind::PauseElapsed => StepInput::PauseElapsed { timestamp_ms: ts },
        InputKind::GroundingAck => StepInput::GroundingAck { timestamp_ms: ts },
        InputKind::EndSession => StepInput::EndSession { timestamp_ms: ts },
        InputKind::Respond => StepInput::Respond(match phase {
            Phase::Layer2 => with_ack(ts, LayerAck::Layer2Confirm),
            Phase::Layer3 => with_ack(ts, LayerAck::Layer3BeliefNamed),
            _ => calm(ts),
        }),
    }
}

/// A daily-session state sitting in `phase`, with the Layer-3 gate open.
fn state_in(engine: &ProtocolEngine, phase: Phase) -> SessionState {
    let ladder = build_ladder(&profile(), &TemplateSet::default()).unwrap();
    let position = LadderPosition::default();
    let ctx = SessionContext {
        ladder: &ladder,
        position: &position,
        prior_records: &[],
        has_open_session: false,
    };
    let req = StartRequest {
        session_id: "m".into(),
        session_type: SessionType::Daily,
        checkin_activation: 5.0,
        body_markers: vec![],
        timestamp_ms: T0,
    };
    let (mut s, _) = engine.start_session(ctx, req).unwrap();
    s.prior_layer2_sessions = 3;
    let mut ts = T0;
    let step = |s: &mut SessionState, input: StepInput| {
        *s = engine.next_step(s, &input).unwrap().0;
    };
    let path: &[Phase] = &[
        Phase::Settling,
        Phase::ContactPresented,
        Phase::AwaitingFeelingTone,
        Phase::Layer1,
        Phase::Layer2,
        Phase::Layer3,
    ];
    for p in path {
        if s.phase == phase {
            return s;
        }
        ts += 100_000;
        step(&mut s, input_for(next_kind(*p), ts, *p));
        assert_ne!(s.phase, *p, "setup stuck in {p}");
    }
    match phase {
        Phase::Grounding => {
            let mut s = state_in(engine, Phase::AwaitingFeelingTone);
            let mut hot = calm(s.last_timestamp() + 1_000);
            hot.self_report_activation = Some(9.5);
            step(&mut s, StepInput::Respond(hot));
            s
        }
        Phase::Crisis => {
            let mut s = state_in(engine, Phase::AwaitingFeelingTone);
            let mut worst = calm(s.last_timestamp() + 1_000);
            worst.self_report_activation = Some(10.0);
            step(&mut s, StepInput::Respond(worst));
            s
        }
        Phase::Closing => {
            let mut s = state_in(engine, Phase::Settling);
            step(&mut s, StepInput::EndSession { timestamp_ms: T0 + 1 });
            s
        }
        Phase::Closed => {
            let s = state_in(engine, Phase::Closing);
            engine.close_session(&s, T0 + 2).unwrap().0
        }
        Phase::Checkin => {
            let mut s = state_in(engine, Phase::Settling);
            s.phase = Phase::Checkin;
            s
        }
        other => unreachable!("{other} handled by the walk"),
    }
}

fn next_kind(p: Phase) -> InputKind {
    match p {
        Phase::Settling => InputKind::SettleComplete,
        Phase::ContactPresented => InputKind::PauseElapsed,
        _ => InputKind::Respond,
    }
}

/// Expected target phase for every accepted pair; `None` means rejected.
fn expected(phase: Phase, kind: InputKind) -> Option<Phase> {
    use InputKind as I;
    use Phase as P;
    match (phase, kind) {
        (P::Checkin | P::Crisis | P::Closing | P::Closed, _) => None,
        (_, I::EndSession) => Some(P::Closing),
        (P::Settling, I::SettleComplete) => Some(P::ContactPresented),
        (P::ContactPresented, I::PauseElapsed) => Some(P::AwaitingFeelingTone),
        (P::AwaitingFeelingTone, I::Respond) => Some(P::Layer1),
        (P::Layer1, I::Respond) => Some(P::Layer2),
        (P::Layer2, I::Respond) => Some(P::Layer3),
        // Layer 3 ends the contact; the next stimulus is presented.
        (P::Layer3, I::Respond) => Some(P::ContactPresented),
        (P::Grounding, I::GroundingAck) => Some(P::Grounding),
        _ => None,
    }
}

#[test]
fn every_phase_input_pair_matches_the_table() {
    let engine = ProtocolEngine::default();
    let mut checked = 0;
    for phase in Phase::ALL {
        let state = state_in(&engine, phase);
        assert_eq!(state.phase, phase);
        for kind in InputKind::ALL {
            let ts = state.last_timestamp() + 60_000;
            let got = engine.next_step(&state, &input_for(kind, ts, phase));
            match (expected(phase, kind), got) {
                (Some(to), Ok((next, _))) => assert_eq!(next.phase, to, "{phase} + {kind}"),
                (None, Err(EngineError::PhaseMismatch { phase: p, input })) => {
                    assert_eq!((p, input), (phase, kind));
                }
                (want, got) => panic!("{phase} + {kind}: expected {want:?}, got {got:?}"),
            }
            checked += 1;
        }
    }
    assert_eq!(checked, Phase::ALL.len() * InputKind::ALL.len());
}

#[test]
fn crisis_report_preempts_every_open_phase() {
    let engine = ProtocolEngine::default();
    for phase in Phase::ALL.into_iter().filter(|p| !p.is_terminal()) {
        let state = state_in(&engine, phase);
        let mut worst = calm(state.last_timestamp() + 1_000);
        worst.self_report_activation = Some(10.0);
        let (next, _) = engine.next_step(&state, &StepInput::Respond(worst)).unwrap();
        assert_eq!(next.phase, Phase::Crisis, "from {phase}");
    }
}

#[test]
fn closed_gate_ends_contact_after_layer_two() {
    let engine = ProtocolEngine::default();
    let mut s = state_in(&engine, Phase::Layer2);
    s.prior_layer2_sessions = 2;
    let ts = s.last_timestamp() + 8_000;
    let (next, _) = engine
        .next_step(&s, &StepInput::Respond(with_ack(ts, LayerAck::Layer2Confirm)))
        .unwrap();
    assert_eq!(next.phase, Phase::ContactPresented);
    assert_eq!(next.contacts.last().unwrap().layer, 2);
}

#[test]
fn pause_must_elapse_before_feeling_tone() {
    let engine = ProtocolEngine::default();
    let s = state_in(&engine, Phase::ContactPresented);
    let early = s.last_timestamp() + 1_000;
    assert!(matches!(
        engine.next_step(&s, &StepInput::PauseElapsed { timestamp_ms: early }),
        Err(EngineError::PauseNotElapsed { .. })
    ));
}
