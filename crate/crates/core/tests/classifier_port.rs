use mindgap_core::elicitation::{
    conformance, ClassificationRequest, ClassifierContext, StructuredBackend, StructuredOutputClassifier,
};
use mindgap_core::engine::{EngineConfig, SessionContext, StartRequest};
use mindgap_core::ladder::{build_ladder, TemplateSet};
use mindgap_core::simulator::PatientScript;
use mindgap_core::{
    ClassifierPort, LadderPosition, PatientInput, Phase, ProtocolEngine, RuleClassifier, SessionType, StepInput,
};
use serde_json::Value;
use std::collections::BTreeSet;

/// Stands in for a language model: always claims full depth and calm.
struct Overreacher;

impl StructuredBackend for Overreacher {
    fn complete(&self, req: &ClassificationRequest<'_>) -> Result<String, String> {
        Ok(format!(
            r#"{{"layer_depth":3,"activation_zone":"within","crisis":false,"confidence":0.9,"matched":[{{"entry":"{}","axis":"feeling_tone"}}]}}"#,
            req.prompted_layer
        ))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

fn schema() -> Value {
    serde_json::from_str(include_str!("../../../docs/classifier_output.schema.json")).unwrap()
}

#[test]
fn rule_classifier_output_matches_documented_schema() {
    let schema = schema();
    let allowed: BTreeSet<&str> = schema["properties"].as_object().unwrap().keys().map(String::as_str).collect();
    let zones: Vec<&str> = schema["properties"]["activation_zone"]["enum"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let c = RuleClassifier::default();
    let mut inputs = conformance::probe_inputs();
    inputs.extend(conformance::crisis_fixtures());
    for input in &inputs {
        for layer in 0..=3 {
            let out = serde_json::to_value(c.classify(&ClassifierContext::new(layer, SessionType::Daily), input)).unwrap();
            let obj = out.as_object().unwrap();
            for key in schema["required"].as_array().unwrap() {
                assert!(obj.contains_key(key.as_str().unwrap()), "missing {key}");
            }
            for key in obj.keys() {
                assert!(allowed.contains(key.as_str()), "undocumented field {key}");
            }
            assert!(zones.contains(&obj["activation_zone"].as_str().unwrap()));
            let conf = obj["confidence"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&conf));
        }
    }
}

#[test]
fn adapter_passes_conformance() {
    let adapter = StructuredOutputClassifier::new(Overreacher, RuleClassifier::default());
    let failures = conformance::check(&adapter);
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn engine_with_adapter_keeps_gating_and_crisis() {
    let engine = ProtocolEngine::new(
        EngineConfig::default(),
        StructuredOutputClassifier::new(Overreacher, RuleClassifier::default()),
    );
    let ladder = build_ladder(&PatientScript::marcus().profile, &TemplateSet::default()).unwrap();
    let position = LadderPosition::default();
    let ctx = SessionContext {
        ladder: &ladder,
        position: &position,
        prior_records: &[],
        has_open_session: false,
    };
    let t0 = 1_700_000_000_000;
    let (mut s, _) = engine
        .start_session(
            ctx,
            StartRequest {
                session_id: "a".into(),
                session_type: SessionType::Daily,
                checkin_activation: 5.0,
                body_markers: vec![],
                timestamp_ms: t0,
            },
        )
        .unwrap();
    let mut ts = t0;
    let step = |s: &mut mindgap_core::SessionState, i: StepInput| {
        *s = engine.next_step(s, &i).unwrap().0;
    };
    ts += 90_000;
    step(&mut s, StepInput::SettleComplete { timestamp_ms: ts });
    ts += 5_000;
    step(&mut s, StepInput::PauseElapsed { timestamp_ms: ts });
    // The model claims depth 3 at the feeling-tone prompt; only Layer 1 counts.
    ts += 4_000;
    step(
        &mut s,
        StepInput::Respond(PatientInput {
            timestamp_ms: ts,
            free_text: Some("hmm".into()),
            ..Default::default()
        }),
    );
    assert_eq!(s.phase, Phase::Layer1);
    assert_eq!(s.current_layer_reached, 1);
    // With no Layer-2 history the gate stays shut even for an eager model.
    ts += 4_000;
    step(
        &mut s,
        StepInput::Respond(PatientInput {
            timestamp_ms: ts,
            free_text: Some("sure".into()),
            ..Default::default()
        }),
    );
    ts += 4_000;
    step(
        &mut s,
        StepInput::Respond(PatientInput {
            timestamp_ms: ts,
            free_text: Some("sure".into()),
            ..Default::default()
        }),
    );
    assert_ne!(s.phase, Phase::Layer3);
    // The model says calm; the crisis floor still wins.
    ts += 100_000;
    if s.phase == Phase::ContactPresented {
        step(&mut s, StepInput::PauseElapsed { timestamp_ms: ts });
    }
    ts += 4_000;
    step(
        &mut s,
        StepInput::Respond(PatientInput {
            timestamp_ms: ts,
            free_text: Some("I want to die".into()),
            ..Default::default()
        }),
    );
    assert_eq!(s.phase, Phase::Crisis);
}
