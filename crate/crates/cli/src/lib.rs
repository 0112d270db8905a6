//! Command-line front end for the MindGap engine: the loopback HTTP service,
//! the scenario simulator and the event-log verifier.

pub mod http;

use anyhow::{bail, Context};
use mindgap_core::ladder::TemplateSet;
use mindgap_core::safety::ResourceConfig;
use mindgap_core::service::{ServiceConfig, SessionService};
use mindgap_core::simulator::{check_invariants, log_from_jsonl, log_to_jsonl, run_scenario, PatientScript, TrajectoryReport, Violation};
use mindgap_core::store::{EventStore, KdfParams};
use mindgap_core::RuleClassifier;
use std::fs;
use std::io::BufRead;
use std::path::Path;

/// Environment variable that bypasses the passphrase prompt. Meant for tests.
pub const PASSPHRASE_ENV: &str = "MINDGAP_PASSPHRASE";

pub fn read_passphrase() -> anyhow::Result<String> {
    if let Ok(p) = std::env::var(PASSPHRASE_ENV) {
        return Ok(p);
    }
    eprint!("store passphrase: ");
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line)?;
    let p = line.trim_end_matches(['\r', '\n']).to_string();
    if p.is_empty() {
        bail!("empty passphrase");
    }
    Ok(p)
}

/// Templates come from `ladder_templates.json` in `dir`; a
/// `crisis_resources.json` next to it replaces the placeholder resources.
pub fn load_deployment(dir: Option<&Path>) -> anyhow::Result<(TemplateSet, ResourceConfig)> {
    let Some(dir) = dir else {
        return Ok((TemplateSet::default(), ResourceConfig::default()));
    };
    let path = dir.join("ladder_templates.json");
    let templates = TemplateSet::from_json(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
    let res_path = dir.join("crisis_resources.json");
    let resources = if res_path.exists() {
        ResourceConfig::from_json(&fs::read_to_string(&res_path)?)?
    } else {
        ResourceConfig::default()
    };
    Ok((templates, resources))
}

pub fn open_service(store: &Path, passphrase: &str, templates: Option<&Path>, config: &Path) -> anyhow::Result<SessionService> {
    let cfg = ServiceConfig::from_json(&fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?)?;
    let (templates, resources) = load_deployment(templates)?;
    let store = EventStore::open_or_create(store, passphrase, KdfParams::default())?;
    let recovery = store.recovery();
    if recovery.truncated_bytes > 0 {
        eprintln!(
            "recovered store: kept {} intact events, dropped {} bytes of a torn write",
            recovery.intact_frames, recovery.truncated_bytes
        );
    }
    let classifier = RuleClassifier::new(Default::default(), cfg.zones);
    Ok(SessionService::with_classifier(cfg, &templates, store, classifier, resources)?)
}

/// Accepts a script file path or the name of a bundled script.
pub fn load_script(name_or_path: &str) -> anyhow::Result<PatientScript> {
    if let Some(s) = PatientScript::builtin(name_or_path) {
        return Ok(s);
    }
    let text = fs::read_to_string(name_or_path).with_context(|| format!("reading script {name_or_path}"))?;
    Ok(PatientScript::from_json(&text)?)
}

pub fn simulate(script: &str, weeks: u32, out: &Path, log: Option<&Path>) -> anyhow::Result<TrajectoryReport> {
    let script = load_script(script)?;
    let run = run_scenario(&script, weeks, None)?;
    fs::write(out, serde_json::to_vec_pretty(&run.report)?)?;
    if let Some(log) = log {
        fs::write(log, log_to_jsonl(&run.log))?;
    }
    Ok(run.report)
}

pub fn verify(log: &Path) -> anyhow::Result<Vec<Violation>> {
    let text = fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
    Ok(check_invariants(&log_from_jsonl(&text)?))
}
