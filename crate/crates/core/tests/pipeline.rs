use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use vigil_core::orchestrator::{
    run_all, run_single, OrchestratorError, OutcomeKind, RunConfig, RunManifest, Stage, StageOutcome, Tool,
};
use vigil_core::rbt::{RbtDiagnosis, SCHEMA_CONFLICT};
use vigil_core::robin_sim::{simulate, Scenario};

fn now() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 10, 31, 23, 0, 0).unwrap()
}

fn setup(s: &Scenario) -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let layout = simulate(s, dir.path(), now()).unwrap();
    let cfg = RunConfig::new(layout.log, layout.prompt, layout.repo, dir.path().join("output"), now());
    (dir, cfg)
}

fn diagnosis(m: &RunManifest) -> RbtDiagnosis {
    serde_json::from_str(&fs::read_to_string(m.diagnosis.as_ref().unwrap()).unwrap()).unwrap()
}

fn artifact(m: &RunManifest, pred: impl Fn(&str) -> bool) -> Option<PathBuf> {
    m.artifacts.iter().find(|a| pred(a)).map(PathBuf::from)
}

fn file_name(p: &str) -> &str {
    Path::new(p).file_name().unwrap().to_str().unwrap()
}

#[test]
fn before_scenario_end_to_end() {
    let (_dir, cfg) = setup(&Scenario::before());
    let m = run_all(&cfg).unwrap();
    assert_eq!(m.stage, Stage::DiffDone);
    assert!(!m.fallback_used);
    assert_eq!(m.cue.as_deref(), Some("reminder.toast:fail"));
    assert_eq!(m.strategy.as_deref(), Some("TZReceiptStrategy"));

    let d = diagnosis(&m);
    assert_eq!(d.top_thorn.as_deref(), Some("reminder.toast:fail"));
    assert!(d.roses.is_empty());
    assert_eq!(d.prompt_rules_to_add.len(), 5);

    let prompt = fs::read_to_string(cfg.out.join("new_prompt.txt")).unwrap();
    for rule in &d.prompt_rules_to_add {
        assert!(prompt.contains(rule.as_str()));
    }
    let diff = artifact(&m, |a| file_name(a).starts_with("patch_")).unwrap();
    let diff = fs::read_to_string(diff).unwrap();
    assert!(diff.contains("+++ b/utils/reliability.py"));
    assert!(artifact(&m, |a| file_name(a).starts_with("PR_")).is_some());
    assert!(fs::read_to_string(&cfg.bank).unwrap().lines().count() > 0);
}

#[test]
fn after_scenario_is_stable() {
    let (_dir, cfg) = setup(&Scenario::after());
    let m = run_all(&cfg).unwrap();
    assert_eq!(m.stage, Stage::DiffDone);
    let d = diagnosis(&m);
    assert!(d.thorns.is_empty());
    assert!(d.prompt_rules_to_add.is_empty());
    assert_eq!(m.strategy.as_deref(), Some("none"));
    assert!(!cfg.out.join("proposals").exists());
}

#[test]
fn fault_in_each_stage_still_finishes() {
    for tool in Tool::ALL {
        let (_dir, mut cfg) = setup(&Scenario::before());
        cfg.fault = Some(tool);
        let m = run_all(&cfg).unwrap();
        assert_eq!(m.stage, Stage::DiffDone, "{tool}");
        assert!(m.fallback_used);
        assert_eq!(m.internal_thorns.len(), 1);
        assert_eq!(m.internal_thorns[0].tool, tool.as_str());
        let degraded: Vec<_> = m.records.iter().filter(|r| r.outcome == OutcomeKind::Degraded).collect();
        assert_eq!(degraded.len(), 1);
        assert_eq!(degraded[0].tool, tool);
        assert!(artifact(&m, |a| file_name(a).starts_with("remediation_")).is_some(), "{tool}");
    }
}

#[test]
fn prompt_fault_leaves_provisional_prompt() {
    let (_dir, mut cfg) = setup(&Scenario::before());
    cfg.fault = Some(Tool::BuildPromptPatch);
    run_all(&cfg).unwrap();
    assert!(!cfg.out.join("new_prompt.txt").exists());
    let text = fs::read_to_string(cfg.out.join("new_prompt.provisional.txt")).unwrap();
    assert!(text.starts_with("PROVISIONAL"));
}

#[test]
fn diagnosis_fault_uses_fallback_then_recovers() {
    let (_dir, mut cfg) = setup(&Scenario::before());
    cfg.fault = Some(Tool::DiagnoseRbt);
    let m = run_all(&cfg).unwrap();
    let thorn = &m.internal_thorns[0];
    assert_eq!(thorn.kind, SCHEMA_CONFLICT);
    assert_eq!(thorn.suggestions.len(), 2);
    let d = diagnosis(&m);
    assert!(d.fallback);
    assert_eq!(d.top_thorn.as_deref(), Some("reminder.toast:fail"));
    let rem = artifact(&m, |a| file_name(a).starts_with("remediation_")).unwrap();
    let rem = fs::read_to_string(rem).unwrap();
    assert!(rem.contains(&thorn.excerpt));

    cfg.fault = None;
    let m = run_all(&cfg).unwrap();
    assert!(!m.fallback_used);
    assert!(!diagnosis(&m).fallback);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (_dir, cfg) = setup(&Scenario::before());
    let read = |m: &RunManifest, prefix: &str| {
        let p = artifact(m, |a| file_name(a).starts_with(prefix)).unwrap();
        fs::read(p).unwrap()
    };
    let a = run_all(&cfg).unwrap();
    let prompt_a = fs::read(cfg.out.join("new_prompt.txt")).unwrap();
    let b = run_all(&cfg).unwrap();
    let prompt_b = fs::read(cfg.out.join("new_prompt.txt")).unwrap();
    assert_eq!(read(&a, "rbt_"), read(&b, "rbt_"));
    assert_eq!(read(&a, "patch_"), read(&b, "patch_"));
    assert_eq!(prompt_a, prompt_b);
}

#[test]
fn stages_as_separate_invocations() {
    let (_dir, cfg) = setup(&Scenario::before());
    let err = run_single(&cfg, Tool::BuildPromptPatch, false).unwrap_err();
    assert!(matches!(err, OrchestratorError::Illegal(_)));
    assert_eq!(err.to_string(), "illegal transition: requires diagnosed, at start");
    assert_eq!(err.exit_code(), 2);

    let mut seen = vec![];
    for tool in Tool::ALL {
        let (m, outcome) = run_single(&cfg, tool, false).unwrap();
        assert_eq!(outcome, StageOutcome::Ok);
        let stored = RunManifest::load(&cfg.run_state_path()).unwrap();
        assert_eq!(stored.stage, m.stage);
        seen.push(stored.stage);
    }
    assert!(seen.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(seen.last(), Some(&Stage::DiffDone));

    assert!(matches!(run_single(&cfg, Tool::DiagnoseRbt, false), Err(OrchestratorError::Illegal(_))));
    // a finished run restarts on update_emobank
    let (m, _) = run_single(&cfg, Tool::UpdateEmobank, false).unwrap();
    assert_eq!(m.stage, Stage::EbUpdated);
    assert_eq!(m.records.len(), 1);
}

#[test]
fn missing_inputs_fail_before_any_stage() {
    let (dir, mut cfg) = setup(&Scenario::before());
    cfg.prompt = dir.path().join("nope.txt");
    let err = run_all(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(!cfg.run_state_path().exists());
}

#[test]
fn prompt_without_adaptive_section_degrades() {
    let (_dir, cfg) = setup(&Scenario::before());
    // a prompt without an adaptive section cannot be patched
    fs::write(&cfg.prompt, "BEGIN_CORE_IDENTITY\nbe kind\nEND_CORE_IDENTITY\n").unwrap();
    let m = run_all(&cfg).unwrap();
    assert_eq!(m.stage, Stage::DiffDone);
    assert!(m.fallback_used);
    assert!(!m.guard_aborted);
    assert_eq!(m.internal_thorns[0].tool, "build_prompt_patch");
}

#[test]
fn generation_leaves_target_repo_untouched() {
    let (_dir, cfg) = setup(&Scenario::before());
    let before = tree(&cfg.repo);
    run_all(&cfg).unwrap();
    assert_eq!(before, tree(&cfg.repo));
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = walk(root).into_iter().map(|p| (p.clone(), fs::read(&p).unwrap())).collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = vec![];
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
