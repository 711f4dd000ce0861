mod common;

use std::path::Path;

use asd_agent::evolution::{LearningRunConfig, SampleCounts};
use asd_agent::gateway::{ChatRequest, TemplateId};
use asd_agent::library::SkillLibrary;
use asd_agent::orchestrator::{
    ablation_ratio, compute_metrics, discovery_loop, fmt_ratio, propose_next_task, render_ablation, render_table,
    AblationRow, CandidateFlags, DiscoveryConfig, OrchestratorError, RawRecord, CHECKPOINT_FILE, REPORT_JSON_FILE,
    REPORT_TEXT_FILE,
};
use common::{env, fenced, option, quick_config, Probe};

fn flags(success_positive: bool, survivor: bool, fast: bool, slow: Option<bool>) -> CandidateFlags {
    CandidateFlags { success_positive, eval_success_rate: if success_positive { 0.8 } else { 0.0 }, error: false, survivor, fast_verdict: fast, slow_verdict: slow }
}

#[test]
fn success_positive_fraction_counts_all_candidates() {
    let record = RawRecord {
        task: "reach cube A".into(),
        candidates: vec![flags(true, true, true, Some(true)), flags(false, false, false, None), flags(true, false, true, None)],
        samples: SampleCounts { total: 4, invalid: 1 },
        options: 1,
        archived: 0,
        calls: 7,
    };
    let row = compute_metrics(&record);
    assert!((row.sp.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((row.sr.unwrap() - 1.6 / 3.0).abs() < 1e-12);
    assert_eq!(row.se, Some(0.25));
    assert_eq!(row.ee, Some(0.0));
    assert_eq!((row.sp_star, row.sp_v, row.agreement), (Some(1.0), Some(1.0), Some(1.0)));
    assert_eq!(row.status, "acquired");
    assert_eq!(fmt_ratio(row.sp), "0.67");
}

#[test]
fn every_survivor_rejected() {
    let record = RawRecord {
        task: "pick up cube A".into(),
        candidates: vec![flags(true, true, true, Some(false)), flags(true, true, true, Some(false))],
        samples: SampleCounts { total: 2, invalid: 0 },
        options: 0,
        archived: 2,
        calls: 4,
    };
    let row = compute_metrics(&record);
    assert_eq!(row.sp_v, Some(0.0));
    assert_eq!(row.agreement, Some(0.0));
    assert_eq!(row.options + row.candidates, 2, "every survivor is either an option or an archived candidate");
    assert_eq!(row.status, "failed");
}

#[test]
fn empty_denominators_print_as_dashes() {
    let row = compute_metrics(&RawRecord { task: "push the plate".into(), ..RawRecord::default() });
    assert_eq!((row.sp, row.sr, row.se, row.ee, row.sp_star, row.sr_star, row.sp_v, row.agreement), (None, None, None, None, None, None, None, None));
    let table = render_table(&[row]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("S.P.v") && lines[0].contains("#O."));
    assert_eq!(lines[1].split_whitespace().filter(|c| *c == "-").count(), 8);
}

#[test]
fn ablation_ratio_is_a_plain_quotient() {
    assert_eq!(ablation_ratio(Some(4), Some(8)), Some(0.5));
    assert_eq!(ablation_ratio(Some(6), Some(6)), Some(1.0));
    assert_eq!(ablation_ratio(Some(9), Some(6)), Some(1.5), "ratios above one are reported, not clipped");
    assert_eq!(ablation_ratio(Some(3), None), None);
    let rows = [
        AblationRow { task: "reach cube A".into(), calls_with: Some(6), calls_without: Some(6), ratio: Some(1.0) },
        AblationRow { task: "pick up cube A".into(), calls_with: None, calls_without: Some(9), ratio: None },
    ];
    let text = render_ablation(&rows);
    assert!(text.lines().nth(1).unwrap().ends_with("1.00"));
    assert!(text.lines().nth(2).unwrap().ends_with('-'));
}

#[test]
fn duplicate_proposals_are_resampled_once() {
    let env = env();
    let mut lib = SkillLibrary::new();
    lib.add_option("reach cube A", option("0", "true", 1.0, true, 0)).unwrap();
    lib.record_failure("open the drawer", "no verified behavior", vec![]);

    let probe = Probe::new(|req, _| if req.text.contains("repeats") { fenced("pick up cube A") } else { fenced("Reach cube A.") });
    let p = propose_next_task(&probe.gateway, &env, &lib, &LearningRunConfig::default()).unwrap();
    assert_eq!((p.task.as_str(), p.duplicate), ("pick up cube A", false));
    let reqs = probe.requests();
    assert_eq!(reqs.len(), 2);
    assert!(reqs[0].text.contains("open the drawer (no verified behavior; 1 attempt)"), "failure pool shown to the proposer");
    assert!(reqs[1].text.contains("repeats the acquired skill \"reach cube A\""));

    let stubborn = Probe::new(|_, _| fenced("REACH cube A"));
    let p = propose_next_task(&stubborn.gateway, &env, &lib, &LearningRunConfig::default()).unwrap();
    assert!(p.duplicate);
    assert_eq!(stubborn.gateway.calls(), 2);
}

#[test]
fn proposals_without_a_task_give_up_after_the_cap() {
    let env = env();
    let probe = Probe::new(|_, _| "You could learn to reach cube A.".to_string());
    let config = LearningRunConfig { resample_cap: 3, ..LearningRunConfig::default() };
    let err = propose_next_task(&probe.gateway, &env, &SkillLibrary::new(), &config).unwrap_err();
    assert!(matches!(err, OrchestratorError::ProposalUnextractable { attempts: 4 }));
    assert_eq!(probe.gateway.calls(), 4);
}

/// Proposes reach cube A, then open the drawer, then an unlearnable push,
/// depending only on what the library already mentions; function answers
/// depend only on the task in the prompt.
fn curriculum(req: &ChatRequest, _: usize) -> String {
    let t = &req.text;
    match req.template {
        TemplateId::TaskProposal => {
            let context = t.lines().find(|l| l.starts_with("acquired skills")).unwrap_or("");
            if !context.contains("reach cube A") {
                fenced("reach cube A")
            } else if !context.contains("open the drawer") {
                fenced("open the drawer")
            } else {
                fenced("push cube B off the table")
            }
        }
        TemplateId::SuccessFn if t.contains("push cube B") => fenced("cubeB_pos.w > 1"),
        TemplateId::SuccessFn if t.contains("open the drawer") => fenced("drawer_fraction > 0.8"),
        TemplateId::SuccessFn => fenced("dist(ee_pos, cubeA_pos) < 0.05"),
        _ if t.contains("open the drawer") => fenced("drawer_fraction - dist(ee_pos, drawer_handle_pos)"),
        _ => fenced("-dist(ee_pos, cubeA_pos)"),
    }
}

fn loop_config(max_proposals: usize) -> DiscoveryConfig {
    let learning = LearningRunConfig { success_samples: 1, reward_samples: 1, generations: 1, rag: false, resample_cap: 1, ..quick_config() };
    DiscoveryConfig { max_proposals, seed: 5, learning }
}

fn file(root: &Path, name: &str) -> String {
    std::fs::read_to_string(root.join(name)).unwrap()
}

#[test]
fn zero_proposals_make_no_calls() {
    let env = env();
    let dir = tempfile::tempdir().unwrap();
    let probe = Probe::new(|_, _| panic!("no call expected"));
    let out = discovery_loop(&env, &probe.gateway, dir.path(), &loop_config(0)).unwrap();
    assert!(out.report.entries.is_empty());
    assert_eq!(out.library, SkillLibrary::new());
    assert_eq!(probe.gateway.calls(), 0);
    assert!(file(dir.path(), REPORT_TEXT_FILE).contains("skills 0"));
}

#[test]
fn failed_tasks_land_in_the_pool_and_the_loop_continues() {
    let env = env();
    let dir = tempfile::tempdir().unwrap();
    let probe = Probe::new(curriculum);
    let out = discovery_loop(&env, &probe.gateway, dir.path(), &loop_config(3)).unwrap();
    let tasks: Vec<&str> = out.report.entries.iter().map(|e| e.task.as_str()).collect();
    assert_eq!(tasks, ["reach cube A", "open the drawer", "push cube B off the table"]);
    let last = &out.report.entries[2];
    assert_eq!(last.row.status, "failed");
    assert!(last.error.is_some());
    let f = out.library.failure("push cube B off the table").unwrap();
    assert_eq!(f.reason, "success_fn_unobtainable");
    assert!(!f.diagnostics.is_empty());
    // the rows add up to the library
    let options: usize = out.report.entries.iter().map(|e| e.row.options).sum();
    assert_eq!(options, out.library.option_count());
    assert_eq!(out.report.gateway_calls, probe.gateway.calls());
    let calls: u64 = out.report.entries.iter().map(|e| e.record.calls).sum();
    assert_eq!(calls + 3, probe.gateway.calls(), "three proposal calls on top of the learning calls");
    assert_eq!(SkillLibrary::load(dir.path()).unwrap(), out.library);
    assert!(out.library.purity_scan().is_empty());
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let env = env();
    let whole = tempfile::tempdir().unwrap();
    let probe = Probe::new(curriculum);
    let full = discovery_loop(&env, &probe.gateway, whole.path(), &loop_config(3)).unwrap();

    let parts = tempfile::tempdir().unwrap();
    let first = Probe::new(curriculum);
    discovery_loop(&env, &first.gateway, parts.path(), &loop_config(2)).unwrap();
    assert!(parts.path().join(CHECKPOINT_FILE).exists());
    let second = Probe::new(curriculum);
    let resumed = discovery_loop(&env, &second.gateway, parts.path(), &loop_config(3)).unwrap();

    // the resumed process only worked on the third task
    let proposals = second.requests().iter().filter(|r| r.template == TemplateId::TaskProposal).count();
    assert_eq!(proposals, 1);
    assert_eq!(resumed.library, full.library);
    assert_eq!(resumed.report, full.report);
    assert_eq!(file(parts.path(), REPORT_JSON_FILE), file(whole.path(), REPORT_JSON_FILE));
    assert_eq!(file(parts.path(), REPORT_TEXT_FILE), file(whole.path(), REPORT_TEXT_FILE));
}

#[test]
fn broken_checkpoint_is_reported() {
    let env = env();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(CHECKPOINT_FILE), "{\"version\": 1").unwrap();
    let probe = Probe::new(curriculum);
    let err = discovery_loop(&env, &probe.gateway, dir.path(), &loop_config(1)).err().unwrap();
    assert!(matches!(err, OrchestratorError::Checkpoint { .. }), "{err}");
}
