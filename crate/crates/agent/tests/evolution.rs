mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use asd_agent::evolution::{
    learn_skill, render_rag_hints, select_survivor, skill_rag_retrieve, LearnContext, LearnError, LearnStart,
    LearningRunConfig,
};
use asd_agent::gateway::TemplateId;
use asd_agent::library::SkillLibrary;
use common::{env, fenced, option, quick_config, Probe};

const REACH_A_SUCCESS: &str = "dist(ee_pos, cubeA_pos) < 0.05";
const REACH_A_REWARD: &str = "-dist(ee_pos, cubeA_pos)";

fn run(probe: &Probe, library: &SkillLibrary, task: &str, config: &LearningRunConfig) -> Result<asd_agent::evolution::SkillOutcome, LearnError> {
    let env = env();
    let ctx = LearnContext { env: &env, gateway: &probe.gateway, library, run_id: "t", seed: 4 };
    learn_skill(&ctx, task, config, LearnStart::default())
}

/// Answers success prompts with `success`, reward prompts with `reward`.
fn fixed(success: &'static str, reward: &'static str) -> Probe {
    Probe::new(move |req, _| match req.template {
        TemplateId::SuccessFn => fenced(success),
        _ => fenced(reward),
    })
}

#[test]
fn three_valid_success_samples_take_three_calls() {
    let probe = fixed(REACH_A_SUCCESS, REACH_A_REWARD);
    let config = LearningRunConfig { reward_samples: 1, generations: 1, ..quick_config() };
    let out = run(&probe, &SkillLibrary::new(), "reach cube A", &config).unwrap();
    assert_eq!(probe.completions_for(TemplateId::SuccessFn), 3);
    assert_eq!(out.report.lineages.len(), 3);
    assert_eq!(out.report.success_samples.total, 3);
    assert_eq!(out.report.success_samples.invalid, 0);
}

#[test]
fn one_invalid_success_sample_costs_one_resample() {
    let probe = Probe::new(|req, i| match req.template {
        // the first batch's first sample is broken; the retry prompt is longer
        TemplateId::SuccessFn if i == 0 && !req.text.contains("was rejected") => fenced("exp(-dist(ee_pos,"),
        TemplateId::SuccessFn => fenced(REACH_A_SUCCESS),
        _ => fenced(REACH_A_REWARD),
    });
    let config = LearningRunConfig { reward_samples: 1, generations: 1, ..quick_config() };
    let out = run(&probe, &SkillLibrary::new(), "reach cube A", &config).unwrap();
    assert_eq!(probe.completions_for(TemplateId::SuccessFn), 4);
    assert_eq!(out.report.lineages.len(), 3);
    assert_eq!(out.report.success_samples.invalid, 1);
    assert!(out.report.success_diagnostics[0].contains("parse_error"), "{:?}", out.report.success_diagnostics);
    // the retry shows the model what went wrong
    let retry = probe.requests().into_iter().find(|r| r.text.contains("was rejected")).unwrap();
    assert!(retry.text.contains("parse_error"));
}

#[test]
fn unobtainable_success_functions_fail_the_task() {
    let probe = Probe::new(|_, _| "I cannot help with that.".to_string());
    let config = LearningRunConfig { resample_cap: 5, ..quick_config() };
    let err = run(&probe, &SkillLibrary::new(), "reach cube A", &config).unwrap_err();
    match err {
        LearnError::SuccessFnUnobtainable { diagnostics } => assert_eq!(diagnostics.len(), 3 + 5),
        other => panic!("{other}"),
    }
    assert_eq!(probe.completions_for(TemplateId::SuccessFn), 8);
    assert_eq!(probe.completions_for(TemplateId::RewardFn), 0, "no reward sampling without success functions");
}

#[test]
fn first_generation_prompt_carries_rag_hints_verbatim() {
    let mut library = SkillLibrary::new();
    library.add_option("reach cube A", option(REACH_A_REWARD, REACH_A_SUCCESS, 1.0, true, 1)).unwrap();
    let hits = skill_rag_retrieve("reach cube B", &library, 3);
    let hints = render_rag_hints(&hits);
    assert!(hints.contains(REACH_A_REWARD) && hints.contains("0.50"), "{hints}");

    let probe = fixed("dist(ee_pos, cubeB_pos) < 0.05", "-dist(ee_pos, cubeB_pos)");
    let config = LearningRunConfig { success_samples: 1, reward_samples: 1, generations: 1, ..quick_config() };
    run(&probe, &library, "reach cube B", &config).unwrap();
    let reqs = probe.requests();
    for t in [TemplateId::SuccessFn, TemplateId::RewardFn] {
        let r = reqs.iter().find(|r| r.template == t).unwrap();
        assert!(r.text.contains(&hints), "{t} prompt lacks the hints");
    }

    let probe = fixed("dist(ee_pos, cubeB_pos) < 0.05", "-dist(ee_pos, cubeB_pos)");
    run(&probe, &library, "reach cube B", &LearningRunConfig { rag: false, ..config }).unwrap();
    assert!(probe.requests().iter().all(|r| !r.text.contains(REACH_A_REWARD)));
}

#[test]
fn second_generation_prompt_carries_the_survivor_curve() {
    let probe = fixed(REACH_A_SUCCESS, REACH_A_REWARD);
    let config = LearningRunConfig { success_samples: 1, reward_samples: 2, generations: 2, ..quick_config() };
    let out = run(&probe, &SkillLibrary::new(), "reach cube A", &config).unwrap();
    let g0 = &out.report.lineages[0].generations[0];
    let survivor = &g0.candidates[g0.survivor.unwrap()];
    let curve: Vec<String> = survivor.stats.success_rate_curve.iter().map(|x| format!("{x:.2}")).collect();
    let expected = format!("[{}]", curve.join(", "));

    let feedback: Vec<_> = probe.requests().into_iter().filter(|r| r.template == TemplateId::RewardFeedbackStats).collect();
    assert_eq!(feedback.len(), 1);
    assert!(feedback[0].text.contains(&expected), "missing {expected}");
    assert!(feedback[0].text.contains(&format!("{:.2}", survivor.stats.eval_success_rate)));
    assert_eq!(g0.feedback, feedback[0].text);
}

#[test]
fn execution_errors_are_fed_back() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let probe = Probe::new(move |req, _| match req.template {
        TemplateId::SuccessFn => fenced(REACH_A_SUCCESS),
        TemplateId::RewardFn => {
            c.fetch_add(1, Ordering::SeqCst);
            fenced("1 / step_index")
        }
        _ => fenced(REACH_A_REWARD),
    });
    let config = LearningRunConfig { success_samples: 1, reward_samples: 1, generations: 2, ..quick_config() };
    let out = run(&probe, &SkillLibrary::new(), "reach cube A", &config).unwrap();
    let g0 = &out.report.lineages[0].generations[0];
    let diag = g0.candidates[0].stats.error.clone().expect("division by zero at step 0");
    let fb = probe.requests().into_iter().find(|r| r.template == TemplateId::RewardFeedbackError).unwrap();
    assert!(fb.text.contains(&diag.message), "feedback lacks '{}'", diag.message);
    assert!(fb.text.contains("1 / step_index"));
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}

#[test]
fn success_functions_are_frozen_for_the_run() {
    let probe = Probe::new(|req, i| match req.template {
        TemplateId::SuccessFn => fenced(["dist(ee_pos, cubeA_pos) < 0.05", "dist(ee_pos, cubeA_pos) < 0.04"][i % 2]),
        _ => fenced(REACH_A_REWARD),
    });
    let config = LearningRunConfig { success_samples: 2, reward_samples: 2, generations: 2, ..quick_config() };
    let out = run(&probe, &SkillLibrary::new(), "reach cube A", &config).unwrap();
    let mut firsts = Vec::new();
    for lineage in &out.report.lineages {
        let fns: Vec<_> = lineage
            .generations
            .iter()
            .flat_map(|g| &g.candidates)
            .map(|c| c.success_fn.clone().unwrap())
            .collect();
        assert_eq!(fns.len(), 4);
        assert!(fns.iter().all(|f| Arc::ptr_eq(f, &fns[0])), "a success function changed mid-run");
        assert_eq!(fns[0].source(), &lineage.success);
        firsts.push(fns[0].clone());
    }
    assert!(!Arc::ptr_eq(&firsts[0], &firsts[1]));
}

#[test]
fn candidate_bookkeeping_is_consistent() {
    let probe = fixed(REACH_A_SUCCESS, REACH_A_REWARD);
    let config = LearningRunConfig { success_samples: 2, reward_samples: 2, generations: 2, ..quick_config() };
    let out = run(&probe, &SkillLibrary::new(), "reach cube A", &config).unwrap();
    let r = &out.report;
    assert!(r.all_candidates().count() <= 2 * 2 * 2);
    for c in r.all_candidates() {
        if c.slow_verdict.is_some() {
            assert!(c.fast_verdict, "a negative was assessed");
        }
        assert_eq!(c.fast_verdict, c.stats.error.is_none() && c.stats.eval_success_rate > 0.0);
    }
    for l in &r.lineages {
        for g in &l.generations {
            let fitness: Vec<Option<f64>> =
                g.candidates.iter().map(|c| c.stats.error.is_none().then_some(c.stats.eval_success_rate)).collect();
            assert_eq!(g.survivor, select_survivor(&fitness));
        }
    }
    let assessed = r.survivors().filter(|c| c.slow_verdict.is_some()).count();
    assert_eq!(out.options.len() + out.candidates.len(), assessed);
    assert!(out.options.iter().all(|o| o.verdict.success));
    assert_eq!(r.calls, probe.gateway.calls());
}

#[test]
fn always_true_success_is_caught_by_the_assessor() {
    let probe = fixed("true", REACH_A_REWARD);
    let config = LearningRunConfig { success_samples: 1, reward_samples: 1, generations: 2, ..quick_config() };
    let out = run(&probe, &SkillLibrary::new(), "reach cube A", &config).unwrap();
    assert!(out.report.lineages[0].satisfied_at_start);
    let survivors: Vec<_> = out.report.survivors().collect();
    assert!(survivors.iter().all(|c| c.stats.eval_success_rate == 1.0 && c.fast_verdict));
    assert!(survivors.iter().all(|c| c.slow_verdict.as_ref().is_some_and(|v| !v.success)));
    assert!(out.options.is_empty());
    assert_eq!(out.candidates.len(), 2);
    let mut library = SkillLibrary::new();
    out.commit(&mut library).unwrap();
    assert!(library.is_empty());
    assert_eq!(library.candidates.len(), 2);
    assert_eq!(library.failure("reach cube A").unwrap().reason, "every fast-positive behavior was rejected by the assessor");
}

#[test]
fn stop_on_first_halts_after_the_first_verified_option() {
    let probe = fixed(REACH_A_SUCCESS, REACH_A_REWARD);
    let config = LearningRunConfig { stop_on_first: true, ..LearningRunConfig::default() };
    let out = run(&probe, &SkillLibrary::new(), "reach cube A", &config).unwrap();
    assert!(out.report.stopped_early);
    assert_eq!(out.options.len(), 1);
    // 3 success samples, then one generation of 3 rewards
    assert_eq!(out.report.calls_to_first_option, Some(6));
    assert_eq!(out.report.calls, 6);
}

#[test]
fn learning_is_deterministic() {
    let config = LearningRunConfig { success_samples: 1, reward_samples: 2, generations: 2, ..quick_config() };
    let a = run(&fixed(REACH_A_SUCCESS, REACH_A_REWARD), &SkillLibrary::new(), "reach cube A", &config).unwrap();
    let b = run(&fixed(REACH_A_SUCCESS, REACH_A_REWARD), &SkillLibrary::new(), "reach cube A", &config).unwrap();
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    assert_eq!(a.options, b.options);
}

#[test]
fn rag_retrieval_scores_by_word_overlap() {
    let mut library = SkillLibrary::new();
    assert!(skill_rag_retrieve("reach cube B", &library, 3).is_empty());
    library.add_option("reach cube A", option(REACH_A_REWARD, REACH_A_SUCCESS, 1.0, true, 1)).unwrap();
    library.add_option("open the drawer", option("drawer_fraction", "drawer_fraction > 0.8", 1.0, true, 2)).unwrap();
    library.add_option("reach cube B", option("-dist(ee_pos, cubeB_pos)", "dist(ee_pos, cubeB_pos) < 0.05", 1.0, true, 3)).unwrap();

    let hits = skill_rag_retrieve("reach cube B", &library, 3);
    assert_eq!(hits[0].skill, "reach cube B");
    assert_eq!(hits[0].score, 1.0);
    // {reach, cube, a} vs {reach, cube, b}: 2 shared of 4 distinct
    assert_eq!(hits[1].skill, "reach cube A");
    assert_eq!(hits[1].score, 0.5);
    assert_eq!(hits.len(), 2, "no overlap, no hit");

    let top1 = skill_rag_retrieve("Reach  CUBE b", &library, 1);
    assert_eq!(top1.len(), 1);
    assert_eq!(top1[0].score, 1.0);
}

#[test]
fn rag_ties_keep_library_order_and_use_the_best_option() {
    let mut library = SkillLibrary::new();
    library.add_option("push cube A", option("0", "true", 0.5, true, 1)).unwrap();
    library.add_option("lift cube A", option("1", "true", 0.5, true, 2)).unwrap();
    library.add_option("lift cube A", option("2", "true", 0.9, true, 3)).unwrap();
    let hits = skill_rag_retrieve("move cube A", &library, 3);
    assert_eq!(hits.iter().map(|h| h.skill.as_str()).collect::<Vec<_>>(), ["push cube A", "lift cube A"]);
    assert_eq!(hits[0].score, hits[1].score);
    assert_eq!(hits[1].reward.text, "2");
}

#[test]
fn invalid_config_is_rejected() {
    let probe = fixed(REACH_A_SUCCESS, REACH_A_REWARD);
    let config = LearningRunConfig { generations: 0, ..quick_config() };
    assert!(matches!(run(&probe, &SkillLibrary::new(), "reach cube A", &config), Err(LearnError::Config(_))));
    assert_eq!(probe.gateway.calls(), 0);
}
