mod common;

use std::collections::BTreeSet;
use std::path::Path;

use asd_agent::library::{CandidateEntry, LibraryError, Lineage, SkillLibrary, LIBRARY_SCHEMA_VERSION};
use asd_core::dsl::FunctionSource;
use common::{option, verdict};
use proptest::prelude::*;

fn three_skills() -> SkillLibrary {
    let mut lib = SkillLibrary::new();
    lib.add_option("Reach cube A", option("-dist(ee_pos, cubeA_pos)", "dist(ee_pos, cubeA_pos) < 0.05", 0.97, true, 1)).unwrap();
    lib.add_option("reach cube A", option("exp(-dist(ee_pos, cubeA_pos))", "dist(ee_pos, cubeA_pos) < 0.05", 0.91, true, 2)).unwrap();
    lib.add_option("pick up cube A", option("cubeA_pos.z", "cubeA_pos.z > 0.1", 0.93, true, 3)).unwrap();
    lib.add_option("open the drawer", option("drawer_fraction", "drawer_fraction > 0.8", 1.0, true, 4)).unwrap();
    lib.record_failure("push the plate", "no verified behavior", vec!["d1".into()]);
    lib.record_candidate(CandidateEntry {
        task: "reach cube b".into(),
        description: "reach cube B".into(),
        reward: FunctionSource::reward("0"),
        success: FunctionSource::success("true"),
        eval_success_rate: 1.0,
        verdict: verdict(false),
        lineage: Lineage { run_id: "r".into(), success_index: 0, generation: 1, candidate_index: 2, parent: None },
    });
    lib
}

fn weight_bits(lib: &SkillLibrary) -> Vec<u64> {
    lib.skills
        .iter()
        .flat_map(|s| &s.options)
        .flat_map(|o| o.policy.to_flat())
        .map(f64::to_bits)
        .collect()
}

#[test]
fn first_and_second_option() {
    let mut lib = SkillLibrary::new();
    lib.add_option("reach cube A", option("0", "true", 1.0, true, 1)).unwrap();
    assert_eq!((lib.len(), lib.option_count()), (1, 1));
    lib.add_option("  REACH cube   a ", option("0", "true", 1.0, true, 2)).unwrap();
    assert_eq!((lib.len(), lib.option_count()), (1, 2));
    assert_eq!(lib.skills[0].description, "reach cube A");
}

#[test]
fn negative_verdict_is_refused_and_changes_nothing() {
    let mut lib = three_skills();
    let before = lib.clone();
    let err = lib.add_option("reach cube A", option("0", "true", 1.0, false, 9)).unwrap_err();
    assert!(matches!(err, LibraryError::PurityViolation { .. }));
    assert!(err.to_string().starts_with("library_purity_violation"));
    assert_eq!(lib, before);
    assert!(lib.purity_scan().is_empty());
}

#[test]
fn failure_pool_bookkeeping() {
    let mut lib = SkillLibrary::new();
    lib.record_failure("open the drawer", "no verified behavior", vec![]);
    assert_eq!(lib.failures.len(), 1);
    lib.record_failure("Open the  drawer", "every fast-positive behavior was rejected by the assessor", vec![]);
    assert_eq!(lib.failures.len(), 1);
    assert_eq!(lib.failures[0].attempts, 2);
    // a verified option upgrades the task out of the pool
    lib.add_option("open the drawer", option("0", "true", 1.0, true, 1)).unwrap();
    assert!(lib.failures.is_empty());
    lib.record_failure("open the drawer", "later failure", vec![]);
    assert!(lib.failures.is_empty(), "a skill never re-enters the failure pool");
}

#[test]
fn round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let lib = three_skills();
    lib.save(dir.path()).unwrap();
    let back = SkillLibrary::load(dir.path()).unwrap();
    assert_eq!(back, lib);
    assert_eq!(weight_bits(&back), weight_bits(&lib));
    assert!(!back.candidates[0].verdict.success, "archived candidate retrievable");
    // saving the loaded copy reproduces the files byte for byte
    let dir2 = tempfile::tempdir().unwrap();
    back.save(dir2.path()).unwrap();
    assert_eq!(read_tree(dir.path()), read_tree(dir2.path()));
}

#[test]
fn empty_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    SkillLibrary::new().save(dir.path()).unwrap();
    assert_eq!(SkillLibrary::load(dir.path()).unwrap(), SkillLibrary::new());
    let missing = dir.path().join("nowhere");
    assert_eq!(SkillLibrary::load_or_empty(&missing).unwrap(), SkillLibrary::new());
    assert!(matches!(SkillLibrary::load(&missing), Err(LibraryError::Io { .. })));
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn one_directory_per_skill_and_no_stray_files() {
    let dir = tempfile::tempdir().unwrap();
    three_skills().save(dir.path()).unwrap();
    let files: Vec<String> = read_tree(dir.path()).into_iter().map(|(p, _)| p).collect();
    assert_eq!(
        files,
        [
            "manifest.json",
            "skills/000-reach-cube-a/option-0.json",
            "skills/000-reach-cube-a/option-1.json",
            "skills/001-pick-up-cube-a/option-0.json",
            "skills/002-open-the-drawer/option-0.json",
        ]
    );
}

#[test]
fn corrupted_option_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    three_skills().save(dir.path()).unwrap();
    let path = dir.path().join("skills/001-pick-up-cube-a/option-0.json");
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    v["stats"]["eval_success_rate"] = serde_json::json!("high");
    std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
    match SkillLibrary::load(dir.path()) {
        Err(LibraryError::Schema { file, field, .. }) => {
            assert_eq!(file, path);
            assert_eq!(field, "stats.eval_success_rate");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn corrupted_manifest_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    three_skills().save(dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    v["failures"][0]["attempts"] = serde_json::json!(-3);
    std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
    let err = SkillLibrary::load(dir.path()).unwrap_err();
    assert!(matches!(&err, LibraryError::Schema { field, .. } if field == "failures[0].attempts"), "{err}");

    std::fs::write(&path, b"{ not json").unwrap();
    assert!(matches!(SkillLibrary::load(dir.path()), Err(LibraryError::Schema { .. })));
}

#[test]
fn other_schema_versions_need_migration() {
    let dir = tempfile::tempdir().unwrap();
    three_skills().save(dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(v["schema_version"], LIBRARY_SCHEMA_VERSION);
    v["schema_version"] = serde_json::json!(LIBRARY_SCHEMA_VERSION + 1);
    std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
    let err = SkillLibrary::load(dir.path()).unwrap_err();
    assert!(matches!(err, LibraryError::Version { .. }));
    assert!(err.to_string().contains("migrate"));
}

#[test]
fn proposal_context_lists_names_once() {
    let mut lib = SkillLibrary::new();
    lib.add_option("reach cube A", option("0", "true", 1.0, true, 1)).unwrap();
    lib.add_option("open the drawer", option("0", "true", 1.0, true, 2)).unwrap();
    lib.record_failure("push the plate", "no verified behavior", vec![]);
    let text = lib.proposal_context();
    for name in ["reach cube A", "open the drawer", "push the plate"] {
        assert_eq!(text.matches(name).count(), 1, "{name} in {text}");
    }
    assert!(text.contains("no verified behavior"));
    lib.add_option("reach cube A", option("1", "true", 1.0, true, 3)).unwrap();
    assert_eq!(lib.proposal_context(), text);
}

#[test]
fn near_duplicates_are_logged_not_blocked() {
    let mut lib = SkillLibrary::new();
    lib.add_option("pick up the cube A", option("0", "true", 1.0, true, 1)).unwrap();
    lib.add_option("pick up cube A", option("0", "true", 1.0, true, 2)).unwrap();
    assert_eq!(lib.len(), 2);
    assert_eq!(lib.suspected_duplicates, [("pick up the cube a".to_string(), "pick up cube a".to_string())]);
}

#[derive(Debug, Clone)]
enum Op {
    Add(usize, bool),
    Fail(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![(0usize..5, any::<bool>()).prop_map(|(t, ok)| Op::Add(t, ok)), (0usize..5).prop_map(Op::Fail)]
}

const TASKS: [&str; 5] = ["reach cube A", "Reach Cube A", "pick up cube B", "open the drawer", "push the plate"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn library_invariants_hold_under_any_operation_sequence(ops in prop::collection::vec(op(), 0..30)) {
        let mut lib = SkillLibrary::new();
        for (i, op) in ops.iter().enumerate() {
            let before = lib.clone();
            match *op {
                Op::Add(t, ok) => {
                    let r = lib.add_option(TASKS[t], option("0", "true", 0.5, ok, i as u64));
                    prop_assert_eq!(r.is_ok(), ok);
                    if !ok {
                        prop_assert_eq!(&lib, &before);
                    }
                }
                Op::Fail(t) => lib.record_failure(TASKS[t], "no verified behavior", vec![]),
            }
            // existing skills are never removed or altered, only extended
            for s in &before.skills {
                let now = lib.skill(&s.name).unwrap();
                prop_assert_eq!(&now.options[..s.options.len()], &s.options[..]);
            }
            prop_assert!(lib.purity_scan().is_empty());
            let names: BTreeSet<&str> = lib.skills.iter().map(|s| s.name.as_str()).collect();
            prop_assert_eq!(names.len(), lib.skills.len());
            prop_assert!(lib.failures.iter().all(|f| !names.contains(f.task.as_str())));
            prop_assert!(lib.skills.iter().all(|s| !s.options.is_empty()));
        }
    }

    #[test]
    fn weights_survive_storage_bit_exactly(weights in prop::collection::vec(
        prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), Just(f64::MIN_POSITIVE / 3.0), Just(-0.0)],
        1..64,
    )) {
        let mut o = option("0", "true", 1.0, true, 0);
        for (w, v) in o.policy.w1.iter_mut().zip(weights.iter().cycle()) {
            *w = *v;
        }
        let mut lib = SkillLibrary::new();
        lib.add_option("reach cube A", o).unwrap();
        let dir = tempfile::tempdir().unwrap();
        lib.save(dir.path()).unwrap();
        let back = SkillLibrary::load(dir.path()).unwrap();
        prop_assert_eq!(weight_bits(&back), weight_bits(&lib));
    }
}
