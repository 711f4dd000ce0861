//! Persistent store of verified skills, archived candidates and the failure
//! pool.
//!
//! On disk a library is a directory:
//!
//! ```text
//! manifest.json                      schema version, skills, failures, candidates
//! skills/<nnn>-<slug>/option-<k>.json  one verified option: policy, sources, stats, verdict
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place, and
//! the manifest is written last, so an interrupted save leaves the previous
//! library readable.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use asd_core::dsl::FunctionSource;
use asd_core::trainer::TrainStats;
use asd_core::PolicyParams;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::assessor::Verdict;
use crate::fsutil::write_atomic;

pub const LIBRARY_SCHEMA_VERSION: u32 = 1;

/// Jaccard similarity at or above which two skill names are reported as
/// suspected semantic duplicates.
pub const DUPLICATE_SIMILARITY: f64 = 0.8;

/// Case-folded, whitespace-collapsed task text.
pub fn normalize_name(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Case-folded word set (words are maximal alphanumeric runs).
pub fn word_set(text: &str) -> BTreeSet<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_string).collect()
}

/// Word-set Jaccard similarity; two empty texts are identical.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (word_set(a), word_set(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Which policy another policy was warm-started from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRef {
    pub skill: String,
    pub option: usize,
}

/// Where in an evolutionary run an option or candidate came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub run_id: String,
    pub success_index: usize,
    pub generation: usize,
    pub candidate_index: usize,
    pub parent: Option<PolicyRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillOption {
    pub policy: PolicyParams,
    pub reward: FunctionSource,
    pub success: FunctionSource,
    pub stats: TrainStats,
    pub verdict: Verdict,
    pub lineage: Lineage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skill {
    pub name: String,
    pub description: String,
    pub options: Vec<SkillOption>,
    pub created_run: String,
}

impl Skill {
    /// Index of the option with the highest evaluation success rate; ties
    /// go to the earliest option.
    pub fn best_option(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, o) in self.options.iter().enumerate() {
            if best.is_none_or(|b| o.stats.eval_success_rate > self.options[b].stats.eval_success_rate) {
                best = Some(i);
            }
        }
        best
    }
}

/// A fast-positive behavior that the assessor rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub task: String,
    pub description: String,
    pub reward: FunctionSource,
    pub success: FunctionSource,
    pub eval_success_rate: f64,
    pub verdict: Verdict,
    pub lineage: Lineage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub task: String,
    pub description: String,
    pub reason: String,
    pub diagnostics: Vec<String>,
    pub attempts: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("library_purity_violation: option for '{skill}' has a negative verdict ({rationale})")]
    PurityViolation { skill: String, rationale: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}: invalid field '{field}': {message}")]
    Schema { file: PathBuf, field: String, message: String },
    #[error("{file}: library schema version {found} cannot be read by this build (expects {expected}); migrate the library first")]
    Version { file: PathBuf, found: String, expected: u32 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SkillLibrary {
    pub skills: Vec<Skill>,
    pub failures: Vec<FailureEntry>,
    pub candidates: Vec<CandidateEntry>,
    /// Pairs of skill names whose word sets are nearly identical.
    pub suspected_duplicates: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSkill {
    name: String,
    description: String,
    created_run: String,
    options: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    skills: Vec<ManifestSkill>,
    failures: Vec<FailureEntry>,
    candidates: Vec<CandidateEntry>,
    suspected_duplicates: Vec<(String, String)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LibraryError + '_ {
    move |source| LibraryError::Io { path: path.to_path_buf(), source }
}

/// Path-safe form of a skill name: ASCII alphanumerics joined by dashes, at most 48 characters.
pub fn slug(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect();
    let parts: Vec<&str> = s.split('-').filter(|p| !p.is_empty()).collect();
    let joined = parts.join("-");
    joined.chars().take(48).collect()
}

fn parse_json<T: DeserializeOwned>(file: &Path, text: &str) -> Result<T, LibraryError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| LibraryError::Schema {
        file: file.to_path_buf(),
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("library values serialise");
    out.push(b'\n');
    out
}

impl SkillLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn skill(&self, task: &str) -> Option<&Skill> {
        let name = normalize_name(task);
        self.skills.iter().find(|s| s.name == name)
    }

    pub fn failure(&self, task: &str) -> Option<&FailureEntry> {
        let name = normalize_name(task);
        self.failures.iter().find(|f| f.task == name)
    }

    pub fn option_count(&self) -> usize {
        self.skills.iter().map(|s| s.options.len()).sum()
    }

    /// Adds a verified option, creating the skill if needed and clearing the
    /// task from the failure pool. Options with a negative verdict are
    /// refused and leave the library untouched.
    pub fn add_option(&mut self, task: &str, option: SkillOption) -> Result<(), LibraryError> {
        let name = normalize_name(task);
        if !option.verdict.success {
            return Err(LibraryError::PurityViolation { skill: name, rationale: option.verdict.rationale.clone() });
        }
        if let Some(skill) = self.skills.iter_mut().find(|s| s.name == name) {
            skill.options.push(option);
        } else {
            for other in &self.skills {
                if jaccard(&other.name, &name) >= DUPLICATE_SIMILARITY {
                    self.suspected_duplicates.push((other.name.clone(), name.clone()));
                }
            }
            let created_run = option.lineage.run_id.clone();
            self.skills.push(Skill { name: name.clone(), description: task.trim().to_string(), options: vec![option], created_run });
        }
        self.failures.retain(|f| f.task != name);
        Ok(())
    }

    /// Adds `task` to the failure pool, or bumps its attempt count. Tasks
    /// that are already skills are left alone.
    pub fn record_failure(&mut self, task: &str, reason: &str, diagnostics: Vec<String>) {
        let name = normalize_name(task);
        if self.skills.iter().any(|s| s.name == name) {
            return;
        }
        match self.failures.iter_mut().find(|f| f.task == name) {
            Some(f) => {
                f.attempts += 1;
                f.reason = reason.to_string();
                f.diagnostics = diagnostics;
            }
            None => self.failures.push(FailureEntry {
                task: name,
                description: task.trim().to_string(),
                reason: reason.to_string(),
                diagnostics,
                attempts: 1,
            }),
        }
    }

    pub fn record_candidate(&mut self, candidate: CandidateEntry) {
        self.candidates.push(candidate);
    }

    /// Options whose verdict is negative, as `(skill, option index)`.
    pub fn purity_scan(&self) -> Vec<(String, usize)> {
        self.skills
            .iter()
            .flat_map(|s| {
                s.options.iter().enumerate().filter(|(_, o)| !o.verdict.success).map(|(i, _)| (s.name.clone(), i))
            })
            .collect()
    }

    /// Acquired skills and failed attempts as interpolated into proposal
    /// prompts. Options are not listed, so adding one leaves this unchanged.
    pub fn proposal_context(&self) -> String {
        let skills = if self.skills.is_empty() {
            "acquired skills: none".to_string()
        } else {
            let names: Vec<&str> = self.skills.iter().map(|s| s.description.as_str()).collect();
            format!("acquired skills ({}): {}", names.len(), names.join(", "))
        };
        let failures = if self.failures.is_empty() {
            "failed attempts: none".to_string()
        } else {
            let entries: Vec<String> = self
                .failures
                .iter()
                .map(|f| {
                    let tries = if f.attempts == 1 { "1 attempt".to_string() } else { format!("{} attempts", f.attempts) };
                    format!("{} ({}; {})", f.description, f.reason, tries)
                })
                .collect();
            format!("failed attempts ({}): {}", entries.len(), entries.join(", "))
        };
        format!("{skills}; {failures}")
    }

    fn option_path(index: usize, skill: &Skill, option: usize) -> String {
        format!("skills/{index:03}-{}/option-{option}.json", slug(&skill.name))
    }

    pub fn save(&self, root: &Path) -> Result<(), LibraryError> {
        std::fs::create_dir_all(root).map_err(io_err(root))?;
        let mut skills = Vec::with_capacity(self.skills.len());
        for (i, skill) in self.skills.iter().enumerate() {
            let mut files = Vec::with_capacity(skill.options.len());
            for (k, option) in skill.options.iter().enumerate() {
                let rel = Self::option_path(i, skill, k);
                let path = root.join(&rel);
                write_atomic(&path, &to_json(option)).map_err(io_err(&path))?;
                files.push(rel);
            }
            skills.push(ManifestSkill {
                name: skill.name.clone(),
                description: skill.description.clone(),
                created_run: skill.created_run.clone(),
                options: files,
            });
        }
        let manifest = Manifest {
            schema_version: LIBRARY_SCHEMA_VERSION,
            skills,
            failures: self.failures.clone(),
            candidates: self.candidates.clone(),
            suspected_duplicates: self.suspected_duplicates.clone(),
        };
        let path = root.join("manifest.json");
        write_atomic(&path, &to_json(&manifest)).map_err(io_err(&path))
    }

    /// Loads a saved library; a directory without a manifest is an empty
    /// library.
    pub fn load_or_empty(root: &Path) -> Result<Self, LibraryError> {
        if root.join("manifest.json").exists() {
            Self::load(root)
        } else {
            Ok(Self::new())
        }
    }

    pub fn load(root: &Path) -> Result<Self, LibraryError> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let raw: serde_json::Value = parse_json(&path, &text)?;
        let version = raw.get("schema_version");
        if version.and_then(|v| v.as_u64()) != Some(u64::from(LIBRARY_SCHEMA_VERSION)) {
            return Err(LibraryError::Version {
                file: path,
                found: version.map_or_else(|| "(missing)".to_string(), |v| v.to_string()),
                expected: LIBRARY_SCHEMA_VERSION,
            });
        }
        let manifest: Manifest = parse_json(&path, &text)?;
        let mut skills = Vec::with_capacity(manifest.skills.len());
        for (i, ms) in manifest.skills.into_iter().enumerate() {
            let mut options = Vec::with_capacity(ms.options.len());
            for rel in &ms.options {
                let opath = root.join(rel);
                let otext = std::fs::read_to_string(&opath).map_err(io_err(&opath))?;
                let option: SkillOption = parse_json(&opath, &otext)?;
                options.push(option);
            }
            if options.is_empty() {
                return Err(LibraryError::Schema {
                    file: path.clone(),
                    field: format!("skills[{i}].options"),
                    message: "a skill needs at least one option".into(),
                });
            }
            skills.push(Skill { name: ms.name, description: ms.description, options, created_run: ms.created_run });
        }
        Ok(Self {
            skills,
            failures: manifest.failures,
            candidates: manifest.candidates,
            suspected_duplicates: manifest.suspected_duplicates,
        })
    }
}
