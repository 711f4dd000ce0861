//! Independent judgment of behaviors that passed the fast success check.
//!
//! The assessor sees only a [`BehaviorRecord`] (keyframe summaries plus the
//! terminal scene state), never the functions the behavior was trained with.
//! In oracle mode a hand-written predicate for the task family decides; in
//! model mode the assessment prompt is sent through the gateway and the last
//! line of the answer must read SUCCESS or FAILURE.

use std::collections::BTreeMap;
use std::fmt;

use asd_core::sim::{keyframe_indices, Attached};
use asd_core::{SceneState, TabletopEnv, Trajectory, Vec3};
use serde::{Deserialize, Serialize};

use crate::gateway::{extract_code_blocks, ChatRequest, Gateway, GatewayError, TemplateId};

/// Number of keyframes per behavior record.
pub const DEFAULT_KEYFRAMES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub step: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub task: String,
    pub frames: Vec<Frame>,
    pub terminal: SceneState,
}

impl BehaviorRecord {
    /// All frames joined as they appear in the assessment prompt.
    pub fn render(&self) -> String {
        self.frames.iter().map(|f| f.text.as_str()).collect::<Vec<_>>().join("\n\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Vlm,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub success: bool,
    pub rationale: String,
    pub source: VerdictSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssessMode {
    Oracle,
    Vlm,
}

#[derive(Debug, thiserror::Error)]
pub enum AssessError {
    #[error("no oracle predicate is registered for task '{0}'")]
    NoPredicate(String),
    #[error("model assessment requires a gateway")]
    NoGateway,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Object {
    CubeA,
    CubeB,
    Plate,
    DrawerHandle,
}

impl Object {
    pub fn label(self) -> &'static str {
        match self {
            Object::CubeA => "cubeA",
            Object::CubeB => "cubeB",
            Object::Plate => "plate",
            Object::DrawerHandle => "drawer handle",
        }
    }

    fn attached(self) -> Attached {
        match self {
            Object::CubeA => Attached::CubeA,
            Object::CubeB => Attached::CubeB,
            Object::Plate => Attached::Plate,
            Object::DrawerHandle => Attached::DrawerHandle,
        }
    }

    fn pos(self, env: &TabletopEnv, s: &SceneState) -> Vec3<f64> {
        match self {
            Object::CubeA => s.cube_a_pos,
            Object::CubeB => s.cube_b_pos,
            Object::Plate => s.plate_pos,
            Object::DrawerHandle => env.handle_pos(s.drawer_fraction),
        }
    }

    /// Half height and half footprint of a movable object.
    fn extent(self, env: &TabletopEnv) -> (f64, f64) {
        let c = env.config();
        match self {
            Object::CubeA | Object::CubeB => (c.cube_half_size, c.cube_half_size),
            Object::Plate => (c.plate_half_height, c.plate_radius),
            Object::DrawerHandle => (0.0, 0.0),
        }
    }
}

/// Ground-truth predicate of one task family, evaluated on the terminal
/// state of a behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Reach(Object),
    Pick(Object),
    PlaceOn(Object, Object),
    PushTo(Object, Object),
    OpenDrawer,
    CloseDrawer,
}

/// Distance within which an object counts as reached (m).
pub const REACH_TOLERANCE: f64 = 0.05;
/// Height above which a held object counts as lifted (m).
pub const LIFT_HEIGHT: f64 = 0.1;
/// Vertical slack when checking that one object rests on another (m).
pub const REST_TOLERANCE: f64 = 0.005;
/// Planar distance within which a pushed object counts as arrived (m).
pub const PUSH_TOLERANCE: f64 = 0.08;
pub const DRAWER_OPEN: f64 = 0.8;
pub const DRAWER_CLOSED: f64 = 0.05;

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Reach(o) => write!(f, "reach({})", o.label()),
            Predicate::Pick(o) => write!(f, "pick({})", o.label()),
            Predicate::PlaceOn(a, b) => write!(f, "place_on({}, {})", a.label(), b.label()),
            Predicate::PushTo(a, b) => write!(f, "push_to({}, {})", a.label(), b.label()),
            Predicate::OpenDrawer => f.write_str("open_drawer"),
            Predicate::CloseDrawer => f.write_str("close_drawer"),
        }
    }
}

impl Predicate {
    pub fn holds(&self, env: &TabletopEnv, s: &SceneState) -> bool {
        match *self {
            Predicate::Reach(o) => s.ee_pos.dist(o.pos(env, s)) <= REACH_TOLERANCE,
            Predicate::Pick(o) => s.attached == o.attached() && o.pos(env, s).z > LIFT_HEIGHT,
            Predicate::PlaceOn(a, b) => {
                let (pa, pb) = (a.pos(env, s), b.pos(env, s));
                let (ha, _) = a.extent(env);
                let (hb, fb) = b.extent(env);
                s.attached != a.attached()
                    && s.attached != b.attached()
                    && (pa.x - pb.x).abs() <= fb
                    && (pa.y - pb.y).abs() <= fb
                    && (pa.z - pb.z - (ha + hb)).abs() <= REST_TOLERANCE
            }
            Predicate::PushTo(a, b) => {
                let (pa, pb) = (a.pos(env, s), b.pos(env, s));
                let (ha, _) = a.extent(env);
                let planar = ((pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2)).sqrt();
                s.attached != a.attached() && (pa.z - ha).abs() <= REST_TOLERANCE && planar <= PUSH_TOLERANCE
            }
            Predicate::OpenDrawer => s.drawer_fraction >= DRAWER_OPEN,
            Predicate::CloseDrawer => s.drawer_fraction <= DRAWER_CLOSED && s.attached != Attached::DrawerHandle,
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Objects named in `text`, in order of mention.
fn objects(words: &[String]) -> Vec<Object> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let next = words.get(i + 1).map(String::as_str);
        let found = match (words[i].as_str(), next) {
            ("cube", Some("a")) | ("cubea", _) => Some((Object::CubeA, 2 - usize::from(words[i] == "cubea"))),
            ("cube", Some("b")) | ("cubeb", _) => Some((Object::CubeB, 2 - usize::from(words[i] == "cubeb"))),
            ("plate", _) => Some((Object::Plate, 1)),
            ("drawer", Some("handle")) => Some((Object::DrawerHandle, 2)),
            ("handle", _) => Some((Object::DrawerHandle, 1)),
            _ => None,
        };
        match found {
            Some((o, width)) => {
                if !out.contains(&o) {
                    out.push(o);
                }
                i += width;
            }
            None => i += 1,
        }
    }
    out
}

/// Registry lookup: the ground-truth predicate of the task family `task`
/// belongs to, if any.
pub fn oracle_for(task: &str) -> Option<Predicate> {
    let w = words(task);
    let has = |xs: &[&str]| w.iter().any(|x| xs.contains(&x.as_str()));
    let objs = objects(&w);
    if has(&["drawer"]) {
        if has(&["open"]) {
            return Some(Predicate::OpenDrawer);
        }
        if has(&["close", "shut"]) {
            return Some(Predicate::CloseDrawer);
        }
    }
    if has(&["place", "put", "stack", "set", "drop"]) && objs.len() >= 2 {
        return Some(Predicate::PlaceOn(objs[0], objs[1]));
    }
    if has(&["pick", "lift", "grasp", "grab", "raise"]) && !objs.is_empty() {
        return Some(Predicate::Pick(objs[0]));
    }
    if has(&["push", "slide", "shove"]) && objs.len() >= 2 {
        return Some(Predicate::PushTo(objs[0], objs[1]));
    }
    if has(&["reach", "touch", "approach", "move", "go"]) && !objs.is_empty() {
        return Some(Predicate::Reach(*objs.last().expect("non-empty")));
    }
    None
}

/// Relations between scene entities that a viewer would read off a frame.
pub fn relations(env: &TabletopEnv, s: &SceneState) -> Vec<String> {
    let mut out = Vec::new();
    out.push(if s.gripper_aperture >= 0.5 { "gripper is open" } else { "gripper is closed" }.to_string());
    for o in [Object::CubeA, Object::CubeB, Object::Plate] {
        if s.attached == o.attached() {
            out.push(format!("{} is attached to gripper", o.label()));
            continue;
        }
        let p = o.pos(env, s);
        let (h, _) = o.extent(env);
        let mut support = "the table".to_string();
        for b in [Object::CubeA, Object::CubeB, Object::Plate] {
            if b == o || s.attached == b.attached() {
                continue;
            }
            let q = b.pos(env, s);
            let (hb, fb) = b.extent(env);
            if (p.x - q.x).abs() <= fb && (p.y - q.y).abs() <= fb && (p.z - q.z - (h + hb)).abs() <= REST_TOLERANCE {
                support = b.label().to_string();
            }
        }
        out.push(format!("{} rests on {}", o.label(), support));
        if s.attached == Attached::None && s.ee_pos.dist(p) <= env.config().grasp_radius {
            out.push(format!("{} is within grasp range", o.label()));
        }
    }
    if s.attached == Attached::DrawerHandle {
        out.push("drawer handle is held by gripper".to_string());
    }
    let pct = (s.drawer_fraction * 100.0).round() as i64;
    out.push(if pct == 0 { "drawer closed".to_string() } else { format!("drawer {pct}% open") });
    out
}

fn render_frame(env: &TabletopEnv, s: &SceneState, ordinal: usize, count: usize) -> String {
    let obs = env.observe(s);
    let mut lines = vec![format!("frame {}/{} (step {}):", ordinal + 1, count, s.step_index)];
    for f in env.schema().fields() {
        let vals: Vec<String> = obs[f.offset..f.offset + f.width()].iter().map(|v| format!("{v:.3}")).collect();
        let value = if vals.len() == 1 { vals[0].clone() } else { format!("({})", vals.join(", ")) };
        lines.push(format!("  {} = {} {}", f.name, value, f.unit));
    }
    lines.push(format!("  relations: {}", relations(env, s).join("; ")));
    lines.join("\n")
}

/// Keyframe summary of `traj`: `k` frames evenly spaced from the reset
/// state to the terminal state. A one-state trajectory is shown twice, as
/// start and end, so every record has at least two frames.
pub fn summarize_keyframes(env: &TabletopEnv, task: &str, traj: &Trajectory, k: usize) -> BehaviorRecord {
    let states = traj.states();
    let mut idx = keyframe_indices(states.len(), k.max(2));
    if idx.len() == 1 {
        idx.push(idx[0]);
    }
    let frames = idx
        .iter()
        .enumerate()
        .map(|(n, &i)| Frame { step: states[i].step_index, text: render_frame(env, states[i], n, idx.len()) })
        .collect();
    BehaviorRecord { task: task.to_string(), frames, terminal: traj.terminal_state.clone() }
}

/// Reads the verdict off the last non-empty line of a model answer.
pub fn parse_verdict(answer: &str) -> Verdict {
    let last = answer.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let word: String = last.chars().filter(|c| c.is_ascii_alphabetic()).collect::<String>().to_uppercase();
    let rationale = answer.trim().to_string();
    match word.as_str() {
        "SUCCESS" => Verdict { success: true, rationale, source: VerdictSource::Vlm },
        "FAILURE" => Verdict { success: false, rationale, source: VerdictSource::Vlm },
        _ => Verdict { success: false, rationale: format!("unparseable verdict: {rationale}"), source: VerdictSource::Vlm },
    }
}

/// Judges `record`. Oracle verdicts name the predicate that decided them.
pub fn assess(
    env: &TabletopEnv,
    record: &BehaviorRecord,
    mode: AssessMode,
    gateway: Option<&Gateway>,
) -> Result<Verdict, AssessError> {
    match mode {
        AssessMode::Oracle => {
            let p = oracle_for(&record.task).ok_or_else(|| AssessError::NoPredicate(record.task.clone()))?;
            Ok(Verdict { success: p.holds(env, &record.terminal), rationale: p.to_string(), source: VerdictSource::Oracle })
        }
        AssessMode::Vlm => {
            let gw = gateway.ok_or(AssessError::NoGateway)?;
            let ctx = BTreeMap::from([("task", record.task.clone()), ("keyframes", record.render())]);
            let text = crate::gateway::render_prompt(TemplateId::BehaviorAssessment, &ctx)?;
            let resp = gw.complete(&ChatRequest::new(TemplateId::BehaviorAssessment, text, 1, 0.0))?;
            let answer = &resp.completions[0];
            // a fenced answer is judged by its contents
            let body = extract_code_blocks(answer).pop().unwrap_or_else(|| answer.clone());
            Ok(parse_verdict(&body))
        }
    }
}
