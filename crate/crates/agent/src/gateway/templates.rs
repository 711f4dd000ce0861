//! Prompt templates and their renderer.
//!
//! Bodies contain `{name}` placeholders; `{{` and `}}` produce literal
//! braces. Rendering fails on a placeholder the context does not supply and
//! on a context entry no placeholder uses, so template/context drift is
//! caught immediately.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    TaskProposal,
    SuccessFn,
    RewardFn,
    RewardFeedbackError,
    RewardFeedbackStats,
    BehaviorAssessment,
    QuestDecomposition,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::TaskProposal,
        TemplateId::SuccessFn,
        TemplateId::RewardFn,
        TemplateId::RewardFeedbackError,
        TemplateId::RewardFeedbackStats,
        TemplateId::BehaviorAssessment,
        TemplateId::QuestDecomposition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::TaskProposal => "task_proposal",
            TemplateId::SuccessFn => "success_fn",
            TemplateId::RewardFn => "reward_fn",
            TemplateId::RewardFeedbackError => "reward_feedback_error",
            TemplateId::RewardFeedbackStats => "reward_feedback_stats",
            TemplateId::BehaviorAssessment => "behavior_assessment",
            TemplateId::QuestDecomposition => "quest_decomposition",
        }
    }

    pub fn parse(name: &str) -> Option<TemplateId> {
        TemplateId::ALL.into_iter().find(|t| t.name() == name)
    }

    /// Whether requests for this template go to the vision model.
    pub fn is_vision(self) -> bool {
        self == TemplateId::BehaviorAssessment
    }

    pub fn body(self) -> &'static str {
        match self {
            TemplateId::TaskProposal => TASK_PROPOSAL,
            TemplateId::SuccessFn => SUCCESS_FN,
            TemplateId::RewardFn => REWARD_FN,
            TemplateId::RewardFeedbackError => REWARD_FEEDBACK_ERROR,
            TemplateId::RewardFeedbackStats => REWARD_FEEDBACK_STATS,
            TemplateId::BehaviorAssessment => BEHAVIOR_ASSESSMENT,
            TemplateId::QuestDecomposition => QUEST_DECOMPOSITION,
        }
    }

    pub fn template(self) -> PromptTemplate {
        PromptTemplate { id: self, body: self.body() }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: &'static str,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(body: &str) -> Result<Vec<Piece<'_>>, String> {
    let mut out = Vec::new();
    let bytes = body.as_bytes();
    let (mut i, mut start) = (0, 0);
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push(Piece::Text(&body[start..i + 1]));
                i += 2;
                start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push(Piece::Text(&body[start..i + 1]));
                i += 2;
                start = i;
            }
            b'{' => {
                let close = body[i..].find('}').ok_or_else(|| format!("unterminated placeholder at byte {i}"))? + i;
                let name = &body[i + 1..close];
                if name.is_empty() || !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
                    return Err(format!("malformed placeholder '{{{name}}}'"));
                }
                out.push(Piece::Text(&body[start..i]));
                out.push(Piece::Slot(name));
                i = close + 1;
                start = i;
            }
            b'}' => return Err(format!("unmatched '}}' at byte {i}")),
            _ => i += 1,
        }
    }
    out.push(Piece::Text(&body[start..]));
    Ok(out)
}

impl PromptTemplate {
    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = Vec::new();
        for p in pieces(self.body).expect("built-in templates are well formed") {
            if let Piece::Slot(n) = p {
                if !names.contains(&n) {
                    names.push(n);
                }
            }
        }
        names
    }

    pub fn render(&self, context: &BTreeMap<&str, String>) -> Result<String, GatewayError> {
        let render_err = |m: String| GatewayError::Render { template: self.id, message: m };
        let parts = pieces(self.body).map_err(render_err)?;
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut used = Vec::new();
        for p in parts {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => {
                    let v = context.get(name).ok_or_else(|| render_err(format!("missing placeholder '{name}'")))?;
                    out.push_str(v);
                    used.push(name);
                }
            }
        }
        if let Some(extra) = context.keys().find(|k| !used.contains(k)) {
            return Err(render_err(format!("unknown placeholder '{extra}' supplied")));
        }
        Ok(out)
    }
}

/// Renders the built-in template `id`.
pub fn render_prompt(id: TemplateId, context: &BTreeMap<&str, String>) -> Result<String, GatewayError> {
    id.template().render(context)
}

/// Follow-up appended to a prompt whose previous answer was unusable.
pub fn with_rejection(prompt: &str, attempt: usize, reason: &str) -> String {
    format!(
        "{prompt}\n\nAttempt {attempt} was rejected before any training started:\n{reason}\n\
         Reply again, following the language rules exactly and putting the expression in one fenced block."
    )
}

const TASK_PROPOSAL: &str = r#"You are planning the curriculum of a robot arm with a parallel gripper working on a tabletop.
The scene is described by the observation schema below; nothing outside it exists.

{schema}

What the robot can already do, and what it has tried without success:
{library_context}

Propose exactly one new task for the robot to learn next. Good tasks
- are worth having as a reusable building block,
- need a single short motion rather than a sequence of chores,
- can be judged from the observation alone,
- extend what the robot already knows instead of repeating it.
Avoid tasks listed above, and be cautious about variations of tasks that failed.
Describe the task as one imperative sentence without parameters, inside a fenced block:
```
<task>
```"#;

const SUCCESS_FN: &str = r#"A robot arm must learn the task: "{task}".
Skills executed before this task started (empty if it starts from a reset):
{precedent_skills}

Write a success function: a boolean expression that is true exactly in the observation states
where the task counts as accomplished. It is checked after every step and the episode stops
as soon as it holds, so it must not be satisfied by the starting state of the task.

Observation schema:
{schema}

Expression language:
{grammar}

Verified functions of related skills, for reference:
{rag_hints}

Answer with the expression in a single fenced block."#;

const REWARD_FN: &str = r#"A robot arm must learn the task: "{task}".
Skills executed before this task started (empty if it starts from a reset):
{precedent_skills}

Training stops an episode as soon as this success function holds:
```
{success_fn}
```

Write a dense reward function: a scalar expression evaluated at every step, larger when the
robot is closer to accomplishing the task. Shape it so that progress toward success is
rewarded step by step; prev(field) gives the value of a field one step earlier.

Observation schema:
{schema}

Expression language:
{grammar}

Verified functions of related skills, for reference:
{rag_hints}

Answer with the expression in a single fenced block."#;

const REWARD_FEEDBACK_ERROR: &str = r#"A robot arm is learning the task: "{task}".
Episodes stop when this success function holds:
```
{success_fn}
```

Training with the reward function
```
{previous_reward}
```
was aborted by an evaluation error:
{error}

Write a corrected reward function that cannot hit this error.

Observation schema:
{schema}

Expression language:
{grammar}

Answer with the expression in a single fenced block."#;

const REWARD_FEEDBACK_STATS: &str = r#"A robot arm is learning the task: "{task}".
Episodes stop when this success function holds:
```
{success_fn}
```

The best reward function of the last round was
```
{previous_reward}
```
and training with it produced:
{stats}

Analyse which parts of the reward helped and which did not, then write an improved reward
function for the same task.

Observation schema:
{schema}

Expression language:
{grammar}

Answer with the expression in a single fenced block."#;

const BEHAVIOR_ASSESSMENT: &str = r#"You are reviewing a recorded robot behavior. The robot was asked to: "{task}".
Below are key frames of the episode in order, from the starting state to the final state.
Every frame lists the observation values and relations derived from them.

{keyframes}

Judge only from these frames whether the task was accomplished. Explain briefly, then finish
with a last line that is exactly SUCCESS or FAILURE."#;

const QUEST_DECOMPOSITION: &str = r#"A robot arm working on a tabletop has been given a long task: "{quest}".

Observation schema:
{schema}

What the robot can already do, and what it has tried without success:
{library_context}

Split the long task into a short ordered list of subtasks, each executable on its own right
after the previous one finishes. Reuse the exact wording of an acquired skill whenever a
subtask is one of them. Answer with a numbered list, one subtask per line:
1. <subtask>
2. <subtask>"#;
