//! The closed expression language in which generated reward and success
//! functions are written.
//!
//! A source goes through [`parse`], then [`check`] against the observation
//! schema, and is finally lowered into a [`CheckedFn`] whose evaluation is
//! pure, allocation-free and bounded. The language has no loops, no
//! assignment, no user functions and no I/O.

mod ast;
mod check;
mod lexer;
mod parser;
mod pretty;
mod program;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use ast::{Ast, Axis, BinOp, Expr, ExprKind, Span};
pub use check::{check, infer_type, Builtin, Type};
pub use pretty::pretty;
pub use program::Program;

use crate::num::Scalar;
use crate::sim::ObservationSchema;
use program::Output;

/// Maximum expression depth accepted by the checker.
pub const MAX_DEPTH: usize = 32;

/// Tolerance of the `==` comparison.
pub const APPROX_EQ_EPS: f64 = 1e-6;

/// Grammar reference interpolated into generation prompts.
pub const GRAMMAR_DOC: &str = r#"Functions are single expressions in a small language (no statements, no imports):

expr    := or
or      := and { "or" and }
and     := not { "and" not }
not     := "not" not | cmp
cmp     := sum [ ("<" | "<=" | ">" | ">=" | "==") sum ]
sum     := product { ("+" | "-") product }
product := unary { ("*" | "/") unary }
unary   := "-" unary | postfix
postfix := primary { "." ("x" | "y" | "z") }
primary := number | "true" | "false" | field | call | "(" expr ")"
call    := name "(" [ expr { "," expr } ] ")"

Types: scalar, vec3 (observation vector fields only) and boolean.
Fields: every name of the observation schema; vec3 fields expose .x .y .z.
Built-ins:
  abs(s) exp(s) tanh(s) min(s, s) max(s, s) clamp(s, lo, hi)   -> scalar
  dist(v, v)                                                   -> scalar (Euclidean)
  prev(field)   value of a field at the previous step (reward functions only)
  if(cond, a, b) lazy choice; a and b are both scalar or both boolean
Comparisons are strict where written strict; "==" means |a - b| <= 1e-6.
"and"/"or" short-circuit. Any NaN or infinite intermediate value is an error.
A reward function evaluates to a scalar; a success function to a boolean.
Lines starting with '#' are comments."#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FnKind {
    Reward,
    Success,
}

impl FnKind {
    pub fn name(self) -> &'static str {
        match self {
            FnKind::Reward => "reward",
            FnKind::Success => "success",
        }
    }
}

/// Verbatim function text as produced by the generator.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FunctionSource {
    pub text: String,
    pub kind: FnKind,
}

impl FunctionSource {
    pub fn new(text: impl Into<String>, kind: FnKind) -> Self {
        Self { text: text.into(), kind }
    }

    pub fn reward(text: impl Into<String>) -> Self {
        Self::new(text, FnKind::Reward)
    }

    pub fn success(text: impl Into<String>) -> Self {
        Self::new(text, FnKind::Success)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticCategory {
    ParseError,
    UnknownIdentifier,
    TypeError,
    ArityError,
    DepthExceeded,
    NonfiniteResult,
}

impl DiagnosticCategory {
    pub fn name(self) -> &'static str {
        match self {
            DiagnosticCategory::ParseError => "parse_error",
            DiagnosticCategory::UnknownIdentifier => "unknown_identifier",
            DiagnosticCategory::TypeError => "type_error",
            DiagnosticCategory::ArityError => "arity_error",
            DiagnosticCategory::DepthExceeded => "depth_exceeded",
            DiagnosticCategory::NonfiniteResult => "nonfinite_result",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub category: DiagnosticCategory,
    pub message: String,
    pub span: Span,
}

impl Diagnostic {
    pub fn new(category: DiagnosticCategory, message: impl Into<String>, span: Span) -> Self {
        Self { category, message: message.into(), span }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}..{}: {}", self.category.name(), self.span.start, self.span.end, self.message)
    }
}

impl std::error::Error for Diagnostic {}

pub fn parse(src: &FunctionSource) -> Result<Ast, Diagnostic> {
    parser::parse_expr(&src.text)
}

/// A parsed, checked and lowered function. Immutable and shareable.
#[derive(Debug, Clone)]
pub struct CheckedFn {
    source: FunctionSource,
    ast: Arc<Ast>,
    program: Program,
}

impl PartialEq for CheckedFn {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl CheckedFn {
    /// Parse, check and compile in one go.
    pub fn new(source: FunctionSource, schema: &ObservationSchema) -> Result<Self, Diagnostic> {
        let ast = parse(&source)?;
        check(&ast, schema, source.kind)?;
        let program = Program::compile(&ast, schema);
        Ok(Self { source, ast: Arc::new(ast), program })
    }

    pub fn source(&self) -> &FunctionSource {
        &self.source
    }

    pub fn kind(&self) -> FnKind {
        self.source.kind
    }

    pub fn ast(&self) -> &Arc<Ast> {
        &self.ast
    }

    pub fn pretty(&self) -> String {
        pretty(&self.ast)
    }

    /// Observation fields the expression reads, sorted and deduplicated.
    pub fn fields(&self) -> Vec<String> {
        fn walk(e: &Expr, out: &mut std::collections::BTreeSet<String>) {
            if let ExprKind::Field(name) = &e.kind {
                out.insert(name.clone());
            }
            for c in e.children() {
                walk(c, out);
            }
        }
        let mut out = std::collections::BTreeSet::new();
        walk(&self.ast, &mut out);
        out.into_iter().collect()
    }

    /// Scalar value of a reward function on `(obs, prev_obs)`.
    pub fn eval_reward<S: Scalar>(&self, obs: &[S], prev_obs: &[S]) -> Result<S, Diagnostic> {
        match self.program.run(obs, prev_obs, &self.source.text)? {
            Output::Number(v) => Ok(v),
            Output::Bool(_) => unreachable!("reward functions are checked scalar"),
        }
    }

    /// Success predicate on one observation. Non-finite intermediates are
    /// reported as the error; callers treat the step as unsuccessful.
    pub fn eval_success<S: Scalar>(&self, obs: &[S]) -> Result<bool, Diagnostic> {
        match self.program.run(obs, obs, &self.source.text)? {
            Output::Bool(v) => Ok(v),
            Output::Number(_) => unreachable!("success functions are checked boolean"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{EnvConfig, TabletopEnv};

    fn env() -> TabletopEnv<f64> {
        TabletopEnv::new(EnvConfig::default()).unwrap()
    }

    fn compile(src: &str, kind: FnKind) -> Result<CheckedFn, Diagnostic> {
        CheckedFn::new(FunctionSource::new(src, kind), env().schema())
    }

    fn obs_with(ee: [f64; 3], cube_a: [f64; 3]) -> Vec<f64> {
        let e = env();
        let mut s = e.sample_reset(1);
        s.ee_pos = crate::Vec3::new(ee[0], ee[1], ee[2]);
        s.cube_a_pos = crate::Vec3::new(cube_a[0], cube_a[1], cube_a[2]);
        e.observe(&s)
    }

    #[test]
    fn reward_root_must_be_scalar() {
        let d = compile("dist(ee_pos, cubeB_pos) < 0.1", FnKind::Reward).unwrap_err();
        assert_eq!(d.category, DiagnosticCategory::TypeError);
    }

    #[test]
    fn unknown_field_is_reported() {
        let d = compile("-dist(ee_pos, cubeC_pos)", FnKind::Reward).unwrap_err();
        assert_eq!(d.category, DiagnosticCategory::UnknownIdentifier);
        assert_eq!(d.span, Span::new(14, 23));
        let d = compile("sqrt(2)", FnKind::Reward).unwrap_err();
        assert_eq!(d.category, DiagnosticCategory::UnknownIdentifier);
    }

    #[test]
    fn success_on_drawer_fraction_checks() {
        compile("drawer_fraction > 0.9", FnKind::Success).unwrap();
    }

    #[test]
    fn arity_type_and_depth_errors() {
        assert_eq!(compile("min(1)", FnKind::Reward).unwrap_err().category, DiagnosticCategory::ArityError);
        assert_eq!(compile("dist(ee_pos, 1)", FnKind::Reward).unwrap_err().category, DiagnosticCategory::TypeError);
        assert_eq!(compile("ee_pos", FnKind::Reward).unwrap_err().category, DiagnosticCategory::TypeError);
        assert_eq!(compile("prev(1)", FnKind::Reward).unwrap_err().category, DiagnosticCategory::TypeError);
        assert_eq!(
            compile("prev(ee_pos).z > 1", FnKind::Success).unwrap_err().category,
            DiagnosticCategory::TypeError
        );
        assert_eq!(
            compile("if(true, ee_pos, cubeA_pos).x", FnKind::Reward).unwrap_err().category,
            DiagnosticCategory::TypeError
        );
        let deep = format!("{}1{}", "abs(".repeat(32), ")".repeat(32));
        assert_eq!(compile(&deep, FnKind::Reward).unwrap_err().category, DiagnosticCategory::DepthExceeded);
        let ok = format!("{}1{}", "abs(".repeat(31), ")".repeat(31));
        compile(&ok, FnKind::Reward).unwrap();
    }

    #[test]
    fn reward_examples() {
        let f = compile("-dist(ee_pos,cubeA_pos)", FnKind::Reward).unwrap();
        let o = obs_with([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        assert_eq!(f.eval_reward(&o, &o).unwrap(), -1.0);
        let f = compile("exp(-dist(ee_pos,cubeA_pos))", FnKind::Reward).unwrap();
        let o = obs_with([0.3, 0.1, 0.2], [0.3, 0.1, 0.2]);
        assert_eq!(f.eval_reward(&o, &o).unwrap(), 1.0);
    }

    #[test]
    fn success_boundary_is_strict() {
        let f = compile("dist(ee_pos,cubeA_pos) < 0.05", FnKind::Success).unwrap();
        assert!(f.eval_success(&obs_with([0.5, 0.0, 0.0], [0.5, 0.0, 0.01])).unwrap());
        assert!(!f.eval_success(&obs_with([0.5, 0.0, 0.0], [0.5, 0.0, 0.05])).unwrap());
    }

    #[test]
    fn division_by_zero_is_nonfinite() {
        let f = compile("1 / step_index", FnKind::Reward).unwrap();
        let o = obs_with([0.0; 3], [0.0; 3]);
        let d = f.eval_reward(&o, &o).unwrap_err();
        assert_eq!(d.category, DiagnosticCategory::NonfiniteResult);
        assert!(d.message.contains("1 / step_index"), "{}", d.message);
    }

    #[test]
    fn lazy_branches_guard_errors() {
        let f = compile("if(step_index > 0, 1 / step_index, 0)", FnKind::Reward).unwrap();
        let o = obs_with([0.0; 3], [0.0; 3]);
        assert_eq!(f.eval_reward(&o, &o).unwrap(), 0.0);
        let f = compile("false and 1 / step_index > 0", FnKind::Success).unwrap();
        assert!(!f.eval_success(&o).unwrap());
        let f = compile("true or 1 / step_index > 0", FnKind::Success).unwrap();
        assert!(f.eval_success(&o).unwrap());
    }

    #[test]
    fn prev_reads_previous_observation() {
        let f = compile("ee_pos.z - prev(ee_pos).z + prev(gripper_aperture)", FnKind::Reward).unwrap();
        let mut a = obs_with([0.1, 0.0, 0.3], [0.0; 3]);
        let b = obs_with([0.1, 0.0, 0.1], [0.0; 3]);
        a[15] = 0.0;
        let v = f.eval_reward(&a, &b).unwrap();
        assert!((v - (0.2 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn evaluates_in_single_precision() {
        let f = compile("-dist(ee_pos, cubeA_pos) + 0.5", FnKind::Reward).unwrap();
        let o: Vec<f32> = obs_with([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]).iter().map(|&v| v as f32).collect();
        assert_eq!(f.eval_reward(&o, &o).unwrap(), -0.5f32);
    }
}
