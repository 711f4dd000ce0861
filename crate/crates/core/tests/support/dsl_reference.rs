//! A deliberately naive tree-walking evaluator for the function language,
//! written straight from the language rules and sharing no code with the
//! compiled evaluator, plus random generators for well-typed and arbitrary
//! expression trees.

#![allow(dead_code)]

use asd_core::dsl::{Axis, BinOp, Expr, ExprKind, FnKind};
use asd_core::sim::{FieldKind, ObservationSchema};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Num(f64),
    Bool(bool),
    Vec([f64; 3]),
}

/// Marker for "some intermediate value was NaN or infinite".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonFinite;

fn num(v: f64) -> Result<Value, NonFinite> {
    if v.is_finite() {
        Ok(Value::Num(v))
    } else {
        Err(NonFinite)
    }
}

fn as_num(v: Value) -> f64 {
    match v {
        Value::Num(x) => x,
        other => panic!("expected a number, got {other:?}"),
    }
}

fn as_bool(v: Value) -> bool {
    match v {
        Value::Bool(x) => x,
        other => panic!("expected a boolean, got {other:?}"),
    }
}

fn as_vec(v: Value) -> [f64; 3] {
    match v {
        Value::Vec(x) => x,
        other => panic!("expected a vector, got {other:?}"),
    }
}

pub struct Reference<'a> {
    pub schema: &'a ObservationSchema,
    pub obs: &'a [f64],
    pub prev: &'a [f64],
}

impl Reference<'_> {
    fn read(&self, name: &str, from_prev: bool) -> Value {
        let f = self.schema.field(name).expect("known field");
        let src = if from_prev { self.prev } else { self.obs };
        match f.kind {
            FieldKind::Vec3 => Value::Vec([src[f.offset], src[f.offset + 1], src[f.offset + 2]]),
            FieldKind::Scalar => Value::Num(src[f.offset]),
        }
    }

    pub fn eval(&self, e: &Expr) -> Result<Value, NonFinite> {
        match &e.kind {
            ExprKind::Number(v) => num(*v),
            ExprKind::Bool(b) => Ok(Value::Bool(*b)),
            ExprKind::Field(name) => Ok(self.read(name, false)),
            ExprKind::Component(inner, axis) => {
                let v = as_vec(self.eval(inner)?);
                let i = match axis {
                    Axis::X => 0,
                    Axis::Y => 1,
                    Axis::Z => 2,
                };
                num(v[i])
            }
            ExprKind::Neg(inner) => num(-as_num(self.eval(inner)?)),
            ExprKind::Not(inner) => Ok(Value::Bool(!as_bool(self.eval(inner)?))),
            ExprKind::Binary(BinOp::And, a, b) => {
                if !as_bool(self.eval(a)?) {
                    return Ok(Value::Bool(false));
                }
                Ok(Value::Bool(as_bool(self.eval(b)?)))
            }
            ExprKind::Binary(BinOp::Or, a, b) => {
                if as_bool(self.eval(a)?) {
                    return Ok(Value::Bool(true));
                }
                Ok(Value::Bool(as_bool(self.eval(b)?)))
            }
            ExprKind::Binary(op, a, b) => {
                let x = as_num(self.eval(a)?);
                let y = as_num(self.eval(b)?);
                match op {
                    BinOp::Add => num(x + y),
                    BinOp::Sub => num(x - y),
                    BinOp::Mul => num(x * y),
                    BinOp::Div => num(x / y),
                    BinOp::Lt => Ok(Value::Bool(x < y)),
                    BinOp::Le => Ok(Value::Bool(x <= y)),
                    BinOp::Gt => Ok(Value::Bool(x > y)),
                    BinOp::Ge => Ok(Value::Bool(x >= y)),
                    BinOp::ApproxEq => Ok(Value::Bool((x - y).abs() <= 1e-6)),
                    BinOp::And | BinOp::Or => unreachable!(),
                }
            }
            ExprKind::Call(name, args) => self.call(name, args),
        }
    }

    fn call(&self, name: &str, args: &[Expr]) -> Result<Value, NonFinite> {
        match name {
            "prev" => match &args[0].kind {
                ExprKind::Field(f) => Ok(self.read(f, true)),
                _ => panic!("prev takes a field"),
            },
            "if" => {
                if as_bool(self.eval(&args[0])?) {
                    self.eval(&args[1])
                } else {
                    self.eval(&args[2])
                }
            }
            "dist" => {
                let a = as_vec(self.eval(&args[0])?);
                let b = as_vec(self.eval(&args[1])?);
                let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                num((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            }
            _ => {
                let mut xs = Vec::with_capacity(args.len());
                for a in args {
                    xs.push(as_num(self.eval(a)?));
                }
                match name {
                    "abs" => num(xs[0].abs()),
                    "exp" => num(xs[0].exp()),
                    "tanh" => num(xs[0].tanh()),
                    "min" => num(if xs[1] < xs[0] { xs[1] } else { xs[0] }),
                    "max" => num(if xs[1] > xs[0] { xs[1] } else { xs[0] }),
                    "clamp" => {
                        let lifted = if xs[0] < xs[1] { xs[1] } else { xs[0] };
                        num(if lifted > xs[2] { xs[2] } else { lifted })
                    }
                    other => panic!("unknown builtin {other}"),
                }
            }
        }
    }
}

fn leaf(kind: ExprKind) -> Expr {
    Expr::synthetic(kind)
}

fn bx(e: Expr) -> Box<Expr> {
    Box::new(e)
}

fn call(name: &str, args: Vec<Expr>) -> Expr {
    leaf(ExprKind::Call(name.to_string(), args))
}

/// Non-negative literals at several scales (the parser never produces a
/// negative literal; negation is a separate node).
pub fn literal<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..6) {
        0 => 0.0,
        1 => rng.random_range(0..10) as f64,
        2 => rng.random_range(0.0..1.0),
        3 => rng.random_range(0.0..0.2),
        4 => (rng.random_range(0..1000) as f64) / 100.0,
        _ => rng.random_range(0.0..500.0),
    }
}

/// Random well-typed expressions over a schema; `prev` only when the
/// function kind allows it.
pub struct TypedGen<'a> {
    pub vec_fields: Vec<&'a str>,
    pub scalar_fields: Vec<&'a str>,
    pub kind: FnKind,
}

impl<'a> TypedGen<'a> {
    pub fn new(schema: &'a ObservationSchema, kind: FnKind) -> Self {
        let mut vec_fields = Vec::new();
        let mut scalar_fields = Vec::new();
        for f in schema.fields() {
            match f.kind {
                FieldKind::Vec3 => vec_fields.push(f.name),
                FieldKind::Scalar => scalar_fields.push(f.name),
            }
        }
        Self { vec_fields, scalar_fields, kind }
    }

    fn allow_prev(&self) -> bool {
        self.kind == FnKind::Reward
    }

    pub fn root<R: Rng>(&self, rng: &mut R, depth: usize) -> Expr {
        match self.kind {
            FnKind::Reward => self.scalar(rng, depth),
            FnKind::Success => self.boolean(rng, depth),
        }
    }

    fn vector<R: Rng>(&self, rng: &mut R) -> Expr {
        let f = leaf(ExprKind::Field(self.vec_fields[rng.random_range(0..self.vec_fields.len())].to_string()));
        if self.allow_prev() && rng.random_bool(0.25) {
            call("prev", vec![f])
        } else {
            f
        }
    }

    fn scalar_leaf<R: Rng>(&self, rng: &mut R) -> Expr {
        match rng.random_range(0..4) {
            0 => leaf(ExprKind::Number(literal(rng))),
            1 => {
                let f = leaf(ExprKind::Field(self.scalar_fields[rng.random_range(0..self.scalar_fields.len())].to_string()));
                if self.allow_prev() && rng.random_bool(0.25) {
                    call("prev", vec![f])
                } else {
                    f
                }
            }
            _ => {
                let axis = [Axis::X, Axis::Y, Axis::Z][rng.random_range(0..3)];
                leaf(ExprKind::Component(bx(self.vector(rng)), axis))
            }
        }
    }

    pub fn scalar<R: Rng>(&self, rng: &mut R, depth: usize) -> Expr {
        if depth <= 1 || rng.random_bool(0.2) {
            return self.scalar_leaf(rng);
        }
        let d = depth - 1;
        match rng.random_range(0..12) {
            0 => leaf(ExprKind::Neg(bx(self.scalar(rng, d)))),
            1..=4 => {
                let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][rng.random_range(0..4)];
                leaf(ExprKind::Binary(op, bx(self.scalar(rng, d)), bx(self.scalar(rng, d))))
            }
            5 => {
                let f = ["abs", "exp", "tanh"][rng.random_range(0..3)];
                call(f, vec![self.scalar(rng, d)])
            }
            6 => {
                let f = ["min", "max"][rng.random_range(0..2)];
                call(f, vec![self.scalar(rng, d), self.scalar(rng, d)])
            }
            7 => call("clamp", vec![self.scalar(rng, d), self.scalar(rng, d), self.scalar(rng, d)]),
            8 | 9 => call("dist", vec![self.vector(rng), self.vector(rng)]),
            10 => call("if", vec![self.boolean(rng, d), self.scalar(rng, d), self.scalar(rng, d)]),
            _ => self.scalar_leaf(rng),
        }
    }

    pub fn boolean<R: Rng>(&self, rng: &mut R, depth: usize) -> Expr {
        let d = depth.saturating_sub(1).max(1);
        if depth <= 1 {
            return leaf(ExprKind::Bool(rng.random_bool(0.5)));
        }
        match rng.random_range(0..8) {
            0 => leaf(ExprKind::Bool(rng.random_bool(0.5))),
            1 => leaf(ExprKind::Not(bx(self.boolean(rng, d)))),
            2 => leaf(ExprKind::Binary(BinOp::And, bx(self.boolean(rng, d)), bx(self.boolean(rng, d)))),
            3 => leaf(ExprKind::Binary(BinOp::Or, bx(self.boolean(rng, d)), bx(self.boolean(rng, d)))),
            4 => call("if", vec![self.boolean(rng, d), self.boolean(rng, d), self.boolean(rng, d)]),
            _ => {
                let op = [BinOp::Lt, BinOp::Le, BinOp::Gt, BinOp::Ge, BinOp::ApproxEq][rng.random_range(0..5)];
                leaf(ExprKind::Binary(op, bx(self.scalar(rng, d)), bx(self.scalar(rng, d))))
            }
        }
    }
}

const NAMES: [&str; 8] = ["ee_pos", "cubeA_pos", "gripper_aperture", "foo", "x1", "bar_baz", "abs", "prev"];

/// Random trees of any shape the parser can produce, ignoring types.
pub fn untyped<R: Rng>(rng: &mut R, depth: usize) -> Expr {
    if depth <= 1 || rng.random_bool(0.15) {
        return match rng.random_range(0..3) {
            0 => leaf(ExprKind::Number(literal(rng))),
            1 => leaf(ExprKind::Bool(rng.random_bool(0.5))),
            _ => leaf(ExprKind::Field(NAMES[rng.random_range(0..NAMES.len())].to_string())),
        };
    }
    let d = depth - 1;
    match rng.random_range(0..6) {
        0 => leaf(ExprKind::Neg(bx(untyped(rng, d)))),
        1 => leaf(ExprKind::Not(bx(untyped(rng, d)))),
        2 => {
            let axis = [Axis::X, Axis::Y, Axis::Z][rng.random_range(0..3)];
            leaf(ExprKind::Component(bx(untyped(rng, d)), axis))
        }
        3 => {
            let n = rng.random_range(0..4);
            let name = NAMES[rng.random_range(0..NAMES.len())];
            call(name, (0..n).map(|_| untyped(rng, d)).collect())
        }
        _ => {
            let ops = [
                BinOp::Add,
                BinOp::Sub,
                BinOp::Mul,
                BinOp::Div,
                BinOp::Lt,
                BinOp::Le,
                BinOp::Gt,
                BinOp::Ge,
                BinOp::ApproxEq,
                BinOp::And,
                BinOp::Or,
            ];
            let op = ops[rng.random_range(0..ops.len())];
            let (a, b) = (untyped(rng, d), untyped(rng, d));
            leaf(ExprKind::Binary(op, bx(a), bx(b)))
        }
    }
}

/// Observation vector with values in a realistic range, with occasional
/// zeros and large magnitudes to exercise division and overflow paths.
pub fn random_obs<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => rng.random_range(-800.0..800.0),
            _ => rng.random_range(-1.0..1.0),
        })
        .collect()
}
