//! Checked expressions lowered to a flat stack program.
//!
//! Values live on two stacks (numbers and booleans). `and`, `or` and `if`
//! are lazy and compile to branches. Every instruction that produces a
//! number is followed by a finiteness check.

use super::ast::{BinOp, Expr, ExprKind, Span};
use super::check::Builtin;
use super::{Diagnostic, DiagnosticCategory, APPROX_EQ_EPS};
use crate::num::Scalar;
use crate::sim::{FieldKind, ObservationSchema};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    offset: u32,
    prev: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Load(Slot),
    Dist(Slot, Slot),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Abs,
    Exp,
    Tanh,
    Min,
    Max,
    Clamp,
    Lt,
    Le,
    Gt,
    Ge,
    ApproxEq,
    Not,
    PushBool(bool),
    BranchFalse(usize),
    BranchTrue(usize),
    Jump(usize),
}

const STACK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    ops: Vec<Op>,
    spans: Vec<Span>,
}

pub(crate) enum Output<S> {
    Number(S),
    Bool(bool),
}

struct Emitter<'a> {
    schema: &'a ObservationSchema,
    ops: Vec<Op>,
    spans: Vec<Span>,
}

impl Emitter<'_> {
    fn push(&mut self, op: Op, span: Span) -> usize {
        self.ops.push(op);
        self.spans.push(span);
        self.ops.len() - 1
    }

    fn patch(&mut self, at: usize) {
        let target = self.ops.len();
        match &mut self.ops[at] {
            Op::BranchFalse(t) | Op::BranchTrue(t) | Op::Jump(t) => *t = target,
            _ => unreachable!("patching a non-branch"),
        }
    }

    fn field_offset(&self, name: &str) -> (u32, FieldKind) {
        let f = self.schema.field(name).expect("checked identifier");
        (f.offset as u32, f.kind)
    }

    /// Vector operands are always a field or `prev(field)` after checking.
    fn vec_slot(&self, e: &Expr) -> Slot {
        match &e.kind {
            ExprKind::Field(name) => Slot { offset: self.field_offset(name).0, prev: false },
            ExprKind::Call(name, args) if name == "prev" => match &args[0].kind {
                ExprKind::Field(n) => Slot { offset: self.field_offset(n).0, prev: true },
                _ => unreachable!("checked prev argument"),
            },
            _ => unreachable!("checked vector operand"),
        }
    }

    fn emit(&mut self, e: &Expr) {
        let span = e.span;
        match &e.kind {
            ExprKind::Number(v) => {
                self.push(Op::Const(*v), span);
            }
            ExprKind::Bool(b) => {
                self.push(Op::PushBool(*b), span);
            }
            ExprKind::Field(name) => {
                let (offset, _) = self.field_offset(name);
                self.push(Op::Load(Slot { offset, prev: false }), span);
            }
            ExprKind::Component(inner, axis) => {
                let slot = self.vec_slot(inner);
                let offset = slot.offset + axis.index() as u32;
                self.push(Op::Load(Slot { offset, prev: slot.prev }), span);
            }
            ExprKind::Neg(inner) => {
                self.emit(inner);
                self.push(Op::Neg, span);
            }
            ExprKind::Not(inner) => {
                self.emit(inner);
                self.push(Op::Not, span);
            }
            ExprKind::Binary(BinOp::And, lhs, rhs) => {
                self.emit(lhs);
                let br = self.push(Op::BranchFalse(0), span);
                self.emit(rhs);
                let j = self.push(Op::Jump(0), span);
                self.patch(br);
                self.push(Op::PushBool(false), span);
                self.patch(j);
            }
            ExprKind::Binary(BinOp::Or, lhs, rhs) => {
                self.emit(lhs);
                let br = self.push(Op::BranchTrue(0), span);
                self.emit(rhs);
                let j = self.push(Op::Jump(0), span);
                self.patch(br);
                self.push(Op::PushBool(true), span);
                self.patch(j);
            }
            ExprKind::Binary(op, lhs, rhs) => {
                self.emit(lhs);
                self.emit(rhs);
                let op = match op {
                    BinOp::Add => Op::Add,
                    BinOp::Sub => Op::Sub,
                    BinOp::Mul => Op::Mul,
                    BinOp::Div => Op::Div,
                    BinOp::Lt => Op::Lt,
                    BinOp::Le => Op::Le,
                    BinOp::Gt => Op::Gt,
                    BinOp::Ge => Op::Ge,
                    BinOp::ApproxEq => Op::ApproxEq,
                    BinOp::And | BinOp::Or => unreachable!(),
                };
                self.push(op, span);
            }
            ExprKind::Call(name, args) => {
                let f = Builtin::lookup(name).expect("checked builtin");
                match f {
                    Builtin::Dist => {
                        let a = self.vec_slot(&args[0]);
                        let b = self.vec_slot(&args[1]);
                        self.push(Op::Dist(a, b), span);
                    }
                    Builtin::Prev => {
                        let slot = self.vec_slot(e);
                        self.push(Op::Load(slot), span);
                    }
                    Builtin::If => {
                        self.emit(&args[0]);
                        let br = self.push(Op::BranchFalse(0), span);
                        self.emit(&args[1]);
                        let j = self.push(Op::Jump(0), span);
                        self.patch(br);
                        self.emit(&args[2]);
                        self.patch(j);
                    }
                    _ => {
                        for a in args {
                            self.emit(a);
                        }
                        let op = match f {
                            Builtin::Abs => Op::Abs,
                            Builtin::Exp => Op::Exp,
                            Builtin::Tanh => Op::Tanh,
                            Builtin::Min => Op::Min,
                            Builtin::Max => Op::Max,
                            Builtin::Clamp => Op::Clamp,
                            _ => unreachable!(),
                        };
                        self.push(op, span);
                    }
                }
            }
        }
    }
}

impl Program {
    /// Lowers an expression that already passed [`super::check`].
    pub fn compile(ast: &Expr, schema: &ObservationSchema) -> Program {
        let mut em = Emitter { schema, ops: Vec::new(), spans: Vec::new() };
        em.emit(ast);
        Program { ops: em.ops, spans: em.spans }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub(crate) fn run<S: Scalar>(&self, obs: &[S], prev: &[S], src: &str) -> Result<Output<S>, Diagnostic> {
        let mut nums = [S::zero(); STACK];
        let mut bools = [false; STACK];
        let (mut n, mut b) = (0usize, 0usize);
        let mut pc = 0;
        let eps = S::lit(APPROX_EQ_EPS);
        let load = |s: Slot| if s.prev { prev[s.offset as usize] } else { obs[s.offset as usize] };
        let load3 = |s: Slot| {
            let base = if s.prev { prev } else { obs };
            let o = s.offset as usize;
            (base[o], base[o + 1], base[o + 2])
        };
        while pc < self.ops.len() {
            let op = self.ops[pc];
            pc += 1;
            let produced = match op {
                Op::Const(v) => {
                    nums[n] = S::lit(v);
                    n += 1;
                    true
                }
                Op::Load(s) => {
                    nums[n] = load(s);
                    n += 1;
                    true
                }
                Op::Dist(a, c) => {
                    let (ax, ay, az) = load3(a);
                    let (cx, cy, cz) = load3(c);
                    let (dx, dy, dz) = (ax - cx, ay - cy, az - cz);
                    nums[n] = (dx * dx + dy * dy + dz * dz).sqrt();
                    n += 1;
                    true
                }
                Op::Neg => {
                    nums[n - 1] = -nums[n - 1];
                    true
                }
                Op::Abs => {
                    nums[n - 1] = nums[n - 1].abs();
                    true
                }
                Op::Exp => {
                    nums[n - 1] = nums[n - 1].exp();
                    true
                }
                Op::Tanh => {
                    nums[n - 1] = nums[n - 1].tanh();
                    true
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Min | Op::Max => {
                    let (x, y) = (nums[n - 2], nums[n - 1]);
                    n -= 1;
                    nums[n - 1] = match op {
                        Op::Add => x + y,
                        Op::Sub => x - y,
                        Op::Mul => x * y,
                        Op::Div => x / y,
                        Op::Min => x.min(y),
                        _ => x.max(y),
                    };
                    true
                }
                Op::Clamp => {
                    let (x, lo, hi) = (nums[n - 3], nums[n - 2], nums[n - 1]);
                    n -= 2;
                    nums[n - 1] = x.max(lo).min(hi);
                    true
                }
                Op::Lt | Op::Le | Op::Gt | Op::Ge | Op::ApproxEq => {
                    let (x, y) = (nums[n - 2], nums[n - 1]);
                    n -= 2;
                    bools[b] = match op {
                        Op::Lt => x < y,
                        Op::Le => x <= y,
                        Op::Gt => x > y,
                        Op::Ge => x >= y,
                        _ => (x - y).abs() <= eps,
                    };
                    b += 1;
                    false
                }
                Op::Not => {
                    bools[b - 1] = !bools[b - 1];
                    false
                }
                Op::PushBool(v) => {
                    bools[b] = v;
                    b += 1;
                    false
                }
                Op::BranchFalse(t) => {
                    b -= 1;
                    if !bools[b] {
                        pc = t;
                    }
                    false
                }
                Op::BranchTrue(t) => {
                    b -= 1;
                    if bools[b] {
                        pc = t;
                    }
                    false
                }
                Op::Jump(t) => {
                    pc = t;
                    false
                }
            };
            if produced && !nums[n - 1].is_finite() {
                let span = self.spans[pc - 1];
                let snippet = src.get(span.start..span.end).unwrap_or("");
                return Err(Diagnostic::new(
                    DiagnosticCategory::NonfiniteResult,
                    format!("'{snippet}' evaluated to {}", nums[n - 1]),
                    span,
                ));
            }
        }
        if b == 1 && n == 0 {
            Ok(Output::Bool(bools[0]))
        } else {
            debug_assert!(n == 1 && b == 0, "unbalanced program");
            Ok(Output::Number(nums[0]))
        }
    }
}
