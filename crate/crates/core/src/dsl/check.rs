//! Static checks run before any training launch: identifier resolution,
//! arity, typing and depth.

use super::ast::{BinOp, Expr, ExprKind};
use super::{Diagnostic, DiagnosticCategory, FnKind, MAX_DEPTH};
use crate::sim::{FieldKind, ObservationSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Type {
    Scalar,
    Vec3,
    Bool,
}

impl Type {
    pub fn name(self) -> &'static str {
        match self {
            Type::Scalar => "scalar",
            Type::Vec3 => "vec3",
            Type::Bool => "boolean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Abs,
    Exp,
    Tanh,
    Min,
    Max,
    Clamp,
    Dist,
    Prev,
    If,
}

impl Builtin {
    pub fn lookup(name: &str) -> Option<Builtin> {
        Some(match name {
            "abs" => Builtin::Abs,
            "exp" => Builtin::Exp,
            "tanh" => Builtin::Tanh,
            "min" => Builtin::Min,
            "max" => Builtin::Max,
            "clamp" => Builtin::Clamp,
            "dist" => Builtin::Dist,
            "prev" => Builtin::Prev,
            "if" => Builtin::If,
            _ => return None,
        })
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::Abs | Builtin::Exp | Builtin::Tanh | Builtin::Prev => 1,
            Builtin::Min | Builtin::Max | Builtin::Dist => 2,
            Builtin::Clamp | Builtin::If => 3,
        }
    }
}

struct Checker<'a> {
    schema: &'a ObservationSchema,
    kind: FnKind,
}

fn type_error(e: &Expr, msg: impl Into<String>) -> Diagnostic {
    Diagnostic::new(DiagnosticCategory::TypeError, msg, e.span)
}

impl Checker<'_> {
    fn expect(&self, e: &Expr, want: Type, context: &str) -> Result<(), Diagnostic> {
        let got = self.infer(e)?;
        if got != want {
            return Err(type_error(e, format!("{context} expects a {} operand, found {}", want.name(), got.name())));
        }
        Ok(())
    }

    fn infer(&self, e: &Expr) -> Result<Type, Diagnostic> {
        match &e.kind {
            ExprKind::Number(_) => Ok(Type::Scalar),
            ExprKind::Bool(_) => Ok(Type::Bool),
            ExprKind::Field(name) => match self.schema.field(name) {
                Some(f) if f.kind == FieldKind::Vec3 => Ok(Type::Vec3),
                Some(_) => Ok(Type::Scalar),
                None => Err(Diagnostic::new(
                    DiagnosticCategory::UnknownIdentifier,
                    format!("unknown identifier '{name}': not an observation field"),
                    e.span,
                )),
            },
            ExprKind::Component(inner, axis) => {
                self.expect(inner, Type::Vec3, &format!("component access '.{}'", axis.name()))?;
                Ok(Type::Scalar)
            }
            ExprKind::Neg(inner) => {
                self.expect(inner, Type::Scalar, "negation")?;
                Ok(Type::Scalar)
            }
            ExprKind::Not(inner) => {
                self.expect(inner, Type::Bool, "'not'")?;
                Ok(Type::Bool)
            }
            ExprKind::Binary(op, lhs, rhs) => {
                let ctx = format!("'{}'", op.symbol());
                match op {
                    BinOp::And | BinOp::Or => {
                        self.expect(lhs, Type::Bool, &ctx)?;
                        self.expect(rhs, Type::Bool, &ctx)?;
                        Ok(Type::Bool)
                    }
                    _ => {
                        self.expect(lhs, Type::Scalar, &ctx)?;
                        self.expect(rhs, Type::Scalar, &ctx)?;
                        Ok(if op.is_comparison() { Type::Bool } else { Type::Scalar })
                    }
                }
            }
            ExprKind::Call(name, args) => self.infer_call(e, name, args),
        }
    }

    fn infer_call(&self, e: &Expr, name: &str, args: &[Expr]) -> Result<Type, Diagnostic> {
        let Some(f) = Builtin::lookup(name) else {
            return Err(Diagnostic::new(
                DiagnosticCategory::UnknownIdentifier,
                format!("unknown function '{name}'"),
                e.span,
            ));
        };
        if args.len() != f.arity() {
            return Err(Diagnostic::new(
                DiagnosticCategory::ArityError,
                format!("'{name}' takes {} argument(s), got {}", f.arity(), args.len()),
                e.span,
            ));
        }
        let ctx = format!("'{name}'");
        match f {
            Builtin::Abs | Builtin::Exp | Builtin::Tanh | Builtin::Min | Builtin::Max | Builtin::Clamp => {
                for a in args {
                    self.expect(a, Type::Scalar, &ctx)?;
                }
                Ok(Type::Scalar)
            }
            Builtin::Dist => {
                for a in args {
                    self.expect(a, Type::Vec3, &ctx)?;
                }
                Ok(Type::Scalar)
            }
            Builtin::Prev => {
                if self.kind == FnKind::Success {
                    return Err(type_error(e, "prev() is only available in reward functions"));
                }
                match &args[0].kind {
                    ExprKind::Field(_) => self.infer(&args[0]),
                    _ => Err(type_error(&args[0], "prev() takes an observation field name")),
                }
            }
            Builtin::If => {
                self.expect(&args[0], Type::Bool, "'if' condition")?;
                let a = self.infer(&args[1])?;
                let b = self.infer(&args[2])?;
                if a == Type::Vec3 || b == Type::Vec3 {
                    return Err(type_error(e, "'if' branches must be scalar or boolean"));
                }
                if a != b {
                    return Err(type_error(e, format!("'if' branches differ: {} vs {}", a.name(), b.name())));
                }
                Ok(a)
            }
        }
    }
}

fn deepest(e: &Expr, depth: usize) -> Option<&Expr> {
    if depth > MAX_DEPTH {
        return Some(e);
    }
    e.children().into_iter().find_map(|c| deepest(c, depth + 1))
}

/// Type of `ast` under `schema`, without the root-kind requirement.
pub fn infer_type(ast: &Expr, schema: &ObservationSchema, kind: FnKind) -> Result<Type, Diagnostic> {
    if let Some(node) = deepest(ast, 1) {
        return Err(Diagnostic::new(
            DiagnosticCategory::DepthExceeded,
            format!("expression deeper than {MAX_DEPTH} levels"),
            node.span,
        ));
    }
    Checker { schema, kind }.infer(ast)
}

/// Reward functions must produce a scalar, success functions a boolean.
pub fn check(ast: &Expr, schema: &ObservationSchema, kind: FnKind) -> Result<(), Diagnostic> {
    let root = infer_type(ast, schema, kind)?;
    let want = match kind {
        FnKind::Reward => Type::Scalar,
        FnKind::Success => Type::Bool,
    };
    if root != want {
        return Err(type_error(
            ast,
            format!("a {} function must evaluate to a {}, found {}", kind.name(), want.name(), root.name()),
        ));
    }
    Ok(())
}
