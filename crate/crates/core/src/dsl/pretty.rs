//! Canonical printer. Emits the minimum parentheses needed for the parser
//! to rebuild the same tree.

use super::ast::{Expr, ExprKind};

const NOT_PREC: u8 = 3;
const NEG_PREC: u8 = 7;
const POSTFIX_PREC: u8 = 8;
const ATOM_PREC: u8 = 9;

fn precedence(e: &Expr) -> u8 {
    match &e.kind {
        ExprKind::Binary(op, _, _) => op.precedence(),
        ExprKind::Not(_) => NOT_PREC,
        ExprKind::Neg(_) => NEG_PREC,
        ExprKind::Component(_, _) => POSTFIX_PREC,
        ExprKind::Number(_) | ExprKind::Bool(_) | ExprKind::Field(_) | ExprKind::Call(_, _) => ATOM_PREC,
    }
}

pub fn pretty(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(e, &mut out);
    out
}

fn write_child(child: &Expr, parens: bool, out: &mut String) {
    if parens {
        out.push('(');
        write_expr(child, out);
        out.push(')');
    } else {
        write_expr(child, out);
    }
}

fn write_expr(e: &Expr, out: &mut String) {
    match &e.kind {
        ExprKind::Number(v) => out.push_str(&format!("{v}")),
        ExprKind::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        ExprKind::Field(name) => out.push_str(name),
        ExprKind::Component(inner, axis) => {
            write_child(inner, precedence(inner) < POSTFIX_PREC, out);
            out.push('.');
            out.push_str(axis.name());
        }
        ExprKind::Neg(inner) => {
            out.push('-');
            write_child(inner, precedence(inner) < NEG_PREC, out);
        }
        ExprKind::Not(inner) => {
            out.push_str("not ");
            write_child(inner, precedence(inner) < NOT_PREC, out);
        }
        ExprKind::Binary(op, lhs, rhs) => {
            let p = op.precedence();
            let lp = precedence(lhs);
            let left_parens = lp < p || (op.is_comparison() && lp == p);
            write_child(lhs, left_parens, out);
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            write_child(rhs, precedence(rhs) <= p, out);
        }
        ExprKind::Call(name, args) => {
            out.push_str(name);
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(a, out);
            }
            out.push(')');
        }
    }
}
