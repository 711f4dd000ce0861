//! Recursive-descent parser.
//!
//! ```text
//! expr    := or
//! or      := and { "or" and }
//! and     := not { "and" not }
//! not     := "not" not | cmp
//! cmp     := sum [ ("<" | "<=" | ">" | ">=" | "==") sum ]
//! sum     := product { ("+" | "-") product }
//! product := unary { ("*" | "/") unary }
//! unary   := "-" unary | postfix
//! postfix := primary { "." ("x" | "y" | "z") }
//! primary := number | "true" | "false" | ident [ "(" [ expr { "," expr } ] ")" ] | "(" expr ")"
//! ```

use super::ast::{Axis, BinOp, Expr, ExprKind, Span};
use super::lexer::{tokenize, Tok, Token};
use super::{Diagnostic, DiagnosticCategory};

/// Hard nesting limit of the parser itself; the checker applies the much
/// tighter language depth limit afterwards.
const MAX_NESTING: usize = 256;

const KEYWORDS: [&str; 5] = ["and", "or", "not", "true", "false"];

pub fn parse_expr(src: &str) -> Result<Expr, Diagnostic> {
    let tokens = tokenize(src)?;
    let mut p = Parser { tokens, pos: 0, nesting: 0 };
    let e = p.expr()?;
    match p.peek() {
        Tok::Eof => Ok(e),
        _ => Err(p.unexpected("end of input")),
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    nesting: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn span(&self) -> Span {
        self.tokens[self.pos].span
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn unexpected(&self, expected: &str) -> Diagnostic {
        Diagnostic::new(
            DiagnosticCategory::ParseError,
            format!("expected {expected}, found {}", self.peek().describe()),
            self.span(),
        )
    }

    fn enter(&mut self) -> Result<(), Diagnostic> {
        self.nesting += 1;
        if self.nesting > MAX_NESTING {
            return Err(Diagnostic::new(DiagnosticCategory::ParseError, "expression nested too deeply", self.span()));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, Diagnostic> {
        self.enter()?;
        let e = self.or();
        self.nesting -= 1;
        e
    }

    fn or(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.and()?;
        while self.is_keyword("or") {
            self.bump();
            let rhs = self.and()?;
            let span = lhs.span.to(rhs.span);
            lhs = Expr::new(ExprKind::Binary(BinOp::Or, Box::new(lhs), Box::new(rhs)), span);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.not()?;
        while self.is_keyword("and") {
            self.bump();
            let rhs = self.not()?;
            let span = lhs.span.to(rhs.span);
            lhs = Expr::new(ExprKind::Binary(BinOp::And, Box::new(lhs), Box::new(rhs)), span);
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr, Diagnostic> {
        if self.is_keyword("not") {
            let start = self.bump().span;
            self.enter()?;
            let inner = self.not();
            self.nesting -= 1;
            let inner = inner?;
            let span = start.to(inner.span);
            return Ok(Expr::new(ExprKind::Not(Box::new(inner)), span));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr, Diagnostic> {
        let lhs = self.sum()?;
        let op = match self.peek() {
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            Tok::EqEq => BinOp::ApproxEq,
            _ => return Ok(lhs),
        };
        self.bump();
        let rhs = self.sum()?;
        if matches!(self.peek(), Tok::Lt | Tok::Le | Tok::Gt | Tok::Ge | Tok::EqEq) {
            return Err(Diagnostic::new(
                DiagnosticCategory::ParseError,
                "comparisons do not chain; combine them with 'and'",
                self.span(),
            ));
        }
        let span = lhs.span.to(rhs.span);
        Ok(Expr::new(ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), span))
    }

    fn sum(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.product()?;
            let span = lhs.span.to(rhs.span);
            lhs = Expr::new(ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), span);
        }
    }

    fn product(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            let span = lhs.span.to(rhs.span);
            lhs = Expr::new(ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), span);
        }
    }

    fn unary(&mut self) -> Result<Expr, Diagnostic> {
        if matches!(self.peek(), Tok::Minus) {
            let start = self.bump().span;
            self.enter()?;
            let inner = self.unary();
            self.nesting -= 1;
            let inner = inner?;
            let span = start.to(inner.span);
            return Ok(Expr::new(ExprKind::Neg(Box::new(inner)), span));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, Diagnostic> {
        let mut e = self.primary()?;
        while matches!(self.peek(), Tok::Dot) {
            self.bump();
            let axis = match self.peek() {
                Tok::Ident(s) if s == "x" => Axis::X,
                Tok::Ident(s) if s == "y" => Axis::Y,
                Tok::Ident(s) if s == "z" => Axis::Z,
                _ => return Err(self.unexpected("component 'x', 'y' or 'z'")),
            };
            let end = self.bump().span;
            let span = e.span.to(end);
            e = Expr::new(ExprKind::Component(Box::new(e), axis), span);
        }
        Ok(e)
    }

    fn primary(&mut self) -> Result<Expr, Diagnostic> {
        let span = self.span();
        match self.peek().clone() {
            Tok::Number(v) => {
                self.bump();
                Ok(Expr::new(ExprKind::Number(v), span))
            }
            Tok::Ident(name) if name == "true" || name == "false" => {
                self.bump();
                Ok(Expr::new(ExprKind::Bool(name == "true"), span))
            }
            Tok::Ident(name) if KEYWORDS.contains(&name.as_str()) => Err(self.unexpected("an operand")),
            Tok::Ident(name) => {
                self.bump();
                if !matches!(self.peek(), Tok::LParen) {
                    return Ok(Expr::new(ExprKind::Field(name), span));
                }
                self.bump();
                let mut args = Vec::new();
                if !matches!(self.peek(), Tok::RParen) {
                    loop {
                        args.push(self.expr()?);
                        match self.peek() {
                            Tok::Comma => {
                                self.bump();
                            }
                            Tok::RParen => break,
                            _ => return Err(self.unexpected("',' or ')'")),
                        }
                    }
                }
                let end = self.bump().span;
                Ok(Expr::new(ExprKind::Call(name, args), span.to(end)))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.expr()?;
                if !matches!(self.peek(), Tok::RParen) {
                    return Err(self.unexpected("')'"));
                }
                self.bump();
                Ok(inner)
            }
            _ => Err(self.unexpected("an operand")),
        }
    }
}
