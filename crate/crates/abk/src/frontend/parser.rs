//! Recursive-descent parser for ABK source.
//!
//! Precedence, loosest to tightest: ternary, `|`, `^`, `&`, equality,
//! relational, shifts, additive, multiplicative, unary, postfix indexing.

use super::ast::*;
use super::lexer::{lex, Tok, Token};
use super::FrontendError;
use crate::ssa::{Span, Width};
use std::collections::BTreeMap;

pub struct Parser {
    toks: Vec<Token>,
    pos: usize,
    consts: Vec<(String, u64)>,
}

/// Constant-expression environment: named constants plus transient bindings
/// (loop variables, annotation locals, alloc-rule lane variables).
#[derive(Debug, Default, Clone)]
pub struct EvalEnv {
    pub vars: BTreeMap<String, u64>,
}

impl EvalEnv {
    pub fn with(consts: &[(String, u64)]) -> Self {
        EvalEnv { vars: consts.iter().cloned().collect() }
    }

    pub fn bind(&mut self, name: &str, v: u64) {
        self.vars.insert(name.to_string(), v);
    }
}

/// Evaluate a compile-time-constant expression. Arithmetic is checked:
/// overflow, underflow, and division by zero are errors rather than wrapping.
pub fn eval_const(e: &Expr, env: &EvalEnv) -> Result<u64, FrontendError> {
    let err = |span: Span, msg: String| FrontendError::Syntax { line: span.line, col: span.col, msg };
    match e {
        Expr::Int { value, .. } => Ok(*value),
        Expr::Var { name, span } => env
            .vars
            .get(name)
            .copied()
            .ok_or_else(|| err(*span, format!("`{name}` is not a compile-time constant"))),
        Expr::Index { span, .. } | Expr::Act { span, .. } => {
            Err(err(*span, "not a compile-time constant".to_string()))
        }
        Expr::Unary { op, operand, span } => {
            let v = eval_const(operand, env)?;
            match op {
                UnOp::Not => Ok(!v),
                UnOp::Neg => Err(err(*span, "negative constant".to_string())),
            }
        }
        Expr::Binary { op, lhs, rhs, span } => {
            let a = eval_const(lhs, env)?;
            let b = eval_const(rhs, env)?;
            let e = |m: &str| err(*span, m.to_string());
            match op {
                AstBinOp::Add => a.checked_add(b).ok_or_else(|| e("constant overflow")),
                AstBinOp::Sub => a.checked_sub(b).ok_or_else(|| e("constant underflow")),
                AstBinOp::Mul => a.checked_mul(b).ok_or_else(|| e("constant overflow")),
                AstBinOp::Div => a.checked_div(b).ok_or_else(|| e("division by zero")),
                AstBinOp::Mod => a.checked_rem(b).ok_or_else(|| e("modulo by zero")),
                AstBinOp::And => Ok(a & b),
                AstBinOp::Or => Ok(a | b),
                AstBinOp::Xor => Ok(a ^ b),
                AstBinOp::Shl => Ok(if b >= 64 { 0 } else { a << b }),
                AstBinOp::Shr => Ok(if b >= 64 { 0 } else { a >> b }),
                AstBinOp::Eq => Ok((a == b) as u64),
                AstBinOp::Ne => Ok((a != b) as u64),
                AstBinOp::Lt => Ok((a < b) as u64),
                AstBinOp::Le => Ok((a <= b) as u64),
                AstBinOp::Gt => Ok((a > b) as u64),
                AstBinOp::Ge => Ok((a >= b) as u64),
            }
        }
        Expr::Ternary { cond, on_true, on_false, .. } => {
            if eval_const(cond, env)? != 0 {
                eval_const(on_true, env)
            } else {
                eval_const(on_false, env)
            }
        }
    }
}

/// Collect identifiers in `e` that are not bound in `env`.
pub fn free_vars(e: &Expr, env: &EvalEnv, out: &mut Vec<String>) {
    match e {
        Expr::Int { .. } => {}
        Expr::Var { name, .. } => {
            if !env.vars.contains_key(name) && !out.contains(name) {
                out.push(name.clone());
            }
        }
        Expr::Index { index, .. } => free_vars(index, env, out),
        Expr::Act { lane, .. } => free_vars(lane, env, out),
        Expr::Unary { operand, .. } => free_vars(operand, env, out),
        Expr::Binary { lhs, rhs, .. } => {
            free_vars(lhs, env, out);
            free_vars(rhs, env, out);
        }
        Expr::Ternary { cond, on_true, on_false, .. } => {
            free_vars(cond, env, out);
            free_vars(on_true, env, out);
            free_vars(on_false, env, out);
        }
    }
}

impl Parser {
    pub fn new(src: &str) -> Result<Self, FrontendError> {
        Ok(Parser { toks: lex(src)?, pos: 0, consts: Vec::new() })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn span(&self) -> Span {
        self.toks[self.pos].span
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, msg: impl Into<String>) -> FrontendError {
        let s = self.span();
        FrontendError::Syntax { line: s.line, col: s.col, msg: msg.into() }
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Span, FrontendError> {
        if *self.peek() == want {
            Ok(self.bump().span)
        } else {
            Err(self.err(format!("expected {what}, found {:?}", self.peek())))
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, Span), FrontendError> {
        match self.peek().clone() {
            Tok::Ident(n) => {
                let s = self.bump().span;
                Ok((n, s))
            }
            other => Err(self.err(format!("expected {what}, found {other:?}"))),
        }
    }

    fn at_ident(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(n) if n == kw)
    }

    pub fn parse_program(&mut self, name: &str) -> Result<AbkProgram, FrontendError> {
        let mut prog = AbkProgram {
            name: name.to_string(),
            default_width: 8,
            action_count: 1,
            non_interfering: false,
            consts: Vec::new(),
            decls: Vec::new(),
            items: Vec::new(),
        };
        let mut pending: Vec<(String, String, Span)> = Vec::new();
        loop {
            match self.peek().clone() {
                Tok::Eof => break,
                Tok::Annot { name, text } => {
                    let sp = self.bump().span;
                    pending.push((name, text, sp));
                }
                Tok::Marker { name, start } => {
                    if !start {
                        return Err(self.err(format!("unmatched end marker for block {name}")));
                    }
                    let block = self.parse_block(&mut prog, std::mem::take(&mut pending))?;
                    prog.items.push(Item::Block(block));
                }
                Tok::Ident(kw) => {
                    if !pending.is_empty() && !matches!(self.peek(), Tok::Marker { .. }) {
                        let (n, _, sp) = &pending[0];
                        return Err(FrontendError::Annotation {
                            line: sp.line,
                            msg: format!("dangling %{n}: annotations must immediately precede a block"),
                        });
                    }
                    match kw.as_str() {
                        "const" => self.parse_const(&mut prog)?,
                        "width" => {
                            self.bump();
                            let e = self.parse_expr()?;
                            prog.default_width =
                                self.const_width(&e, &EvalEnv::with(&prog.consts))?;
                            self.expect(Tok::Semi, "';'")?;
                        }
                        "actions" => {
                            self.bump();
                            let e = self.parse_expr()?;
                            let n = eval_const(&e, &EvalEnv::with(&prog.consts))?;
                            if n == 0 {
                                return Err(self.err("action count must be at least 1"));
                            }
                            prog.action_count = n;
                            self.expect(Tok::Semi, "';'")?;
                        }
                        "noninterfering" => {
                            self.bump();
                            prog.non_interfering = true;
                            self.expect(Tok::Semi, "';'")?;
                        }
                        "var" | "arr" => self.parse_decl(&mut prog)?,
                        _ => {
                            let stmt = self.parse_stmt(&prog)?;
                            prog.items.push(Item::Stmt(stmt));
                        }
                    }
                }
                other => return Err(self.err(format!("unexpected {other:?}"))),
            }
        }
        if let Some((n, _, sp)) = pending.first() {
            return Err(FrontendError::Annotation {
                line: sp.line,
                msg: format!("dangling %{n} at end of file"),
            });
        }
        prog.consts = self.consts.clone();
        Ok(prog)
    }

    fn parse_const(&mut self, prog: &mut AbkProgram) -> Result<(), FrontendError> {
        self.bump();
        let (name, _) = self.expect_ident("constant name")?;
        self.expect(Tok::Assign, "'='")?;
        let e = self.parse_expr()?;
        let v = eval_const(&e, &EvalEnv::with(&self.consts))?;
        self.expect(Tok::Semi, "';'")?;
        if self.consts.iter().any(|(n, _)| *n == name) {
            return Err(self.err(format!("constant {name} redeclared")));
        }
        self.consts.push((name.clone(), v));
        prog.consts = self.consts.clone();
        Ok(())
    }

    fn const_width(&self, e: &Expr, env: &EvalEnv) -> Result<Width, FrontendError> {
        let w = eval_const(e, env)?;
        if !(1..=64).contains(&w) {
            let s = e.span();
            return Err(FrontendError::Syntax {
                line: s.line,
                col: s.col,
                msg: format!("width {w} out of range 1..=64"),
            });
        }
        Ok(w as Width)
    }

    /// `: u8` or `: u(EXPR)`; absent means the program default width.
    fn parse_width_suffix(&mut self, prog: &AbkProgram) -> Result<Width, FrontendError> {
        if *self.peek() != Tok::Colon {
            return Ok(prog.default_width);
        }
        self.bump();
        let (tyname, sp) = self.expect_ident("type like u8")?;
        if tyname == "u" {
            self.expect(Tok::LParen, "'('")?;
            let e = self.parse_expr()?;
            let w = self.const_width(&e, &EvalEnv::with(&self.consts))?;
            self.expect(Tok::RParen, "')'")?;
            return Ok(w);
        }
        let digits = tyname.strip_prefix('u').ok_or(FrontendError::Syntax {
            line: sp.line,
            col: sp.col,
            msg: format!("expected unsigned type, found {tyname}"),
        })?;
        let w: u64 = digits.parse().map_err(|_| FrontendError::Syntax {
            line: sp.line,
            col: sp.col,
            msg: format!("malformed type {tyname}"),
        })?;
        if !(1..=64).contains(&w) {
            return Err(FrontendError::Syntax {
                line: sp.line,
                col: sp.col,
                msg: format!("width {w} out of range 1..=64"),
            });
        }
        Ok(w as Width)
    }

    fn parse_decl(&mut self, prog: &mut AbkProgram) -> Result<(), FrontendError> {
        let kw = self.bump();
        let is_array = matches!(&kw.tok, Tok::Ident(n) if n == "arr");
        let (name, span) = self.expect_ident("declaration name")?;
        if prog.decl(&name).is_some() || self.consts.iter().any(|(n, _)| *n == name) {
            return Err(self.err(format!("{name} redeclared")));
        }
        let kind = if is_array {
            self.expect(Tok::LBracket, "'['")?;
            let e = self.parse_expr()?;
            let len = eval_const(&e, &EvalEnv::with(&self.consts))?;
            if len == 0 || len > u32::MAX as u64 {
                return Err(self.err(format!("array length {len} out of range")));
            }
            self.expect(Tok::RBracket, "']'")?;
            DeclKind::Array { len }
        } else {
            DeclKind::Scalar
        };
        let width = self.parse_width_suffix(prog)?;
        self.expect(Tok::Semi, "';'")?;
        prog.decls.push(Decl { name, width, kind, span });
        Ok(())
    }

    fn parse_block(
        &mut self,
        prog: &mut AbkProgram,
        pending: Vec<(String, String, Span)>,
    ) -> Result<Block, FrontendError> {
        let (name, start, span) = match self.bump() {
            Token { tok: Tok::Marker { name, start }, span } => (name, start, span),
            _ => unreachable!("caller checked for a start marker"),
        };
        debug_assert!(start);
        let annot = super::annot::parse_annotations(pending, prog)?;
        let mut items = Vec::new();
        let mut pending_inner: Vec<(String, String, Span)> = Vec::new();
        loop {
            match self.peek().clone() {
                Tok::Eof => {
                    return Err(self.err(format!("block {name} is never closed")));
                }
                Tok::Annot { name: an, text } => {
                    let sp = self.bump().span;
                    pending_inner.push((an, text, sp));
                }
                Tok::Marker { name: mname, start: false } => {
                    self.bump();
                    if mname != name {
                        return Err(self.err(format!(
                            "end marker {mname} does not match open block {name}"
                        )));
                    }
                    if let Some((n, _, sp)) = pending_inner.first() {
                        return Err(FrontendError::Annotation {
                            line: sp.line,
                            msg: format!("dangling %{n} inside block {name}"),
                        });
                    }
                    let block = Block { name, annot, items, span };
                    // Validate complete annotation sets eagerly so malformed
                    // alloc rules surface at parse time; completeness itself
                    // is only enforced at lowering.
                    if block.annot.missing().is_empty() {
                        super::annot::resolve_block_io(prog, &block)?;
                    }
                    return Ok(block);
                }
                Tok::Marker { start: true, .. } => {
                    let inner = self.parse_block(prog, std::mem::take(&mut pending_inner))?;
                    items.push(Item::Block(inner));
                }
                _ => {
                    if let Some((n, _, sp)) = pending_inner.first() {
                        return Err(FrontendError::Annotation {
                            line: sp.line,
                            msg: format!("dangling %{n}: annotations must immediately precede a block"),
                        });
                    }
                    let stmt = self.parse_stmt(prog)?;
                    items.push(Item::Stmt(stmt));
                }
            }
        }
    }

    fn parse_stmt(&mut self, prog: &AbkProgram) -> Result<Stmt, FrontendError> {
        let span = self.span();
        if self.at_ident("for") {
            self.bump();
            let (var, _) = self.expect_ident("loop variable")?;
            if !self.at_ident("in") {
                return Err(self.err("expected 'in'"));
            }
            self.bump();
            let lo = self.parse_expr()?;
            self.expect(Tok::DotDot, "'..'")?;
            let hi = self.parse_expr()?;
            self.expect(Tok::LBrace, "'{'")?;
            let body = self.parse_stmt_list(prog)?;
            self.expect(Tok::RBrace, "'}'")?;
            return Ok(Stmt::For { var, lo, hi, body, span });
        }
        if self.at_ident("while") {
            self.bump();
            self.expect(Tok::LParen, "'('")?;
            let cond = self.parse_expr()?;
            self.expect(Tok::RParen, "')'")?;
            self.expect(Tok::LBrace, "'{'")?;
            let body = self.parse_stmt_list(prog)?;
            self.expect(Tok::RBrace, "'}'")?;
            return Ok(Stmt::While { cond, body, span });
        }
        let (name, nspan) = self.expect_ident("statement")?;
        let lhs = if *self.peek() == Tok::LBracket {
            self.bump();
            let idx = self.parse_expr()?;
            self.expect(Tok::RBracket, "']'")?;
            LValue::Elem { array: name, index: idx, span: nspan }
        } else {
            LValue::Scalar { name, span: nspan }
        };
        self.expect(Tok::Assign, "'='")?;
        let rhs = self.parse_expr()?;
        self.expect(Tok::Semi, "';'")?;
        Ok(Stmt::Assign { lhs, rhs, span })
    }

    fn parse_stmt_list(&mut self, prog: &AbkProgram) -> Result<Vec<Stmt>, FrontendError> {
        let mut out = Vec::new();
        while *self.peek() != Tok::RBrace {
            if *self.peek() == Tok::Eof {
                return Err(self.err("unexpected end of file in statement list"));
            }
            out.push(self.parse_stmt(prog)?);
        }
        Ok(out)
    }

    pub fn parse_expr(&mut self) -> Result<Expr, FrontendError> {
        self.parse_ternary()
    }

    fn parse_ternary(&mut self) -> Result<Expr, FrontendError> {
        let cond = self.parse_bin(0)?;
        if *self.peek() == Tok::Question {
            let span = self.bump().span;
            let on_true = self.parse_ternary()?;
            self.expect(Tok::Colon, "':'")?;
            let on_false = self.parse_ternary()?;
            return Ok(Expr::Ternary {
                cond: Box::new(cond),
                on_true: Box::new(on_true),
                on_false: Box::new(on_false),
                span,
            });
        }
        Ok(cond)
    }

    fn bin_level(tok: &Tok) -> Option<(AstBinOp, u8)> {
        Some(match tok {
            Tok::Pipe => (AstBinOp::Or, 0),
            Tok::Caret => (AstBinOp::Xor, 1),
            Tok::Amp => (AstBinOp::And, 2),
            Tok::EqEq => (AstBinOp::Eq, 3),
            Tok::Ne => (AstBinOp::Ne, 3),
            Tok::Lt => (AstBinOp::Lt, 4),
            Tok::Le => (AstBinOp::Le, 4),
            Tok::Gt => (AstBinOp::Gt, 4),
            Tok::Ge => (AstBinOp::Ge, 4),
            Tok::Shl => (AstBinOp::Shl, 5),
            Tok::Shr => (AstBinOp::Shr, 5),
            Tok::Plus => (AstBinOp::Add, 6),
            Tok::Minus => (AstBinOp::Sub, 6),
            Tok::Star => (AstBinOp::Mul, 7),
            Tok::Slash => (AstBinOp::Div, 7),
            Tok::Percent => (AstBinOp::Mod, 7),
            _ => return None,
        })
    }

    fn parse_bin(&mut self, min_level: u8) -> Result<Expr, FrontendError> {
        let mut lhs = self.parse_unary()?;
        while let Some((op, level)) = Self::bin_level(self.peek()) {
            if level < min_level {
                break;
            }
            let span = self.bump().span;
            let rhs = self.parse_bin(level + 1)?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs), span };
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Expr, FrontendError> {
        match self.peek() {
            Tok::Tilde => {
                let span = self.bump().span;
                let operand = self.parse_unary()?;
                Ok(Expr::Unary { op: UnOp::Not, operand: Box::new(operand), span })
            }
            Tok::Minus => {
                let span = self.bump().span;
                let operand = self.parse_unary()?;
                Ok(Expr::Unary { op: UnOp::Neg, operand: Box::new(operand), span })
            }
            _ => self.parse_atom(),
        }
    }

    fn parse_atom(&mut self) -> Result<Expr, FrontendError> {
        let span = self.span();
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(Expr::Int { value: v, span })
            }
            Tok::LParen => {
                self.bump();
                let e = self.parse_expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                if name == "act" && *self.peek() == Tok::LParen {
                    self.bump();
                    let lane = self.parse_expr()?;
                    self.expect(Tok::RParen, "')'")?;
                    return Ok(Expr::Act { lane: Box::new(lane), span });
                }
                if *self.peek() == Tok::LBracket {
                    self.bump();
                    let idx = self.parse_expr()?;
                    self.expect(Tok::RBracket, "']'")?;
                    return Ok(Expr::Index { array: name, index: Box::new(idx), span });
                }
                Ok(Expr::Var { name, span })
            }
            other => Err(self.err(format!("expected expression, found {other:?}"))),
        }
    }
}

/// Parse ABK source text into a program AST. `name` labels the program in
/// reports (typically the file stem).
pub fn parse(src: &str, name: &str) -> Result<AbkProgram, FrontendError> {
    Parser::new(src)?.parse_program(name)
}
