//! Full loop unrolling and SSA conversion.
//!
//! Scalars outside `while` bodies are versioned: each assignment defines a
//! fresh temporary and the final version is copied back to the scalar's cell
//! at the end of the enclosing block (or program). Scalars assigned inside a
//! `while` body are loop-carried and stay demoted to their memory cell.
//! Array accesses with constant indices become direct cell references;
//! data-dependent indices survive as `LoadDyn`/`StoreDyn`.

use super::ast::*;
use super::parser::EvalEnv;
use super::FrontendError;
use crate::diag::{DiagEvent, Diagnostics};
use crate::ssa::*;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompileMode {
    /// Batch-consistency lowering: loops must fully unroll.
    Batch,
    /// Responsiveness lowering: `while` loops keep their back-edge.
    Responsiveness,
}

#[derive(Debug, Clone)]
pub struct CompileOptions {
    pub mode: CompileMode,
    pub instr_cap: usize,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { mode: CompileMode::Batch, instr_cap: 200_000 }
    }
}

pub fn min_width(v: u64) -> Width {
    (64 - v.leading_zeros() as Width).max(1)
}

pub fn action_width(action_count: u64) -> Width {
    debug_assert!(action_count >= 2);
    64 - (action_count - 1).leading_zeros() as Width
}

fn result_width(op: AstBinOp, wl: Width, wr: Width) -> Width {
    match op {
        AstBinOp::Eq | AstBinOp::Ne | AstBinOp::Lt | AstBinOp::Le | AstBinOp::Gt | AstBinOp::Ge => 1,
        AstBinOp::Shl | AstBinOp::Shr => wl,
        _ => wl.max(wr),
    }
}

fn runtime_op(op: AstBinOp) -> Option<BinOp> {
    Some(match op {
        AstBinOp::Add => BinOp::Add,
        AstBinOp::Sub => BinOp::Sub,
        AstBinOp::Mul => BinOp::Mul,
        AstBinOp::And => BinOp::And,
        AstBinOp::Or => BinOp::Or,
        AstBinOp::Xor => BinOp::Xor,
        AstBinOp::Shl => BinOp::Shl,
        AstBinOp::Shr => BinOp::Shr,
        AstBinOp::Eq => BinOp::Eq,
        AstBinOp::Ne => BinOp::Ne,
        AstBinOp::Lt => BinOp::Lt,
        AstBinOp::Le => BinOp::Le,
        AstBinOp::Gt => BinOp::Gt,
        AstBinOp::Ge => BinOp::Ge,
        AstBinOp::Div | AstBinOp::Mod => return None,
    })
}

/// Name of the synthetic per-lane action array of a block.
pub fn act_array_name(block: &str) -> String {
    format!("__act_{block}")
}

struct BlockCtx {
    name: String,
    batch_size: Option<u64>,
    /// Scalars whose binding changed inside this block scope.
    assigned: BTreeSet<String>,
}

struct Compiler<'p> {
    prog: &'p AbkProgram,
    opts: &'p CompileOptions,
    cells: CellTable,
    arrays: Vec<ArrayInfo>,
    array_ids: BTreeMap<String, ArrayId>,
    scalar_cells: BTreeMap<String, CellId>,
    demoted: BTreeSet<String>,
    bindings: BTreeMap<String, Operand>,
    loop_vars: Vec<(String, u64)>,
    instrs: Vec<Instr>,
    spans: Vec<Span>,
    temp_count: u32,
    first_temp: u32,
    while_regions: Vec<WhileRegion>,
    block_ranges: Vec<std::ops::Range<usize>>,
    diags: Diagnostics,
    blocks: Vec<BlockCtx>,
    /// Top-level scope assigned set.
    top_assigned: BTreeSet<String>,
}

impl<'p> Compiler<'p> {
    fn err_at(&self, span: Span, msg: impl Into<String>) -> FrontendError {
        FrontendError::Syntax { line: span.line, col: span.col, msg: msg.into() }
    }

    fn emit(&mut self, ins: Instr, span: Span) -> Result<usize, FrontendError> {
        if self.instrs.len() >= self.opts.instr_cap {
            return Err(FrontendError::UnrollCap { cap: self.opts.instr_cap });
        }
        self.instrs.push(ins);
        self.spans.push(span);
        Ok(self.instrs.len() - 1)
    }

    fn temp(&mut self, width: Width) -> CellId {
        let id = self.cells.push(width, CellName::Temp(self.temp_count));
        self.temp_count += 1;
        id
    }

    fn loop_var(&self, name: &str) -> Option<u64> {
        self.loop_vars.iter().rev().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn const_env(&self) -> EvalEnv {
        let mut env = EvalEnv::with(&self.prog.consts);
        for (n, v) in &self.loop_vars {
            env.bind(n, *v);
        }
        env
    }

    /// Innermost enclosing block that declares a batch size.
    fn act_owner(&self) -> Option<(&str, u64)> {
        self.blocks
            .iter()
            .rev()
            .find_map(|b| b.batch_size.map(|bs| (b.name.as_str(), bs)))
    }

    fn compile_expr(&mut self, e: &Expr) -> Result<Operand, FrontendError> {
        match e {
            Expr::Int { value, .. } => Ok(Operand::konst(*value, min_width(*value))),
            Expr::Var { name, span } => {
                if let Some(v) = self.loop_var(name) {
                    return Ok(Operand::konst(v, min_width(v)));
                }
                if let Some(v) = self.prog.const_value(name) {
                    return Ok(Operand::konst(v, min_width(v)));
                }
                if let Some(op) = self.bindings.get(name) {
                    return Ok(*op);
                }
                Err(self.err_at(*span, format!("unknown identifier {name}")))
            }
            Expr::Index { array, index, span } => {
                let aid = *self
                    .array_ids
                    .get(array)
                    .ok_or_else(|| self.err_at(*span, format!("unknown array {array}")))?;
                let idx = self.compile_expr(index)?;
                let info = &self.arrays[aid.0 as usize];
                match idx {
                    Operand::Const { value, .. } => {
                        if value < info.len as u64 {
                            Ok(Operand::Cell(CellId(info.base.0 + value as u32)))
                        } else {
                            self.diags.push(DiagEvent::OobRead {
                                pc: self.instrs.len(),
                                array: array.clone(),
                                index: value,
                            });
                            Ok(Operand::konst(0, info.width))
                        }
                    }
                    _ => {
                        let w = info.width;
                        let dst = self.temp(w);
                        self.emit(Instr::LoadDyn { dst, array: aid, index: idx }, *span)?;
                        Ok(Operand::Cell(dst))
                    }
                }
            }
            Expr::Act { lane, span } => {
                if self.prog.action_count == 1 {
                    // Fold, but keep evaluating the lane expression so its
                    // side conditions (bounds diagnostics) still fire.
                    let _ = self.compile_expr(lane)?;
                    return Ok(Operand::konst(0, 1));
                }
                let (owner, bs) = self
                    .act_owner()
                    .map(|(n, b)| (n.to_string(), b))
                    .ok_or_else(|| {
                        self.err_at(*span, "act() outside a block with %IN_BATCH_SIZE")
                    })?;
                let aname = act_array_name(&owner);
                let aid = *self.array_ids.get(&aname).expect("act array pre-allocated");
                let idx = self.compile_expr(lane)?;
                match idx {
                    Operand::Const { value, .. } => {
                        if value < bs {
                            let info = &self.arrays[aid.0 as usize];
                            Ok(Operand::Cell(CellId(info.base.0 + value as u32)))
                        } else {
                            self.diags.push(DiagEvent::OobRead {
                                pc: self.instrs.len(),
                                array: aname,
                                index: value,
                            });
                            Ok(Operand::konst(0, action_width(self.prog.action_count)))
                        }
                    }
                    _ => {
                        let w = action_width(self.prog.action_count);
                        let dst = self.temp(w);
                        self.emit(Instr::LoadDyn { dst, array: aid, index: idx }, *span)?;
                        Ok(Operand::Cell(dst))
                    }
                }
            }
            Expr::Unary { op, operand, span } => {
                let v = self.compile_expr(operand)?;
                let w = v.width(&self.cells);
                // Constant arithmetic is 64-bit; the result carries its
                // minimal width (so `~0` is all-ones, not a 1-bit value).
                match (op, v) {
                    (UnOp::Not, Operand::Const { value, .. }) => {
                        Ok(Operand::konst(!value, min_width(!value)))
                    }
                    (UnOp::Neg, Operand::Const { value, .. }) => {
                        let r = value.wrapping_neg();
                        Ok(Operand::konst(r, min_width(r)))
                    }
                    (UnOp::Not, v) => {
                        let dst = self.temp(w);
                        self.emit(Instr::Not { dst, src: v }, *span)?;
                        Ok(Operand::Cell(dst))
                    }
                    (UnOp::Neg, v) => {
                        let dst = self.temp(w);
                        self.emit(
                            Instr::Bin { dst, op: BinOp::Sub, lhs: Operand::konst(0, w), rhs: v },
                            *span,
                        )?;
                        Ok(Operand::Cell(dst))
                    }
                }
            }
            Expr::Binary { op, lhs, rhs, span } => {
                let a = self.compile_expr(lhs)?;
                let b = self.compile_expr(rhs)?;
                let wl = a.width(&self.cells);
                let wr = b.width(&self.cells);
                let w = result_width(*op, wl, wr);
                if let (Operand::Const { value: va, .. }, Operand::Const { value: vb, .. }) = (a, b) {
                    let folded = match op {
                        AstBinOp::Div => va.checked_div(vb).ok_or_else(|| {
                            self.err_at(*span, "division by zero in constant expression")
                        })?,
                        AstBinOp::Mod => va.checked_rem(vb).ok_or_else(|| {
                            self.err_at(*span, "modulo by zero in constant expression")
                        })?,
                        _ => runtime_op(*op).unwrap().eval(va, vb, 64),
                    };
                    return Ok(Operand::konst(folded, min_width(folded)));
                }
                let rop = runtime_op(*op).ok_or_else(|| {
                    self.err_at(*span, "division is only supported in constant expressions")
                })?;
                let dst = self.temp(w);
                self.emit(Instr::Bin { dst, op: rop, lhs: a, rhs: b }, *span)?;
                Ok(Operand::Cell(dst))
            }
            Expr::Ternary { cond, on_true, on_false, span } => {
                let c = self.compile_expr(cond)?;
                let t = self.compile_expr(on_true)?;
                let f = self.compile_expr(on_false)?;
                if let Operand::Const { value, .. } = c {
                    return Ok(if value != 0 { t } else { f });
                }
                let c1 = self.to_bit(c, *span)?;
                let w = t.width(&self.cells).max(f.width(&self.cells));
                let dst = self.temp(w);
                self.emit(Instr::Select { dst, cond: c1, on_true: t, on_false: f }, *span)?;
                Ok(Operand::Cell(dst))
            }
        }
    }

    /// Normalize an operand to width 1 for use as a condition.
    fn to_bit(&mut self, v: Operand, span: Span) -> Result<Operand, FrontendError> {
        if v.width(&self.cells) == 1 {
            return Ok(v);
        }
        if let Operand::Const { value, .. } = v {
            return Ok(Operand::konst((value != 0) as u64, 1));
        }
        let dst = self.temp(1);
        let w = v.width(&self.cells);
        self.emit(Instr::Bin { dst, op: BinOp::Ne, lhs: v, rhs: Operand::konst(0, w) }, span)?;
        Ok(Operand::Cell(dst))
    }

    fn mark_assigned(&mut self, name: &str) {
        if let Some(b) = self.blocks.last_mut() {
            b.assigned.insert(name.to_string());
        } else {
            self.top_assigned.insert(name.to_string());
        }
    }

    fn compile_stmt(&mut self, s: &Stmt) -> Result<(), FrontendError> {
        match s {
            Stmt::Assign { lhs, rhs, span } => {
                let v = self.compile_expr(rhs)?;
                match lhs {
                    LValue::Scalar { name, span: nspan } => {
                        if self.loop_var(name).is_some() || self.prog.const_value(name).is_some() {
                            return Err(self.err_at(*nspan, format!("cannot assign to constant {name}")));
                        }
                        let cell = *self.scalar_cells.get(name).ok_or_else(|| {
                            self.err_at(*nspan, format!("unknown scalar {name}"))
                        })?;
                        let w = self.cells.width(cell);
                        if self.demoted.contains(name) {
                            self.emit(Instr::Copy { dst: cell, src: v }, *span)?;
                            return Ok(());
                        }
                        // Versions are always cells, never folded constants:
                        // the AST interpreter tracks constness structurally
                        // and scalars must stay runtime values on both paths.
                        let bound = match v {
                            Operand::Cell(c)
                                if c.0 >= self.first_temp && self.cells.width(c) == w =>
                            {
                                Operand::Cell(c)
                            }
                            src => {
                                let t = self.temp(w);
                                self.emit(Instr::Copy { dst: t, src }, *span)?;
                                Operand::Cell(t)
                            }
                        };
                        self.bindings.insert(name.clone(), bound);
                        self.mark_assigned(name);
                        Ok(())
                    }
                    LValue::Elem { array, index, span: aspan } => {
                        let aid = *self.array_ids.get(array).ok_or_else(|| {
                            self.err_at(*aspan, format!("unknown array {array}"))
                        })?;
                        let idx = self.compile_expr(index)?;
                        let info = &self.arrays[aid.0 as usize];
                        match idx {
                            Operand::Const { value, .. } => {
                                if value < info.len as u64 {
                                    let dst = CellId(info.base.0 + value as u32);
                                    self.emit(Instr::Copy { dst, src: v }, *span)?;
                                } else {
                                    self.diags.push(DiagEvent::OobWrite {
                                        pc: self.instrs.len(),
                                        array: array.clone(),
                                        index: value,
                                    });
                                }
                                Ok(())
                            }
                            _ => {
                                self.emit(Instr::StoreDyn { array: aid, index: idx, value: v }, *span)?;
                                Ok(())
                            }
                        }
                    }
                }
            }
            Stmt::For { var, lo, hi, body, span } => {
                let env = self.const_env();
                let lo_v = super::parser::eval_const(lo, &env).map_err(|_| FrontendError::Bound {
                    line: span.line,
                    msg: format!("for-loop bound of `{var}` is not a compile-time constant"),
                })?;
                let hi_v = super::parser::eval_const(hi, &env).map_err(|_| FrontendError::Bound {
                    line: span.line,
                    msg: format!("for-loop bound of `{var}` is not a compile-time constant"),
                })?;
                if self.scalar_cells.contains_key(var) || self.array_ids.contains_key(var) {
                    return Err(self.err_at(*span, format!("loop variable {var} shadows a declaration")));
                }
                for i in lo_v..hi_v {
                    self.loop_vars.push((var.clone(), i));
                    for st in body {
                        self.compile_stmt(st)?;
                    }
                    self.loop_vars.pop();
                }
                Ok(())
            }
            Stmt::While { cond, body, span } => {
                if self.opts.mode != CompileMode::Responsiveness {
                    return Err(FrontendError::WhileOutsideRb { line: span.line });
                }
                // The condition is re-evaluated on every iteration, so the
                // back-edge targets its first instruction. Guard pc 0: the
                // initial control state must not recur.
                if self.instrs.is_empty() {
                    self.emit(Instr::Nop, *span)?;
                }
                let cond_start = self.instrs.len();
                let c = self.compile_expr(cond)?;
                let c1 = self.to_bit(c, *span)?;
                let branch_pc = self.emit(Instr::BranchZero { cond: c1, target: usize::MAX }, *span)?;
                for st in body {
                    self.compile_stmt(st)?;
                }
                let back_edge = self.emit(Instr::Jump { target: cond_start }, *span)?;
                let exit = self.instrs.len();
                if let Instr::BranchZero { target, .. } = &mut self.instrs[branch_pc] {
                    *target = exit;
                }
                self.while_regions.push(WhileRegion { cond_start, back_edge });
                Ok(())
            }
        }
    }

    /// Copy final scalar versions back to their cells and reset bindings.
    fn writeback(&mut self, names: &BTreeSet<String>, span: Span) -> Result<(), FrontendError> {
        for name in names {
            let cell = self.scalar_cells[name];
            let cur = self.bindings[name];
            if cur != Operand::Cell(cell) {
                self.emit(Instr::Copy { dst: cell, src: cur }, span)?;
                self.bindings.insert(name.clone(), Operand::Cell(cell));
            }
        }
        Ok(())
    }

    fn compile_items(&mut self, items: &[Item]) -> Result<(), FrontendError> {
        for item in items {
            match item {
                Item::Stmt(s) => self.compile_stmt(s)?,
                Item::Block(b) => self.compile_block(b)?,
            }
        }
        Ok(())
    }

    fn compile_block(&mut self, b: &Block) -> Result<(), FrontendError> {
        let range_idx = self.block_ranges.len();
        self.block_ranges.push(0..0);
        let start = self.instrs.len();
        self.blocks.push(BlockCtx {
            name: b.name.clone(),
            batch_size: b.annot.in_batch_size,
            assigned: BTreeSet::new(),
        });
        self.compile_items(&b.items)?;
        let ctx = self.blocks.pop().expect("block context");
        self.writeback(&ctx.assigned, b.span)?;
        // Escaped assignments still belong to the enclosing scope for its own
        // writeback bookkeeping (already reset to cells, so it is a no-op
        // there, but keeps the sets consistent).
        self.block_ranges[range_idx] = start..self.instrs.len();
        Ok(())
    }
}

/// Scalars assigned anywhere inside a `while` body; they stay memory-resident.
fn demoted_scalars(items: &[Item]) -> BTreeSet<String> {
    fn scan_stmts(stmts: &[Stmt], in_while: bool, out: &mut BTreeSet<String>) {
        for s in stmts {
            match s {
                Stmt::Assign { lhs: LValue::Scalar { name, .. }, .. } => {
                    if in_while {
                        out.insert(name.clone());
                    }
                }
                Stmt::Assign { .. } => {}
                Stmt::For { body, .. } => scan_stmts(body, in_while, out),
                Stmt::While { body, .. } => scan_stmts(body, true, out),
            }
        }
    }
    fn scan_items(items: &[Item], out: &mut BTreeSet<String>) {
        for it in items {
            match it {
                Item::Stmt(s) => scan_stmts(std::slice::from_ref(s), false, out),
                Item::Block(b) => scan_items(&b.items, out),
            }
        }
    }
    let mut out = BTreeSet::new();
    scan_items(items, &mut out);
    out
}

/// Blocks that use `act()`, attributed to the innermost enclosing block with a
/// batch size.
fn act_using_blocks(prog: &AbkProgram) -> Result<BTreeSet<String>, FrontendError> {
    fn expr_uses_act(e: &Expr) -> bool {
        match e {
            Expr::Act { .. } => true,
            Expr::Int { .. } | Expr::Var { .. } => false,
            Expr::Index { index, .. } => expr_uses_act(index),
            Expr::Unary { operand, .. } => expr_uses_act(operand),
            Expr::Binary { lhs, rhs, .. } => expr_uses_act(lhs) || expr_uses_act(rhs),
            Expr::Ternary { cond, on_true, on_false, .. } => {
                expr_uses_act(cond) || expr_uses_act(on_true) || expr_uses_act(on_false)
            }
        }
    }
    fn stmt_uses_act(s: &Stmt) -> bool {
        match s {
            Stmt::Assign { lhs, rhs, .. } => {
                expr_uses_act(rhs)
                    || matches!(lhs, LValue::Elem { index, .. } if expr_uses_act(index))
            }
            Stmt::For { lo, hi, body, .. } => {
                expr_uses_act(lo) || expr_uses_act(hi) || body.iter().any(stmt_uses_act)
            }
            Stmt::While { cond, body, .. } => {
                expr_uses_act(cond) || body.iter().any(stmt_uses_act)
            }
        }
    }
    fn walk(
        items: &[Item],
        stack: &mut Vec<(String, Option<u64>)>,
        out: &mut BTreeSet<String>,
    ) -> Result<(), FrontendError> {
        for it in items {
            match it {
                Item::Stmt(s) => {
                    if stmt_uses_act(s) {
                        let owner = stack.iter().rev().find(|(_, bs)| bs.is_some());
                        match owner {
                            Some((name, _)) => {
                                out.insert(name.clone());
                            }
                            None => {
                                return Err(FrontendError::Syntax {
                                    line: 0,
                                    col: 0,
                                    msg: "act() used outside a block with %IN_BATCH_SIZE".into(),
                                })
                            }
                        }
                    }
                }
                Item::Block(b) => {
                    stack.push((b.name.clone(), b.annot.in_batch_size));
                    walk(&b.items, stack, out)?;
                    stack.pop();
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeSet::new();
    walk(&prog.items, &mut Vec::new(), &mut out)?;
    Ok(out)
}

/// `act()` reads in a block make the lowered sub-model multi-action; blocks
/// that never read the action get a singleton action set.
pub fn block_reads_actions(prog: &AbkProgram, block_name: &str) -> bool {
    prog.action_count > 1
        && act_using_blocks(prog).map(|s| s.contains(block_name)).unwrap_or(false)
}

/// Unroll every `for` loop and convert the whole program to straight-line SSA.
pub fn unroll_and_ssa(prog: &AbkProgram, opts: &CompileOptions) -> Result<SsaProgram, FrontendError> {
    let mut cells = CellTable::default();
    let mut arrays = Vec::new();
    let mut array_ids = BTreeMap::new();
    let mut scalar_cells = BTreeMap::new();
    for d in &prog.decls {
        match d.kind {
            DeclKind::Scalar => {
                let name: Arc<str> = d.name.as_str().into();
                let c = cells.push(d.width, CellName::Scalar(name));
                scalar_cells.insert(d.name.clone(), c);
            }
            DeclKind::Array { len } => {
                let name: Arc<str> = d.name.as_str().into();
                let base = CellId(cells.len() as u32);
                for i in 0..len {
                    cells.push(d.width, CellName::Elem(name.clone(), i as u32));
                }
                let id = ArrayId(arrays.len() as u32);
                arrays.push(ArrayInfo::new(name, base, len as u32, d.width));
                array_ids.insert(d.name.clone(), id);
            }
        }
    }
    if prog.action_count > 1 {
        for bname in act_using_blocks(prog)? {
            let block = prog
                .all_blocks()
                .into_iter()
                .find(|b| b.name == bname)
                .expect("act owner exists");
            let bs = block.annot.in_batch_size.expect("act owner has a batch size");
            let aname = act_array_name(&bname);
            let name: Arc<str> = aname.as_str().into();
            let base = CellId(cells.len() as u32);
            let w = action_width(prog.action_count);
            for i in 0..bs {
                cells.push(w, CellName::Elem(name.clone(), i as u32));
            }
            let id = ArrayId(arrays.len() as u32);
            arrays.push(ArrayInfo::new(name, base, bs as u32, w));
            array_ids.insert(aname, id);
        }
    }
    let first_temp = cells.len() as u32;
    let bindings: BTreeMap<String, Operand> =
        scalar_cells.iter().map(|(n, c)| (n.clone(), Operand::Cell(*c))).collect();
    let mut c = Compiler {
        prog,
        opts,
        cells,
        arrays,
        array_ids,
        scalar_cells,
        demoted: demoted_scalars(&prog.items),
        bindings,
        loop_vars: Vec::new(),
        instrs: Vec::new(),
        spans: Vec::new(),
        temp_count: 0,
        first_temp,
        while_regions: Vec::new(),
        block_ranges: Vec::new(),
        diags: Diagnostics::default(),
        blocks: Vec::new(),
        top_assigned: BTreeSet::new(),
    };
    c.compile_items(&prog.items)?;
    let top = std::mem::take(&mut c.top_assigned);
    c.writeback(&top, Span::default())?;
    Ok(SsaProgram {
        cells: c.cells,
        arrays: c.arrays,
        instrs: c.instrs,
        spans: c.spans,
        first_temp,
        while_regions: c.while_regions,
        block_ranges: c.block_ranges,
        compile_diags: c.diags,
    })
}
