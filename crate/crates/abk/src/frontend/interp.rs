//! Direct AST interpretation, used as the independent oracle for semantic
//! preservation of unrolling, SSA conversion, and lowering.

use super::ast::*;
use super::compile::{action_width, min_width};
use crate::diag::{DiagEvent, Diagnostics};
use crate::ssa::{mask, BinOp, Instr, Operand, SsaProgram, Width};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum InterpError {
    #[error("execution exceeded {budget} steps")]
    Budget { budget: u64 },
    #[error("interpreter: {0}")]
    Other(String),
}

fn ast_runtime_op(op: AstBinOp) -> BinOp {
    match op {
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
        AstBinOp::Div | AstBinOp::Mod => unreachable!("handled by the caller"),
    }
}

/// Named machine for AST interpretation: declared variables plus per-block
/// lane actions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AstEnv {
    pub scalars: BTreeMap<String, u64>,
    pub arrays: BTreeMap<String, Vec<u64>>,
    /// Lane actions per block name.
    pub acts: BTreeMap<String, Vec<u64>>,
}

impl AstEnv {
    pub fn zeroed(prog: &AbkProgram) -> Self {
        let mut env = AstEnv::default();
        for d in &prog.decls {
            match d.kind {
                DeclKind::Scalar => {
                    env.scalars.insert(d.name.clone(), 0);
                }
                DeclKind::Array { len } => {
                    env.arrays.insert(d.name.clone(), vec![0; len as usize]);
                }
            }
        }
        env
    }
}

struct AstInterp<'p> {
    prog: &'p AbkProgram,
    env: &'p mut AstEnv,
    loop_vars: Vec<(String, u64)>,
    block_stack: Vec<(String, Option<u64>)>,
    diags: Diagnostics,
    budget: u64,
    steps: u64,
}

impl<'p> AstInterp<'p> {
    fn tick(&mut self) -> Result<(), InterpError> {
        self.steps += 1;
        if self.steps > self.budget {
            return Err(InterpError::Budget { budget: self.budget });
        }
        Ok(())
    }

    fn decl_width(&self, name: &str) -> Option<Width> {
        self.prog.decl(name).map(|d| d.width)
    }

    /// Evaluate to (value, width, is-compile-time-constant). The constness
    /// flag mirrors the compiler's folding exactly so both paths assign the
    /// same widths, and thus the same wrapping, everywhere.
    fn eval(&mut self, e: &Expr) -> Result<(u64, Width, bool), InterpError> {
        match e {
            Expr::Int { value, .. } => Ok((*value, min_width(*value), true)),
            Expr::Var { name, .. } => {
                if let Some((_, v)) = self.loop_vars.iter().rev().find(|(n, _)| n == name) {
                    return Ok((*v, min_width(*v), true));
                }
                if let Some(v) = self.prog.const_value(name) {
                    return Ok((v, min_width(v), true));
                }
                let v = *self
                    .env
                    .scalars
                    .get(name)
                    .ok_or_else(|| InterpError::Other(format!("unknown scalar {name}")))?;
                Ok((v, self.decl_width(name).unwrap_or(64), false))
            }
            Expr::Index { array, index, .. } => {
                let (i, _, iconst) = self.eval(index)?;
                let w = self.decl_width(array).unwrap_or(64);
                let arr = self
                    .env
                    .arrays
                    .get(array)
                    .ok_or_else(|| InterpError::Other(format!("unknown array {array}")))?;
                if (i as usize) < arr.len() {
                    Ok((arr[i as usize], w, false))
                } else {
                    self.diags.push(DiagEvent::OobRead { pc: 0, array: array.clone(), index: i });
                    // A constant out-of-bounds read folds to constant zero at
                    // the array width.
                    Ok((0, w, iconst))
                }
            }
            Expr::Act { lane, .. } => {
                let (i, _, iconst) = self.eval(lane)?;
                if self.prog.action_count == 1 {
                    return Ok((0, 1, true));
                }
                let w = action_width(self.prog.action_count);
                let owner = self
                    .block_stack
                    .iter()
                    .rev()
                    .find(|(_, bs)| bs.is_some())
                    .ok_or_else(|| InterpError::Other("act() outside annotated block".into()))?;
                let acts = self.env.acts.get(&owner.0).cloned().unwrap_or_default();
                let bs = owner.1.unwrap();
                if i < bs && (i as usize) < acts.len() {
                    Ok((acts[i as usize], w, false))
                } else if i < bs {
                    Ok((0, w, false))
                } else {
                    self.diags.push(DiagEvent::OobRead {
                        pc: 0,
                        array: super::compile::act_array_name(&owner.0),
                        index: i,
                    });
                    Ok((0, w, iconst))
                }
            }
            Expr::Unary { op, operand, .. } => {
                let (v, w, vconst) = self.eval(operand)?;
                if vconst {
                    // constant arithmetic is 64-bit
                    let r = match op {
                        UnOp::Not => !v,
                        UnOp::Neg => v.wrapping_neg(),
                    };
                    return Ok((r, min_width(r), true));
                }
                match op {
                    UnOp::Not => Ok((!v & mask(w), w, false)),
                    UnOp::Neg => Ok((v.wrapping_neg() & mask(w), w, false)),
                }
            }
            Expr::Binary { op, lhs, rhs, .. } => {
                let (a, wl, lc) = self.eval(lhs)?;
                let (b, wr, rc) = self.eval(rhs)?;
                if lc && rc {
                    let r = match op {
                        AstBinOp::Div => a.checked_div(b).unwrap_or(0),
                        AstBinOp::Mod => a.checked_rem(b).unwrap_or(0),
                        _ => ast_runtime_op(*op).eval(a, b, 64),
                    };
                    return Ok((r, min_width(r), true));
                }
                let w = match op {
                    AstBinOp::Eq
                    | AstBinOp::Ne
                    | AstBinOp::Lt
                    | AstBinOp::Le
                    | AstBinOp::Gt
                    | AstBinOp::Ge => 1,
                    AstBinOp::Shl | AstBinOp::Shr => wl,
                    _ => wl.max(wr),
                };
                let v = match op {
                    AstBinOp::Div => a.checked_div(b).unwrap_or(0) & mask(w),
                    AstBinOp::Mod => a.checked_rem(b).unwrap_or(0) & mask(w),
                    _ => ast_runtime_op(*op).eval(a, b, w),
                };
                Ok((v, w, false))
            }
            Expr::Ternary { cond, on_true, on_false, .. } => {
                // Mux semantics: both branches are evaluated.
                let (c, _, cconst) = self.eval(cond)?;
                let (t, wt, tc) = self.eval(on_true)?;
                let (f, wf, fc) = self.eval(on_false)?;
                if cconst {
                    // folds to the chosen branch operand
                    return Ok(if c != 0 { (t, wt, tc) } else { (f, wf, fc) });
                }
                Ok((if c != 0 { t } else { f }, wt.max(wf), false))
            }
        }
    }

    fn exec(&mut self, s: &Stmt) -> Result<(), InterpError> {
        self.tick()?;
        match s {
            Stmt::Assign { lhs, rhs, .. } => {
                let (v, _, _) = self.eval(rhs)?;
                match lhs {
                    LValue::Scalar { name, .. } => {
                        let w = self
                            .decl_width(name)
                            .ok_or_else(|| InterpError::Other(format!("unknown scalar {name}")))?;
                        self.env.scalars.insert(name.clone(), v & mask(w));
                    }
                    LValue::Elem { array, index, .. } => {
                        let (i, _, _) = self.eval(index)?;
                        let w = self.decl_width(array).unwrap_or(64);
                        let arr = self
                            .env
                            .arrays
                            .get_mut(array)
                            .ok_or_else(|| InterpError::Other(format!("unknown array {array}")))?;
                        if (i as usize) < arr.len() {
                            arr[i as usize] = v & mask(w);
                        } else {
                            self.diags.push(DiagEvent::OobWrite {
                                pc: 0,
                                array: array.clone(),
                                index: i,
                            });
                        }
                    }
                }
            }
            Stmt::For { var, lo, hi, body, .. } => {
                let (lo_v, _, _) = self.eval(lo)?;
                let (hi_v, _, _) = self.eval(hi)?;
                for i in lo_v..hi_v {
                    self.loop_vars.push((var.clone(), i));
                    for st in body {
                        self.exec(st)?;
                    }
                    self.loop_vars.pop();
                }
            }
            Stmt::While { cond, body, .. } => loop {
                self.tick()?;
                let (c, _, _) = self.eval(cond)?;
                if c == 0 {
                    break;
                }
                for st in body {
                    self.exec(st)?;
                }
            },
        }
        Ok(())
    }

    fn exec_items(&mut self, items: &[Item]) -> Result<(), InterpError> {
        for it in items {
            match it {
                Item::Stmt(s) => self.exec(s)?,
                Item::Block(b) => {
                    self.block_stack.push((b.name.clone(), b.annot.in_batch_size));
                    self.exec_items(&b.items)?;
                    self.block_stack.pop();
                }
            }
        }
        Ok(())
    }
}

/// Interpret a whole program against a named environment.
pub fn interpret_ast(
    prog: &AbkProgram,
    env: &mut AstEnv,
    budget: u64,
) -> Result<Diagnostics, InterpError> {
    let mut it = AstInterp {
        prog,
        env,
        loop_vars: Vec::new(),
        block_stack: Vec::new(),
        diags: Diagnostics::default(),
        budget,
        steps: 0,
    };
    it.exec_items(&prog.items)?;
    Ok(it.diags)
}

/// Execute an SSA program directly over a flat cell vector (identity array
/// maps, no regions). Independent of the lowered-model interpreter.
pub fn interpret_ssa(
    ssa: &SsaProgram,
    memory: &mut [u64],
    budget: u64,
) -> Result<Diagnostics, InterpError> {
    let mut diags = Diagnostics::default();
    let mut pc = 0usize;
    let mut steps = 0u64;
    let read = |mem: &[u64], o: Operand| match o {
        Operand::Cell(c) => mem[c.idx()],
        Operand::Const { value, width } => value & mask(width),
    };
    while pc < ssa.instrs.len() {
        steps += 1;
        if steps > budget {
            return Err(InterpError::Budget { budget });
        }
        let mut next = pc + 1;
        match &ssa.instrs[pc] {
            Instr::Bin { dst, op, lhs, rhs } => {
                let v = op.eval(read(memory, *lhs), read(memory, *rhs), ssa.cells.width(*dst));
                memory[dst.idx()] = v;
            }
            Instr::Not { dst, src } => {
                memory[dst.idx()] = !read(memory, *src) & mask(ssa.cells.width(*dst));
            }
            Instr::Select { dst, cond, on_true, on_false } => {
                let v = if read(memory, *cond) != 0 {
                    read(memory, *on_true)
                } else {
                    read(memory, *on_false)
                };
                memory[dst.idx()] = v & mask(ssa.cells.width(*dst));
            }
            Instr::Copy { dst, src } => {
                memory[dst.idx()] = read(memory, *src) & mask(ssa.cells.width(*dst));
            }
            Instr::LoadDyn { dst, array, index } => {
                let arr = &ssa.arrays[array.0 as usize];
                let i = read(memory, *index);
                let v = if i < arr.len as u64 {
                    memory[arr.read_map[i as usize].idx()]
                } else {
                    diags.push(DiagEvent::OobRead { pc, array: arr.name.to_string(), index: i });
                    0
                };
                memory[dst.idx()] = v & mask(ssa.cells.width(*dst));
            }
            Instr::StoreDyn { array, index, value } => {
                let arr = &ssa.arrays[array.0 as usize];
                let i = read(memory, *index);
                if i < arr.len as u64 {
                    let c = arr.write_map[i as usize];
                    memory[c.idx()] = read(memory, *value) & mask(ssa.cells.width(c));
                } else {
                    diags.push(DiagEvent::OobWrite { pc, array: arr.name.to_string(), index: i });
                }
            }
            Instr::BranchZero { cond, target } => {
                if read(memory, *cond) == 0 {
                    next = *target;
                }
            }
            Instr::Jump { target } => next = *target,
            Instr::Nop => {}
        }
        pc = next;
    }
    Ok(diags)
}
