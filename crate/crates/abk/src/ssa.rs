//! Straight-line SSA form: the instruction set shared by the frontend, the
//! lowered transition systems, and the symbolic encoder.
//!
//! After full unrolling, every scalar assignment defines a fresh temporary and
//! array accesses carry constant addresses whenever the index expression is
//! compile-time constant. Loop structure survives only for `while` regions
//! compiled in responsiveness mode, as a `BranchZero`/`Jump` pair whose
//! back-edge makes unresponsiveness representable.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Index into the flat cell vector of a program or machine state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId(pub u32);

impl CellId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Index into a program's array table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArrayId(pub u32);

/// Bit width of a cell or value; 1..=64.
pub type Width = u32;

#[inline]
pub fn mask(width: Width) -> u64 {
    debug_assert!(width >= 1 && width <= 64);
    if width == 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// How a cell is named when rendered for humans. Kept compact because large
/// kernels have tens of thousands of cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellName {
    /// Declared scalar.
    Scalar(Arc<str>),
    /// Declared array element.
    Elem(Arc<str>, u32),
    /// SSA temporary.
    Temp(u32),
    /// Input-region action cell for a lane.
    InAct(u32),
    /// Input-region data word `word` of lane `lane`.
    InData { lane: u32, word: u32 },
    /// Output-region word `word` of lane `lane`.
    OutWord { lane: u32, word: u32 },
}

impl fmt::Display for CellName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellName::Scalar(n) => write!(f, "{n}"),
            CellName::Elem(n, i) => write!(f, "{n}[{i}]"),
            CellName::Temp(i) => write!(f, "t{i}"),
            CellName::InAct(l) => write!(f, "in{l}.act"),
            CellName::InData { lane, word } => write!(f, "in{lane}.d{word}"),
            CellName::OutWord { lane, word } => write!(f, "out{lane}.w{word}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellInfo {
    pub width: Width,
    pub name: CellName,
}

/// Flat table of every addressable cell: declared variables first, then SSA
/// temporaries, then any input/output region cells appended by lowering.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTable {
    pub cells: Vec<CellInfo>,
}

impl CellTable {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn push(&mut self, width: Width, name: CellName) -> CellId {
        let id = CellId(self.cells.len() as u32);
        self.cells.push(CellInfo { width, name });
        id
    }

    pub fn width(&self, c: CellId) -> Width {
        self.cells[c.idx()].width
    }

    pub fn name(&self, c: CellId) -> String {
        self.cells[c.idx()].name.to_string()
    }
}

/// A declared array: a contiguous run of cells plus per-address read/write
/// redirection tables. Lowering points addresses covered by a batch
/// allocation rule at the corresponding region cells; all other addresses
/// keep pointing at the array's own backing cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: Arc<str>,
    pub base: CellId,
    pub len: u32,
    pub width: Width,
    /// Cell read when address `a` is loaded; `read_map[a]` defaults to
    /// `base + a`.
    pub read_map: Vec<CellId>,
    /// Cell written when address `a` is stored.
    pub write_map: Vec<CellId>,
}

impl ArrayInfo {
    pub fn new(name: Arc<str>, base: CellId, len: u32, width: Width) -> Self {
        let ids: Vec<CellId> = (0..len).map(|i| CellId(base.0 + i)).collect();
        ArrayInfo { name, base, len, width, read_map: ids.clone(), write_map: ids }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Cell(CellId),
    Const { value: u64, width: Width },
}

impl Operand {
    pub const fn konst(value: u64, width: Width) -> Operand {
        Operand::Const { value, width }
    }

    pub fn width(&self, cells: &CellTable) -> Width {
        match *self {
            Operand::Cell(c) => cells.width(c),
            Operand::Const { width, .. } => width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl BinOp {
    pub fn is_comparison(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
            BinOp::Eq => "eq",
            BinOp::Ne => "ne",
            BinOp::Lt => "lt",
            BinOp::Le => "le",
            BinOp::Gt => "gt",
            BinOp::Ge => "ge",
        }
    }

    /// Unsigned evaluation over masked u64 values. `w` is the result width.
    pub fn eval(self, a: u64, b: u64, w: Width) -> u64 {
        let m = mask(w);
        match self {
            BinOp::Add => a.wrapping_add(b) & m,
            BinOp::Sub => a.wrapping_sub(b) & m,
            BinOp::Mul => a.wrapping_mul(b) & m,
            BinOp::And => a & b & m,
            BinOp::Or => (a | b) & m,
            BinOp::Xor => (a ^ b) & m,
            BinOp::Shl => {
                if b >= 64 {
                    0
                } else {
                    (a << b) & m
                }
            }
            BinOp::Shr => {
                if b >= 64 {
                    0
                } else {
                    (a & m) >> b
                }
            }
            BinOp::Eq => (a == b) as u64,
            BinOp::Ne => (a != b) as u64,
            BinOp::Lt => (a < b) as u64,
            BinOp::Le => (a <= b) as u64,
            BinOp::Gt => (a > b) as u64,
            BinOp::Ge => (a >= b) as u64,
        }
    }
}

/// One transition step of a lowered model executes exactly one instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instr {
    Bin { dst: CellId, op: BinOp, lhs: Operand, rhs: Operand },
    Not { dst: CellId, src: Operand },
    /// Bit-select: `dst = cond != 0 ? on_true : on_false`; `cond` is width 1
    /// by construction.
    Select { dst: CellId, cond: Operand, on_true: Operand, on_false: Operand },
    Copy { dst: CellId, src: Operand },
    /// Data-dependent array read; out-of-bounds yields 0.
    LoadDyn { dst: CellId, array: ArrayId, index: Operand },
    /// Data-dependent array write; out-of-bounds is dropped.
    StoreDyn { array: ArrayId, index: Operand, value: Operand },
    /// Jump to `target` when `cond == 0` (while-loop exit test).
    BranchZero { cond: Operand, target: usize },
    /// Unconditional jump (while-loop back-edge).
    Jump { target: usize },
    Nop,
}

impl Instr {
    /// Cell defined by this instruction, if statically known.
    pub fn def(&self) -> Option<CellId> {
        match *self {
            Instr::Bin { dst, .. }
            | Instr::Not { dst, .. }
            | Instr::Select { dst, .. }
            | Instr::Copy { dst, .. }
            | Instr::LoadDyn { dst, .. } => Some(dst),
            _ => None,
        }
    }

    /// Array written through a data-dependent store, if any.
    pub fn def_array(&self) -> Option<ArrayId> {
        match *self {
            Instr::StoreDyn { array, .. } => Some(array),
            _ => None,
        }
    }

    pub fn operands(&self) -> Vec<Operand> {
        match *self {
            Instr::Bin { lhs, rhs, .. } => vec![lhs, rhs],
            Instr::Not { src, .. } | Instr::Copy { src, .. } => vec![src],
            Instr::Select { cond, on_true, on_false, .. } => vec![cond, on_true, on_false],
            Instr::LoadDyn { index, .. } => vec![index],
            Instr::StoreDyn { index, value, .. } => vec![index, value],
            Instr::BranchZero { cond, .. } => vec![cond],
            Instr::Jump { .. } | Instr::Nop => vec![],
        }
    }

    /// Cells read by this instruction (constant operands excluded).
    pub fn used_cells(&self) -> Vec<CellId> {
        self.operands()
            .into_iter()
            .filter_map(|o| match o {
                Operand::Cell(c) => Some(c),
                Operand::Const { .. } => None,
            })
            .collect()
    }

    /// Array read through a data-dependent load, if any.
    pub fn use_array(&self) -> Option<ArrayId> {
        match *self {
            Instr::LoadDyn { array, .. } => Some(array),
            _ => None,
        }
    }
}

/// Source location carried from the `.abk` text through unrolling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

/// A `while` region: instructions `[cond_start ..= back_edge]`, where
/// `back_edge` holds the `Jump` back to `cond_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhileRegion {
    pub cond_start: usize,
    pub back_edge: usize,
}

/// The straight-line SSA program for a whole kernel, with instruction ranges
/// recorded for every annotated block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsaProgram {
    pub cells: CellTable,
    pub arrays: Vec<ArrayInfo>,
    pub instrs: Vec<Instr>,
    pub spans: Vec<Span>,
    /// First temp cell; cells below this index are declared variables.
    pub first_temp: u32,
    pub while_regions: Vec<WhileRegion>,
    /// Instruction range per annotated block, in source order.
    pub block_ranges: Vec<std::ops::Range<usize>>,
    /// Compile-time diagnostics (constant out-of-bounds accesses).
    pub compile_diags: crate::diag::Diagnostics,
}

impl SsaProgram {
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    pub fn is_temp(&self, c: CellId) -> bool {
        c.0 >= self.first_temp
    }

    fn fmt_operand(&self, o: Operand) -> String {
        match o {
            Operand::Cell(c) => self.cells.name(c),
            Operand::Const { value, width } => format!("{value}:u{width}"),
        }
    }

    /// Deterministic one-instruction-per-line dump with stable numbering,
    /// suitable for golden tests.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (pc, ins) in self.instrs.iter().enumerate() {
            let body = match ins {
                Instr::Bin { dst, op, lhs, rhs } => format!(
                    "{} = {} {}, {}",
                    self.cells.name(*dst),
                    op.mnemonic(),
                    self.fmt_operand(*lhs),
                    self.fmt_operand(*rhs)
                ),
                Instr::Not { dst, src } => {
                    format!("{} = not {}", self.cells.name(*dst), self.fmt_operand(*src))
                }
                Instr::Select { dst, cond, on_true, on_false } => format!(
                    "{} = select {}, {}, {}",
                    self.cells.name(*dst),
                    self.fmt_operand(*cond),
                    self.fmt_operand(*on_true),
                    self.fmt_operand(*on_false)
                ),
                Instr::Copy { dst, src } => {
                    format!("{} = copy {}", self.cells.name(*dst), self.fmt_operand(*src))
                }
                Instr::LoadDyn { dst, array, index } => format!(
                    "{} = load {}[{}]",
                    self.cells.name(*dst),
                    self.arrays[array.0 as usize].name,
                    self.fmt_operand(*index)
                ),
                Instr::StoreDyn { array, index, value } => format!(
                    "store {}[{}] = {}",
                    self.arrays[array.0 as usize].name,
                    self.fmt_operand(*index),
                    self.fmt_operand(*value)
                ),
                Instr::BranchZero { cond, target } => {
                    format!("brz {}, @{}", self.fmt_operand(*cond), target)
                }
                Instr::Jump { target } => format!("jmp @{target}"),
                Instr::Nop => "nop".to_string(),
            };
            out.push_str(&format!("@{pc:<4} {body}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binop_eval_masks_to_width() {
        assert_eq!(BinOp::Add.eval(0xff, 1, 8), 0);
        assert_eq!(BinOp::Add.eval(0xff, 1, 16), 0x100);
        assert_eq!(BinOp::Mul.eval(7, 7, 4), 49 & 0xf);
        assert_eq!(BinOp::Shl.eval(1, 200, 8), 0);
        assert_eq!(BinOp::Shr.eval(0x80, 7, 8), 1);
        assert_eq!(BinOp::Lt.eval(3, 5, 1), 1);
    }

    #[test]
    fn cell_table_names_round_trip() {
        let mut t = CellTable::default();
        let a = t.push(8, CellName::Scalar("key".into()));
        let b = t.push(4, CellName::Elem("buf".into(), 17));
        let c = t.push(1, CellName::Temp(3));
        assert_eq!(t.name(a), "key");
        assert_eq!(t.name(b), "buf[17]");
        assert_eq!(t.name(c), "t3");
        assert_eq!(t.width(a), 8);
    }

    #[test]
    fn mask_edges() {
        assert_eq!(mask(1), 1);
        assert_eq!(mask(8), 0xff);
        assert_eq!(mask(64), u64::MAX);
    }
}
