//! Bitvector term graph: hash-consed DAG with constant folding at
//! construction. Boolean values are width-1 terms; asserted roots are
//! conjoined, so the system is satisfiable exactly when a violation witness
//! exists.

use crate::ssa::{mask, BinOp, CellId, Width};
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TermId(pub u32);

impl TermId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Where a solver variable lives in the obligation, for decoding assignments
/// back into concrete runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarLoc {
    /// Initial value of a memory cell in run `run`.
    InitCell { run: usize, cell: CellId },
    InputAction { run: usize, batch: usize, lane: usize },
    InputData { run: usize, batch: usize, lane: usize, word: usize },
    /// One-hot selector bit: the compared batch index `i`.
    BatchSel { pos: usize },
    /// One-hot selector bit for lane `j` (which = 0) or `j'` (which = 1).
    LaneSel { which: u8, pos: usize },
    /// One-hot selector over the constrained relevant-value domain.
    RelChoice { run: usize, pos: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TermOp {
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
    Ult,
    Ule,
}

impl TermOp {
    fn eval(self, a: u64, b: u64, w: Width) -> u64 {
        match self {
            TermOp::Add => BinOp::Add.eval(a, b, w),
            TermOp::Sub => BinOp::Sub.eval(a, b, w),
            TermOp::Mul => BinOp::Mul.eval(a, b, w),
            TermOp::And => BinOp::And.eval(a, b, w),
            TermOp::Or => BinOp::Or.eval(a, b, w),
            TermOp::Xor => BinOp::Xor.eval(a, b, w),
            TermOp::Shl => BinOp::Shl.eval(a, b, w),
            TermOp::Shr => BinOp::Shr.eval(a, b, w),
            TermOp::Eq => (a == b) as u64,
            TermOp::Ne => (a != b) as u64,
            TermOp::Ult => (a < b) as u64,
            TermOp::Ule => (a <= b) as u64,
        }
    }

    fn is_predicate(self) -> bool {
        matches!(self, TermOp::Eq | TermOp::Ne | TermOp::Ult | TermOp::Ule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TermData {
    Var { index: u32 },
    Const { value: u64 },
    Not(TermId),
    Zext(TermId),
    Trunc(TermId),
    Bin { op: TermOp, a: TermId, b: TermId },
    Ite { c: TermId, t: TermId, e: TermId },
}

#[derive(Debug, Clone, Copy)]
pub struct VarInfo {
    pub width: Width,
    pub loc: VarLoc,
    pub term: TermId,
}

/// The constraint system: a term DAG plus asserted boolean roots and the
/// table mapping free variables back to model locations.
#[derive(Debug, Default)]
pub struct ConstraintSystem {
    data: Vec<TermData>,
    width: Vec<Width>,
    memo: HashMap<(TermData, Width), TermId>,
    pub roots: Vec<TermId>,
    pub vars: Vec<VarInfo>,
}

impl ConstraintSystem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self, t: TermId) -> TermData {
        self.data[t.idx()]
    }

    pub fn width(&self, t: TermId) -> Width {
        self.width[t.idx()]
    }

    fn intern(&mut self, d: TermData, w: Width) -> TermId {
        debug_assert!((1..=64).contains(&w));
        if let Some(&t) = self.memo.get(&(d, w)) {
            return t;
        }
        let t = TermId(self.data.len() as u32);
        self.data.push(d);
        self.width.push(w);
        self.memo.insert((d, w), t);
        t
    }

    pub fn konst(&mut self, value: u64, w: Width) -> TermId {
        self.intern(TermData::Const { value: value & mask(w) }, w)
    }

    pub fn tru(&mut self) -> TermId {
        self.konst(1, 1)
    }

    pub fn fals(&mut self) -> TermId {
        self.konst(0, 1)
    }

    pub fn var(&mut self, w: Width, loc: VarLoc) -> TermId {
        let index = self.vars.len() as u32;
        let t = self.intern(TermData::Var { index }, w);
        self.vars.push(VarInfo { width: w, loc, term: t });
        t
    }

    pub fn const_value(&self, t: TermId) -> Option<u64> {
        match self.data(t) {
            TermData::Const { value } => Some(value),
            _ => None,
        }
    }

    pub fn not(&mut self, a: TermId) -> TermId {
        let w = self.width(a);
        match self.data(a) {
            TermData::Const { value } => self.konst(!value, w),
            TermData::Not(inner) if self.width(inner) == w => inner,
            _ => self.intern(TermData::Not(a), w),
        }
    }

    /// Zero-extend or truncate `a` to width `w`.
    pub fn resize(&mut self, a: TermId, w: Width) -> TermId {
        let wa = self.width(a);
        if wa == w {
            return a;
        }
        if let TermData::Const { value } = self.data(a) {
            return self.konst(value & mask(w), w);
        }
        if wa < w {
            self.intern(TermData::Zext(a), w)
        } else {
            self.intern(TermData::Trunc(a), w)
        }
    }

    /// Apply `op` to `a` and `b` at result width `w` (operands are
    /// zero-extended to the comparison/result width first, mirroring the
    /// interpreter's u64 semantics).
    pub fn bin(&mut self, op: TermOp, a: TermId, b: TermId, w: Width) -> TermId {
        let (a, b) = if op.is_predicate() {
            let wc = self.width(a).max(self.width(b));
            (self.resize(a, wc), self.resize(b, wc))
        } else if matches!(op, TermOp::Shl | TermOp::Shr) {
            (self.resize(a, w), b)
        } else {
            (self.resize(a, w), self.resize(b, w))
        };
        if let (Some(va), Some(vb)) = (self.const_value(a), self.const_value(b)) {
            return self.konst(op.eval(va, vb, w), w);
        }
        // structural shortcuts on identical operands
        if a == b {
            match op {
                TermOp::Eq | TermOp::Ule => return self.tru(),
                TermOp::Ne | TermOp::Ult => return self.fals(),
                TermOp::Xor | TermOp::Sub => return self.konst(0, w),
                TermOp::And | TermOp::Or => return self.resize(a, w),
                _ => {}
            }
        }
        debug_assert!(op.is_predicate() == (w == 1) || !op.is_predicate());
        self.intern(TermData::Bin { op, a, b }, if op.is_predicate() { 1 } else { w })
    }

    pub fn eq(&mut self, a: TermId, b: TermId) -> TermId {
        self.bin(TermOp::Eq, a, b, 1)
    }

    pub fn ne(&mut self, a: TermId, b: TermId) -> TermId {
        self.bin(TermOp::Ne, a, b, 1)
    }

    pub fn and_bit(&mut self, a: TermId, b: TermId) -> TermId {
        debug_assert!(self.width(a) == 1 && self.width(b) == 1);
        self.bin(TermOp::And, a, b, 1)
    }

    pub fn or_bit(&mut self, a: TermId, b: TermId) -> TermId {
        debug_assert!(self.width(a) == 1 && self.width(b) == 1);
        self.bin(TermOp::Or, a, b, 1)
    }

    pub fn all(&mut self, bits: &[TermId]) -> TermId {
        let mut acc = self.tru();
        for &b in bits {
            acc = self.and_bit(acc, b);
        }
        acc
    }

    pub fn any(&mut self, bits: &[TermId]) -> TermId {
        let mut acc = self.fals();
        for &b in bits {
            acc = self.or_bit(acc, b);
        }
        acc
    }

    pub fn ite(&mut self, c: TermId, t: TermId, e: TermId) -> TermId {
        debug_assert_eq!(self.width(c), 1);
        let w = self.width(t).max(self.width(e));
        let t = self.resize(t, w);
        let e = self.resize(e, w);
        if let Some(vc) = self.const_value(c) {
            return if vc != 0 { t } else { e };
        }
        if t == e {
            return t;
        }
        self.intern(TermData::Ite { c, t, e }, w)
    }

    pub fn assert_root(&mut self, t: TermId) {
        debug_assert_eq!(self.width(t), 1);
        self.roots.push(t);
    }

    /// A fresh one-hot selector: `n` bits with exactly one set.
    pub fn one_hot(&mut self, n: usize, mk: impl Fn(usize) -> VarLoc) -> Vec<TermId> {
        let bits: Vec<TermId> = (0..n).map(|k| self.var(1, mk(k))).collect();
        let any = self.any(&bits);
        self.assert_root(any);
        for x in 0..n {
            for y in x + 1..n {
                let both = self.and_bit(bits[x], bits[y]);
                let neither = self.not(both);
                self.assert_root(neither);
            }
        }
        bits
    }

    /// Mux a list of equally-shaped words by a one-hot selector.
    pub fn select(&mut self, sel: &[TermId], words: &[TermId]) -> TermId {
        debug_assert_eq!(sel.len(), words.len());
        let mut acc = words[words.len() - 1];
        for k in (0..words.len() - 1).rev() {
            acc = self.ite(sel[k], words[k], acc);
        }
        acc
    }

    /// Evaluate a term under a full assignment to the variable table.
    pub fn eval(&self, t: TermId, var_values: &[u64]) -> u64 {
        // memoized bottom-up walk
        fn go(
            sys: &ConstraintSystem,
            t: TermId,
            vals: &[u64],
            memo: &mut Vec<Option<u64>>,
        ) -> u64 {
            if let Some(v) = memo[t.idx()] {
                return v;
            }
            let w = sys.width(t);
            let v = match sys.data(t) {
                TermData::Var { index } => vals[index as usize] & mask(w),
                TermData::Const { value } => value,
                TermData::Not(a) => !go(sys, a, vals, memo) & mask(w),
                TermData::Zext(a) => go(sys, a, vals, memo),
                TermData::Trunc(a) => go(sys, a, vals, memo) & mask(w),
                TermData::Bin { op, a, b } => {
                    let va = go(sys, a, vals, memo);
                    let vb = go(sys, b, vals, memo);
                    op.eval(va, vb, w)
                }
                TermData::Ite { c, t: tt, e } => {
                    if go(sys, c, vals, memo) != 0 {
                        go(sys, tt, vals, memo)
                    } else {
                        go(sys, e, vals, memo)
                    }
                }
            };
            memo[t.idx()] = Some(v);
            v
        }
        let mut memo = vec![None; self.len()];
        go(self, t, var_values, &mut memo)
    }
}

impl fmt::Display for ConstraintSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "terms {} vars {} roots {}", self.len(), self.vars.len(), self.roots.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_folding_and_sharing() {
        let mut s = ConstraintSystem::new();
        let a = s.konst(5, 4);
        let b = s.konst(3, 4);
        let c = s.bin(TermOp::Add, a, b, 4);
        assert_eq!(s.const_value(c), Some(8));
        let x = s.var(4, VarLoc::InitCell { run: 0, cell: CellId(0) });
        let e1 = s.bin(TermOp::Xor, x, a, 4);
        let e2 = s.bin(TermOp::Xor, x, a, 4);
        assert_eq!(e1, e2);
        // x == x folds to true; x != x to false
        assert_eq!(s.eq(x, x), s.tru());
        assert_eq!(s.ne(x, x), s.fals());
    }

    #[test]
    fn eval_matches_interpreter_semantics() {
        let mut s = ConstraintSystem::new();
        let x = s.var(4, VarLoc::InitCell { run: 0, cell: CellId(0) });
        let y = s.var(2, VarLoc::InitCell { run: 0, cell: CellId(1) });
        let sum = s.bin(TermOp::Add, x, y, 4);
        let shifted = s.bin(TermOp::Shl, sum, y, 4);
        for xv in 0..16u64 {
            for yv in 0..4u64 {
                let got = s.eval(shifted, &[xv, yv]);
                let want = BinOp::Shl.eval(BinOp::Add.eval(xv, yv, 4), yv, 4);
                assert_eq!(got, want, "x={xv} y={yv}");
            }
        }
    }

    #[test]
    fn one_hot_requires_exactly_one() {
        let mut s = ConstraintSystem::new();
        let sel = s.one_hot(3, |pos| VarLoc::LaneSel { which: 0, pos });
        // evaluate roots under all 8 assignments; exactly-one iff popcount 1
        for v in 0u64..8 {
            let vals: Vec<u64> = (0..3).map(|k| (v >> k) & 1).collect();
            let ok = s.roots.iter().all(|&r| s.eval(r, &vals) == 1);
            assert_eq!(ok, v.count_ones() == 1, "v={v:03b}");
        }
        let _ = sel;
    }
}
