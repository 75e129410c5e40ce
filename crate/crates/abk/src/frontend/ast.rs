//! Abstract syntax for the ABK kernel language.

use crate::ssa::{Span, Width};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnOp {
    /// Bitwise complement `~`.
    Not,
    /// Arithmetic negation `-` (two's complement at the operand width).
    Neg,
}

/// Binary operators as written in source. `Div` and `Mod` are restricted to
/// compile-time-constant contexts (constant declarations, annotation
/// expressions, loop bounds) and constant-foldable subexpressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AstBinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
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

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expr {
    Int { value: u64, span: Span },
    Var { name: String, span: Span },
    Index { array: String, index: Box<Expr>, span: Span },
    /// `act(e)`: the action of input lane `e`; valid inside annotated blocks.
    Act { lane: Box<Expr>, span: Span },
    Unary { op: UnOp, operand: Box<Expr>, span: Span },
    Binary { op: AstBinOp, lhs: Box<Expr>, rhs: Box<Expr>, span: Span },
    Ternary { cond: Box<Expr>, on_true: Box<Expr>, on_false: Box<Expr>, span: Span },
}

impl Expr {
    pub fn span(&self) -> Span {
        match self {
            Expr::Int { span, .. }
            | Expr::Var { span, .. }
            | Expr::Index { span, .. }
            | Expr::Act { span, .. }
            | Expr::Unary { span, .. }
            | Expr::Binary { span, .. }
            | Expr::Ternary { span, .. } => *span,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LValue {
    Scalar { name: String, span: Span },
    Elem { array: String, index: Expr, span: Span },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stmt {
    Assign { lhs: LValue, rhs: Expr, span: Span },
    For { var: String, lo: Expr, hi: Expr, body: Vec<Stmt>, span: Span },
    While { cond: Expr, body: Vec<Stmt>, span: Span },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeclKind {
    Scalar,
    Array { len: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decl {
    pub name: String,
    pub width: Width,
    pub kind: DeclKind,
    pub span: Span,
}

/// A relevant-state variable named by a `%REL` directive: a scalar, a whole
/// array, or a single array element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelVar {
    pub name: String,
    pub index: Option<u64>,
    pub span: Span,
}

/// Raw batch-operation annotations of one block; completeness is enforced at
/// lowering, not parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchAnnotation {
    pub in_size: Option<u64>,
    pub in_batch_size: Option<u64>,
    pub batch_mem_in: Option<String>,
    pub in_alloc: Option<AllocRule>,
    pub out_size: Option<u64>,
    pub out_batch_size: Option<u64>,
    pub batch_mem_out: Option<String>,
    pub out_alloc: Option<AllocRule>,
    pub rel_vars: Vec<RelVar>,
    pub span: Span,
}

impl BatchAnnotation {
    /// Names of the eight required directives that are absent.
    pub fn missing(&self) -> Vec<&'static str> {
        let mut m = Vec::new();
        if self.in_size.is_none() {
            m.push("IN_SIZE");
        }
        if self.in_batch_size.is_none() {
            m.push("IN_BATCH_SIZE");
        }
        if self.batch_mem_in.is_none() {
            m.push("BATCH_MEM_IN");
        }
        if self.in_alloc.is_none() {
            m.push("IN_ALLOC_RULE");
        }
        if self.out_size.is_none() {
            m.push("OUT_SIZE");
        }
        if self.out_batch_size.is_none() {
            m.push("OUT_BATCH_SIZE");
        }
        if self.batch_mem_out.is_none() {
            m.push("BATCH_MEM_OUT");
        }
        if self.out_alloc.is_none() {
            m.push("OUT_ALLOC_RULE");
        }
        m
    }
}

/// An affine lane-to-address-range rule: `(x) = [lo : hi]` with `hi`
/// exclusive. A single free variable is permitted and treated as a base
/// offset, bound to the smallest value that keeps every lane in bounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocRule {
    pub lane_var: String,
    pub lo: Expr,
    pub hi: Expr,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Item {
    Stmt(Stmt),
    Block(Block),
}

/// An annotated functional block delimited by `// ===NAME START===` /
/// `// ===NAME END===` markers. Blocks may nest; decomposition uses the
/// leaves depth-first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub annot: BatchAnnotation,
    pub items: Vec<Item>,
    pub span: Span,
}

impl Block {
    pub fn stmts(&self) -> impl Iterator<Item = &Stmt> {
        self.items.iter().filter_map(|i| match i {
            Item::Stmt(s) => Some(s),
            Item::Block(_) => None,
        })
    }

    pub fn nested(&self) -> impl Iterator<Item = &Block> {
        self.items.iter().filter_map(|i| match i {
            Item::Block(b) => Some(b),
            Item::Stmt(_) => None,
        })
    }

    pub fn is_leaf(&self) -> bool {
        self.nested().next().is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbkProgram {
    pub name: String,
    pub default_width: Width,
    pub action_count: u64,
    pub non_interfering: bool,
    /// Resolved constant declarations, in order.
    pub consts: Vec<(String, u64)>,
    pub decls: Vec<Decl>,
    pub items: Vec<Item>,
}

impl AbkProgram {
    pub fn const_value(&self, name: &str) -> Option<u64> {
        self.consts.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn decl(&self, name: &str) -> Option<&Decl> {
        self.decls.iter().find(|d| d.name == name)
    }

    /// All blocks, depth-first in source order.
    pub fn all_blocks(&self) -> Vec<&Block> {
        fn walk<'a>(items: &'a [Item], out: &mut Vec<&'a Block>) {
            for it in items {
                if let Item::Block(b) = it {
                    out.push(b);
                    walk(&b.items, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.items, &mut out);
        out
    }

    /// Leaf blocks (the units of decomposition), depth-first.
    pub fn leaf_blocks(&self) -> Vec<&Block> {
        self.all_blocks().into_iter().filter(|b| b.is_leaf()).collect()
    }

    pub fn top_level_stmts(&self) -> impl Iterator<Item = &Stmt> {
        self.items.iter().filter_map(|i| match i {
            Item::Stmt(s) => Some(s),
            Item::Block(_) => None,
        })
    }
}
