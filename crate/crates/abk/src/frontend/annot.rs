//! Batch-operation annotation directives and allocation-rule resolution.

use super::ast::*;
use super::parser::{eval_const, free_vars, EvalEnv, Parser};
use super::FrontendError;
use crate::ssa::Span;

fn parse_expr_text(text: &str, line: u32) -> Result<Expr, FrontendError> {
    let mut p = Parser::new(text).map_err(|_| FrontendError::Annotation {
        line,
        msg: format!("malformed expression `{text}`"),
    })?;
    p.parse_expr().map_err(|e| FrontendError::Annotation { line, msg: e.to_string() })
}

fn parse_alloc_text(text: &str, line: u32) -> Result<AllocRule, FrontendError> {
    // (x) = [lo : hi]
    let bad = |msg: &str| FrontendError::Annotation { line, msg: format!("{msg} in `{text}`") };
    let (binder, rest) = text
        .split_once('=')
        .ok_or_else(|| bad("expected `(lane) = [lo : hi]`"))?;
    let binder = binder.trim();
    let lane_var = binder
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .map(str::trim)
        .filter(|s| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
        .ok_or_else(|| bad("expected `(lane)` binder"))?;
    let rest = rest.trim();
    let body = rest
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| bad("expected `[lo : hi]` range"))?;
    let (lo_txt, hi_txt) = body.split_once(':').ok_or_else(|| bad("expected `lo : hi`"))?;
    let lo = parse_expr_text(lo_txt, line)?;
    let hi = parse_expr_text(hi_txt, line)?;
    Ok(AllocRule { lane_var: lane_var.to_string(), lo, hi, span: Span { line, col: 1 } })
}

fn parse_rel_text(text: &str, line: u32) -> Result<Vec<RelVar>, FrontendError> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let e = parse_expr_text(part, line)?;
        match e {
            Expr::Var { name, span } => out.push(RelVar { name, index: None, span }),
            Expr::Index { array, index, span } => {
                let idx = eval_const(&index, &EvalEnv::default()).map_err(|_| {
                    FrontendError::Annotation {
                        line,
                        msg: format!("%REL index must be a literal constant in `{part}`"),
                    }
                })?;
                out.push(RelVar { name: array, index: Some(idx), span });
            }
            _ => {
                return Err(FrontendError::Annotation {
                    line,
                    msg: format!("%REL expects variable names, found `{part}`"),
                })
            }
        }
    }
    if out.is_empty() {
        return Err(FrontendError::Annotation { line, msg: "%REL names no variables".into() });
    }
    Ok(out)
}

/// Parse the directive lines collected ahead of one block.
pub fn parse_annotations(
    pending: Vec<(String, String, Span)>,
    prog: &AbkProgram,
) -> Result<BatchAnnotation, FrontendError> {
    let mut a = BatchAnnotation::default();
    // Directive values may reference earlier directives of the same block
    // (e.g. %IN_BATCH_SIZE BS/IN_SIZE), so thread a local environment.
    let mut env = EvalEnv::with(&prog.consts);
    for (name, text, span) in pending {
        let line = span.line;
        a.span = if a.span == Span::default() { span } else { a.span };
        let dup = |set: bool| -> Result<(), FrontendError> {
            if set {
                Err(FrontendError::Annotation { line, msg: format!("duplicate %{name}") })
            } else {
                Ok(())
            }
        };
        let size_value = || -> Result<u64, FrontendError> {
            let e = parse_expr_text(&text, line)?;
            let v = eval_const(&e, &env).map_err(|e| FrontendError::Annotation {
                line,
                msg: e.to_string(),
            })?;
            if v == 0 {
                return Err(FrontendError::Annotation { line, msg: format!("%{name} must be positive") });
            }
            Ok(v)
        };
        match name.as_str() {
            "IN_SIZE" => {
                dup(a.in_size.is_some())?;
                let v = size_value()?;
                a.in_size = Some(v);
                env.bind("IN_SIZE", v);
            }
            "IN_BATCH_SIZE" => {
                dup(a.in_batch_size.is_some())?;
                let v = size_value()?;
                a.in_batch_size = Some(v);
                env.bind("IN_BATCH_SIZE", v);
            }
            "OUT_SIZE" => {
                dup(a.out_size.is_some())?;
                let v = size_value()?;
                a.out_size = Some(v);
                env.bind("OUT_SIZE", v);
            }
            "OUT_BATCH_SIZE" => {
                dup(a.out_batch_size.is_some())?;
                let v = size_value()?;
                a.out_batch_size = Some(v);
                env.bind("OUT_BATCH_SIZE", v);
            }
            "BATCH_MEM_IN" => {
                dup(a.batch_mem_in.is_some())?;
                a.batch_mem_in = Some(text.trim().to_string());
            }
            "BATCH_MEM_OUT" => {
                dup(a.batch_mem_out.is_some())?;
                a.batch_mem_out = Some(text.trim().to_string());
            }
            "IN_ALLOC_RULE" => {
                dup(a.in_alloc.is_some())?;
                a.in_alloc = Some(parse_alloc_text(&text, line)?);
            }
            "OUT_ALLOC_RULE" => {
                dup(a.out_alloc.is_some())?;
                a.out_alloc = Some(parse_alloc_text(&text, line)?);
            }
            "REL" => {
                a.rel_vars.extend(parse_rel_text(&text, line)?);
            }
            other => {
                return Err(FrontendError::Annotation {
                    line,
                    msg: format!("unknown annotation %{other}"),
                })
            }
        }
    }
    Ok(a)
}

/// Per-lane address ranges produced by resolving an allocation rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedAlloc {
    /// `[lo, hi)` per lane.
    pub ranges: Vec<(u64, u64)>,
    /// Free-variable base-offset binding, when the rule had one.
    pub free_binding: Option<(String, u64)>,
}

/// Resolve an alloc rule to concrete per-lane ranges and validate them:
/// each lane covers exactly `elem_size` cells, stays inside the array, and
/// lanes are pairwise disjoint. A free variable is bound to the smallest
/// value that keeps every lane in bounds.
pub fn resolve_alloc(
    rule: &AllocRule,
    lanes: u64,
    elem_size: u64,
    array_len: u64,
    base_env: &EvalEnv,
) -> Result<ResolvedAlloc, FrontendError> {
    let line = rule.span.line;
    let mut env = base_env.clone();
    env.bind(&rule.lane_var, 0);
    let mut free = Vec::new();
    free_vars(&rule.lo, &env, &mut free);
    free_vars(&rule.hi, &env, &mut free);
    if free.len() > 1 {
        return Err(FrontendError::Annotation {
            line,
            msg: format!("alloc rule has multiple free variables: {}", free.join(", ")),
        });
    }
    let candidates: Vec<u64> = if free.is_empty() { vec![0] } else { (0..=array_len).collect() };
    let mut last_err = None;
    'cand: for base in candidates {
        let mut env = base_env.clone();
        if let Some(f) = free.first() {
            env.bind(f, base);
        }
        let mut ranges = Vec::with_capacity(lanes as usize);
        for x in 0..lanes {
            env.bind(&rule.lane_var, x);
            let lo = match eval_const(&rule.lo, &env) {
                Ok(v) => v,
                Err(e) => return Err(FrontendError::Annotation { line, msg: e.to_string() }),
            };
            let hi = match eval_const(&rule.hi, &env) {
                Ok(v) => v,
                Err(e) => return Err(FrontendError::Annotation { line, msg: e.to_string() }),
            };
            if hi < lo || hi - lo != elem_size {
                last_err = Some(format!(
                    "lane {x} covers {} cells, element size is {elem_size}",
                    hi.saturating_sub(lo)
                ));
                continue 'cand;
            }
            if hi > array_len {
                last_err = Some(format!("lane {x} range [{lo}:{hi}] exceeds array length {array_len}"));
                continue 'cand;
            }
            ranges.push((lo, hi));
        }
        // disjointness across lanes
        let mut sorted = ranges.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(FrontendError::Annotation {
                    line,
                    msg: format!(
                        "alloc rule maps overlapping lanes: [{}:{}] and [{}:{}]",
                        w[0].0, w[0].1, w[1].0, w[1].1
                    ),
                });
            }
        }
        return Ok(ResolvedAlloc {
            ranges,
            free_binding: free.first().map(|f| (f.clone(), base)),
        });
    }
    Err(FrontendError::Annotation {
        line,
        msg: format!(
            "no in-bounds binding for alloc rule{}",
            last_err.map(|e| format!(" ({e})")).unwrap_or_default()
        ),
    })
}

/// Fully resolved batch wiring of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIo {
    pub batch_size: u64,
    pub in_size: u64,
    pub out_size: u64,
    pub in_array: String,
    pub out_array: String,
    pub in_ranges: Vec<(u64, u64)>,
    pub out_ranges: Vec<(u64, u64)>,
    pub rel: Vec<RelVar>,
    pub free_bindings: Vec<(String, u64)>,
}

/// Validate a block's annotations against the declarations and resolve both
/// alloc rules. Fails when any of the eight required directives is missing.
pub fn resolve_block_io(prog: &AbkProgram, block: &Block) -> Result<BlockIo, FrontendError> {
    let a = &block.annot;
    let line = a.span.line;
    let missing = a.missing();
    if !missing.is_empty() {
        return Err(FrontendError::Annotation {
            line,
            msg: format!("block {}: missing directives: {}", block.name, missing.join(", ")),
        });
    }
    let in_size = a.in_size.unwrap();
    let out_size = a.out_size.unwrap();
    let b_in = a.in_batch_size.unwrap();
    let b_out = a.out_batch_size.unwrap();
    if b_in != b_out {
        return Err(FrontendError::Annotation {
            line,
            msg: format!("block {}: IN_BATCH_SIZE {b_in} != OUT_BATCH_SIZE {b_out}", block.name),
        });
    }
    let arr_len = |name: &str| -> Result<u64, FrontendError> {
        match prog.decl(name) {
            Some(Decl { kind: DeclKind::Array { len }, .. }) => Ok(*len),
            Some(_) => Err(FrontendError::Annotation {
                line,
                msg: format!("batch memory {name} is a scalar, expected array"),
            }),
            None => Err(FrontendError::Annotation {
                line,
                msg: format!("batch memory {name} is not declared"),
            }),
        }
    };
    let in_array = a.batch_mem_in.clone().unwrap();
    let out_array = a.batch_mem_out.clone().unwrap();
    let in_len = arr_len(&in_array)?;
    let out_len = arr_len(&out_array)?;
    let mut env = EvalEnv::with(&prog.consts);
    env.bind("IN_SIZE", in_size);
    env.bind("IN_BATCH_SIZE", b_in);
    env.bind("OUT_SIZE", out_size);
    env.bind("OUT_BATCH_SIZE", b_out);
    let rin = resolve_alloc(a.in_alloc.as_ref().unwrap(), b_in, in_size, in_len, &env)?;
    let rout = resolve_alloc(a.out_alloc.as_ref().unwrap(), b_in, out_size, out_len, &env)?;
    for rv in &a.rel_vars {
        match (prog.decl(&rv.name), rv.index) {
            (None, _) => {
                return Err(FrontendError::Annotation {
                    line: rv.span.line,
                    msg: format!("%REL names undeclared variable {}", rv.name),
                })
            }
            (Some(Decl { kind: DeclKind::Scalar, .. }), Some(_)) => {
                return Err(FrontendError::Annotation {
                    line: rv.span.line,
                    msg: format!("%REL indexes scalar {}", rv.name),
                })
            }
            (Some(Decl { kind: DeclKind::Array { len }, .. }), Some(i)) if i >= *len => {
                return Err(FrontendError::Annotation {
                    line: rv.span.line,
                    msg: format!("%REL index {i} out of bounds for {}[{len}]", rv.name),
                })
            }
            _ => {}
        }
    }
    let mut free_bindings = Vec::new();
    free_bindings.extend(rin.free_binding.clone());
    free_bindings.extend(rout.free_binding.clone());
    Ok(BlockIo {
        batch_size: b_in,
        in_size,
        out_size,
        in_array,
        out_array,
        in_ranges: rin.ranges,
        out_ranges: rout.ranges,
        rel: a.rel_vars.clone(),
        free_bindings,
    })
}
