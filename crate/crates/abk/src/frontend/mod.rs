//! ABK language frontend: parsing, unrolling/SSA conversion, and lowering of
//! annotated blocks to accelerator models.

pub mod annot;
pub mod ast;
pub mod compile;
pub mod interp;
mod lexer;
pub mod lower;
pub mod parser;

pub use annot::{resolve_alloc, resolve_block_io, BlockIo, ResolvedAlloc};
pub use ast::{AbkProgram, BatchAnnotation, Block, Decl, Expr, Item, Stmt};
pub use compile::{unroll_and_ssa, CompileMode, CompileOptions};
pub use interp::{interpret_ast, interpret_ssa, AstEnv};
pub use lower::{lower, lower_block, LowerCtx, LoweredBlock};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FrontendError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: u32, col: u32, msg: String },
    #[error("annotation error at line {line}: {msg}")]
    Annotation { line: u32, msg: String },
    #[error("bound error at line {line}: {msg}")]
    Bound { line: u32, msg: String },
    #[error("while-loop at line {line} requires responsiveness mode")]
    WhileOutsideRb { line: u32 },
    #[error("unrolled program exceeds the {cap}-instruction cap")]
    UnrollCap { cap: usize },
    #[error("relevant variable {name} aliases the {region} region")]
    Region { name: String, region: String },
    #[error("block {block}: aliased batch buffer address {addr} is read after being written")]
    AliasHazard { block: String, addr: u64 },
}

/// Parse ABK source into a program AST. Block names must be unique; complete
/// annotation sets are validated eagerly.
pub fn parse(src: &str, name: &str) -> Result<AbkProgram, FrontendError> {
    let prog = parser::parse(src, name)?;
    let blocks = prog.all_blocks();
    for (i, b) in blocks.iter().enumerate() {
        if blocks[..i].iter().any(|o| o.name == b.name) {
            return Err(FrontendError::Syntax {
                line: b.span.line,
                col: b.span.col,
                msg: format!("duplicate block name {}", b.name),
            });
        }
    }
    Ok(prog)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InputBatch;
    use crate::ssa::{BinOp, Instr};

    pub const CIPHER_SRC: &str = include_str!("../../kernels/cipher_pipeline.abk");

    fn parse_ok(src: &str) -> AbkProgram {
        parse(src, "test").unwrap_or_else(|e| panic!("parse failed: {e}"))
    }

    fn ssa_of(src: &str) -> (AbkProgram, crate::ssa::SsaProgram) {
        let p = parse_ok(src);
        let s = unroll_and_ssa(&p, &CompileOptions::default()).unwrap();
        (p, s)
    }

    #[test]
    fn cipher_pipeline_parses_with_256_lanes() {
        // Two annotated blocks; 16 words per element over a 4096-word buffer
        // gives 256 lanes per batch.
        let p = parse_ok(CIPHER_SRC);
        let blocks = p.leaf_blocks();
        assert_eq!(blocks.len(), 2);
        for b in &blocks {
            assert_eq!(b.annot.in_size, Some(16));
            assert_eq!(b.annot.in_batch_size, Some(256));
        }
        let io = resolve_block_io(&p, blocks[0]).unwrap();
        assert_eq!(io.batch_size, 256);
        // the free variable `i` in the input alloc rule resolves to base 0
        assert_eq!(io.free_bindings, vec![("i".to_string(), 0)]);
        assert_eq!(io.in_ranges[0], (0, 16));
        assert_eq!(io.in_ranges[255], (4080, 4096));
    }

    #[test]
    fn empty_kernel_body_with_annotations() {
        let src = "
arr a[4]: u2;
arr b[4]: u2;
%IN_SIZE 1
%IN_BATCH_SIZE 4
%BATCH_MEM_IN a
%IN_ALLOC_RULE (x) = [x : x + 1]
%OUT_SIZE 1
%OUT_BATCH_SIZE 4
%BATCH_MEM_OUT b
%OUT_ALLOC_RULE (x) = [x : x + 1]
// ===ACC1 START===
// ===ACC1 END===
";
        let p = parse_ok(src);
        assert_eq!(p.leaf_blocks().len(), 1);
        assert_eq!(p.leaf_blocks()[0].stmts().count(), 0);
    }

    #[test]
    fn overlapping_alloc_rule_is_an_annotation_error() {
        let src = "
arr a[4]: u2;
arr b[8]: u2;
%IN_SIZE 2
%IN_BATCH_SIZE 2
%BATCH_MEM_IN a
%IN_ALLOC_RULE (x) = [x : x + 2]
%OUT_SIZE 2
%OUT_BATCH_SIZE 2
%BATCH_MEM_OUT b
%OUT_ALLOC_RULE (x) = [x*2 : x*2 + 2]
// ===ACC1 START===
// ===ACC1 END===
";
        let err = parse(src, "t").unwrap_err();
        assert!(matches!(err, FrontendError::Annotation { .. }), "got {err:?}");
        assert!(err.to_string().contains("overlapping"));
    }

    #[test]
    fn missing_directive_fails_at_lowering_not_parsing() {
        let src = "
arr a[4]: u2;
%IN_SIZE 1
%IN_BATCH_SIZE 4
%BATCH_MEM_IN a
// ===ACC1 START===
// ===ACC1 END===
";
        let p = parse_ok(src);
        let s = unroll_and_ssa(&p, &CompileOptions::default()).unwrap();
        let err = lower(&p, &s, "ACC1").unwrap_err();
        assert!(err.to_string().contains("missing directives"));
        assert!(err.to_string().contains("OUT_ALLOC_RULE"));
    }

    #[test]
    fn unroll_two_iteration_accumulation_gives_two_adds() {
        let src = "
var x: u8;
arr a[2]: u8;
for j in 0..2 { x = x + a[j]; }
";
        let (_, s) = ssa_of(src);
        let adds: Vec<&Instr> = s
            .instrs
            .iter()
            .filter(|i| matches!(i, Instr::Bin { op: BinOp::Add, .. }))
            .collect();
        assert_eq!(adds.len(), 2, "dump:\n{}", s.dump());
        // final version is copied back to the scalar cell
        assert!(matches!(s.instrs.last(), Some(Instr::Copy { .. })));
    }

    #[test]
    fn nested_loops_unroll_in_row_major_order() {
        let src = "
arr a[6]: u4;
for i in 0..2 { for j in 0..3 { a[i*3 + j] = i*3 + j; } }
";
        let (_, s) = ssa_of(src);
        // six body instances, row-major: writes to a[0],a[1],...,a[5]
        let dsts: Vec<u32> = s
            .instrs
            .iter()
            .filter_map(|i| match i {
                Instr::Copy { dst, .. } => Some(dst.0),
                _ => None,
            })
            .collect();
        assert_eq!(dsts.len(), 6);
        assert_eq!(dsts, (0..6).collect::<Vec<u32>>());
    }

    #[test]
    fn while_loop_rejected_outside_rb_mode() {
        let src = "var x: u4;\nwhile (x != 0) { x = x - 1; }\n";
        let p = parse_ok(src);
        let err = unroll_and_ssa(&p, &CompileOptions::default()).unwrap_err();
        assert!(matches!(err, FrontendError::WhileOutsideRb { line: 2 }));
        let opts = CompileOptions { mode: CompileMode::Responsiveness, ..Default::default() };
        let s = unroll_and_ssa(&p, &opts).unwrap();
        assert_eq!(s.while_regions.len(), 1);
    }

    #[test]
    fn unroll_cap_is_enforced() {
        let src = "var x: u8;\nfor j in 0..100 { x = x + 1; }\n";
        let p = parse_ok(src);
        let opts = CompileOptions { instr_cap: 10, ..Default::default() };
        assert!(matches!(
            unroll_and_ssa(&p, &opts),
            Err(FrontendError::UnrollCap { cap: 10 })
        ));
    }

    #[test]
    fn ssa_dump_is_stable() {
        let src = "var x: u8;\narr a[2]: u8;\nfor j in 0..2 { x = x + a[j]; }\n";
        let (_, s) = ssa_of(src);
        let d = s.dump();
        assert_eq!(
            d,
            "@0    t0 = add x, a[0]\n@1    t1 = add t0, a[1]\n@2    x = copy t1\n"
        );
    }

    /// Seeded straight-line program generator for the differential oracle.
    fn random_program(seed: u64) -> String {
        // xorshift; deterministic across runs
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).max(1);
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let mut src = String::from("var x: u4;\nvar y: u6;\narr a[4]: u4;\narr b[3]: u8;\n");
        let ops = ["+", "-", "*", "^", "&", "|", "<<", ">>", "==", "!=", "<", ">="];
        let atoms = ["x", "y", "a[0]", "a[1]", "a[2]", "a[3]", "b[0]", "b[1]", "b[2]", "3", "7", "12"];
        for _ in 0..12 {
            let lhs = match next() % 4 {
                0 => "x".to_string(),
                1 => "y".to_string(),
                2 => format!("a[{}]", next() % 5), // occasionally out of bounds
                _ => format!("b[{}]", next() % 3),
            };
            let a = atoms[(next() % atoms.len() as u64) as usize];
            let b = atoms[(next() % atoms.len() as u64) as usize];
            let c = atoms[(next() % atoms.len() as u64) as usize];
            let op1 = ops[(next() % ops.len() as u64) as usize];
            let op2 = ops[(next() % ops.len() as u64) as usize];
            let rhs = match next() % 3 {
                0 => format!("{a} {op1} {b}"),
                1 => format!("({a} {op1} {b}) {op2} {c}"),
                _ => format!("{a} {op1} ~{b} ? {c} : {a}"),
            };
            src.push_str(&format!("{lhs} = {rhs};\n"));
        }
        src
    }

    #[test]
    fn ast_and_ssa_interpretation_agree_on_random_programs() {
        for seed in 0..100u64 {
            let src = random_program(seed);
            let p = parse(&src, "rand").unwrap_or_else(|e| panic!("{src}\n{e}"));
            let s = unroll_and_ssa(&p, &CompileOptions::default()).unwrap();

            let mut env = AstEnv::zeroed(&p);
            // vary the initial state a little per seed
            env.scalars.insert("x".into(), (seed % 16) & 0xf);
            env.arrays.get_mut("a").unwrap()[1] = (seed / 3 % 16) & 0xf;
            interpret_ast(&p, &mut env, 1 << 16).unwrap();

            let mut mem = vec![0u64; s.cells.len()];
            mem[0] = (seed % 16) & 0xf; // x
            // cells: x, y, a[0..4], b[0..3]
            mem[3] = (seed / 3 % 16) & 0xf; // a[1]
            interpret_ssa(&s, &mut mem, 1 << 16).unwrap();

            assert_eq!(env.scalars["x"], mem[0], "x diverged (seed {seed})\n{src}\n{}", s.dump());
            assert_eq!(env.scalars["y"], mem[1], "y diverged (seed {seed})\n{src}");
            for i in 0..4 {
                assert_eq!(env.arrays["a"][i], mem[2 + i], "a[{i}] diverged (seed {seed})\n{src}");
            }
            for i in 0..3 {
                assert_eq!(env.arrays["b"][i], mem[6 + i], "b[{i}] diverged (seed {seed})\n{src}");
            }
        }
    }

    const XOR_BLOCK: &str = "
noninterfering;
var key: u2;
arr data[4]: u2;
arr buf[4]: u2;
%IN_SIZE 1
%IN_BATCH_SIZE 4
%BATCH_MEM_IN data
%IN_ALLOC_RULE (x) = [x : x + 1]
%OUT_SIZE 1
%OUT_BATCH_SIZE 4
%BATCH_MEM_OUT buf
%OUT_ALLOC_RULE (x) = [x : x + 1]
%REL key
// ===ACC1 START===
for j in 0..4 { buf[j] = data[j] ^ key; }
// ===ACC1 END===
";

    #[test]
    fn lowered_xor_block_has_relevant_key_and_redirected_io() {
        let (p, s) = ssa_of(XOR_BLOCK);
        let m = lower(&p, &s, "ACC1").unwrap();
        assert_eq!(m.batch_size, 4);
        assert_eq!(m.in_size, 1);
        assert_eq!(m.rel_cells.len(), 1);
        assert_eq!(m.cells.name(m.rel_cells[0]), "key");
        // run: out = data ^ key, with key free in the reset states
        let mut init = m.initial_state();
        init.memory[m.rel_cells[0].idx()] = 3;
        let t = m.run_batch(&init, &InputBatch::words(&[0, 1, 2, 3])).unwrap();
        let out: Vec<u64> = m.output_of(&t, 0).into_iter().map(|l| l[0]).collect();
        assert_eq!(out, vec![3, 2, 1, 0]);
        assert!(t.diags.is_clean());
        // the backing buffers stay untouched: regions are severed
        let final_mem = t.final_state(0).memory;
        let buf_base = 1 + 4; // key, data[0..4]
        assert_eq!(&final_mem[buf_base..buf_base + 4], &[0, 0, 0, 0]);
    }

    #[test]
    fn block_without_rel_vars_has_empty_relevant_region() {
        let src = XOR_BLOCK.replace("%REL key", "").replace("data[j] ^ key", "data[j]");
        let (p, s) = ssa_of(&src);
        let m = lower(&p, &s, "ACC1").unwrap();
        assert!(m.rel_cells.is_empty());
        assert!(m.initial.free.is_empty());
    }

    #[test]
    fn rel_var_aliasing_input_region_is_rejected() {
        let src = XOR_BLOCK.replace("%REL key", "%REL data[0]");
        let (p, s) = ssa_of(&src);
        let err = lower(&p, &s, "ACC1").unwrap_err();
        assert!(matches!(err, FrontendError::Region { .. }), "got {err:?}");
    }

    #[test]
    fn lowered_model_matches_direct_ast_interpretation() {
        let (p, s) = ssa_of(XOR_BLOCK);
        let m = lower(&p, &s, "ACC1").unwrap();
        for case in 0..100u64 {
            let key = case % 4;
            let data: Vec<u64> = (0..4).map(|j| (case / 4 + j * 7) % 4).collect();
            // direct AST interpretation over the named buffers
            let mut env = AstEnv::zeroed(&p);
            env.scalars.insert("key".into(), key);
            env.arrays.insert("data".into(), data.clone());
            interpret_ast(&p, &mut env, 1 << 16).unwrap();
            let direct: Vec<u64> = env.arrays["buf"].clone();
            // lowered model on the same batch
            let mut init = m.initial_state();
            init.memory[m.rel_cells[0].idx()] = key;
            let t = m.run_batch(&init, &InputBatch::words(&data)).unwrap();
            let lowered: Vec<u64> = m.output_of(&t, 0).into_iter().map(|l| l[0]).collect();
            assert_eq!(lowered, direct, "case {case}");
        }
    }

    #[test]
    fn cipher_pipeline_lowers_and_runs_one_256_lane_batch() {
        let (p, s) = ssa_of(CIPHER_SRC);
        let m = lower(&p, &s, "ACC1").unwrap();
        assert_eq!(m.batch_size, 256);
        assert_eq!(m.in_size, 16);
        assert_eq!(m.out_size, 16);
        let lanes: Vec<crate::model::Lane> = (0..256)
            .map(|x| crate::model::Lane::new(0, (0..16).map(|k| (x + k) % 256).collect()))
            .collect();
        let mut init = m.initial_state();
        for &c in &m.rel_cells {
            init.memory[c.idx()] = 0x5a & crate::ssa::mask(m.cells.width(c));
        }
        let batch = InputBatch::new(lanes);
        let t = m.run_batch(&init, &batch).unwrap();
        assert_eq!(t.batch_count(), 1);
        let out = m.output_of(&t, 0);
        assert_eq!(out.len(), 256);
        // key[0] = 0x5a, so stage 1 output is data ^ 0x5a
        assert_eq!(out[3][2], (3 + 2) ^ 0x5a);
    }

    #[test]
    fn duplicate_block_names_rejected() {
        let src = "
arr a[2]: u2;
arr b[2]: u2;
%IN_SIZE 1
%IN_BATCH_SIZE 2
%BATCH_MEM_IN a
%IN_ALLOC_RULE (x) = [x : x + 1]
%OUT_SIZE 1
%OUT_BATCH_SIZE 2
%BATCH_MEM_OUT b
%OUT_ALLOC_RULE (x) = [x : x + 1]
// ===ACC1 START===
// ===ACC1 END===
%IN_SIZE 1
%IN_BATCH_SIZE 2
%BATCH_MEM_IN a
%IN_ALLOC_RULE (x) = [x : x + 1]
%OUT_SIZE 1
%OUT_BATCH_SIZE 2
%BATCH_MEM_OUT b
%OUT_ALLOC_RULE (x) = [x : x + 1]
// ===ACC1 START===
// ===ACC1 END===
";
        assert!(parse(src, "t").is_err());
    }
}
