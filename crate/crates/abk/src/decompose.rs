//! Decomposition: carve sub-accelerators out of annotated blocks, check that
//! adjacent ones are functionally composable, and build their composition.
//!
//! All sub-models of one plan share a single flat cell table, and a
//! consumer's input-region cells are its producer's output-region cells.
//! The producer-to-consumer memory mapping is therefore realized as an index
//! permutation that happens to be the identity, with the region maps doing
//! the relabeling: the consumer's input projection reads exactly the cells
//! the producer's output projection wrote, the relevant region is common,
//! and the producer's input cells become consumer non-relevant state.

use crate::frontend::annot::BlockIo;
use crate::frontend::ast::AbkProgram;
use crate::frontend::compile::{block_reads_actions, unroll_and_ssa, CompileOptions};
use crate::frontend::interp::{interpret_ast, AstEnv};
use crate::frontend::lower::{finish_model, lower_block, LowerCtx, LoweredBlock};
use crate::frontend::{resolve_block_io, FrontendError};
use crate::model::{AcceleratorModel, InitialMemories, InputBatch, LaneCells, Region};
use crate::ssa::{CellId, CellName, Instr, SsaProgram};
use std::collections::BTreeSet;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error("program has no annotated blocks")]
    NoBlocks,
    #[error("line {line}: statements outside annotated blocks cannot be decomposed")]
    StrayStatements { line: u32 },
    #[error("block {name} mixes its own statements with nested blocks")]
    MixedBlock { name: String },
    #[error("wiring {consumer}: {detail}")]
    Wiring { consumer: String, detail: String },
    #[error("composability condition ({condition}) violated for {pair}: {detail}")]
    Composability { condition: u8, pair: String, detail: String },
}

/// Producer-to-consumer lane correspondence of one stage boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Wiring {
    pub buffer: String,
    /// `lane_map[consumer_lane] = producer_lane` over the fused stage lanes.
    pub lane_map: Vec<usize>,
}

/// The α memory mapping between two adjacent sub-models, as an index
/// permutation over the shared cell vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlphaMap {
    /// `perm[i]` is the producer cell whose value consumer cell `i` takes.
    pub perm: Vec<CellId>,
}

impl AlphaMap {
    pub fn identity(n: usize) -> Self {
        AlphaMap { perm: (0..n as u32).map(CellId).collect() }
    }

    /// Map a producer memory state to the consumer memory state.
    pub fn apply(&self, producer: &[u64]) -> Vec<u64> {
        self.perm.iter().map(|c| producer[c.idx()]).collect()
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.perm.len()];
        for c in &self.perm {
            if c.idx() >= seen.len() || seen[c.idx()] {
                return false;
            }
            seen[c.idx()] = true;
        }
        true
    }
}

#[derive(Debug, Clone)]
pub struct DecompositionPlan {
    pub program: AbkProgram,
    pub ssa: Arc<SsaProgram>,
    pub cells: Arc<crate::ssa::CellTable>,
    /// One model per leaf block, in source order.
    pub sub_models: Vec<Arc<AcceleratorModel>>,
    pub ios: Vec<BlockIo>,
    /// Stages in dataflow order; a stage with several members is a parallel
    /// group over disjoint lane ranges.
    pub stages: Vec<Vec<usize>>,
    /// Stage-boundary wiring, one per adjacent pair of stages.
    pub wiring: Vec<Wiring>,
    /// α-mappings, parallel to `wiring`.
    pub alpha_maps: Vec<AlphaMap>,
}

impl DecompositionPlan {
    pub fn total(&self) -> usize {
        self.sub_models.len()
    }

    /// Count of sub-models processing more than one lane per batch.
    pub fn parallel(&self) -> usize {
        self.sub_models.iter().filter(|m| m.batch_size > 1).count()
    }

    /// Structured text report: one row per sub-accelerator plus the
    /// total/parallel counts.
    pub fn report(&self) -> String {
        let mut s = String::new();
        s.push_str("sub-accelerators:\n");
        s.push_str("  name        b     in            out           rel\n");
        for (m, io) in self.sub_models.iter().zip(&self.ios) {
            s.push_str(&format!(
                "  {:<10}  {:<4}  {:<12}  {:<12}  {}\n",
                m.name,
                m.batch_size,
                format!("{}[{}w]", io.in_array, io.in_size),
                format!("{}[{}w]", io.out_array, io.out_size),
                if m.rel_cells.is_empty() { "-".to_string() } else { format!("{} cells", m.rel_cells.len()) },
            ));
        }
        s.push_str(&format!(
            "stages: {}\n",
            self.stages
                .iter()
                .map(|st| {
                    let names: Vec<&str> =
                        st.iter().map(|&i| self.sub_models[i].name.as_str()).collect();
                    if names.len() == 1 {
                        names[0].to_string()
                    } else {
                        format!("[{}]", names.join(" || "))
                    }
                })
                .collect::<Vec<_>>()
                .join(" -> ")
        ));
        s.push_str(&format!("T={} P={}\n", self.total(), self.parallel()));
        s
    }
}

fn ranges_disjoint(a: &[(u64, u64)], b: &[(u64, u64)]) -> bool {
    a.iter().all(|&(lo1, hi1)| b.iter().all(|&(lo2, hi2)| hi1 <= lo2 || hi2 <= lo1))
}

/// Build the decomposition plan of an annotated program: one sub-model per
/// leaf block, parallel groups over disjoint lane ranges, chain wiring
/// through shared buffers, and the composability checks for every adjacent
/// pair.
pub fn plan(prog: &AbkProgram) -> Result<DecompositionPlan, PlanError> {
    plan_with_options(prog, &CompileOptions::default())
}

pub fn plan_with_options(
    prog: &AbkProgram,
    opts: &CompileOptions,
) -> Result<DecompositionPlan, PlanError> {
    if let Some(s) = prog.top_level_stmts().next() {
        let line = match s {
            crate::frontend::Stmt::Assign { span, .. }
            | crate::frontend::Stmt::For { span, .. }
            | crate::frontend::Stmt::While { span, .. } => span.line,
        };
        return Err(PlanError::StrayStatements { line });
    }
    for b in prog.all_blocks() {
        if !b.is_leaf() && b.stmts().next().is_some() {
            return Err(PlanError::MixedBlock { name: b.name.clone() });
        }
    }
    let all = prog.all_blocks();
    let leaf_indices: Vec<usize> = all
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_leaf())
        .map(|(i, _)| i)
        .collect();
    if leaf_indices.is_empty() {
        return Err(PlanError::NoBlocks);
    }
    let ssa = Arc::new(unroll_and_ssa(prog, opts)?);
    let ios: Vec<BlockIo> = leaf_indices
        .iter()
        .map(|&i| resolve_block_io(prog, all[i]))
        .collect::<Result<_, _>>()?;
    let names: Vec<String> = leaf_indices.iter().map(|&i| all[i].name.clone()).collect();

    // Group consecutive leaves into parallel stages: same buffers, same
    // element sizes, disjoint lane ranges on both sides.
    let mut stages: Vec<Vec<usize>> = Vec::new();
    for li in 0..ios.len() {
        let fits = stages.last().map_or(false, |st: &Vec<usize>| {
            st.iter().all(|&m| {
                let a = &ios[m];
                let b = &ios[li];
                a.in_array == b.in_array
                    && a.out_array == b.out_array
                    && a.in_size == b.in_size
                    && a.out_size == b.out_size
                    && ranges_disjoint(&a.in_ranges, &b.in_ranges)
                    && ranges_disjoint(&a.out_ranges, &b.out_ranges)
            })
        });
        if fits {
            stages.last_mut().unwrap().push(li);
        } else {
            stages.push(vec![li]);
        }
    }

    // Relevant sets must agree everywhere for the chain to compose.
    let rel_key = |io: &BlockIo| -> Vec<(String, Option<u64>)> {
        let mut v: Vec<(String, Option<u64>)> =
            io.rel.iter().map(|r| (r.name.clone(), r.index)).collect();
        v.sort();
        v.dedup();
        v
    };
    for li in 1..ios.len() {
        if rel_key(&ios[li]) != rel_key(&ios[0]) {
            return Err(PlanError::Composability {
                condition: 4,
                pair: format!("{} / {}", names[0], names[li]),
                detail: "relevant-state sets differ".into(),
            });
        }
    }

    // Wiring between adjacent stages: the consumer's input lanes must match
    // the producer's output lanes range-for-range on the shared buffer.
    let stage_out_lanes = |st: &[usize]| -> Vec<(usize, usize, (u64, u64))> {
        let mut v = Vec::new();
        for &m in st {
            for (lane, &r) in ios[m].out_ranges.iter().enumerate() {
                v.push((m, lane, r));
            }
        }
        v
    };
    let stage_in_lanes = |st: &[usize]| -> Vec<(usize, usize, (u64, u64))> {
        let mut v = Vec::new();
        for &m in st {
            for (lane, &r) in ios[m].in_ranges.iter().enumerate() {
                v.push((m, lane, r));
            }
        }
        v
    };
    let mut wiring: Vec<Wiring> = Vec::new();
    for w in stages.windows(2) {
        let (prev, next) = (&w[0], &w[1]);
        let pio = &ios[prev[0]];
        let nio = &ios[next[0]];
        let consumer_name = names[next[0]].clone();
        if nio.in_array != pio.out_array {
            return Err(PlanError::Wiring {
                consumer: consumer_name,
                detail: format!(
                    "reads {} but the previous stage writes {}",
                    nio.in_array, pio.out_array
                ),
            });
        }
        if nio.in_size != pio.out_size {
            return Err(PlanError::Wiring {
                consumer: consumer_name,
                detail: format!(
                    "element size {} does not match producer output size {}",
                    nio.in_size, pio.out_size
                ),
            });
        }
        let outs = stage_out_lanes(prev);
        let ins = stage_in_lanes(next);
        if outs.len() != ins.len() {
            return Err(PlanError::Composability {
                condition: 1,
                pair: format!("{} / {}", names[prev[0]], consumer_name),
                detail: format!("batch sizes {} vs {}", outs.len(), ins.len()),
            });
        }
        let mut lane_map = Vec::with_capacity(ins.len());
        for (ci, &(_, _, r)) in ins.iter().enumerate() {
            let hits: Vec<usize> = outs
                .iter()
                .enumerate()
                .filter(|(_, &(_, _, pr))| pr == r)
                .map(|(i, _)| i)
                .collect();
            match hits.as_slice() {
                [one] => lane_map.push(*one),
                [] => {
                    return Err(PlanError::Wiring {
                        consumer: consumer_name,
                        detail: format!(
                            "input lane {ci} range [{}:{}] is not produced by the previous stage",
                            r.0, r.1
                        ),
                    })
                }
                _ => {
                    return Err(PlanError::Wiring {
                        consumer: consumer_name,
                        detail: format!("input lane {ci} range matches several producer lanes"),
                    })
                }
            }
        }
        // multi-action consumers cannot take their actions from a wire
        for &m in next {
            if block_reads_actions(prog, &names[m]) {
                return Err(PlanError::Composability {
                    condition: 2,
                    pair: format!("{} / {}", names[prev[0]], names[m]),
                    detail: "consumer reads act(), producer outputs carry no actions".into(),
                });
            }
        }
        // output alphabet = input alphabet also needs matching cell widths
        let pw = prog.decl(&pio.out_array).map(|d| d.width).unwrap_or(prog.default_width);
        let nw = prog.decl(&nio.in_array).map(|d| d.width).unwrap_or(prog.default_width);
        if pw != nw {
            return Err(PlanError::Composability {
                condition: 2,
                pair: format!("{} / {}", names[prev[0]], consumer_name),
                detail: format!("output width {pw} vs input width {nw}"),
            });
        }
        wiring.push(Wiring { buffer: nio.in_array.clone(), lane_map });
    }

    // Lower every leaf against one shared context, wiring consumer inputs to
    // producer outputs.
    let mut ctx = LowerCtx::from_ssa(&ssa);
    let mut lowered: Vec<Option<LoweredBlock>> = vec![None; ios.len()];
    for (si, st) in stages.iter().enumerate() {
        if si == 0 {
            for &m in st {
                lowered[m] = Some(lower_block(&mut ctx, prog, &ssa, leaf_indices[m], None)?);
            }
            continue;
        }
        let prev = &stages[si - 1];
        let outs = stage_out_lanes(prev);
        let lane_map = &wiring[si - 1].lane_map;
        let mut cursor = 0usize;
        for &m in st {
            let lanes = ios[m].in_ranges.len();
            let mut over = Vec::with_capacity(lanes);
            for ci in cursor..cursor + lanes {
                let (pm, plane, _) = outs[lane_map[ci]];
                let producer = lowered[pm].as_ref().expect("producer lowered before consumer");
                over.push(LaneCells { action: None, data: producer.out_lanes[plane].clone() });
            }
            cursor += lanes;
            lowered[m] = Some(lower_block(&mut ctx, prog, &ssa, leaf_indices[m], Some(over))?);
        }
    }
    let cells = Arc::new(ctx.cells);
    let lowered: Vec<LoweredBlock> = lowered.into_iter().map(|l| l.unwrap()).collect();
    let sub_models: Vec<Arc<AcceleratorModel>> = lowered
        .iter()
        .map(|lb| Arc::new(finish_model(prog, cells.clone(), ctx.arrays.clone(), lb)))
        .collect();

    // Remaining pairwise conditions on the lowered models.
    for w in stages.windows(2) {
        let p = &sub_models[w[0][0]];
        let c = &sub_models[w[1][0]];
        let pair = format!("{} / {}", p.name, c.name);
        let pb: usize = w[0].iter().map(|&m| sub_models[m].batch_size).sum();
        let cb: usize = w[1].iter().map(|&m| sub_models[m].batch_size).sum();
        if pb != cb {
            return Err(PlanError::Composability {
                condition: 1,
                pair,
                detail: format!("batch sizes {pb} vs {cb}"),
            });
        }
        if p.output_width != c.data_width || p.out_size != c.in_size || c.action_count != 1 {
            return Err(PlanError::Composability {
                condition: 2,
                pair,
                detail: "producer output alphabet differs from consumer input alphabet".into(),
            });
        }
        if p.rel_cells != c.rel_cells {
            return Err(PlanError::Composability {
                condition: 4,
                pair,
                detail: "relevant regions differ".into(),
            });
        }
        // (v): consumer input cells are exactly the producer output cells
        let pout: BTreeSet<CellId> = w[0]
            .iter()
            .flat_map(|&m| sub_models[m].out_lanes.iter().flatten().copied())
            .collect();
        let cin: BTreeSet<CellId> = w[1]
            .iter()
            .flat_map(|&m| sub_models[m].in_lanes.iter().flat_map(|l| l.data.iter().copied()))
            .collect();
        if pout != cin {
            return Err(PlanError::Composability {
                condition: 5,
                pair,
                detail: "consumer non-relevant state does not factor through the producer".into(),
            });
        }
    }

    let alpha_maps = vec![AlphaMap::identity(cells.len()); wiring.len()];
    Ok(DecompositionPlan {
        program: prog.clone(),
        ssa,
        cells,
        sub_models,
        ios,
        stages,
        wiring,
        alpha_maps,
    })
}

/// Apply the α-mapping of stage boundary `pair` to a producer memory state.
pub fn alpha(plan: &DecompositionPlan, pair: usize, producer_memory: &[u64]) -> Vec<u64> {
    plan.alpha_maps[pair].apply(producer_memory)
}

/// Functional composition of the whole plan: run stage 1 to its final
/// control state, relabel memory through α, continue with stage 2, and so
/// on. Inputs come from the first stage, outputs from the last.
pub fn compose(plan: &DecompositionPlan) -> Result<AcceleratorModel, PlanError> {
    let first_stage = &plan.stages[0];
    let last_stage = plan.stages.last().unwrap();
    let ac = plan.sub_models[first_stage[0]].action_count;
    for &m in first_stage {
        if plan.sub_models[m].action_count != ac {
            return Err(PlanError::Composability {
                condition: 2,
                pair: format!(
                    "{} / {}",
                    plan.sub_models[first_stage[0]].name, plan.sub_models[m].name
                ),
                detail: "first-stage members disagree on action sets".into(),
            });
        }
    }
    let mut instrs: Vec<Instr> = Vec::new();
    for st in &plan.stages {
        for &m in st {
            let offset = instrs.len();
            for ins in &plan.sub_models[m].instrs {
                let mut ins = ins.clone();
                match &mut ins {
                    Instr::BranchZero { target, .. } | Instr::Jump { target } => *target += offset,
                    _ => {}
                }
                instrs.push(ins);
            }
        }
    }
    let in_lanes: Vec<LaneCells> = first_stage
        .iter()
        .flat_map(|&m| plan.sub_models[m].in_lanes.iter().cloned())
        .collect();
    let out_lanes: Vec<Vec<CellId>> = last_stage
        .iter()
        .flat_map(|&m| plan.sub_models[m].out_lanes.iter().cloned())
        .collect();
    let first = &plan.sub_models[first_stage[0]];
    let last = &plan.sub_models[last_stage[0]];
    let rel_cells = first.rel_cells.clone();
    let mut regions = vec![Region::NRel; plan.cells.len()];
    for &c in &rel_cells {
        regions[c.idx()] = Region::Rel;
    }
    for l in &in_lanes {
        if let Some(a) = l.action {
            regions[a.idx()] = Region::In;
        }
        for &c in &l.data {
            regions[c.idx()] = Region::In;
        }
    }
    for l in &out_lanes {
        for &c in l {
            regions[c.idx()] = Region::Out;
        }
    }
    let batch_size = in_lanes.len();
    Ok(AcceleratorModel {
        name: format!(
            "compose({})",
            plan.sub_models.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().join(", ")
        ),
        batch_size,
        action_count: ac,
        data_width: first.data_width,
        output_width: last.output_width,
        in_size: first.in_size,
        out_size: last.out_size,
        cells: plan.cells.clone(),
        regions,
        in_lanes,
        out_lanes,
        rel_cells: rel_cells.clone(),
        arrays: first.arrays.clone(),
        instrs,
        initial: InitialMemories { base: vec![0; plan.cells.len()], free: rel_cells },
        non_interfering: plan.program.non_interfering,
        step_budget: crate::model::DEFAULT_STEP_BUDGET,
    })
}

/// Direct whole-program execution through the AST interpreter: write the
/// batch into the first stage's input buffer, interpret every block in
/// source order over the named buffers, and read the last stage's output
/// buffer back. The independent oracle for composition fidelity.
pub fn run_direct(
    plan: &DecompositionPlan,
    initial: &AstEnv,
    batch: &InputBatch,
) -> Result<Vec<Vec<u64>>, crate::frontend::interp::InterpError> {
    let prog = &plan.program;
    let mut env = initial.clone();
    let first_stage = &plan.stages[0];
    let mut lane = 0usize;
    for &m in first_stage {
        let io = &plan.ios[m];
        let arr = env.arrays.get_mut(&io.in_array).expect("input buffer exists");
        let mut acts = Vec::new();
        for &(lo, _hi) in &io.in_ranges {
            for k in 0..io.in_size as usize {
                arr[(lo as usize) + k] = batch.lanes[lane].data[k];
            }
            acts.push(batch.lanes[lane].action);
            lane += 1;
        }
        env.acts.insert(plan.sub_models[m].name.clone(), acts);
    }
    interpret_ast(prog, &mut env, 1 << 24)?;
    let mut out = Vec::new();
    for &m in plan.stages.last().unwrap() {
        let io = &plan.ios[m];
        let arr = &env.arrays[&io.out_array];
        for &(lo, _hi) in &io.out_ranges {
            out.push(arr[lo as usize..lo as usize + io.out_size as usize].to_vec());
        }
    }
    Ok(out)
}

/// Build an AST environment whose declared variables take their values from
/// a model memory vector (region cells and temporaries are ignored).
pub fn ast_env_from_memory(plan: &DecompositionPlan, memory: &[u64]) -> AstEnv {
    let mut env = AstEnv::zeroed(&plan.program);
    for (i, info) in plan.ssa.cells.cells.iter().enumerate().take(plan.ssa.first_temp as usize) {
        match &info.name {
            CellName::Scalar(n) => {
                env.scalars.insert(n.to_string(), memory[i]);
            }
            CellName::Elem(n, k) => {
                if let Some(a) = env.arrays.get_mut(&n.to_string()) {
                    if (*k as usize) < a.len() {
                        a[*k as usize] = memory[i];
                    }
                }
            }
            _ => {}
        }
    }
    env
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse;
    use crate::model::Lane;

    const CIPHER_SRC: &str = include_str!("../kernels/cipher_pipeline.abk");

    /// Two-stage width-2 pipeline: plug in the per-stage expressions.
    fn two_stage(stage1: &str, stage2: &str) -> String {
        format!(
            "
noninterfering;
var key: u2;
arr data[2]: u2;
arr buf[2]: u2;
arr result[2]: u2;
%IN_SIZE 1
%IN_BATCH_SIZE 2
%BATCH_MEM_IN data
%IN_ALLOC_RULE (x) = [x : x + 1]
%OUT_SIZE 1
%OUT_BATCH_SIZE 2
%BATCH_MEM_OUT buf
%OUT_ALLOC_RULE (x) = [x : x + 1]
%REL key
// ===ACC1 START===
for j in 0..2 {{ buf[j] = {stage1}; }}
// ===ACC1 END===
%IN_SIZE 1
%IN_BATCH_SIZE 2
%BATCH_MEM_IN buf
%IN_ALLOC_RULE (x) = [x : x + 1]
%OUT_SIZE 1
%OUT_BATCH_SIZE 2
%BATCH_MEM_OUT result
%OUT_ALLOC_RULE (x) = [x : x + 1]
%REL key
// ===ACC2 START===
for j in 0..2 {{ result[j] = {stage2}; }}
// ===ACC2 END===
"
        )
    }

    #[test]
    fn cipher_pipeline_plans_as_a_two_stage_chain() {
        let p = parse(CIPHER_SRC, "cipher").unwrap();
        let plan = plan(&p).unwrap();
        assert_eq!(plan.total(), 2);
        assert_eq!(plan.parallel(), 2);
        assert_eq!(plan.stages, vec![vec![0], vec![1]]);
        assert_eq!(plan.wiring.len(), 1);
        assert_eq!(plan.wiring[0].buffer, "buf");
        let report = plan.report();
        assert!(report.contains("T=2 P=2"), "{report}");
        assert!(report.contains("ACC1 -> ACC2"), "{report}");
    }

    #[test]
    fn single_block_program_plans_without_wiring() {
        let src = two_stage("data[j] ^ key", "buf[j]");
        // keep only the first block
        let first_block_only = {
            let end = src.find("// ===ACC1 END===").unwrap() + "// ===ACC1 END===".len();
            src[..end].to_string()
        };
        let p = parse(&first_block_only, "single").unwrap();
        let plan = plan(&p).unwrap();
        assert_eq!(plan.total(), 1);
        assert!(plan.wiring.is_empty());
        assert!(plan.alpha_maps.is_empty());
    }

    #[test]
    fn alpha_reads_producer_output_into_consumer_input() {
        let src = two_stage("data[j] ^ key", "buf[j] + 1");
        let p = parse(&src, "t").unwrap();
        let plan = plan(&p).unwrap();
        let producer = &plan.sub_models[0];
        let consumer = &plan.sub_models[1];
        // producer final memory with out=<7, 2>, rel=<3>
        let mut mem = vec![0u64; plan.cells.len()];
        mem[producer.out_lanes[0][0].idx()] = 3;
        mem[producer.out_lanes[1][0].idx()] = 2;
        mem[producer.rel_cells[0].idx()] = 3;
        let mapped = alpha(&plan, 0, &mem);
        let inp = consumer.inp(&mapped);
        assert_eq!(inp.lanes[0].data, vec![3]);
        assert_eq!(inp.lanes[1].data, vec![2]);
        assert_eq!(consumer.rel(&mapped), producer.rel(&mem));
    }

    #[test]
    fn alpha_is_injective_on_random_memories() {
        let src = two_stage("data[j] ^ key", "buf[j] + 1");
        let p = parse(&src, "t").unwrap();
        let plan = plan(&p).unwrap();
        assert!(plan.alpha_maps[0].is_bijection());
        let mut seen = std::collections::BTreeSet::new();
        let mut state = 0x243f6a8885a308d3u64;
        for _ in 0..100 {
            let mem: Vec<u64> = (0..plan.cells.len())
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    state & 3
                })
                .collect();
            assert!(seen.insert(alpha(&plan, 0, &mem)) || seen.contains(&mem));
        }
    }

    #[test]
    fn rel_preserved_across_three_stage_chain() {
        let src = "
noninterfering;
var key: u2;
arr data[2]: u2;
arr b1[2]: u2;
arr b2[2]: u2;
arr b3[2]: u2;
%IN_SIZE 1
%IN_BATCH_SIZE 2
%BATCH_MEM_IN data
%IN_ALLOC_RULE (x) = [x : x + 1]
%OUT_SIZE 1
%OUT_BATCH_SIZE 2
%BATCH_MEM_OUT b1
%OUT_ALLOC_RULE (x) = [x : x + 1]
%REL key
// ===S1 START===
for j in 0..2 { b1[j] = data[j] + key; }
// ===S1 END===
%IN_SIZE 1
%IN_BATCH_SIZE 2
%BATCH_MEM_IN b1
%IN_ALLOC_RULE (x) = [x : x + 1]
%OUT_SIZE 1
%OUT_BATCH_SIZE 2
%BATCH_MEM_OUT b2
%OUT_ALLOC_RULE (x) = [x : x + 1]
%REL key
// ===S2 START===
for j in 0..2 { b2[j] = b1[j] ^ key; }
// ===S2 END===
%IN_SIZE 1
%IN_BATCH_SIZE 2
%BATCH_MEM_IN b2
%IN_ALLOC_RULE (x) = [x : x + 1]
%OUT_SIZE 1
%OUT_BATCH_SIZE 2
%BATCH_MEM_OUT b3
%OUT_ALLOC_RULE (x) = [x : x + 1]
%REL key
// ===S3 START===
for j in 0..2 { b3[j] = b2[j] - key; }
// ===S3 END===
";
        let p = parse(src, "t").unwrap();
        let plan = plan(&p).unwrap();
        assert_eq!(plan.alpha_maps.len(), 2);
        let mut mem = vec![0u64; plan.cells.len()];
        mem[plan.sub_models[0].rel_cells[0].idx()] = 2;
        let m1 = alpha(&plan, 0, &mem);
        let m2 = alpha(&plan, 1, &m1);
        assert_eq!(plan.sub_models[2].rel(&m2), vec![2]);
    }

    /// Exhaustively compare compose(plan(p)) against direct interpretation.
    fn assert_compose_equals_direct_exhaustive(src: &str) {
        let p = parse(src, "t").unwrap();
        let plan = plan(&p).unwrap();
        let composed = compose(&plan).unwrap();
        let caps = 1 << 20;
        for init_mem in
            crate::model::enumerate_memories(&composed.initial, &composed.cells, caps).unwrap()
        {
            for batch in composed.enumerate_batches(caps).unwrap() {
                let init =
                    crate::model::MachineState { control: 0, memory: init_mem.clone() };
                let t = composed.run_batch(&init, &batch).unwrap();
                let got = composed.output_of(&t, 0);
                let env = ast_env_from_memory(&plan, &init_mem);
                let want = run_direct(&plan, &env, &batch).unwrap();
                assert_eq!(got, want, "diverged on batch {batch:?}");
            }
        }
    }

    #[test]
    fn composed_chain_equals_direct_execution_exhaustively() {
        assert_compose_equals_direct_exhaustive(&two_stage("data[j] ^ key", "(buf[j] + key) ^ 1"));
    }

    #[test]
    fn composing_identity_stage_changes_nothing() {
        let src = two_stage("data[j] ^ key", "buf[j]");
        let p = parse(&src, "t").unwrap();
        let plan = plan(&p).unwrap();
        let composed = compose(&plan).unwrap();
        let first = &plan.sub_models[0];
        for key in 0..4u64 {
            for d0 in 0..4u64 {
                for d1 in 0..4u64 {
                    let batch = InputBatch::words(&[d0, d1]);
                    let mut init = composed.initial_state();
                    init.memory[composed.rel_cells[0].idx()] = key;
                    let tc = composed.run_batch(&init, &batch).unwrap();
                    let mut init1 = first.initial_state();
                    init1.memory[first.rel_cells[0].idx()] = key;
                    let t1 = first.run_batch(&init1, &batch).unwrap();
                    assert_eq!(composed.output_of(&tc, 0), first.output_of(&t1, 0));
                }
            }
        }
    }

    #[test]
    fn xor_xor_with_same_key_is_the_identity() {
        let src = two_stage("data[j] ^ key", "buf[j] ^ key");
        let p = parse(&src, "t").unwrap();
        let plan = plan(&p).unwrap();
        let composed = compose(&plan).unwrap();
        for key in 0..4u64 {
            for d0 in 0..4u64 {
                for d1 in 0..4u64 {
                    let batch = InputBatch::words(&[d0, d1]);
                    let mut init = composed.initial_state();
                    init.memory[composed.rel_cells[0].idx()] = key;
                    let t = composed.run_batch(&init, &batch).unwrap();
                    let out: Vec<u64> =
                        composed.output_of(&t, 0).into_iter().map(|l| l[0]).collect();
                    assert_eq!(out, vec![d0, d1], "key {key}");
                }
            }
        }
    }

    const PARALLEL_SRC: &str = "
arr src[4]: u2;
arr dst[4]: u2;
%IN_SIZE 1
%IN_BATCH_SIZE 2
%BATCH_MEM_IN src
%IN_ALLOC_RULE (x) = [x : x + 1]
%OUT_SIZE 1
%OUT_BATCH_SIZE 2
%BATCH_MEM_OUT dst
%OUT_ALLOC_RULE (x) = [x : x + 1]
// ===LO START===
for j in 0..2 { dst[j] = src[j] + 1; }
// ===LO END===
%IN_SIZE 1
%IN_BATCH_SIZE 2
%BATCH_MEM_IN src
%IN_ALLOC_RULE (x) = [x + 2 : x + 3]
%OUT_SIZE 1
%OUT_BATCH_SIZE 2
%BATCH_MEM_OUT dst
%OUT_ALLOC_RULE (x) = [x + 2 : x + 3]
// ===HI START===
for j in 2..4 { dst[j] = src[j] + 1; }
// ===HI END===
";

    #[test]
    fn disjoint_halves_form_a_parallel_group_equivalent_to_the_fused_block() {
        let p = parse(PARALLEL_SRC, "par").unwrap();
        let pl = plan(&p).unwrap();
        assert_eq!(pl.stages, vec![vec![0, 1]]);
        let group = compose(&pl).unwrap();
        assert_eq!(group.batch_size, 4);
        // fused single-block version of the same kernel
        let fused_src = "
arr src[4]: u2;
arr dst[4]: u2;
%IN_SIZE 1
%IN_BATCH_SIZE 4
%BATCH_MEM_IN src
%IN_ALLOC_RULE (x) = [x : x + 1]
%OUT_SIZE 1
%OUT_BATCH_SIZE 4
%BATCH_MEM_OUT dst
%OUT_ALLOC_RULE (x) = [x : x + 1]
// ===ALL START===
for j in 0..4 { dst[j] = src[j] + 1; }
// ===ALL END===
";
        let pf = parse(fused_src, "fused").unwrap();
        let plf = plan(&pf).unwrap();
        let fused = compose(&plf).unwrap();
        for batch in group.enumerate_batches(1 << 20).unwrap() {
            let tg = group.run_batch(&group.initial_state(), &batch).unwrap();
            let tf = fused.run_batch(&fused.initial_state(), &batch).unwrap();
            assert_eq!(group.output_of(&tg, 0), fused.output_of(&tf, 0));
        }
    }

    #[test]
    fn wiring_mismatch_is_reported() {
        // consumer reads a buffer nobody wrote
        let src = two_stage("data[j] ^ key", "buf[j]").replace("%BATCH_MEM_IN buf", "%BATCH_MEM_IN data");
        let p = parse(&src, "t").unwrap();
        let err = plan(&p).unwrap_err();
        assert!(matches!(err, PlanError::Wiring { .. }), "{err:?}");
    }

    #[test]
    fn differing_rel_sets_violate_condition_four() {
        let src = two_stage("data[j] ^ key", "buf[j]").replacen("%REL key\n// ===ACC2", "// ===ACC2", 1);
        let p = parse(&src, "t").unwrap();
        let err = plan(&p).unwrap_err();
        match err {
            PlanError::Composability { condition, .. } => assert_eq!(condition, 4),
            other => panic!("expected composability error, got {other:?}"),
        }
    }

    #[test]
    fn composability_errors_are_reproducible() {
        // re-checking the cited condition on the two ios fails independently
        let src = two_stage("data[j] ^ key", "buf[j]").replacen("%REL key\n// ===ACC2", "// ===ACC2", 1);
        let p = parse(&src, "t").unwrap();
        match plan(&p).unwrap_err() {
            PlanError::Composability { condition: 4, .. } => {
                let blocks = p.leaf_blocks();
                let io1 = crate::frontend::resolve_block_io(&p, blocks[0]).unwrap();
                let io2 = crate::frontend::resolve_block_io(&p, blocks[1]).unwrap();
                let k1: Vec<_> = io1.rel.iter().map(|r| (&r.name, r.index)).collect();
                let k2: Vec<_> = io2.rel.iter().map(|r| (&r.name, r.index)).collect();
                assert_ne!(k1, k2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stray_statements_are_rejected() {
        let src = format!("var z: u2;\nz = 1;\n{}", two_stage("data[j]", "buf[j]"));
        let src = src.replace("%REL key\n", "");
        let src = src.replace("var key: u2;\n", "");
        let src = src.replace(" ^ key", "");
        let p = parse(&src, "t").unwrap();
        assert!(matches!(plan(&p).unwrap_err(), PlanError::StrayStatements { .. }));
    }

    #[test]
    fn compose_plan_of_cipher_matches_direct_execution_on_random_inputs() {
        let p = parse(CIPHER_SRC, "cipher").unwrap();
        let pl = plan(&p).unwrap();
        let composed = compose(&pl).unwrap();
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut rnd = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for case in 0..3 {
            let mut init = composed.initial_state();
            for &c in &composed.rel_cells {
                init.memory[c.idx()] = rnd() & 0xff;
            }
            let lanes: Vec<Lane> =
                (0..256).map(|_| Lane::new(0, (0..16).map(|_| rnd() & 0xff).collect())).collect();
            let batch = InputBatch::new(lanes);
            let t = composed.run_batch(&init, &batch).unwrap();
            let got = composed.output_of(&t, 0);
            let env = ast_env_from_memory(&pl, &init.memory);
            let want = run_direct(&pl, &env, &batch).unwrap();
            assert_eq!(got, want, "case {case}");
        }
    }
}
