//! Lowering: turn an annotated block of the SSA program into an
//! [`AcceleratorModel`].
//!
//! The batch buffers named by the annotations are severed from the block:
//! reads of addresses covered by the input allocation rule are redirected to
//! dedicated input-region cells and writes covered by the output rule to
//! dedicated output-region cells, so a block may alias its input and output
//! buffers in source form while the model keeps the regions separate. When
//! several blocks of one program are lowered together (see `decompose`), they
//! share a single cell table and a consumer's input cells are literally its
//! producer's output cells, which makes the producer-to-consumer memory
//! mapping an index relabeling.

use super::annot::{resolve_block_io, BlockIo};
use super::ast::{AbkProgram, Block, DeclKind};
use super::compile::{action_width, block_reads_actions};
use super::FrontendError;
use crate::model::{
    AcceleratorModel, InitialMemories, LaneCells, Region, DEFAULT_STEP_BUDGET,
};
use crate::ssa::{ArrayId, ArrayInfo, CellId, CellName, CellTable, Instr, Operand, SsaProgram};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

/// Mutable lowering context shared by all blocks of one program.
#[derive(Debug, Clone)]
pub struct LowerCtx {
    pub cells: CellTable,
    pub arrays: Vec<ArrayInfo>,
}

impl LowerCtx {
    pub fn from_ssa(ssa: &SsaProgram) -> Self {
        LowerCtx { cells: ssa.cells.clone(), arrays: ssa.arrays.clone() }
    }
}

/// Region cells and rewritten instructions of one lowered block; turned into
/// a model once the shared cell table is final.
#[derive(Debug, Clone)]
pub struct LoweredBlock {
    pub name: String,
    pub io: BlockIo,
    pub in_lanes: Vec<LaneCells>,
    pub out_lanes: Vec<Vec<CellId>>,
    pub rel_cells: Vec<CellId>,
    pub instrs: Vec<Instr>,
    pub action_count: u64,
    pub data_width: u32,
    pub output_width: u32,
}

fn array_id(ctx: &LowerCtx, name: &str) -> Option<ArrayId> {
    ctx.arrays
        .iter()
        .position(|a| &*a.name == name)
        .map(|i| ArrayId(i as u32))
}

fn decl_width(prog: &AbkProgram, name: &str) -> u32 {
    prog.decl(name).map(|d| d.width).unwrap_or(prog.default_width)
}

/// Allocate region cells for one block and rewrite its instructions against
/// them. `in_override` wires the block's input lanes to existing cells
/// (a producer's output region) instead of allocating fresh ones.
pub fn lower_block(
    ctx: &mut LowerCtx,
    prog: &AbkProgram,
    ssa: &SsaProgram,
    block_index: usize,
    in_override: Option<Vec<LaneCells>>,
) -> Result<LoweredBlock, FrontendError> {
    let blocks = prog.all_blocks();
    let block: &Block = blocks
        .get(block_index)
        .ok_or_else(|| FrontendError::Annotation {
            line: 0,
            msg: format!("no block with index {block_index}"),
        })?;
    let io = resolve_block_io(prog, block)?;
    let b = io.batch_size as usize;
    let multi_action = block_reads_actions(prog, &block.name);
    let action_count = if multi_action { prog.action_count } else { 1 };
    if in_override.is_some() && multi_action {
        return Err(FrontendError::Annotation {
            line: block.annot.span.line,
            msg: format!("block {} reads act() but is wired to a producer", block.name),
        });
    }
    let data_width = decl_width(prog, &io.in_array);
    let output_width = decl_width(prog, &io.out_array);

    // Relevant cells, and the guard that they do not alias the batch regions.
    let in_aid = array_id(ctx, &io.in_array).expect("declared array");
    let out_aid = array_id(ctx, &io.out_array).expect("declared array");
    let in_base = ctx.arrays[in_aid.0 as usize].base;
    let out_base = ctx.arrays[out_aid.0 as usize].base;
    let covered = |ranges: &[(u64, u64)], base: CellId, c: CellId| -> bool {
        let off = (c.0 as u64).checked_sub(base.0 as u64);
        match off {
            Some(a) => ranges.iter().any(|&(lo, hi)| a >= lo && a < hi),
            None => false,
        }
    };
    let mut rel_cells: Vec<CellId> = Vec::new();
    for rv in &io.rel {
        let d = prog.decl(&rv.name).expect("validated by resolve_block_io");
        let cells: Vec<CellId> = match (d.kind, rv.index) {
            (DeclKind::Scalar, _) => {
                let aid = ssa
                    .cells
                    .cells
                    .iter()
                    .position(|c| matches!(&c.name, CellName::Scalar(n) if **n == rv.name));
                vec![CellId(aid.expect("scalar cell exists") as u32)]
            }
            (DeclKind::Array { .. }, Some(i)) => {
                let base = array_id(ctx, &rv.name).expect("array");
                vec![CellId(ctx.arrays[base.0 as usize].base.0 + i as u32)]
            }
            (DeclKind::Array { len }, None) => {
                let base = array_id(ctx, &rv.name).expect("array");
                let b0 = ctx.arrays[base.0 as usize].base.0;
                (0..len as u32).map(|i| CellId(b0 + i)).collect()
            }
        };
        for c in cells {
            if covered(&io.in_ranges, in_base, c) {
                return Err(FrontendError::Region {
                    name: rv.name.clone(),
                    region: "input".into(),
                });
            }
            if covered(&io.out_ranges, out_base, c) {
                return Err(FrontendError::Region {
                    name: rv.name.clone(),
                    region: "output".into(),
                });
            }
            if !rel_cells.contains(&c) {
                rel_cells.push(c);
            }
        }
    }
    rel_cells.sort_unstable();

    // Region cells: fresh outputs always; inputs fresh unless wired.
    let in_lanes: Vec<LaneCells> = match in_override {
        Some(lanes) => {
            assert_eq!(lanes.len(), b, "wiring lane count mismatch");
            lanes
        }
        None => (0..b)
            .map(|x| {
                let action = (action_count > 1).then(|| {
                    ctx.cells.push(action_width(action_count), CellName::InAct(x as u32))
                });
                let data = (0..io.in_size)
                    .map(|k| {
                        ctx.cells.push(data_width, CellName::InData { lane: x as u32, word: k as u32 })
                    })
                    .collect();
                LaneCells { action, data }
            })
            .collect(),
    };
    let out_lanes: Vec<Vec<CellId>> = (0..b)
        .map(|x| {
            (0..io.out_size)
                .map(|k| ctx.cells.push(output_width, CellName::OutWord { lane: x as u32, word: k as u32 }))
                .collect()
        })
        .collect();

    // Redirection maps over the backing cells of the batch buffers.
    let mut read_redirect: BTreeMap<CellId, CellId> = BTreeMap::new();
    let mut write_redirect: BTreeMap<CellId, CellId> = BTreeMap::new();
    for (x, &(lo, _hi)) in io.out_ranges.iter().enumerate() {
        for k in 0..io.out_size {
            let backing = CellId(out_base.0 + (lo + k) as u32);
            write_redirect.insert(backing, out_lanes[x][k as usize]);
            read_redirect.insert(backing, out_lanes[x][k as usize]);
        }
    }
    for (x, &(lo, _hi)) in io.in_ranges.iter().enumerate() {
        for k in 0..io.in_size {
            let backing = CellId(in_base.0 + (lo + k) as u32);
            // Reads of an address covered by both rules see the input.
            read_redirect.insert(backing, in_lanes[x].data[k as usize]);
            write_redirect.entry(backing).or_insert(in_lanes[x].data[k as usize]);
        }
    }
    let act_redirect: Option<(ArrayId, Vec<CellId>)> = if multi_action {
        let aname = super::compile::act_array_name(&block.name);
        let aid = array_id(ctx, &aname).expect("act array allocated by compile");
        let base = ctx.arrays[aid.0 as usize].base;
        let cells: Vec<CellId> = in_lanes.iter().map(|l| l.action.expect("multi-action lane")).collect();
        for (x, &c) in cells.iter().enumerate() {
            read_redirect.insert(CellId(base.0 + x as u32), c);
            write_redirect.insert(CellId(base.0 + x as u32), c);
        }
        Some((aid, cells))
    } else {
        None
    };

    // Read-after-write hazard on an aliased in/out buffer: the model reads
    // the input region (pre-block values) where direct source execution would
    // see the fresh write, so reject such blocks as batch operations.
    if io.in_array == io.out_array {
        let range = ssa.block_ranges[block_index].clone();
        let mut written: BTreeSet<u64> = BTreeSet::new();
        let both = |addr: u64| {
            io.in_ranges.iter().any(|&(lo, hi)| addr >= lo && addr < hi)
                && io.out_ranges.iter().any(|&(lo, hi)| addr >= lo && addr < hi)
        };
        for ins in &ssa.instrs[range] {
            for c in ins.used_cells() {
                if let Some(addr) = (c.0 as u64).checked_sub(in_base.0 as u64) {
                    if addr < ctx.arrays[in_aid.0 as usize].len as u64
                        && both(addr)
                        && written.contains(&addr)
                    {
                        return Err(FrontendError::AliasHazard {
                            block: block.name.clone(),
                            addr,
                        });
                    }
                }
            }
            if let Some(d) = ins.def() {
                if let Some(addr) = (d.0 as u64).checked_sub(out_base.0 as u64) {
                    if addr < ctx.arrays[out_aid.0 as usize].len as u64 && both(addr) {
                        written.insert(addr);
                    }
                }
            }
        }
    }

    // Per-block redirected copies of arrays touched dynamically.
    let range = ssa.block_ranges[block_index].clone();
    let mut dyn_arrays: BTreeSet<ArrayId> = BTreeSet::new();
    for ins in &ssa.instrs[range.clone()] {
        if let Some(a) = ins.use_array() {
            dyn_arrays.insert(a);
        }
        if let Some(a) = ins.def_array() {
            dyn_arrays.insert(a);
        }
    }
    let mut array_alias: BTreeMap<ArrayId, ArrayId> = BTreeMap::new();
    for aid in dyn_arrays {
        let needs_copy = {
            let a = &ctx.arrays[aid.0 as usize];
            a.read_map.iter().any(|c| read_redirect.contains_key(c))
                || a.write_map.iter().any(|c| write_redirect.contains_key(c))
        };
        if !needs_copy {
            continue;
        }
        let mut copy = ctx.arrays[aid.0 as usize].clone();
        for c in copy.read_map.iter_mut() {
            if let Some(r) = read_redirect.get(c) {
                *c = *r;
            }
        }
        for c in copy.write_map.iter_mut() {
            if let Some(r) = write_redirect.get(c) {
                *c = *r;
            }
        }
        let new_id = ArrayId(ctx.arrays.len() as u32);
        ctx.arrays.push(copy);
        array_alias.insert(aid, new_id);
    }
    let _ = act_redirect; // act reads flow through the redirect maps

    // Rewrite the block's instructions: rebase jumps, redirect cells.
    let start = range.start;
    let map_read = |o: Operand| -> Operand {
        match o {
            Operand::Cell(c) => Operand::Cell(*read_redirect.get(&c).unwrap_or(&c)),
            k => k,
        }
    };
    let map_write = |c: CellId| -> CellId { *write_redirect.get(&c).unwrap_or(&c) };
    let map_array = |a: ArrayId| -> ArrayId { *array_alias.get(&a).unwrap_or(&a) };
    let mut instrs = Vec::with_capacity(range.len());
    for ins in &ssa.instrs[range.clone()] {
        let new = match ins.clone() {
            Instr::Bin { dst, op, lhs, rhs } => Instr::Bin {
                dst: map_write(dst),
                op,
                lhs: map_read(lhs),
                rhs: map_read(rhs),
            },
            Instr::Not { dst, src } => Instr::Not { dst: map_write(dst), src: map_read(src) },
            Instr::Select { dst, cond, on_true, on_false } => Instr::Select {
                dst: map_write(dst),
                cond: map_read(cond),
                on_true: map_read(on_true),
                on_false: map_read(on_false),
            },
            Instr::Copy { dst, src } => Instr::Copy { dst: map_write(dst), src: map_read(src) },
            Instr::LoadDyn { dst, array, index } => Instr::LoadDyn {
                dst: map_write(dst),
                array: map_array(array),
                index: map_read(index),
            },
            Instr::StoreDyn { array, index, value } => Instr::StoreDyn {
                array: map_array(array),
                index: map_read(index),
                value: map_read(value),
            },
            Instr::BranchZero { cond, target } => {
                Instr::BranchZero { cond: map_read(cond), target: target - start }
            }
            Instr::Jump { target } => Instr::Jump { target: target - start },
            Instr::Nop => Instr::Nop,
        };
        instrs.push(new);
    }

    Ok(LoweredBlock {
        name: block.name.clone(),
        io,
        in_lanes,
        out_lanes,
        rel_cells,
        instrs,
        action_count,
        data_width,
        output_width,
    })
}

/// Assemble a model once the shared cell table is final.
pub fn finish_model(
    prog: &AbkProgram,
    cells: Arc<CellTable>,
    arrays: Vec<ArrayInfo>,
    lb: &LoweredBlock,
) -> AcceleratorModel {
    let mut regions = vec![Region::NRel; cells.len()];
    for &c in &lb.rel_cells {
        regions[c.idx()] = Region::Rel;
    }
    for lane in &lb.in_lanes {
        if let Some(a) = lane.action {
            regions[a.idx()] = Region::In;
        }
        for &c in &lane.data {
            regions[c.idx()] = Region::In;
        }
    }
    for lane in &lb.out_lanes {
        for &c in lane {
            regions[c.idx()] = Region::Out;
        }
    }
    let initial = InitialMemories { base: vec![0; cells.len()], free: lb.rel_cells.clone() };
    AcceleratorModel {
        name: lb.name.clone(),
        batch_size: lb.io.batch_size as usize,
        action_count: lb.action_count,
        data_width: lb.data_width,
        output_width: lb.output_width,
        in_size: lb.io.in_size as usize,
        out_size: lb.io.out_size as usize,
        cells,
        regions,
        in_lanes: lb.in_lanes.clone(),
        out_lanes: lb.out_lanes.clone(),
        rel_cells: lb.rel_cells.clone(),
        arrays,
        instrs: lb.instrs.clone(),
        initial,
        non_interfering: prog.non_interfering,
        step_budget: DEFAULT_STEP_BUDGET,
    }
}

/// Lower a single annotated block (by name) to a standalone model.
pub fn lower(
    prog: &AbkProgram,
    ssa: &SsaProgram,
    block_name: &str,
) -> Result<AcceleratorModel, FrontendError> {
    let idx = prog
        .all_blocks()
        .iter()
        .position(|b| b.name == block_name)
        .ok_or_else(|| FrontendError::Annotation {
            line: 0,
            msg: format!("no block named {block_name}"),
        })?;
    let mut ctx = LowerCtx::from_ssa(ssa);
    let lb = lower_block(&mut ctx, prog, ssa, idx, None)?;
    Ok(finish_model(prog, Arc::new(ctx.cells), ctx.arrays, &lb))
}
