//! Executable semantics of batch-mode accelerator kernels.
//!
//! An [`AcceleratorModel`] is a finite transition system: a flat vector of
//! fixed-width bitvector cells partitioned into four regions (input, output,
//! relevant, non-relevant), a control state that is the program counter of the
//! lowered instruction sequence, and a total deterministic step function that
//! executes one instruction per transition. A run consumes one input batch of
//! `batch_size` (action, data) lanes, starts at the initial control state, and
//! ends at the first state whose control is the final control state, where the
//! output region holds the output batch.

use crate::diag::{DiagEvent, Diagnostics};
use crate::ssa::{mask, ArrayInfo, CellId, CellTable, Instr, Operand, Width};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::Arc;
use thiserror::Error;

/// Default per-batch step budget: converts kernel nontermination into a
/// detectable outcome instead of a hang.
pub const DEFAULT_STEP_BUDGET: u64 = 1 << 20;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("no final state reached within {budget} steps")]
    StepBudgetExceeded { budget: u64 },
    #[error("state enumeration exceeded cap of {cap} states")]
    ExplosionCap { cap: u64 },
    #[error("initial control state expected, found pc {found}")]
    InvalidInitialState { found: usize },
    #[error("input batch has {got} lanes, model batch size is {want}")]
    BatchSizeMismatch { got: usize, want: usize },
}

/// Memory region a cell belongs to. Regions are disjoint and cover the cell
/// vector exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    In,
    Out,
    Rel,
    NRel,
}

/// Input-region cells of one lane.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneCells {
    /// Absent when the model's action set is a singleton: the lone action
    /// carries no information and is not materialized.
    pub action: Option<CellId>,
    pub data: Vec<CellId>,
}

/// One (action, data) input lane.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lane {
    pub action: u64,
    pub data: Vec<u64>,
}

impl Lane {
    pub fn new(action: u64, data: Vec<u64>) -> Self {
        Lane { action, data }
    }

    /// Single-action, single-word lane.
    pub fn word(value: u64) -> Self {
        Lane { action: 0, data: vec![value] }
    }
}

/// A length-`b` vector of input lanes; the unit of execution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputBatch {
    pub lanes: Vec<Lane>,
}

impl InputBatch {
    pub fn new(lanes: Vec<Lane>) -> Self {
        InputBatch { lanes }
    }

    pub fn words(values: &[u64]) -> Self {
        InputBatch { lanes: values.iter().map(|&v| Lane::word(v)).collect() }
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }
}

/// The set of allowable initial memories: `base` with every cell in `free`
/// ranging over its full width. The common cases are a single reset state
/// (`free` empty) and configuration registers preloaded with arbitrary values
/// (`free` = relevant cells).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialMemories {
    pub base: Vec<u64>,
    pub free: Vec<CellId>,
}

impl InitialMemories {
    pub fn contains(&self, memory: &[u64]) -> bool {
        let free: BTreeSet<CellId> = self.free.iter().copied().collect();
        memory.len() == self.base.len()
            && memory
                .iter()
                .enumerate()
                .all(|(i, &v)| free.contains(&CellId(i as u32)) || v == self.base[i])
    }
}

/// A full machine state: control (program counter) plus the memory vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MachineState {
    pub control: usize,
    pub memory: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceleratorModel {
    pub name: String,
    pub batch_size: usize,
    /// |A|; actions are 0..action_count.
    pub action_count: u64,
    pub data_width: Width,
    pub output_width: Width,
    /// Words per input batch element.
    pub in_size: usize,
    /// Words per output batch element.
    pub out_size: usize,
    pub cells: Arc<CellTable>,
    /// Region of each cell; parallel to `cells`.
    pub regions: Vec<Region>,
    pub in_lanes: Vec<LaneCells>,
    pub out_lanes: Vec<Vec<CellId>>,
    pub rel_cells: Vec<CellId>,
    pub arrays: Vec<ArrayInfo>,
    pub instrs: Vec<Instr>,
    pub initial: InitialMemories,
    pub non_interfering: bool,
    pub step_budget: u64,
}

impl AcceleratorModel {
    /// Initial control state: entry program counter.
    pub fn initial_control(&self) -> usize {
        0
    }

    /// Final control state: one past the last instruction.
    pub fn final_control(&self) -> usize {
        self.instrs.len()
    }

    pub fn action_width(&self) -> Width {
        debug_assert!(self.action_count >= 1);
        64 - (self.action_count - 1).leading_zeros().max(0) as Width
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// The memory of a concrete reset state (free cells at their base value).
    pub fn reset_memory(&self) -> Vec<u64> {
        self.initial.base.clone()
    }

    pub fn initial_state(&self) -> MachineState {
        MachineState { control: self.initial_control(), memory: self.reset_memory() }
    }

    pub fn is_final(&self, s: &MachineState) -> bool {
        s.control == self.final_control()
    }

    /// ctrl projection.
    pub fn ctrl(&self, s: &MachineState) -> usize {
        s.control
    }

    /// inp projection: the input region decoded as a batch.
    pub fn inp(&self, memory: &[u64]) -> InputBatch {
        let lanes = self
            .in_lanes
            .iter()
            .map(|lc| Lane {
                action: lc.action.map(|c| memory[c.idx()]).unwrap_or(0),
                data: lc.data.iter().map(|c| memory[c.idx()]).collect(),
            })
            .collect();
        InputBatch { lanes }
    }

    /// out projection: the output region as per-lane word vectors.
    pub fn out(&self, memory: &[u64]) -> Vec<Vec<u64>> {
        self.out_lanes
            .iter()
            .map(|cs| cs.iter().map(|c| memory[c.idx()]).collect())
            .collect()
    }

    /// rel projection.
    pub fn rel(&self, memory: &[u64]) -> Vec<u64> {
        self.rel_cells.iter().map(|c| memory[c.idx()]).collect()
    }

    /// nrel projection, in cell order.
    pub fn nrel(&self, memory: &[u64]) -> Vec<u64> {
        self.nrel_cells().map(|c| memory[c.idx()]).collect()
    }

    pub fn nrel_cells(&self) -> impl Iterator<Item = CellId> + '_ {
        self.regions
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Region::NRel)
            .map(|(i, _)| CellId(i as u32))
    }

    /// Overwrite the input region of `memory` with `batch`.
    pub fn substitute_input(&self, memory: &mut [u64], batch: &InputBatch) -> Result<(), ModelError> {
        if batch.len() != self.batch_size {
            return Err(ModelError::BatchSizeMismatch { got: batch.len(), want: self.batch_size });
        }
        for (lane, lc) in batch.lanes.iter().zip(&self.in_lanes) {
            if let Some(c) = lc.action {
                memory[c.idx()] = lane.action & mask(self.cells.width(c));
            }
            for (&c, &v) in lc.data.iter().zip(&lane.data) {
                memory[c.idx()] = v & mask(self.cells.width(c));
            }
        }
        Ok(())
    }

    /// Cells whose value at batch entry can influence execution: read before
    /// any write along some path. Used by the enumeration oracle to avoid
    /// enumerating provably dead scratch cells.
    pub fn entry_live_cells(&self) -> Vec<CellId> {
        let mut written: BTreeSet<CellId> = BTreeSet::new();
        let mut live: BTreeSet<CellId> = BTreeSet::new();
        // Conservative: inside while regions, writes do not retire reads
        // (the first iteration may read the entry value before the write of a
        // later pc executes, but a re-run surely reads post-write values —
        // keeping reads live is the safe direction).
        let in_while: Vec<bool> = {
            let mut v = vec![false; self.instrs.len()];
            for (pc, _) in self.instrs.iter().enumerate() {
                for w in self.while_regions_approx() {
                    if pc >= w.0 && pc <= w.1 {
                        v[pc] = true;
                    }
                }
            }
            v
        };
        for (pc, ins) in self.instrs.iter().enumerate() {
            for c in ins.used_cells() {
                if !written.contains(&c) {
                    live.insert(c);
                }
            }
            if let Some(a) = ins.use_array() {
                let arr = &self.arrays[a.0 as usize];
                for &c in &arr.read_map {
                    if !written.contains(&c) {
                        live.insert(c);
                    }
                }
            }
            if !in_while[pc] {
                if let Some(d) = ins.def() {
                    written.insert(d);
                }
            }
            // Dynamic stores hit an unknown cell: never retire reads through
            // them.
        }
        live.into_iter().collect()
    }

    fn while_regions_approx(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for (pc, ins) in self.instrs.iter().enumerate() {
            if let Instr::Jump { target } = ins {
                if *target <= pc {
                    v.push((*target, pc));
                }
            }
        }
        v
    }

    /// One transition. Total: final states map to themselves. Returns the
    /// single cell write the instruction performed, if any.
    pub fn step(
        &self,
        state: &mut MachineState,
        diags: &mut Diagnostics,
        out_written: &mut [bool],
    ) -> Option<(CellId, u64)> {
        let pc = state.control;
        if pc >= self.instrs.len() {
            return None; // final state is absorbing
        }
        let read = |mem: &[u64], o: Operand| -> u64 {
            match o {
                Operand::Cell(c) => mem[c.idx()],
                Operand::Const { value, width } => value & mask(width),
            }
        };
        let mut next_pc = pc + 1;
        let mut write = None;
        match &self.instrs[pc] {
            Instr::Bin { dst, op, lhs, rhs } => {
                let a = read(&state.memory, *lhs);
                let b = read(&state.memory, *rhs);
                let w = self.cells.width(*dst);
                self.check_reads(pc, &[*lhs, *rhs], out_written, diags);
                write = Some(self.write_cell(state, *dst, op.eval(a, b, w), pc, diags, out_written));
            }
            Instr::Not { dst, src } => {
                let a = read(&state.memory, *src);
                let w = self.cells.width(*dst);
                self.check_reads(pc, &[*src], out_written, diags);
                write = Some(self.write_cell(state, *dst, !a & mask(w), pc, diags, out_written));
            }
            Instr::Select { dst, cond, on_true, on_false } => {
                let c = read(&state.memory, *cond);
                let v = if c != 0 { read(&state.memory, *on_true) } else { read(&state.memory, *on_false) };
                let w = self.cells.width(*dst);
                self.check_reads(pc, &[*cond, *on_true, *on_false], out_written, diags);
                write = Some(self.write_cell(state, *dst, v & mask(w), pc, diags, out_written));
            }
            Instr::Copy { dst, src } => {
                let v = read(&state.memory, *src);
                let w = self.cells.width(*dst);
                self.check_reads(pc, &[*src], out_written, diags);
                write = Some(self.write_cell(state, *dst, v & mask(w), pc, diags, out_written));
            }
            Instr::LoadDyn { dst, array, index } => {
                let arr = &self.arrays[array.0 as usize];
                let i = read(&state.memory, *index);
                let w = self.cells.width(*dst);
                let v = if i < arr.len as u64 {
                    let c = arr.read_map[i as usize];
                    if self.regions[c.idx()] == Region::Out && !out_written[self.out_index(c)] {
                        diags.push(DiagEvent::OutputReadBeforeWrite { pc, cell: self.cells.name(c) });
                    }
                    state.memory[c.idx()]
                } else {
                    diags.push(DiagEvent::OobRead { pc, array: arr.name.to_string(), index: i });
                    0
                };
                write = Some(self.write_cell(state, *dst, v & mask(w), pc, diags, out_written));
            }
            Instr::StoreDyn { array, index, value } => {
                let arr = &self.arrays[array.0 as usize];
                let i = read(&state.memory, *index);
                let v = read(&state.memory, *value);
                if i < arr.len as u64 {
                    let c = arr.write_map[i as usize];
                    write = Some(self.write_cell(state, c, v & mask(self.cells.width(c)), pc, diags, out_written));
                } else {
                    diags.push(DiagEvent::OobWrite { pc, array: arr.name.to_string(), index: i });
                }
            }
            Instr::BranchZero { cond, target } => {
                if read(&state.memory, *cond) == 0 {
                    next_pc = *target;
                }
            }
            Instr::Jump { target } => {
                next_pc = *target;
            }
            Instr::Nop => {}
        }
        state.control = next_pc;
        write
    }

    fn out_index(&self, c: CellId) -> usize {
        // Position of an output cell within the flattened output region.
        self.out_lanes
            .iter()
            .flatten()
            .position(|&oc| oc == c)
            .expect("cell tagged Out must appear in out_lanes")
    }

    fn check_reads(&self, pc: usize, ops: &[Operand], out_written: &[bool], diags: &mut Diagnostics) {
        for o in ops {
            if let Operand::Cell(c) = o {
                if self.regions[c.idx()] == Region::Out && !out_written[self.out_index(*c)] {
                    diags.push(DiagEvent::OutputReadBeforeWrite { pc, cell: self.cells.name(*c) });
                }
            }
        }
    }

    fn write_cell(
        &self,
        state: &mut MachineState,
        c: CellId,
        v: u64,
        pc: usize,
        diags: &mut Diagnostics,
        out_written: &mut [bool],
    ) -> (CellId, u64) {
        match self.regions[c.idx()] {
            Region::In => diags.push(DiagEvent::InputRegionWrite { pc, cell: self.cells.name(c) }),
            Region::Out => out_written[self.out_index(c)] = true,
            _ => {}
        }
        state.memory[c.idx()] = v;
        (c, v)
    }

    /// Execute one input batch from `init` (whose control must be the initial
    /// control state); returns the trace ending at the first final state.
    pub fn run_batch(&self, init: &MachineState, batch: &InputBatch) -> Result<ExecutionTrace, ModelError> {
        self.run_sequence(init, std::slice::from_ref(batch))
    }

    /// Execute a sequence of input batches: between batches the final memory
    /// carries over with control reset to the initial control state.
    pub fn run_sequence(&self, init: &MachineState, batches: &[InputBatch]) -> Result<ExecutionTrace, ModelError> {
        if init.control != self.initial_control() {
            return Err(ModelError::InvalidInitialState { found: init.control });
        }
        let mut diags = Diagnostics::default();
        let mut trace = ExecutionTrace::new(init.clone());
        let mut state = init.clone();
        let out_total: usize = self.out_lanes.iter().map(|l| l.len()).sum();
        let mut rel_at_entry = self.rel(&state.memory);
        for (bi, batch) in batches.iter().enumerate() {
            if bi > 0 {
                // chain: control back to initial, memory carried over
                state.control = self.initial_control();
                trace.push_chain(state.clone());
                rel_at_entry = self.rel(&state.memory);
            }
            let before = state.memory.clone();
            self.substitute_input(&mut state.memory, batch)?;
            trace.record_substitution(&before, &state.memory);
            let mut out_written = vec![false; out_total];
            let mut steps: u64 = 0;
            while !self.is_final(&state) {
                if steps >= self.step_budget {
                    trace.diags = diags;
                    return Err(ModelError::StepBudgetExceeded { budget: self.step_budget });
                }
                let write = self.step(&mut state, &mut diags, &mut out_written);
                debug_assert!(
                    state.control != self.initial_control(),
                    "initial control state recurred during a batch run"
                );
                trace.push_step(state.control, write);
                steps += 1;
            }
            if self.non_interfering {
                let rel_now = self.rel(&state.memory);
                if rel_now != rel_at_entry {
                    for (i, &c) in self.rel_cells.iter().enumerate() {
                        if rel_now[i] != rel_at_entry[i] {
                            diags.push(DiagEvent::RelevantMutation { cell: self.cells.name(c) });
                        }
                    }
                }
            }
            trace.mark_final();
        }
        trace.diags = diags;
        Ok(trace)
    }

    /// Output batch of the `k`-th executed batch in a trace.
    pub fn output_of(&self, trace: &ExecutionTrace, k: usize) -> Vec<Vec<u64>> {
        let s = trace.final_state(k);
        self.out(&s.memory)
    }

    /// All states appearing in some execution of at most `depth` batches from
    /// a concrete initial state, plus the concrete initial states themselves.
    pub fn enumerate_reachable(&self, depth: usize, cap: u64) -> Result<BTreeSet<MachineState>, ModelError> {
        let mut seen: BTreeSet<MachineState> = BTreeSet::new();
        let mut frontier: Vec<MachineState> = Vec::new();
        for mem in enumerate_memories(&self.initial, &self.cells, cap)? {
            let s = MachineState { control: self.initial_control(), memory: mem };
            seen.insert(s.clone());
            frontier.push(s);
        }
        let batches = self.enumerate_batches(cap)?;
        for _ in 0..depth {
            let mut next: Vec<MachineState> = Vec::new();
            for s in &frontier {
                for b in &batches {
                    let trace = self.run_batch(s, b)?;
                    for st in trace.iter_states() {
                        if seen.len() as u64 >= cap {
                            return Err(ModelError::ExplosionCap { cap });
                        }
                        seen.insert(st.clone());
                    }
                    let f = trace.final_state(0);
                    let chained = MachineState { control: self.initial_control(), memory: f.memory.clone() };
                    if seen.insert(chained.clone()) {
                        next.push(chained);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        Ok(seen)
    }

    /// Relevant-region values over the reachable states, iterated to a
    /// fixpoint (bounded by `cap`).
    pub fn reachable_rel_values(&self, cap: u64) -> Result<Vec<Vec<u64>>, ModelError> {
        let mut depth = 0;
        let mut prev: Option<BTreeSet<Vec<u64>>> = None;
        loop {
            let states = self.enumerate_reachable(depth, cap)?;
            let rels: BTreeSet<Vec<u64>> = states.iter().map(|s| self.rel(&s.memory)).collect();
            if prev.as_ref() == Some(&rels) {
                return Ok(rels.into_iter().collect());
            }
            prev = Some(rels);
            depth += 1;
            if depth > 64 {
                return Err(ModelError::ExplosionCap { cap });
            }
        }
    }

    /// Every input batch at this model's widths; capped.
    pub fn enumerate_batches(&self, cap: u64) -> Result<Vec<InputBatch>, ModelError> {
        let lane_domain = self.enumerate_lanes(cap)?;
        let mut total: u64 = 1;
        for _ in 0..self.batch_size {
            total = total
                .checked_mul(lane_domain.len() as u64)
                .filter(|&t| t <= cap)
                .ok_or(ModelError::ExplosionCap { cap })?;
        }
        let mut out = Vec::with_capacity(total as usize);
        let mut idx = vec![0usize; self.batch_size];
        loop {
            out.push(InputBatch::new(idx.iter().map(|&i| lane_domain[i].clone()).collect()));
            let mut k = 0;
            loop {
                if k == self.batch_size {
                    return Ok(out);
                }
                idx[k] += 1;
                if idx[k] < lane_domain.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    fn enumerate_lanes(&self, cap: u64) -> Result<Vec<Lane>, ModelError> {
        let data_vals = 1u64 << self.data_width.min(63);
        let mut total = self.action_count;
        for _ in 0..self.in_size {
            total = total
                .checked_mul(data_vals)
                .filter(|&t| t <= cap)
                .ok_or(ModelError::ExplosionCap { cap })?;
        }
        let mut lanes = Vec::with_capacity(total as usize);
        for a in 0..self.action_count {
            let mut data = vec![0u64; self.in_size];
            loop {
                lanes.push(Lane { action: a, data: data.clone() });
                let mut k = 0;
                loop {
                    if k == self.in_size {
                        data = vec![u64::MAX; self.in_size]; // sentinel: done
                        break;
                    }
                    data[k] += 1;
                    if data[k] < data_vals {
                        break;
                    }
                    data[k] = 0;
                    k += 1;
                }
                if data.first() == Some(&u64::MAX) || self.in_size == 0 {
                    break;
                }
            }
        }
        Ok(lanes)
    }
}

/// Enumerate every memory in an [`InitialMemories`] set, capped.
pub fn enumerate_memories(
    init: &InitialMemories,
    cells: &CellTable,
    cap: u64,
) -> Result<Vec<Vec<u64>>, ModelError> {
    let mut total: u64 = 1;
    for &c in &init.free {
        let w = cells.width(c).min(63);
        total = total
            .checked_mul(1u64 << w)
            .filter(|&t| t <= cap)
            .ok_or(ModelError::ExplosionCap { cap })?;
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut vals = vec![0u64; init.free.len()];
    loop {
        let mut mem = init.base.clone();
        for (&c, &v) in init.free.iter().zip(&vals) {
            mem[c.idx()] = v;
        }
        out.push(mem);
        let mut k = 0;
        loop {
            if k == init.free.len() {
                return Ok(out);
            }
            vals[k] += 1;
            if vals[k] <= mask(cells.width(init.free[k])) {
                break;
            }
            vals[k] = 0;
            k += 1;
        }
    }
}

/// Delta within one transition: the control state after the step and the cell
/// writes it performed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDelta {
    pub control_after: usize,
    pub writes: Vec<(CellId, u64)>,
    /// Index of this state in the overall sequence marks nothing special;
    /// chaining and substitution steps are flagged so replay can reproduce
    /// the exact state sequence.
    pub kind: StepKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    /// An ordinary transition.
    Transition,
    /// Start of a follow-up batch: control reset, memory carried over.
    Chain,
}

/// The state sequence of a (multi-batch) run, stored as a base state plus
/// per-step deltas so that long runs stay affordable. Initial and final
/// states are marked by index; there is exactly one final state per batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    base: MachineState,
    deltas: Vec<StepDelta>,
    pub initial_marks: Vec<usize>,
    pub final_marks: Vec<usize>,
    pub diags: Diagnostics,
}

impl ExecutionTrace {
    fn new(base: MachineState) -> Self {
        ExecutionTrace {
            base,
            deltas: Vec::new(),
            initial_marks: vec![0],
            final_marks: Vec::new(),
            diags: Diagnostics::default(),
        }
    }

    /// Start a trace at a given (input-substituted) state; used by bounded
    /// runners that record partial executions.
    pub fn with_base(base: MachineState) -> Self {
        Self::new(base)
    }

    /// Append one transition.
    pub fn push_transition(&mut self, control_after: usize, write: Option<(CellId, u64)>) {
        self.push_step(control_after, write);
    }

    /// Number of states in the sequence.
    pub fn len(&self) -> usize {
        self.deltas.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn push_step(&mut self, control_after: usize, write: Option<(CellId, u64)>) {
        self.deltas.push(StepDelta {
            control_after,
            writes: write.into_iter().collect(),
            kind: StepKind::Transition,
        });
    }

    fn push_chain(&mut self, next: MachineState) {
        self.deltas.push(StepDelta { control_after: next.control, writes: Vec::new(), kind: StepKind::Chain });
        self.initial_marks.push(self.deltas.len());
    }

    fn record_substitution(&mut self, before: &[u64], after: &[u64]) {
        // Input substitution rewrites the marked initial state in place
        // rather than adding a step: the sequence starts at the substituted
        // state, matching the "replace inp(s_0) with in_1" reading.
        let writes: Vec<(CellId, u64)> = before
            .iter()
            .zip(after)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, (_, b))| (CellId(i as u32), *b))
            .collect();
        if self.deltas.is_empty() {
            for (c, v) in writes {
                self.base.memory[c.idx()] = v;
            }
        } else {
            let last = self.deltas.last_mut().expect("chain delta exists");
            debug_assert_eq!(last.kind, StepKind::Chain);
            last.writes = writes;
        }
    }

    fn mark_final(&mut self) {
        self.final_marks.push(self.deltas.len());
    }

    /// Reconstruct the `i`-th state of the sequence.
    pub fn state_at(&self, i: usize) -> MachineState {
        let mut s = self.base.clone();
        for d in &self.deltas[..i] {
            s.control = d.control_after;
            for &(c, v) in &d.writes {
                s.memory[c.idx()] = v;
            }
        }
        s
    }

    /// First state (after input substitution).
    pub fn first_state(&self) -> &MachineState {
        &self.base
    }

    /// Final state of the `k`-th batch.
    pub fn final_state(&self, k: usize) -> MachineState {
        self.state_at(self.final_marks[k])
    }

    /// Initial state of the `k`-th batch (input already substituted).
    pub fn initial_state_of_batch(&self, k: usize) -> MachineState {
        self.state_at(self.initial_marks[k])
    }

    pub fn batch_count(&self) -> usize {
        self.final_marks.len()
    }

    /// Iterate over every state in sequence order.
    pub fn iter_states(&self) -> impl Iterator<Item = MachineState> + '_ {
        let mut cur = self.base.clone();
        let mut i = 0usize;
        std::iter::from_fn(move || {
            if i == 0 {
                i = 1;
                return Some(cur.clone());
            }
            if i > self.deltas.len() {
                return None;
            }
            let d = &self.deltas[i - 1];
            cur.control = d.control_after;
            for &(c, v) in &d.writes {
                cur.memory[c.idx()] = v;
            }
            i += 1;
            Some(cur.clone())
        })
    }
}

impl PartialOrd for MachineState {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MachineState {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.control, &self.memory).cmp(&(other.control, &other.memory))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssa::{BinOp, CellName};

    /// Hand-built lane-wise kernel for core-model tests:
    /// `out[j] = data[j] OP rel` with a single action.
    pub fn tiny_model(b: usize, width: Width, op: Option<BinOp>, rel_free: bool) -> AcceleratorModel {
        let mut cells = CellTable::default();
        let rel = cells.push(width, CellName::Scalar("key".into()));
        let mut in_lanes = Vec::new();
        let mut out_lanes = Vec::new();
        for j in 0..b {
            let d = cells.push(width, CellName::InData { lane: j as u32, word: 0 });
            in_lanes.push(LaneCells { action: None, data: vec![d] });
        }
        for j in 0..b {
            let o = cells.push(width, CellName::OutWord { lane: j as u32, word: 0 });
            out_lanes.push(vec![o]);
        }
        let mut instrs = Vec::new();
        for j in 0..b {
            let src = Operand::Cell(in_lanes[j].data[0]);
            let dst = out_lanes[j][0];
            match op {
                Some(op) => instrs.push(Instr::Bin { dst, op, lhs: src, rhs: Operand::Cell(rel) }),
                None => instrs.push(Instr::Copy { dst, src }),
            }
        }
        let mut regions = vec![Region::NRel; cells.len()];
        regions[rel.idx()] = Region::Rel;
        for lc in &in_lanes {
            for c in &lc.data {
                regions[c.idx()] = Region::In;
            }
        }
        for l in &out_lanes {
            for c in l {
                regions[c.idx()] = Region::Out;
            }
        }
        let initial = InitialMemories {
            base: vec![0; cells.len()],
            free: if rel_free { vec![rel] } else { vec![] },
        };
        AcceleratorModel {
            name: "tiny".into(),
            batch_size: b,
            action_count: 1,
            data_width: width,
            output_width: width,
            in_size: 1,
            out_size: 1,
            cells: Arc::new(cells),
            regions,
            in_lanes,
            out_lanes,
            rel_cells: vec![rel],
            arrays: vec![],
            instrs,
            initial,
            non_interfering: true,
            step_budget: DEFAULT_STEP_BUDGET,
        }
    }

    #[test]
    fn identity_kernel_copies_data() {
        // identity kernel on batch <5, 9>, b=2, width 4 -> output <5, 9>
        let m = tiny_model(2, 4, None, false);
        let t = m.run_batch(&m.initial_state(), &InputBatch::words(&[5, 9])).unwrap();
        assert_eq!(m.output_of(&t, 0), vec![vec![5], vec![9]]);
        assert!(t.diags.is_clean());
    }

    #[test]
    fn xor_zero_key_is_identity() {
        let m = tiny_model(3, 4, Some(BinOp::Xor), false);
        let t = m.run_batch(&m.initial_state(), &InputBatch::words(&[1, 7, 15])).unwrap();
        assert_eq!(m.output_of(&t, 0), vec![vec![1], vec![7], vec![15]]);
    }

    #[test]
    fn run_sequence_single_batch_matches_run_batch() {
        let m = tiny_model(2, 4, Some(BinOp::Add), false);
        let b = InputBatch::words(&[3, 4]);
        let t1 = m.run_batch(&m.initial_state(), &b).unwrap();
        let t2 = m.run_sequence(&m.initial_state(), std::slice::from_ref(&b)).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn stateless_kernel_repeats_identically() {
        let m = tiny_model(2, 4, None, false);
        let b = InputBatch::words(&[2, 6]);
        let t = m.run_sequence(&m.initial_state(), &[b.clone(), b]).unwrap();
        assert_eq!(t.batch_count(), 2);
        assert_eq!(m.output_of(&t, 0), m.output_of(&t, 1));
    }

    /// Accumulating kernel: rel += data[0] each batch.
    fn accumulator(width: Width) -> AcceleratorModel {
        let mut m = tiny_model(1, width, None, false);
        let rel = m.rel_cells[0];
        let d0 = m.in_lanes[0].data[0];
        let mut instrs = m.instrs.clone();
        instrs.push(Instr::Bin {
            dst: rel,
            op: BinOp::Add,
            lhs: Operand::Cell(rel),
            rhs: Operand::Cell(d0),
        });
        m.instrs = instrs;
        m.non_interfering = false;
        m
    }

    #[test]
    fn accumulator_matches_direct_loop_oracle() {
        // Oracle: re-execute the sum with a plain loop and compare the
        // relevant region after each batch.
        let m = accumulator(4);
        let batches: Vec<InputBatch> = [3u64, 7, 12].iter().map(|&v| InputBatch::words(&[v])).collect();
        let t = m.run_sequence(&m.initial_state(), &batches).unwrap();
        let mut acc: u64 = 0;
        for k in 0..3 {
            acc = (acc + batches[k].lanes[0].data[0]) & 0xf;
            let rel = m.rel(&t.final_state(k).memory);
            assert_eq!(rel, vec![acc], "after batch {k}");
        }
    }

    #[test]
    fn prefix_property_of_run_sequence() {
        let m = accumulator(4);
        let batches: Vec<InputBatch> = [1u64, 2, 3].iter().map(|&v| InputBatch::words(&[v])).collect();
        let t2 = m.run_sequence(&m.initial_state(), &batches[..2]).unwrap();
        let t3 = m.run_sequence(&m.initial_state(), &batches).unwrap();
        let s2: Vec<MachineState> = t2.iter_states().collect();
        let s3: Vec<MachineState> = t3.iter_states().collect();
        assert_eq!(&s3[..s2.len()], &s2[..]);
    }

    #[test]
    fn deterministic_replay_from_first_state() {
        let m = accumulator(4);
        let batches: Vec<InputBatch> = [5u64, 9].iter().map(|&v| InputBatch::words(&[v])).collect();
        let t = m.run_sequence(&m.initial_state(), &batches).unwrap();
        let t2 = m.run_sequence(&MachineState { control: 0, memory: t.state_at(0).memory.clone() }, &batches).unwrap();
        assert_eq!(
            t.iter_states().collect::<Vec<_>>(),
            t2.iter_states().collect::<Vec<_>>()
        );
    }

    #[test]
    fn step_budget_flags_nontermination() {
        // while (1) {} via an unconditional back-edge (not to pc 0: the
        // initial control state must not recur)
        let mut m = tiny_model(1, 2, None, false);
        m.instrs = vec![Instr::Nop, Instr::Nop, Instr::Jump { target: 1 }];
        m.step_budget = 100;
        let err = m.run_batch(&m.initial_state(), &InputBatch::words(&[0])).unwrap_err();
        assert_eq!(err, ModelError::StepBudgetExceeded { budget: 100 });
    }

    #[test]
    fn reachable_depth_zero_is_exactly_initial_states() {
        let m = tiny_model(1, 1, Some(BinOp::Xor), true);
        let states = m.enumerate_reachable(0, 1 << 20).unwrap();
        // rel free at width 1 -> two concrete initial states
        assert_eq!(states.len(), 2);
        assert!(states.iter().all(|s| s.control == 0));
    }

    #[test]
    fn stateless_kernel_reachable_initials_equal_sci() {
        // width 1, b=1, one action: initial states never change because the
        // kernel writes only outputs; compare depth 2 against depth 0
        // restricted to control = initial.
        let m = tiny_model(1, 1, None, false);
        let d0 = m.enumerate_reachable(0, 1 << 20).unwrap();
        let d2 = m.enumerate_reachable(2, 1 << 20).unwrap();
        let init_only: BTreeSet<Vec<u64>> = d2
            .iter()
            .filter(|s| s.control == 0)
            .map(|s| m.rel(&s.memory))
            .collect();
        let base: BTreeSet<Vec<u64>> = d0.iter().map(|s| m.rel(&s.memory)).collect();
        assert_eq!(init_only, base);
    }

    #[test]
    fn toggling_flag_reaches_both_rel_values() {
        // rel := NOT rel each batch, from rel=0
        let mut m = tiny_model(1, 1, None, false);
        let rel = m.rel_cells[0];
        m.instrs.push(Instr::Not { dst: rel, src: Operand::Cell(rel) });
        m.non_interfering = false;
        let states = m.enumerate_reachable(1, 1 << 20).unwrap();
        let rels: BTreeSet<Vec<u64>> = states.iter().map(|s| m.rel(&s.memory)).collect();
        assert_eq!(rels, BTreeSet::from([vec![0], vec![1]]));
        assert_eq!(m.reachable_rel_values(1 << 20).unwrap(), vec![vec![0], vec![1]]);
    }

    #[test]
    fn explosion_cap_is_reported() {
        let m = tiny_model(4, 8, None, false);
        assert!(matches!(m.enumerate_batches(1 << 10), Err(ModelError::ExplosionCap { .. })));
    }

    #[test]
    fn projection_round_trip_reassembles_memory() {
        let m = tiny_model(2, 4, Some(BinOp::Add), true);
        let mut mem = vec![0u64; m.num_cells()];
        for (i, v) in mem.iter_mut().enumerate() {
            *v = (i as u64 * 5 + 3) & 0xf;
        }
        let inp = m.inp(&mem);
        let out = m.out(&mem);
        let rel = m.rel(&mem);
        let nrel = m.nrel(&mem);
        let mut rebuilt = vec![0u64; m.num_cells()];
        for (lane, lc) in m.in_lanes.iter().enumerate() {
            for (w, &c) in lc.data.iter().enumerate() {
                rebuilt[c.idx()] = inp.lanes[lane].data[w];
            }
        }
        for (lane, l) in m.out_lanes.iter().enumerate() {
            for (w, &c) in l.iter().enumerate() {
                rebuilt[c.idx()] = out[lane][w];
            }
        }
        for (k, &c) in m.rel_cells.iter().enumerate() {
            rebuilt[c.idx()] = rel[k];
        }
        for (k, c) in m.nrel_cells().enumerate() {
            rebuilt[c.idx()] = nrel[k];
        }
        assert_eq!(rebuilt, mem);
    }

    #[test]
    fn determinism_of_transition() {
        let m = accumulator(4);
        let b = InputBatch::words(&[9]);
        let t1 = m.run_batch(&m.initial_state(), &b).unwrap();
        let t2 = m.run_batch(&m.initial_state(), &b).unwrap();
        assert_eq!(t1.iter_states().collect::<Vec<_>>(), t2.iter_states().collect::<Vec<_>>());
    }

    #[test]
    fn non_interference_witness_rel_preserved() {
        let m = tiny_model(2, 3, Some(BinOp::Xor), true);
        for init in enumerate_memories(&m.initial, &m.cells, 1 << 10).unwrap() {
            let s = MachineState { control: 0, memory: init };
            let rel_before = m.rel(&s.memory);
            let t = m.run_batch(&s, &InputBatch::words(&[1, 2])).unwrap();
            assert_eq!(m.rel(&t.final_state(0).memory), rel_before);
            assert!(t.diags.is_clean());
        }
    }
}

#[cfg(test)]
pub use tests::tiny_model;
