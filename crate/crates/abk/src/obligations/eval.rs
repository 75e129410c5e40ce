//! Concrete evaluation of an obligation under a full assignment to its
//! symbolic inputs, and the replayable counterexample built from it. Both
//! backends funnel through this one evaluator: the enumeration oracle drives
//! it over every assignment, and the bit-blasting backend validates every
//! decoded model through it before reporting.

use super::{CheckMode, CheckObligation, ObligationError};
use crate::model::{AcceleratorModel, ExecutionTrace, InputBatch, Lane, MachineState, ModelError};
use serde::{Deserialize, Serialize};

/// Concrete values for one run: the initial memory and the input batches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunAssign {
    pub initial_memory: Vec<u64>,
    pub batches: Vec<InputBatch>,
}

/// A complete concrete assignment to an obligation's symbolic inputs,
/// including the violating indices (batch `i`, lanes `j` and `j'`); all
/// zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub runs: Vec<RunAssign>,
    pub batch_i: usize,
    pub lane_j: usize,
    pub lane_jp: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    /// Outputs of the compared lanes differ (also used for a failed spec
    /// comparison).
    OutputMismatch,
    /// Final relevant states differ (the decomposition-strength conclusion).
    RelMismatch,
    /// No final control state within the bound.
    Unresponsive { steps: u64 },
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub violation: Option<ViolationKind>,
    pub traces: Vec<ExecutionTrace>,
}

/// Run a batch for at most `bound` steps; returns the trace and whether the
/// final control state was reached.
pub fn run_bounded(
    model: &AcceleratorModel,
    init: &MachineState,
    batch: &InputBatch,
    bound: u64,
) -> Result<(ExecutionTrace, bool), ModelError> {
    let mut bounded = model.clone();
    bounded.step_budget = bound;
    match bounded.run_batch(init, batch) {
        Ok(t) => Ok((t, true)),
        Err(ModelError::StepBudgetExceeded { .. }) => {
            // Re-run without the error to keep the partial trace. The budget
            // counts executed steps, so run a fresh copy step by step.
            let mut diags = crate::diag::Diagnostics::default();
            let mut state = init.clone();
            bounded.substitute_input(&mut state.memory, batch)?;
            let mut trace = ExecutionTrace::with_base(state.clone());
            let out_total: usize = bounded.out_lanes.iter().map(|l| l.len()).sum();
            let mut out_written = vec![false; out_total];
            for _ in 0..bound {
                let w = bounded.step(&mut state, &mut diags, &mut out_written);
                trace.push_transition(state.control, w);
                if bounded.is_final(&state) {
                    break;
                }
            }
            let reached = bounded.is_final(&state);
            trace.diags = diags;
            if reached {
                trace.final_marks.push(trace.len() - 1);
            }
            Ok((trace, reached))
        }
        Err(e) => Err(e),
    }
}

fn lanes_equal(a: &Lane, b: &Lane) -> bool {
    a == b
}

/// Evaluate the obligation's violation predicate under one assignment.
pub fn eval_concrete(
    obl: &CheckObligation,
    asg: &Assignment,
) -> Result<EvalOutcome, ModelError> {
    let m = &obl.model;
    match &obl.mode {
        CheckMode::Rb { bound } => {
            let run = &asg.runs[0];
            let init = MachineState { control: m.initial_control(), memory: run.initial_memory.clone() };
            let (trace, reached) = run_bounded(m, &init, &run.batches[0], *bound)?;
            let violation = (!reached).then_some(ViolationKind::Unresponsive { steps: *bound });
            Ok(EvalOutcome { violation, traces: vec![trace] })
        }
        CheckMode::Fc { batches } => {
            let run = &asg.runs[0];
            debug_assert_eq!(run.batches.len(), *batches);
            let init = MachineState { control: m.initial_control(), memory: run.initial_memory.clone() };
            let trace = m.run_sequence(&init, &run.batches)?;
            let n = *batches - 1;
            let i = asg.batch_i;
            let (j, jp) = (asg.lane_j, asg.lane_jp);
            let in_i = &run.batches[i].lanes[j];
            let in_n = &run.batches[n].lanes[jp];
            let rel_i = m.rel(&trace.initial_state_of_batch(i).memory);
            let rel_n = m.rel(&trace.initial_state_of_batch(n).memory);
            let violated = lanes_equal(in_i, in_n)
                && rel_i == rel_n
                && m.output_of(&trace, i)[j] != m.output_of(&trace, n)[jp];
            Ok(EvalOutcome {
                violation: violated.then_some(ViolationKind::OutputMismatch),
                traces: vec![trace],
            })
        }
        CheckMode::IntraFc => {
            let run = &asg.runs[0];
            let init = MachineState { control: m.initial_control(), memory: run.initial_memory.clone() };
            let trace = m.run_batch(&init, &run.batches[0])?;
            let (j, jp) = (asg.lane_j, asg.lane_jp);
            let out = m.output_of(&trace, 0);
            let violated = j != jp
                && lanes_equal(&run.batches[0].lanes[j], &run.batches[0].lanes[jp])
                && out[j] != out[jp];
            Ok(EvalOutcome {
                violation: violated.then_some(ViolationKind::OutputMismatch),
                traces: vec![trace],
            })
        }
        CheckMode::StrongFc { fcd } => {
            let (j, jp) = (asg.lane_j, asg.lane_jp);
            let mut traces = Vec::with_capacity(2);
            for run in &asg.runs {
                let init =
                    MachineState { control: m.initial_control(), memory: run.initial_memory.clone() };
                traces.push(m.run_batch(&init, &run.batches[0])?);
            }
            let rel0 = m.rel(&asg.runs[0].initial_memory);
            let rel0p = m.rel(&asg.runs[1].initial_memory);
            let antecedent = lanes_equal(
                &asg.runs[0].batches[0].lanes[j],
                &asg.runs[1].batches[0].lanes[jp],
            ) && rel0 == rel0p;
            let violation = if !antecedent {
                None
            } else if m.output_of(&traces[0], 0)[j] != m.output_of(&traces[1], 0)[jp] {
                Some(ViolationKind::OutputMismatch)
            } else if *fcd
                && m.rel(&traces[0].final_state(0).memory) != m.rel(&traces[1].final_state(0).memory)
            {
                Some(ViolationKind::RelMismatch)
            } else {
                None
            };
            Ok(EvalOutcome { violation, traces })
        }
        CheckMode::Sac { lane, .. } => {
            let run = &asg.runs[0];
            let init = MachineState { control: m.initial_control(), memory: run.initial_memory.clone() };
            let trace = m.run_batch(&init, &run.batches[0])?;
            let spec = obl.spec.as_ref().expect("sac obligations carry a spec");
            let in_lane = &run.batches[0].lanes[*lane];
            let rel = m.rel(&run.initial_memory);
            // totality was validated when the obligation was built
            let want = spec
                .eval(m, in_lane.action, &in_lane.data, &rel)
                .unwrap_or_else(|e| panic!("spec oracle failed during concrete evaluation: {e}"));
            let got = &m.output_of(&trace, 0)[*lane];
            Ok(EvalOutcome {
                violation: (*got != want).then_some(ViolationKind::OutputMismatch),
                traces: vec![trace],
            })
        }
    }
}

/// A replayable counterexample: the concrete assignment, the violating
/// indices, the violated conclusion, and the traces of the runs. Serialized
/// replay files carry the assignment; traces are reconstructed by replaying.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterexampleTrace {
    pub obligation: String,
    pub mode: CheckMode,
    pub assignment: Assignment,
    pub violation: ViolationKind,
    #[serde(skip)]
    pub traces: Vec<ExecutionTrace>,
    #[serde(skip)]
    pub monitor_log: Option<super::monitor::MonitorLog>,
}

impl CounterexampleTrace {
    /// Re-establish the violation concretely; errors if it no longer holds.
    pub fn replay(&mut self, obl: &CheckObligation) -> Result<(), ObligationError> {
        let outcome = eval_concrete(obl, &self.assignment)
            .map_err(|e| ObligationError::ReplayMismatch(e.to_string()))?;
        match outcome.violation {
            Some(v) => {
                self.violation = v;
                self.traces = outcome.traces;
                if obl.mode.is_fc_family() && v == ViolationKind::OutputMismatch {
                    let verdict = super::monitor::replay_monitor(self, &obl.model)?;
                    if !verdict.fc_check {
                        return Err(ObligationError::ReplayMismatch(
                            "monitor did not confirm the output mismatch".into(),
                        ));
                    }
                    self.monitor_log = Some(verdict.log);
                }
                Ok(())
            }
            None => Err(ObligationError::ReplayMismatch(
                "assignment does not violate the assertion under concrete interpretation".into(),
            )),
        }
    }
}
