//! Execution diagnostics: defined-but-suspicious events that are not errors.
//!
//! Out-of-bounds accesses yield a defined value (reads are 0, writes are
//! dropped) so that buggy kernels stay checkable instead of crashing the
//! checker; each such event is recorded here. The interpreter also records
//! region-discipline violations (writes into the input region, reads of an
//! output cell before it was written in the current batch run, relevant-state
//! mutation in a kernel declared non-interfering).

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagEvent {
    /// Read past the end of an array; the read produced 0.
    OobRead { pc: usize, array: String, index: u64 },
    /// Write past the end of an array; the write was dropped.
    OobWrite { pc: usize, array: String, index: u64 },
    /// An instruction stored into an input-region cell.
    InputRegionWrite { pc: usize, cell: String },
    /// An output-region cell was read before any write in this batch run.
    OutputReadBeforeWrite { pc: usize, cell: String },
    /// Relevant state changed during a batch run of a model declared
    /// non-interfering.
    RelevantMutation { cell: String },
}

impl fmt::Display for DiagEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiagEvent::OobRead { pc, array, index } => {
                write!(f, "pc {pc}: out-of-bounds read {array}[{index}] -> 0")
            }
            DiagEvent::OobWrite { pc, array, index } => {
                write!(f, "pc {pc}: out-of-bounds write {array}[{index}] dropped")
            }
            DiagEvent::InputRegionWrite { pc, cell } => {
                write!(f, "pc {pc}: write into input region cell {cell}")
            }
            DiagEvent::OutputReadBeforeWrite { pc, cell } => {
                write!(f, "pc {pc}: output cell {cell} read before written")
            }
            DiagEvent::RelevantMutation { cell } => {
                write!(f, "relevant cell {cell} mutated by non-interfering kernel")
            }
        }
    }
}

/// Diagnostics channel attached to every execution trace.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub events: Vec<DiagEvent>,
}

impl Diagnostics {
    pub fn is_clean(&self) -> bool {
        self.events.is_empty()
    }

    pub fn push(&mut self, ev: DiagEvent) {
        self.events.push(ev);
    }

    pub fn merge(&mut self, other: Diagnostics) {
        self.events.extend(other.events);
    }
}
