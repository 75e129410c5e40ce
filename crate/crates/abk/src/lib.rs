//! Verification toolkit for batch-mode accelerator kernels.
//!
//! Kernels are written in the ABK mini-language (`.abk` files): arrays and
//! scalars of fixed-width bitvectors, constant-bound loops, and `%`-annotations
//! that mark functional blocks as batch operations. The library lowers each
//! annotated block to a finite transition system over a partitioned memory
//! (input / output / relevant / non-relevant regions), wires the blocks into a
//! decomposition plan, and discharges self-consistency obligations against it:
//!
//! - functional consistency (`fc`, `strong-fc`, `intra-fc`, `fcd`) — identical
//!   inputs under identical relevant state must produce identical outputs,
//! - single-action correctness (`sac`) — one symbolic lane against a reference
//!   function with all peer lanes zero-filled,
//! - responsiveness (`rb`) — a batch completes within a step bound, including
//!   the sliding-window campaign that carves sub-kernels out of the SSA form.
//!
//! Every obligation can be discharged by two interchangeable backends: an
//! exhaustive enumeration oracle and a bit-blasting CDCL backend. SAT verdicts
//! always carry a counterexample that replays concretely through the
//! interpreter and the output-comparison monitor.
//!
//! See the crate `examples/` directory for one runnable example per
//! capability, and the `abk` binary for the command-line front door.

pub mod diag;
pub mod decompose;
pub mod obligations;
pub mod frontend;
pub mod model;
pub mod ssa;

pub use decompose::{compose, plan, DecompositionPlan, PlanError};
pub use model::{AcceleratorModel, ExecutionTrace, InputBatch, MachineState, ModelError};
pub use obligations::{CheckMode, CheckObligation, CounterexampleTrace, InitialPolicy};
