//! Check obligations: closed verification problems handed to a backend.
//!
//! The consistency family needs no specification: a violation witness is a
//! pair of equal inputs under equal relevant state that produced different
//! outputs, searched for across a batch sequence (`fc`), across two
//! independent runs (`strong-fc`, plus final-relevant-state equality for
//! `fcd`), or across duplicate lanes of a single batch (`intra-fc`).
//! Single-action correctness compares one symbolic lane against a reference
//! function with every other lane zero-filled, and responsiveness asks that a
//! run reach the final control state within a step bound.

mod eval;
pub mod monitor;
mod spec;

pub use eval::{eval_concrete, run_bounded, Assignment, CounterexampleTrace, EvalOutcome, RunAssign, ViolationKind};
pub use monitor::{replay_monitor, MonitorLog, MonitorVerdict};
pub use spec::{compile_spec_program, HostSpec, SpecOracle, SpecProgram};

use crate::model::AcceleratorModel;
use crate::ssa::CellId;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ObligationError {
    #[error("intra-batch check needs batch size >= 2, model has {batch_size}")]
    NotApplicable { batch_size: usize },
    #[error("bound must be at least 1")]
    InvalidBound,
    #[error("lane {lane} out of range for batch size {batch_size}")]
    LaneOutOfRange { lane: usize, batch_size: usize },
    #[error("spec oracle: {0}")]
    Spec(String),
    #[error("replay mismatch ({0}); this is a checker bug")]
    ReplayMismatch(String),
}

/// Which states a check may start from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum InitialPolicy {
    /// Fully unconstrained initial memory.
    #[default]
    Symbolic,
    /// Start in the model's concrete initial states.
    Concrete,
    /// User-provided over-approximation of reachability: the relevant region
    /// is restricted to the listed value tuples, the rest stays symbolic.
    Constrained { rel_values: Vec<Vec<u64>> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckMode {
    /// Functional consistency over a sequence of `batches` input batches.
    Fc { batches: usize },
    /// Two-run consistency from arbitrary policy-consistent initial states;
    /// `fcd` additionally requires equal final relevant states.
    StrongFc { fcd: bool },
    /// Duplicate lanes within one batch.
    IntraFc,
    /// One symbolic lane at `lane` against the spec oracle; peers zero-filled.
    /// `rel_values` lists the relevant-state tuples to check over.
    /// The default is the universal variant (every policy-consistent state
    /// with a listed relevant value must compute the lane correctly);
    /// `existential` instead asks that each (action, data, rel) triple be
    /// computed correctly from at least one such state.
    Sac { lane: usize, rel_values: Vec<Vec<u64>>, existential: bool },
    /// Some final state within `bound` transition steps.
    Rb { bound: u64 },
}

impl CheckMode {
    pub fn tag(&self) -> &'static str {
        match self {
            CheckMode::Fc { .. } => "fc",
            CheckMode::StrongFc { fcd: false } => "strong-fc",
            CheckMode::StrongFc { fcd: true } => "fcd",
            CheckMode::IntraFc => "intra-fc",
            CheckMode::Sac { .. } => "sac",
            CheckMode::Rb { .. } => "rb",
        }
    }

    pub fn is_fc_family(&self) -> bool {
        matches!(self, CheckMode::Fc { .. } | CheckMode::StrongFc { .. } | CheckMode::IntraFc)
    }
}

#[derive(Debug, Clone)]
pub struct CheckObligation {
    pub mode: CheckMode,
    pub model: Arc<AcceleratorModel>,
    pub policy: InitialPolicy,
    pub spec: Option<SpecOracle>,
    pub name: String,
}

impl CheckObligation {
    pub fn runs(&self) -> usize {
        match self.mode {
            CheckMode::StrongFc { .. } => 2,
            _ => 1,
        }
    }

    pub fn batches_per_run(&self) -> usize {
        match self.mode {
            CheckMode::Fc { batches } => batches,
            _ => 1,
        }
    }

    /// Initial-memory template of one run under the policy: base values, the
    /// cells left free, and an optional restriction of the relevant region to
    /// explicit value tuples. Free cells are restricted to those whose value
    /// at entry can influence the run (dead scratch cells stay at base).
    pub fn initial_template(&self) -> (Vec<u64>, Vec<CellId>, Option<Vec<Vec<u64>>>) {
        let m = &self.model;
        let sac_rel: Option<Vec<Vec<u64>>> = match &self.mode {
            CheckMode::Sac { rel_values, .. } => Some(rel_values.clone()),
            _ => None,
        };
        match (&self.policy, sac_rel) {
            (InitialPolicy::Concrete, sac) => {
                // SAC over a rel set intersects with the reset states: rel
                // cells range over the set, other free cells stay free.
                let mut free = m.initial.free.clone();
                let rel_domain = sac.map(|d| {
                    free.retain(|c| !m.rel_cells.contains(c));
                    d
                });
                (m.initial.base.clone(), free, rel_domain)
            }
            (policy, sac) => {
                let mut free = m.entry_live_cells();
                let rel_domain = match (policy, sac) {
                    (InitialPolicy::Constrained { rel_values }, None) => Some(rel_values.clone()),
                    (_, Some(d)) => Some(d),
                    _ => None,
                };
                if rel_domain.is_some() {
                    free.retain(|c| !m.rel_cells.contains(c));
                }
                (vec![0; m.num_cells()], free, rel_domain)
            }
        }
    }

    /// Deterministic structured text form, for caching and golden tests.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("obligation {}\n", self.name));
        s.push_str(&format!("mode {}\n", self.mode.tag()));
        match &self.mode {
            CheckMode::Fc { batches } => s.push_str(&format!("batches {batches}\n")),
            CheckMode::Rb { bound } => s.push_str(&format!("bound {bound}\n")),
            CheckMode::Sac { lane, rel_values, existential } => {
                s.push_str(&format!("lane {lane}\n"));
                s.push_str(&format!("existential {existential}\n"));
                s.push_str(&format!(
                    "rel-values {}\n",
                    rel_values
                        .iter()
                        .map(|v| v.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
                        .collect::<Vec<_>>()
                        .join(";")
                ));
            }
            _ => {}
        }
        s.push_str(&format!(
            "model {} b={} actions={} data=u{} out=u{} in_size={} out_size={}\n",
            self.model.name,
            self.model.batch_size,
            self.model.action_count,
            self.model.data_width,
            self.model.output_width,
            self.model.in_size,
            self.model.out_size,
        ));
        s.push_str(&format!(
            "policy {}\n",
            match &self.policy {
                InitialPolicy::Symbolic => "symbolic".to_string(),
                InitialPolicy::Concrete => "concrete".to_string(),
                InitialPolicy::Constrained { rel_values } =>
                    format!("constrained({} rel values)", rel_values.len()),
            }
        ));
        if let Some(spec) = &self.spec {
            s.push_str(&format!("spec {}\n", spec.name()));
        }
        s
    }
}

/// Consistency over a batch sequence of length `batches`: a violation is a
/// lane of some batch and a lane of the last batch with equal inputs and
/// equal relevant state at their batch entries but different outputs.
pub fn build_fc(
    model: Arc<AcceleratorModel>,
    batches: usize,
    policy: InitialPolicy,
) -> Result<CheckObligation, ObligationError> {
    if batches < 1 {
        return Err(ObligationError::InvalidBound);
    }
    let name = format!("{}/fc({batches})", model.name);
    Ok(CheckObligation { mode: CheckMode::Fc { batches }, model, policy, spec: None, name })
}

/// Two-run consistency; with `fcd` the final relevant states must also agree.
pub fn build_strong_fc(
    model: Arc<AcceleratorModel>,
    policy: InitialPolicy,
    fcd: bool,
) -> Result<CheckObligation, ObligationError> {
    let name = format!("{}/{}", model.name, if fcd { "fcd" } else { "strong-fc" });
    Ok(CheckObligation { mode: CheckMode::StrongFc { fcd }, model, policy, spec: None, name })
}

/// Duplicate-lane consistency within one batch. Needs at least two lanes;
/// no relevant-state comparison is involved since there is one initial state.
pub fn build_intra_fc(
    model: Arc<AcceleratorModel>,
    policy: InitialPolicy,
) -> Result<CheckObligation, ObligationError> {
    if model.batch_size < 2 {
        return Err(ObligationError::NotApplicable { batch_size: model.batch_size });
    }
    let name = format!("{}/intra-fc", model.name);
    Ok(CheckObligation { mode: CheckMode::IntraFc, model, policy, spec: None, name })
}

/// Single-action correctness of `lane` against `spec` over the given
/// relevant-state values; all other lanes are zero-filled.
pub fn build_sac(
    model: Arc<AcceleratorModel>,
    spec: SpecOracle,
    lane: usize,
    rel_values: Vec<Vec<u64>>,
    policy: InitialPolicy,
) -> Result<CheckObligation, ObligationError> {
    build_sac_variant(model, spec, lane, rel_values, policy, false)
}

pub fn build_sac_variant(
    model: Arc<AcceleratorModel>,
    spec: SpecOracle,
    lane: usize,
    rel_values: Vec<Vec<u64>>,
    policy: InitialPolicy,
    existential: bool,
) -> Result<CheckObligation, ObligationError> {
    if lane >= model.batch_size {
        return Err(ObligationError::LaneOutOfRange { lane, batch_size: model.batch_size });
    }
    spec.validate(&model)?;
    for v in &rel_values {
        if v.len() != model.rel_cells.len() {
            return Err(ObligationError::Spec(format!(
                "relevant tuple has {} values, model has {} relevant cells",
                v.len(),
                model.rel_cells.len()
            )));
        }
    }
    if rel_values.is_empty() && !model.rel_cells.is_empty() {
        return Err(ObligationError::Spec(
            "no relevant-state values given; pass the reachable relevant set".into(),
        ));
    }
    let rel_values = if rel_values.is_empty() { vec![vec![]] } else { rel_values };
    let name = format!("{}/sac[{lane}]", model.name);
    Ok(CheckObligation {
        mode: CheckMode::Sac { lane, rel_values, existential },
        model,
        policy,
        spec: Some(spec),
        name,
    })
}

/// Responsiveness: every policy-consistent run must reach a final state
/// within `bound` transition steps.
pub fn build_rb(
    model: Arc<AcceleratorModel>,
    bound: u64,
    policy: InitialPolicy,
) -> Result<CheckObligation, ObligationError> {
    if bound < 1 {
        return Err(ObligationError::InvalidBound);
    }
    let name = format!("{}/rb({bound})", model.name);
    Ok(CheckObligation { mode: CheckMode::Rb { bound }, model, policy, spec: None, name })
}
