//! Reference functions for single-action checks: an executable ABK snippet
//! or a host callback, both mapping (action, data, relevant state) to an
//! expected output element.

use super::ObligationError;
use crate::frontend::compile::{unroll_and_ssa, CompileOptions};
use crate::frontend::interp;
use crate::model::AcceleratorModel;
use crate::ssa::{CellId, CellName, SsaProgram};
use std::fmt;
use std::sync::Arc;

/// A spec written in ABK. Conventions: `d[IN_SIZE]` holds the lane data,
/// optional scalar `act` the action, declarations named like the model's
/// relevant variables hold the relevant state, and `o[OUT_SIZE]` receives
/// the expected output element.
#[derive(Debug, Clone)]
pub struct SpecProgram {
    pub name: String,
    pub ssa: SsaProgram,
    pub act_cell: Option<CellId>,
    pub data_cells: Vec<CellId>,
    /// Rendered cell name -> spec cell, matched against the model's relevant
    /// cell names.
    pub rel_cells: Vec<(String, CellId)>,
    pub out_cells: Vec<CellId>,
}

type HostFn = dyn Fn(u64, &[u64], &[u64]) -> Vec<u64> + Send + Sync;

/// A spec supplied by the embedding program. The callback receives
/// (action, lane data, relevant values in model relevant-cell order).
pub struct HostSpec {
    pub name: String,
    pub f: Box<HostFn>,
}

impl fmt::Debug for HostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HostSpec({})", self.name)
    }
}

#[derive(Debug, Clone)]
pub enum SpecOracle {
    Abk(Arc<SpecProgram>),
    Host(Arc<HostSpec>),
}

impl SpecOracle {
    pub fn name(&self) -> &str {
        match self {
            SpecOracle::Abk(p) => &p.name,
            SpecOracle::Host(h) => &h.name,
        }
    }

    pub fn host(
        name: impl Into<String>,
        f: impl Fn(u64, &[u64], &[u64]) -> Vec<u64> + Send + Sync + 'static,
    ) -> Self {
        SpecOracle::Host(Arc::new(HostSpec { name: name.into(), f: Box::new(f) }))
    }

    /// Check the oracle is total on the model's query domain.
    pub fn validate(&self, model: &AcceleratorModel) -> Result<(), ObligationError> {
        match self {
            SpecOracle::Host(_) => Ok(()),
            SpecOracle::Abk(p) => {
                if p.data_cells.len() != model.in_size {
                    return Err(ObligationError::Spec(format!(
                        "spec d[] has {} words, model lanes have {}",
                        p.data_cells.len(),
                        model.in_size
                    )));
                }
                if p.out_cells.len() != model.out_size {
                    return Err(ObligationError::Spec(format!(
                        "spec o[] has {} words, model outputs have {}",
                        p.out_cells.len(),
                        model.out_size
                    )));
                }
                if model.action_count > 1 && p.act_cell.is_none() {
                    return Err(ObligationError::Spec(
                        "model has several actions but the spec declares no act scalar".into(),
                    ));
                }
                let model_rel: Vec<String> =
                    model.rel_cells.iter().map(|&c| model.cells.name(c)).collect();
                for (n, _) in &p.rel_cells {
                    if !model_rel.contains(n) {
                        return Err(ObligationError::Spec(format!(
                            "spec names unknown relevant variable {n}"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Expected output element for one (action, data, rel) query.
    pub fn eval(
        &self,
        model: &AcceleratorModel,
        action: u64,
        data: &[u64],
        rel: &[u64],
    ) -> Result<Vec<u64>, ObligationError> {
        match self {
            SpecOracle::Host(h) => {
                let out = (h.f)(action, data, rel);
                if out.len() != model.out_size {
                    return Err(ObligationError::Spec(format!(
                        "host spec returned {} words, expected {}",
                        out.len(),
                        model.out_size
                    )));
                }
                Ok(out
                    .into_iter()
                    .map(|v| v & crate::ssa::mask(model.output_width))
                    .collect())
            }
            SpecOracle::Abk(p) => {
                let mut mem = vec![0u64; p.ssa.cells.len()];
                if let Some(c) = p.act_cell {
                    mem[c.idx()] = action;
                }
                for (&c, &v) in p.data_cells.iter().zip(data) {
                    mem[c.idx()] = v & crate::ssa::mask(p.ssa.cells.width(c));
                }
                let model_rel_names: Vec<String> =
                    model.rel_cells.iter().map(|&c| model.cells.name(c)).collect();
                for (n, c) in &p.rel_cells {
                    if let Some(i) = model_rel_names.iter().position(|m| m == n) {
                        mem[c.idx()] = rel[i] & crate::ssa::mask(p.ssa.cells.width(*c));
                    }
                }
                interp::interpret_ssa(&p.ssa, &mut mem, 1 << 20)
                    .map_err(|e| ObligationError::Spec(e.to_string()))?;
                Ok(p.out_cells.iter().map(|c| mem[c.idx()]).collect())
            }
        }
    }
}

/// Compile ABK source into a spec program (see [`SpecProgram`] conventions).
pub fn compile_spec_program(src: &str, name: &str) -> Result<SpecProgram, ObligationError> {
    let prog = crate::frontend::parse(src, name).map_err(|e| ObligationError::Spec(e.to_string()))?;
    let ssa = unroll_and_ssa(&prog, &CompileOptions::default())
        .map_err(|e| ObligationError::Spec(e.to_string()))?;
    let scalar = |n: &str| -> Option<CellId> {
        ssa.cells
            .cells
            .iter()
            .position(|c| matches!(&c.name, CellName::Scalar(s) if **s == *n))
            .map(|i| CellId(i as u32))
    };
    let array_cells = |n: &str| -> Vec<CellId> {
        ssa.arrays
            .iter()
            .find(|a| &*a.name == n)
            .map(|a| (0..a.len).map(|i| CellId(a.base.0 + i)).collect())
            .unwrap_or_default()
    };
    let data_cells = array_cells("d");
    if data_cells.is_empty() {
        return Err(ObligationError::Spec("spec declares no d[] input array".into()));
    }
    let out_cells = array_cells("o");
    if out_cells.is_empty() {
        return Err(ObligationError::Spec("spec declares no o[] output array".into()));
    }
    let mut rel_cells = Vec::new();
    for d in &prog.decls {
        if d.name == "d" || d.name == "o" || d.name == "act" {
            continue;
        }
        match d.kind {
            crate::frontend::ast::DeclKind::Scalar => {
                rel_cells.push((d.name.clone(), scalar(&d.name).unwrap()));
            }
            crate::frontend::ast::DeclKind::Array { len } => {
                let cells = array_cells(&d.name);
                for i in 0..len {
                    rel_cells.push((format!("{}[{i}]", d.name), cells[i as usize]));
                }
            }
        }
    }
    let act_cell = scalar("act");
    Ok(SpecProgram { name: name.to_string(), ssa, act_cell, data_cells, rel_cells, out_cells })
}
