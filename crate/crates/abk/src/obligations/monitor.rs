//! Concrete replay harness for consistency counterexamples.
//!
//! The monitor consumes the input and output batches of a counterexample as
//! two serial lane streams (parallel-to-serial conversion in allocation-rule
//! order, runs and batches concatenated in execution order). On the input
//! side it labels the original lane, then labels the duplicate lane only if
//! its words match the recorded original. On the output side it captures the
//! original's output and, when the duplicate's output arrives, raises
//! `fc_check` exactly when the two outputs differ. `dup_done` latches once
//! the duplicate has been compared or its slot has passed.

use super::eval::CounterexampleTrace;
use super::ObligationError;
use crate::model::AcceleratorModel;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorLog {
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitorVerdict {
    pub dup_done: bool,
    pub fc_check: bool,
    pub log: MonitorLog,
}

#[derive(Debug, Default)]
struct Monitor {
    orig_labeled: bool,
    dup_labeled: bool,
    in_ct: usize,
    out_ct: usize,
    orig_idx: usize,
    dup_idx: usize,
    orig_val: Vec<u64>,
    orig_out: Vec<u64>,
    dup_done: bool,
    fc_check: bool,
    log: MonitorLog,
}

impl Monitor {
    fn input(&mut self, words: &[u64], orig: bool, dup: bool) {
        let label_orig = orig && !self.orig_labeled;
        let matches = words == self.orig_val.as_slice();
        let label_dup = dup && !self.dup_labeled && self.orig_labeled && matches;
        if label_orig {
            self.orig_labeled = true;
            self.orig_idx = self.in_ct;
            self.orig_val = words.to_vec();
            self.log.events.push(format!("in {}: labeled orig {words:?}", self.in_ct));
        }
        if label_dup {
            self.dup_labeled = true;
            self.dup_idx = self.in_ct;
            self.log.events.push(format!("in {}: labeled dup", self.in_ct));
        }
        self.in_ct += 1;
    }

    fn output(&mut self, words: &[u64]) -> (bool, bool) {
        if self.orig_labeled && self.out_ct == self.orig_idx && !self.dup_done {
            self.orig_out = words.to_vec();
            self.log.events.push(format!("out {}: captured orig {words:?}", self.out_ct));
        }
        if self.orig_labeled && self.dup_labeled && self.out_ct == self.dup_idx && !self.dup_done {
            self.dup_done = true;
            self.fc_check = words != self.orig_out.as_slice();
            self.log.events.push(format!(
                "out {}: dup compare {words:?} vs {:?} -> fc_check={}",
                self.out_ct, self.orig_out, self.fc_check as u32
            ));
        }
        if self.out_ct > self.dup_idx {
            if !self.dup_done {
                self.log.events.push(format!("out {}: dup slot passed", self.out_ct));
            }
            self.dup_done = true;
        }
        self.out_ct += 1;
        (self.dup_done, self.fc_check)
    }
}

/// Lane-stream position of (run, batch, lane) given per-run batch counts.
fn stream_pos(runs_batches: &[usize], b: usize, run: usize, batch: usize, lane: usize) -> usize {
    let before: usize = runs_batches[..run].iter().sum::<usize>() * b;
    before + batch * b + lane
}

/// Drive the monitor over a counterexample's lane streams. The verdict's
/// `fc_check` must confirm an output-mismatch violation; disagreement is a
/// checker bug surfaced as `ReplayMismatch` by the caller.
pub fn replay_monitor(
    trace: &CounterexampleTrace,
    model: &AcceleratorModel,
) -> Result<MonitorVerdict, ObligationError> {
    if !trace.mode.is_fc_family() {
        return Err(ObligationError::ReplayMismatch(format!(
            "monitor replay applies to consistency checks, not {}",
            trace.mode.tag()
        )));
    }
    if trace.traces.len() != trace.assignment.runs.len() {
        return Err(ObligationError::ReplayMismatch(
            "counterexample has no reconstructed traces; replay it first".into(),
        ));
    }
    let b = model.batch_size;
    let runs_batches: Vec<usize> =
        trace.assignment.runs.iter().map(|r| r.batches.len()).collect();
    // the duplicate comparison targets the last batch of the last involved
    // run; the original sits at (run 0, batch i) for single-run modes and
    // (run 0, batch 0) / (run 1, batch 0) for two-run modes
    let (orig, dup) = match trace.assignment.runs.len() {
        1 => {
            let last = runs_batches[0] - 1;
            (
                (0usize, trace.assignment.batch_i, trace.assignment.lane_j),
                (0usize, last, trace.assignment.lane_jp),
            )
        }
        _ => ((0, 0, trace.assignment.lane_j), (1, 0, trace.assignment.lane_jp)),
    };
    let mut orig_pos = stream_pos(&runs_batches, b, orig.0, orig.1, orig.2);
    let mut dup_pos = stream_pos(&runs_batches, b, dup.0, dup.1, dup.2);
    if orig_pos > dup_pos {
        // the pair is symmetric (equal inputs); the monitor labels the
        // original first
        std::mem::swap(&mut orig_pos, &mut dup_pos);
    }
    if orig_pos == dup_pos {
        return Err(ObligationError::ReplayMismatch(
            "original and duplicate lanes coincide".into(),
        ));
    }

    let lane_words = |run: usize, batch: usize, lane: usize| -> Vec<u64> {
        let l = &trace.assignment.runs[run].batches[batch].lanes[lane];
        let mut words = Vec::with_capacity(model.in_size + 1);
        if model.action_count > 1 {
            words.push(l.action);
        }
        words.extend_from_slice(&l.data);
        words
    };
    let mut mon = Monitor::default();
    let mut pos = 0usize;
    for (run, &nb) in runs_batches.iter().enumerate() {
        for batch in 0..nb {
            for lane in 0..b {
                mon.input(&lane_words(run, batch, lane), pos == orig_pos, pos == dup_pos);
                pos += 1;
            }
        }
    }
    let mut verdict = (false, false);
    for (run, &nb) in runs_batches.iter().enumerate() {
        for batch in 0..nb {
            let outs = model.output_of(&trace.traces[run], batch);
            for lane in 0..b {
                verdict = mon.output(&outs[lane]);
            }
        }
    }
    Ok(MonitorVerdict { dup_done: verdict.0, fc_check: verdict.1, log: mon.log })
}
