//! Model execution and outcome classification: the reference and optimized
//! interpreters, the subprocess adapter for external engines, the
//! differential comparator and the deduplicating exception registry.
//!
//! Every trial ends in one of four statuses: model conversion failure (MCF),
//! inference failure (IF), data comparison failure (DCF) or data comparison
//! pass (DCP). Engine exceptions are data; only infrastructure problems
//! (reference faults, protocol errors, disk) surface as `Err`.

pub mod compare;
pub mod external;
pub mod optimized;
pub mod reference;
pub mod weights;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use compare::{
    compare, element_agrees, tensor_success_ratio, ComparisonReport, FailureClass,
    RELATIVE_TOLERANCE, SUCCESS_THRESHOLD,
};
pub use external::{
    read_request, write_reply_outputs, write_reply_status, write_request, EngineReply,
    EngineStatus, ExternalEngine,
};
pub use optimized::{
    parse_bug_mask, run_optimized, BugMask, EngineFailure, OptimizedOptions, OptimizedRun,
    SeededBug,
};
pub use reference::{run_reference, Fault, RunOutput};
pub use weights::synthesize_inputs;

use crate::ir::{ModelSpec, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrialStatus {
    Mcf,
    If,
    Dcf,
    Dcp,
}

impl TrialStatus {
    pub fn name(self) -> &'static str {
        match self {
            TrialStatus::Mcf => "MCF",
            TrialStatus::If => "IF",
            TrialStatus::Dcf => "DCF",
            TrialStatus::Dcp => "DCP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IfKind {
    Crash,
    Timeout,
}

impl IfKind {
    pub fn name(self) -> &'static str {
        match self {
            IfKind::Crash => "crash",
            IfKind::Timeout => "timeout",
        }
    }
}

/// Classified result of one differential trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrialOutcome {
    Dcp {
        re: f64,
    },
    Mcf {
        stage: String,
        code: i32,
        op: String,
        message: String,
    },
    If {
        kind: IfKind,
        op: String,
        message: String,
    },
    Dcf {
        per_output: Vec<f64>,
        re: f64,
        /// First operator (topological order) whose tap diverges; the
        /// failure's point of origin.
        worst_op: String,
        class: FailureClass,
    },
}

impl TrialOutcome {
    pub fn status(&self) -> TrialStatus {
        match self {
            TrialOutcome::Dcp { .. } => TrialStatus::Dcp,
            TrialOutcome::Mcf { .. } => TrialStatus::Mcf,
            TrialOutcome::If { .. } => TrialStatus::If,
            TrialOutcome::Dcf { .. } => TrialStatus::Dcf,
        }
    }

    pub fn is_exception(&self) -> bool {
        !matches!(self, TrialOutcome::Dcp { .. })
    }

    /// Canonical exception identity. Conversion failures collapse on
    /// (stage, code, operator); comparison failures on the failure signature
    /// (comparison class + diverging operator). Passes have no key.
    pub fn dedup_key(&self) -> Option<String> {
        match self {
            TrialOutcome::Dcp { .. } => None,
            TrialOutcome::Mcf {
                stage, code, op, ..
            } => Some(format!("MCF|{stage}|{code}|{op}")),
            TrialOutcome::If { kind, op, .. } => Some(format!("IF|{}|{op}", kind.name())),
            TrialOutcome::Dcf {
                worst_op, class, ..
            } => Some(format!("DCF|{}|{worst_op}", class.name())),
        }
    }
}

// ---------------------------------------------------------------------------
// Dedup registry

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub status: TrialStatus,
    pub count: u64,
    pub first_model: String,
    pub detail: String,
}

/// Exception registry: dedup key -> first occurrence plus a count, with raw
/// per-status totals so results report as deduplicated/total pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupRegistry {
    pub entries: BTreeMap<String, RegistryEntry>,
    pub raw_counts: BTreeMap<String, u64>,
}

impl DedupRegistry {
    pub fn new() -> DedupRegistry {
        DedupRegistry::default()
    }

    /// Records one outcome. Returns true when this is a previously unseen
    /// exception (the search reward signal).
    pub fn observe(&mut self, outcome: &TrialOutcome, model_ref: &str) -> bool {
        *self
            .raw_counts
            .entry(outcome.status().name().to_string())
            .or_insert(0) += 1;
        let Some(key) = outcome.dedup_key() else {
            return false;
        };
        match self.entries.get_mut(&key) {
            Some(entry) => {
                entry.count += 1;
                false
            }
            None => {
                self.entries.insert(
                    key,
                    RegistryEntry {
                        status: outcome.status(),
                        count: 1,
                        first_model: model_ref.to_string(),
                        detail: format!("{outcome:?}"),
                    },
                );
                true
            }
        }
    }

    pub fn deduplicated_total(&self) -> usize {
        self.entries.len()
    }

    pub fn raw_exception_total(&self) -> u64 {
        self.raw_counts
            .iter()
            .filter(|(k, _)| k.as_str() != "DCP")
            .map(|(_, v)| v)
            .sum()
    }

    pub fn count_for_status(&self, status: TrialStatus) -> (usize, u64) {
        let dedup = self
            .entries
            .values()
            .filter(|e| e.status == status)
            .count();
        let raw = self
            .raw_counts
            .get(status.name())
            .copied()
            .unwrap_or(0);
        (dedup, raw)
    }
}

/// Accumulates a stream of outcomes into a fresh registry.
pub fn classify_and_dedup<'a, I>(outcomes: I) -> DedupRegistry
where
    I: IntoIterator<Item = (&'a TrialOutcome, &'a str)>,
{
    let mut registry = DedupRegistry::new();
    for (outcome, model_ref) in outcomes {
        registry.observe(outcome, model_ref);
    }
    registry
}

// ---------------------------------------------------------------------------
// Trial driver

/// The engine under test, run against the reference interpreter.
pub enum Backend {
    Optimized(OptimizedOptions),
    External(ExternalEngine),
}

#[derive(Debug, thiserror::Error)]
pub enum InfraError {
    #[error("reference interpreter fault (generation bug, not an engine exception): {0}")]
    Reference(#[from] Fault),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("external engine protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub outcome: TrialOutcome,
    /// Seeded defects the optimized backend actually triggered (test
    /// instrumentation; empty for external backends).
    pub fired: BTreeSet<SeededBug>,
}

pub fn run_trial(model: &ModelSpec, backend: &Backend) -> Result<TrialRecord, InfraError> {
    let inputs = synthesize_inputs(model);
    let reference = run_reference(model, &inputs)?;

    match backend {
        Backend::Optimized(opts) => {
            let (result, fired) = run_optimized(model, &inputs, opts);
            let outcome = match result {
                Ok(run) => differential_outcome(
                    model,
                    &reference,
                    &run.outputs,
                    Some(&run.taps),
                ),
                Err(EngineFailure::Convert { code, op, message }) => TrialOutcome::Mcf {
                    stage: "convert".to_string(),
                    code,
                    op,
                    message,
                },
                Err(EngineFailure::Infer { op, message }) => TrialOutcome::If {
                    kind: IfKind::Crash,
                    op,
                    message,
                },
            };
            Ok(TrialRecord { outcome, fired })
        }
        Backend::External(engine) => {
            let reply = engine.run(model, &inputs)?;
            let outcome = match reply {
                EngineReply::Outputs(outputs) => {
                    differential_outcome(model, &reference, &outputs, None)
                }
                EngineReply::ConvertFail { code, op, message } => TrialOutcome::Mcf {
                    stage: "convert".to_string(),
                    code,
                    op,
                    message,
                },
                EngineReply::InferCrash { op, message } => TrialOutcome::If {
                    kind: IfKind::Crash,
                    op,
                    message,
                },
                EngineReply::Timeout => TrialOutcome::If {
                    kind: IfKind::Timeout,
                    op: String::new(),
                    message: "engine exceeded its deadline".to_string(),
                },
            };
            Ok(TrialRecord {
                outcome,
                fired: BTreeSet::new(),
            })
        }
    }
}

/// Compares graph outputs; on failure, attributes the divergence to the
/// earliest diverging tap when per-node taps are available, else to the
/// producer of the worst output.
pub fn differential_outcome(
    model: &ModelSpec,
    reference: &RunOutput,
    test_outputs: &[Tensor],
    test_taps: Option<&BTreeMap<NodeId, Tensor>>,
) -> TrialOutcome {
    let report = compare(&reference.outputs, test_outputs);
    if report.pass {
        return TrialOutcome::Dcp { re: report.re };
    }

    let located = test_taps.and_then(|taps| {
        let order = model.topo_order().ok()?;
        for id in order {
            let (Some(a), Some(b)) = (reference.taps.get(&id), taps.get(&id)) else {
                continue;
            };
            let (ratio, class) = tensor_success_ratio(a, b);
            if ratio < SUCCESS_THRESHOLD {
                let op = model.node(id).map(|n| n.op.clone())?;
                return Some((op, class.unwrap_or(FailureClass::Numeric)));
            }
        }
        None
    });

    let (worst_op, class) = located.unwrap_or_else(|| {
        let sinks = model.sink_ids();
        let worst_idx = report
            .per_output
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let op = sinks
            .get(worst_idx)
            .and_then(|id| model.node(*id))
            .map(|n| n.op.clone())
            .unwrap_or_default();
        let class = sinks
            .get(worst_idx)
            .and_then(|_| {
                reference
                    .outputs
                    .get(worst_idx)
                    .zip(test_outputs.get(worst_idx))
            })
            .and_then(|(a, b)| tensor_success_ratio(a, b).1)
            .unwrap_or(FailureClass::Numeric);
        (op, class)
    });

    TrialOutcome::Dcf {
        per_output: report.per_output,
        re: report.re,
        worst_op,
        class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mcf(code: i32, op: &str) -> TrialOutcome {
        TrialOutcome::Mcf {
            stage: "convert".into(),
            code,
            op: op.into(),
            message: String::new(),
        }
    }

    #[test]
    fn same_key_collapses() {
        let mut registry = DedupRegistry::new();
        for i in 0..50 {
            let fresh = registry.observe(&mcf(108, "Conv2d"), &format!("m{i}"));
            assert_eq!(fresh, i == 0);
        }
        assert_eq!(registry.deduplicated_total(), 1);
        assert_eq!(registry.entries.values().next().unwrap().count, 50);
        assert_eq!(registry.raw_exception_total(), 50);
    }

    #[test]
    fn different_operator_is_a_different_entry() {
        let mut registry = DedupRegistry::new();
        registry.observe(&mcf(108, "Conv2d"), "a");
        registry.observe(&mcf(108, "Slice"), "b");
        assert_eq!(registry.deduplicated_total(), 2);
    }

    #[test]
    fn passes_leave_the_registry_unchanged() {
        let mut registry = DedupRegistry::new();
        assert!(!registry.observe(&TrialOutcome::Dcp { re: 1.0 }, "a"));
        assert_eq!(registry.deduplicated_total(), 0);
        assert_eq!(registry.raw_counts["DCP"], 1);
    }

    #[test]
    fn dcf_key_uses_class_and_operator() {
        let outcome = TrialOutcome::Dcf {
            per_output: vec![0.5],
            re: 0.5,
            worst_op: "Cast".into(),
            class: FailureClass::Numeric,
        };
        assert_eq!(outcome.dedup_key().unwrap(), "DCF|numeric|Cast");
    }
}
