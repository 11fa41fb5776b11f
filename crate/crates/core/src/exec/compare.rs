//! Differential comparator. An element agrees when its relative error is
//! within 0.1%; an output passes when at least 99.9% of its elements agree;
//! a trial passes when every output passes.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const RELATIVE_TOLERANCE: f64 = 1e-3;
pub const SUCCESS_THRESHOLD: f64 = 0.999;
const EPS: f64 = 1e-6;

/// How a failing comparison failed. Value-level disagreements (including
/// infinities of the wrong sign or magnitude) are `Numeric`; `NanMismatch`
/// marks NaN on exactly one side; `ShapeMismatch` is tensor-level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureClass {
    ShapeMismatch,
    NanMismatch,
    Numeric,
}

impl FailureClass {
    pub fn name(self) -> &'static str {
        match self {
            FailureClass::ShapeMismatch => "shape",
            FailureClass::NanMismatch => "nan",
            FailureClass::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Success ratio per output.
    pub per_output: Vec<f64>,
    /// Minimum over outputs; the trial-level RE value.
    pub re: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// NaN on both sides agrees; NaN against anything else fails. Infinities
/// agree only with the same-signed infinity. Finite values use relative
/// error against the reference magnitude.
pub fn element_agrees(reference: f64, test: f64) -> bool {
    match (reference.is_nan(), test.is_nan()) {
        (true, true) => return true,
        (true, false) | (false, true) => return false,
        _ => {}
    }
    if reference.is_infinite() || test.is_infinite() {
        return reference == test;
    }
    let err = (reference - test).abs() / reference.abs().max(EPS);
    err <= RELATIVE_TOLERANCE
}

/// Success ratio of one output pair plus the majority failure class among
/// its failing elements (`None` when everything agrees). Majority voting
/// keeps one defect from flipping between classes because a handful of
/// special values sit in the diverging region.
pub fn tensor_success_ratio(reference: &Tensor, test: &Tensor) -> (f64, Option<FailureClass>) {
    if reference.shape != test.shape {
        return (0.0, Some(FailureClass::ShapeMismatch));
    }
    let n = reference.len();
    if n == 0 {
        return (1.0, None);
    }
    let mut ok = 0usize;
    let mut nan_fails = 0usize;
    let mut numeric_fails = 0usize;
    for i in 0..n {
        let a = reference.value_at(i);
        let b = test.value_at(i);
        if element_agrees(a, b) {
            ok += 1;
        } else if a.is_nan() != b.is_nan() {
            nan_fails += 1;
        } else {
            numeric_fails += 1;
        }
    }
    let class = if nan_fails + numeric_fails == 0 {
        None
    } else if nan_fails > numeric_fails {
        Some(FailureClass::NanMismatch)
    } else {
        Some(FailureClass::Numeric)
    };
    (ok as f64 / n as f64, class)
}

pub fn compare(reference: &[Tensor], test: &[Tensor]) -> ComparisonReport {
    if reference.len() != test.len() {
        return ComparisonReport {
            per_output: vec![0.0; reference.len().max(1)],
            re: 0.0,
            threshold: SUCCESS_THRESHOLD,
            pass: false,
        };
    }
    let per_output: Vec<f64> = reference
        .iter()
        .zip(test)
        .map(|(a, b)| tensor_success_ratio(a, b).0)
        .collect();
    let re = per_output.iter().copied().fold(1.0f64, f64::min);
    ComparisonReport {
        per_output,
        re,
        threshold: SUCCESS_THRESHOLD,
        pass: re >= SUCCESS_THRESHOLD,
    }
}
