//! Shapes-and-parameters calculation: forward shape/dtype inference, the
//! SAME-preserving constraint solver for padded operators, and the adapter
//! pass that makes aggregation operands agree before execution.

mod adapt;
mod infer;
mod solve;

pub use adapt::{insert_aggregation_adapters, merge_pads, AdapterError};
pub use infer::{conv_out_dim, infer_shapes, requires_f32, TensorMeta};
pub use solve::{
    assign_params, enumerate_axis_solutions, lenient_shapes, sample_domain, sample_input_shape,
    solve_same_shape_params, AxisSolution, ShapeDomain, SolverConfig,
};

use crate::ir::NodeId;

#[derive(Debug, thiserror::Error)]
pub enum ShapeError {
    #[error("node {node} ({op}): {reason}; operands {operands:?}")]
    Inference {
        node: NodeId,
        op: String,
        reason: String,
        operands: Vec<Vec<i64>>,
    },
    #[error("node {node} ({op}): missing or ill-typed param {param}")]
    BadParam {
        node: NodeId,
        op: String,
        param: String,
    },
    #[error("node {node}: operator {op} is not executable by the built-in backends")]
    ForeignOperator { node: NodeId, op: String },
    #[error("no SAME-preserving parameters for {op} on {shape:?} under the configured caps")]
    Unsatisfiable { op: String, shape: Vec<i64> },
    #[error(transparent)]
    Model(#[from] crate::ir::ModelError),
}
