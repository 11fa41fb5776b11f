//! Weight, bias, const and input synthesis. Every backend regenerates
//! identical data from the model file alone: values come from the splitmix
//! stream keyed by `(weights_seed, node id, role, ordinal)` and are uniform
//! in [-1, 1] for floats.

use crate::ir::{ModelSpec, NodeId};
use crate::rng::tensor_rng;
use crate::tensor::{numel, DType, Tensor, TensorData};

pub const ROLE_INPUT: u32 = 0;
pub const ROLE_FILTER: u32 = 1;
pub const ROLE_BIAS: u32 = 2;
pub const ROLE_CONST: u32 = 3;

pub fn synth_tensor(seed: u64, node: NodeId, role: u32, index: u32, shape: &[i64], dtype: DType) -> Tensor {
    let mut rng = tensor_rng(seed, node, role, index);
    let n = numel(shape);
    let data = match dtype {
        DType::F32 => TensorData::F32((0..n).map(|_| rng.signed_unit_f32()).collect()),
        DType::I32 => TensorData::I32((0..n).map(|_| rng.int_in(-8, 8) as i32).collect()),
        DType::I8 => TensorData::I8((0..n).map(|_| rng.int_in(-8, 8) as i8).collect()),
    };
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Graph input tensors in placeholder order.
pub fn synthesize_inputs(model: &ModelSpec) -> Vec<Tensor> {
    model
        .placeholder_ids()
        .iter()
        .zip(model.inputs.iter())
        .enumerate()
        .map(|(i, (&id, shape))| {
            synth_tensor(model.weights_seed, id, ROLE_INPUT, i as u32, shape, DType::F32)
        })
        .collect()
}

pub fn filter_tensor(seed: u64, node: NodeId, shape: &[i64]) -> Tensor {
    synth_tensor(seed, node, ROLE_FILTER, 0, shape, DType::F32)
}

pub fn bias_tensor(seed: u64, node: NodeId, channels: i64) -> Tensor {
    synth_tensor(seed, node, ROLE_BIAS, 0, &[channels], DType::F32)
}

pub fn const_tensor(seed: u64, node: NodeId, shape: &[i64], dtype: DType) -> Tensor {
    synth_tensor(seed, node, ROLE_CONST, 0, shape, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_is_deterministic_per_key() {
        let a = filter_tensor(7, 3, &[3, 3, 2, 4]);
        let b = filter_tensor(7, 3, &[3, 3, 2, 4]);
        assert_eq!(a, b);
        let c = filter_tensor(7, 4, &[3, 3, 2, 4]);
        assert_ne!(a, c);
    }

    #[test]
    fn float_values_are_in_range() {
        let t = const_tensor(1, 0, &[1, 8, 8, 3], DType::F32);
        for &v in t.as_f32().unwrap() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }
}
