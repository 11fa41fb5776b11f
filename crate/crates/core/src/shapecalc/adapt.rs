//! Operand adaptation: inserts Cast/Slice/Pad chains in front of multi-input
//! aggregations whose operands disagree in dtype or shape, and casts operands
//! of float-only operators. A separate pass folds explicit zero-pads into a
//! following convolution's own padding.

use std::collections::BTreeMap;

use crate::ir::{ModelNode, ModelSpec, NodeId, Op, ParamValue, Params};
use crate::shapecalc::infer::{requires_f32, TensorMeta};
use crate::shapecalc::solve::lenient_node_meta;
use crate::shapecalc::ShapeError;
use crate::tensor::DType;

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("node {node}: cannot equalize operands of differing rank")]
    RankMismatch { node: NodeId },
    #[error("node {node}: concat axis {axis} out of range")]
    BadAxis { node: NodeId, axis: i64 },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

struct Adapter<'a> {
    nodes: Vec<ModelNode>,
    metas: BTreeMap<NodeId, TensorMeta>,
    next_id: NodeId,
    placeholder_shape: BTreeMap<NodeId, &'a Vec<i64>>,
    inserted: usize,
}

impl<'a> Adapter<'a> {
    fn push(&mut self, op: &str, input: (NodeId, u32), params: Params, meta: TensorMeta) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.push(ModelNode {
            id,
            op: op.to_string(),
            params,
            inputs: vec![input],
        });
        self.metas.insert(id, meta);
        self.inserted += 1;
        id
    }

    /// Chain of Cast/Slice/Pad turning `src` (with `meta`) into `want_dtype`
    /// plus `want_dims` on every dim where `want_dims[d]` is `Some`.
    fn equalize(
        &mut self,
        src: (NodeId, u32),
        meta: &TensorMeta,
        want_dtype: DType,
        want_dims: &[Option<i64>],
    ) -> (NodeId, u32) {
        let mut cur = src;
        let mut cur_meta = meta.clone();

        if cur_meta.dtype != want_dtype {
            let mut params = Params::new();
            params.insert(
                "dtype".into(),
                ParamValue::Str(want_dtype.name().to_string()),
            );
            let id = self.push(
                "Cast",
                cur,
                params,
                TensorMeta {
                    shape: cur_meta.shape.clone(),
                    dtype: want_dtype,
                },
            );
            cur = (id, 0);
            cur_meta.dtype = want_dtype;
        }

        let needs_slice = cur_meta
            .shape
            .iter()
            .zip(want_dims)
            .any(|(&have, want)| matches!(want, Some(w) if have > *w));
        if needs_slice {
            let size: Vec<i64> = cur_meta
                .shape
                .iter()
                .zip(want_dims)
                .map(|(&have, want)| match want {
                    Some(w) => have.min(*w),
                    None => have,
                })
                .collect();
            let mut params = Params::new();
            params.insert(
                "begin".into(),
                ParamValue::IntList(vec![0; cur_meta.shape.len()]),
            );
            params.insert("size".into(), ParamValue::IntList(size.clone()));
            let id = self.push(
                "Slice",
                cur,
                params,
                TensorMeta {
                    shape: size.clone(),
                    dtype: cur_meta.dtype,
                },
            );
            cur = (id, 0);
            cur_meta.shape = size;
        }

        let needs_pad = cur_meta
            .shape
            .iter()
            .zip(want_dims)
            .any(|(&have, want)| matches!(want, Some(w) if have < *w));
        if needs_pad {
            let mut paddings = vec![0i64; 2 * cur_meta.shape.len()];
            let mut out_shape = cur_meta.shape.clone();
            for (d, (&have, want)) in cur_meta.shape.iter().zip(want_dims).enumerate() {
                if let Some(w) = want {
                    if have < *w {
                        paddings[2 * d + 1] = w - have;
                        out_shape[d] = *w;
                    }
                }
            }
            let mut params = Params::new();
            params.insert("paddings".into(), ParamValue::IntList(paddings));
            let id = self.push(
                "Pad",
                cur,
                params,
                TensorMeta {
                    shape: out_shape,
                    dtype: cur_meta.dtype,
                },
            );
            cur = (id, 0);
        }

        cur
    }
}

/// Inserts adapter chains so every aggregation's operands agree and every
/// float-only operator sees f32. Models with no mismatches come back with
/// zero new nodes, so the pass is idempotent.
pub fn insert_aggregation_adapters(model: &ModelSpec) -> Result<ModelSpec, AdapterError> {
    let order = model.topo_order().map_err(ShapeError::Model)?;
    let next_id = model.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0);
    let mut state = Adapter {
        nodes: Vec::new(),
        metas: BTreeMap::new(),
        next_id,
        placeholder_shape: model
            .placeholder_ids()
            .into_iter()
            .zip(model.inputs.iter())
            .collect(),
        inserted: 0,
    };
    let mut rewritten: BTreeMap<NodeId, ModelNode> = BTreeMap::new();

    for id in order {
        let mut node = model.node(id).expect("topo order yields known nodes").clone();
        let input_metas: Vec<TensorMeta> = node
            .inputs
            .iter()
            .map(|(src, _)| state.metas[src].clone())
            .collect();
        let op = Op::from_name(&node.op);

        if let Some(op) = op {
            if op.is_aggregation() && !node.inputs.is_empty() {
                let first = input_metas[0].clone();
                if input_metas.iter().any(|m| m.shape.len() != first.shape.len()) {
                    return Err(AdapterError::RankMismatch { node: id });
                }
                let axis = if op == Op::Concat {
                    let axis = node
                        .params
                        .get("axis")
                        .and_then(|v| v.as_int())
                        .unwrap_or(-1);
                    if axis < 0 || axis as usize >= first.shape.len() {
                        return Err(AdapterError::BadAxis { node: id, axis });
                    }
                    Some(axis as usize)
                } else {
                    None
                };
                let want_dims: Vec<Option<i64>> = first
                    .shape
                    .iter()
                    .enumerate()
                    .map(|(d, &dim)| if Some(d) == axis { None } else { Some(dim) })
                    .collect();
                for slot in 1..node.inputs.len() {
                    let meta = &input_metas[slot];
                    let matches_target = meta.dtype == first.dtype
                        && meta
                            .shape
                            .iter()
                            .zip(&want_dims)
                            .all(|(&have, want)| want.map(|w| have == w).unwrap_or(true));
                    if !matches_target {
                        node.inputs[slot] = state.equalize(
                            node.inputs[slot],
                            meta,
                            first.dtype,
                            &want_dims,
                        );
                    }
                }
            } else if requires_f32(op) {
                for slot in 0..node.inputs.len() {
                    if input_metas[slot].dtype != DType::F32 {
                        let free: Vec<Option<i64>> = vec![None; input_metas[slot].shape.len()];
                        node.inputs[slot] =
                            state.equalize(node.inputs[slot], &input_metas[slot], DType::F32, &free);
                    }
                }
            }
        }

        let final_metas: Vec<TensorMeta> = node
            .inputs
            .iter()
            .map(|(src, _)| state.metas[src].clone())
            .collect();
        let meta = lenient_node_meta(&node, &final_metas, &state.placeholder_shape)?;
        state.metas.insert(id, meta);
        rewritten.insert(id, node);
    }

    let mut nodes: Vec<ModelNode> = rewritten.into_values().collect();
    nodes.extend(state.nodes);
    nodes.sort_by_key(|n| n.id);
    Ok(ModelSpec {
        nodes,
        inputs: model.inputs.clone(),
        weights_seed: model.weights_seed,
    })
}

/// Folds Pad nodes into a directly following convolution when the pad is
/// symmetric on H/W and zero elsewhere. Pooling is left alone: its padding
/// is value-excluded, so folding a real zero-pad would change results.
pub fn merge_pads(model: &ModelSpec) -> ModelSpec {
    let mut model = model.clone();
    loop {
        let mut merged = false;
        let pads: Vec<NodeId> = model
            .nodes
            .iter()
            .filter(|n| n.op == "Pad")
            .map(|n| n.id)
            .collect();
        for pad_id in pads {
            let consumers = model.consumers(pad_id);
            let [(consumer_id, slot)] = consumers.as_slice() else {
                continue;
            };
            let consumer = model.node(*consumer_id).unwrap();
            if !matches!(consumer.op.as_str(), "Conv2d" | "DepthwiseConv2d") {
                continue;
            }
            let pad_node = model.node(pad_id).unwrap();
            let Some(paddings) = pad_node.params.get("paddings").and_then(|v| v.as_int_list())
            else {
                continue;
            };
            if paddings.len() != 8 {
                continue;
            }
            let (bn, an, bh, ah, bw, aw, bc, ac) = (
                paddings[0], paddings[1], paddings[2], paddings[3], paddings[4], paddings[5],
                paddings[6], paddings[7],
            );
            if bn != 0 || an != 0 || bc != 0 || ac != 0 || bh != ah || bw != aw {
                continue;
            }
            let pad_input = pad_node.inputs[0];
            let slot = *slot as usize;
            let consumer_id = *consumer_id;
            {
                let c = model
                    .nodes
                    .iter_mut()
                    .find(|n| n.id == consumer_id)
                    .unwrap();
                let bump = |params: &mut Params, key: &str, delta: i64| {
                    let old = params.get(key).and_then(|v| v.as_int()).unwrap_or(0);
                    params.insert(key.to_string(), ParamValue::Int(old + delta));
                };
                bump(&mut c.params, "pad_h", bh);
                bump(&mut c.params, "pad_w", bw);
                c.inputs[slot] = pad_input;
            }
            model.nodes.retain(|n| n.id != pad_id);
            merged = true;
            break;
        }
        if !merged {
            return model;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{node, node_with_params, ModelSpec};
    use crate::shapecalc::infer::infer_shapes;

    fn const_node(id: NodeId, shape: &[i64]) -> ModelNode {
        node_with_params(
            id,
            "Const",
            &[],
            &[("shape", ParamValue::IntList(shape.to_vec()))],
        )
    }

    #[test]
    fn matched_add_needs_no_adapter() {
        let model = ModelSpec {
            nodes: vec![
                const_node(0, &[1, 8, 8, 3]),
                const_node(1, &[1, 8, 8, 3]),
                node(2, "Add", &[0, 1]),
            ],
            inputs: vec![],
            weights_seed: 0,
        };
        let adapted = insert_aggregation_adapters(&model).unwrap();
        assert_eq!(adapted.nodes.len(), model.nodes.len());
        assert_eq!(adapted, model);
    }

    #[test]
    fn concat_mismatch_gets_a_slice() {
        let model = ModelSpec {
            nodes: vec![
                const_node(0, &[1, 8, 8, 3]),
                const_node(1, &[1, 16, 8, 3]),
                node_with_params(2, "Concat", &[0, 1], &[("axis", ParamValue::Int(3))]),
            ],
            inputs: vec![],
            weights_seed: 0,
        };
        assert!(infer_shapes(&model).is_err());
        let adapted = insert_aggregation_adapters(&model).unwrap();
        let slices: Vec<&ModelNode> =
            adapted.nodes.iter().filter(|n| n.op == "Slice").collect();
        assert_eq!(slices.len(), 1);
        assert_eq!(
            slices[0].params["size"].as_int_list().unwrap(),
            &[1, 8, 8, 3]
        );
        let metas = infer_shapes(&adapted).unwrap();
        assert_eq!(metas[&2].shape, vec![1, 8, 8, 6]);
    }

    #[test]
    fn adapter_insertion_is_idempotent() {
        let model = ModelSpec {
            nodes: vec![
                const_node(0, &[1, 8, 8, 3]),
                const_node(1, &[1, 4, 16, 3]),
                node(2, "Mul", &[0, 1]),
            ],
            inputs: vec![],
            weights_seed: 0,
        };
        let once = insert_aggregation_adapters(&model).unwrap();
        let twice = insert_aggregation_adapters(&once).unwrap();
        assert_eq!(once, twice);
        infer_shapes(&twice).unwrap();
    }

    #[test]
    fn dtype_mismatch_gets_a_cast() {
        let model = ModelSpec {
            nodes: vec![
                const_node(0, &[1, 4, 4, 2]),
                const_node(1, &[1, 4, 4, 2]),
                node_with_params(2, "Cast", &[1], &[("dtype", ParamValue::Str("i32".into()))]),
                node(3, "Add", &[0, 2]),
            ],
            inputs: vec![],
            weights_seed: 0,
        };
        let adapted = insert_aggregation_adapters(&model).unwrap();
        let casts = adapted.nodes.iter().filter(|n| n.op == "Cast").count();
        assert_eq!(casts, 2);
        infer_shapes(&adapted).unwrap();
    }

    #[test]
    fn float_only_consumers_are_cast_back() {
        let model = ModelSpec {
            nodes: vec![
                const_node(0, &[1, 4, 4, 2]),
                node_with_params(1, "Cast", &[0], &[("dtype", ParamValue::Str("i8".into()))]),
                node(2, "Sigmoid", &[1]),
            ],
            inputs: vec![],
            weights_seed: 0,
        };
        assert!(infer_shapes(&model).is_err());
        let adapted = insert_aggregation_adapters(&model).unwrap();
        infer_shapes(&adapted).unwrap();
    }

    #[test]
    fn pad_merges_into_conv() {
        let model = ModelSpec {
            nodes: vec![
                node(0, "Placeholder", &[]),
                node_with_params(
                    1,
                    "Pad",
                    &[0],
                    &[("paddings", ParamValue::IntList(vec![0, 0, 1, 1, 1, 1, 0, 0]))],
                ),
                node_with_params(
                    2,
                    "Conv2d",
                    &[1],
                    &[
                        ("out_channels", ParamValue::Int(4)),
                        ("filter_h", ParamValue::Int(3)),
                        ("filter_w", ParamValue::Int(3)),
                        ("stride_h", ParamValue::Int(1)),
                        ("stride_w", ParamValue::Int(1)),
                        ("dilation_h", ParamValue::Int(1)),
                        ("dilation_w", ParamValue::Int(1)),
                        ("pad_h", ParamValue::Int(1)),
                        ("pad_w", ParamValue::Int(1)),
                    ],
                ),
            ],
            inputs: vec![vec![1, 8, 8, 3]],
            weights_seed: 0,
        };
        let before = infer_shapes(&model).unwrap();
        let merged = merge_pads(&model);
        assert!(merged.nodes.iter().all(|n| n.op != "Pad"));
        let conv = merged.node(2).unwrap();
        assert_eq!(conv.params["pad_h"].as_int(), Some(2));
        assert_eq!(conv.inputs[0], (0, 0));
        let after = infer_shapes(&merged).unwrap();
        assert_eq!(before[&2], after[&2]);
        // Re-running changes nothing further.
        assert_eq!(merge_pads(&merged), merged);
    }

    #[test]
    fn asymmetric_pad_is_not_merged() {
        let model = ModelSpec {
            nodes: vec![
                node(0, "Placeholder", &[]),
                node_with_params(
                    1,
                    "Pad",
                    &[0],
                    &[("paddings", ParamValue::IntList(vec![0, 0, 1, 2, 0, 0, 0, 0]))],
                ),
                node(2, "Relu", &[1]),
            ],
            inputs: vec![vec![1, 8, 8, 3]],
            weights_seed: 0,
        };
        let merged = merge_pads(&model);
        assert_eq!(merged, model);
    }
}
