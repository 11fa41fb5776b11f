//! Executable model description and its canonical serialized form. The model
//! file is the unit test input: operator-level nodes with concrete
//! parameters, graph input shapes and the seed all weight/input data is
//! regenerated from.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ir::graph::NodeId;
use crate::ir::ops::{arity_of, Op, ParamValue, Params};

/// One operator occurrence. The position in `inputs` is the operand slot;
/// each entry is `[producer id, producer output slot]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelNode {
    pub id: NodeId,
    pub op: String,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub inputs: Vec<(NodeId, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub nodes: Vec<ModelNode>,
    /// Shapes of the Placeholder nodes in node order.
    pub inputs: Vec<Vec<i64>>,
    pub weights_seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
    #[error("node {node} input {slot} references unknown node {src}")]
    DanglingInput { node: NodeId, slot: usize, src: NodeId },
    #[error("node {node} ({op}) has {got} inputs, arity demands {want}")]
    ArityMismatch {
        node: NodeId,
        op: String,
        got: usize,
        want: String,
    },
    #[error("model graph is cyclic")]
    Cyclic,
    #[error("model declares {declared} input shapes for {actual} placeholders")]
    InputCountMismatch { declared: usize, actual: usize },
    #[error("node {0} is its own input")]
    SelfLoop(NodeId),
}

impl ModelSpec {
    pub fn node(&self, id: NodeId) -> Option<&ModelNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn placeholder_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.op == "Placeholder")
            .map(|n| n.id)
            .collect()
    }

    /// Graph outputs: nodes no other node consumes, in id order.
    pub fn sink_ids(&self) -> Vec<NodeId> {
        let consumed: BTreeSet<NodeId> = self
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(|(src, _)| *src))
            .collect();
        self.nodes
            .iter()
            .filter(|n| !consumed.contains(&n.id))
            .map(|n| n.id)
            .collect()
    }

    pub fn consumers(&self, id: NodeId) -> Vec<(NodeId, u32)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            for (slot, (src, _)) in node.inputs.iter().enumerate() {
                if *src == id {
                    out.push((node.id, slot as u32));
                }
            }
        }
        out
    }

    pub fn out_degree(&self, id: NodeId) -> u32 {
        self.consumers(id).len() as u32
    }

    /// Kahn order over nodes; errors on cycles.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, ModelError> {
        let ids: BTreeSet<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        let mut pending: BTreeMap<NodeId, usize> =
            self.nodes.iter().map(|n| (n.id, n.inputs.len())).collect();
        let mut ready: BTreeSet<NodeId> = pending
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(&id) = ready.iter().next() {
            ready.remove(&id);
            order.push(id);
            for node in &self.nodes {
                let uses = node.inputs.iter().filter(|(src, _)| *src == id).count();
                if uses > 0 && ids.contains(&node.id) {
                    let d = pending.get_mut(&node.id).unwrap();
                    *d -= uses;
                    if *d == 0 {
                        ready.insert(node.id);
                    }
                }
            }
        }
        if order.len() == self.nodes.len() {
            Ok(order)
        } else {
            Err(ModelError::Cyclic)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut ids = BTreeSet::new();
        for node in &self.nodes {
            if !ids.insert(node.id) {
                return Err(ModelError::DuplicateId(node.id));
            }
        }
        for node in &self.nodes {
            for (slot, (src, _)) in node.inputs.iter().enumerate() {
                if *src == node.id {
                    return Err(ModelError::SelfLoop(node.id));
                }
                if !ids.contains(src) {
                    return Err(ModelError::DanglingInput {
                        node: node.id,
                        slot,
                        src: *src,
                    });
                }
            }
            if Op::from_name(&node.op).is_some() {
                let arity = arity_of(&node.op);
                if !arity.accepts(node.inputs.len() as u32) {
                    return Err(ModelError::ArityMismatch {
                        node: node.id,
                        op: node.op.clone(),
                        got: node.inputs.len(),
                        want: format!("{arity:?}"),
                    });
                }
            }
        }
        let placeholders = self.placeholder_ids().len();
        if placeholders != self.inputs.len() {
            return Err(ModelError::InputCountMismatch {
                declared: self.inputs.len(),
                actual: placeholders,
            });
        }
        self.topo_order()?;
        Ok(())
    }

    /// Renumbers nodes 0..n in topological order (smallest-old-id first) and
    /// sorts the node list, so structurally identical models serialize to
    /// identical bytes. Input shapes follow their placeholders.
    pub fn canonicalize(&mut self) {
        let order = self.topo_order().expect("canonicalize needs a DAG");
        let remap: BTreeMap<NodeId, NodeId> = order
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new as NodeId))
            .collect();

        let old_placeholders = self.placeholder_ids();
        let shape_of: BTreeMap<NodeId, Vec<i64>> = old_placeholders
            .iter()
            .zip(self.inputs.iter())
            .map(|(&id, shape)| (id, shape.clone()))
            .collect();

        for node in &mut self.nodes {
            node.id = remap[&node.id];
            for input in &mut node.inputs {
                input.0 = remap[&input.0];
            }
        }
        self.nodes.sort_by_key(|n| n.id);
        self.inputs = self
            .placeholder_ids()
            .iter()
            .map(|new_id| {
                let old_id = order[*new_id as usize];
                shape_of[&old_id].clone()
            })
            .collect();
    }

    /// Hash of the operator-level structure (types and wiring, no params or
    /// shapes), stable under node renumbering.
    pub fn structure_hash(&self) -> u64 {
        let mut canon = self.clone();
        canon.canonicalize();
        let mut text = String::new();
        for node in &canon.nodes {
            text.push_str(&node.op);
            for (src, slot) in &node.inputs {
                text.push_str(&format!(",{src}.{slot}"));
            }
            text.push(';');
        }
        fnv1a(text.as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Canonical byte encoding. Deserializing the result gives back the model
/// field-for-field; serializing again is byte-identical.
pub fn serialize_model(model: &ModelSpec) -> Vec<u8> {
    let mut canon = model.clone();
    canon.canonicalize();
    let mut bytes = serde_json::to_vec_pretty(&canon).expect("model serializes");
    bytes.push(b'\n');
    bytes
}

pub fn deserialize_model(bytes: &[u8]) -> Result<ModelSpec, ModelError> {
    let model: ModelSpec = serde_json::from_slice(bytes)?;
    model.validate()?;
    Ok(model)
}

/// Convenience for tests and fixtures.
pub fn node(id: NodeId, op: &str, inputs: &[NodeId]) -> ModelNode {
    ModelNode {
        id,
        op: op.to_string(),
        params: Params::new(),
        inputs: inputs.iter().map(|&src| (src, 0)).collect(),
    }
}

pub fn node_with_params(
    id: NodeId,
    op: &str,
    inputs: &[NodeId],
    params: &[(&str, ParamValue)],
) -> ModelNode {
    ModelNode {
        id,
        op: op.to_string(),
        params: params
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
        inputs: inputs.iter().map(|&src| (src, 0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_model() -> ModelSpec {
        ModelSpec {
            nodes: vec![node(0, "Placeholder", &[]), node(1, "Relu", &[0])],
            inputs: vec![vec![1, 8, 8, 3]],
            weights_seed: 7,
        }
    }

    #[test]
    fn single_relu_round_trips() {
        let model = relu_model();
        let bytes = serialize_model(&model);
        let back = deserialize_model(&bytes).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn serialization_is_idempotent() {
        // Scrambled ids still produce one canonical byte form.
        let model = ModelSpec {
            nodes: vec![
                node(9, "Relu", &[4]),
                node(4, "Placeholder", &[]),
                node(7, "Relu", &[9]),
            ],
            inputs: vec![vec![1, 4, 4, 1]],
            weights_seed: 0,
        };
        let first = serialize_model(&model);
        let reparsed = deserialize_model(&first).unwrap();
        let second = serialize_model(&reparsed);
        assert_eq!(first, second);
    }

    #[test]
    fn truncated_stream_errors() {
        let bytes = serialize_model(&relu_model());
        let err = deserialize_model(&bytes[..bytes.len() / 2]);
        assert!(matches!(err, Err(ModelError::Parse(_))));
    }

    #[test]
    fn cyclic_model_rejected() {
        let model = ModelSpec {
            nodes: vec![node(0, "Relu", &[1]), node(1, "Relu", &[0])],
            inputs: vec![],
            weights_seed: 0,
        };
        assert!(matches!(model.validate(), Err(ModelError::Cyclic)));
    }

    #[test]
    fn arity_is_checked() {
        let model = ModelSpec {
            nodes: vec![node(0, "Placeholder", &[]), node(1, "Add", &[0])],
            inputs: vec![vec![1, 4, 4, 1]],
            weights_seed: 0,
        };
        assert!(matches!(
            model.validate(),
            Err(ModelError::ArityMismatch { .. })
        ));
    }

    #[test]
    fn structure_hash_ignores_ids_and_params() {
        let a = relu_model();
        let mut b = ModelSpec {
            nodes: vec![node(5, "Placeholder", &[]), node(2, "Relu", &[5])],
            inputs: vec![vec![1, 8, 8, 3]],
            weights_seed: 99,
        };
        b.nodes[1]
            .params
            .insert("ignored".into(), ParamValue::Int(1));
        assert_eq!(a.structure_hash(), {
            let mut b2 = b.clone();
            b2.nodes[1].params.clear();
            b2.structure_hash()
        });
        assert_eq!(a.structure_hash(), b.structure_hash());
    }

    #[test]
    fn sinks_and_placeholders() {
        let model = relu_model();
        assert_eq!(model.placeholder_ids(), vec![0]);
        assert_eq!(model.sink_ids(), vec![1]);
    }
}
