//! Block expansion: replaces every subgraph-block node with its member
//! operators, instantiates the inner edges and wires the surrounding edges
//! into the members' free input slots. Missing operands (declared arity not
//! covered by the node's realized in-degree) are filled with Const sources.

use std::collections::BTreeMap;

use crate::ir::corpus::{Block, BlockCorpus, BlockKind};
use crate::ir::graph::{BlockInstance, Graph, GraphError, NodeId};
use crate::ir::ops::{arity_of, Arity, OperatorKind};

#[derive(Debug, thiserror::Error)]
pub enum ExpandError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node {0} has no block assigned")]
    Unassigned(NodeId),
    #[error("node {node} ({block}): block absorbs at most {capacity} inputs, got {degree}")]
    Wiring {
        node: NodeId,
        block: String,
        degree: u32,
        capacity: u32,
    },
}

/// Where a block instance connects to the rest of the graph.
struct Ports {
    /// External input attach points in slot order.
    input_slots: Vec<(NodeId, u32)>,
    /// Variadic member that absorbs inputs beyond `input_slots`.
    overflow: Option<NodeId>,
    /// Inner sinks; external out-edges are routed over these round-robin.
    out_sources: Vec<NodeId>,
    out_counter: usize,
}

pub fn expand_blocks(g: &Graph, corpus: &BlockCorpus) -> Result<Graph, ExpandError> {
    Ok(expand_blocks_with_schemas(g, corpus)?.0)
}

/// Expansion plus the effective parameter schema of every expanded node,
/// which the shapes-and-parameters stage consumes.
pub fn expand_blocks_with_schemas(
    g: &Graph,
    corpus: &BlockCorpus,
) -> Result<(Graph, BTreeMap<NodeId, OperatorKind>), ExpandError> {
    let order = g.topo_order()?;
    let mut out = Graph::new();
    let mut schemas: BTreeMap<NodeId, OperatorKind> = BTreeMap::new();
    let mut ports: BTreeMap<NodeId, Ports> = BTreeMap::new();

    for &id in &order {
        let node = g.node(id).expect("topo order yields known nodes");
        let instance = node.block.as_ref().ok_or(ExpandError::Unassigned(id))?;
        let realized_in = g.in_degree(id);

        enum Resolved<'a> {
            Single(OperatorKind),
            Sub(&'a Block),
        }
        let resolved = match instance {
            BlockInstance::Operator(name) => Resolved::Single(OperatorKind::resolve(name)),
            BlockInstance::FromCorpus(idx) => {
                let block = &corpus.blocks[*idx];
                match block.kind {
                    BlockKind::SingleOperator => Resolved::Single(block.member_schema(0)),
                    BlockKind::Subgraph => Resolved::Sub(block),
                }
            }
            BlockInstance::Derived(block) => match block.kind {
                BlockKind::SingleOperator => Resolved::Single(block.member_schema(0)),
                BlockKind::Subgraph => Resolved::Sub(block),
            },
        };

        match resolved {
            Resolved::Single(kind) => {
                let new_id = out.add_node(Some(BlockInstance::Operator(kind.name.clone())));
                let capacity = match kind.arity {
                    Arity::Fixed(n) => n,
                    Arity::Variadic { min } => realized_in.max(min),
                };
                let input_slots = (0..capacity).map(|slot| (new_id, slot)).collect();
                schemas.insert(new_id, kind);
                ports.insert(
                    id,
                    Ports {
                        input_slots,
                        overflow: None,
                        out_sources: vec![new_id],
                        out_counter: 0,
                    },
                );
            }
            Resolved::Sub(block) => {
                let inner_in = block.inner_in_degrees();
                let inner_out = block.inner_out_degrees();
                let free = block.free_input_slots();

                let member_ids: Vec<NodeId> = block
                    .members
                    .iter()
                    .enumerate()
                    .map(|(idx, name)| {
                        let mid = out.add_node(Some(BlockInstance::Operator(name.clone())));
                        schemas.insert(mid, block.member_schema(idx));
                        mid
                    })
                    .collect();

                // Inner edges occupy the leading operand slots, in list order.
                let mut used = vec![0u32; block.members.len()];
                for &(src, dst) in &block.inner_edges {
                    let slot = used[dst as usize];
                    used[dst as usize] += 1;
                    out.edges.push(crate::ir::graph::Edge {
                        src: member_ids[src as usize],
                        src_slot: 0,
                        dst: member_ids[dst as usize],
                        dst_slot: slot,
                    });
                }

                let mut input_slots = Vec::new();
                for (idx, &mid) in member_ids.iter().enumerate() {
                    for j in 0..free[idx] {
                        input_slots.push((mid, inner_in[idx] + j));
                    }
                }
                let overflow = block
                    .members
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, m)| matches!(arity_of(m), Arity::Variadic { .. }))
                    .map(|(idx, _)| member_ids[idx]);
                let out_sources: Vec<NodeId> = member_ids
                    .iter()
                    .enumerate()
                    .filter(|(idx, _)| inner_out[*idx] == 0)
                    .map(|(_, &mid)| mid)
                    .collect();

                ports.insert(
                    id,
                    Ports {
                        input_slots,
                        overflow,
                        out_sources,
                        out_counter: 0,
                    },
                );
            }
        }
    }

    // Route every original edge, preserving operand order on the consumer.
    for &vid in &order {
        for edge in g.in_edges(vid) {
            let dst_port = {
                let pv = &ports[&vid];
                if let Some(&(node, slot)) = pv.input_slots.get(edge.dst_slot as usize) {
                    (node, slot)
                } else if let Some(ov) = pv.overflow {
                    let slot = out.in_degree(ov);
                    (ov, slot)
                } else {
                    let capacity = pv.input_slots.len() as u32;
                    let block_name = match g.node(vid).and_then(|n| n.block.as_ref()) {
                        Some(BlockInstance::FromCorpus(idx)) => corpus.blocks[*idx].name.clone(),
                        Some(BlockInstance::Derived(b)) => b.name.clone(),
                        Some(BlockInstance::Operator(n)) => n.clone(),
                        None => String::from("?"),
                    };
                    return Err(ExpandError::Wiring {
                        node: vid,
                        block: block_name,
                        degree: g.in_degree(vid),
                        capacity,
                    });
                }
            };
            let src_port = {
                let pu = ports.get_mut(&edge.src).expect("source expanded");
                let src = pu.out_sources[pu.out_counter % pu.out_sources.len()];
                pu.out_counter += 1;
                src
            };
            out.edges.push(crate::ir::graph::Edge {
                src: src_port,
                src_slot: 0,
                dst: dst_port.0,
                dst_slot: dst_port.1,
            });
        }
    }

    // Unfilled operand slots get Const sources so every slot is covered by
    // exactly one edge.
    let all_slots: Vec<(NodeId, u32)> = ports
        .values()
        .flat_map(|p| p.input_slots.iter().copied())
        .collect();
    for (node, slot) in all_slots {
        let filled = out
            .edges
            .iter()
            .any(|e| e.dst == node && e.dst_slot == slot);
        if !filled {
            let c = out.add_node(Some(BlockInstance::Operator("Const".to_string())));
            schemas.insert(c, OperatorKind::resolve("Const"));
            out.edges.push(crate::ir::graph::Edge {
                src: c,
                src_slot: 0,
                dst: node,
                dst_slot: slot,
            });
        }
    }

    debug_assert!(out.is_acyclic());
    Ok((out, schemas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::corpus::{parse_corpus, BlockCorpus};

    fn fig4_corpus() -> BlockCorpus {
        parse_corpus(
            r#"{
            "blocks": [
                {"name": "Relu", "members": ["Relu"], "in_degree": [1], "out_degree": [0,1,2]},
                {"name": "Conv2d+Relu+Pow+Concat",
                 "members": ["Conv2d", "Relu", "Pow", "Concat"],
                 "inner_edges": [[0,1],[1,3],[2,3]],
                 "in_degree": [2], "out_degree": [0,1,2]}
            ]
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn single_operator_block_is_identity_shaped() {
        let corpus = fig4_corpus();
        let mut g = Graph::new();
        let p = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let r = g.add_node(Some(BlockInstance::FromCorpus(0)));
        g.add_edge(p, r);
        let out = expand_blocks(&g, &corpus).unwrap();
        assert_eq!(out.node_count(), 2);
        assert_eq!(out.edges.len(), 1);
    }

    #[test]
    fn subgraph_expands_to_members_with_inner_edges() {
        let corpus = fig4_corpus();
        let mut g = Graph::new();
        let p0 = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let p1 = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let sub = g.add_node(Some(BlockInstance::FromCorpus(1)));
        g.add_edge(p0, sub);
        g.add_edge(p1, sub);
        let out = expand_blocks(&g, &corpus).unwrap();
        // 2 placeholders + 4 members, no fillers (in-degree 2 == capacity).
        assert_eq!(out.node_count(), 6);
        // 3 inner + 2 external edges.
        assert_eq!(out.edges.len(), 5);
        assert!(out.is_acyclic());
        let names: Vec<&str> = out
            .nodes
            .iter()
            .filter_map(|n| match &n.block {
                Some(BlockInstance::Operator(name)) => Some(name.as_str()),
                _ => None,
            })
            .collect();
        assert!(names.contains(&"Pow"));
        assert!(names.contains(&"Concat"));
    }

    #[test]
    fn chain_of_two_subgraphs_sums_member_counts() {
        let corpus = parse_corpus(
            r#"{
            "blocks": [
                {"name": "Conv2d+BiasAdd+Relu",
                 "members": ["Conv2d", "BiasAdd", "Relu"],
                 "inner_edges": [[0,1],[1,2]],
                 "in_degree": [1], "out_degree": [0,1,2]}
            ]
        }"#,
        )
        .unwrap();
        let mut g = Graph::new();
        let p = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let a = g.add_node(Some(BlockInstance::FromCorpus(0)));
        let b = g.add_node(Some(BlockInstance::FromCorpus(0)));
        g.add_edge(p, a);
        g.add_edge(a, b);
        let out = expand_blocks(&g, &corpus).unwrap();
        assert_eq!(out.node_count(), 1 + 3 + 3);
        assert_eq!(out.edges.len(), 2 + 2 + 2);
        assert!(out.is_acyclic());
    }

    #[test]
    fn missing_operands_become_const_fillers() {
        let corpus = fig4_corpus();
        let mut g = Graph::new();
        let p = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let sub = g.add_node(Some(BlockInstance::FromCorpus(1)));
        g.add_edge(p, sub); // in-degree 1 < capacity 2
        let out = expand_blocks(&g, &corpus).unwrap();
        let consts = out
            .nodes
            .iter()
            .filter(|n| matches!(&n.block, Some(BlockInstance::Operator(op)) if op == "Const"))
            .count();
        assert_eq!(consts, 1);
        // Every member input slot is filled exactly once.
        for node in &out.nodes {
            let slots: Vec<u32> = out.in_edges(node.id).iter().map(|e| e.dst_slot).collect();
            let expect: Vec<u32> = (0..slots.len() as u32).collect();
            assert_eq!(slots, expect);
        }
    }

    #[test]
    fn overfilled_fixed_block_is_a_wiring_error() {
        let corpus = fig4_corpus();
        let mut g = Graph::new();
        let p0 = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let p1 = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let r = g.add_node(Some(BlockInstance::FromCorpus(0)));
        g.add_edge(p0, r);
        g.add_edge(p1, r);
        let err = expand_blocks(&g, &corpus).unwrap_err();
        assert!(matches!(err, ExpandError::Wiring { .. }), "{err}");
    }

    #[test]
    fn external_edge_multiset_is_preserved() {
        let corpus = fig4_corpus();
        let mut g = Graph::new();
        let p0 = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let p1 = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let sub = g.add_node(Some(BlockInstance::FromCorpus(1)));
        let relu = g.add_node(Some(BlockInstance::FromCorpus(0)));
        g.add_edge(p0, sub);
        g.add_edge(p1, sub);
        g.add_edge(sub, relu);
        let out = expand_blocks(&g, &corpus).unwrap();
        // External edges: 2 into the subgraph, 1 out of it = 3; inner = 3.
        assert_eq!(out.edges.len(), 6);
    }
}
