//! Directed acyclic multigraph over block instances. Parallel edges between
//! two nodes are legal (both inputs of a binary operator may come from one
//! producer); self-loops are not.

use std::collections::BTreeSet;

use crate::ir::corpus::{Block, BlockCorpus};
use crate::ir::ops::arity_of;

pub type NodeId = u32;

/// One data flow. `dst_slot` is the operand position on the consumer;
/// `src_slot` is the producer output index (always 0 for the built-in set,
/// kept for the file format).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: NodeId,
    pub src_slot: u32,
    pub dst: NodeId,
    pub dst_slot: u32,
}

/// What a graph node stands for at the current pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockInstance {
    /// Index into the corpus block list.
    FromCorpus(usize),
    /// A per-node mutant of a corpus subgraph (block node addition/removal).
    Derived(Block),
    /// A bare operator occurrence: expanded graphs, injected placeholders
    /// and const fillers.
    Operator(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: NodeId,
    /// `None` until block assignment.
    pub block: Option<BlockInstance>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("graph contains a cycle")]
    Cyclic,
    #[error("edge endpoint {0} does not exist")]
    DanglingEdge(NodeId),
    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn add_node(&mut self, block: Option<BlockInstance>) -> NodeId {
        let id = self.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0);
        self.nodes.push(GraphNode { id, block });
        id
    }

    /// Appends an edge into `dst`'s next free slot.
    pub fn add_edge(&mut self, src: NodeId, dst: NodeId) {
        let slot = self.in_degree(dst);
        self.edges.push(Edge {
            src,
            src_slot: 0,
            dst,
            dst_slot: slot,
        });
    }

    pub fn node(&self, id: NodeId) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut GraphNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn in_degree(&self, id: NodeId) -> u32 {
        self.edges.iter().filter(|e| e.dst == id).count() as u32
    }

    pub fn out_degree(&self, id: NodeId) -> u32 {
        self.edges.iter().filter(|e| e.src == id).count() as u32
    }

    /// Incoming edges ordered by destination slot.
    pub fn in_edges(&self, id: NodeId) -> Vec<Edge> {
        let mut edges: Vec<Edge> = self.edges.iter().filter(|e| e.dst == id).copied().collect();
        edges.sort_by_key(|e| e.dst_slot);
        edges
    }

    pub fn out_edges(&self, id: NodeId) -> Vec<Edge> {
        self.edges.iter().filter(|e| e.src == id).copied().collect()
    }

    pub fn sources(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| self.in_degree(n.id) == 0)
            .map(|n| n.id)
            .collect()
    }

    pub fn sinks(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| self.out_degree(n.id) == 0)
            .map(|n| n.id)
            .collect()
    }

    /// Removes an edge and renumbers the destination's higher slots down so
    /// operand positions stay dense.
    pub fn remove_edge(&mut self, edge: Edge) -> bool {
        let Some(pos) = self.edges.iter().position(|e| *e == edge) else {
            return false;
        };
        self.edges.remove(pos);
        for e in self.edges.iter_mut() {
            if e.dst == edge.dst && e.dst_slot > edge.dst_slot {
                e.dst_slot -= 1;
            }
        }
        true
    }

    /// Kahn elimination with smallest-id tie-breaking. Errors on cycles.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let ids: BTreeSet<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        for e in &self.edges {
            if e.src == e.dst {
                return Err(GraphError::SelfLoop(e.src));
            }
            if !ids.contains(&e.src) {
                return Err(GraphError::DanglingEdge(e.src));
            }
            if !ids.contains(&e.dst) {
                return Err(GraphError::DanglingEdge(e.dst));
            }
        }
        let mut pending: std::collections::BTreeMap<NodeId, usize> =
            ids.iter().map(|&id| (id, 0)).collect();
        for e in &self.edges {
            *pending.get_mut(&e.dst).unwrap() += 1;
        }
        let mut ready: BTreeSet<NodeId> = pending
            .iter()
            .filter(|(_, &deg)| deg == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(&id) = ready.iter().next() {
            ready.remove(&id);
            order.push(id);
            for e in self.edges.iter().filter(|e| e.src == id) {
                let deg = pending.get_mut(&e.dst).unwrap();
                *deg -= 1;
                if *deg == 0 {
                    ready.insert(e.dst);
                }
            }
        }
        if order.len() == self.nodes.len() {
            Ok(order)
        } else {
            Err(GraphError::Cyclic)
        }
    }

    pub fn is_acyclic(&self) -> bool {
        self.topo_order().is_ok()
    }

    /// Weakly connected components, each sorted by id.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut unvisited: BTreeSet<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        let mut components = Vec::new();
        while let Some(&start) = unvisited.iter().next() {
            let mut stack = vec![start];
            let mut comp = BTreeSet::new();
            unvisited.remove(&start);
            comp.insert(start);
            while let Some(id) = stack.pop() {
                for e in &self.edges {
                    let other = if e.src == id {
                        e.dst
                    } else if e.dst == id {
                        e.src
                    } else {
                        continue;
                    };
                    if unvisited.remove(&other) {
                        comp.insert(other);
                        stack.push(other);
                    }
                }
            }
            components.push(comp.into_iter().collect());
        }
        components
    }

    /// In/out degree ranges the node's block declares. Bare operator
    /// instances fall back to arity-derived ranges.
    pub fn degree_ranges(&self, id: NodeId, corpus: &BlockCorpus) -> (BTreeSet<u32>, BTreeSet<u32>) {
        let node = self.node(id).expect("degree_ranges: unknown node");
        match &node.block {
            Some(BlockInstance::FromCorpus(idx)) => {
                let b = &corpus.blocks[*idx];
                (b.in_degree_range.clone(), b.out_degree_range.clone())
            }
            Some(BlockInstance::Derived(b)) => {
                (b.in_degree_range.clone(), b.out_degree_range.clone())
            }
            Some(BlockInstance::Operator(name)) => {
                let out: BTreeSet<u32> = if name == "Placeholder" || name == "Const" {
                    (1..=8).collect()
                } else {
                    (0..=8).collect()
                };
                let arity = arity_of(name);
                let inp: BTreeSet<u32> = match arity {
                    crate::ir::ops::Arity::Fixed(n) => [n].into_iter().collect(),
                    crate::ir::ops::Arity::Variadic { min } => (min..=min + 6).collect(),
                };
                (inp, out)
            }
            None => panic!("degree_ranges: node {id} has no block"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diamond() -> Graph {
        let mut g = Graph::new();
        let a = g.add_node(None);
        let b = g.add_node(None);
        let c = g.add_node(None);
        let d = g.add_node(None);
        g.add_edge(a, b);
        g.add_edge(a, c);
        g.add_edge(b, d);
        g.add_edge(c, d);
        g
    }

    #[test]
    fn topo_order_of_diamond() {
        let g = diamond();
        assert_eq!(g.topo_order().unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(g.in_degree(3), 2);
        assert_eq!(g.out_degree(0), 2);
    }

    #[test]
    fn cycle_is_rejected() {
        let mut g = diamond();
        g.add_edge(3, 0);
        assert!(matches!(g.topo_order(), Err(GraphError::Cyclic)));
    }

    #[test]
    fn parallel_edges_are_counted() {
        let mut g = Graph::new();
        let a = g.add_node(None);
        let b = g.add_node(None);
        g.add_edge(a, b);
        g.add_edge(a, b);
        assert_eq!(g.out_degree(a), 2);
        assert_eq!(g.in_degree(b), 2);
        let slots: Vec<u32> = g.in_edges(b).iter().map(|e| e.dst_slot).collect();
        assert_eq!(slots, vec![0, 1]);
    }

    #[test]
    fn remove_edge_renumbers_slots() {
        let mut g = Graph::new();
        let a = g.add_node(None);
        let b = g.add_node(None);
        let c = g.add_node(None);
        g.add_edge(a, c);
        g.add_edge(b, c);
        let first = g.in_edges(c)[0];
        assert!(g.remove_edge(first));
        let left = g.in_edges(c);
        assert_eq!(left.len(), 1);
        assert_eq!(left[0].dst_slot, 0);
        assert_eq!(left[0].src, b);
    }

    #[test]
    fn components_split() {
        let mut g = Graph::new();
        let a = g.add_node(None);
        let b = g.add_node(None);
        let _c = g.add_node(None);
        g.add_edge(a, b);
        assert_eq!(g.components().len(), 2);
    }
}
