//! Block corpus: the generation vocabulary. A block is either a single
//! operator or a small predefined subgraph with fixed inner wiring; each
//! block declares the in/out degree sets a node carrying it may realize.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ir::ops::{arity_of, Arity, Op, OperatorKind, ParamDomain, ParamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    SingleOperator,
    Subgraph,
}

/// One corpus entry. For subgraphs, `inner_edges` lists (source member,
/// destination member) index pairs; repeats are legal and mean parallel data
/// flows (e.g. both operands of an Add fed by one producer).
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub members: Vec<String>,
    pub inner_edges: Vec<(u32, u32)>,
    pub in_degree_range: BTreeSet<u32>,
    pub out_degree_range: BTreeSet<u32>,
    /// Optional per-member parameter schema overrides, aligned with `members`.
    pub member_params: Vec<BTreeMap<String, ParamDomain>>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus file: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus file does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("block {block}: {reason}")]
    BadBlock { block: String, reason: String },
    #[error("duplicate block name {0}")]
    DuplicateName(String),
    #[error("corpus has no blocks")]
    Empty,
}

impl Block {
    pub fn single(op: &str, in_degrees: &[u32], out_degrees: &[u32]) -> Block {
        Block {
            name: op.to_string(),
            kind: BlockKind::SingleOperator,
            members: vec![op.to_string()],
            inner_edges: vec![],
            in_degree_range: in_degrees.iter().copied().collect(),
            out_degree_range: out_degrees.iter().copied().collect(),
            member_params: vec![BTreeMap::new()],
        }
    }

    pub fn subgraph(
        name: &str,
        members: &[&str],
        inner_edges: &[(u32, u32)],
        in_degrees: &[u32],
        out_degrees: &[u32],
    ) -> Block {
        Block {
            name: name.to_string(),
            kind: BlockKind::Subgraph,
            members: members.iter().map(|m| m.to_string()).collect(),
            inner_edges: inner_edges.to_vec(),
            in_degree_range: in_degrees.iter().copied().collect(),
            out_degree_range: out_degrees.iter().copied().collect(),
            member_params: members.iter().map(|_| BTreeMap::new()).collect(),
        }
    }

    pub fn is_subgraph(&self) -> bool {
        self.kind == BlockKind::Subgraph
    }

    fn err(&self, reason: impl Into<String>) -> CorpusError {
        CorpusError::BadBlock {
            block: self.name.clone(),
            reason: reason.into(),
        }
    }

    /// Inner in-degree of each member.
    pub fn inner_in_degrees(&self) -> Vec<u32> {
        let mut deg = vec![0u32; self.members.len()];
        for &(_, dst) in &self.inner_edges {
            if let Some(d) = deg.get_mut(dst as usize) {
                *d += 1;
            }
        }
        deg
    }

    /// Inner out-degree of each member.
    pub fn inner_out_degrees(&self) -> Vec<u32> {
        let mut deg = vec![0u32; self.members.len()];
        for &(src, _) in &self.inner_edges {
            if let Some(d) = deg.get_mut(src as usize) {
                *d += 1;
            }
        }
        deg
    }

    /// External input slots each member exposes after its inner edges are
    /// accounted for. This is the capacity block expansion wires external
    /// edges (or const fillers) into.
    pub fn free_input_slots(&self) -> Vec<u32> {
        let inner = self.inner_in_degrees();
        self.members
            .iter()
            .zip(inner)
            .map(|(m, used)| match arity_of(m) {
                Arity::Fixed(n) => n.saturating_sub(used),
                Arity::Variadic { min } => min.saturating_sub(used),
            })
            .collect()
    }

    /// Effective parameter schema for one member occurrence: the built-in
    /// schema with corpus-level overrides applied on top.
    pub fn member_schema(&self, member: usize) -> OperatorKind {
        let mut kind = OperatorKind::resolve(&self.members[member]);
        if let Some(overrides) = self.member_params.get(member) {
            for (name, domain) in overrides {
                match kind.param_schema.iter_mut().find(|s| s.name == *name) {
                    Some(spec) => spec.domain = domain.clone(),
                    None => kind.param_schema.push(ParamSpec {
                        name: name.clone(),
                        domain: domain.clone(),
                    }),
                }
            }
        }
        kind
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.members.is_empty() {
            return Err(self.err("block has no members"));
        }
        if self.in_degree_range.is_empty() || self.out_degree_range.is_empty() {
            return Err(self.err("degree range is empty"));
        }
        if !self.member_params.is_empty() && self.member_params.len() != self.members.len() {
            return Err(self.err("params list does not align with members"));
        }
        for schema in &self.member_params {
            for (name, domain) in schema {
                domain
                    .validate()
                    .map_err(|reason| self.err(format!("param {name}: {reason}")))?;
            }
        }
        match self.kind {
            BlockKind::SingleOperator => {
                if self.members.len() != 1 {
                    return Err(self.err("single-operator block must have one member"));
                }
                if !self.inner_edges.is_empty() {
                    return Err(self.err("single-operator block cannot have inner edges"));
                }
            }
            BlockKind::Subgraph => {
                if self.inner_edges.is_empty() {
                    return Err(self.err("subgraph block needs inner edges"));
                }
                let n = self.members.len() as u32;
                for &(src, dst) in &self.inner_edges {
                    if src >= n || dst >= n {
                        return Err(self.err(format!("inner edge ({src},{dst}) out of bounds")));
                    }
                    if src == dst {
                        return Err(self.err(format!("inner self-loop on member {src}")));
                    }
                }
                if !self.inner_edges_acyclic() {
                    return Err(self.err("inner edges form a cycle"));
                }
                let inner_in = self.inner_in_degrees();
                for (idx, member) in self.members.iter().enumerate() {
                    if let Arity::Fixed(n) = arity_of(member) {
                        if inner_in[idx] > n {
                            return Err(self.err(format!(
                                "member {idx} ({member}) has {} inner inputs, arity {n}",
                                inner_in[idx]
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn inner_edges_acyclic(&self) -> bool {
        let n = self.members.len();
        let mut indeg = vec![0usize; n];
        for &(_, dst) in &self.inner_edges {
            indeg[dst as usize] += 1;
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = ready.pop() {
            seen += 1;
            for &(src, dst) in &self.inner_edges {
                if src as usize == i {
                    indeg[dst as usize] -= 1;
                    if indeg[dst as usize] == 0 {
                        ready.push(dst as usize);
                    }
                }
            }
        }
        seen == n
    }
}

/// The validated block catalog plus the type-level facts coverage needs.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCorpus {
    pub blocks: Vec<Block>,
    /// All operator type names appearing in any block, sorted.
    pub operator_types: BTreeSet<String>,
}

impl BlockCorpus {
    pub fn new(blocks: Vec<Block>) -> Result<BlockCorpus, CorpusError> {
        if blocks.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut names = BTreeSet::new();
        for block in &blocks {
            block.validate()?;
            if !names.insert(block.name.clone()) {
                return Err(CorpusError::DuplicateName(block.name.clone()));
            }
        }
        let operator_types = blocks
            .iter()
            .flat_map(|b| b.members.iter().cloned())
            .collect();
        Ok(BlockCorpus {
            blocks,
            operator_types,
        })
    }

    pub fn block_by_name(&self, name: &str) -> Option<(usize, &Block)> {
        self.blocks
            .iter()
            .enumerate()
            .find(|(_, b)| b.name == name)
    }

    /// Number of operator types, the `n_t` shared by the coverage ratios.
    pub fn type_count(&self) -> usize {
        self.operator_types.len()
    }

    /// Per-type in/out degree domains: the union of degree sets over the
    /// single-operator blocks of that type. Types appearing only inside
    /// subgraphs contribute the degrees their member occurrences realize
    /// (inner in-degree plus free external slots; block-level out range for
    /// inner sinks).
    pub fn degree_domains(&self) -> BTreeMap<String, (BTreeSet<u32>, BTreeSet<u32>)> {
        let mut domains: BTreeMap<String, (BTreeSet<u32>, BTreeSet<u32>)> = self
            .operator_types
            .iter()
            .map(|t| (t.clone(), (BTreeSet::new(), BTreeSet::new())))
            .collect();
        for block in &self.blocks {
            match block.kind {
                BlockKind::SingleOperator => {
                    let entry = domains.get_mut(&block.members[0]).unwrap();
                    entry.0.extend(block.in_degree_range.iter().copied());
                    entry.1.extend(block.out_degree_range.iter().copied());
                }
                BlockKind::Subgraph => {
                    let inner_in = block.inner_in_degrees();
                    let inner_out = block.inner_out_degrees();
                    let free = block.free_input_slots();
                    for (idx, member) in block.members.iter().enumerate() {
                        let entry = domains.get_mut(member).unwrap();
                        entry.0.insert(inner_in[idx] + free[idx]);
                        if inner_out[idx] == 0 {
                            entry.1.extend(block.out_degree_range.iter().copied());
                        } else {
                            entry.1.insert(inner_out[idx]);
                        }
                    }
                }
            }
        }
        domains
    }
}

// ---------------------------------------------------------------------------
// File format

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    blocks: Vec<BlockEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    members: Vec<String>,
    #[serde(default)]
    inner_edges: Vec<(u32, u32)>,
    in_degree: Vec<u32>,
    out_degree: Vec<u32>,
    #[serde(default)]
    params: Vec<BTreeMap<String, ParamDomain>>,
}

impl From<&Block> for BlockEntry {
    fn from(b: &Block) -> BlockEntry {
        BlockEntry {
            name: b.name.clone(),
            members: b.members.clone(),
            inner_edges: b.inner_edges.clone(),
            in_degree: b.in_degree_range.iter().copied().collect(),
            out_degree: b.out_degree_range.iter().copied().collect(),
            params: b.member_params.clone(),
        }
    }
}

impl BlockEntry {
    fn into_block(self) -> Block {
        let kind = if self.members.len() == 1 && self.inner_edges.is_empty() {
            BlockKind::SingleOperator
        } else {
            BlockKind::Subgraph
        };
        let member_params = if self.params.is_empty() {
            self.members.iter().map(|_| BTreeMap::new()).collect()
        } else {
            self.params
        };
        Block {
            name: self.name,
            kind,
            members: self.members,
            inner_edges: self.inner_edges,
            in_degree_range: self.in_degree.into_iter().collect(),
            out_degree_range: self.out_degree.into_iter().collect(),
            member_params,
        }
    }
}

pub fn load_corpus(path: &Path) -> Result<BlockCorpus, CorpusError> {
    let raw = std::fs::read_to_string(path)?;
    parse_corpus(&raw)
}

pub fn parse_corpus(raw: &str) -> Result<BlockCorpus, CorpusError> {
    let file: CorpusFile = serde_json::from_str(raw)?;
    BlockCorpus::new(file.blocks.into_iter().map(BlockEntry::into_block).collect())
}

pub fn corpus_to_json(corpus: &BlockCorpus) -> String {
    let file = CorpusFile {
        blocks: corpus.blocks.iter().map(BlockEntry::from).collect(),
    };
    let mut out = serde_json::to_string_pretty(&file).expect("corpus serializes");
    out.push('\n');
    out
}

// ---------------------------------------------------------------------------
// Built-in corpora

const FULL_OUT: &[u32] = &[0, 1, 2, 3, 4, 5];

/// The default corpus: every executable operator except the injected
/// source/filler kinds, plus three subgraphs modeled on common fusion and
/// multi-branch patterns (feature-map concatenation, multiply-add chains,
/// conv/bias/relu fusion).
pub fn builtin_corpus() -> BlockCorpus {
    let mut blocks = vec![Block::single("Const", &[0], &[1, 2, 3, 4, 5])];
    for op in [
        Op::Conv2d,
        Op::DepthwiseConv2d,
        Op::BiasAdd,
        Op::Relu,
        Op::Relu6,
        Op::Sigmoid,
        Op::Tanh,
        Op::Softmax,
        Op::MaxPool,
        Op::AvgPool,
        Op::Reshape,
        Op::Transpose,
        Op::Slice,
        Op::Pad,
        Op::Cast,
    ] {
        blocks.push(Block::single(op.name(), &[1], FULL_OUT));
    }
    for op in [Op::Add, Op::Mul, Op::Sub, Op::RealDiv] {
        blocks.push(Block::single(op.name(), &[2], FULL_OUT));
    }
    blocks.push(Block::single("Concat", &[2, 3, 4, 5], FULL_OUT));

    blocks.push(Block::subgraph(
        "Conv2d+Conv2d+Concat",
        &["Conv2d", "Conv2d", "Concat"],
        &[(0, 2), (1, 2)],
        &[2],
        FULL_OUT,
    ));
    blocks.push(Block::subgraph(
        "Mul+Add+Relu",
        &["Mul", "Add", "Relu"],
        &[(0, 1), (1, 2)],
        &[3],
        FULL_OUT,
    ));
    blocks.push(Block::subgraph(
        "Conv2d+BiasAdd+Relu",
        &["Conv2d", "BiasAdd", "Relu"],
        &[(0, 1), (1, 2)],
        &[1],
        FULL_OUT,
    ));

    BlockCorpus::new(blocks).expect("builtin corpus is valid")
}

/// The three-operator example corpus used throughout the coverage tests.
pub fn example_corpus() -> BlockCorpus {
    BlockCorpus::new(vec![
        Block::single("Conv2d", &[1], &[0, 1, 2]),
        Block::single("Relu", &[1], &[0, 1, 2]),
        Block::single("Add", &[2], &[0, 1, 2]),
    ])
    .expect("example corpus is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_member_subgraph_loads() {
        let raw = r#"{
            "blocks": [{
                "name": "Conv2d+Relu+Pow+Concat",
                "members": ["Conv2d", "Relu", "Pow", "Concat"],
                "inner_edges": [[0, 1], [1, 3], [2, 3]],
                "in_degree": [2],
                "out_degree": [0, 1, 2]
            }]
        }"#;
        let corpus = parse_corpus(raw).unwrap();
        let block = &corpus.blocks[0];
        assert_eq!(block.members.len(), 4);
        assert_eq!(block.kind, BlockKind::Subgraph);
        assert_eq!(block.free_input_slots(), vec![1, 0, 1, 0]);
    }

    #[test]
    fn duplicate_inner_edges_are_legal() {
        let raw = r#"{
            "blocks": [{
                "name": "Conv2d+Conv2d+Add+Add",
                "members": ["Conv2d", "Conv2d", "Add", "Add"],
                "inner_edges": [[0, 2], [1, 2], [2, 3], [2, 3]],
                "in_degree": [2],
                "out_degree": [0, 1, 2]
            }]
        }"#;
        let corpus = parse_corpus(raw).unwrap();
        let block = &corpus.blocks[0];
        assert_eq!(
            block
                .inner_edges
                .iter()
                .filter(|&&e| e == (2, 3))
                .count(),
            2
        );
        assert_eq!(block.inner_in_degrees(), vec![0, 0, 2, 2]);
    }

    #[test]
    fn cyclic_inner_edges_are_rejected() {
        let raw = r#"{
            "blocks": [{
                "name": "bad",
                "members": ["Relu", "Relu"],
                "inner_edges": [[0, 1], [1, 0]],
                "in_degree": [1],
                "out_degree": [0, 1]
            }]
        }"#;
        let err = parse_corpus(raw).unwrap_err();
        assert!(matches!(err, CorpusError::BadBlock { .. }), "{err}");
    }

    #[test]
    fn out_of_bounds_member_index_is_rejected() {
        let raw = r#"{
            "blocks": [{
                "name": "bad",
                "members": ["Relu", "Relu"],
                "inner_edges": [[0, 7]],
                "in_degree": [1],
                "out_degree": [0]
            }]
        }"#;
        assert!(parse_corpus(raw).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let blocks = vec![
            Block::single("Relu", &[1], &[0, 1]),
            Block::single("Relu", &[1], &[0, 1]),
        ];
        assert!(matches!(
            BlockCorpus::new(blocks),
            Err(CorpusError::DuplicateName(_))
        ));
    }

    #[test]
    fn builtin_corpus_round_trips() {
        let corpus = builtin_corpus();
        let json = corpus_to_json(&corpus);
        let reloaded = parse_corpus(&json).unwrap();
        assert_eq!(corpus, reloaded);
    }

    #[test]
    fn example_corpus_degree_domains() {
        let corpus = example_corpus();
        let domains = corpus.degree_domains();
        assert_eq!(corpus.type_count(), 3);
        let (inp, out) = &domains["Conv2d"];
        assert_eq!(inp.len(), 1);
        assert_eq!(out.len(), 3);
        let (inp, _) = &domains["Add"];
        assert!(inp.contains(&2));
    }

    #[test]
    fn too_many_inner_inputs_rejected() {
        let block = Block::subgraph(
            "bad",
            &["Relu", "Relu", "Relu"],
            &[(0, 2), (1, 2)],
            &[1],
            &[0, 1],
        );
        assert!(block.validate().is_err());
    }
}
