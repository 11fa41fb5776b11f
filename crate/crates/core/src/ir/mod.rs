//! Computation-graph intermediate representation: operator registry, block
//! corpus, the block-level multigraph and the executable model form.

pub mod corpus;
pub mod expand;
pub mod graph;
pub mod model;
pub mod ops;

pub use corpus::{
    builtin_corpus, corpus_to_json, example_corpus, load_corpus, parse_corpus, Block, BlockCorpus,
    BlockKind, CorpusError,
};
pub use expand::{expand_blocks, expand_blocks_with_schemas, ExpandError};
pub use graph::{BlockInstance, Edge, Graph, GraphError, GraphNode, NodeId};
pub use model::{
    deserialize_model, fnv1a, node, node_with_params, serialize_model, ModelError, ModelNode,
    ModelSpec,
};
pub use ops::{arity_of, Arity, Op, OperatorKind, ParamDomain, ParamSpec, ParamValue, Params};
