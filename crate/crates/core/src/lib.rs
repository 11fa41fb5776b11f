//! Coverage-guided fuzzer that synthesizes neural-network computation graphs
//! as test inputs for DL inference engines.
//!
//! Models are generated as random DAGs over a block corpus, mutated at the
//! graph and source level, made executable by a shapes-and-parameters
//! solver, and run differentially on two independent built-in interpreters
//! (or an external engine speaking the subprocess protocol). An
//! operator-level coverage criterion gates which inputs are kept and a UCT
//! tree search steers which blocks the generator draws from.

pub mod coverage;
pub mod exec;
pub mod graphgen;
pub mod harness;
pub mod ir;
pub mod mutation;
pub mod shapecalc;
pub mod tensor;
pub mod rng;
pub mod search;
