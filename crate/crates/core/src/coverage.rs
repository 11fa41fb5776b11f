//! Operator-level coverage: five per-operator metrics (type, in-degree,
//! out-degree, single-edge and shapes&parameters coverage), their weighted
//! per-operator and per-set aggregates, and the does-this-input-add-coverage
//! gate the harness uses to keep or discard generated models.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ir::{BlockCorpus, ModelSpec};
use crate::shapecalc::{lenient_shapes, ShapeError};

/// Which aggregate the coverage gate consults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    SetOnly,
    PerOperator,
    /// New coverage when either the set OLC or any per-operator OLC rises.
    Either,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    /// Expected maximum distinct shape&parameter vectors per operator.
    pub n_maxspc: usize,
    pub weights_op: [f64; 5],
    pub weights_set: [f64; 5],
    pub gate: GateMode,
}

impl Default for CoverageConfig {
    fn default() -> CoverageConfig {
        CoverageConfig {
            n_maxspc: 200,
            weights_op: [1.0; 5],
            weights_set: [1.0; 5],
            gate: GateMode::Either,
        }
    }
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_maxspc == 0 {
            return Err("n_maxspc must be at least 1".into());
        }
        for w in self.weights_op.iter().chain(&self.weights_set) {
            if *w < 0.0 {
                return Err("weights must be non-negative".into());
            }
        }
        if self.weights_op.iter().sum::<f64>() <= 0.0
            || self.weights_set.iter().sum::<f64>() <= 0.0
        {
            return Err("weight vectors need a positive sum".into());
        }
        Ok(())
    }
}

/// Accumulated observations for one operator type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorStats {
    pub seen: bool,
    pub in_degrees: BTreeSet<u32>,
    pub out_degrees: BTreeSet<u32>,
    pub out_edge_targets: BTreeSet<String>,
    pub sp_vectors: BTreeSet<String>,
}

impl OperatorStats {
    fn union_with(&mut self, other: &OperatorStats) {
        self.seen |= other.seen;
        self.in_degrees.extend(other.in_degrees.iter().copied());
        self.out_degrees.extend(other.out_degrees.iter().copied());
        self.out_edge_targets
            .extend(other.out_edge_targets.iter().cloned());
        self.sp_vectors.extend(other.sp_vectors.iter().cloned());
    }
}

/// Per-operator metric row; ratios in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub otc: f64,
    pub idc: f64,
    pub odc: f64,
    pub sec: f64,
    pub spc: f64,
    pub olc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub operators: BTreeMap<String, MetricRow>,
    pub set: MetricRow,
}

/// Coverage accumulator over a test set, built against one corpus.
///
/// Observations outside the corpus domains (operators not in the corpus,
/// repaired degrees, foreign edge targets) are recorded but clipped out of
/// the ratios, keeping every metric within [0, 1]. States built from
/// disjoint model sets merge into the state of the union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageState {
    pub config: CoverageConfig,
    types: BTreeSet<String>,
    degree_domains: BTreeMap<String, (BTreeSet<u32>, BTreeSet<u32>)>,
    per_op: BTreeMap<String, OperatorStats>,
    /// Observations of operators the corpus does not know.
    pub foreign: OperatorStats,
}

impl CoverageState {
    pub fn new(corpus: &BlockCorpus, config: CoverageConfig) -> CoverageState {
        CoverageState {
            config,
            types: corpus.operator_types.clone(),
            degree_domains: corpus.degree_domains(),
            per_op: corpus
                .operator_types
                .iter()
                .map(|t| (t.clone(), OperatorStats::default()))
                .collect(),
            foreign: OperatorStats::default(),
        }
    }

    pub fn type_count(&self) -> usize {
        self.types.len()
    }

    pub fn stats(&self, op: &str) -> Option<&OperatorStats> {
        self.per_op.get(op)
    }

    /// Folds one expanded model into the state. Pure accumulation: replaying
    /// the same model is a no-op.
    pub fn observe(&mut self, model: &ModelSpec) -> Result<(), ShapeError> {
        let metas = lenient_shapes(model)?;
        for node in &model.nodes {
            let sp = {
                let shapes: Vec<String> = if node.inputs.is_empty() {
                    vec![format_shape(&metas[&node.id].shape)]
                } else {
                    node.inputs
                        .iter()
                        .map(|(src, _)| format_shape(&metas[src].shape))
                        .collect()
                };
                let params: Vec<String> = node
                    .params
                    .iter()
                    .map(|(k, v)| format!("{k}={v:?}"))
                    .collect();
                format!("in[{}];{}", shapes.join("|"), params.join(";"))
            };
            let consumers = model.consumers(node.id);
            let targets: Vec<String> = consumers
                .iter()
                .filter_map(|(cid, _)| model.node(*cid).map(|n| n.op.clone()))
                .collect();

            let stats = self
                .per_op
                .get_mut(&node.op)
                .unwrap_or(&mut self.foreign);
            stats.seen = true;
            stats.in_degrees.insert(node.inputs.len() as u32);
            stats.out_degrees.insert(consumers.len() as u32);
            stats.out_edge_targets.extend(targets);
            stats.sp_vectors.insert(sp);
        }
        Ok(())
    }

    fn op_metrics(&self, op: &str) -> MetricRow {
        let stats = self.per_op.get(op).expect("corpus operator");
        let (in_domain, out_domain) = &self.degree_domains[op];
        let n_t = self.types.len() as f64;

        let otc = if stats.seen { 1.0 } else { 0.0 };
        let idc = ratio_clipped(&stats.in_degrees, in_domain);
        let odc = ratio_clipped(&stats.out_degrees, out_domain);
        let sec = if n_t > 0.0 {
            stats
                .out_edge_targets
                .iter()
                .filter(|t| self.types.contains(*t))
                .count() as f64
                / n_t
        } else {
            0.0
        };
        let spc =
            stats.sp_vectors.len().min(self.config.n_maxspc) as f64 / self.config.n_maxspc as f64;
        let olc = weighted_mean(&[otc, idc, odc, sec, spc], &self.config.weights_op);
        MetricRow {
            otc,
            idc,
            odc,
            sec,
            spc,
            olc,
        }
    }

    pub fn olc_op(&self, op: &str) -> f64 {
        if self.per_op.contains_key(op) {
            self.op_metrics(op).olc
        } else {
            0.0
        }
    }

    pub fn otc(&self) -> f64 {
        self.set_metrics().otc
    }
    pub fn idc(&self) -> f64 {
        self.set_metrics().idc
    }
    pub fn odc(&self) -> f64 {
        self.set_metrics().odc
    }
    pub fn sec(&self) -> f64 {
        self.set_metrics().sec
    }
    pub fn spc(&self) -> f64 {
        self.set_metrics().spc
    }

    pub fn olc(&self) -> f64 {
        self.set_metrics().olc
    }

    fn set_metrics(&self) -> MetricRow {
        let n_t = self.types.len() as f64;
        if n_t == 0.0 {
            return MetricRow {
                otc: 0.0,
                idc: 0.0,
                odc: 0.0,
                sec: 0.0,
                spc: 0.0,
                olc: 0.0,
            };
        }
        let mut sums = [0.0f64; 5];
        for op in &self.types {
            let row = self.op_metrics(op);
            sums[0] += row.otc;
            sums[1] += row.idc;
            sums[2] += row.odc;
            sums[3] += row.sec;
            sums[4] += row.spc;
        }
        let otc = sums[0] / n_t;
        let idc = sums[1] / n_t;
        let odc = sums[2] / n_t;
        let sec = sums[3] / n_t;
        let spc = sums[4] / n_t;
        let olc = weighted_mean(&[otc, idc, odc, sec, spc], &self.config.weights_set);
        MetricRow {
            otc,
            idc,
            odc,
            sec,
            spc,
            olc,
        }
    }

    pub fn report(&self) -> CoverageReport {
        CoverageReport {
            operators: self
                .types
                .iter()
                .map(|op| (op.clone(), self.op_metrics(op)))
                .collect(),
            set: self.set_metrics(),
        }
    }

    /// True iff folding in `model` strictly raises coverage under the
    /// configured gate. The state itself is untouched.
    pub fn is_new_coverage(&self, model: &ModelSpec) -> bool {
        let mut probe = self.clone();
        if probe.observe(model).is_err() {
            return false;
        }
        let set_up = probe.olc() > self.olc();
        let op_up = || {
            self.types
                .iter()
                .any(|op| probe.olc_op(op) > self.olc_op(op))
        };
        match self.config.gate {
            GateMode::SetOnly => set_up,
            GateMode::PerOperator => op_up(),
            GateMode::Either => set_up || op_up(),
        }
    }

    /// Set-union merge. Associative and commutative; both sides must share
    /// the corpus and config.
    pub fn merge(&mut self, other: &CoverageState) {
        assert_eq!(self.types, other.types, "merge across corpora");
        assert_eq!(self.config, other.config, "merge across configs");
        for (op, stats) in &other.per_op {
            self.per_op.get_mut(op).unwrap().union_with(stats);
        }
        self.foreign.union_with(&other.foreign);
    }
}

fn ratio_clipped(observed: &BTreeSet<u32>, domain: &BTreeSet<u32>) -> f64 {
    if domain.is_empty() {
        return 0.0;
    }
    observed.intersection(domain).count() as f64 / domain.len() as f64
}

fn weighted_mean(values: &[f64; 5], weights: &[f64; 5]) -> f64 {
    let total: f64 = weights.iter().sum();
    values
        .iter()
        .zip(weights)
        .map(|(v, w)| v * w)
        .sum::<f64>()
        / total
}

fn format_shape(shape: &[i64]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Plain-text table mirroring the per-operator metric columns.
pub fn render_report(report: &CoverageReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "operator", "OTC", "IDC", "ODC", "SEC", "SPC", "OLC"
    ));
    let pct = |v: f64| format!("{:.1}%", v * 100.0);
    for (name, row) in &report.operators {
        out.push_str(&format!(
            "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            name,
            pct(row.otc),
            pct(row.idc),
            pct(row.odc),
            pct(row.sec),
            pct(row.spc),
            pct(row.olc)
        ));
    }
    let s = &report.set;
    out.push_str(&format!(
        "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "(test set)",
        pct(s.otc),
        pct(s.idc),
        pct(s.odc),
        pct(s.sec),
        pct(s.spc),
        pct(s.olc)
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{example_corpus, node, ModelSpec};

    fn tiny_state() -> CoverageState {
        let config = CoverageConfig {
            n_maxspc: 10,
            ..CoverageConfig::default()
        };
        CoverageState::new(&example_corpus(), config)
    }

    /// Placeholder -> Conv2d would need params; plain Relu chains keep these
    /// tests free of solver noise.
    fn relu_chain() -> ModelSpec {
        ModelSpec {
            nodes: vec![
                node(0, "Placeholder", &[]),
                node(1, "Relu", &[0]),
                node(2, "Relu", &[1]),
            ],
            inputs: vec![vec![1, 8, 8, 3]],
            weights_seed: 0,
        }
    }

    #[test]
    fn single_observation_is_recorded() {
        let mut state = tiny_state();
        state.observe(&relu_chain()).unwrap();
        let stats = state.stats("Relu").unwrap();
        assert!(stats.seen);
        assert_eq!(stats.in_degrees, [1].into_iter().collect());
        assert_eq!(stats.out_degrees, [0, 1].into_iter().collect());
        assert!(stats.out_edge_targets.contains("Relu"));
        // Placeholder is not a corpus type: foreign bucket.
        assert!(state.foreign.seen);
    }

    #[test]
    fn empty_state_scores_zero() {
        let state = tiny_state();
        assert_eq!(state.olc(), 0.0);
        assert_eq!(state.otc(), 0.0);
    }

    #[test]
    fn single_operator_corpus_can_reach_full_coverage() {
        let corpus = crate::ir::BlockCorpus::new(vec![crate::ir::Block::single(
            "Relu",
            &[1],
            &[0],
        )])
        .unwrap();
        let config = CoverageConfig {
            n_maxspc: 1,
            ..CoverageConfig::default()
        };
        let mut state = CoverageState::new(&corpus, config);
        let model = ModelSpec {
            nodes: vec![node(0, "Placeholder", &[]), node(1, "Relu", &[0])],
            inputs: vec![vec![1, 4, 4, 1]],
            weights_seed: 0,
        };
        state.observe(&model).unwrap();
        // SEC cannot reach 1 here (Relu has no corpus-typed successor), so
        // check the four attainable components.
        let row = state.report().operators["Relu"].clone();
        assert_eq!(row.otc, 1.0);
        assert_eq!(row.idc, 1.0);
        assert_eq!(row.odc, 1.0);
        assert_eq!(row.spc, 1.0);
    }

    #[test]
    fn duplicate_model_is_not_new_coverage() {
        let mut state = tiny_state();
        let model = relu_chain();
        assert!(state.is_new_coverage(&model), "first model adds coverage");
        state.observe(&model).unwrap();
        assert!(!state.is_new_coverage(&model), "replay adds nothing");
    }

    #[test]
    fn new_out_degree_is_new_coverage() {
        let mut state = tiny_state();
        state.observe(&relu_chain()).unwrap();
        // Same ops, but the first Relu now fans out to two consumers.
        let fanout = ModelSpec {
            nodes: vec![
                node(0, "Placeholder", &[]),
                node(1, "Relu", &[0]),
                node(2, "Relu", &[1]),
                node(3, "Relu", &[1]),
            ],
            inputs: vec![vec![1, 8, 8, 3]],
            weights_seed: 0,
        };
        assert!(state.is_new_coverage(&fanout));
    }

    #[test]
    fn observation_is_monotone() {
        let mut state = tiny_state();
        let mut last = 0.0;
        for n in 2..6 {
            let nodes: Vec<_> = std::iter::once(node(0, "Placeholder", &[]))
                .chain((1..n).map(|i| node(i, "Relu", &[i - 1])))
                .collect();
            let model = ModelSpec {
                nodes,
                inputs: vec![vec![1, 4, 4, (n % 3 + 1) as i64]],
                weights_seed: 0,
            };
            state.observe(&model).unwrap();
            let olc = state.olc();
            assert!(olc >= last);
            last = olc;
        }
    }

    #[test]
    fn merge_equals_sequential_observation() {
        let models: Vec<ModelSpec> = (0..4)
            .map(|k| ModelSpec {
                nodes: vec![node(0, "Placeholder", &[]), node(1, "Relu", &[0])],
                inputs: vec![vec![1, 4, 4, 1 + k]],
                weights_seed: 0,
            })
            .collect();
        let mut together = tiny_state();
        for m in &models {
            together.observe(m).unwrap();
        }
        let mut left = tiny_state();
        let mut right = tiny_state();
        for m in &models[..2] {
            left.observe(m).unwrap();
        }
        for m in &models[2..] {
            right.observe(m).unwrap();
        }
        left.merge(&right);
        assert_eq!(left, together);
    }

    #[test]
    fn spc_caps_at_n_maxspc() {
        let config = CoverageConfig {
            n_maxspc: 3,
            ..CoverageConfig::default()
        };
        let mut state = CoverageState::new(&example_corpus(), config);
        for k in 0..5 {
            let model = ModelSpec {
                nodes: vec![node(0, "Placeholder", &[]), node(1, "Relu", &[0])],
                inputs: vec![vec![1, 4, 4, 1 + k]],
                weights_seed: 0,
            };
            state.observe(&model).unwrap();
        }
        assert_eq!(state.stats("Relu").unwrap().sp_vectors.len(), 5);
        assert_eq!(state.report().operators["Relu"].spc, 1.0);
    }
}
