//! The four model-level mutations (edge addition/removal, block node
//! addition/removal), the two source-level mutations (tensor shape and
//! parameter mutation), and the stochastic selector that composes a
//! mutation action for each round.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ir::{Block, BlockCorpus, BlockInstance, BlockKind, Graph, Op, OperatorKind, ParamDomain, Params};
use crate::rng::SplitMix64;
use crate::shapecalc::{sample_domain, solve_same_shape_params, ShapeDomain, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MutationKind {
    Gea,
    Ger,
    Bna,
    Bnr,
    Tsm,
    Pm,
}

impl MutationKind {
    pub fn all() -> [MutationKind; 6] {
        [
            MutationKind::Gea,
            MutationKind::Ger,
            MutationKind::Bna,
            MutationKind::Bnr,
            MutationKind::Tsm,
            MutationKind::Pm,
        ]
    }

    pub fn is_model_level(self) -> bool {
        matches!(
            self,
            MutationKind::Gea | MutationKind::Ger | MutationKind::Bna | MutationKind::Bnr
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationConfig {
    /// Model-level mutation probability, the `r` in the count formulas.
    pub rate: f64,
    pub enabled: BTreeSet<MutationKind>,
}

impl Default for MutationConfig {
    fn default() -> MutationConfig {
        MutationConfig {
            rate: 0.1,
            enabled: MutationKind::all().into_iter().collect(),
        }
    }
}

impl MutationConfig {
    pub fn disabled() -> MutationConfig {
        MutationConfig {
            rate: 0.0,
            enabled: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err("mutation rate must satisfy 0 <= r < 1".into());
        }
        Ok(())
    }
}

/// The mutations chosen for one round, in canonical application order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationAction {
    pub mutations: Vec<MutationKind>,
    pub rate: f64,
}

impl MutationAction {
    pub fn none() -> MutationAction {
        MutationAction {
            mutations: vec![],
            rate: 0.0,
        }
    }

    pub fn includes(&self, kind: MutationKind) -> bool {
        self.mutations.contains(&kind)
    }
}

/// Chooses a non-empty subset of the enabled mutations. Errors only when the
/// config enables nothing (checked at load time by the harness).
pub fn select_mutations(cfg: &MutationConfig, rng: &mut SplitMix64) -> MutationAction {
    let enabled: Vec<MutationKind> = MutationKind::all()
        .into_iter()
        .filter(|k| cfg.enabled.contains(k))
        .collect();
    if enabled.is_empty() {
        return MutationAction::none();
    }
    let mut chosen: Vec<MutationKind> = enabled.iter().copied().filter(|_| rng.coin(0.5)).collect();
    if chosen.is_empty() {
        chosen.push(*rng.choose(&enabled));
    }
    MutationAction {
        mutations: chosen,
        rate: cfg.rate,
    }
}

/// What a model-level mutation actually did; `shortfall` means fewer edges
/// were eligible than the count formula asked for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationReport {
    pub kind: MutationKind,
    pub requested: usize,
    pub applied: usize,
    pub shortfall: bool,
}

fn topo_positions(g: &Graph) -> std::collections::BTreeMap<u32, usize> {
    g.topo_order()
        .expect("mutations run on DAGs")
        .into_iter()
        .enumerate()
        .map(|(pos, id)| (id, pos))
        .collect()
}

/// Graph edge addition: adds exactly `ceil(node_count * r)` edges, each from
/// an earlier to a later node in topological order and each respecting both
/// endpoints' degree ranges.
pub fn gea(
    g: &Graph,
    corpus: &BlockCorpus,
    rate: f64,
    rng: &mut SplitMix64,
) -> (Graph, MutationReport) {
    let mut g = g.clone();
    let requested = (g.node_count() as f64 * rate).ceil() as usize;
    let pos = topo_positions(&g);
    let mut applied = 0;
    while applied < requested {
        let mut eligible: Vec<(u32, u32)> = Vec::new();
        for u in &g.nodes {
            let (_, out_range) = g.degree_ranges(u.id, corpus);
            if !out_range.contains(&(g.out_degree(u.id) + 1)) {
                continue;
            }
            for v in &g.nodes {
                if pos[&u.id] >= pos[&v.id] {
                    continue;
                }
                let (in_range, _) = g.degree_ranges(v.id, corpus);
                if in_range.contains(&(g.in_degree(v.id) + 1)) {
                    eligible.push((u.id, v.id));
                }
            }
        }
        if eligible.is_empty() {
            break;
        }
        let (u, v) = *rng.choose(&eligible);
        g.add_edge(u, v);
        applied += 1;
    }
    let report = MutationReport {
        kind: MutationKind::Gea,
        requested,
        applied,
        shortfall: applied < requested,
    };
    (g, report)
}

/// Graph edge removal: deletes exactly `floor(node_count * r)` edges; an
/// edge is eligible only if both endpoints' degrees stay inside their
/// declared ranges after removal.
pub fn ger(
    g: &Graph,
    corpus: &BlockCorpus,
    rate: f64,
    rng: &mut SplitMix64,
) -> (Graph, MutationReport) {
    let mut g = g.clone();
    let requested = (g.node_count() as f64 * rate).floor() as usize;
    let mut applied = 0;
    while applied < requested {
        let eligible: Vec<crate::ir::Edge> = g
            .edges
            .iter()
            .copied()
            .filter(|e| {
                let (_, src_out) = g.degree_ranges(e.src, corpus);
                let (dst_in, _) = g.degree_ranges(e.dst, corpus);
                src_out.contains(&(g.out_degree(e.src) - 1))
                    && dst_in.contains(&(g.in_degree(e.dst) - 1))
            })
            .collect();
        if eligible.is_empty() {
            break;
        }
        let edge = *rng.choose(&eligible);
        g.remove_edge(edge);
        applied += 1;
    }
    let report = MutationReport {
        kind: MutationKind::Ger,
        requested,
        applied,
        shortfall: applied < requested,
    };
    (g, report)
}

fn resolve_subgraph<'a>(instance: &'a BlockInstance, corpus: &'a BlockCorpus) -> Option<&'a Block> {
    match instance {
        BlockInstance::FromCorpus(idx) => {
            let b = &corpus.blocks[*idx];
            b.is_subgraph().then_some(b)
        }
        BlockInstance::Derived(b) => b.is_subgraph().then_some(b),
        BlockInstance::Operator(_) => None,
    }
}

/// Block node addition: per subgraph instance, with probability `r`, one
/// member is duplicated in parallel with the original (same inner input
/// sources). Its output joins a variadic inner consumer when the original
/// feeds one; otherwise the duplicate becomes an extra block output.
pub fn bna(
    g: &Graph,
    corpus: &BlockCorpus,
    rate: f64,
    rng: &mut SplitMix64,
) -> (Graph, MutationReport) {
    let mut g = g.clone();
    let mut applied = 0;
    let mut instances = 0;
    for node in g.nodes.iter_mut() {
        let Some(instance) = node.block.as_ref() else { continue };
        let Some(block) = resolve_subgraph(instance, corpus) else { continue };
        instances += 1;
        if !rng.coin(rate) {
            continue;
        }
        let mut block = block.clone();
        let victim = rng.below(block.members.len()) as u32;
        let dup = block.members.len() as u32;
        block.members.push(block.members[victim as usize].clone());
        block
            .member_params
            .push(block.member_params[victim as usize].clone());
        let edges: Vec<(u32, u32)> = block.inner_edges.clone();
        for (src, dst) in edges {
            if dst == victim {
                block.inner_edges.push((src, dup));
            }
            if src == victim {
                let consumer = &block.members[dst as usize];
                if matches!(crate::ir::arity_of(consumer), crate::ir::Arity::Variadic { .. }) {
                    block.inner_edges.push((dup, dst));
                }
            }
        }
        block.name = format!("{}+{}", block.name, block.members[dup as usize]);
        node.block = Some(BlockInstance::Derived(block));
        applied += 1;
    }
    let report = MutationReport {
        kind: MutationKind::Bna,
        requested: instances,
        applied,
        shortfall: false,
    };
    (g, report)
}

/// Block node removal: per subgraph instance, with probability `r`, one
/// member and its incident inner edges are removed. Members left without an
/// inner input expose external input slots instead.
pub fn bnr(
    g: &Graph,
    corpus: &BlockCorpus,
    rate: f64,
    rng: &mut SplitMix64,
) -> (Graph, MutationReport) {
    let mut g = g.clone();
    let mut applied = 0;
    let mut instances = 0;
    for node in g.nodes.iter_mut() {
        let Some(instance) = node.block.as_ref() else { continue };
        let Some(block) = resolve_subgraph(instance, corpus) else { continue };
        instances += 1;
        if !rng.coin(rate) || block.members.len() < 2 {
            continue;
        }
        let mut block = block.clone();
        let victim = rng.below(block.members.len()) as u32;
        block.members.remove(victim as usize);
        block.member_params.remove(victim as usize);
        block.inner_edges.retain(|&(s, d)| s != victim && d != victim);
        for edge in block.inner_edges.iter_mut() {
            if edge.0 > victim {
                edge.0 -= 1;
            }
            if edge.1 > victim {
                edge.1 -= 1;
            }
        }
        if block.members.len() == 1 {
            block.kind = BlockKind::SingleOperator;
            block.inner_edges.clear();
        }
        node.block = Some(BlockInstance::Derived(block));
        applied += 1;
    }
    let report = MutationReport {
        kind: MutationKind::Bnr,
        requested: instances,
        applied,
        shortfall: false,
    };
    (g, report)
}

/// Applies the action's model-level mutations in canonical order.
pub fn apply_model_mutations(
    g: &Graph,
    corpus: &BlockCorpus,
    action: &MutationAction,
    rng: &mut SplitMix64,
) -> (Graph, Vec<MutationReport>) {
    let mut g = g.clone();
    let mut reports = Vec::new();
    for kind in &action.mutations {
        let (next, report) = match kind {
            MutationKind::Gea => gea(&g, corpus, action.rate, rng),
            MutationKind::Ger => ger(&g, corpus, action.rate, rng),
            MutationKind::Bna => bna(&g, corpus, action.rate, rng),
            MutationKind::Bnr => bnr(&g, corpus, action.rate, rng),
            _ => continue,
        };
        g = next;
        reports.push(report);
    }
    (g, reports)
}

/// Tensor shape mutation: resamples a non-empty subset of dims from the
/// shape domain.
pub fn tsm(shape: &[i64], domain: &ShapeDomain, rng: &mut SplitMix64) -> Vec<i64> {
    let mut out = shape.to_vec();
    let mut dims: Vec<usize> = (0..shape.len()).filter(|_| rng.coin(0.5)).collect();
    if dims.is_empty() {
        dims.push(rng.below(shape.len()));
    }
    for d in dims {
        out[d] = *rng.choose(domain.dim_choices(d));
    }
    out
}

/// Parameter mutation for one node: each parameter is selected with
/// probability one half (at least one forced). Closed-domain parameters are
/// resampled directly; selecting any solver-owned parameter re-solves the
/// whole constrained group so the result stays inside Eqs. (9)-(13).
pub fn pm(
    params: &Params,
    kind: &OperatorKind,
    input_shape: Option<&[i64]>,
    solver: &SolverConfig,
    domain: &ShapeDomain,
    rng: &mut SplitMix64,
) -> Params {
    if params.is_empty() {
        return params.clone();
    }
    let keys: Vec<String> = params.keys().cloned().collect();
    let mut selected: BTreeSet<String> = keys.iter().filter(|_| rng.coin(0.5)).cloned().collect();
    if selected.is_empty() {
        selected.insert(rng.choose(&keys).clone());
    }

    let mut out = params.clone();
    let op = Op::from_name(&kind.name);
    let solver_owned: BTreeSet<String> = kind
        .param_schema
        .iter()
        .filter(|s| s.domain == ParamDomain::ShapeDependent)
        .map(|s| s.name.clone())
        .collect();

    let needs_resolve = selected.iter().any(|k| solver_owned.contains(k));
    if needs_resolve {
        if let (Some(op), Some(shape)) = (op, input_shape) {
            if op.is_padded_spatial() {
                if let Ok(solved) = solve_same_shape_params(shape, op, kind, solver, rng) {
                    for key in &solver_owned {
                        if let Some(v) = solved.get(key) {
                            out.insert(key.clone(), v.clone());
                        }
                    }
                }
            } else {
                // Re-derive the free-form solved params (slice windows,
                // permutations, paddings) from the current input shape.
                resample_shape_dependent(&mut out, op, shape, domain, rng);
            }
        }
    }
    for key in &selected {
        if solver_owned.contains(key) {
            continue; // handled above
        }
        if let Some(spec) = kind.param_schema.iter().find(|s| s.name == *key) {
            if let Some(v) = sample_domain(&spec.domain, rng) {
                out.insert(key.clone(), v);
            }
        }
    }
    out
}

fn resample_shape_dependent(
    out: &mut Params,
    op: Op,
    shape: &[i64],
    domain: &ShapeDomain,
    rng: &mut SplitMix64,
) {
    use crate::ir::ParamValue;
    match op {
        Op::Slice => {
            let mut begin = Vec::new();
            let mut size = Vec::new();
            for &dim in shape {
                let b = rng.int_in(0, dim - 1);
                begin.push(b);
                size.push(rng.int_in(1, dim - b));
            }
            out.insert("begin".into(), ParamValue::IntList(begin));
            out.insert("size".into(), ParamValue::IntList(size));
        }
        Op::Transpose => {
            let mut perm: Vec<i64> = (0..shape.len() as i64).collect();
            rng.shuffle(&mut perm);
            out.insert("perm".into(), ParamValue::IntList(perm));
        }
        Op::Reshape => {
            let mut dims = shape.to_vec();
            rng.shuffle(&mut dims);
            out.insert("shape".into(), ParamValue::IntList(dims));
        }
        Op::Pad => {
            let mut paddings = vec![0i64; 2 * shape.len()];
            for d in 1..shape.len() {
                paddings[2 * d] = rng.int_in(0, 2);
                paddings[2 * d + 1] = rng.int_in(0, 2);
            }
            out.insert("paddings".into(), ParamValue::IntList(paddings));
        }
        Op::Const => {
            out.insert("shape".into(), ParamValue::IntList(domain.sample(rng)));
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{builtin_corpus, example_corpus};

    /// Assigned 4-node diamond over the three-operator corpus:
    /// ph -> a(Relu) -> {b(Relu), c(Relu)} -> d(Add).
    fn fixture(corpus: &BlockCorpus) -> Graph {
        let relu = corpus.block_by_name("Relu").unwrap().0;
        let add = corpus.block_by_name("Add").unwrap().0;
        let mut g = Graph::new();
        let ph = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let a = g.add_node(Some(BlockInstance::FromCorpus(relu)));
        let b = g.add_node(Some(BlockInstance::FromCorpus(relu)));
        let c = g.add_node(Some(BlockInstance::FromCorpus(relu)));
        let d = g.add_node(Some(BlockInstance::FromCorpus(add)));
        g.add_edge(ph, a);
        g.add_edge(a, b);
        g.add_edge(a, c);
        g.add_edge(b, d);
        g.add_edge(c, d);
        g
    }

    #[test]
    fn gea_zero_rate_is_identity() {
        let corpus = example_corpus();
        let g = fixture(&corpus);
        let mut rng = SplitMix64::new(0);
        let (out, report) = gea(&g, &corpus, 0.0, &mut rng);
        assert_eq!(out, g);
        assert_eq!(report.requested, 0);
    }

    #[test]
    fn gea_count_follows_the_ceiling() {
        let corpus = builtin_corpus();
        let concat = corpus.block_by_name("Concat").unwrap().0;
        // A wide fan of concat nodes gives plenty of eligible pairs.
        let mut g = Graph::new();
        let ph = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let mut prev = ph;
        for _ in 0..9 {
            let c = g.add_node(Some(BlockInstance::FromCorpus(concat)));
            g.add_edge(prev, c);
            g.add_edge(ph, c);
            prev = c;
        }
        assert_eq!(g.node_count(), 10);
        let mut rng = SplitMix64::new(3);
        let (out, report) = gea(&g, &corpus, 0.1, &mut rng);
        assert_eq!(report.requested, 1, "ceil(10 * 0.1)");
        assert!(!report.shortfall);
        assert_eq!(out.edges.len(), g.edges.len() + 1);
        assert!(out.is_acyclic());
    }

    #[test]
    fn gea_respects_degree_ranges() {
        let corpus = example_corpus();
        let g = fixture(&corpus);
        // Relu takes exactly one input and Add exactly two; every node is
        // full, so nothing is eligible and the mutation reports a shortfall.
        let mut rng = SplitMix64::new(1);
        let (out, report) = gea(&g, &corpus, 0.2, &mut rng);
        assert_eq!(report.requested, 1);
        assert!(report.shortfall);
        assert_eq!(out.edges.len(), g.edges.len());
    }

    #[test]
    fn ger_count_follows_the_floor() {
        let corpus = example_corpus();
        let g = fixture(&corpus);
        let mut rng = SplitMix64::new(2);
        // floor(5 * 0.1) = 0: identity.
        let (out, report) = ger(&g, &corpus, 0.1, &mut rng);
        assert_eq!(report.requested, 0);
        assert_eq!(out, g);
    }

    #[test]
    fn ger_skips_edges_that_would_break_degree_ranges() {
        let corpus = example_corpus();
        let g = fixture(&corpus);
        // Every edge removal would drop some endpoint out of its range
        // (Relu in {1}, Add in {2}, out ranges contain all smaller values).
        // The only removable edges are a->b and a->c (out 2 -> 1 is fine,
        // b/c in 1 -> 0 is not). So nothing is eligible.
        let mut rng = SplitMix64::new(2);
        let (out, report) = ger(&g, &corpus, 0.4, &mut rng);
        assert_eq!(report.requested, 2, "floor(5 * 0.4)");
        assert!(report.shortfall);
        assert_eq!(out.edges.len(), g.edges.len());
    }

    #[test]
    fn ger_removes_when_ranges_allow() {
        let corpus = builtin_corpus();
        let concat = corpus.block_by_name("Concat").unwrap().0;
        let mut g = Graph::new();
        let ph = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let a = g.add_node(Some(BlockInstance::FromCorpus(concat)));
        for _ in 0..4 {
            g.add_edge(ph, a);
        }
        let mut rng = SplitMix64::new(9);
        let (out, report) = ger(&g, &corpus, 0.5, &mut rng);
        assert_eq!(report.requested, 1);
        assert!(!report.shortfall);
        assert_eq!(out.edges.len(), 3);
        // Slots stay dense after removal.
        let slots: Vec<u32> = out.in_edges(a).iter().map(|e| e.dst_slot).collect();
        assert_eq!(slots, vec![0, 1, 2]);
    }

    #[test]
    fn bna_is_vacuous_without_subgraphs() {
        let corpus = example_corpus();
        let g = fixture(&corpus);
        let mut rng = SplitMix64::new(0);
        let (out, report) = bna(&g, &corpus, 1.0, &mut rng);
        assert_eq!(out, g);
        assert_eq!(report.requested, 0);
    }

    #[test]
    fn bna_certain_rate_adds_one_member() {
        let corpus = builtin_corpus();
        let sub = corpus.block_by_name("Conv2d+BiasAdd+Relu").unwrap().0;
        let mut g = Graph::new();
        let ph = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let s = g.add_node(Some(BlockInstance::FromCorpus(sub)));
        g.add_edge(ph, s);
        let mut rng = SplitMix64::new(4);
        let (out, report) = bna(&g, &corpus, 1.0, &mut rng);
        assert_eq!(report.applied, 1);
        match out.node(s).unwrap().block.as_ref().unwrap() {
            BlockInstance::Derived(b) => {
                assert_eq!(b.members.len(), 4);
                assert!(b.inner_edges.len() >= 2);
            }
            other => panic!("expected derived block, got {other:?}"),
        }
    }

    #[test]
    fn bna_frequency_tracks_the_rate() {
        let corpus = builtin_corpus();
        let sub = corpus.block_by_name("Mul+Add+Relu").unwrap().0;
        let mut g = Graph::new();
        let ph = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let mut prev = ph;
        for _ in 0..10 {
            let s = g.add_node(Some(BlockInstance::FromCorpus(sub)));
            g.add_edge(prev, s);
            g.add_edge(ph, s);
            g.add_edge(ph, s);
            prev = s;
        }
        let mut hits = 0u32;
        let mut total = 0u32;
        for seed in 0..100 {
            let mut rng = SplitMix64::new(seed);
            let (_, report) = bna(&g, &corpus, 0.2, &mut rng);
            hits += report.applied as u32;
            total += report.requested as u32;
        }
        let freq = hits as f64 / total as f64;
        assert!((freq - 0.2).abs() < 0.05, "duplication frequency {freq}");
    }

    #[test]
    fn bnr_removes_the_member_and_its_edges() {
        let corpus = builtin_corpus();
        let sub_idx = corpus.block_by_name("Mul+Add+Relu").unwrap().0;
        let mut g = Graph::new();
        let ph = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let s = g.add_node(Some(BlockInstance::FromCorpus(sub_idx)));
        for _ in 0..3 {
            g.add_edge(ph, s);
        }
        // Find a seed whose victim is the Mul (member 0): the result should
        // be Add -> Relu, the structure of deleting Mul from the
        // multiply-add chain.
        for seed in 0..100 {
            let mut rng = SplitMix64::new(seed);
            let (out, report) = bnr(&g, &corpus, 1.0, &mut rng);
            assert_eq!(report.applied, 1);
            let BlockInstance::Derived(b) = out.node(s).unwrap().block.as_ref().unwrap() else {
                panic!("expected derived block");
            };
            assert_eq!(b.members.len(), 2);
            if b.members == ["Add", "Relu"] {
                assert_eq!(b.inner_edges, vec![(0, 1)]);
                return;
            }
        }
        panic!("no seed removed the Mul member");
    }

    #[test]
    fn bnr_zero_rate_is_identity() {
        let corpus = builtin_corpus();
        let sub = corpus.block_by_name("Conv2d+BiasAdd+Relu").unwrap().0;
        let mut g = Graph::new();
        let ph = g.add_node(Some(BlockInstance::Operator("Placeholder".into())));
        let s = g.add_node(Some(BlockInstance::FromCorpus(sub)));
        g.add_edge(ph, s);
        let mut rng = SplitMix64::new(0);
        let (out, _) = bnr(&g, &corpus, 0.0, &mut rng);
        assert_eq!(out, g);
    }

    #[test]
    fn tsm_outputs_stay_in_the_domain() {
        let domain = ShapeDomain::default();
        let mut rng = SplitMix64::new(5);
        for _ in 0..1000 {
            let out = tsm(&[1, 8, 8, 3], &domain, &mut rng);
            assert!(domain.contains(&out), "{out:?}");
        }
    }

    #[test]
    fn tsm_singleton_domain_is_identity() {
        let domain = ShapeDomain {
            batch: vec![1],
            spatial: vec![8],
            channel: vec![3],
        };
        let mut rng = SplitMix64::new(6);
        for _ in 0..100 {
            assert_eq!(tsm(&[1, 8, 8, 3], &domain, &mut rng), vec![1, 8, 8, 3]);
        }
    }

    #[test]
    fn pm_conv_params_stay_solved() {
        let kind = OperatorKind::resolve("Conv2d");
        let solver = SolverConfig::default();
        let domain = ShapeDomain::default();
        let shape = [1i64, 8, 8, 3];
        let mut rng = SplitMix64::new(7);
        let base =
            solve_same_shape_params(&shape, Op::Conv2d, &kind, &solver, &mut rng).unwrap();
        for _ in 0..1000 {
            let mutated = pm(&base, &kind, Some(&shape), &solver, &domain, &mut rng);
            let get = |k: &str| mutated[k].as_int().unwrap();
            let (i, f, p, s, d) = (8, get("filter_h"), get("pad_h"), get("stride_h"), get("dilation_h"));
            assert!((0..=f).contains(&p));
            assert!((1..=solver.max_stride).contains(&s));
            assert!((1..=solver.max_dilation).contains(&d));
            assert_eq!((i + 2 * p - d * (f - 1)) / s, i);
        }
    }

    #[test]
    fn pm_singleton_enumeration_is_unchanged() {
        let kind = OperatorKind::resolve("Conv2d");
        let solver = SolverConfig::default();
        let domain = ShapeDomain::default();
        let shape = [1i64, 8, 8, 3];
        let mut rng = SplitMix64::new(8);
        let base = solve_same_shape_params(&shape, Op::Conv2d, &kind, &solver, &mut rng).unwrap();
        for _ in 0..200 {
            let mutated = pm(&base, &kind, Some(&shape), &solver, &domain, &mut rng);
            assert_eq!(mutated["padding"].as_str(), Some("SAME"));
        }
    }

    #[test]
    fn selector_forced_choice_and_support() {
        let mut rng = SplitMix64::new(9);
        let only_tsm = MutationConfig {
            rate: 0.1,
            enabled: [MutationKind::Tsm].into_iter().collect(),
        };
        for _ in 0..50 {
            let action = select_mutations(&only_tsm, &mut rng);
            assert_eq!(action.mutations, vec![MutationKind::Tsm]);
        }

        let all = MutationConfig::default();
        let mut seen: BTreeSet<MutationKind> = BTreeSet::new();
        for _ in 0..10_000 {
            let action = select_mutations(&all, &mut rng);
            assert!(!action.mutations.is_empty());
            seen.extend(action.mutations);
        }
        assert_eq!(seen.len(), 6, "every enabled mutation appears");
    }

    #[test]
    fn empty_enabled_set_selects_nothing() {
        let mut rng = SplitMix64::new(10);
        let action = select_mutations(&MutationConfig::disabled(), &mut rng);
        assert!(action.mutations.is_empty());
    }

    #[test]
    fn mutations_preserve_dag_and_slots() {
        let corpus = builtin_corpus();
        for seed in 0..200 {
            let mut rng = SplitMix64::new(seed);
            let cfg = crate::graphgen::GraphGenConfig {
                model: if seed % 2 == 0 {
                    crate::graphgen::GraphModel::Ws
                } else {
                    crate::graphgen::GraphModel::Rn
                },
                n: 3 + (seed as usize % 8),
                k: 4,
                p: 0.5,
                seed,
            };
            let topo = crate::graphgen::generate_topology(&cfg).unwrap();
            let assigned =
                crate::graphgen::assign_blocks(&topo, &corpus, None, &mut rng).unwrap();
            let action = MutationAction {
                mutations: vec![
                    MutationKind::Gea,
                    MutationKind::Ger,
                    MutationKind::Bna,
                    MutationKind::Bnr,
                ],
                rate: 0.2,
            };
            let (mutated, _) = apply_model_mutations(&assigned, &corpus, &action, &mut rng);
            assert!(mutated.is_acyclic(), "seed {seed}");
            for node in &mutated.nodes {
                let slots: Vec<u32> = mutated
                    .in_edges(node.id)
                    .iter()
                    .map(|e| e.dst_slot)
                    .collect();
                let expect: Vec<u32> = (0..slots.len() as u32).collect();
                assert_eq!(slots, expect, "seed {seed} node {}", node.id);
            }
        }
    }
}
