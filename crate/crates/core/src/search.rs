//! Block chooser: UCT tree search over corpus blocks. Selection descends by
//! potential, expansion creates a child for the lowest-coverage operator not
//! yet on the path, simulation is delegated to the generation pipeline, and
//! backpropagation pushes the found-new-exception reward up the path. A
//! uniform-random chooser serves as the baseline.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::coverage::CoverageState;
use crate::ir::BlockCorpus;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Mcts,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Exploration constant `e`.
    pub exploration: f64,
    /// Maximum tree depth the selection may descend (tc1).
    pub max_depth: u32,
    /// Maximum times one node may be simulated (tc2).
    pub max_node_sims: u64,
    /// Expansion fan-out cap per node.
    pub max_children: usize,
    pub mode: SearchMode,
}

impl Default for SearchConfig {
    fn default() -> SearchConfig {
        SearchConfig {
            exploration: std::f64::consts::FRAC_1_SQRT_2,
            max_depth: 10,
            max_node_sims: 1,
            max_children: 3,
            mode: SearchMode::Mcts,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.exploration < 0.0 {
            return Err("exploration constant must be non-negative".into());
        }
        if self.max_depth < 1 || self.max_node_sims < 1 || self.max_children < 1 {
            return Err("tc1, tc2 and max_children must be at least 1".into());
        }
        Ok(())
    }
}

/// UCT potential `v/n + e * sqrt(ln N / n)`. Unvisited nodes rank first.
pub fn uct_potential(successes: u64, visits: u64, parent_visits: u64, exploration: f64) -> f64 {
    if visits == 0 {
        return f64::INFINITY;
    }
    let exploit = successes as f64 / visits as f64;
    let explore = exploration * ((parent_visits.max(1) as f64).ln() / visits as f64).sqrt();
    exploit + explore
}

#[derive(Debug, Clone)]
pub struct MctsNode {
    /// Corpus block index; the root carries none.
    pub block: Option<usize>,
    /// Visit count `n`.
    pub visits: u64,
    /// Success count `v`.
    pub successes: u64,
    /// Simulations run at this node itself.
    pub own_sims: u64,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    /// No simulation budget left anywhere below.
    pub saturated: bool,
}

#[derive(Debug, Clone)]
pub struct MctsTree {
    pub nodes: Vec<MctsNode>,
}

impl Default for MctsTree {
    fn default() -> MctsTree {
        MctsTree::new()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SearchError {
    #[error("search tree is exhausted; restart from a fresh root")]
    Exhausted,
}

/// One chooser decision: the node to simulate plus the block vocabulary
/// along the root path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChosenPath {
    pub node: usize,
    pub blocks: Vec<usize>,
    pub expanded: bool,
}

impl MctsTree {
    pub fn new() -> MctsTree {
        MctsTree {
            nodes: vec![MctsNode {
                block: None,
                visits: 0,
                successes: 0,
                own_sims: 0,
                children: vec![],
                parent: None,
                saturated: false,
            }],
        }
    }

    pub fn reset(&mut self) {
        *self = MctsTree::new();
    }

    pub fn depth_of(&self, mut idx: usize) -> u32 {
        let mut depth = 0;
        while let Some(parent) = self.nodes[idx].parent {
            idx = parent;
            depth += 1;
        }
        depth
    }

    fn add_child(&mut self, parent: usize, block: usize) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(MctsNode {
            block: Some(block),
            visits: 0,
            successes: 0,
            own_sims: 0,
            children: vec![],
            parent: Some(parent),
            saturated: false,
        });
        self.nodes[parent].children.push(idx);
        idx
    }

    /// Selection plus expansion. Descends by UCT through non-saturated
    /// children until a leaf; the leaf expands up to `max_children` children
    /// at once (the lowest-coverage candidate blocks not on the path) and the
    /// lowest-coverage one is simulated this round. Exhausted interiors with
    /// spare capacity refill one child instead of dying.
    pub fn choose_blocks(
        &mut self,
        coverage: &CoverageState,
        corpus: &BlockCorpus,
        cfg: &SearchConfig,
        rng: &mut SplitMix64,
    ) -> Result<ChosenPath, SearchError> {
        let mut cur = 0usize;
        let mut blocks: Vec<usize> = Vec::new();
        let mut depth = 0u32;
        loop {
            if depth >= cfg.max_depth {
                if self.nodes[cur].own_sims < cfg.max_node_sims {
                    return Ok(ChosenPath {
                        node: cur,
                        blocks,
                        expanded: false,
                    });
                }
                self.mark_saturated(cur);
                return Err(SearchError::Exhausted);
            }

            if self.nodes[cur].children.is_empty() {
                let candidates =
                    self.expansion_blocks(cur, &blocks, coverage, corpus, cfg.max_children, rng);
                if candidates.is_empty() {
                    if self.nodes[cur].own_sims < cfg.max_node_sims {
                        // No expandable block left: spend the remaining
                        // simulation budget on the path as-is.
                        return Ok(ChosenPath {
                            node: cur,
                            blocks,
                            expanded: false,
                        });
                    }
                    self.mark_saturated(cur);
                    return Err(SearchError::Exhausted);
                }
                let first = self.add_child(cur, candidates[0]);
                for &block in &candidates[1..] {
                    self.add_child(cur, block);
                }
                blocks.push(candidates[0]);
                return Ok(ChosenPath {
                    node: first,
                    blocks,
                    expanded: true,
                });
            }

            let parent_visits = self.nodes[cur].visits;
            let viable: Vec<usize> = self.nodes[cur]
                .children
                .iter()
                .copied()
                .filter(|&c| !self.nodes[c].saturated)
                .collect();

            if viable.is_empty() {
                if self.nodes[cur].children.len() < cfg.max_children {
                    let fresh =
                        self.expansion_blocks(cur, &blocks, coverage, corpus, 1, rng);
                    if let Some(&block) = fresh.first() {
                        let child = self.add_child(cur, block);
                        blocks.push(block);
                        return Ok(ChosenPath {
                            node: child,
                            blocks,
                            expanded: true,
                        });
                    }
                }
                self.mark_saturated(cur);
                return Err(SearchError::Exhausted);
            }

            let &best = viable
                .iter()
                .max_by(|&&a, &&b| {
                    let pa = uct_potential(
                        self.nodes[a].successes,
                        self.nodes[a].visits,
                        parent_visits,
                        cfg.exploration,
                    );
                    let pb = uct_potential(
                        self.nodes[b].successes,
                        self.nodes[b].visits,
                        parent_visits,
                        cfg.exploration,
                    );
                    pa.partial_cmp(&pb).unwrap_or(std::cmp::Ordering::Equal)
                })
                .expect("viable is non-empty");
            blocks.push(self.nodes[best].block.expect("children carry blocks"));
            cur = best;
            depth += 1;
        }
    }

    /// Lowest-coverage expansion candidates: operator types ranked by
    /// ascending per-operator OLC (corpus order on ties); each type maps to
    /// one of its carrying blocks (the bare operator or a subgraph containing
    /// it, uniform), skipping blocks already on the path or among the node's
    /// children. Returns up to `want` distinct blocks, lowest coverage first.
    fn expansion_blocks(
        &self,
        node: usize,
        path_blocks: &[usize],
        coverage: &CoverageState,
        corpus: &BlockCorpus,
        want: usize,
        rng: &mut SplitMix64,
    ) -> Vec<usize> {
        let mut used: BTreeSet<usize> = path_blocks
            .iter()
            .copied()
            .chain(
                self.nodes[node]
                    .children
                    .iter()
                    .map(|&c| self.nodes[c].block.expect("children carry blocks")),
            )
            .collect();

        // Operator types in first-appearance order, ranked by OLC.
        let mut types: Vec<&str> = Vec::new();
        for block in &corpus.blocks {
            for member in &block.members {
                if !types.contains(&member.as_str()) {
                    types.push(member);
                }
            }
        }
        types.sort_by(|a, b| {
            coverage
                .olc_op(a)
                .partial_cmp(&coverage.olc_op(b))
                .unwrap_or(std::cmp::Ordering::Equal)
        });

        let mut picked = Vec::new();
        for ty in types {
            if picked.len() >= want {
                break;
            }
            let candidates: Vec<usize> = corpus
                .blocks
                .iter()
                .enumerate()
                .filter(|(idx, b)| !used.contains(idx) && b.members.iter().any(|m| m == ty))
                .map(|(idx, _)| idx)
                .collect();
            if !candidates.is_empty() {
                let choice = *rng.choose(&candidates);
                used.insert(choice);
                picked.push(choice);
            }
        }
        picked
    }

    /// Pushes one simulation result up the path: every node from `node` to
    /// the root gains a visit; the success count rises by one when the
    /// simulation produced at least one new deduplicated exception (reward
    /// saturates at one however many exceptions surfaced).
    pub fn backpropagate(&mut self, node: usize, found_new_exception: bool) {
        self.nodes[node].own_sims += 1;
        let mut cur = Some(node);
        while let Some(idx) = cur {
            self.nodes[idx].visits += 1;
            if found_new_exception {
                self.nodes[idx].successes += 1;
            }
            cur = self.nodes[idx].parent;
        }
    }

    /// Saturation is marked one node at a time; ancestors discover it on
    /// their next descent and either branch (spare capacity) or saturate in
    /// turn.
    fn mark_saturated(&mut self, node: usize) {
        self.nodes[node].saturated = true;
    }
}

/// Uniform i.i.d. block draws with replacement.
pub fn random_chooser(corpus: &BlockCorpus, rng: &mut SplitMix64, block_count: usize) -> Vec<usize> {
    (0..block_count)
        .map(|_| rng.below(corpus.blocks.len()))
        .collect()
}

/// One line of the search trace log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: u64,
    pub path: Vec<String>,
    pub expanded: Option<String>,
    pub reward: bool,
    pub new_exceptions: usize,
    pub olc: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::{CoverageConfig, CoverageState};
    use crate::ir::{example_corpus, node, ModelSpec};

    fn empty_coverage(corpus: &BlockCorpus) -> CoverageState {
        CoverageState::new(corpus, CoverageConfig::default())
    }

    #[test]
    fn uct_printed_example() {
        let e = std::f64::consts::FRAC_1_SQRT_2;
        let got = uct_potential(1, 2, 4, e);
        let expect = 0.5 + e * ((4f64).ln() / 2.0).sqrt();
        assert!((got - expect).abs() < 1e-9);
        assert!((got - 1.0887).abs() < 1e-4);
    }

    #[test]
    fn zero_exploration_is_pure_exploitation() {
        assert_eq!(uct_potential(3, 4, 100, 0.0), 0.75);
    }

    #[test]
    fn potential_is_monotone_in_successes() {
        let a = uct_potential(0, 1, 10, 0.5);
        let b = uct_potential(1, 1, 10, 0.5);
        assert!(b > a);
    }

    #[test]
    fn unvisited_children_are_selected_first() {
        assert_eq!(uct_potential(0, 0, 5, 0.7), f64::INFINITY);
    }

    #[test]
    fn fresh_tree_expands_the_lowest_coverage_block() {
        let corpus = example_corpus();
        let coverage = empty_coverage(&corpus);
        let mut tree = MctsTree::new();
        let mut rng = SplitMix64::new(0);
        let path = tree
            .choose_blocks(&coverage, &corpus, &SearchConfig::default(), &mut rng)
            .unwrap();
        assert!(path.expanded);
        // All OLCs are zero; ties resolve to corpus order, so Conv2d.
        assert_eq!(path.blocks, vec![0]);
        assert_eq!(tree.depth_of(path.node), 1);
    }

    #[test]
    fn expansion_prefers_lower_olc() {
        let corpus = example_corpus();
        let mut coverage = empty_coverage(&corpus);
        // Observe Conv2d and Relu activity so Add alone stays at zero OLC.
        let conv_params: Vec<(&str, crate::ir::ParamValue)> = vec![
            ("out_channels", crate::ir::ParamValue::Int(3)),
            ("filter_h", crate::ir::ParamValue::Int(3)),
            ("filter_w", crate::ir::ParamValue::Int(3)),
            ("stride_h", crate::ir::ParamValue::Int(1)),
            ("stride_w", crate::ir::ParamValue::Int(1)),
            ("dilation_h", crate::ir::ParamValue::Int(1)),
            ("dilation_w", crate::ir::ParamValue::Int(1)),
            ("pad_h", crate::ir::ParamValue::Int(1)),
            ("pad_w", crate::ir::ParamValue::Int(1)),
        ];
        let model = ModelSpec {
            nodes: vec![
                node(0, "Placeholder", &[]),
                crate::ir::node_with_params(1, "Conv2d", &[0], &conv_params),
                node(2, "Relu", &[1]),
            ],
            inputs: vec![vec![1, 8, 8, 3]],
            weights_seed: 0,
        };
        coverage.observe(&model).unwrap();
        assert!(coverage.olc_op("Relu") > coverage.olc_op("Add"));
        assert!(coverage.olc_op("Conv2d") > coverage.olc_op("Add"));
        let mut tree = MctsTree::new();
        let mut rng = SplitMix64::new(0);
        let path = tree
            .choose_blocks(&coverage, &corpus, &SearchConfig::default(), &mut rng)
            .unwrap();
        let add_idx = corpus.block_by_name("Add").unwrap().0;
        assert_eq!(path.blocks, vec![add_idx]);
    }

    #[test]
    fn backpropagation_updates_the_whole_path() {
        let corpus = example_corpus();
        let coverage = empty_coverage(&corpus);
        let cfg = SearchConfig::default();
        let mut tree = MctsTree::new();
        let mut rng = SplitMix64::new(1);

        let first = tree.choose_blocks(&coverage, &corpus, &cfg, &mut rng).unwrap();
        tree.backpropagate(first.node, true);
        assert_eq!(tree.nodes[0].visits, 1);
        assert_eq!(tree.nodes[0].successes, 1);
        assert_eq!(tree.nodes[first.node].visits, 1);
        assert_eq!(tree.nodes[first.node].successes, 1);

        let second = tree.choose_blocks(&coverage, &corpus, &cfg, &mut rng).unwrap();
        tree.backpropagate(second.node, false);
        assert_eq!(tree.nodes[0].visits, 2);
        assert_eq!(tree.nodes[0].successes, 1, "zero reward leaves v alone");
    }

    #[test]
    fn visit_counts_are_conserved() {
        let corpus = example_corpus();
        let coverage = empty_coverage(&corpus);
        let cfg = SearchConfig {
            max_depth: 3,
            ..SearchConfig::default()
        };
        let mut tree = MctsTree::new();
        let mut rng = SplitMix64::new(2);
        for round in 0..30 {
            match tree.choose_blocks(&coverage, &corpus, &cfg, &mut rng) {
                Ok(path) => tree.backpropagate(path.node, round % 3 == 0),
                Err(SearchError::Exhausted) => break,
            }
        }
        for (idx, node) in tree.nodes.iter().enumerate() {
            let child_sum: u64 = node.children.iter().map(|&c| tree.nodes[c].visits).sum();
            assert_eq!(
                node.visits,
                child_sum + node.own_sims,
                "conservation at node {idx}"
            );
        }
    }

    #[test]
    fn no_block_repeats_within_a_path() {
        let corpus = example_corpus();
        let coverage = empty_coverage(&corpus);
        let cfg = SearchConfig {
            max_depth: 3,
            ..SearchConfig::default()
        };
        let mut tree = MctsTree::new();
        let mut rng = SplitMix64::new(3);
        for _ in 0..30 {
            match tree.choose_blocks(&coverage, &corpus, &cfg, &mut rng) {
                Ok(path) => {
                    let unique: BTreeSet<usize> = path.blocks.iter().copied().collect();
                    assert_eq!(unique.len(), path.blocks.len(), "{:?}", path.blocks);
                    tree.backpropagate(path.node, false);
                }
                Err(SearchError::Exhausted) => return,
            }
        }
    }

    #[test]
    fn depth_cap_returns_the_path_as_is() {
        let corpus = example_corpus();
        let coverage = empty_coverage(&corpus);
        let cfg = SearchConfig {
            max_depth: 2,
            max_children: 1,
            max_node_sims: 2,
            ..SearchConfig::default()
        };
        let mut tree = MctsTree::new();
        let mut rng = SplitMix64::new(4);
        // Two expansions build the single chain root -> c1 -> c2.
        for _ in 0..2 {
            let path = tree.choose_blocks(&coverage, &corpus, &cfg, &mut rng).unwrap();
            tree.backpropagate(path.node, false);
        }
        // Third call hits the depth cap at c2; c2 has one sim left (tc2=2).
        let path = tree.choose_blocks(&coverage, &corpus, &cfg, &mut rng).unwrap();
        assert!(!path.expanded);
        assert_eq!(tree.depth_of(path.node), 2);
        tree.backpropagate(path.node, false);
        // Now c2 is out of budget: the chain is exhausted.
        assert_eq!(
            tree.choose_blocks(&coverage, &corpus, &cfg, &mut rng),
            Err(SearchError::Exhausted)
        );
    }

    #[test]
    fn equal_ratios_select_the_least_visited() {
        // Two children with v/n = 0: the exploration term dominates and the
        // less-visited child wins.
        let mut tree = MctsTree::new();
        let a = tree.add_child(0, 0);
        let b = tree.add_child(0, 1);
        tree.nodes[a].visits = 5;
        tree.nodes[b].visits = 1;
        tree.nodes[0].visits = 6;
        let cfg = SearchConfig {
            max_children: 2,
            ..SearchConfig::default()
        };
        let corpus = example_corpus();
        let coverage = empty_coverage(&corpus);
        let mut rng = SplitMix64::new(5);
        // Root has no capacity (2 children = cap); selection must descend
        // into b and expand there.
        let path = tree.choose_blocks(&coverage, &corpus, &cfg, &mut rng).unwrap();
        assert_eq!(path.blocks[0], 1, "least-visited child is preferred");
    }

    #[test]
    fn random_chooser_is_uniform() {
        let corpus = example_corpus();
        let mut rng = SplitMix64::new(6);
        assert_eq!(random_chooser(&corpus, &mut rng, 5).len(), 5);

        let singleton = crate::ir::BlockCorpus::new(vec![crate::ir::Block::single(
            "Relu",
            &[1],
            &[0, 1],
        )])
        .unwrap();
        assert_eq!(random_chooser(&singleton, &mut rng, 3), vec![0, 0, 0]);

        let mut counts = [0u32; 3];
        let draws = 10_000;
        for _ in 0..draws {
            counts[random_chooser(&corpus, &mut rng, 1)[0]] += 1;
        }
        let expect = draws as f64 / 3.0;
        let sigma = (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - expect).abs() < 3.0 * sigma,
                "counts {counts:?} outside 3 sigma"
            );
        }
    }
}
