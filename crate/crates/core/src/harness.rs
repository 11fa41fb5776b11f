//! Campaign orchestration: iterate choose -> mutate -> generate -> coverage
//! gate -> execute -> backpropagate until the target number of retained test
//! inputs, with everything persisted under the campaign directory and fully
//! reproducible from the config and master seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coverage::{render_report, CoverageConfig, CoverageState};
use crate::exec::{
    Backend, DedupRegistry, ExternalEngine, InfraError, OptimizedOptions, SeededBug, TrialOutcome,
};
use crate::graphgen::{assign_blocks, generate_topology, GraphGenConfig, GraphModel};
use crate::ir::{
    corpus_to_json, expand_blocks_with_schemas, serialize_model, BlockCorpus, ModelSpec,
};
use crate::mutation::{
    apply_model_mutations, pm, select_mutations, tsm, MutationAction, MutationConfig, MutationKind,
};
use crate::rng::SplitMix64;
use crate::search::{random_chooser, MctsTree, SearchConfig, SearchError, SearchMode, TraceRecord};
use crate::shapecalc::{
    assign_params, infer_shapes, insert_aggregation_adapters, lenient_shapes, merge_pads,
    ShapeDomain, SolverConfig,
};

/// Graph-generation settings for a campaign: which random-graph models to
/// draw from and their parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSettings {
    pub models: Vec<GraphModel>,
    pub k_choices: Vec<u32>,
    pub p_ws: f64,
    pub p_rn: f64,
}

impl Default for GraphSettings {
    fn default() -> GraphSettings {
        GraphSettings {
            models: vec![GraphModel::Ws, GraphModel::Rn],
            k_choices: vec![2, 4, 6],
            p_ws: 0.5,
            p_rn: 0.9,
        }
    }
}

/// Which engine runs opposite the reference interpreter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendChoice {
    Optimized { bugs: Vec<String> },
    External { cmd: String, timeout_secs: u64 },
}

impl Default for BackendChoice {
    fn default() -> BackendChoice {
        BackendChoice::Optimized { bugs: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    /// Target number of retained test inputs (tc0).
    pub tc0: usize,
    /// Models generated per round.
    pub batch_size: usize,
    /// Inclusive range of blocks (graph nodes) per model.
    pub block_count: (usize, usize),
    pub graph: GraphSettings,
    pub mutation: MutationConfig,
    pub coverage: CoverageConfig,
    pub search: SearchConfig,
    pub solver: SolverConfig,
    pub shapes: ShapeDomain,
    pub backend: BackendChoice,
    pub master_seed: u64,
    /// Execute models the coverage gate discarded as well.
    pub execute_discarded: bool,
    /// Generation retries per round before the round is skipped.
    pub retries: u64,
    /// Safety cap on rounds; 0 means tc0 * 1000.
    pub max_rounds: u64,
    /// Largest tensor a generated model may carry (elements). Chained
    /// concatenations can grow dims geometrically; oversized candidates are
    /// regenerated.
    pub max_tensor_elems: usize,
    /// Cap on the summed element count over all node outputs of one model.
    pub max_model_elems: usize,
}

impl Default for CampaignConfig {
    fn default() -> CampaignConfig {
        CampaignConfig {
            tc0: 50,
            batch_size: 1,
            block_count: (1, 15),
            graph: GraphSettings::default(),
            mutation: MutationConfig::default(),
            coverage: CoverageConfig::default(),
            search: SearchConfig::default(),
            solver: SolverConfig::default(),
            shapes: ShapeDomain::default(),
            backend: BackendChoice::default(),
            master_seed: 0,
            execute_discarded: false,
            retries: 10,
            max_rounds: 0,
            max_tensor_elems: 1 << 20,
            max_model_elems: 1 << 22,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("bad campaign config: {0}")]
    Config(String),
    #[error(transparent)]
    Infra(#[from] InfraError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus: {0}")]
    Corpus(#[from] crate::ir::CorpusError),
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), CampaignError> {
        if self.tc0 < 1 {
            return Err(CampaignError::Config("tc0 must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(CampaignError::Config("batch_size must be at least 1".into()));
        }
        if self.block_count.0 < 1 || self.block_count.0 > self.block_count.1 {
            return Err(CampaignError::Config("block_count range is inverted".into()));
        }
        if self.graph.models.is_empty() || self.graph.k_choices.is_empty() {
            return Err(CampaignError::Config("graph settings are empty".into()));
        }
        self.mutation
            .validate()
            .map_err(CampaignError::Config)?;
        self.coverage
            .validate()
            .map_err(CampaignError::Config)?;
        self.search.validate().map_err(CampaignError::Config)?;
        self.solver.validate().map_err(CampaignError::Config)?;
        if let BackendChoice::Optimized { bugs } = &self.backend {
            crate::exec::parse_bug_mask(&bugs.join(","))
                .map_err(CampaignError::Config)?;
        }
        Ok(())
    }

    fn round_cap(&self) -> u64 {
        if self.max_rounds > 0 {
            self.max_rounds
        } else {
            self.tc0 as u64 * 1000
        }
    }

    fn make_backend(&self, workdir: &Path) -> Result<Backend, CampaignError> {
        Ok(match &self.backend {
            BackendChoice::Optimized { bugs } => {
                let mask = crate::exec::parse_bug_mask(&bugs.join(","))
                    .map_err(CampaignError::Config)?;
                Backend::Optimized(OptimizedOptions::with_bugs(mask))
            }
            BackendChoice::External { cmd, timeout_secs } => {
                let mut engine = ExternalEngine::new(cmd, &workdir.join("engine"));
                engine.timeout = std::time::Duration::from_secs(*timeout_secs);
                Backend::External(engine)
            }
        })
    }
}

/// One line of `outcomes.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub model: String,
    pub round: u64,
    pub retained: bool,
    pub outcome: TrialOutcome,
    pub dedup_key: Option<String>,
    pub new_entry: bool,
    pub fired: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub retained: usize,
    pub rounds: u64,
    pub executed: u64,
    pub deduplicated_exceptions: usize,
    pub raw_exceptions: u64,
    pub final_olc: f64,
}

pub struct CampaignResult {
    pub summary: CampaignSummary,
    pub registry: DedupRegistry,
    pub coverage: CoverageState,
    pub retained: Vec<ModelSpec>,
}

#[derive(Debug)]
enum RoundFailure {
    Generation(String),
}

/// Per-stage deterministic streams for one (round, attempt, model) triple.
fn round_rng(seed: u64, round: u64, stage: crate::rng::Stage, attempt: u64, idx: u64) -> SplitMix64 {
    SplitMix64::derive(seed, &[round, stage as u64, attempt, idx])
}

/// Composes one test batch: topology -> block assignment (restricted to the
/// chooser's vocabulary) -> model-level mutations -> expansion -> shape and
/// parameter solving -> source-level mutations -> adapters -> validation.
pub fn input_mutation(
    blocks: Option<&[usize]>,
    action: &MutationAction,
    corpus: &BlockCorpus,
    cfg: &CampaignConfig,
    round: u64,
    attempt: u64,
) -> Result<Vec<ModelSpec>, String> {
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for idx in 0..cfg.batch_size as u64 {
        let model = build_model(blocks, action, corpus, cfg, round, attempt, idx)
            .map_err(|RoundFailure::Generation(m)| m)?;
        batch.push(model);
    }
    Ok(batch)
}

fn build_model(
    blocks: Option<&[usize]>,
    action: &MutationAction,
    corpus: &BlockCorpus,
    cfg: &CampaignConfig,
    round: u64,
    attempt: u64,
    idx: u64,
) -> Result<ModelSpec, RoundFailure> {
    use crate::rng::Stage;
    let fail = |e: String| RoundFailure::Generation(e);

    let mut topo_rng = round_rng(cfg.master_seed, round, Stage::Topology, attempt, idx);
    let n = cfg.block_count.0
        + topo_rng.below(cfg.block_count.1 - cfg.block_count.0 + 1);
    let model_kind = *topo_rng.choose(&cfg.graph.models);
    let k = *topo_rng.choose(&cfg.graph.k_choices);
    let p = match model_kind {
        GraphModel::Ws => cfg.graph.p_ws,
        GraphModel::Rn => cfg.graph.p_rn,
    };
    let topology = generate_topology(&GraphGenConfig {
        model: model_kind,
        n,
        k,
        p,
        seed: topo_rng.next_u64(),
    })
    .map_err(|e| fail(e.to_string()))?;

    let mut assign_rng = round_rng(cfg.master_seed, round, Stage::Assignment, attempt, idx);
    let assigned = assign_blocks(&topology, corpus, blocks, &mut assign_rng)
        .map_err(|e| fail(e.to_string()))?;

    let mut mut_rng = round_rng(cfg.master_seed, round, Stage::Mutation, attempt, idx);
    let (mutated, _reports) = apply_model_mutations(&assigned, corpus, action, &mut mut_rng);

    let (expanded, schemas) =
        expand_blocks_with_schemas(&mutated, corpus).map_err(|e| fail(e.to_string()))?;

    let mut shapes_rng = round_rng(cfg.master_seed, round, Stage::Shapes, attempt, idx);
    let placeholder_count = expanded
        .nodes
        .iter()
        .filter(|n| {
            matches!(&n.block, Some(crate::ir::BlockInstance::Operator(op)) if op == "Placeholder")
        })
        .count();
    let mut input_shapes: Vec<Vec<i64>> = (0..placeholder_count)
        .map(|_| cfg.shapes.preset(&mut shapes_rng))
        .collect();
    if action.includes(MutationKind::Tsm) {
        for shape in input_shapes.iter_mut() {
            *shape = tsm(shape, &cfg.shapes, &mut shapes_rng);
        }
    }

    let weights_seed = round_rng(cfg.master_seed, round, Stage::ModelSeed, attempt, idx).next_u64();
    let mut model = assign_params(
        &expanded,
        &schemas,
        &input_shapes,
        &cfg.solver,
        &cfg.shapes,
        &mut shapes_rng,
        weights_seed,
    )
    .map_err(|e| fail(e.to_string()))?;

    if action.includes(MutationKind::Pm) {
        let metas = lenient_shapes(&model).map_err(|e| fail(e.to_string()))?;
        for node in model.nodes.iter_mut() {
            if node.params.is_empty() || !shapes_rng.coin(0.5) {
                continue;
            }
            let kind = schemas
                .get(&node.id)
                .cloned()
                .unwrap_or_else(|| crate::ir::OperatorKind::resolve(&node.op));
            let input_shape = node
                .inputs
                .first()
                .map(|(src, _)| metas[src].shape.clone());
            node.params = pm(
                &node.params,
                &kind,
                input_shape.as_deref(),
                &cfg.solver,
                &cfg.shapes,
                &mut shapes_rng,
            );
        }
    }

    let model_adapted =
        insert_aggregation_adapters(&model).map_err(|e| fail(e.to_string()))?;
    let mut model = merge_pads(&model_adapted);
    let metas = infer_shapes(&model).map_err(|e| fail(e.to_string()))?;

    let mut total = 0usize;
    for meta in metas.values() {
        let n = crate::tensor::numel(&meta.shape);
        if n > cfg.max_tensor_elems {
            return Err(fail(format!("tensor {:?} exceeds the element cap", meta.shape)));
        }
        total += n;
    }
    if total > cfg.max_model_elems {
        return Err(fail(format!("model carries {total} elements, over the cap")));
    }

    model.canonicalize();
    Ok(model)
}

/// Runs a whole campaign, persisting state under `out_dir`. Engine
/// exceptions are data; only infrastructure problems abort.
pub fn fuzz_workflow(
    cfg: &CampaignConfig,
    corpus: &BlockCorpus,
    out_dir: &Path,
) -> Result<CampaignResult, CampaignError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir.join("models"))?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg).expect("config serializes") + "\n",
    )?;
    std::fs::write(out_dir.join("corpus.json"), corpus_to_json(corpus))?;

    let backend = cfg.make_backend(out_dir)?;
    let mut tree = MctsTree::new();
    let mut coverage = CoverageState::new(corpus, cfg.coverage.clone());
    let mut registry = DedupRegistry::new();
    let mut retained: Vec<ModelSpec> = Vec::new();
    let mut outcome_lines: Vec<OutcomeRecord> = Vec::new();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut executed: u64 = 0;
    let mut round: u64 = 0;

    while retained.len() < cfg.tc0 && round < cfg.round_cap() {
        round += 1;
        let mut chooser_rng =
            round_rng(cfg.master_seed, round, crate::rng::Stage::Chooser, 0, 0);

        // Block selection.
        let (vocabulary, chosen_node, expanded_block): (Option<Vec<usize>>, Option<usize>, Option<usize>) =
            match cfg.search.mode {
                SearchMode::Random => {
                    let count = cfg.block_count.0
                        + chooser_rng.below(cfg.block_count.1 - cfg.block_count.0 + 1);
                    (
                        Some(random_chooser(corpus, &mut chooser_rng, count)),
                        None,
                        None,
                    )
                }
                SearchMode::Mcts => {
                    match tree.choose_blocks(&coverage, corpus, &cfg.search, &mut chooser_rng) {
                        Ok(path) => {
                            let expanded = path.expanded.then(|| *path.blocks.last().unwrap());
                            (Some(path.blocks.clone()), Some(path.node), expanded)
                        }
                        Err(SearchError::Exhausted) => {
                            tree.reset();
                            continue;
                        }
                    }
                }
            };

        let mut mutsel_rng =
            round_rng(cfg.master_seed, round, crate::rng::Stage::Selector, 0, 0);
        let action = select_mutations(&cfg.mutation, &mut mutsel_rng);

        // Bounded generation retries.
        let mut batch: Option<Vec<ModelSpec>> = None;
        for attempt in 0..cfg.retries {
            match input_mutation(
                vocabulary.as_deref(),
                &action,
                corpus,
                cfg,
                round,
                attempt,
            ) {
                Ok(models) => {
                    batch = Some(models);
                    break;
                }
                Err(_) => continue,
            }
        }
        let Some(batch) = batch else { continue };

        // Coverage gate (static model content only), then execution.
        let mut round_new_exceptions = 0usize;
        let mut simulated = false;
        for model in batch {
            if retained.len() >= cfg.tc0 {
                break;
            }
            let admitted = coverage.is_new_coverage(&model);
            if !admitted && !cfg.execute_discarded {
                continue;
            }
            let model_id = if admitted {
                format!("model_{:06}", retained.len())
            } else {
                "(discarded)".to_string()
            };
            let record = crate::exec::run_trial(&model, &backend)?;
            executed += 1;
            simulated = true;
            let new_entry = registry.observe(&record.outcome, &model_id);
            if new_entry {
                round_new_exceptions += 1;
            }
            if admitted {
                coverage
                    .observe(&model)
                    .expect("admitted models pass lenient inference");
                std::fs::write(
                    out_dir.join("models").join(format!("{model_id}.json")),
                    serialize_model(&model),
                )?;
            }
            outcome_lines.push(OutcomeRecord {
                model: model_id,
                round,
                retained: admitted,
                dedup_key: record.outcome.dedup_key(),
                new_entry,
                fired: record.fired.iter().map(|b| b.name().to_string()).collect(),
                outcome: record.outcome,
            });
            if admitted {
                retained.push(model);
            }
        }

        if let (SearchMode::Mcts, Some(node)) = (cfg.search.mode, chosen_node) {
            if simulated {
                tree.backpropagate(node, round_new_exceptions > 0);
            }
        }
        trace.push(TraceRecord {
            round,
            path: vocabulary
                .unwrap_or_default()
                .iter()
                .map(|&i| corpus.blocks[i].name.clone())
                .collect(),
            expanded: expanded_block.map(|i| corpus.blocks[i].name.clone()),
            reward: round_new_exceptions > 0,
            new_exceptions: round_new_exceptions,
            olc: coverage.olc(),
        });
    }

    let summary = CampaignSummary {
        retained: retained.len(),
        rounds: round,
        executed,
        deduplicated_exceptions: registry.deduplicated_total(),
        raw_exceptions: registry.raw_exception_total(),
        final_olc: coverage.olc(),
    };
    persist(out_dir, &summary, &registry, &coverage, &outcome_lines, &trace)?;
    Ok(CampaignResult {
        summary,
        registry,
        coverage,
        retained,
    })
}

fn persist(
    out_dir: &Path,
    summary: &CampaignSummary,
    registry: &DedupRegistry,
    coverage: &CoverageState,
    outcomes: &[OutcomeRecord],
    trace: &[TraceRecord],
) -> Result<(), CampaignError> {
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(summary).expect("summary serializes") + "\n",
    )?;
    std::fs::write(
        out_dir.join("registry.json"),
        serde_json::to_string_pretty(registry).expect("registry serializes") + "\n",
    )?;
    let report = coverage.report();
    std::fs::write(
        out_dir.join("coverage.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    std::fs::write(out_dir.join("coverage.txt"), render_report(&report))?;
    let mut jsonl = String::new();
    for line in outcomes {
        jsonl.push_str(&serde_json::to_string(line).expect("outcome serializes"));
        jsonl.push('\n');
    }
    std::fs::write(out_dir.join("outcomes.jsonl"), jsonl)?;
    let mut trace_jsonl = String::new();
    for line in trace {
        trace_jsonl.push_str(&serde_json::to_string(line).expect("trace serializes"));
        trace_jsonl.push('\n');
    }
    std::fs::write(out_dir.join("search_trace.jsonl"), trace_jsonl)?;
    Ok(())
}

/// Emits the report files for a finished or checkpointed campaign and
/// returns the rendered exception table.
pub fn emit_reports(out_dir: &Path) -> Result<String, CampaignError> {
    let registry: DedupRegistry = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("registry.json"))?,
    )
    .map_err(|e| CampaignError::Config(format!("registry.json: {e}")))?;
    let coverage_txt = std::fs::read_to_string(out_dir.join("coverage.txt"))?;

    let mut out = String::new();
    out.push_str("== Coverage ==\n");
    out.push_str(&coverage_txt);
    out.push_str("\n== Exceptions (deduplicated/total) ==\n");
    for status in [
        crate::exec::TrialStatus::Mcf,
        crate::exec::TrialStatus::If,
        crate::exec::TrialStatus::Dcf,
    ] {
        let (dedup, raw) = registry.count_for_status(status);
        out.push_str(&format!("{:<4} {dedup}/{raw}\n", status.name()));
    }
    out.push_str("\n== Registry entries ==\n");
    for (key, entry) in &registry.entries {
        out.push_str(&format!(
            "{key}  count={} first={}\n",
            entry.count, entry.first_model
        ));
    }
    Ok(out)
}

/// Re-executes one retained model from a campaign directory.
pub fn replay(out_dir: &Path, model_id: &str) -> Result<TrialOutcome, CampaignError> {
    let cfg: CampaignConfig = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("config.json"))?,
    )
    .map_err(|e| CampaignError::Config(format!("config.json: {e}")))?;
    let bytes = std::fs::read(out_dir.join("models").join(format!("{model_id}.json")))?;
    let model = crate::ir::deserialize_model(&bytes)
        .map_err(|e| CampaignError::Config(format!("{model_id}: {e}")))?;
    let backend = cfg.make_backend(out_dir)?;
    let record = crate::exec::run_trial(&model, &backend)?;
    Ok(record.outcome)
}

/// Standard-mask helper for seeded campaigns.
pub fn standard_bug_names() -> Vec<String> {
    SeededBug::standard_ten()
        .into_iter()
        .map(|b| b.name().to_string())
        .collect()
}

/// Names of every catalogued seeded bug.
pub fn all_bug_names() -> Vec<String> {
    SeededBug::all()
        .into_iter()
        .map(|b| b.name().to_string())
        .collect()
}
