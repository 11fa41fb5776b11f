//! Command-line front end: run fuzzing campaigns, replay retained models,
//! render reports, scaffold configs, and serve as an engine double speaking
//! the subprocess wire protocol (for testing the external-engine path).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gfuzz::exec::{
    run_optimized, run_reference, write_reply_outputs, write_reply_status, EngineStatus,
    OptimizedOptions,
};
use gfuzz::harness::{fuzz_workflow, BackendChoice, CampaignConfig};
use gfuzz::ir::{corpus_to_json, load_corpus};
use gfuzz::search::SearchMode;

#[derive(Parser)]
#[command(name = "gfuzz", about = "Graph-based differential fuzzer for DL inference engines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default corpus and campaign config into a directory.
    Init {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run a fuzzing campaign.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// External engine command; omit to test the built-in optimized
        /// interpreter.
        #[arg(long)]
        engine: Option<String>,
        #[arg(long, value_parser = parse_search_mode)]
        search: Option<SearchMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tc0: Option<usize>,
        /// Blocks per model as an inclusive range, e.g. 1..15.
        #[arg(long, value_parser = parse_range)]
        blocks: Option<(usize, usize)>,
        /// Seeded defects for the optimized backend (names, or
        /// "standard"/"all").
        #[arg(long)]
        bug_mask: Option<String>,
    },
    /// Re-execute one retained model from a campaign directory.
    Replay {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: String,
    },
    /// Render the coverage and exception tables of a campaign directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Act as an external engine for protocol testing.
    EngineDouble {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "reference")]
        mode: String,
        /// Exit code reported by the convert-fail mode.
        #[arg(long, default_value_t = 108)]
        code: i32,
        #[arg(long)]
        bug_mask: Option<String>,
    },
}

fn parse_search_mode(s: &str) -> Result<SearchMode, String> {
    match s {
        "mcts" => Ok(SearchMode::Mcts),
        "random" => Ok(SearchMode::Random),
        other => Err(format!("unknown search mode {other:?} (mcts|random)")),
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected a..b, got {s:?}"))?;
    let low = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let high = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    if low < 1 || low > high {
        return Err(format!("invalid block range {low}..{high}"));
    }
    Ok((low, high))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("gfuzz: {message}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Init { dir } => {
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            let corpus = gfuzz::ir::builtin_corpus();
            std::fs::write(dir.join("corpus.json"), corpus_to_json(&corpus))
                .map_err(|e| e.to_string())?;
            let cfg = CampaignConfig::default();
            std::fs::write(
                dir.join("config.json"),
                serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n",
            )
            .map_err(|e| e.to_string())?;
            println!("wrote {}", dir.join("corpus.json").display());
            println!("wrote {}", dir.join("config.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            corpus,
            config,
            out,
            engine,
            search,
            seed,
            tc0,
            blocks,
            bug_mask,
        } => {
            let corpus = load_corpus(&corpus).map_err(|e| e.to_string())?;
            let raw = std::fs::read_to_string(&config).map_err(|e| e.to_string())?;
            let mut cfg: CampaignConfig =
                serde_json::from_str(&raw).map_err(|e| format!("config: {e}"))?;
            if let Some(cmd) = engine {
                cfg.backend = BackendChoice::External {
                    cmd,
                    timeout_secs: 30,
                };
            }
            if let Some(mode) = search {
                cfg.search.mode = mode;
            }
            if let Some(seed) = seed {
                cfg.master_seed = seed;
            }
            if let Some(tc0) = tc0 {
                cfg.tc0 = tc0;
            }
            if let Some(range) = blocks {
                cfg.block_count = range;
            }
            if let Some(mask) = bug_mask {
                let names: Vec<String> = gfuzz::exec::parse_bug_mask(&mask)
                    .map_err(|e| e.to_string())?
                    .into_iter()
                    .map(|b| b.name().to_string())
                    .collect();
                cfg.backend = BackendChoice::Optimized { bugs: names };
            }
            let result = fuzz_workflow(&cfg, &corpus, &out).map_err(|e| e.to_string())?;
            let s = &result.summary;
            println!(
                "retained {} models in {} rounds ({} executed); exceptions {}/{} (dedup/raw); OLC {:.1}%",
                s.retained,
                s.rounds,
                s.executed,
                s.deduplicated_exceptions,
                s.raw_exceptions,
                s.final_olc * 100.0
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { out, model } => {
            let outcome = gfuzz::harness::replay(&out, &model).map_err(|e| e.to_string())?;
            println!("{model}: {outcome:?}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { out } => {
            let text = gfuzz::harness::emit_reports(&out).map_err(|e| e.to_string())?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
        Command::EngineDouble {
            dir,
            mode,
            code,
            bug_mask,
        } => engine_double(&dir, &mode, code, bug_mask.as_deref()),
    }
}

/// The external-engine side of the wire protocol, with failure modes for
/// protocol conformance testing.
fn engine_double(
    dir: &std::path::Path,
    mode: &str,
    code: i32,
    bug_mask: Option<&str>,
) -> Result<ExitCode, String> {
    match mode {
        "hang" => loop {
            std::thread::sleep(std::time::Duration::from_secs(600));
        },
        "crash" => std::process::abort(),
        "garbage" => {
            std::fs::write(dir.join("output_0.tns"), b"not a tensor")
                .map_err(|e| e.to_string())?;
            return Ok(ExitCode::SUCCESS);
        }
        "convert-fail" => {
            let status = EngineStatus {
                stage: "convert".to_string(),
                code,
                message: "check failed: unsupported operator".to_string(),
                op: first_op(dir),
            };
            write_reply_status(dir, &status)?;
            return Ok(ExitCode::from(3));
        }
        "echo" => {
            // Byte-exact loopback: copy input_<i>.tns to output_<i>.tns.
            let mut i = 0;
            loop {
                let input = dir.join(format!("input_{i}.tns"));
                if !input.exists() {
                    break;
                }
                std::fs::copy(&input, dir.join(format!("output_{i}.tns")))
                    .map_err(|e| e.to_string())?;
                i += 1;
            }
            return Ok(ExitCode::SUCCESS);
        }
        "reference" | "optimized" => {}
        other => return Err(format!("unknown engine-double mode {other:?}")),
    }

    let (model, inputs) = gfuzz::exec::read_request(dir)?;
    if mode == "reference" {
        match run_reference(&model, &inputs) {
            Ok(run) => {
                write_reply_outputs(dir, &run.outputs)?;
                Ok(ExitCode::SUCCESS)
            }
            Err(fault) => {
                write_reply_status(
                    dir,
                    &EngineStatus {
                        stage: "infer".to_string(),
                        code: 1,
                        message: fault.to_string(),
                        op: Some(fault.op),
                    },
                )?;
                Ok(ExitCode::from(1))
            }
        }
    } else {
        let mask = gfuzz::exec::parse_bug_mask(bug_mask.unwrap_or(""))?;
        let (result, _) = run_optimized(&model, &inputs, &OptimizedOptions::with_bugs(mask));
        match result {
            Ok(run) => {
                write_reply_outputs(dir, &run.outputs)?;
                Ok(ExitCode::SUCCESS)
            }
            Err(gfuzz::exec::EngineFailure::Convert { code, op, message }) => {
                write_reply_status(
                    dir,
                    &EngineStatus {
                        stage: "convert".to_string(),
                        code,
                        message,
                        op: Some(op),
                    },
                )?;
                Ok(ExitCode::from(1))
            }
            Err(gfuzz::exec::EngineFailure::Infer { op, message }) => {
                write_reply_status(
                    dir,
                    &EngineStatus {
                        stage: "infer".to_string(),
                        code: 1,
                        message,
                        op: Some(op),
                    },
                )?;
                Ok(ExitCode::from(1))
            }
        }
    }
}

fn first_op(dir: &std::path::Path) -> Option<String> {
    let bytes = std::fs::read(dir.join("model.json")).ok()?;
    let model = gfuzz::ir::deserialize_model(&bytes).ok()?;
    model
        .nodes
        .iter()
        .find(|n| n.op != "Placeholder")
        .map(|n| n.op.clone())
}
