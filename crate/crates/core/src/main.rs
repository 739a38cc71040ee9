use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use star_forge::backend::{BackendMode, LlmClient};
use star_forge::dataset::{compute_stats, export_span_format, read_instances, write_instances};
use star_forge::pipeline::{GenerateOptions, RunConfig, Workspace};
use star_forge::refine::{RefineError, Strategy};
use star_forge::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BACKEND: u8 = 3;

/// Synthetic (passage, structure) data generation for event and relation
/// extraction.
#[derive(Parser)]
#[command(name = "star-forge", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, short, global = true, default_value = "star-forge.json")]
    config: PathBuf,
    /// Worker threads for backend-bound stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Serve every completion from this cassette; no network access.
    #[arg(long, global = true, value_name = "CASSETTE", conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Call the live backend and append every exchange to this cassette.
    #[arg(long, global = true, value_name = "CASSETTE")]
    record: Option<PathBuf>,
    /// Error-identification strategy: none, rule-based, reflect-entailment, reflect-llm.
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    /// Demonstrations per prompt.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Instances per type.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    max_iterations: Option<usize>,
    /// More log output on stderr (repeatable).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Fill trigger/argument (or entity) candidate pools.
    Pools {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the batch plan.
    Plan {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate instances for the whole plan.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write every rendered prompt into this directory.
        #[arg(long, value_name = "DIR")]
        dump_prompts: Option<PathBuf>,
        /// Refine each passage with the configured strategy.
        #[arg(long)]
        with_refine: bool,
    },
    /// Refine an existing dataset.
    Refine {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export token-level span records.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Leave out instances with remaining quality flags.
        #[arg(long)]
        drop_flagged: bool,
    },
    /// Distribution statistics of a dataset.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a dataset against the ontology and re-audit its flags.
    Validate {
        #[arg(long)]
        input: PathBuf,
        /// Write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_backend_failure() || matches!(e, Error::Refine(RefineError::CheckerUnavailable { .. })) {
        EXIT_BACKEND
    } else {
        EXIT_CONFIG
    }
}

fn load_config(g: &Global) -> Result<RunConfig, Error> {
    if !g.config.exists() {
        return Err(Error::Config(format!("config file {} does not exist", g.config.display())));
    }
    let mut cfg = RunConfig::load(&g.config)?;
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(s) = g.strategy {
        cfg.strategy = s;
    }
    if let Some(k) = g.k {
        cfg.generation.k = k;
    }
    if let Some(n) = g.n {
        cfg.generation.n = n;
    }
    if let Some(seed) = g.seed {
        cfg.generation.rng_seed = seed;
    }
    if let Some(m) = g.max_iterations {
        cfg.max_iterations = m;
    }
    if let Some(c) = &g.replay {
        cfg.backend.mode = BackendMode::Replay;
        cfg.backend.cassette_path = Some(c.clone());
    }
    if let Some(c) = &g.record {
        cfg.backend.mode = BackendMode::Record;
        cfg.backend.cassette_path = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_path(explicit: Option<PathBuf>, configured: Option<&PathBuf>, what: &str) -> Result<PathBuf, Error> {
    explicit
        .or_else(|| configured.cloned())
        .ok_or_else(|| Error::Config(format!("no output path for {what}: pass --out")))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<u8, Error> {
    let g = &cli.global;
    match cli.command {
        Command::Pools { out } => {
            let cfg = load_config(g)?;
            let out = output_path(out, cfg.pools.as_ref(), "pools")?;
            let client = LlmClient::new(&cfg.backend)?;
            let ws = Workspace::open(cfg, false)?;
            let pools = ws.build_pools(&client, ws.config.workers)?;
            pools.save(&out)?;
            eprintln!("wrote {} pools to {}", pools.len(), out.display());
        }
        Command::Plan { out } => {
            let cfg = load_config(g)?;
            let ws = Workspace::open(cfg, false)?;
            let plan = ws.plan()?;
            write_json(&out, &plan)?;
            eprintln!("planned {} items", plan.items.len());
        }
        Command::Generate {
            out,
            dump_prompts,
            with_refine,
        } => {
            let cfg = load_config(g)?;
            let out = output_path(out, cfg.output.as_ref(), "generate")?;
            let client = LlmClient::new(&cfg.backend)?;
            let ws = Workspace::open(cfg, true)?;
            let checkers = ws.checkers()?;
            let plan = ws.plan()?;
            let opts = GenerateOptions {
                workers: ws.config.workers,
                dump_prompts,
                with_refine,
            };
            let instances = ws.generate(&plan, &client, &checkers, &opts)?;
            write_instances(&out, &instances)?;
            let flagged = instances.iter().filter(|i| i.is_flagged()).count();
            eprintln!(
                "wrote {} instances to {} ({flagged} with remaining flags, {} network calls)",
                instances.len(),
                out.display(),
                client.network_calls()
            );
        }
        Command::Refine { input, out } => {
            let cfg = load_config(g)?;
            let client = LlmClient::new(&cfg.backend)?;
            let ws = Workspace::open(cfg, false)?;
            let checkers = ws.checkers()?;
            let instances = read_instances(&input)?;
            let refined = ws.refine_all(&instances, &client, &checkers, ws.config.workers)?;
            write_instances(&out, &refined)?;
            eprintln!("refined {} instances into {}", refined.len(), out.display());
        }
        Command::Export {
            input,
            out,
            drop_flagged,
        } => {
            let instances = read_instances(&input)?;
            let summary = export_span_format(&instances, &out, drop_flagged)?;
            for (id, reason) in &summary.skipped {
                eprintln!("skipped {id}: {reason}");
            }
            eprintln!(
                "exported {} records ({} skipped, {} dropped as flagged)",
                summary.written,
                summary.skipped.len(),
                summary.dropped_flagged
            );
        }
        Command::Stats { input, out } => {
            let instances = read_instances(&input)?;
            let stats = compute_stats(&instances);
            if let Some(out) = out {
                write_json(&out, &stats)?;
            }
            eprintln!("{} instances, {} with remaining flags", stats.total, stats.flagged_instances);
            for (ty, n) in &stats.per_type {
                eprintln!("  {ty}: {n}");
            }
        }
        Command::Validate { input, report } => {
            let cfg = load_config(g)?;
            let client = LlmClient::new(&cfg.backend)?;
            let ws = Workspace::open(cfg, false)?;
            let checkers = ws.checkers()?;
            let instances = read_instances(&input)?;
            let result = ws.validate(&instances, &client, &checkers, g.strategy, ws.config.workers)?;
            for inst in &result.instances {
                for p in &inst.problems {
                    eprintln!("{}: {p}", inst.id);
                }
                for f in &inst.flags {
                    eprintln!("{}: {} event {} {}: {}", inst.id, f.dimension, f.event_index + 1, f.slot, f.detail);
                }
                if !inst.consistent {
                    eprintln!("{}: flags differ from the recorded remaining flags", inst.id);
                }
            }
            if let Some(path) = report {
                write_json(&path, &result)?;
            }
            eprintln!("{} instances, {} flags", result.instances.len(), result.flag_count());
            if !result.passed() {
                return Ok(EXIT_VALIDATION);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
