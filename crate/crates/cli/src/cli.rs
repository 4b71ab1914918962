//! Command-line front end.

use std::fs;
use std::io::{self, BufWriter};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use fact_crs::corpus::{generate_synthetic, load_dataset, split_by_user, Dataset, SyntheticSpec};
use fact_crs::error::{CorpusError, ModelError};
use fact_crs::eval::{run_benchmark, write_report};
use fact_crs::forest::{load_model, save_model, train_forest, InteractionForest};
use fact_crs::policy::AblationFlags;
use fact_crs::simulator::write_traces_jsonl;
use fact_crs::RunConfig;

use crate::chat::run_chat;
use crate::server::{self, AppState, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_MISSING_INPUT: i32 = 2;
pub const EXIT_VOCABULARY_MISMATCH: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fact-crs", version, about = "Conversational recommendation with forests of factorization trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed (training, splits, episodes).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config key, e.g. `--set num_trees=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with a planted attribute tree.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        users: usize,
        #[arg(long, default_value_t = 48)]
        items: usize,
        #[arg(long, default_value_t = 8)]
        attributes: usize,
        #[arg(long, default_value_t = 800)]
        interactions: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a forest on the training users of a corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Benchmark a model with simulated users on held-out interactions.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed of the user split (defaults to the run seed).
        #[arg(long)]
        split_seed: Option<u64>,
        /// Disable a component: no-candidates, no-rf, no-earlyrec, no-onlinefeed.
        #[arg(long)]
        ablate: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run simulated episodes and write their traces as JSON lines.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Trace file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        ablate: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Serve sessions over HTTP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Idle seconds before a session expires.
        #[arg(long, default_value_t = 1800)]
        idle_timeout: u64,
        /// Append every incoming session message to this file.
        #[arg(long)]
        session_log: Option<PathBuf>,
        #[arg(long)]
        ablate: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Talk to a model in the terminal.
    Chat {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ablate: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConfigCommand {
    /// Print the effective configuration.
    Show {
        /// Start from the configuration stored in a model.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

fn fail<E: std::fmt::Display>(e: E) -> Failure {
    Failure::new(EXIT_FAILURE, e.to_string())
}

fn resolve_config(base: RunConfig, args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::new(EXIT_MISSING_INPUT, format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| fail(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string()).map_err(fail)?;
    }
    for o in &args.overrides {
        cfg.apply_override(o).map_err(|e| fail(format!("--set {o}: {e}")))?;
    }
    Ok(cfg)
}

fn parse_flags(names: &[String]) -> Result<AblationFlags, Failure> {
    let mut flags = AblationFlags::default();
    for n in names {
        flags.disable(n).map_err(fail)?;
    }
    Ok(flags)
}

fn load_data(dir: &Path) -> Result<Dataset, Failure> {
    match load_dataset(dir) {
        Ok((ds, report)) => {
            if !report.is_clean() {
                log::warn!(
                    "{} records with empty mentions, {} mentioning attributes outside the item",
                    report.empty_mentions.len(),
                    report.mentions_outside_item.len()
                );
            }
            Ok(ds)
        }
        Err(e @ CorpusError::MissingFile(_)) => Err(Failure::new(EXIT_MISSING_INPUT, e.to_string())),
        Err(e) => Err(fail(e)),
    }
}

fn load_forest(path: &Path) -> Result<InteractionForest, Failure> {
    load_model(path).map_err(|e| match e {
        ModelError::Io(io) if io.kind() == io::ErrorKind::NotFound => {
            Failure::new(EXIT_MISSING_INPUT, format!("model file not found: {}", path.display()))
        }
        other => fail(format!("{}: {other}", path.display())),
    })
}

fn check_vocabulary(forest: &InteractionForest, data: &Dataset) -> Result<(), Failure> {
    if forest.vocabulary != data.vocabulary {
        return Err(Failure::new(
            EXIT_VOCABULARY_MISMATCH,
            format!(
                "model vocabulary ({} attributes) does not match the dataset ({} attributes)",
                forest.num_attributes(),
                data.num_attributes()
            ),
        ));
    }
    if forest.num_items() != data.num_items() {
        return Err(Failure::new(
            EXIT_VOCABULARY_MISMATCH,
            format!("model has {} items, dataset has {}", forest.num_items(), data.num_items()),
        ));
    }
    Ok(())
}

/// Execute a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate {
            out,
            users,
            items,
            attributes,
            interactions,
            depth,
            noise,
            seed,
        } => {
            let spec = SyntheticSpec::new(users, items, attributes, interactions)
                .depth(depth)
                .noise(noise)
                .seed(seed);
            let (ds, planted) = generate_synthetic(&spec).map_err(fail)?;
            ds.save(&out).map_err(fail)?;
            println!(
                "wrote {} users, {} items, {} attributes, {} interactions to {} (planted root attribute {:?})",
                ds.num_users,
                ds.num_items(),
                ds.num_attributes(),
                ds.num_interactions(),
                out.display(),
                planted.root_attribute()
            );
            Ok(())
        }
        Command::Train { data, out, config } => {
            let cfg = resolve_config(RunConfig::default(), &config)?;
            let ds = load_data(&data)?;
            let split = split_by_user(&ds, cfg.seed).map_err(fail)?;
            let (forest, log) = train_forest(&ds, &split, &cfg).map_err(fail)?;
            save_model(&forest, &out).map_err(fail)?;
            let log_path = out.with_extension("log.json");
            let text = serde_json::to_string_pretty(&log).map_err(fail)?;
            fs::write(&log_path, text).map_err(fail)?;
            println!(
                "trained {} trees ({} nodes) on {} training users; model {}, log {}",
                forest.trees.len(),
                forest.trees.iter().map(|t| t.nodes.len()).sum::<usize>(),
                split.train_users.len(),
                out.display(),
                log_path.display()
            );
            Ok(())
        }
        Command::Eval {
            model,
            data,
            out,
            split_seed,
            ablate,
            config,
        } => {
            let flags = parse_flags(&ablate)?;
            let forest = load_forest(&model)?;
            let cfg = resolve_config(forest.config.clone(), &config)?;
            let ds = load_data(&data)?;
            check_vocabulary(&forest, &ds)?;
            let split = split_by_user(&ds, split_seed.unwrap_or(cfg.seed)).map_err(fail)?;
            let (report, traces) = run_benchmark(&Arc::new(forest), &ds, &split, flags, &cfg).map_err(fail)?;
            if let Some(dir) = &out {
                write_report(&report, dir).map_err(fail)?;
                let f = fs::File::create(dir.join("traces.jsonl")).map_err(fail)?;
                write_traces_jsonl(&traces, BufWriter::new(f)).map_err(fail)?;
            }
            println!(
                "episodes {}  SR@{} {:.4}  AT {:.4}{}",
                report.episodes,
                report.max_turns,
                report.final_success_rate(),
                report.average_turns,
                if report.disabled_components.is_empty() {
                    String::new()
                } else {
                    format!("  (disabled: {})", report.disabled_components.join(", "))
                }
            );
            Ok(())
        }
        Command::Simulate {
            model,
            data,
            out,
            split_seed,
            ablate,
            config,
        } => {
            let flags = parse_flags(&ablate)?;
            let forest = load_forest(&model)?;
            let cfg = resolve_config(forest.config.clone(), &config)?;
            let ds = load_data(&data)?;
            check_vocabulary(&forest, &ds)?;
            let split = split_by_user(&ds, split_seed.unwrap_or(cfg.seed)).map_err(fail)?;
            let (_, traces) = run_benchmark(&Arc::new(forest), &ds, &split, flags, &cfg).map_err(fail)?;
            match out {
                Some(path) => {
                    let f = fs::File::create(&path).map_err(fail)?;
                    write_traces_jsonl(&traces, BufWriter::new(f)).map_err(fail)?;
                    eprintln!("wrote {} traces to {}", traces.len(), path.display());
                }
                None => write_traces_jsonl(&traces, io::stdout().lock()).map_err(fail)?,
            }
            Ok(())
        }
        Command::Serve {
            model,
            port,
            host,
            idle_timeout,
            session_log,
            ablate,
            config,
        } => {
            let flags = parse_flags(&ablate)?;
            let forest = load_forest(&model)?;
            let cfg = resolve_config(forest.config.clone(), &config)?;
            let mut service = ServiceConfig::new(cfg.policy.clone());
            service.flags = flags;
            service.idle_timeout = Duration::from_secs(idle_timeout);
            let mut state = AppState::new(Arc::new(forest), service);
            if let Some(p) = &session_log {
                state = state.with_session_log(p).map_err(fail)?;
            }
            let runtime = tokio::runtime::Runtime::new().map_err(fail)?;
            runtime.block_on(async {
                let listener = server::bind(SocketAddr::new(host, port)).await.map_err(fail)?;
                let addr = listener.local_addr().map_err(fail)?;
                eprintln!("listening on http://{addr}");
                server::serve(listener, Arc::new(state)).await.map_err(fail)
            })
        }
        Command::Chat { model, ablate, config } => {
            let flags = parse_flags(&ablate)?;
            let forest = load_forest(&model)?;
            let cfg = resolve_config(forest.config.clone(), &config)?;
            let stdin = io::stdin();
            run_chat(
                Arc::new(forest),
                cfg.policy.clone(),
                flags,
                cfg.seed,
                stdin.lock(),
                io::stdout().lock(),
            )
            .map_err(fail)?;
            Ok(())
        }
        Command::Config {
            action: ConfigCommand::Show { model, config },
        } => {
            let base = match &model {
                Some(m) => load_forest(m)?.config,
                None => RunConfig::default(),
            };
            print!("{}", resolve_config(base, &config)?.to_text());
            Ok(())
        }
    }
}
