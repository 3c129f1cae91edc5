//! `lrnas`: run the rank-search pipeline one stage at a time.
//!
//! Every stage reads its inputs from and writes its artifact to the `--out`
//! directory and prints one summary line. Exit codes: 2 configuration or
//! argument error, 3 missing prerequisite artifact, 4 numerical failure,
//! 5 infeasible FLOPs window, 6 I/O or checkpoint format error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lrnas::config::PipelineConfig;
use lrnas::pipeline::{self, ConfigChoice, Workspace};
use lrnas::report::{self, parse_records};
use lrnas::supernet::SamplingMode;
use lrnas::Error;

#[derive(Debug, Parser)]
#[command(
    name = "lrnas",
    version,
    about = "Per-layer rank search for low-rank vision transformers"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "lrnas-out")]
    out: PathBuf,
    /// Config override, repeatable: `--set ea.population=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it to dataset.flra.
    GenData,
    /// Train the dense model (base.flra).
    TrainBase,
    /// Factor every slot at full rank (decomposed.flra).
    Decompose,
    /// Filter each block's rank space (filter_report.txt, retained_space.txt).
    Filter,
    /// Train the weight-sharing supernet (supernet.flra, supernet_trace.txt).
    TrainSupernet {
        /// Path sampling: `lowrank` (p ∝ 1/r) or `uniform`.
        #[arg(long)]
        sampling: Option<SamplingMode>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evolutionary search within the FLOPs window (search_report.txt).
    Search,
    /// Print validation accuracy and cost of one configuration.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long, default_value = pipeline::SUPERNET)]
        checkpoint: String,
        /// `full`, `best`, or comma-separated ranks.
        #[arg(long, default_value = "full")]
        ranks: ConfigChoice,
    },
    /// Write a standalone low-rank model for one configuration (export.flra).
    Export {
        #[arg(long, default_value = "best")]
        ranks: ConfigChoice,
    },
    /// Summarize filter and search reports, with a FLOPs/accuracy Pareto table.
    Report,
}

fn load_config(c: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

fn report_text(ws: &Workspace) -> Result<String, Error> {
    let mut out = String::new();
    if let Ok(text) = ws.read(pipeline::FILTER_REPORT) {
        for r in parse_records(&text)?.iter().filter(|r| r.kind() == "block") {
            out.push_str(&format!(
                "filter block={} exhaustive={} scored={} retained={}\n",
                r.req("block")?,
                r.req("exhaustive")?,
                r.req("scored")?,
                r.req("retained")?
            ));
        }
    }
    let records = parse_records(&ws.read(pipeline::SEARCH_REPORT)?)?;
    if let Some(w) = records.iter().find(|r| r.kind() == "window") {
        out.push_str(&format!(
            "window lower={} upper={} dense_flops={}\n",
            w.req("lower")?,
            w.req("upper")?,
            w.req("dense_flops")?
        ));
    }
    if let Some(g) = records.iter().rfind(|r| r.kind() == "generation") {
        out.push_str(&format!(
            "generations={} best={} evaluated={}\n",
            g.parse::<usize>("generation")? + 1,
            g.req("best")?,
            g.req("evaluated")?
        ));
    }
    let mut points = Vec::new();
    let mut configs = Vec::new();
    for r in records.iter().filter(|r| r.kind() == "candidate") {
        let p = (r.parse::<u64>("flops")?, r.parse::<f64>("fitness")?);
        points.push(p);
        configs.push((p, r.req("config")?.to_string()));
    }
    out.push_str(&format!("{:>10}  {:>8}  config\n", "flops", "accuracy"));
    for p in report::pareto_front(&points) {
        let cfg = configs
            .iter()
            .filter(|(q, _)| q.0 == p.0 && q.1 == p.1)
            .map(|(_, c)| c.as_str())
            .next()
            .unwrap_or("");
        out.push_str(&format!("{:>10}  {:>8.4}  {cfg}\n", p.0, p.1));
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<String, Error> {
    let mut cfg = load_config(&cli.common)?;
    let ws = Workspace::new(&cli.common.out)?;
    match &cli.command {
        Command::GenData => pipeline::run_gen_data(&cfg, &ws),
        Command::TrainBase => pipeline::run_train_base(&cfg, &ws),
        Command::Decompose => pipeline::run_decompose(&cfg, &ws),
        Command::Filter => pipeline::run_filter(&cfg, &ws),
        Command::TrainSupernet { sampling, epochs } => {
            if let Some(s) = sampling {
                cfg.supernet.sampling = *s;
            }
            if let Some(e) = epochs {
                cfg.supernet.epochs = *e;
            }
            pipeline::run_train_supernet(&cfg, &ws)
        }
        Command::Search => pipeline::run_search(&cfg, &ws),
        Command::Eval { checkpoint, ranks } => {
            let (acc, cost) = pipeline::eval_artifact(&cfg, &ws, checkpoint, ranks)?;
            Ok(format!("eval checkpoint={checkpoint} accuracy={acc} {cost}"))
        }
        Command::Export { ranks } => pipeline::run_export(&cfg, &ws, ranks),
        Command::Report => report_text(&ws).map(|s| s.trim_end().to_string()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::RankNotInChoices { .. } => 2,
        Error::MissingArtifact(_) | Error::Untrained(_) => 3,
        Error::NoConvergence { .. } | Error::NonFinite(_) | Error::Diverged { .. } => 4,
        Error::InfeasibleWindow { .. } => 5,
        Error::Io { .. } | Error::Format(_) => 6,
        Error::Shape { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
