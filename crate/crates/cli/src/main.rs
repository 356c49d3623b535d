//! `gensynth`: config-driven driver for the synthetic-data pipeline.
//!
//! Exit status: 0 success, 2 config error, 3 missing upstream artifact,
//! 4 backend failure, 1 anything else.

mod config;
mod failure;
mod fixtures;
mod pipeline;
mod report;
mod transport;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gensynth_core::generation::Regime;

use crate::config::{load_config, PipelineConfig};
use crate::failure::Failure;
use crate::pipeline::{run_stage, Ctx, Stage};

#[derive(Parser)]
#[command(name = "gensynth", version, about = "Synthetic detection-data pipeline: captions, prompts, edge guidance, synthesis, labeling, mixing, detector runs and reports")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Real-data regime: r8 or r24.
    #[arg(long, global = true)]
    regime: Option<Regime>,
    /// Use in-process mock backends and, without configured data, mock datasets.
    #[arg(long, global = true)]
    mock: bool,
    /// Worker threads for per-record and per-run parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Detector seeds, comma separated; overrides `seeds`.
    #[arg(long, global = true, value_delimiter = ',')]
    seed_set: Option<Vec<u64>>,
    /// Run directory. `run` defaults to a new timestamped directory under
    /// `output_root`; other commands default to the latest one.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Recompute even when stage inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run several stages in order (all by default).
    Run {
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<Stage>>,
    },
    /// Import the real and simulation manifests into the run directory.
    Prepare,
    /// Pick the real subset and caption it.
    Caption,
    /// Per-class LoRA fine-tuning job specs.
    LoraSpecs,
    /// Generate prompts from captions, plus geometry-stripped variants.
    Prompts,
    /// Edge maps and guidance pairs from the renders.
    Edges,
    /// Prompt-only and edge-conditioned image synthesis.
    Synthesize,
    /// Box labels for synthesized images.
    Label,
    /// Training manifests from labeled batches.
    Assemble,
    /// Balanced mixes of real, simulated and synthesized data.
    Mix,
    /// Detector job specs per mix and seed.
    TrainSpecs,
    /// Run detector jobs and select checkpoints.
    Train,
    /// mAP of every run on the test split.
    Evaluate,
    /// Result tables and bar-chart CSV from stored run metrics.
    Report {
        /// Runs files (JSON lines of per-run metrics). Defaults to the run
        /// directory's metrics.
        #[arg(long)]
        runs: Vec<PathBuf>,
        /// Output directory for standalone reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record a trained LoRA adapter for one class.
    RegisterAdapter {
        /// Class id, name or slug.
        #[arg(long)]
        class: String,
        #[arg(long)]
        uri: String,
    },
    /// Write mock real and simulation datasets.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::Prepare => Stage::Prepare,
            Command::Caption => Stage::Caption,
            Command::LoraSpecs => Stage::LoraSpecs,
            Command::Prompts => Stage::Prompts,
            Command::Edges => Stage::Edges,
            Command::Synthesize => Stage::Synthesize,
            Command::Label => Stage::Label,
            Command::Assemble => Stage::Assemble,
            Command::Mix => Stage::Mix,
            Command::TrainSpecs => Stage::TrainSpecs,
            Command::Train => Stage::Train,
            Command::Evaluate => Stage::Evaluate,
            _ => return None,
        })
    }
}

fn effective_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok());
    if g.mock {
        cfg.force_mock();
    }
    if let Some(r) = g.regime {
        cfg.regime = r;
    }
    if let Some(s) = &g.seed_set {
        cfg.seeds = s.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_run_dir(g: &Global, cfg: &PipelineConfig, fresh: bool) -> Result<PathBuf> {
    if let Some(d) = &g.run_dir {
        return Ok(d.clone());
    }
    if fresh {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        return Ok(cfg.output_root.join(stamp.to_string()));
    }
    pipeline::latest_run(&cfg.output_root).ok_or_else(|| {
        Failure::dependency(format!(
            "no run directory under {}; pass --run-dir or start with `gensynth run`",
            cfg.output_root.display()
        ))
        .into()
    })
}

fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    if let Command::Fixtures { out, seed } = &cli.command {
        let real = fixtures::write_real(&out.join("real"), *seed)?;
        let sim = fixtures::write_sim(&out.join("sim"), *seed)?;
        println!("real manifest: {}\nsim manifest:  {}", real.display(), sim.display());
        return Ok(());
    }
    let cfg = effective_config(g)?;

    if let Command::Report { runs, out } = &cli.command {
        if !runs.is_empty() {
            let out = out.clone().unwrap_or_else(|| PathBuf::from("report"));
            let rendered = report::report_files(runs, &out, &gensynth_core::artifact::json_hash(&cfg))?;
            print!("{}\n{}", rendered.map_table, rendered.delta_table);
            return Ok(());
        }
    }

    let fresh = matches!(cli.command, Command::Run { .. });
    let run_dir = resolve_run_dir(g, &cfg, fresh)?;
    let ctx = Ctx::new(cfg, run_dir, g.force)?;
    gensynth_core::artifact::write_json_atomic(&ctx.path("config.json"), &ctx.cfg)?;
    eprintln!("run directory: {}", ctx.run_dir.display());

    match &cli.command {
        Command::Run { stages } => {
            let stages = stages.clone().unwrap_or_else(|| Stage::ALL.to_vec());
            for s in Stage::ALL.into_iter().filter(|s| stages.contains(s)) {
                run_stage(&ctx, s)?;
            }
        }
        Command::RegisterAdapter { class, uri } => pipeline::register_adapter(&ctx, class, uri)?,
        Command::Report { .. } => run_stage(&ctx, Stage::Report)?,
        other => run_stage(&ctx, other.stage().expect("stage command"))?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(failure::exit_code(&e) as u8)
        }
    }
}
