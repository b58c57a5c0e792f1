use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use batlab::harness::checkpoint::read_sidecar;
use batlab::harness::{pipeline, report, selftest, RunConfig};
use clap::{Args, Parser, Subcommand};

/// Audio self-supervised pretraining and layer-aware probing at desk scale.
#[derive(Parser)]
#[command(name = "batlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON). Omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (and the layered task when enabled).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Featurize a manifest into the content-addressed cache.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Pretrain on the manifest's train split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write frozen layer stacks for every split of a manifest.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train CGP and linear probes on stored layer stacks.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Directory holding train/valid/test stack containers.
        #[arg(long)]
        stacks: PathBuf,
    },
    /// CSV and SVG summaries of finished runs.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Gradient checks, contracts and metric oracles.
    Selftest {
        /// Seeds per gradient-check and contract suite.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Random instances for the AP oracle.
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        /// Also write the results as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common, fallback: Option<RunConfig>) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => fallback.unwrap_or_default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn checkpoint_config(p: &Path) -> anyhow::Result<RunConfig> {
    Ok(read_sidecar(p).with_context(|| format!("reading checkpoint {}", p.display()))?.config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load_config(&common, None)?;
            let m = pipeline::run_synth(&cfg, &common.out)?;
            print_json(&serde_json::json!({
                "manifest": common.out.join("manifest.json"),
                "records": m.records.len(),
                "vocabulary": m.vocabulary,
                "layered": m.layered,
            }))
        }
        Command::Ingest { common, manifest } => {
            let cfg = load_config(&common, None)?;
            let r = pipeline::run_ingest(&cfg, &manifest, &common.out)?;
            println!("{}", std::fs::read_to_string(common.out.join("ingest.json"))?);
            if !r.errors.is_empty() {
                anyhow::bail!("{} of {} records failed to ingest", r.errors.len(), r.errors.len() + r.items.len());
            }
            Ok(())
        }
        Command::Pretrain { common, manifest, resume } => {
            let fallback = resume.as_deref().map(checkpoint_config).transpose()?;
            let cfg = load_config(&common, fallback)?;
            let s = pipeline::run_pretrain(&cfg, &manifest, &common.out, resume.as_deref())?;
            print_json(&s)
        }
        Command::Embed { common, manifest, checkpoint } => {
            let cfg = load_config(&common, Some(checkpoint_config(&checkpoint)?))?;
            let sets = pipeline::run_embed(&cfg, &manifest, &checkpoint, &common.out)?;
            print_json(&sets.iter().map(|s| s.describe()).collect::<Vec<_>>())
        }
        Command::Probe { common, stacks } => {
            let cfg = load_config(&common, None)?;
            let s = pipeline::run_probe(&cfg, &stacks, &common.out)?;
            print_json(&s)
        }
        Command::Report { out, runs } => {
            let files = report::run_report(&runs, &out)?;
            for f in files.written {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Selftest { seeds, instances, out } => {
            let suites = selftest::selftest(seeds, instances)?;
            for s in &suites {
                println!(
                    "{:<20} {:>4}/{:<4} worst {:.3e} {}",
                    s.name,
                    s.passed,
                    s.total,
                    s.worst,
                    if s.ok() { "ok" } else { "FAILED" }
                );
                for f in &s.failures {
                    println!("    {f}");
                }
            }
            if let Some(p) = out {
                std::fs::create_dir_all(&p)?;
                std::fs::write(p.join("selftest.json"), serde_json::to_string_pretty(&suites)?)?;
            }
            if suites.iter().any(|s| !s.ok()) {
                anyhow::bail!("selftest failed");
            }
            Ok(())
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| {
        matches!(c.downcast_ref::<batlab::Error>(), Some(batlab::Error::Config(_)))
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
