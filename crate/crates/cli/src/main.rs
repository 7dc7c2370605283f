use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acgm::config::RunConfig;
use acgm::env::GraphMode;
use acgm::learn::DecayMode;
use acgm::pipeline;
use acgm::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "acgm", version, about = "Learned graph memory for long agent histories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset of held-out episodes.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run two-stage training and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Per-step metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Train on these episodes instead of generated ones.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Emit metric JSON for a checkpoint on a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the retrieval efficiency CSV.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show the memory one step of an episode retrieved.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        episode: usize,
        #[arg(long)]
        t: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DecayArg {
    Learned,
    Uniform,
    None,
}

impl From<DecayArg> for DecayMode {
    fn from(d: DecayArg) -> DecayMode {
        match d {
            DecayArg::Learned => DecayMode::Learned,
            DecayArg::Uniform => DecayMode::Uniform,
            DecayArg::None => DecayMode::None,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long, value_enum)]
    decay: Option<DecayArg>,
    /// learned, dense or threshold:<tau>
    #[arg(long)]
    graph: Option<GraphMode>,
    #[arg(long, value_enum)]
    hierarchy: Option<Switch>,
    #[arg(long, value_enum)]
    stage2: Option<Switch>,
    #[arg(long, value_enum)]
    memory: Option<Switch>,
}

impl Common {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(n) = self.n1 {
            cfg.train.n1 = n;
        }
        if let Some(n) = self.n2 {
            cfg.train.n2 = n;
        }
        if let Some(d) = self.decay {
            cfg.ablation.decay = d.into();
        }
        if let Some(g) = self.graph {
            cfg.ablation.graph = g;
        }
        if let Some(h) = self.hierarchy {
            cfg.ablation.hierarchy = h.into();
        }
        if let Some(s) = self.stage2 {
            cfg.ablation.stage2 = s.into();
        }
        if let Some(m) = self.memory {
            cfg.ablation.memory = m.into();
        }
    }

    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn rejects_config_file(&self) -> Result<()> {
        match self.config {
            Some(_) => Err(Error::Config("--config is not accepted here; the checkpoint carries its configuration".into())),
            None => Ok(()),
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out } => {
            let n = pipeline::cmd_generate(&common.config()?, &out)?;
            log::info!("wrote {n} episodes to {}", out.display());
        }
        Command::Train {
            common,
            out,
            metrics,
            dataset,
        } => {
            let cfg = common.config()?;
            let res = pipeline::cmd_train(&cfg, &out, metrics.as_deref(), dataset.as_deref())?;
            log::info!(
                "trained {} + {} steps, checkpoint {}",
                res.state.stage1_steps,
                res.state.stage2_steps,
                out.display()
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            dataset,
            out,
        } => {
            common.rejects_config_file()?;
            let json = pipeline::cmd_evaluate(&checkpoint, &dataset, &|c| common.apply(c))?;
            emit(&(json + "\n"), out.as_deref())?;
        }
        Command::Bench { common, out } => {
            let csv = pipeline::cmd_bench(&common.config()?)?;
            emit(&csv, out.as_deref())?;
        }
        Command::Retrieve {
            common,
            checkpoint,
            dataset,
            episode,
            t,
        } => {
            common.rejects_config_file()?;
            let text = pipeline::cmd_retrieve(&checkpoint, &dataset, episode, t, &|c| common.apply(c))?;
            emit(&text, None)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
