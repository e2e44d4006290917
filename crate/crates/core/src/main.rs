use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use avgn::avct::BlockKind;
use avgn::grouping::AssignmentMode;
use avgn::harness::{self, Checkpoint, EvalMode, RunConfig, TrainOptions};
use avgn::synth::{default_categories, write_dataset, Dataset};

#[derive(Parser)]
#[command(name = "avgn", version, about = "Audio-visual grouping network: synthetic data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene set with a JSON-lines manifest.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: u64,
        #[arg(long, default_value_t = 1)]
        n_sources: usize,
        /// First scene seed; scenes use consecutive seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines per-epoch log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on a manifest and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Expected sources per scene; checked against the manifest.
        #[arg(long)]
        n_sources: Option<usize>,
        /// Also score this many passes of random maps.
        #[arg(long, default_value_t = 0)]
        baseline_draws: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one heatmap overlay per source of a manifest entry.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Zero-based manifest line.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write per-source grouped embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Solo,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum AssignmentArg {
    Soft,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlockArg {
    Attention,
    Full,
}

/// Overrides applied on top of the preset and config file.
#[derive(Args)]
struct RunArgs {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base values when no config file is given: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_enum)]
    block: Option<BlockArg>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    assignment: Option<AssignmentArg>,
    #[arg(long)]
    no_avct: bool,
    #[arg(long)]
    no_avg: bool,
    #[arg(long)]
    n_sources: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => bail!("use either --config or --preset (a config file may set `preset`)"),
            (Some(path), None) => RunConfig::from_toml_file(path).with_context(|| format!("reading {}", path.display()))?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::desk(),
        };
        macro_rules! set {
            ($($field:ident <- $arg:expr),* $(,)?) => {$( if let Some(v) = $arg { cfg.$field = v; } )*};
        }
        set!(
            dim <- self.dim,
            num_categories <- self.categories,
            depth <- self.depth,
            temperature <- self.temperature,
            batch_size <- self.batch_size,
            learning_rate <- self.lr,
            epochs <- self.epochs,
            seed <- self.seed,
            n_sources <- self.n_sources,
        );
        if let Some(b) = self.block {
            cfg.block = match b {
                BlockArg::Attention => BlockKind::AttentionOnly,
                BlockArg::Full => BlockKind::Full,
            };
        }
        if let Some(a) = self.assignment {
            cfg.assignment = match a {
                AssignmentArg::Soft => AssignmentMode::Soft,
                AssignmentArg::Hard => AssignmentMode::HardGumbel,
            };
        }
        cfg.avct &= !self.no_avct;
        cfg.avg &= !self.no_avg;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json(value: &impl serde::Serialize, out: Option<&PathBuf>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::MakeData { out, count, n_sources, seed } => {
            let seeds: Vec<u64> = (seed..seed + count).collect();
            let manifest = write_dataset(&out, &default_categories(), &seeds, n_sources)?;
            println!("{}", manifest.display());
        }
        Command::Train { manifest, out, log, run } => {
            let cfg = run.resolve()?;
            let opts = TrainOptions { checkpoint: Some(out.clone()), log };
            let outcome = harness::train_with(&cfg, &manifest, &opts, |e| {
                eprintln!("{}", serde_json::to_string(e).expect("log entry serializes"));
            })?;
            println!("{}", outcome.checkpoint.checksum());
        }
        Command::Eval { checkpoint, manifest, mode, n_sources, baseline_draws, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::open(&manifest)?;
            let mode = mode.map(|m| match m {
                ModeArg::Solo => EvalMode::Solo,
                ModeArg::Multi => EvalMode::Multi,
            });
            let n = harness::eval::dataset_sources(&dataset, mode)?;
            if let Some(want) = n_sources {
                if want != n {
                    bail!("--n-sources {want} but the manifest scenes have {n}");
                }
            }
            let report = harness::evaluate_model(&ckpt.model()?, &dataset, mode)?;
            if baseline_draws > 0 {
                let cfg = ckpt.config.metric_config(n);
                let baseline = harness::random_map_baseline(&dataset, &cfg, baseline_draws, ckpt.config.seed)?;
                write_json(&serde_json::json!({ "model": report, "random_baseline": baseline }), out.as_ref())?;
            } else {
                write_json(&report, out.as_ref())?;
            }
        }
        Command::Visualize { checkpoint, manifest, index, out_dir } => {
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let dataset = Dataset::open(&manifest)?;
            let Some(record) = dataset.records.get(index) else {
                bail!("manifest has {} entries, index {index} requested", dataset.len());
            };
            for path in harness::visualize(&model, &dataset, record, &out_dir)? {
                println!("{}", path.display());
            }
        }
        Command::ExportEmbeddings { checkpoint, manifest, out } => {
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let rows = harness::export_embeddings(&model, &Dataset::open(&manifest)?, &out)?;
            eprintln!("wrote {rows} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
