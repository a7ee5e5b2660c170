use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use partseg::pipeline::{self, exit_code, PseudoSource};
use partseg::selftrain::{FilterMode, FinetuneOrigin, RunConfig};
use partseg::synth::CorpusSpec;
use partseg::{Error, Parallelism, Result, Split};

/// Partial-label multi-organ segmentation: corpus generation, training,
/// self-training, assessment and evaluation.
#[derive(Parser)]
#[command(name = "partseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus with its manifests and corpus card.
    Generate {
        /// Corpus spec (TOML); the built-in reference corpus when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: train the unified model on ground truth.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Also train the per-dataset Multi-Nets baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Stage two: filtered self-training starting from a stage-one checkpoint.
    Selftrain {
        #[command(flatten)]
        run: RunArgs,
        /// Stage-one checkpoint.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_enum)]
        filter: Option<FilterArg>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Fine-tune every iteration from the stage-one weights.
        #[arg(long, conflicts_with = "from_prev")]
        from_theta0: bool,
        /// Fine-tune every iteration from the previous iteration's weights.
        #[arg(long)]
        from_prev: bool,
    },
    /// Score a pseudo dataset against the ground-truth feature distributions.
    Assess {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Saved pseudo dataset; built from the training manifests when omitted.
        #[arg(long)]
        pseudo: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Per-sample Dice, ASD and HD95 for a checkpoint or Multi-Nets manifest.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint file, or `multinets.json` from `train --baseline`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Compare eval directories, the first being the reference.
    Report {
        /// `name=dir` pairs.
        #[arg(long = "run", required = true, value_parser = parse_run)]
        runs: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML); the reference config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest, repeatable; replaces the config's list.
    #[arg(long = "manifest")]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run every stage on the calling thread.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    None,
    Image,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

fn parse_run(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), PathBuf::from(dir))),
        _ => Err(format!("expected name=dir, got `{s}`")),
    }
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => pipeline::load_config(p)?,
            None => RunConfig::reference(Vec::new()),
        };
        if !self.manifests.is_empty() {
            c.manifests = self.manifests.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if self.sequential {
            c.parallelism = Parallelism::Sequential;
        }
        if c.manifests.is_empty() {
            return Err(Error::Invalid("no dataset manifests: pass --manifest or a config listing them".into()));
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let mut spec = match &config {
                Some(p) => read_spec(p)?,
                None => CorpusSpec::reference(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let g = pipeline::cmd_generate(&spec, &out, Parallelism::default())?;
            for m in &g.manifests {
                println!("manifest {}", m.display());
            }
            println!("card {}", g.card.display());
        }
        Command::Train { run, baseline } => {
            let c = run.config()?;
            let r = pipeline::cmd_train(&c, &run.out, baseline)?;
            println!(
                "theta0 {} (epoch {}, val dice {:.4})",
                r.checkpoint.display(),
                r.best_epoch,
                r.best_val_dice
            );
            if let Some(m) = r.multinets {
                println!("multinets {}", m.display());
            }
        }
        Command::Selftrain {
            run,
            init,
            tau,
            filter,
            max_iters,
            from_theta0,
            from_prev,
        } => {
            let mut c = run.config()?;
            let s2 = &mut c.stage2;
            if let Some(t) = tau {
                s2.tau_quantile = t;
            }
            if let Some(f) = filter {
                s2.filtering = match f {
                    FilterArg::None => FilterMode::None,
                    FilterArg::Image => FilterMode::Image,
                };
            }
            if let Some(t) = max_iters {
                s2.max_iterations = t;
            }
            if from_theta0 {
                s2.origin = FinetuneOrigin::Theta0;
            }
            if from_prev {
                s2.origin = FinetuneOrigin::Previous;
            }
            c.validate()?;
            let r = pipeline::cmd_selftrain(&c, &init, &run.out)?;
            for it in &r.iterations {
                println!(
                    "iteration {}: kept {}/{}, val dice {}",
                    it.t,
                    it.kept_count,
                    it.total_count,
                    it.val_dice_mean.map_or("-".into(), |d| format!("{d:.4}"))
                );
            }
            println!(
                "best {} (iteration {}, val dice {:.4}, theta0 {:.4})",
                r.best_checkpoint.display(),
                r.best_iteration,
                r.best_val_dice,
                r.theta0_val_dice
            );
        }
        Command::Assess {
            run,
            checkpoint,
            pseudo,
            tau,
        } => {
            let source = match pseudo {
                Some(p) => PseudoSource::Saved(p),
                None => PseudoSource::Build(run.config()?),
            };
            let tau = tau.unwrap_or(partseg::qa::DEFAULT_TAU_QUANTILE);
            let r = pipeline::cmd_assess(&checkpoint, &source, tau, &run.out)?;
            println!("kept {}/{} at threshold {:.4}", r.kept, r.total, r.threshold);
        }
        Command::Eval { run, checkpoint, split } => {
            let c = run.config()?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            let s = pipeline::cmd_eval(&c, &checkpoint, split, &run.out)?;
            for k in &s.classes {
                println!(
                    "class {}: dice {:.4} asd {} hd95 {} (n={})",
                    k.class_k,
                    k.dice_mean,
                    fmt_opt(k.asd_mean),
                    fmt_opt(k.hd95_mean),
                    k.evaluable_rows
                );
            }
            println!("mean dice {}", fmt_opt(s.grand_dice));
        }
        Command::Report { runs, out } => {
            let r = pipeline::cmd_report(&runs, &out)?;
            for (name, d) in &r.grand_dice {
                println!("{name}: mean dice {}", fmt_opt(*d));
            }
            for c in r.comparisons.iter().filter(|c| c.class == "all") {
                println!("{} vs {}: diff {:+.4}, p = {:.4}", c.run, c.reference, c.mean_difference, c.p_value);
            }
        }
    }
    Ok(())
}

fn read_spec(path: &Path) -> Result<CorpusSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    CorpusSpec::from_toml(&text).map_err(|e| match e {
        Error::Toml(t) => Error::Format {
            path: path.to_path_buf(),
            reason: t.to_string(),
        },
        other => other,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
