//! Command-line front end: config loading, flag-to-override mapping, and the
//! documented exit-code contract (0 ok, 2 invalid input, 3 numerical
//! failure, 4 I/O).

use blocksplat::cli;
use blocksplat::error::Result;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "blocksplat",
    version,
    about = "Block-parallel 2D Gaussian splatting trainer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config JSON file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. --set train.iterations=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[(String, String)]) -> Result<blocksplat::config::RunConfig> {
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                blocksplat::Error::validation(format!("--set expects KEY=VALUE, got '{kv}'"))
            })?;
            overrides.push((k.to_string(), v.to_string()));
        }
        overrides.extend_from_slice(extra);
        cli::load_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene, ground-truth images, and manifest.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
    /// Print the block partition and view assignment.
    Partition {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "dataset")]
        dataset: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Shorthand for --set train.iterations=N
        #[arg(long)]
        iterations: Option<u64>,
        /// Shorthand for --set train.mode=MODE
        #[arg(long)]
        mode: Option<String>,
        /// Shorthand for --set train.workers=K
        #[arg(long)]
        workers: Option<u32>,
        /// Shorthand for --set train.threads=T
        #[arg(long)]
        threads: Option<u32>,
        /// Shorthand for --set train.seed=S and --set scene.seed=S
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render views from a checkpoint.
    Render {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "dataset")]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "renders")]
        out: PathBuf,
        /// Render a single camera id instead of all.
        #[arg(long)]
        camera: Option<u32>,
    },
    /// Evaluate a checkpoint (or the ground truth itself) against the dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "dataset")]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate on training views instead of the holdout set.
        #[arg(long)]
        train_views: bool,
        /// Evaluate the ground-truth renderer against its own images.
        #[arg(long)]
        gt: bool,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Merge a checkpoint into a single deduplicated model file.
    Merge {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "dataset")]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "merged.bin")]
        out: PathBuf,
    },
    /// Run the finite-difference gradient verification suite.
    Gradcheck {
        /// Fixture seed.
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
    /// Run an ablation matrix (variants x seeds) and tabulate the metric.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Ablation spec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, out } => {
            let cfg = config.load(&[])?;
            let out = cli::resolve_out_dir(&out);
            let world = cli::cmd_generate(&cfg, &out)?;
            println!(
                "generated {} cameras ({} train / {} holdout), {} blocks -> {}",
                world.dataset.cameras.len(),
                world.dataset.train_ids.len(),
                world.dataset.holdout_ids.len(),
                world.blocks.len(),
                out.display()
            );
        }
        Command::Partition { config } => {
            let cfg = config.load(&[])?;
            print!("{}", cli::cmd_partition(&cfg)?);
        }
        Command::Train {
            config,
            dataset,
            out,
            resume,
            iterations,
            mode,
            workers,
            threads,
            seed,
        } => {
            let mut extra = Vec::new();
            if let Some(v) = iterations {
                extra.push(("train.iterations".to_string(), v.to_string()));
            }
            if let Some(v) = mode {
                extra.push(("train.mode".to_string(), format!("\"{v}\"")));
            }
            if let Some(v) = workers {
                extra.push(("train.workers".to_string(), v.to_string()));
            }
            if let Some(v) = threads {
                extra.push(("train.threads".to_string(), v.to_string()));
            }
            if let Some(v) = seed {
                extra.push(("train.seed".to_string(), v.to_string()));
                extra.push(("scene.seed".to_string(), v.to_string()));
            }
            let cfg = config.load(&extra)?;
            let out = cli::resolve_out_dir(&out);
            let outcome = cli::cmd_train(&cfg, &dataset, &out, resume.as_deref())?;
            println!(
                "trained {} iterations -> {} ({})",
                outcome.iterations,
                outcome.final_checkpoint.display(),
                outcome.metrics_csv.display()
            );
        }
        Command::Render {
            config,
            dataset,
            checkpoint,
            out,
            camera,
        } => {
            let cfg = config.load(&[])?;
            let out = cli::resolve_out_dir(&out);
            let files = cli::cmd_render(&cfg, &dataset, &checkpoint, &out, camera)?;
            println!("wrote {} renders to {}", files.len(), out.display());
        }
        Command::Eval {
            config,
            dataset,
            checkpoint,
            train_views,
            gt,
            report,
        } => {
            let cfg = config.load(&[])?;
            let r = cli::cmd_eval(
                &cfg,
                &dataset,
                checkpoint.as_deref(),
                train_views,
                gt,
                report.as_deref(),
            )?;
            println!(
                "eval[{} x{}]: psnr {:.3} dB  ssim {:.4}  l1 {:.5}{}",
                r.cameras,
                r.count,
                r.mean.psnr,
                r.mean.ssim,
                r.mean.l1,
                r.seam.map(|s| format!("  seam {s:.5}")).unwrap_or_default()
            );
        }
        Command::Merge {
            config,
            dataset,
            checkpoint,
            out,
        } => {
            let cfg = config.load(&[])?;
            let out = cli::resolve_out_dir(&out);
            let kept = cli::cmd_merge(&cfg, &dataset, &checkpoint, &out)?;
            println!("merged model with {kept} anchors -> {}", out.display());
        }
        Command::Gradcheck { seed } => {
            let (summary, pass) = cli::cmd_gradcheck(seed)?;
            print!("{summary}");
            if !pass {
                return Err(blocksplat::Error::numerics("gradient check failed"));
            }
        }
        Command::Ablate { config, spec, out } => {
            let cfg = config.load(&[])?;
            let spec = cli::AblationSpec::from_json_str(&cli::read_to_string(&spec)?)?;
            let out = cli::resolve_out_dir(&out);
            let report = cli::cmd_ablate(&cfg, &spec, Some(&out))?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(cli::exit_code_for(&e));
        }
    }
}
