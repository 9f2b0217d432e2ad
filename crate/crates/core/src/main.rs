use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lidar_ood::bench::{self, AblationAxis, RunConfig};
use lidar_ood::Result;

#[derive(Parser, Debug)]
#[command(name = "lidar-ood", version, about = "Post-hoc OOD detection benchmark for synthetic LiDAR scenes")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the seed list (train/eval/ablate) or the dataset seed (gen-data).
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Allow writing into non-empty output locations.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; all outputs are identical for any value.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test scenes and a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one OOD head per seed and calibrate its threshold.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split with every configured method.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain and evaluate the head along one ablation axis.
    Ablate {
        /// feature_map, fusion or scaling
        #[arg(long)]
        axis: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the tables stored in a results directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed_override {
        match cli.command {
            Command::GenData { .. } => cfg.dataset.seed = seed,
            _ => cfg.head.seeds = vec![seed],
        }
    }
    match &cli.command {
        Command::GenData { out } => {
            let m = bench::cmd_gen_data(&cfg, out, cli.force)?;
            println!(
                "wrote {} / {} / {} scenes to {} ({} val OOD, {} test OOD objects)",
                m.scenes[0],
                m.scenes[1],
                m.scenes[2],
                out.display(),
                m.ood_objects[1],
                m.ood_objects[2]
            );
        }
        Command::Train { data, out } => {
            let rec = bench::cmd_train(&cfg, data, out, cli.force)?;
            for s in &rec.seeds {
                let losses: Vec<String> = s.log.epoch_loss.iter().map(|l| format!("{l:.4}")).collect();
                println!(
                    "seed {}: loss [{}], delta {:.6}, val TPR {:.4}",
                    s.log.seed,
                    losses.join(", "),
                    s.calibration.threshold,
                    s.calibration.val_tpr
                );
            }
        }
        Command::Eval { data, checkpoints, out } => {
            let res = bench::cmd_eval(&cfg, data, checkpoints, out, cli.force)?;
            print!("{}", bench::result_table(&res));
        }
        Command::Ablate { axis, data, out } => {
            let axis = AblationAxis::parse(axis)?;
            let table = bench::cmd_ablate(&cfg, axis, data, out, cli.force)?;
            print!("{}", table.to_text());
        }
        Command::Report { out } => print!("{}", bench::cmd_report(out)?),
        Command::ShowConfig => print!("{}", cfg.to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
