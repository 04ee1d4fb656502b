//! `divae` command-line interface: data generation, density estimation,
//! training, evaluation, OOD runs, timing probes, and report aggregation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use divae::config::ExperimentConfig;
use divae::error::Error;
use divae::experiment;
use divae::metrics::MetricsReport;

#[derive(Parser)]
#[command(name = "divae", version, about = "Density-informed VAE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat `key = value` config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: `paper` (full scale) or `desk` (workstation scale).
    #[arg(long, default_value = "paper")]
    preset: String,
    /// Replace the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf), Error> {
        let base = ExperimentConfig::preset(&self.preset)?;
        let mut cfg = match &self.config {
            None => base,
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(vec![format!("cannot read config `{}`: {e}", path.display())])
                })?;
                ExperimentConfig::parse_over(base, &text)?
            }
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.out = out.to_string_lossy().into_owned();
        }
        cfg.validate()?;
        let out = PathBuf::from(&cfg.out);
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val datasets for every seed.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compute external log-density teachers for every seed.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one cell per seed: checkpoint + per-epoch diagnostics.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Cells to run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate trained cells: metrics CSV, latent dump, pretty table.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate trained cells on an out-of-distribution dataset.
    Ood {
        #[command(flatten)]
        common: CommonArgs,
        /// DIVD file holding the OOD evaluation split.
        #[arg(long)]
        ood_dataset: PathBuf,
    },
    /// Aggregate per-seed metrics into mean±std tables.
    Report {
        /// Output directory of previous runs (defaults to the config's).
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Wall-clock probes per method at the configured scale.
    Timing {
        #[command(flatten)]
        common: CommonArgs,
        /// Training epochs per probe.
        #[arg(long, default_value_t = 2)]
        epochs: usize,
    },
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn print_report_table(reports: &[MetricsReport]) {
    println!(
        "{:<9} {:<7} {:>5} {:>22} {:>22} {:>8} {:>8} {:>12} {:>10} {:>9}",
        "prior", "method", "seed", "elbo", "s", "KS", "W", "covKL", "KL(q,p2)", "H(q)"
    );
    for r in reports {
        println!(
            "{:<9} {:<7} {:>5} {:>10.3} ± {:>8.3} {:>10.3} ± {:>8.3} {:>8.4} {:>8.4} {:>12} {:>10} {:>9.3}",
            r.prior,
            r.method,
            r.seed,
            r.elbo_mean,
            r.elbo_std,
            r.s_mean,
            r.s_std,
            r.ks,
            r.w1,
            r.coverage_kl.map(|e| format!("{:.3}", e.value)).unwrap_or_else(|| "-".into()),
            r.kl_q_p2.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            r.entropy,
        );
    }
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common } => {
            let (cfg, out) = common.resolve()?;
            let files = experiment::gen_data(&cfg, &out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Estimate { common } => {
            let (cfg, out) = common.resolve()?;
            let files = experiment::estimate(&cfg, &out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Train { common, jobs } => {
            let (cfg, out) = common.resolve()?;
            let git = git_describe();
            let cells = experiment::train_cells(&cfg, &out, jobs, &git)?;
            for (seed, cell) in cfg.seeds.iter().zip(&cells) {
                let last = cell.stats.last().expect("at least one epoch");
                println!(
                    "seed {seed}: {} epochs, final elbo {:.3}, align {:.4}, flow_ml {:.4} -> {}",
                    cell.stats.len(),
                    last.elbo,
                    last.align_loss,
                    last.flow_ml,
                    cell.checkpoint_path.display()
                );
            }
        }
        Command::Eval { common } => {
            let (cfg, out) = common.resolve()?;
            let mut reports = Vec::new();
            for &seed in &cfg.seeds {
                reports.push(experiment::eval_cell(&cfg, &out, seed)?);
            }
            print_report_table(&reports);
            println!(
                "\nper-seed metrics.csv and latents.csv written under {}",
                out.join("runs").display()
            );
        }
        Command::Ood { common, ood_dataset } => {
            let (cfg, out) = common.resolve()?;
            println!(
                "{:<5} {:>12} {:>10} {:>10} {:>10}",
                "seed", "d_elbo", "d_s", "d_KL", "d_H"
            );
            for &seed in &cfg.seeds {
                let (_, shifts) = experiment::ood_cell(&cfg, &out, seed, &ood_dataset)?;
                println!(
                    "{:<5} {:>12.3} {:>10.3} {:>10.3} {:>10.3}",
                    seed, shifts.d_elbo, shifts.d_s, shifts.d_kl, shifts.d_entropy
                );
            }
        }
        Command::Report { common } => {
            let (_, out) = common.resolve()?;
            let table = experiment::aggregate_report(&out)?;
            print!("{}", table.text);
            println!("rows written to {}", out.join("report.csv").display());
        }
        Command::Timing { common, epochs } => {
            let (cfg, out) = common.resolve()?;
            let rows = experiment::timing_table(&cfg, epochs.max(1))?;
            let text = experiment::timing_text(&rows);
            print!("{text}");
            std::fs::create_dir_all(&out).ok();
            let mut csv = String::from("prior,method,t_init,batch_secs,epoch_secs\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.prior,
                    r.method,
                    r.t_init.map(|t| t.to_string()).unwrap_or_default(),
                    r.batch_secs,
                    r.epoch_secs
                ));
            }
            divae::io::write_atomic(&out.join("timing.csv"), csv.as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
