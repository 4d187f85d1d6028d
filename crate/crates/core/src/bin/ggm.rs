use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ggm_core::cli::{self, CliConfig, SplitName};
use ggm_core::trainer::Mode;
use ggm_core::Result;

#[derive(Parser)]
#[command(name = "ggm", version, about = "Graph generative training on a synthetic compositional VQA benchmark")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train / id_test / ood_test splits and the frequency table.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train every seed and write checkpoints, loss logs and the report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `mode`.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Train this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every registered gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Write the JSON report here as well.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Test hook: perturb the analytic gradient of the named check.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Export ground-truth and generated relation matrices as CSV and PGM.
    ExportHeatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: usize,
        /// Output path prefix; `_gt.csv`, `_gt.pgm`, `_gen.csv` and `_gen.pgm` are appended.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ood_test")]
        split: SplitName,
    },
    /// Train once per η and report the spread of OOD accuracy.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Overrides `sweep_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    match s {
        "xggm" => Ok(Mode::Xggm),
        "baseline" => Ok(Mode::Baseline),
        _ => Err(format!("unknown mode {s:?}; expected xggm or baseline")),
    }
}

fn load(common: &Common) -> Result<CliConfig> {
    let mut cfg = match &common.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(args: Args) -> Result<bool> {
    match args.command {
        Command::GenData { common } => {
            let cfg = load(&common)?;
            let split = cli::cmd_gen_data(&cfg)?;
            println!(
                "wrote {} train, {} id_test, {} ood_test examples to {}",
                split.train.len(),
                split.id_test.len(),
                split.ood_test.len(),
                cfg.data_dir().display()
            );
        }
        Command::Train { common, mode, seed } => {
            let mut cfg = load(&common)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let report = cli::cmd_train(&cfg)?;
            for r in &report.per_seed {
                println!(
                    "seed {}: id {:.2} ood {:.2} gap {:.2}",
                    r.seed,
                    r.id.all,
                    r.ood.all,
                    r.ood.gap.unwrap_or(f64::NAN)
                );
            }
            println!("report: {}", cfg.run_dir().join("report.json").display());
        }
        Command::Gradcheck { common, report, corrupt } => {
            let cfg = load(&common)?;
            let result = cli::cmd_gradcheck(&cfg, corrupt)?;
            print!("{}", cli::gradcheck_text(&result));
            if let Some(path) = report {
                let mut bytes = serde_json::to_vec_pretty(&result)?;
                bytes.push(b'\n');
                ggm_core::fsutil::write_atomic(&path, &bytes)?;
            }
            return Ok(result.passed);
        }
        Command::ExportHeatmap { checkpoint, index, out, split } => {
            let files = cli::cmd_export_heatmap(&checkpoint, split, index, &out)?;
            for p in [files.gt_csv, files.gt_pgm, files.gen_csv, files.gen_pgm] {
                println!("wrote {}", p.display());
            }
        }
        Command::Sweep { common, seed } => {
            let mut cfg = load(&common)?;
            if let Some(s) = seed {
                cfg.sweep_seed = s;
            }
            let report = cli::cmd_sweep(&cfg)?;
            for r in &report.rows {
                println!("eta {:.2}: id {:.2} ood {:.2}", r.eta, r.id.all, r.ood.all);
            }
            println!("ood mean {:.3} std {:.3}", report.ood_all_mean, report.ood_all_std);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        // a failed gradient check is a numeric failure
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
