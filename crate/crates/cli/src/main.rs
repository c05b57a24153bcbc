use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use signprop_core::harness::{self, Engine, FlipSign, GradcheckReport, TrainConfig};

#[derive(Parser)]
#[command(name = "signprop", version, about = "Train networks under alternative error-feedback rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config and write metrics, summary and a snapshot.
    Train {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Run seeds 1..=N in parallel, each under <out>/seed-<k>.
        #[arg(long)]
        seeds: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check backward passes against finite differences and a loop reference.
    Gradcheck {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Negate one layer's gradient before checking.
        #[arg(long, hide = true)]
        flip_sign_layer: Option<usize>,
    },
    /// Recompute diagnostics from a snapshot directory.
    Diagnose { snapshot: PathBuf },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn load(path: &PathBuf) -> Result<TrainConfig> {
    TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, seeds, out } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if out.is_some() {
                cfg.out = out;
            }
            match seeds {
                Some(0) => bail!("--seeds must be at least 1"),
                Some(n) => {
                    let seeds: Vec<u64> = (1..=n).collect();
                    for r in harness::run_replicas(&cfg, &seeds, cfg.out.as_deref())? {
                        print_summary(&r.summary);
                    }
                }
                None => print_summary(&harness::run(&cfg, cfg.out.as_deref())?.summary),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { config, seed, flip_sign_layer } => {
            let cfg = load(&config)?;
            let data = harness::load_dataset(&cfg.dataset, cfg.seed)?;
            let spec = cfg.network_spec(data.train.example_shape(), data.classes);
            let seed = seed.unwrap_or(cfg.seed);
            let report: GradcheckReport = match flip_sign_layer {
                Some(layer) => harness::gradcheck(&spec, &cfg.assignment(), seed, &mut FlipSign { inner: Engine, layer })?,
                None => harness::gradcheck(&spec, &cfg.assignment(), seed, &mut Engine)?,
            };
            print!("{report}");
            if report.passed() {
                println!("gradcheck passed");
                return Ok(ExitCode::SUCCESS);
            }
            let mut failing: Vec<String> = report
                .checks
                .iter()
                .flat_map(|c| c.failing_layers())
                .map(|l| l.map_or("input".to_string(), |l| l.to_string()))
                .collect();
            failing.sort();
            failing.dedup();
            println!("gradcheck FAILED at layers: {}", failing.join(", "));
            Ok(ExitCode::FAILURE)
        }
        Command::Diagnose { snapshot } => {
            let manifest = harness::read_manifest(&snapshot)?;
            println!("setting {} seed {} epoch {}", manifest.setting, manifest.seed, manifest.epoch);
            println!("layer  rule  alignment_deg  excess_kurtosis  mean_abs_w  std_abs_w");
            for r in harness::diagnose(&snapshot)? {
                println!(
                    "{:>5}  {:<4}  {:>13}  {:>15}  {:>10.6}  {:>9.6}",
                    r.layer,
                    r.rule.name(),
                    opt(r.alignment_deg, 3),
                    opt(r.excess_kurtosis, 4),
                    r.mean_abs_weight,
                    r.std_abs_weight
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

fn print_summary(s: &harness::Summary) {
    println!(
        "{} seed {}: {} epochs, test top1 {:.4} (loss {:.4}), train top1 {:.4}",
        s.setting, s.seed, s.epochs, s.final_test_top1, s.final_test_loss, s.final_train_top1
    );
}
