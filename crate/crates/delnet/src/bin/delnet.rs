//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration/usage errors, 3 runtime
//! failures (numeric aborts, capacity exhaustion, corrupt artifacts).

use clap::{Parser, Subcommand};
use delnet::config::RunConfig;
use delnet::data::{self, DegradationSpec, Family};
use delnet::error::{Error, Result};
use delnet::harness::{self, checkpoint, sweep::SweepAxis};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "delnet", version, about = "Continual multi-weather image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured continual task stream end to end.
    Run {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Model seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one ablation axis as a grid of runs.
    Sweep {
        /// Axis: experts | losses | components | order.
        #[arg(long)]
        axis: String,
        /// JSON base configuration shared by every cell.
        #[arg(long)]
        config: PathBuf,
        /// Sweep output directory (cells become subdirectories).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Model seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate one task from a stored checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task id to evaluate.
        #[arg(long)]
        task: usize,
    },
    /// Integrity-check a checkpoint by replaying its eval probe.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write sample clean/degraded pairs as PPM images.
    DumpSamples {
        /// Degradation family: haze | rain | snow.
        #[arg(long)]
        family: String,
        /// Number of pairs.
        #[arg(long, default_value_t = 4)]
        n: u64,
        /// Output directory.
        #[arg(long, default_value = "samples")]
        out: PathBuf,
        /// Data seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(path: &PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_json_file(path)?;
    if let Some(o) = out {
        cfg.out_dir = Some(o);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = load_config(&config, out, seed)?;
            let outcome = harness::run_continual(&cfg)?;
            println!("run complete: {}", outcome.out_dir.display());
            for t in &outcome.summary.tasks {
                println!(
                    "  task {} ({}): baseline {:.2} dB -> restored {:.2} dB, ssim {:.4}, experts {:?}",
                    t.task_id, t.family, t.baseline_psnr, t.final_psnr, t.final_ssim, t.owner_experts
                );
            }
            if let Some(f) = &outcome.summary.forgetting {
                println!("  forgetting: min {:.3} dB, mean {:.3} dB", f.min, f.mean);
            }
            Ok(())
        }
        Command::Sweep { axis, config, out, seed } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = load_config(&config, None, seed)?;
            let dir = out
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| Error::Config("--out or config.out_dir required".into()))?;
            let rows = harness::sweep::run_ablation_sweep(&cfg, axis, &dir)?;
            println!("sweep ({axis}) complete: {}", dir.display());
            for r in &rows {
                println!(
                    "  {}: {} tasks, {} experts, mean psnr {:.2} dB, mean ssim {:.4}",
                    r.cell, r.tasks, r.experts, r.mean_final_psnr, r.mean_final_ssim
                );
            }
            Ok(())
        }
        Command::Eval { checkpoint: path, task } => {
            let loaded = checkpoint::load(&path)?;
            let st = &loaded.state;
            let (psnr, ssim) =
                harness::evaluate_task(&st.config, &st.backbone, &st.library, &st.episodes, task)?;
            println!("task {task}: psnr {psnr:.4} dB, ssim {ssim:.4}");
            Ok(())
        }
        Command::Verify { checkpoint: path } => {
            checkpoint::verify(&path)?;
            println!("checkpoint ok: eval probe replayed bit-identically");
            Ok(())
        }
        Command::DumpSamples { family, n, out, seed, size } => {
            let family: Family = family.parse()?;
            std::fs::create_dir_all(&out)?;
            let spec = DegradationSpec::new(family, seed);
            for i in 0..n {
                let pair = data::sample_pair(&spec, i, size);
                data::write_ppm(&out.join(format!("{family}-{i}-clean.ppm")), &pair.clean)?;
                data::write_ppm(&out.join(format!("{family}-{i}-degraded.ppm")), &pair.degraded)?;
            }
            println!("wrote {n} {family} pairs to {}", out.display());
            Ok(())
        }
    }
}
