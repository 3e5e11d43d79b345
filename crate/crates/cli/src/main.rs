use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dua_core::runner::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dua", about = "Desk-scale domain-adaptive detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the distillation-trained detector.
    #[arg(long, global = true)]
    use_dua: bool,
    /// Evaluate with test-time score refinement.
    #[arg(long, global = true)]
    use_dce: bool,
    /// Override the run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and the teacher crop corpus.
    GenData(Common),
    /// Train the classification teacher and the localization network.
    TrainTeachers(Common),
    /// Train the aligned detector (with --use-dua for distillation).
    TrainDetector(Common),
    /// Evaluate a trained detector on both test splits.
    Evaluate(Common),
    /// Rebuild reports from evaluation dumps and write the ablation summary.
    Report(Common),
    /// All stages, both detectors, all four evaluations, then the summary.
    RunAll(Common),
    /// Print the default config as TOML.
    DefaultConfig,
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(d) = &c.run_dir {
        cfg.run_dir = d.clone();
    }
    cfg.use_dua |= c.use_dua;
    cfg.use_dce |= c.use_dce;
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.run_dir)
        .with_context(|| format!("creating {}", cfg.run_dir.display()))?;
    std::fs::write(cfg.run_dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let s = runner::gen_data(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::TrainTeachers(c) => {
            let cfg = load(&c)?;
            for &seed in &cfg.seeds {
                let s = runner::run_stage1(&cfg, seed)?;
                println!(
                    "seed {seed}: teacher acc {:.3}, balance gap {:.2} pp, TROLN {} steps",
                    s.teacher.train_accuracy, s.balance.gap_pp, s.troln_steps
                );
            }
        }
        Command::TrainDetector(c) => {
            let cfg = load(&c)?;
            for &seed in &cfg.seeds {
                let s = runner::run_stage2(&cfg, seed, cfg.use_dua)?;
                println!("seed {seed}: {} steps (resumed from {})", s.steps, s.resumed_from);
            }
        }
        Command::Evaluate(c) => {
            let cfg = load(&c)?;
            for &seed in &cfg.seeds {
                let r = runner::run_stage3(&cfg, seed, cfg.use_dua, cfg.use_dce)?;
                let theta = r.bias.map_or("n/a".to_string(), |b| format!("{:.2}%", b.theta_pct));
                println!(
                    "seed {seed} {}: AP_s {:.4} AP_t {:.4} Θ {theta}",
                    r.variant, r.ap_s, r.ap_t
                );
            }
        }
        Command::Report(c) => {
            let cfg = load(&c)?;
            let s = runner::report(&cfg)?;
            print!("{}", runner::summary_markdown(&s));
        }
        Command::RunAll(c) => {
            let cfg = load(&c)?;
            let s = runner::run_all(&cfg)?;
            print!("{}", runner::summary_markdown(&s));
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()?),
    }
    Ok(())
}
