//! `cnuav`: train, run and evaluate the active-inference allocator.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cnuav_core::harness::{
    emit_report, load_config, load_model, load_records, run_experiment, run_single, save_model, solve_oracle,
    train_model, ExperimentConfig, ExperimentOutput, HarnessError,
};

const LOG_ENV: &str = "CNUAV_LOG_LEVEL";

#[derive(Parser)]
#[command(name = "cnuav", version, about = "Active-inference subchannel and power allocation for UAV-assisted cognitive NOMA uplinks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the perception model offline and write it to a file.
    Train(Common),
    /// Run online episodes, from a saved model or a freshly trained one.
    Run(Common),
    /// Run an experiment preset.
    Sweep(Common),
    /// Solve the first slot of a small scenario exhaustively.
    Oracle(Common),
    /// Summarize the curves in an output directory.
    Report(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    episodes: Option<usize>,
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(e) = self.episodes {
            cfg.episodes = e;
        }
        if let Some(p) = &self.preset {
            cfg.preset = p.clone();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed(&self, cfg: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(cfg.seeds[0])
    }
}

fn print_output(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    let report = emit_report(&out.records)?;
    print!("{}", report.table);
    println!("wrote {} files to {}", out.manifest.files.len() + 1, dir.display());
    Ok(())
}

fn train(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    let seed = args.seed(&cfg);
    let path = args.model.clone().unwrap_or_else(|| cfg.output_dir.join("model.json"));
    let model = train_model(&cfg, cfg.max_users, cfg.gng_lr, seed)?;
    let doc = save_model(&model, &cfg, cfg.max_users, seed, &path)?;
    println!(
        "trained model: {} combined clusters, gng lr {}, written to {}",
        doc.model.models.combined.vocab.num_clusters(),
        doc.gng_lr,
        path.display()
    );
    Ok(())
}

fn run(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    let seed = args.seed(&cfg);
    let model = match &args.model {
        Some(p) => Some(load_model(p, &cfg).with_context(|| format!("loading model {}", p.display()))?.model),
        None => None,
    };
    let out = run_single(&cfg, seed, model)?;
    print_output(&out, &cfg.output_dir)
}

fn sweep(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    let out = run_experiment(&cfg)?;
    print_output(&out, &cfg.output_dir)
}

fn oracle(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    let sol = solve_oracle(&cfg, args.seed(&cfg))?;
    println!("sum rate {:.6e} bit/s over {} evaluated choices", sol.sum_rate, sol.evaluated);
    for (k, members) in sol.allocation.sic_orders.iter().enumerate() {
        let users: Vec<String> = members
            .iter()
            .map(|&n| format!("su{n}@{:.3}W", sol.allocation.powers[n][k]))
            .collect();
        println!("channel {k}: {}", if users.is_empty() { "idle".to_string() } else { users.join(" ") });
    }
    Ok(())
}

fn report(args: &Common) -> Result<()> {
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => args.config()?.output_dir,
    };
    let records = load_records(&dir)?;
    let report = emit_report(&records)?;
    let path = dir.join("summary.csv");
    std::fs::write(&path, &report.csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", report.table);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<HarnessError>() {
        Some(e) if e.is_config_error() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Oracle(a) => oracle(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
