use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sasrecllm::config::ExperimentConfig;
use sasrecllm::experiment::{exit_code, Experiment};
use sasrecllm::Error;

#[derive(Parser)]
#[command(name = "sasrecllm", about = "Sequential encoder + tiny LM recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// INI file with [data] [model] [train] [eval]; defaults apply without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip completed stages and reuse their best checkpoints.
    #[arg(long, global = true)]
    resume: bool,
    /// Laptop-sized models and schedules.
    #[arg(long, global = true)]
    desk_scale: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    Prepare,
    Train,
    Evaluate,
    Ablate,
    Report,
    Verify,
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, cli.desk_scale)?,
        None => ExperimentConfig::defaults(cli.desk_scale),
    }
    .with_seed(cli.seed);
    let exp = Experiment::new(cfg, cli.resume);
    match cli.command {
        Command::Prepare => {
            let s = exp.prepare()?;
            println!(
                "{} records, {} users, {} items -> {} (train {}, validation {}, test {}, warm {}, cold {})",
                s.stats.records,
                s.stats.users,
                s.stats.items,
                s.bundle_path.display(),
                s.split_sizes[0],
                s.split_sizes[1],
                s.split_sizes[2],
                s.split_sizes[3],
                s.split_sizes[4]
            );
        }
        Command::Train => {
            for s in exp.train()? {
                println!("{} seed {}: {:.1}s", s.model.name(), s.seed, s.seconds);
                for st in &s.stages {
                    println!(
                        "  stage {} epochs {}..={} best {:?} (epoch {:?})",
                        st.stage.name(),
                        st.first_epoch,
                        st.last_epoch,
                        st.best_value,
                        st.best_epoch
                    );
                }
            }
        }
        Command::Evaluate => print!("{}", exp.evaluate()?.csv()),
        Command::Ablate => {
            for r in exp.ablate()? {
                if r.missing {
                    println!("{}: missing", r.model.name());
                }
                for (split, v) in &r.splits {
                    println!("{} {split}: auc {:.4} ± {:.4}, uauc {:.4} ± {:.4}", r.model.name(), v[0], v[2], v[1], v[3]);
                }
            }
        }
        Command::Report => {
            for p in exp.report()? {
                println!("{}", p.display());
            }
        }
        Command::Verify => {
            let v = exp.verify()?;
            println!("verified {} values, max deviation {:.2e}", v.checked, v.max_deviation);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
