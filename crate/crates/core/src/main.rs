use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iqrl::config::{parse_table, Precision, TrainConfig};
use iqrl::train::{default_out_dir, resume, train, LoadedRun};
use iqrl::Error;

#[derive(Parser)]
#[command(name = "iqrl", about = "Implicitly quantized representations for continuous control")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an agent from a TOML config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        env: Option<String>,
        /// Training steps after the random seed episodes.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override a config key, e.g. `--set batch_size=64`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "seed", "env", "overrides"])]
        resume: Option<PathBuf>,
    },
    /// Exploit-mode returns of a checkpointed agent.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Collapse probe and codebook usage of a checkpointed agent.
    Diag {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn build_config(
    config: Option<PathBuf>,
    seed: Option<u64>,
    env: Option<String>,
    steps: Option<u64>,
    overrides: &[String],
) -> iqrl::Result<TrainConfig> {
    let mut table = match config {
        Some(p) => parse_table(&std::fs::read_to_string(&p).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", p.display()))
        })?)?,
        None => toml::Table::new(),
    };
    TrainConfig::apply_overrides(&mut table, overrides)?;
    let mut cfg = TrainConfig::from_table(table)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = env {
        cfg.env = e;
    }
    if let Some(n) = steps {
        cfg.total_env_steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> iqrl::Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            seed,
            env,
            steps,
            out_dir,
            overrides,
            resume: Some(ckpt),
        } => {
            let _ = (config, seed, env, overrides);
            let loaded = LoadedRun::load(&ckpt)?;
            let out = out_dir.unwrap_or_else(|| default_out_dir(loaded.cfg()));
            let step = match loaded.precision() {
                Precision::F32 => resume::<f32>(&ckpt, &out, steps)?.env_step,
                Precision::F64 => resume::<f64>(&ckpt, &out, steps)?.env_step,
            };
            println!("resumed run finished at env step {step}; outputs in {}", out.display());
        }
        Cmd::Train {
            config,
            seed,
            env,
            steps,
            out_dir,
            overrides,
            resume: None,
        } => {
            let cfg = build_config(config, seed, env, steps, &overrides)?;
            let out = out_dir.unwrap_or_else(|| default_out_dir(&cfg));
            let step = match cfg.precision {
                Precision::F32 => train::<f32>(cfg, &out)?.env_step,
                Precision::F64 => train::<f64>(cfg, &out)?.env_step,
            };
            println!("finished at env step {step}; outputs in {}", out.display());
        }
        Cmd::Eval { checkpoint, episodes } => {
            let run = LoadedRun::load(&checkpoint)?;
            let res = run.evaluate(episodes)?;
            for (i, r) in res.returns.iter().enumerate() {
                println!("episode {i}: {r:.3}");
            }
            println!("mean: {:.3}", res.mean);
        }
        Cmd::Diag { checkpoint } => {
            let run = LoadedRun::load(&checkpoint)?;
            println!("env_step: {}", run.env_step());
            match run.probe()? {
                Some(p) => {
                    println!("latent_rank: {}", p.rank);
                    println!("latent_rank_max: {}", p.rank_max);
                    println!("constant: {}", p.constant);
                }
                None => println!("latent_rank: n/a (replay too small)"),
            }
            match (run.fsq(), run.active_fraction()) {
                (Some(spec), Some(frac)) => {
                    println!("fsq_levels: {:?}", spec.levels());
                    println!("fsq_groups: {}", spec.groups());
                    println!("codebook_size: {}", spec.codebook_size());
                    println!("codebook_active_frac: {frac:.4}");
                }
                _ => println!("quantization: off"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::UnknownEnv(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
