use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neuralode_core::diagnostics::{halving_steps, inverse_error, rediscretize_eval, write_rediscretization_csv};
use neuralode_core::experiment::{self, prepare, ExperimentConfig, Outcome, Summary};
use neuralode_core::integrate::SolverConfig;
use neuralode_core::io::write_atomic;
use neuralode_core::{Checkpoint, ControlGrid, DynamicsLayer, Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "neuralode", version, about = "Train and check neural ODEs and continuous normalizing flows")]
struct Cli {
    /// Worker threads for the parallel diagnostics (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the initialization seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.json, convergence.csv and summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Taylor remainder test of the training gradient.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parameters to probe; the seeded initialization when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training iteration whose batch defines the objective.
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        /// Largest probe step; each further step halves it.
        #[arg(long, default_value_t = 0.1)]
        first_step: f64,
        #[arg(long, default_value_t = 8)]
        num_steps: usize,
        #[arg(long, default_value_t = 0)]
        direction_seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Forward-then-backward round-trip error on the test samples.
    Invcheck {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Solver as JSON, e.g. '{"method":"rk4","step":0.05}'; the training solver when absent.
        #[arg(long)]
        solver: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained flow under other solvers.
    Rediscretize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON array of solvers; rk4 at h = T, 0.5, 0.25, 0.05 (where they divide T) when absent.
        #[arg(long)]
        solvers: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train two configs from the same seed and tabulate them side by side.
    Compare {
        /// Given twice, once per config.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_numerical() => 3,
        Error::Config(_) | Error::Json(_) | Error::Dimension { .. } | Error::Range { .. } | Error::TraceGuard { .. } => 2,
        Error::Data(_) | Error::Csv(_) => 2,
        _ => 1,
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { config, common } => {
            let cfg = load_config(&config, common.seed)?;
            let out = experiment::run(&cfg)?;
            emit(&common.out, &out)?;
            Ok(status(&out.summary))
        }
        Command::Gradcheck {
            config,
            checkpoint,
            iteration,
            first_step,
            num_steps,
            direction_seed,
            common,
        } => {
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let cfg = resolve_config(config.as_deref(), ck.as_ref(), common.seed)?;
            let (layer, grid) = model(&cfg, ck.as_ref())?;
            let steps = halving_steps(first_step, num_steps);
            let result = experiment::gradcheck(&cfg, &layer, &grid, iteration, direction_seed, &steps)?;
            std::fs::create_dir_all(&common.out)?;
            result.save(&common.out, "gradcheck")?;
            println!("h,e0,e1");
            for ((h, a), b) in result.steps.iter().zip(&result.e0).zip(&result.e1) {
                println!("{h:e},{a:e},{b:e}");
            }
            println!("slope E0 {:.3}  slope E1 {:.3}", result.slope_e0, result.slope_e1);
            Ok(ExitCode::SUCCESS)
        }
        Command::Invcheck {
            checkpoint,
            config,
            solver,
            common,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = resolve_config(config.as_deref(), Some(&ck), common.seed)?;
            let (layer, grid) = ck.restore()?;
            let solver = match solver {
                Some(s) => parse_json::<SolverConfig>(&s, "solver")?,
                None => cfg.final_solver(),
            };
            let prepared = prepare(&cfg)?;
            let test = prepared
                .test_set()
                .ok_or_else(|| Error::Config("invcheck needs a flow experiment".into()))?;
            let report = inverse_error(&layer, &grid, test.view(), cfg.horizon, &solver, &solver)?;
            std::fs::create_dir_all(&common.out)?;
            write_json(&common.out.join("invcheck.json"), &Echoed { config: &cfg, result: &report })?;
            println!(
                "{}: mean inverse error {:e} ({} excluded)",
                solver.label(),
                report.mean,
                report.excluded
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Rediscretize {
            checkpoint,
            config,
            solvers,
            common,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = resolve_config(config.as_deref(), Some(&ck), common.seed)?;
            let (layer, grid) = ck.restore()?;
            let solvers = match solvers {
                Some(s) => parse_json::<Vec<SolverConfig>>(&s, "solvers")?,
                None => default_matrix(cfg.horizon),
            };
            let prepared = prepare(&cfg)?;
            let test = prepared
                .test_set()
                .ok_or_else(|| Error::Config("rediscretize needs a flow experiment".into()))?;
            let training = cfg.final_solver();
            let rows = rediscretize_eval(&layer, &grid, test.view(), cfg.horizon, &solvers, Some(&training));
            std::fs::create_dir_all(&common.out)?;
            let mut csv = Vec::new();
            write_rediscretization_csv(&rows, &mut csv)?;
            write_atomic(&common.out.join("rediscretize.csv"), &csv)?;
            write_json(&common.out.join("rediscretize.json"), &Echoed { config: &cfg, result: &rows })?;
            print!("{}", String::from_utf8_lossy(&csv));
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { config, common } => {
            if config.len() != 2 {
                return Err(Error::Config(format!("compare needs exactly two --config files, got {}", config.len())));
            }
            let mut rows = Vec::new();
            let mut code = ExitCode::SUCCESS;
            for (k, path) in config.iter().enumerate() {
                let cfg = load_config(path, common.seed)?;
                let out = experiment::run(&cfg)?;
                emit(&common.out.join(format!("run{k}")), &out)?;
                if out.summary.halted.is_some() {
                    code = ExitCode::from(3);
                }
                rows.push(out.summary);
            }
            if rows[0].config.seed != rows[1].config.seed {
                eprintln!("warning: the two configs use different seeds");
            }
            let table = compare_table(&rows);
            write_atomic(&common.out.join("compare.csv"), table.as_bytes())?;
            write_json(&common.out.join("compare.json"), &rows)?;
            print!("{table}");
            Ok(code)
        }
    }
}

#[derive(Serialize)]
struct Echoed<'a, T: Serialize> {
    config: &'a ExperimentConfig,
    result: &'a T,
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Explicit config first, then the echo stored in the checkpoint.
fn resolve_config(path: Option<&Path>, ck: Option<&Checkpoint>, seed: Option<u64>) -> Result<ExperimentConfig> {
    if let Some(p) = path {
        return load_config(p, seed);
    }
    let value = ck
        .and_then(|c| c.config.clone())
        .ok_or_else(|| Error::Config("missing field `config`: pass --config or a checkpoint with a config echo".into()))?;
    let mut cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model(cfg: &ExperimentConfig, ck: Option<&Checkpoint>) -> Result<(DynamicsLayer, ControlGrid)> {
    match ck {
        Some(c) => c.restore(),
        None => cfg.initial_model(),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("{what}: {e}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn default_matrix(horizon: f64) -> Vec<SolverConfig> {
    let mut steps = vec![horizon, 0.5, 0.25, 0.05];
    steps.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    steps
        .into_iter()
        .map(SolverConfig::rk4)
        .filter(|s| s.steps_for(horizon).is_ok())
        .collect()
}

fn emit(dir: &Path, out: &Outcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    out.write_artifacts(dir)?;
    let s = &out.summary;
    println!(
        "{} {}: {} iterations, final loss {}, test loss {}, inverse error {}, {:.1} ms/iteration, {:.1} NFE-F/iteration",
        experiment_label(s),
        s.engine,
        s.iterations_run,
        fmt_opt(s.final_train_loss),
        s.test_loss,
        fmt_opt(s.inverse_error),
        s.timing.mean_iteration_ms,
        s.mean_nfe_forward
    );
    if let Some(h) = &s.halted {
        eprintln!("training halted at {h}");
    }
    Ok(())
}

fn experiment_label(s: &Summary) -> String {
    serde_json::to_value(s.experiment)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6e}"))
}

fn status(s: &Summary) -> ExitCode {
    if s.halted.is_some() {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn compare_table(rows: &[Summary]) -> String {
    let mut t = String::from("engine,solver,final_loss,test_loss,inverse_error,mean_iteration_ms,total_ms,mean_nfe_f,total_nfe_f\n");
    for s in rows {
        t.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.engine,
            s.config.engine.forward.label(),
            s.final_train_loss.unwrap_or(f64::NAN),
            s.test_loss,
            s.inverse_error.unwrap_or(f64::NAN),
            s.timing.mean_iteration_ms,
            s.timing.total_ms,
            s.mean_nfe_forward,
            s.total_nfe_forward
        ));
    }
    t
}
