use adaseq::experiment::{
    evaluate_checkpoint, prepare_data, run_experiment, run_gradcheck, ExperimentSpec, DATA_ROOT_ENV,
};
use adaseq::report::write_json;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "adaseq", version, about = "Depth-adaptive LSTM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset preparation.
    Data {
        #[command(subcommand)]
        action: DataCommand,
    },
    /// Train the configured model and baselines on one data point.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on every split.
    Eval(RunArgs),
    /// Compare backprop gradients against central finite differences.
    Gradcheck(RunArgs),
    /// Train every point of the configured sweep.
    Sweep(RunArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Build, split and cache the dataset.
    Prepare(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.max_epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        ExperimentSpec::load(&self.config, &self.set)
            .with_context(|| format!("loading {} (dataset root may be overridden by {DATA_ROOT_ENV})", self.config.display()))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data {
            action: DataCommand::Prepare(args),
        } => {
            let ds = prepare_data(&args.spec()?, &args.out)?;
            let (tr, va, te) = ds.split_counts();
            println!(
                "{} sequences of {} steps ({} train / {} validation / {} test), {} features, {} classes, transient fraction {:.4}",
                ds.sequences.len(),
                ds.meta.steps,
                tr,
                va,
                te,
                ds.meta.input_dim,
                ds.meta.num_classes(),
                ds.transient_fraction()
            );
        }
        Command::Train(args) => {
            let spec = args.spec()?;
            if spec.sweep.is_some() {
                bail!("config has a sweep; use `adaseq sweep`");
            }
            let out = run_experiment(&spec, &args.out)?;
            for run in &out.points[0].runs {
                let r = &run.report;
                println!(
                    "{}{}: converged at epoch {}, validation CE {:.4}, test CE {:.4}, avg p {}",
                    run.arch.name(),
                    run.seed.map_or(String::new(), |s| format!(" (seed {s})")),
                    r.best_epoch,
                    r.best_val_ce,
                    r.test_ce,
                    r.avg_p_converged.map_or("-".to_string(), |p| format!("{p:.4}"))
                );
            }
        }
        Command::Sweep(args) => {
            let spec = args.spec()?;
            if spec.sweep.is_none() {
                bail!("config has no sweep section");
            }
            let out = run_experiment(&spec, &args.out)?;
            for row in &out.portion_summary {
                println!(
                    "{} = {}: avg p {}",
                    row.sweep,
                    row.value,
                    row.avg_p.map_or("-".to_string(), |p| format!("{p:.4}"))
                );
            }
        }
        Command::Eval(args) => {
            let report = evaluate_checkpoint(&args.spec()?, &args.out)?;
            println!(
                "{}: train CE {:.4}, validation CE {:.4}, test CE {:.4}",
                report.method, report.train_ce, report.val_ce, report.test_ce
            );
        }
        Command::Gradcheck(args) => {
            let spec = args.spec()?;
            let outcomes = run_gradcheck(&spec)?;
            std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
            write_json(&outcomes, args.out.join("gradcheck.json"))?;
            let mut failed = false;
            for o in &outcomes {
                println!(
                    "{} {}: {} coordinates, {} flagged, max relative error {:.3e} ({:.3e} with f64 differences)",
                    if o.passed() { "PASS" } else { "FAIL" },
                    o.method,
                    o.extended.coordinates(),
                    o.extended.non_differentiable(),
                    o.extended.max_rel_error(),
                    o.native.max_rel_error()
                );
                failed |= !o.passed();
            }
            if failed {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
