use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use curiosym::explorer::Strategy;
use curiosym::harness::experiment::{
    distill_cell, evaluate_prediction_error, explore_cell, load_dataset, load_library, load_model, load_test_set,
    plan_tasks, prepare_seed, train_cell, write_jsonl, Layout, TaskSuite,
};
use curiosym::harness::{build_report, run_comparison, ExperimentConfig};
use curiosym::{with_precision, Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "curiosym", version, about = "Curiosity-driven discovery of action primitives")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (overrides $CURIOSYM_OUT and `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StrategyArg {
    /// curiosity, active or random; all configured strategies when omitted.
    #[arg(long)]
    strategy: Option<Strategy>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect interactions and train the online model.
    Explore {
        #[command(flatten)]
        strategy: StrategyArg,
        /// Override `exploration.total_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Retrain a fresh model on a stored dataset.
    Train {
        #[command(flatten)]
        strategy: StrategyArg,
    },
    /// Generate the held-out test set and planning tasks.
    TestSet,
    /// Distill a primitive library from each action symbol.
    Distill {
        #[command(flatten)]
        strategy: StrategyArg,
    },
    /// Label the primitives of a library.
    Annotate {
        #[command(flatten)]
        strategy: StrategyArg,
    },
    /// Plan and execute the stored tasks with a library.
    Plan {
        #[command(flatten)]
        strategy: StrategyArg,
    },
    /// Per-axis prediction error on the test set.
    Eval {
        #[command(flatten)]
        strategy: StrategyArg,
    },
    /// Full strategy comparison followed by the report.
    Compare,
    /// Rebuild the report from stored artifacts.
    Report,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 3,
        Error::MissingArtifact(_) => 4,
        Error::ConfigMismatch { .. } => 5,
        _ => 1,
    }
}

struct Context {
    config: ExperimentConfig,
    layout: Layout,
}

impl Context {
    fn cells(&self, strategy: &StrategyArg) -> Vec<(u64, Strategy)> {
        let strategies = match strategy.strategy {
            Some(s) => vec![s],
            None => self.config.strategies.clone(),
        };
        self.config
            .seeds
            .iter()
            .flat_map(|&seed| strategies.iter().map(move |&s| (seed, s)))
            .collect()
    }
}

fn load_context(global: &Global) -> Result<Context> {
    let mut config = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seeds = vec![seed];
    }
    let layout = Layout::new(config.output_root(global.out.as_deref()));
    Ok(Context { config, layout })
}

fn explore<T: Scalar>(ctx: &Context, seed: u64, strategy: Strategy) -> Result<()> {
    let run = explore_cell::<T>(&ctx.config, seed, strategy, &ctx.layout)?;
    println!(
        "{} seed {}: {} interactions -> {}",
        strategy.name(),
        seed,
        run.interactions.len(),
        ctx.layout.dataset(seed, strategy).display()
    );
    Ok(())
}

fn train<T: Scalar>(ctx: &Context, seed: u64, strategy: Strategy) -> Result<()> {
    let model = train_cell::<T>(&ctx.config, seed, strategy, &ctx.layout)?;
    println!("{} seed {}: {} updates", strategy.name(), seed, model.step());
    Ok(())
}

fn distill<T: Scalar>(ctx: &Context, seed: u64, strategy: Strategy) -> Result<()> {
    let model = load_model::<T>(&ctx.config, seed, strategy, &ctx.layout)?;
    let dataset = load_dataset(&ctx.config, seed, strategy, &ctx.layout)?;
    let library = distill_cell(&ctx.config, seed, strategy, &model, &dataset)?;
    library.save(&ctx.layout.library(seed, strategy))?;
    println!(
        "{} seed {}: {} primitives, {} rejected",
        strategy.name(),
        seed,
        library.primitives.len(),
        library.rejected.len()
    );
    Ok(())
}

fn annotate(ctx: &Context, seed: u64, strategy: Strategy) -> Result<()> {
    let mut library = load_library(&ctx.config, seed, strategy, &ctx.layout)?;
    library.annotate_all(&ctx.config.world)?;
    library.save(&ctx.layout.library(seed, strategy))?;
    for p in &library.primitives {
        println!("{} seed {}: {} {}", strategy.name(), seed, p.code, p.label.map_or("-", |l| l.name()));
    }
    Ok(())
}

fn plan<T: Scalar>(ctx: &Context, seed: u64, strategy: Strategy) -> Result<()> {
    let library = load_library(&ctx.config, seed, strategy, &ctx.layout)?;
    let model = load_model::<T>(&ctx.config, seed, strategy, &ctx.layout)?;
    let suite = TaskSuite::load(&ctx.layout.tasks(seed), &ctx.config)?;
    let records = plan_tasks(&model, &library, &suite, &ctx.config.world, seed)?;
    write_jsonl(&ctx.layout.plans(seed, strategy), &records)?;
    let ok = |n: usize| records.iter().filter(|r| r.objects == n && r.success).count();
    println!(
        "{} seed {}: single {}/{}, double {}/{}",
        strategy.name(),
        seed,
        ok(1),
        suite.single.len(),
        ok(2),
        suite.double.len()
    );
    Ok(())
}

fn eval<T: Scalar>(ctx: &Context, seed: u64, strategy: Strategy) -> Result<()> {
    let model = load_model::<T>(&ctx.config, seed, strategy, &ctx.layout)?;
    let test = load_test_set(&ctx.config, seed, &ctx.layout)?;
    let [x, y, z] = evaluate_prediction_error(&model, &test)?;
    println!("{} seed {}: mae x {x:.6} y {y:.6} z {z:.6}", strategy.name(), seed);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut ctx = load_context(&cli.global)?;
    let precision = ctx.config.model.precision;
    match &cli.command {
        Command::Explore { strategy, steps } => {
            if let Some(n) = steps {
                ctx.config.exploration.total_steps = *n;
            }
            ctx.config.validate()?;
            for (seed, s) in ctx.cells(strategy) {
                with_precision!(precision, explore(&ctx, seed, s))?;
            }
        }
        Command::Train { strategy } => {
            for (seed, s) in ctx.cells(strategy) {
                with_precision!(precision, train(&ctx, seed, s))?;
            }
        }
        Command::TestSet => {
            ctx.config.validate()?;
            for &seed in &ctx.config.seeds {
                prepare_seed(&ctx.config, seed, &ctx.layout)?;
                println!("seed {seed}: {}", ctx.layout.seed_dir(seed).display());
            }
        }
        Command::Distill { strategy } => {
            for (seed, s) in ctx.cells(strategy) {
                with_precision!(precision, distill(&ctx, seed, s))?;
            }
        }
        Command::Annotate { strategy } => {
            for (seed, s) in ctx.cells(strategy) {
                annotate(&ctx, seed, s)?;
            }
        }
        Command::Plan { strategy } => {
            for (seed, s) in ctx.cells(strategy) {
                with_precision!(precision, plan(&ctx, seed, s))?;
            }
        }
        Command::Eval { strategy } => {
            for (seed, s) in ctx.cells(strategy) {
                with_precision!(precision, eval(&ctx, seed, s))?;
            }
        }
        Command::Compare => {
            let report = run_comparison(&ctx.config, &ctx.layout)?;
            print!("{}", report.to_text());
        }
        Command::Report => {
            let report = build_report(&ctx.config, &ctx.layout)?;
            report.save(&ctx.layout)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
