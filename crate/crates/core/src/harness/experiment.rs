use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{atomic_write, check_hash, read_dataset, DatasetWriter, Transition};
use crate::error::{Error, Result};
use crate::explorer::{active_filter, run_exploration_with, Exploration, Strategy};
use crate::harness::config::ExperimentConfig;
use crate::harness::report::{build_report, Report};
use crate::model::{checkpoint, train_epochs, EffectModel, Optimizer};
use crate::planner::{bfs_plan, execute_plan, goal_check, EffectPredictor, PlannerConfig, PlanningProblem};
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::symbols::{enumerate_action_symbols, Library, SymbolCode};
use crate::world::{simulate, spawn_with, total_effect_magnitude, Action, World, WorldConfig};

/// Rows per batched prediction during evaluation.
const EVAL_CHUNK: usize = 1024;
/// Draws allowed per planning task before generation gives up.
const TASK_ATTEMPTS: usize = 10_000;

/// File locations under an output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn cell_dir(&self, seed: u64, strategy: Strategy) -> PathBuf {
        self.seed_dir(seed).join(strategy.name())
    }

    pub fn test_set(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("test.csv")
    }

    pub fn tasks(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("tasks.json")
    }

    pub fn dataset(&self, seed: u64, s: Strategy) -> PathBuf {
        self.cell_dir(seed, s).join("dataset.csv")
    }

    pub fn checkpoint(&self, seed: u64, s: Strategy) -> PathBuf {
        self.cell_dir(seed, s).join("model.ckpt")
    }

    pub fn metrics(&self, seed: u64, s: Strategy) -> PathBuf {
        self.cell_dir(seed, s).join("metrics.jsonl")
    }

    pub fn library(&self, seed: u64, s: Strategy) -> PathBuf {
        self.cell_dir(seed, s).join("library.json")
    }

    pub fn plans(&self, seed: u64, s: Strategy) -> PathBuf {
        self.cell_dir(seed, s).join("plans.jsonl")
    }

    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn report_jsonl(&self) -> PathBuf {
        self.root.join("report.jsonl")
    }
}

pub fn write_jsonl<S: Serialize>(path: &Path, records: impl IntoIterator<Item = S>) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r).map_err(|e| Error::format("jsonl", e))?;
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

pub fn read_jsonl<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let text = read_artifact(path)?;
    String::from_utf8_lossy(&text)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("jsonl", e)))
        .collect()
}

pub fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_artifact(path)?)))
}

/// Hash tying test sets and task suites to the world they were drawn from.
pub fn world_hash(world: &WorldConfig, extra: &impl Serialize) -> String {
    let json = serde_json::to_vec(&(world, extra)).expect("serializes");
    hex::encode(Sha256::digest(json))
}

/// Random single-object interactions whose total effect reaches
/// `threshold`, drawn until `count` are kept.
pub fn generate_test_set(
    world: &WorldConfig,
    count: usize,
    threshold: f64,
    seed: u64,
    attempts_per_row: usize,
) -> Result<Vec<Transition>> {
    if count == 0 {
        return Err(Error::Input("test set size must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, streams::TEST_SET);
    let mut sim = World::with_noise_stream(world.clone(), seed, streams::TEST_NOISE);
    let max_attempts = count.saturating_mul(attempts_per_row.max(1));
    let mut rows = Vec::with_capacity(count);
    let mut attempts = 0;
    while rows.len() < count {
        if attempts >= max_attempts {
            return Err(Error::Generation {
                requested: count,
                retained: rows.len(),
                attempts,
            });
        }
        attempts += 1;
        let state = spawn_with(world, &mut rng, 1)?;
        let action = Action::sample(&mut rng, world.action_range);
        let (_, effect) = sim.execute(&state, &action)?;
        if total_effect_magnitude(&effect) >= threshold {
            rows.push(Transition::new(state.target_object().spec.features(), &action, effect));
        }
    }
    Ok(rows)
}

/// Per-axis mean absolute error of the predictor's point estimate.
pub fn evaluate_prediction_error<P: EffectPredictor + ?Sized>(predictor: &P, test_set: &[Transition]) -> Result<[f64; 3]> {
    if test_set.is_empty() {
        return Err(Error::Degenerate("empty test set".into()));
    }
    let mut sums = [0.0; 3];
    for chunk in test_set.chunks(EVAL_CHUNK) {
        let objects: Vec<[f64; 4]> = chunk.iter().map(|t| t.object).collect();
        let actions: Vec<[f64; 12]> = chunk.iter().map(|t| t.action).collect();
        let preds = predictor.predict(&objects, &actions)?;
        for (p, t) in preds.iter().zip(chunk) {
            for (s, (a, b)) in sums.iter_mut().zip(p.to_array().iter().zip(&t.effect)) {
                *s += (a - b).abs();
            }
        }
    }
    let n = test_set.len() as f64;
    Ok(sums.map(|s| s / n))
}

/// Feasible-by-construction tasks: random objects, then one (single) or
/// `1..=max_depth` (double) random actions on random targets; the end
/// state is the goal. Tasks already satisfied at the start are redrawn.
pub fn generate_planning_problems(
    world: &WorldConfig,
    planner: &PlannerConfig,
    object_count: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PlanningProblem>> {
    let stream = if object_count == 1 {
        streams::PLANNING_SINGLE
    } else {
        streams::PLANNING_DOUBLE
    };
    let mut rng = stream_rng(seed, stream);
    let mut out = Vec::with_capacity(count);
    let max_attempts = count.saturating_mul(TASK_ATTEMPTS);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= max_attempts {
            return Err(Error::Generation {
                requested: count,
                retained: out.len(),
                attempts,
            });
        }
        attempts += 1;
        let initial = spawn_with(world, &mut rng, object_count)?;
        let actions = if object_count == 1 {
            1
        } else {
            rng.random_range(1..=planner.max_depth.max(1))
        };
        let mut state = initial.clone();
        for _ in 0..actions {
            let target = rng.random_range(0..object_count);
            let action = Action::sample(&mut rng, world.action_range);
            state = simulate(world, &state.with_target(target)?, &action)?.state;
        }
        let goal = state.positions();
        if goal_check(&initial.positions(), &goal, planner.threshold) {
            continue;
        }
        out.push(PlanningProblem {
            initial: initial.with_target(0)?,
            goal_positions: goal,
            threshold: planner.threshold,
            max_depth: planner.max_depth,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub world_hash: String,
    pub single: Vec<PlanningProblem>,
    pub double: Vec<PlanningProblem>,
}

impl TaskSuite {
    pub fn generate(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let p = &config.planner;
        Ok(Self {
            world_hash: world_hash(&config.world, p),
            single: generate_planning_problems(&config.world, p, 1, p.single_object_tasks, seed)?,
            double: generate_planning_problems(&config.world, p, 2, p.double_object_tasks, seed)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::format("tasks", e))?;
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path, config: &ExperimentConfig) -> Result<Self> {
        let suite: Self = serde_json::from_slice(&read_artifact(path)?).map_err(|e| Error::format("tasks", e))?;
        let expected = world_hash(&config.world, &config.planner);
        check_hash(path, &expected, Some(&suite.world_hash))?;
        Ok(suite)
    }
}

fn test_set_hash(config: &ExperimentConfig) -> String {
    world_hash(&config.world, &config.evaluation)
}

/// Generate (or regenerate) the per-seed test set and task suite.
pub fn prepare_seed(config: &ExperimentConfig, seed: u64, layout: &Layout) -> Result<()> {
    let test = generate_test_set(
        &config.world,
        config.evaluation.test_set_size,
        config.world.effect_threshold,
        seed,
        config.evaluation.attempts_per_row,
    )?;
    crate::dataset::write_dataset(&layout.test_set(seed), &test_set_hash(config), &test)?;
    TaskSuite::generate(config, seed)?.save(&layout.tasks(seed))
}

pub fn load_test_set(config: &ExperimentConfig, seed: u64, layout: &Layout) -> Result<Vec<Transition>> {
    let path = layout.test_set(seed);
    let (hash, rows) = read_dataset(&path)?;
    check_hash(&path, &test_set_hash(config), hash.as_deref())?;
    Ok(rows)
}

pub fn load_dataset(config: &ExperimentConfig, seed: u64, strategy: Strategy, layout: &Layout) -> Result<Vec<Transition>> {
    let path = layout.dataset(seed, strategy);
    let (hash, rows) = read_dataset(&path)?;
    check_hash(&path, &config.config_hash(strategy), hash.as_deref())?;
    Ok(rows)
}

pub fn load_model<T: Scalar>(config: &ExperimentConfig, seed: u64, strategy: Strategy, layout: &Layout) -> Result<EffectModel<T>> {
    let path = layout.checkpoint(seed, strategy);
    let (model, header) = checkpoint::load::<T>(&path)?;
    check_hash(&path, &config.config_hash(strategy), Some(&header.config_hash))?;
    Ok(model)
}

pub fn load_library(config: &ExperimentConfig, seed: u64, strategy: Strategy, layout: &Layout) -> Result<Library> {
    let path = layout.library(seed, strategy);
    let lib = Library::load(&path)?;
    check_hash(&path, &config.config_hash(strategy), Some(&lib.config_hash))?;
    Ok(lib)
}

/// Rows the strategy trains on.
pub fn training_rows(config: &ExperimentConfig, strategy: Strategy, interactions: &[Transition]) -> Vec<Transition> {
    match strategy {
        Strategy::Active => {
            let th = config.exploration.threshold(&config.world);
            interactions.iter().filter(|t| active_filter(t, th)).copied().collect()
        }
        _ => interactions.to_vec(),
    }
}

/// Explore and persist dataset, checkpoint and metrics trace.
pub fn explore_cell<T: Scalar>(config: &ExperimentConfig, seed: u64, strategy: Strategy, layout: &Layout) -> Result<Exploration<T>> {
    let hash = config.config_hash(strategy);
    let mut writer = DatasetWriter::create(&layout.dataset(seed, strategy), &hash)?;
    let run = run_exploration_with::<T>(
        &config.exploration_for(strategy),
        &config.world,
        &config.model,
        seed,
        &mut |t| writer.append(t),
    )?;
    writer.finish()?;
    checkpoint::save(&run.model, &hash, &layout.checkpoint(seed, strategy))?;
    write_jsonl(&layout.metrics(seed, strategy), &run.trace)?;
    Ok(run)
}

/// Fresh model trained offline on a persisted dataset for
/// `model.train.epochs` epochs.
pub fn train_cell<T: Scalar>(config: &ExperimentConfig, seed: u64, strategy: Strategy, layout: &Layout) -> Result<EffectModel<T>> {
    let data = training_rows(config, strategy, &load_dataset(config, seed, strategy, layout)?);
    let mut model = EffectModel::<T>::new(config.model.clone(), strategy.head(), seed)?;
    if !data.is_empty() {
        let mut opt = Optimizer::new(&config.model.train);
        let mut rng = stream_rng(seed, streams::TRAINING);
        train_epochs(&mut model, &mut opt, &data, &config.model.train, &mut rng)?;
    }
    checkpoint::save(&model, &config.config_hash(strategy), &layout.checkpoint(seed, strategy))?;
    Ok(model)
}

/// Distill every action symbol found in the dataset; annotation is a
/// separate pass.
pub fn distill_cell<T: Scalar>(
    config: &ExperimentConfig,
    seed: u64,
    strategy: Strategy,
    model: &EffectModel<T>,
    dataset: &[Transition],
) -> Result<Library> {
    let codes: Vec<SymbolCode> = enumerate_action_symbols(model, dataset).into_iter().map(|c| c.0).collect();
    Library::build(
        model,
        &codes,
        dataset,
        &config.symbols,
        &config.world,
        seed,
        &config.config_hash(strategy),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub code: SymbolCode,
    pub target: usize,
}

/// One planning task and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub objects: usize,
    pub task: usize,
    pub initial: Vec<[f64; 3]>,
    pub goal: Vec<[f64; 3]>,
    pub steps: Vec<StepRecord>,
    pub predicted_final: Vec<[f64; 3]>,
    pub executed_final: Vec<[f64; 3]>,
    pub found: bool,
    pub success: bool,
    pub deviations: Vec<f64>,
    pub expanded: usize,
}

/// Plan every task with the learned model, then execute in the world.
pub fn plan_tasks<P: EffectPredictor + ?Sized>(
    predictor: &P,
    library: &Library,
    suite: &TaskSuite,
    world: &WorldConfig,
    seed: u64,
) -> Result<Vec<PlanRecord>> {
    let mut sim = World::with_noise_stream(world.clone(), seed, streams::PLAN_NOISE);
    let mut out = Vec::with_capacity(suite.single.len() + suite.double.len());
    for (objects, problems) in [(1, &suite.single), (2, &suite.double)] {
        for (task, problem) in problems.iter().enumerate() {
            let record = if library.primitives.is_empty() {
                PlanRecord {
                    objects,
                    task,
                    initial: problem.initial.positions(),
                    goal: problem.goal_positions.clone(),
                    steps: Vec::new(),
                    predicted_final: problem.initial.positions(),
                    executed_final: problem.initial.positions(),
                    found: false,
                    success: false,
                    deviations: Vec::new(),
                    expanded: 0,
                }
            } else {
                let plan = bfs_plan(predictor, &library.primitives, problem)?;
                let (executed_final, success, deviations) = if plan.found {
                    let ex = execute_plan(&plan, &mut sim, problem)?;
                    (ex.final_state.positions(), ex.success, ex.deviations)
                } else {
                    (problem.initial.positions(), false, Vec::new())
                };
                PlanRecord {
                    objects,
                    task,
                    initial: problem.initial.positions(),
                    goal: problem.goal_positions.clone(),
                    steps: plan
                        .steps
                        .iter()
                        .map(|s| StepRecord {
                            code: s.primitive.code.clone(),
                            target: s.target_index,
                        })
                        .collect(),
                    predicted_final: plan.predicted_final,
                    executed_final,
                    found: plan.found,
                    success,
                    deviations,
                    expanded: plan.expanded,
                }
            };
            out.push(record);
        }
    }
    Ok(out)
}

/// Explore, distill, annotate and plan for one strategy and seed. The
/// seed's test set and task suite must already exist.
pub fn run_cell<T: Scalar>(config: &ExperimentConfig, seed: u64, strategy: Strategy, layout: &Layout) -> Result<()> {
    let run = explore_cell::<T>(config, seed, strategy, layout)?;
    let mut library = distill_cell(config, seed, strategy, &run.model, &run.interactions)?;
    library.annotate_all(&config.world)?;
    library.save(&layout.library(seed, strategy))?;
    let suite = TaskSuite::load(&layout.tasks(seed), config)?;
    let plans = plan_tasks(&run.model, &library, &suite, &config.world, seed)?;
    write_jsonl(&layout.plans(seed, strategy), &plans)
}

/// Run the precision-specific generic function `$f::<T>(args..)`.
#[macro_export]
macro_rules! with_precision {
    ($precision:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $precision {
            $crate::scalar::Precision::F32 => $f::<f32>($($arg),*),
            $crate::scalar::Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Every strategy × seed cell, then the report built from the persisted
/// artifacts. Cells run concurrently.
pub fn run_comparison(config: &ExperimentConfig, layout: &Layout) -> Result<Report> {
    config.validate()?;
    for &seed in &config.seeds {
        prepare_seed(config, seed, layout)?;
    }
    let cells: Vec<(u64, Strategy)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.strategies.iter().map(move |&st| (s, st)))
        .collect();
    cells
        .par_iter()
        .map(|&(seed, strategy)| with_precision!(config.model.precision, run_cell(config, seed, strategy, layout)))
        .collect::<Result<Vec<()>>>()?;
    let report = build_report(config, layout)?;
    report.save(layout)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_set_rows_pass_the_filter() {
        let w = WorldConfig::default();
        let a = generate_test_set(&w, 50, 0.008, 3, 1000).unwrap();
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|t| total_effect_magnitude(&t.effect()) >= 0.008));
        assert_eq!(a, generate_test_set(&w, 50, 0.008, 3, 1000).unwrap());
        assert!(matches!(
            generate_test_set(&w, 5, 10.0, 3, 2),
            Err(Error::Generation { requested: 5, retained: 0, .. })
        ));
    }

    #[test]
    fn perfect_predictor_has_zero_error() {
        let w = WorldConfig::default();
        let rows = generate_test_set(&w, 30, 0.008, 1, 1000).unwrap();
        let oracle = |o: &[f64; 4], a: &[f64; 12]| {
            rows.iter()
                .find(|t| &t.object == o && &t.action == a)
                .unwrap()
                .effect()
        };
        assert_eq!(evaluate_prediction_error(&oracle, &rows).unwrap(), [0.0; 3]);
        let zero = |_: &[f64; 4], _: &[f64; 12]| crate::world::Effect::default();
        let mae = evaluate_prediction_error(&zero, &rows).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        let mae_rev = evaluate_prediction_error(&zero, &rev).unwrap();
        for i in 0..3 {
            assert!((mae[i] - mae_rev[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn tasks_are_feasible_and_nontrivial() {
        let w = WorldConfig::default();
        let p = PlannerConfig::default();
        for n in [1, 2] {
            let tasks = generate_planning_problems(&w, &p, n, 10, 4).unwrap();
            assert_eq!(tasks.len(), 10);
            for t in &tasks {
                assert_eq!(t.initial.objects.len(), n);
                assert!(!goal_check(&t.initial.positions(), &t.goal_positions, p.threshold));
            }
        }
        // Replaying the first draw reaches the goal exactly.
        let mut rng = stream_rng(4, streams::PLANNING_SINGLE);
        let first = generate_planning_problems(&w, &p, 1, 1, 4).unwrap();
        let s = spawn_with(&w, &mut rng, 1).unwrap();
        let _target = rng.random_range(0..1);
        let a = Action::sample(&mut rng, w.action_range);
        if s == first[0].initial {
            assert_eq!(simulate(&w, &s, &a).unwrap().state.positions(), first[0].goal_positions);
        }
    }
}
