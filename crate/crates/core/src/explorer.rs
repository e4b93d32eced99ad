//! Data collection strategies: entropy-seeking curiosity, uniform random
//! actions, and random actions filtered by effect magnitude.

use std::f64::consts::{E, PI};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Transition;
use crate::error::{Error, Result};
use crate::model::{train_epochs, EffectDist, EffectModel, HeadMode, ModelConfig, Optimizer};
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::world::{spawn_with, total_effect_magnitude, Action, World, WorldConfig};

/// Candidates scored per parallel task.
const SCORE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Curiosity,
    Active,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Curiosity, Strategy::Active, Strategy::Random];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Curiosity => "curiosity",
            Strategy::Active => "active",
            Strategy::Random => "random",
        }
    }

    /// Curiosity needs predicted variances; the baselines regress effects.
    pub fn head(self) -> HeadMode {
        match self {
            Strategy::Curiosity => HeadMode::Distribution,
            Strategy::Active | Strategy::Random => HeadMode::Point,
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curiosity" => Ok(Strategy::Curiosity),
            "active" => Ok(Strategy::Active),
            "random" => Ok(Strategy::Random),
            _ => Err(Error::Input(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    pub strategy: Strategy,
    pub candidates_per_step: usize,
    pub total_steps: usize,
    pub retrain_interval: usize,
    pub epochs_per_retrain: usize,
    /// Effect floor of the active baseline; the world's `effect_threshold`
    /// when unset.
    pub active_threshold: Option<f64>,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Curiosity,
            candidates_per_step: 2000,
            total_steps: 10_000,
            retrain_interval: 512,
            epochs_per_retrain: 10,
            active_threshold: None,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates_per_step == 0 {
            return Err(Error::Config("exploration.candidates_per_step must be >= 1".into()));
        }
        if self.retrain_interval == 0 {
            return Err(Error::Config("exploration.retrain_interval must be >= 1".into()));
        }
        if let Some(t) = self.active_threshold {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::Config("exploration.active_threshold must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn threshold(&self, world: &WorldConfig) -> f64 {
        self.active_threshold.unwrap_or(world.effect_threshold)
    }
}

/// `½ log(2πe σ²)` in nats, with `σ² = exp(log_var)`.
pub fn gaussian_entropy(log_var: f64) -> f64 {
    0.5 * (2.0 * PI * E).ln() + 0.5 * log_var
}

/// Mean of the three per-axis entropies.
pub fn mean_entropy(dist: &EffectDist) -> f64 {
    dist.log_var.iter().map(|&lv| gaussian_entropy(lv)).sum::<f64>() / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub action: Action,
    pub mean_entropy: f64,
}

/// Outcome of one curiosity step.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen: Candidate,
    pub index: usize,
    /// Mean entropy over all scored candidates.
    pub mean_candidate_entropy: f64,
}

/// Index of the largest score; the first one wins ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Mean entropy of each candidate's predicted effect on `object`, in
/// candidate order. Evaluation mode; chunks are scored in parallel.
pub fn score_candidates<T: Scalar>(model: &EffectModel<T>, object: &[f64; 4], actions: &[[f64; 12]]) -> Result<Vec<f64>> {
    let chunks: Vec<Vec<f64>> = actions
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| {
            model
                .score_candidates(object, chunk)
                .map(|d| d.iter().map(mean_entropy).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Sample `n` candidates and return the one whose predicted effect has the
/// highest mean entropy.
pub fn select_curious_action<T: Scalar, R: Rng + ?Sized>(
    model: &EffectModel<T>,
    object: &[f64; 4],
    rng: &mut R,
    n: usize,
    range: f64,
) -> Result<Selection> {
    if n == 0 {
        return Err(Error::Input("candidate count must be >= 1".into()));
    }
    let actions: Vec<Action> = (0..n).map(|_| Action::sample(rng, range)).collect();
    let rows: Vec<[f64; 12]> = actions.iter().map(Action::to_array).collect();
    let scores = score_candidates(model, object, &rows)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Degenerate("non-finite candidate entropy".into()));
    }
    let index = argmax_first(&scores).expect("n >= 1");
    Ok(Selection {
        chosen: Candidate {
            action: actions[index],
            mean_entropy: scores[index],
        },
        index,
        mean_candidate_entropy: scores.iter().sum::<f64>() / n as f64,
    })
}

pub fn select_random_action<R: Rng + ?Sized>(rng: &mut R, range: f64) -> Action {
    Action::sample(rng, range)
}

/// `true` iff the transition's total effect reaches `threshold`.
pub fn active_filter(transition: &Transition, threshold: f64) -> bool {
    total_effect_magnitude(&transition.effect()) >= threshold
}

/// One line of the exploration metrics trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// 1-based step number.
    pub step: usize,
    pub strategy: Strategy,
    pub mean_candidate_entropy: Option<f64>,
    pub selected_entropy: Option<f64>,
    /// Transitions available for training so far.
    pub dataset_size: usize,
    /// Mean loss of the most recent training epoch, if any.
    pub last_train_loss: Option<f64>,
    /// A retraining round ended on this step.
    pub retrained: bool,
}

#[derive(Debug, Clone)]
pub struct Exploration<T> {
    /// Every executed interaction, in order.
    pub interactions: Vec<Transition>,
    /// The subset used for training.
    pub training_set: Vec<Transition>,
    pub model: EffectModel<T>,
    pub trace: Vec<MetricRecord>,
}

/// Run the exploration loop, handing each interaction to `sink` as it is
/// recorded.
pub fn run_exploration_with<T: Scalar>(
    config: &ExplorationConfig,
    world_config: &WorldConfig,
    model_config: &ModelConfig,
    seed: u64,
    sink: &mut dyn FnMut(&Transition) -> Result<()>,
) -> Result<Exploration<T>> {
    config.validate()?;
    world_config.validate()?;
    model_config.validate()?;
    let strategy = config.strategy;
    let threshold = config.threshold(world_config);
    let mut model = EffectModel::<T>::new(model_config.clone(), strategy.head(), seed)?;
    let mut train_config = model_config.train.clone();
    train_config.epochs = config.epochs_per_retrain;
    let mut optimizer = Optimizer::new(&train_config);
    let mut world = World::new(world_config.clone(), seed);
    let mut spawn_rng = stream_rng(seed, streams::SPAWN);
    let mut action_rng = stream_rng(seed, streams::ACTIONS);
    let mut train_rng = stream_rng(seed, streams::TRAINING);

    let mut interactions = Vec::with_capacity(config.total_steps);
    let mut training_set = Vec::new();
    let mut trace = Vec::with_capacity(config.total_steps);
    let mut last_loss = None;
    for step in 1..=config.total_steps {
        let state = spawn_with(world_config, &mut spawn_rng, 1)?;
        let object = state.target_object().spec.features();
        let (action, selection) = match strategy {
            Strategy::Curiosity => {
                let s = select_curious_action(
                    &model,
                    &object,
                    &mut action_rng,
                    config.candidates_per_step,
                    world_config.action_range,
                )?;
                (s.chosen.action, Some(s))
            }
            Strategy::Active | Strategy::Random => (select_random_action(&mut action_rng, world_config.action_range), None),
        };
        let (_, effect) = world.execute(&state, &action)?;
        let t = Transition::new(object, &action, effect);
        sink(&t)?;
        interactions.push(t);
        if strategy != Strategy::Active || active_filter(&t, threshold) {
            training_set.push(t);
        }

        let retrain = step % config.retrain_interval == 0 && !training_set.is_empty() && config.epochs_per_retrain > 0;
        if retrain {
            let losses = train_epochs(&mut model, &mut optimizer, &training_set, &train_config, &mut train_rng)?;
            last_loss = losses.last().copied();
        }
        trace.push(MetricRecord {
            step,
            strategy,
            mean_candidate_entropy: selection.as_ref().map(|s| s.mean_candidate_entropy),
            selected_entropy: selection.as_ref().map(|s| s.chosen.mean_entropy),
            dataset_size: training_set.len(),
            last_train_loss: last_loss,
            retrained: retrain,
        });
    }
    Ok(Exploration {
        interactions,
        training_set,
        model,
        trace,
    })
}

pub fn run_exploration<T: Scalar>(
    config: &ExplorationConfig,
    world_config: &WorldConfig,
    model_config: &ModelConfig,
    seed: u64,
) -> Result<Exploration<T>> {
    run_exploration_with(config, world_config, model_config, seed, &mut |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::dataset_hash;

    fn small_model() -> ModelConfig {
        ModelConfig {
            hidden_width: 16,
            ..ModelConfig::default()
        }
    }

    fn short(strategy: Strategy, steps: usize) -> ExplorationConfig {
        ExplorationConfig {
            strategy,
            candidates_per_step: 32,
            total_steps: steps,
            retrain_interval: 16,
            epochs_per_retrain: 2,
            active_threshold: None,
        }
    }

    #[test]
    fn entropy_closed_forms() {
        let h1 = 0.5 * (2.0 * PI * E).ln();
        assert!((gaussian_entropy(0.0) - 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!(gaussian_entropy(-(2.0 * PI * E).ln()).abs() < 1e-15);
        assert!((gaussian_entropy(4f64.ln()) - gaussian_entropy(0.0) - 2f64.ln()).abs() < 1e-12);
        let d = EffectDist {
            mean: [0.0; 3],
            log_var: [0.0, 0.0, -(2.0 * PI * E).ln()],
        };
        assert!((mean_entropy(&d) - 2.0 * h1 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax_first(&[]), None);
        assert_eq!(argmax_first(&[-5.0]), Some(0));
    }

    #[test]
    fn curious_selection_is_the_maximum() {
        let model = EffectModel::<f64>::new(small_model(), HeadMode::Distribution, 3).unwrap();
        let object = [0.05, 0.03, 0.04, 1.0];
        let sel = select_curious_action(&model, &object, &mut stream_rng(1, 2), 300, 0.05).unwrap();
        // Linear rescan of the same candidates.
        let mut rng = stream_rng(1, 2);
        let actions: Vec<[f64; 12]> = (0..300).map(|_| Action::sample(&mut rng, 0.05).to_array()).collect();
        let dists = model.predict_dists(&vec![object; 300], &actions).unwrap();
        for (i, d) in dists.iter().enumerate() {
            assert!(mean_entropy(d) <= sel.chosen.mean_entropy + 1e-12, "candidate {i}");
        }
        assert_eq!(actions[sel.index], sel.chosen.action.to_array());
        assert!(sel.chosen.mean_entropy >= sel.mean_candidate_entropy);

        let again = select_curious_action(&model, &object, &mut stream_rng(1, 2), 300, 0.05).unwrap();
        assert_eq!(sel, again);
        let one = select_curious_action(&model, &object, &mut stream_rng(9, 2), 1, 0.05).unwrap();
        assert_eq!(one.index, 0);
    }

    #[test]
    fn random_actions_are_in_range_and_uniform() {
        let mut rng = stream_rng(4, 2);
        let n = 100_000;
        let mut sums = [0.0; 12];
        for _ in 0..n {
            let a = select_random_action(&mut rng, 0.05).to_array();
            for (i, v) in a.iter().enumerate() {
                if i % 4 == 3 {
                    assert!((0.0..=1.0).contains(v));
                } else {
                    assert!(v.abs() <= 0.05);
                }
                sums[i] += v;
            }
        }
        for (i, s) in sums.iter().enumerate() {
            let (mid, width) = if i % 4 == 3 { (0.5, 1.0) } else { (0.0, 0.1) };
            let sd_of_mean = width / 12f64.sqrt() / (n as f64).sqrt();
            assert!((s / n as f64 - mid).abs() < 3.0 * sd_of_mean, "dim {i}");
        }
    }

    #[test]
    fn active_filter_contract() {
        let t = |e: [f64; 3]| Transition {
            object: [0.0; 4],
            action: [0.0; 12],
            effect: e,
        };
        assert!(!active_filter(&t([0.0; 3]), 0.008));
        assert!(active_filter(&t([0.01, 0.0, 0.0]), 0.008));
        assert!(active_filter(&t([0.004, -0.004, 0.0]), 0.008));
    }

    #[test]
    fn zero_steps_give_untrained_model() {
        let cfg = short(Strategy::Curiosity, 0);
        let run = run_exploration::<f32>(&cfg, &WorldConfig::default(), &small_model(), 0).unwrap();
        assert!(run.interactions.is_empty());
        assert_eq!(run.model.step(), 0);
        assert_eq!(run.model, EffectModel::new(small_model(), HeadMode::Distribution, 0).unwrap());
    }

    #[test]
    fn exploration_runs_are_reproducible() {
        for strategy in Strategy::ALL {
            let cfg = short(strategy, 40);
            let a = run_exploration::<f32>(&cfg, &WorldConfig::default(), &small_model(), 5).unwrap();
            let b = run_exploration::<f32>(&cfg, &WorldConfig::default(), &small_model(), 5).unwrap();
            assert_eq!(dataset_hash(&a.interactions), dataset_hash(&b.interactions));
            assert_eq!(a.model, b.model);
            assert_eq!(a.trace, b.trace);
            assert_eq!(a.interactions.len(), 40);
            assert_eq!(a.trace.iter().filter(|r| r.retrained).count(), 2);
            match strategy {
                Strategy::Active => {
                    let th = WorldConfig::default().effect_threshold;
                    let kept: Vec<_> = a.interactions.iter().filter(|t| active_filter(t, th)).copied().collect();
                    assert_eq!(kept, a.training_set);
                }
                _ => assert_eq!(a.training_set, a.interactions),
            }
            if strategy == Strategy::Curiosity {
                for r in &a.trace {
                    assert!(r.selected_entropy.unwrap() >= r.mean_candidate_entropy.unwrap());
                }
            }
        }
    }

    #[test]
    fn entropy_ignores_means() {
        let model = EffectModel::<f64>::new(small_model(), HeadMode::Distribution, 8).unwrap();
        let object = [0.05, 0.03, 0.04, 0.0];
        let mut rng = stream_rng(2, 2);
        let actions: Vec<[f64; 12]> = (0..20).map(|_| Action::sample(&mut rng, 0.05).to_array()).collect();
        let dists = model.score_candidates(&object, &actions).unwrap();
        let base: Vec<f64> = dists.iter().map(mean_entropy).collect();
        let shifted: Vec<f64> = dists
            .iter()
            .map(|d| {
                mean_entropy(&EffectDist {
                    mean: [d.mean[0] + 1.0, -d.mean[1], 7.0],
                    log_var: d.log_var,
                })
            })
            .collect();
        assert_eq!(base, shifted);
        let monotone: Vec<f64> = base.iter().map(|s| (3.0 * s).exp()).collect();
        assert_eq!(argmax_first(&base), argmax_first(&monotone));
    }
}
