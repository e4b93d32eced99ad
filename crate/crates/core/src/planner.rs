//! Breadth-first search over distilled primitives, using the learned model
//! as the transition function, and open-loop execution of the result.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EffectModel;
use crate::scalar::Scalar;
use crate::symbols::DistilledPrimitive;
use crate::world::{Effect, World, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Largest accepted Euclidean distance of any object to its goal (m).
    pub threshold: f64,
    pub max_depth: usize,
    pub single_object_tasks: usize,
    pub double_object_tasks: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            max_depth: 3,
            single_object_tasks: 100,
            double_object_tasks: 100,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config("planner.threshold must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningProblem {
    pub initial: WorldState,
    pub goal_positions: Vec<[f64; 3]>,
    pub threshold: f64,
    pub max_depth: usize,
}

impl PlanningProblem {
    pub fn validate(&self) -> Result<()> {
        self.initial.validate()?;
        if self.goal_positions.len() != self.initial.objects.len() {
            return Err(Error::Input(format!(
                "{} goals for {} objects",
                self.goal_positions.len(),
                self.initial.objects.len()
            )));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Input("threshold must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub primitive: DistilledPrimitive,
    pub target_index: usize,
    /// Effect the model predicted for this step during search.
    pub predicted_effect: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<PlanStep>,
    pub predicted_final: Vec<[f64; 3]>,
    pub found: bool,
    /// Search nodes goal-tested.
    pub expanded: usize,
}

/// Anything that maps (object features, action) pairs to a point effect.
pub trait EffectPredictor {
    fn predict(&self, objects: &[[f64; 4]], actions: &[[f64; 12]]) -> Result<Vec<Effect>>;
}

impl<T: Scalar> EffectPredictor for EffectModel<T> {
    fn predict(&self, objects: &[[f64; 4]], actions: &[[f64; 12]]) -> Result<Vec<Effect>> {
        self.predict_means(objects, actions)
    }
}

impl<F> EffectPredictor for F
where
    F: Fn(&[f64; 4], &[f64; 12]) -> Effect,
{
    fn predict(&self, objects: &[[f64; 4]], actions: &[[f64; 12]]) -> Result<Vec<Effect>> {
        Ok(objects.iter().zip(actions).map(|(o, a)| self(o, a)).collect())
    }
}

fn apply(positions: &mut [[f64; 3]], floors: &[f64], target: usize, e: &[f64; 3]) {
    let p = &mut positions[target];
    p[0] += e[0];
    p[1] += e[1];
    p[2] = (p[2] + e[2]).max(floors[target]);
}

fn floors(state: &WorldState) -> Vec<f64> {
    state.objects.iter().map(|o| o.spec.resting_z()).collect()
}

/// Predicted successor: the target moves by the predicted effect (height
/// floored at its resting height), everything else stays put.
pub fn predict_transition<P: EffectPredictor + ?Sized>(predictor: &P, state: &WorldState, step: &PlanStep) -> Result<WorldState> {
    if step.target_index >= state.objects.len() {
        return Err(Error::Input(format!("target index {} out of range", step.target_index)));
    }
    let object = state.objects[step.target_index].spec.features();
    let e = predictor.predict(&[object], &[step.primitive.action])?[0].to_array();
    let mut positions = state.positions();
    apply(&mut positions, &floors(state), step.target_index, &e);
    let mut next = state.clone();
    for (o, p) in next.objects.iter_mut().zip(positions) {
        o.pose.x = p[0];
        o.pose.y = p[1];
        o.pose.z = p[2];
    }
    Ok(next)
}

/// Every object within `threshold` (Euclidean) of its goal.
pub fn goal_check(positions: &[[f64; 3]], goals: &[[f64; 3]], threshold: f64) -> bool {
    positions.len() == goals.len()
        && positions.iter().zip(goals).all(|(p, g)| {
            let d2: f64 = p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() <= threshold
        })
}

/// Predicted effect of every primitive on every object. Object features do
/// not change during search, so one batch covers the whole tree.
fn effect_table<P: EffectPredictor + ?Sized>(
    predictor: &P,
    library: &[DistilledPrimitive],
    state: &WorldState,
) -> Result<Vec<Vec<[f64; 3]>>> {
    let mut objects = Vec::new();
    let mut actions = Vec::new();
    for o in &state.objects {
        for p in library {
            objects.push(o.spec.features());
            actions.push(p.action);
        }
    }
    let flat = predictor.predict(&objects, &actions)?;
    Ok(flat
        .chunks(library.len())
        .map(|c| c.iter().map(|e| e.to_array()).collect())
        .collect())
}

struct Node {
    positions: Vec<[f64; 3]>,
    /// `(primitive, target)` pairs from the root.
    path: Vec<(usize, usize)>,
}

/// Level-order tree search. Children are ordered by primitive index, then
/// target index, so the first goal-satisfying node is a shortest plan and
/// results are deterministic.
pub fn bfs_plan<P: EffectPredictor + ?Sized>(
    predictor: &P,
    library: &[DistilledPrimitive],
    problem: &PlanningProblem,
) -> Result<Plan> {
    problem.validate()?;
    if library.is_empty() {
        return Err(Error::Input("empty primitive library".into()));
    }
    let table = effect_table(predictor, library, &problem.initial)?;
    let floors = floors(&problem.initial);
    let objects = problem.initial.objects.len();
    let mut queue = VecDeque::from([Node {
        positions: problem.initial.positions(),
        path: Vec::new(),
    }]);
    let mut expanded = 0;
    while let Some(node) = queue.pop_front() {
        expanded += 1;
        if goal_check(&node.positions, &problem.goal_positions, problem.threshold) {
            let steps = node
                .path
                .iter()
                .map(|&(p, t)| PlanStep {
                    primitive: library[p].clone(),
                    target_index: t,
                    predicted_effect: table[t][p],
                })
                .collect();
            return Ok(Plan {
                steps,
                predicted_final: node.positions,
                found: true,
                expanded,
            });
        }
        if node.path.len() >= problem.max_depth {
            continue;
        }
        for p in 0..library.len() {
            for t in 0..objects {
                let mut positions = node.positions.clone();
                apply(&mut positions, &floors, t, &table[t][p]);
                let mut path = node.path.clone();
                path.push((p, t));
                queue.push_back(Node { positions, path });
            }
        }
    }
    Ok(Plan {
        steps: Vec::new(),
        predicted_final: problem.initial.positions(),
        found: false,
        expanded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub final_state: WorldState,
    pub success: bool,
    /// `|executed effect − predicted effect|` per step (Euclidean).
    pub deviations: Vec<f64>,
}

/// Run the plan's actions in the world, open loop.
pub fn execute_plan(plan: &Plan, world: &mut World, problem: &PlanningProblem) -> Result<Execution> {
    problem.validate()?;
    let mut state = problem.initial.clone();
    let mut deviations = Vec::with_capacity(plan.steps.len());
    for step in &plan.steps {
        let targeted = state.with_target(step.target_index)?;
        let (next, effect) = world.execute(&targeted, &step.primitive.action())?;
        let dev: f64 = effect
            .to_array()
            .iter()
            .zip(&step.predicted_effect)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        deviations.push(dev.sqrt());
        state = next;
    }
    let success = goal_check(&state.positions(), &problem.goal_positions, problem.threshold);
    Ok(Execution {
        final_state: state,
        success,
        deviations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbols::SymbolCode;
    use crate::world::{ObjectKind, ObjectSpec, PlacedObject, Pose, WorldConfig};

    fn prim(i: usize) -> DistilledPrimitive {
        let mut action = [0.0; 12];
        action[0] = i as f64;
        DistilledPrimitive {
            code: SymbolCode::new(vec![(i & 1) as u8]).unwrap(),
            action,
            residual: 0.0,
            label: None,
        }
    }

    fn state(n: usize) -> WorldState {
        let spec = ObjectSpec::new(0.04, 0.04, 0.04, ObjectKind::Solid);
        let objects = (0..n)
            .map(|i| PlacedObject {
                spec,
                pose: Pose::new(0.3 + 0.2 * i as f64, 0.5, 0.02),
            })
            .collect();
        WorldState::new(objects, 0).unwrap()
    }

    /// Primitive `i` moves any object by the i-th entry.
    fn table_predictor(moves: Vec<[f64; 3]>) -> impl Fn(&[f64; 4], &[f64; 12]) -> Effect {
        move |_, a| Effect::from_array(moves[a[0] as usize])
    }

    fn problem(n: usize, goals: Vec<[f64; 3]>) -> PlanningProblem {
        PlanningProblem {
            initial: state(n),
            goal_positions: goals,
            threshold: 0.05,
            max_depth: 3,
        }
    }

    #[test]
    fn goal_check_contract() {
        let p = [[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]];
        assert!(goal_check(&p, &p, 1e-9));
        assert!(!goal_check(&p, &[[0.06, 0.0, 0.0], [1.0, 1.0, 0.0]], 0.05));
        assert!(goal_check(&p, &[[0.06, 0.0, 0.0], [1.0, 1.0, 0.0]], 0.07));
    }

    #[test]
    fn already_at_goal() {
        let pr = problem(1, state(1).positions());
        let plan = bfs_plan(&table_predictor(vec![[0.1, 0.0, 0.0]]), &[prim(0)], &pr).unwrap();
        assert!(plan.found && plan.steps.is_empty());
        assert_eq!(plan.expanded, 1);
    }

    #[test]
    fn finds_shortest_sequence_and_targets() {
        let pred = table_predictor(vec![[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.0]]);
        let lib: Vec<_> = (0..3).map(prim).collect();
        let pr = problem(2, vec![[0.4, 0.6, 0.02], [0.6, 0.5, 0.02]]);
        let plan = bfs_plan(&pred, &lib, &pr).unwrap();
        assert!(plan.found);
        assert_eq!(plan.steps.len(), 3);
        assert!(goal_check(&plan.predicted_final, &pr.goal_positions, 0.05));
        // Replaying predicted transitions reaches the same positions.
        let mut s = pr.initial.clone();
        for step in &plan.steps {
            s = predict_transition(&pred, &s, step).unwrap();
        }
        assert_eq!(s.positions(), plan.predicted_final);
    }

    #[test]
    fn unreachable_goal_respects_node_bound() {
        let pred = table_predictor(vec![[0.01, 0.0, 0.0], [0.0, 0.01, 0.0]]);
        let lib: Vec<_> = (0..2).map(prim).collect();
        let pr = problem(2, vec![[0.9, 0.9, 0.02], [0.5, 0.5, 0.02]]);
        let plan = bfs_plan(&pred, &lib, &pr).unwrap();
        assert!(!plan.found);
        let b = 4usize;
        assert_eq!(plan.expanded, (b.pow(4) - 1) / (b - 1));
    }

    #[test]
    fn transition_contract() {
        let pred = table_predictor(vec![[0.0; 3], [0.02, -0.01, -0.5]]);
        let s = state(2);
        let still = predict_transition(
            &pred,
            &s,
            &PlanStep {
                primitive: prim(0),
                target_index: 1,
                predicted_effect: [0.0; 3],
            },
        )
        .unwrap();
        assert_eq!(still, s);
        let moved = predict_transition(
            &pred,
            &s,
            &PlanStep {
                primitive: prim(1),
                target_index: 1,
                predicted_effect: [0.0; 3],
            },
        )
        .unwrap();
        assert_eq!(moved.objects[0], s.objects[0]);
        assert!((moved.objects[1].pose.x - 0.52).abs() < 1e-12);
        assert_eq!(moved.objects[1].pose.z, 0.02);
        let bad = PlanStep {
            primitive: prim(1),
            target_index: 2,
            predicted_effect: [0.0; 3],
        };
        assert!(predict_transition(&pred, &s, &bad).is_err());
    }

    #[test]
    fn empty_plan_executes_trivially() {
        let pr = problem(1, state(1).positions());
        let plan = bfs_plan(&table_predictor(vec![[0.0; 3]]), &[prim(0)], &pr).unwrap();
        let mut world = World::new(WorldConfig::default(), 0);
        let ex = execute_plan(&plan, &mut world, &pr).unwrap();
        assert!(ex.success);
        assert!(ex.deviations.is_empty());
    }

    #[test]
    fn deviations_measure_model_world_gap() {
        // A push the world executes, with a deliberately wrong prediction.
        let mut push = prim(0);
        push.action = [-0.05, 0.0, 0.0, 1.0, -0.04, 0.0, 0.0, 1.0, 0.05, 0.0, 0.0, 1.0];
        let pr = problem(1, state(1).positions());
        let plan = Plan {
            steps: vec![PlanStep {
                primitive: push,
                target_index: 0,
                predicted_effect: [0.0; 3],
            }],
            predicted_final: pr.goal_positions.clone(),
            found: true,
            expanded: 1,
        };
        let mut world = World::new(WorldConfig::default(), 0);
        let ex = execute_plan(&plan, &mut world, &pr).unwrap();
        let moved = ex.final_state.objects[0].pose.x - pr.initial.objects[0].pose.x;
        assert!((ex.deviations[0] - moved.abs()).abs() < 1e-12);
        assert!(!ex.success);
        let again = execute_plan(&plan, &mut World::new(WorldConfig::default(), 0), &pr).unwrap();
        assert_eq!(ex, again);
    }
}
