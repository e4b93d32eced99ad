use curiosym::planner::{bfs_plan, predict_transition, PlanningProblem};
use curiosym::symbols::{DistilledPrimitive, SymbolCode};
use curiosym::world::{Effect, ObjectKind, ObjectSpec, PlacedObject, Pose, WorldState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random problem whose predictor is a lookup table keyed by primitive
/// and object size.
struct Case {
    problem: PlanningProblem,
    library: Vec<DistilledPrimitive>,
    /// `effects[object][primitive]`
    effects: Vec<Vec<[f64; 3]>>,
}

fn primitive(i: usize) -> DistilledPrimitive {
    let mut action = [0.0; 12];
    action[0] = i as f64;
    DistilledPrimitive {
        code: SymbolCode::new(vec![(i & 1) as u8, ((i >> 1) & 1) as u8, ((i >> 2) & 1) as u8]).unwrap(),
        action,
        residual: 0.0,
        label: None,
    }
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let objects = rng.random_range(1..=2usize);
    let primitives = rng.random_range(1..=8 / objects);
    let depth = rng.random_range(0..=3usize);
    let placed: Vec<PlacedObject> = (0..objects)
        .map(|i| {
            let h = rng.random_range(0.02..0.08);
            PlacedObject {
                spec: ObjectSpec::new(0.02 + 0.01 * i as f64, 0.04, h, ObjectKind::Solid),
                pose: Pose::new(0.3 + 0.3 * i as f64, 0.5, h / 2.0),
            }
        })
        .collect();
    let effects: Vec<Vec<[f64; 3]>> = (0..objects)
        .map(|_| {
            (0..primitives)
                .map(|_| {
                    [
                        rng.random_range(-0.12..0.12),
                        rng.random_range(-0.12..0.12),
                        rng.random_range(-0.05..0.05),
                    ]
                })
                .collect()
        })
        .collect();
    let initial = WorldState::new(placed, 0).unwrap();
    // Half the goals replay a random sequence, half are arbitrary offsets.
    let mut goal = initial.positions();
    if rng.random_bool(0.5) {
        for _ in 0..rng.random_range(0..=3usize) {
            let t = rng.random_range(0..objects);
            let p = rng.random_range(0..primitives);
            let e = effects[t][p];
            goal[t][0] += e[0];
            goal[t][1] += e[1];
            goal[t][2] = (goal[t][2] + e[2]).max(initial.objects[t].spec.resting_z());
        }
    } else {
        for g in goal.iter_mut() {
            g[0] += rng.random_range(-0.2..0.2);
            g[1] += rng.random_range(-0.2..0.2);
        }
    }
    Case {
        problem: PlanningProblem {
            initial,
            goal_positions: goal,
            threshold: 0.05,
            max_depth: depth,
        },
        library: (0..primitives).map(primitive).collect(),
        effects,
    }
}

fn reaches(case: &Case, seq: &[(usize, usize)]) -> bool {
    let s = &case.problem.initial;
    let mut pos = s.positions();
    for &(p, t) in seq {
        let e = case.effects[t][p];
        pos[t][0] += e[0];
        pos[t][1] += e[1];
        pos[t][2] = (pos[t][2] + e[2]).max(s.objects[t].spec.height / 2.0);
    }
    pos.iter().zip(&case.problem.goal_positions).all(|(a, g)| {
        ((a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2) + (a[2] - g[2]).powi(2)).sqrt() <= case.problem.threshold
    })
}

/// Shortest satisfying sequence length by trying every sequence.
fn exhaustive(case: &Case) -> Option<usize> {
    let objects = case.effects.len();
    let moves: Vec<(usize, usize)> = (0..case.library.len())
        .flat_map(|p| (0..objects).map(move |t| (p, t)))
        .collect();
    let mut level: Vec<Vec<(usize, usize)>> = vec![Vec::new()];
    for len in 0..=case.problem.max_depth {
        if level.iter().any(|s| reaches(case, s)) {
            return Some(len);
        }
        level = level
            .iter()
            .flat_map(|s| {
                moves.iter().map(move |&m| {
                    let mut n = s.clone();
                    n.push(m);
                    n
                })
            })
            .collect();
    }
    None
}

fn predictor(case: &Case) -> impl Fn(&[f64; 4], &[f64; 12]) -> Effect + '_ {
    move |o, a| {
        let t = case
            .problem
            .initial
            .objects
            .iter()
            .position(|x| x.spec.features() == *o)
            .unwrap();
        Effect::from_array(case.effects[t][a[0] as usize])
    }
}

#[test]
fn bfs_agrees_with_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut found = 0;
    for i in 0..200 {
        let case = random_case(&mut rng);
        let pred = predictor(&case);
        let plan = bfs_plan(&pred, &case.library, &case.problem).unwrap();
        let expected = exhaustive(&case);
        assert_eq!(plan.found, expected.is_some(), "case {i}");
        if let Some(len) = expected {
            found += 1;
            assert_eq!(plan.steps.len(), len, "case {i}");
            let seq: Vec<_> = plan
                .steps
                .iter()
                .map(|s| (s.primitive.action[0] as usize, s.target_index))
                .collect();
            assert!(reaches(&case, &seq), "case {i}");
            let mut s = case.problem.initial.clone();
            for step in &plan.steps {
                s = predict_transition(&pred, &s, step).unwrap();
            }
            assert_eq!(s.positions(), plan.predicted_final);
        }
        let b = case.library.len() * case.effects.len();
        let bound: usize = (0..=case.problem.max_depth).map(|d| b.pow(d as u32)).sum();
        assert!(plan.expanded <= bound, "case {i}");
        if !plan.found {
            assert_eq!(plan.expanded, bound, "case {i}");
        }
    }
    // Both outcomes are exercised.
    assert!(found > 20 && found < 180, "{found}");
}

#[test]
fn plans_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let case = random_case(&mut rng);
        let pred = predictor(&case);
        assert_eq!(
            bfs_plan(&pred, &case.library, &case.problem).unwrap(),
            bfs_plan(&pred, &case.library, &case.problem).unwrap()
        );
    }
}
