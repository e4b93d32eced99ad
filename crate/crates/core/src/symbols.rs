//! Discrete symbols from encoder outputs, and their inversion back into
//! executable actions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::dataset::{atomic_write, Transition};
use crate::error::{Error, Result};
use crate::model::{Embedding, EffectModel, Matrix, Mode};
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::world::{simulate, total_effect_magnitude, Action, ObjectKind, ObjectSpec, PlacedObject, Pose, WorldConfig, WorldState};

/// A binary code, most significant position first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymbolCode {
    pub bits: Vec<u8>,
}

impl SymbolCode {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Input("symbol bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// `2 · bit − 1`, the tanh extreme for each bit.
    pub fn target_embedding(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| 2.0 * b as f64 - 1.0).collect()
    }
}

impl fmt::Display for SymbolCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for SymbolCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(Error::Input(format!("bad symbol code {s:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(bits)
    }
}

impl Serialize for SymbolCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SymbolCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `1` where the value is strictly positive.
pub fn binarize(embedding: &Embedding) -> SymbolCode {
    binarize_values(&embedding.values)
}

fn binarize_values<V: Copy + Into<f64>>(values: &[V]) -> SymbolCode {
    SymbolCode {
        bits: values.iter().map(|&v| u8::from(v.into() > 0.0)).collect(),
    }
}

fn binarize_row<T: Scalar>(row: &[T]) -> SymbolCode {
    SymbolCode {
        bits: row.iter().map(|&v| u8::from(v > T::zero())).collect(),
    }
}

fn count_codes<T: Scalar>(codes: &Matrix<T>) -> Vec<(SymbolCode, usize)> {
    let mut counts = BTreeMap::new();
    for i in 0..codes.rows() {
        *counts.entry(binarize_row(codes.row(i))).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}

/// Distinct action codes over the dataset, with occurrence counts, sorted by
/// code.
pub fn enumerate_action_symbols<T: Scalar>(model: &EffectModel<T>, dataset: &[Transition]) -> Vec<(SymbolCode, usize)> {
    if dataset.is_empty() {
        return Vec::new();
    }
    let actions: Vec<[f64; 12]> = dataset.iter().map(|t| t.action).collect();
    count_codes(&model.encode_actions(&Matrix::from_rows(&actions), Mode::Eval))
}

/// Distinct object codes over the dataset, with occurrence counts.
pub fn enumerate_object_symbols<T: Scalar>(model: &EffectModel<T>, dataset: &[Transition]) -> Vec<(SymbolCode, usize)> {
    if dataset.is_empty() {
        return Vec::new();
    }
    let objects: Vec<[f64; 4]> = dataset.iter().map(|t| t.object).collect();
    count_codes(&model.encode_objects(&Matrix::from_rows(&objects), Mode::Eval))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub seeds: usize,
    /// Largest accepted squared error of any embedding component. Any
    /// value up to 1 guarantees the accepted action binarizes to its code.
    pub residual_bound: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            iterations: 500,
            seeds: 64,
            residual_bound: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("symbols.step_size must be > 0".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("symbols.seeds must be >= 1".into()));
        }
        if !(self.residual_bound > 0.0) {
            return Err(Error::Config("symbols.residual_bound must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveLabel {
    Null,
    Grasp,
    PickAndPlace,
    ForwardPush,
    Pull,
    LeftPush,
    RightPush,
}

impl PrimitiveLabel {
    pub fn name(self) -> &'static str {
        match self {
            PrimitiveLabel::Null => "null",
            PrimitiveLabel::Grasp => "grasp",
            PrimitiveLabel::PickAndPlace => "pick-and-place",
            PrimitiveLabel::ForwardPush => "forward-push",
            PrimitiveLabel::Pull => "pull",
            PrimitiveLabel::LeftPush => "left-push",
            PrimitiveLabel::RightPush => "right-push",
        }
    }
}

impl fmt::Display for PrimitiveLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledPrimitive {
    pub code: SymbolCode,
    pub action: [f64; 12],
    /// Mean squared distance between the action's embedding and the target.
    pub residual: f64,
    pub label: Option<PrimitiveLabel>,
}

impl DistilledPrimitive {
    pub fn action(&self) -> Action {
        Action::from_array(self.action)
    }
}

/// Result of descending from every seed, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTrace {
    pub best: DistilledPrimitive,
    /// Initial MSE of each seed.
    pub initial: Vec<f64>,
    /// Best MSE reached by each seed.
    pub finals: Vec<f64>,
    /// Largest squared component error of the returned action.
    pub max_component_error: f64,
}

fn row_errors<T: Scalar>(emb: &[T], target: &[f64]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for (&e, &t) in emb.iter().zip(target) {
        let d = (e.to_f64_lossy() - t).powi(2);
        sum += d;
        max = max.max(d);
    }
    (sum / target.len() as f64, max)
}

/// Projected gradient descent on the action inputs from every seed at once.
/// Each seed keeps its best iterate, so its reported MSE never increases.
pub fn distill_trace<T: Scalar>(
    model: &EffectModel<T>,
    code: &SymbolCode,
    seeds: &[[f64; 12]],
    config: &DistillConfig,
    range: f64,
) -> Result<DistillTrace> {
    config.validate()?;
    let k = model.config().action_code_bits;
    if code.len() != k {
        return Err(Error::Input(format!("code {code} has {} bits, model uses {k}", code.len())));
    }
    if seeds.is_empty() {
        return Err(Error::Degenerate("no seed actions".into()));
    }
    let target = code.target_embedding();
    let n = seeds.len();
    let mut current: Vec<[f64; 12]> = seeds.iter().map(|s| Action::from_array(*s).clamp_to_box(range).to_array()).collect();
    let mut best = current.clone();
    let mut best_err = vec![(f64::INFINITY, f64::INFINITY); n];
    let mut initial = vec![0.0; n];
    let scale = T::of(2.0 / k as f64);
    for it in 0..=config.iterations {
        let x = Matrix::<T>::from_rows(&current);
        let emb = model.encode_actions(&x, Mode::Eval);
        let mut d_emb = Matrix::zeros(n, k);
        for i in 0..n {
            let err = row_errors(emb.row(i), &target);
            if it == 0 {
                initial[i] = err.0;
            }
            if err.0 < best_err[i].0 {
                best_err[i] = err;
                best[i] = current[i];
            }
            for (j, g) in d_emb.row_mut(i).iter_mut().enumerate() {
                *g = scale * (emb.get(i, j) - T::of(target[j]));
            }
        }
        if it == config.iterations {
            break;
        }
        let (_, dx) = model.action_input_gradient(&x, &d_emb);
        for (i, a) in current.iter_mut().enumerate() {
            for (v, g) in a.iter_mut().zip(dx.row(i)) {
                *v -= config.step_size * g.to_f64_lossy();
            }
            *a = Action::from_array(*a).clamp_to_box(range).to_array();
        }
    }
    // Lowest MSE; earliest seed on ties.
    let winner = (0..n)
        .min_by(|&a, &b| best_err[a].0.total_cmp(&best_err[b].0))
        .expect("n >= 1");
    Ok(DistillTrace {
        best: DistilledPrimitive {
            code: code.clone(),
            action: best[winner],
            residual: best_err[winner].0,
            label: None,
        },
        initial,
        finals: best_err.iter().map(|e| e.0).collect(),
        max_component_error: best_err[winner].1,
    })
}

/// Distill `code` into an action. Fails when no seed gets every embedding
/// component within the residual bound of its target.
pub fn distill<T: Scalar>(
    model: &EffectModel<T>,
    code: &SymbolCode,
    seeds: &[[f64; 12]],
    config: &DistillConfig,
    range: f64,
) -> Result<DistilledPrimitive> {
    let trace = distill_trace(model, code, seeds, config, range)?;
    if trace.max_component_error < config.residual_bound {
        Ok(trace.best)
    } else {
        Err(Error::Distillation {
            code: code.to_string(),
            residual: trace.best.residual,
        })
    }
}

/// `count` dataset actions drawn without replacement (with replacement when
/// the dataset is smaller).
pub fn sample_seed_actions(dataset: &[Transition], count: usize, seed: u64) -> Vec<[f64; 12]> {
    if dataset.is_empty() {
        return Vec::new();
    }
    let mut rng = stream_rng(seed, streams::DISTILL);
    if dataset.len() >= count {
        sample_indices(&mut rng, dataset.len(), count)
            .into_iter()
            .map(|i| dataset[i].action)
            .collect()
    } else {
        use rand::Rng;
        (0..count).map(|_| dataset[rng.random_range(0..dataset.len())].action).collect()
    }
}

/// The canonical annotation scene: a solid, mid-sized object at the
/// workspace centre.
pub fn canonical_state(config: &WorldConfig) -> WorldState {
    let d = 0.5 * (config.dim_min + config.dim_max);
    let spec = ObjectSpec::new(d, d, d, ObjectKind::Solid);
    let c = 0.5 * config.workspace_extent;
    WorldState::new(
        vec![PlacedObject {
            spec,
            pose: Pose::new(c, c, spec.resting_z()),
        }],
        0,
    )
    .expect("one object, target 0")
}

/// Label an observed effect. The robot sits on the −x side, so +x is away
/// from it and +y is to its left.
pub fn classify(effect: &[f64; 3], max_lift: f64, held_at_end: bool, floor: f64) -> PrimitiveLabel {
    let [dx, dy, dz] = *effect;
    if total_effect_magnitude(&crate::world::Effect::new(dx, dy, dz)) < floor {
        return PrimitiveLabel::Null;
    }
    if held_at_end && dz > 0.0 {
        return PrimitiveLabel::Grasp;
    }
    let planar = dx.abs() + dy.abs();
    if max_lift > floor && planar >= floor {
        return PrimitiveLabel::PickAndPlace;
    }
    if planar < floor {
        return PrimitiveLabel::Null;
    }
    if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            PrimitiveLabel::ForwardPush
        } else {
            PrimitiveLabel::Pull
        }
    } else if dy > 0.0 {
        PrimitiveLabel::LeftPush
    } else {
        PrimitiveLabel::RightPush
    }
}

/// Execute the primitive on the canonical object and label its effect.
pub fn annotate(action: &Action, config: &WorldConfig) -> Result<PrimitiveLabel> {
    let rollout = simulate(config, &canonical_state(config), action)?;
    Ok(classify(
        &rollout.effect.to_array(),
        rollout.max_lift,
        rollout.held_at_end,
        config.effect_threshold,
    ))
}

/// Distilled primitives plus the symbols that could not be realized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Library {
    pub config_hash: String,
    pub primitives: Vec<DistilledPrimitive>,
    pub rejected: Vec<Rejected>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub code: SymbolCode,
    pub residual: f64,
}

impl Library {
    /// Distill every code in `codes`, collecting failures instead of
    /// aborting.
    pub fn build<T: Scalar>(
        model: &EffectModel<T>,
        codes: &[SymbolCode],
        dataset: &[Transition],
        config: &DistillConfig,
        world: &WorldConfig,
        seed: u64,
        config_hash: &str,
    ) -> Result<Self> {
        let seeds = sample_seed_actions(dataset, config.seeds, seed);
        let mut primitives = Vec::new();
        let mut rejected = Vec::new();
        if !seeds.is_empty() {
            for code in codes {
                match distill(model, code, &seeds, config, world.action_range) {
                    Ok(p) => primitives.push(p),
                    Err(Error::Distillation { residual, .. }) => rejected.push(Rejected {
                        code: code.clone(),
                        residual,
                    }),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(Self {
            config_hash: config_hash.to_string(),
            primitives,
            rejected,
        })
    }

    pub fn annotate_all(&mut self, world: &WorldConfig) -> Result<()> {
        for p in &mut self.primitives {
            p.label = Some(annotate(&p.action(), world)?);
        }
        Ok(())
    }

    /// Distinct labels other than `null`.
    pub fn distinct_labels(&self) -> Vec<PrimitiveLabel> {
        let mut v: Vec<PrimitiveLabel> = self
            .primitives
            .iter()
            .filter_map(|p| p.label)
            .filter(|&l| l != PrimitiveLabel::Null)
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::format("library", e))?;
        bytes.push(b'\n');
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format("library", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadMode, ModelConfig};

    fn model() -> EffectModel<f64> {
        EffectModel::new(
            ModelConfig {
                hidden_width: 16,
                ..ModelConfig::default()
            },
            HeadMode::Distribution,
            4,
        )
        .unwrap()
    }

    fn code(s: &str) -> SymbolCode {
        s.parse().unwrap()
    }

    fn random_seeds(n: usize, seed: u64) -> Vec<[f64; 12]> {
        let mut rng = stream_rng(seed, 0);
        (0..n).map(|_| Action::sample(&mut rng, 0.05).to_array()).collect()
    }

    #[test]
    fn binarize_thresholds_at_zero() {
        assert_eq!(binarize(&Embedding::new(vec![0.3, -0.7])), code("10"));
        assert_eq!(binarize(&Embedding::new(vec![-0.999; 3])), code("000"));
        assert_eq!(binarize(&Embedding::new(vec![0.0, 1e-300])), code("01"));
        let c = code("101");
        assert_eq!(binarize(&Embedding::new(c.target_embedding())), c);
    }

    #[test]
    fn code_parsing() {
        assert_eq!(code("011").bits, vec![0, 1, 1]);
        assert_eq!(code("011").to_string(), "011");
        assert!("012".parse::<SymbolCode>().is_err());
        let json = serde_json::to_string(&code("10")).unwrap();
        assert_eq!(json, "\"10\"");
    }

    #[test]
    fn enumeration_partitions_the_dataset() {
        let m = model();
        let rows: Vec<Transition> = random_seeds(200, 1)
            .into_iter()
            .map(|a| Transition {
                object: [0.05, 0.05, 0.05, 0.0],
                action: a,
                effect: [0.0; 3],
            })
            .collect();
        let codes = enumerate_action_symbols(&m, &rows);
        assert!(codes.len() <= 8);
        assert_eq!(codes.iter().map(|c| c.1).sum::<usize>(), 200);
        assert_eq!(enumerate_action_symbols(&m, &rows[..1]).len(), 1);
        assert!(enumerate_action_symbols(&m, &[]).is_empty());
        assert_eq!(enumerate_object_symbols(&m, &rows).len(), 1);
    }

    #[test]
    fn distillation_keeps_the_best_seed() {
        let m = model();
        let before = m.clone();
        let seeds = random_seeds(16, 2);
        let cfg = DistillConfig {
            iterations: 50,
            step_size: 0.05,
            ..DistillConfig::default()
        };
        let trace = distill_trace(&m, &code("110"), &seeds, &cfg, 0.05).unwrap();
        assert_eq!(m, before);
        for (i, f) in trace.finals.iter().enumerate() {
            assert!(trace.best.residual <= *f);
            assert!(*f <= trace.initial[i]);
        }
        // Recompute the returned residual independently.
        let emb = m.encode_action(&trace.best.action()).unwrap();
        let target = code("110").target_embedding();
        let mse = emb.values.iter().zip(&target).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / 3.0;
        assert!((mse - trace.best.residual).abs() < 1e-12);
        for v in trace.best.action {
            assert!((-0.05..=1.0).contains(&v));
        }
    }

    #[test]
    fn accepted_primitives_round_trip() {
        let m = model();
        let seeds = random_seeds(32, 3);
        let cfg = DistillConfig::default();
        for bits in ["000", "001", "010", "011", "100", "101", "110", "111"] {
            let c = code(bits);
            if let Ok(p) = distill(&m, &c, &seeds, &cfg, 0.05) {
                assert_eq!(binarize(&m.encode_action(&p.action()).unwrap()), c);
            }
        }
    }

    #[test]
    fn fixed_point_seed_is_returned_unchanged() {
        let m = model();
        let seeds = random_seeds(8, 5);
        let emb = m.encode_action(&Action::from_array(seeds[3])).unwrap();
        let c = binarize(&emb);
        let cfg = DistillConfig {
            iterations: 0,
            ..DistillConfig::default()
        };
        let trace = distill_trace(&m, &c, &seeds[3..4], &cfg, 0.05).unwrap();
        assert_eq!(trace.best.action, seeds[3]);
        assert_eq!(trace.finals[0], trace.initial[0]);
    }

    #[test]
    fn wrong_width_is_rejected() {
        assert!(distill(&model(), &code("10"), &random_seeds(2, 0), &DistillConfig::default(), 0.05).is_err());
    }

    #[test]
    fn classification_table() {
        let f = 0.008;
        assert_eq!(classify(&[0.0; 3], 0.0, false, f), PrimitiveLabel::Null);
        assert_eq!(classify(&[0.04, 0.0, 0.0], 0.0, false, f), PrimitiveLabel::ForwardPush);
        assert_eq!(classify(&[-0.04, 0.01, 0.0], 0.0, false, f), PrimitiveLabel::Pull);
        assert_eq!(classify(&[0.01, 0.03, 0.0], 0.0, false, f), PrimitiveLabel::LeftPush);
        assert_eq!(classify(&[0.0, -0.03, 0.0], 0.0, false, f), PrimitiveLabel::RightPush);
        assert_eq!(classify(&[0.0, 0.0, 0.05], 0.05, true, f), PrimitiveLabel::Grasp);
        assert_eq!(classify(&[0.03, -0.02, 0.0], 0.04, false, f), PrimitiveLabel::PickAndPlace);
        assert_eq!(classify(&[0.001, 0.0, 0.0], 0.04, false, f), PrimitiveLabel::Null);
    }

    #[test]
    fn annotation_runs_the_world() {
        let w = WorldConfig::default();
        let far = Action::from_array([0.05, 0.05, 0.05, 1.0, 0.05, 0.05, 0.05, 1.0, 0.05, 0.05, 0.05, 1.0]);
        assert_eq!(annotate(&far, &w).unwrap(), PrimitiveLabel::Null);
        // Descend open at the centre, close, lift.
        let grasp = Action::from_array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.04, 0.0]);
        assert_eq!(annotate(&grasp, &w).unwrap(), PrimitiveLabel::Grasp);
        // Sweep from behind the object along +x.
        let push = Action::from_array([-0.05, 0.0, 0.0, 1.0, -0.04, 0.0, 0.0, 1.0, 0.05, 0.0, 0.0, 1.0]);
        assert_eq!(annotate(&push, &w).unwrap(), PrimitiveLabel::ForwardPush);
        assert_eq!(annotate(&push, &w).unwrap(), annotate(&push, &w).unwrap());
    }

    #[test]
    fn library_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let lib = Library {
            config_hash: "h".into(),
            primitives: vec![DistilledPrimitive {
                code: code("010"),
                action: [0.01; 12],
                residual: 0.125,
                label: Some(PrimitiveLabel::LeftPush),
            }],
            rejected: vec![Rejected {
                code: code("111"),
                residual: 0.9,
            }],
        };
        let p = dir.path().join("lib.json");
        lib.save(&p).unwrap();
        assert_eq!(Library::load(&p).unwrap(), lib);
        assert!(matches!(Library::load(&dir.path().join("x")), Err(Error::MissingArtifact(_))));
    }
}
