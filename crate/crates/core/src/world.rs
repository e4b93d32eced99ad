//! Deterministic tabletop surrogate.
//!
//! A point gripper follows the piecewise-linear path `p1 -> p2 -> p3`
//! (offsets relative to the target object's centre at action start), sampled
//! every `sweep_resolution` metres. Gripper state changes only at waypoints:
//! an open-to-closed transition within `grasp_radius` of an object centre
//! attaches it, and an attached object follows the gripper until the next
//! waypoint that opens it, at which point it drops onto the plane. An
//! unattached object whose box contains the gripper after a step is pushed
//! horizontally along the step direction by the penetration depth.
//!
//! Objects are axis-aligned boxes resting on the plane `z = 0`; there is no
//! object-object interaction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// Gripper commands at or above this value mean "open".
pub const GRIP_OPEN_THRESHOLD: f64 = 0.5;

/// Hollow objects can only be held by their rim: the horizontal contact
/// distance must lie in this fraction of `min(s_x, s_y) / 2`.
pub const RIM_ANNULUS: (f64, f64) = (0.6, 1.0);

/// Spawned object centres keep this distance from the workspace edge.
pub const SPAWN_MARGIN: f64 = 0.1;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const RESTING_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Smallest object extent along any axis (m).
    pub dim_min: f64,
    /// Largest object extent along any axis (m).
    pub dim_max: f64,
    pub grasp_radius: f64,
    /// Gripper path sampling step (m).
    pub sweep_resolution: f64,
    /// Standard deviation of Gaussian noise added to observed effects.
    pub noise_sigma: f64,
    /// Side length of the square workspace (m).
    pub workspace_extent: f64,
    /// Waypoint offsets are sampled from `[-action_range, action_range]`.
    pub action_range: f64,
    /// Total-effect floor used by the test-set filter and the active baseline.
    pub effect_threshold: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dim_min: 0.02,
            dim_max: 0.08,
            grasp_radius: 0.03,
            sweep_resolution: 0.001,
            noise_sigma: 0.0,
            workspace_extent: 1.0,
            action_range: 0.05,
            effect_threshold: 0.008,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("world.{name} must be positive, got {v}")))
            }
        };
        positive("dim_min", self.dim_min)?;
        positive("grasp_radius", self.grasp_radius)?;
        positive("sweep_resolution", self.sweep_resolution)?;
        positive("action_range", self.action_range)?;
        positive("effect_threshold", self.effect_threshold)?;
        if !(self.dim_max.is_finite() && self.dim_max >= self.dim_min) {
            return Err(Error::Config("world.dim_max must be >= dim_min".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("world.noise_sigma must be >= 0".into()));
        }
        if !(self.workspace_extent.is_finite() && self.workspace_extent > 2.0 * SPAWN_MARGIN) {
            return Err(Error::Config(format!(
                "world.workspace_extent must exceed {}",
                2.0 * SPAWN_MARGIN
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Solid,
    Hollow,
}

impl ObjectKind {
    pub fn feature(self) -> f64 {
        match self {
            ObjectKind::Solid => 0.0,
            ObjectKind::Hollow => 1.0,
        }
    }
}

/// Object geometry: extents along x, y and z, plus its type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub size_x: f64,
    pub size_y: f64,
    pub height: f64,
    pub kind: ObjectKind,
}

impl ObjectSpec {
    pub fn new(size_x: f64, size_y: f64, height: f64, kind: ObjectKind) -> Self {
        Self {
            size_x,
            size_y,
            height,
            kind,
        }
    }

    /// The network input `[s_x, s_y, d, t]`.
    pub fn features(&self) -> [f64; 4] {
        [self.size_x, self.size_y, self.height, self.kind.feature()]
    }

    pub fn from_features(f: [f64; 4]) -> Result<Self> {
        let kind = if f[3] == 0.0 {
            ObjectKind::Solid
        } else if f[3] == 1.0 {
            ObjectKind::Hollow
        } else {
            return Err(Error::Input(format!("object type must be 0 or 1, got {}", f[3])));
        };
        Ok(Self::new(f[0], f[1], f[2], kind))
    }

    pub fn resting_z(&self) -> f64 {
        self.height / 2.0
    }

    fn half_diagonal(&self) -> f64 {
        0.5 * (self.size_x.powi(2) + self.size_y.powi(2) + self.height.powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// One trajectory waypoint: offset from the target centre plus gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub grip: f64,
}

impl Waypoint {
    pub fn is_open(&self) -> bool {
        self.grip >= GRIP_OPEN_THRESHOLD
    }
}

/// Twelve action parameters: three waypoints `[x, y, z, g]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub waypoints: [Waypoint; 3],
}

impl Action {
    pub const DIM: usize = 12;

    pub fn from_array(a: [f64; 12]) -> Self {
        let wp = |i: usize| Waypoint {
            x: a[4 * i],
            y: a[4 * i + 1],
            z: a[4 * i + 2],
            grip: a[4 * i + 3],
        };
        Self {
            waypoints: [wp(0), wp(1), wp(2)],
        }
    }

    pub fn from_slice(a: &[f64]) -> Result<Self> {
        let arr: [f64; 12] = a
            .try_into()
            .map_err(|_| Error::Input(format!("action needs 12 values, got {}", a.len())))?;
        Ok(Self::from_array(arr))
    }

    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (i, w) in self.waypoints.iter().enumerate() {
            out[4 * i..4 * i + 4].copy_from_slice(&[w.x, w.y, w.z, w.grip]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Draw from the candidate distribution: offsets uniform in
    /// `[-range, range]`, gripper commands uniform in `[0, 1]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, range: f64) -> Self {
        let mut a = [0.0; 12];
        for (i, v) in a.iter_mut().enumerate() {
            *v = if i % 4 == 3 {
                rng.random_range(0.0..=1.0)
            } else {
                rng.random_range(-range..=range)
            };
        }
        Self::from_array(a)
    }

    /// Project onto the sampling box.
    pub fn clamp_to_box(&self, range: f64) -> Self {
        let mut a = self.to_array();
        for (i, v) in a.iter_mut().enumerate() {
            *v = if i % 4 == 3 {
                v.clamp(0.0, 1.0)
            } else {
                v.clamp(-range, range)
            };
        }
        Self::from_array(a)
    }
}

/// Displacement of the target object.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Effect {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Effect {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Self {
        Self { dx, dy, dz }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    pub fn from_array(e: [f64; 3]) -> Self {
        Self::new(e[0], e[1], e[2])
    }
}

/// `|dx| + |dy| + |dz|`.
pub fn total_effect_magnitude(e: &Effect) -> f64 {
    e.dx.abs() + e.dy.abs() + e.dz.abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub spec: ObjectSpec,
    pub pose: Pose,
}

impl PlacedObject {
    fn footprint_overlaps(&self, other: &PlacedObject) -> bool {
        (self.pose.x - other.pose.x).abs() < 0.5 * (self.spec.size_x + other.spec.size_x)
            && (self.pose.y - other.pose.y).abs() < 0.5 * (self.spec.size_y + other.spec.size_y)
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        (p[0] - self.pose.x).abs() < 0.5 * self.spec.size_x
            && (p[1] - self.pose.y).abs() < 0.5 * self.spec.size_y
            && (p[2] - self.pose.z).abs() <= 0.5 * self.spec.height
    }

    pub fn is_resting(&self) -> bool {
        (self.pose.z - self.spec.resting_z()).abs() <= RESTING_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: Vec<PlacedObject>,
    pub target: usize,
}

impl WorldState {
    pub fn new(objects: Vec<PlacedObject>, target: usize) -> Result<Self> {
        let state = Self { objects, target };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 2 {
            return Err(Error::Input(format!(
                "world holds 1 or 2 objects, got {}",
                self.objects.len()
            )));
        }
        if self.target >= self.objects.len() {
            return Err(Error::Input(format!(
                "target index {} out of range for {} objects",
                self.target,
                self.objects.len()
            )));
        }
        Ok(())
    }

    pub fn target_object(&self) -> &PlacedObject {
        &self.objects[self.target]
    }

    /// Same objects, different target.
    pub fn with_target(&self, target: usize) -> Result<Self> {
        Self::new(self.objects.clone(), target)
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.objects.iter().map(|o| o.pose.to_array()).collect()
    }
}

/// Spawn `object_count` non-overlapping random objects resting on the plane.
/// The first object is the target.
pub fn spawn_random(config: &WorldConfig, seed: u64, object_count: usize) -> Result<WorldState> {
    let mut rng = stream_rng(seed, streams::SPAWN);
    spawn_with(config, &mut rng, object_count)
}

pub fn spawn_with<R: Rng + ?Sized>(
    config: &WorldConfig,
    rng: &mut R,
    object_count: usize,
) -> Result<WorldState> {
    if !(1..=2).contains(&object_count) {
        return Err(Error::Input(format!(
            "object_count must be 1 or 2, got {object_count}"
        )));
    }
    let lo = SPAWN_MARGIN;
    let hi = config.workspace_extent - SPAWN_MARGIN;
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(object_count);
    let mut attempts = 0;
    while objects.len() < object_count {
        if attempts >= MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Placement { attempts });
        }
        attempts += 1;
        let mut dim = || rng.random_range(config.dim_min..=config.dim_max);
        let spec = ObjectSpec::new(dim(), dim(), dim(), random_kind(rng));
        let candidate = PlacedObject {
            spec,
            pose: Pose::new(
                rng.random_range(lo..=hi),
                rng.random_range(lo..=hi),
                spec.resting_z(),
            ),
        };
        if objects.iter().all(|o| !o.footprint_overlaps(&candidate)) {
            objects.push(candidate);
        }
    }
    WorldState::new(objects, 0)
}

fn random_kind<R: Rng + ?Sized>(rng: &mut R) -> ObjectKind {
    if rng.random_bool(0.5) {
        ObjectKind::Hollow
    } else {
        ObjectKind::Solid
    }
}

/// Everything observed while executing one action.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub state: WorldState,
    /// Noise-free displacement of the target.
    pub effect: Effect,
    /// Largest height of the target above its resting height.
    pub max_lift: f64,
    /// The target is still attached to the gripper when the path ends.
    pub held_at_end: bool,
    /// Whichever object is attached when the path ends.
    pub held_object: Option<usize>,
    /// Any object was touched (pushed or grasped).
    pub contact: bool,
}

struct Attachment {
    object: usize,
    offset: [f64; 3],
}

/// Noise-free execution of `action` against the state's target object.
pub fn simulate(config: &WorldConfig, state: &WorldState, action: &Action) -> Result<Rollout> {
    if !action.is_finite() {
        return Err(Error::Input("action contains non-finite values".into()));
    }
    state.validate()?;

    let mut objects = state.objects.clone();
    let target = state.target;
    let anchor = state.objects[target].pose;
    let waypoints: Vec<[f64; 3]> = action
        .waypoints
        .iter()
        .map(|w| [anchor.x + w.x, anchor.y + w.y, (anchor.z + w.z).max(0.0)])
        .collect();

    let mut open = true;
    let mut attached: Option<Attachment> = None;
    let mut contact = false;
    let mut max_lift: f64 = 0.0;

    let mut gripper = waypoints[0];
    switch_gripper(
        config,
        &mut objects,
        &mut attached,
        &mut open,
        action.waypoints[0].is_open(),
        gripper,
        &mut contact,
    );

    for seg in 0..2 {
        let (from, to) = (waypoints[seg], waypoints[seg + 1]);
        let delta = [to[0] - from[0], to[1] - from[1], to[2] - from[2]];
        let length = (delta[0].powi(2) + delta[1].powi(2) + delta[2].powi(2)).sqrt();
        let steps = (length / config.sweep_resolution).ceil() as usize;
        for s in 1..=steps {
            let f = s as f64 / steps as f64;
            let next = [
                from[0] + delta[0] * f,
                from[1] + delta[1] * f,
                from[2] + delta[2] * f,
            ];
            let step = [next[0] - gripper[0], next[1] - gripper[1]];
            gripper = next;

            if let Some(att) = &attached {
                let obj = &mut objects[att.object];
                obj.pose.x = gripper[0] + att.offset[0];
                obj.pose.y = gripper[1] + att.offset[1];
                obj.pose.z = (gripper[2] + att.offset[2]).max(obj.spec.resting_z());
            }
            let holding = attached.as_ref().map(|a| a.object);
            for (i, obj) in objects.iter_mut().enumerate() {
                if Some(i) != holding && push(obj, gripper, step) {
                    contact = true;
                }
            }
            let lift = objects[target].pose.z - objects[target].spec.resting_z();
            max_lift = max_lift.max(lift);
        }
        switch_gripper(
            config,
            &mut objects,
            &mut attached,
            &mut open,
            action.waypoints[seg + 1].is_open(),
            gripper,
            &mut contact,
        );
    }

    let held_object = attached.as_ref().map(|a| a.object);
    let held_at_end = held_object == Some(target);
    let after = objects[target].pose;
    let effect = Effect::new(after.x - anchor.x, after.y - anchor.y, after.z - anchor.z);
    Ok(Rollout {
        state: WorldState {
            objects,
            target,
        },
        effect,
        max_lift,
        held_at_end,
        held_object,
        contact,
    })
}

fn switch_gripper(
    config: &WorldConfig,
    objects: &mut [PlacedObject],
    attached: &mut Option<Attachment>,
    open: &mut bool,
    now_open: bool,
    gripper: [f64; 3],
    contact: &mut bool,
) {
    if *open && !now_open {
        if let Some(i) = grasp_candidate(config, objects, gripper) {
            let p = objects[i].pose;
            *attached = Some(Attachment {
                object: i,
                offset: [p.x - gripper[0], p.y - gripper[1], p.z - gripper[2]],
            });
            *contact = true;
        }
    } else if !*open && now_open {
        if let Some(att) = attached.take() {
            let obj = &mut objects[att.object];
            obj.pose.z = obj.spec.resting_z();
        }
    }
    *open = now_open;
}

/// Nearest object whose centre is within the grasp radius, if its type
/// admits a grasp at this contact point.
fn grasp_candidate(config: &WorldConfig, objects: &[PlacedObject], gripper: [f64; 3]) -> Option<usize> {
    let (i, dist) = objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let d = ((o.pose.x - gripper[0]).powi(2)
                + (o.pose.y - gripper[1]).powi(2)
                + (o.pose.z - gripper[2]).powi(2))
            .sqrt();
            (i, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    if dist > config.grasp_radius {
        return None;
    }
    let obj = &objects[i];
    match obj.spec.kind {
        ObjectKind::Solid => Some(i),
        ObjectKind::Hollow => {
            let r = (obj.pose.x - gripper[0]).hypot(obj.pose.y - gripper[1]);
            let half = 0.5 * obj.spec.size_x.min(obj.spec.size_y);
            (r >= RIM_ANNULUS.0 * half && r <= RIM_ANNULUS.1 * half).then_some(i)
        }
    }
}

/// Push `obj` out of the gripper along the horizontal step direction.
/// Returns whether a push happened.
fn push(obj: &mut PlacedObject, gripper: [f64; 3], step: [f64; 2]) -> bool {
    let norm = step[0].hypot(step[1]);
    if norm == 0.0 || !obj.contains(gripper) {
        return false;
    }
    let dir = [step[0] / norm, step[1] / norm];
    let centre = [obj.pose.x, obj.pose.y];
    let half = [0.5 * obj.spec.size_x, 0.5 * obj.spec.size_y];
    let depth = (0..2)
        .filter(|&k| dir[k] != 0.0)
        .map(|k| (gripper[k] - centre[k] + dir[k].signum() * half[k]) / dir[k])
        .fold(f64::INFINITY, f64::min);
    obj.pose.x += depth * dir[0];
    obj.pose.y += depth * dir[1];
    true
}

/// A simulator instance with its own observation-noise stream.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    noise: ChaCha8Rng,
}

impl World {
    pub fn new(config: WorldConfig, seed: u64) -> Self {
        Self::with_noise_stream(config, seed, streams::NOISE)
    }

    pub fn with_noise_stream(config: WorldConfig, seed: u64, stream: u64) -> Self {
        Self {
            config,
            noise: stream_rng(seed, stream),
        }
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    /// Execute and return the next state with the observed effect.
    pub fn execute(&mut self, state: &WorldState, action: &Action) -> Result<(WorldState, Effect)> {
        let rollout = self.rollout(state, action)?;
        Ok((rollout.state, rollout.effect))
    }

    /// Like [`World::execute`] but keeps the full trace. Observation noise,
    /// if configured, is applied to the returned effect only.
    pub fn rollout(&mut self, state: &WorldState, action: &Action) -> Result<Rollout> {
        let mut rollout = simulate(&self.config, state, action)?;
        if self.config.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.config.noise_sigma)
                .map_err(|e| Error::Config(e.to_string()))?;
            rollout.effect.dx += normal.sample(&mut self.noise);
            rollout.effect.dy += normal.sample(&mut self.noise);
            rollout.effect.dz += normal.sample(&mut self.noise);
        }
        Ok(rollout)
    }
}

/// Distance beyond which a waypoint path cannot touch the object.
pub fn contact_range(config: &WorldConfig, spec: &ObjectSpec) -> f64 {
    spec.half_diagonal() + config.grasp_radius
}
