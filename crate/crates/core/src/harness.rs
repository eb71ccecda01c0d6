//! Synthetic dynamic scenes with ground-truth motion, a kinematic gripper and
//! the closed perceive → reconstruct → extract → refine → execute loop.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{compute_init_action, IcpConfig, InitAction, KdTree};
use crate::error::HarnessError;
use crate::field::{GaussianField, GaussianPoint, GRIPPER_LABEL};
use crate::fitter::{fit, FitConfig, LearningRates, SupervisionSet, View};
use crate::geometry::{se3_serde, Camera, Quaternion, Se3, Twist};
use crate::refine::{refine_action, ActionSequence, ActionVector, DenoiseSchedule, Denoiser, GuidanceScene, OracleDenoiser, RidgeDenoiser, RidgeExample};
use crate::renderer::{render, RenderConfig};

/// Largest rotation a body may undergo within one interval.
pub const MAX_TWIST_ROTATION: f64 = std::f64::consts::FRAC_PI_4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { min: [-1.0; 3], max: [1.0; 3] }
    }
}

impl Bounds {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripperSpec {
    pub count: usize,
    /// Overall size of the primitive in scene units.
    pub extent: f64,
    pub color: [f64; 3],
    /// Body-to-world pose at `t`.
    #[serde(with = "se3_serde")]
    pub pose: Se3,
    /// Motion over one interval, `(ω, v)`, about the gripper origin with world axes.
    #[serde(default)]
    pub twist: Twist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub label: u8,
    pub count: usize,
    /// Diameter of the ball the blobs are drawn from.
    pub extent: f64,
    pub color: [f64; 3],
    pub center: [f64; 3],
    /// Motion over one interval, `(ω, v)`, about `center` with world axes.
    #[serde(default)]
    pub twist: Twist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    pub focal: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_interval() -> u32 {
    crate::field::DEFAULT_INTERVAL
}

/// A synthetic scene: a gripper, labeled rigid objects, their motion over
/// one interval and a camera rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    #[serde(default)]
    pub bounds: Bounds,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_interval")]
    pub interval: u32,
    #[serde(default)]
    pub background: [f64; 3],
    pub gripper: GripperSpec,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    /// Supervision cameras.
    pub cameras: Vec<CameraSpec>,
    /// Evaluation-only cameras.
    #[serde(default)]
    pub holdout: Vec<CameraSpec>,
}

fn ring_cameras(count: usize, radius: f64, height: f64, focal: f64) -> Vec<CameraSpec> {
    (0..count)
        .map(|i| {
            let a = 0.3 + std::f64::consts::TAU * i as f64 / count as f64;
            CameraSpec { eye: [radius * a.cos(), radius * a.sin(), height], target: [0.0, 0.0, 0.0], up: default_up(), focal }
        })
        .collect()
}

impl SceneSpec {
    /// Two moving bodies of about 200 Gaussians seen by four 64×64 cameras,
    /// plus a fifth held-out camera.
    pub fn benchmark() -> Self {
        let mut holdout = ring_cameras(1, 3.0, 1.2, 110.0);
        holdout[0].eye = [0.4, -3.0, 2.0];
        SceneSpec {
            seed: 7,
            bounds: Bounds::default(),
            width: 64,
            height: 64,
            interval: crate::field::DEFAULT_INTERVAL,
            background: [0.08, 0.08, 0.12],
            gripper: GripperSpec {
                count: 90,
                extent: 0.6,
                color: [0.85, 0.35, 0.15],
                pose: Se3::new(Quaternion::from_axis_angle(Vector3::z(), 0.4), Vector3::new(-0.2, 0.1, 0.3)),
                twist: [0.0, 0.0, 0.1, 0.05, -0.03, -0.02],
            },
            objects: vec![ObjectSpec {
                name: "block".into(),
                label: 2,
                count: 110,
                extent: 0.5,
                color: [0.2, 0.6, 0.85],
                center: [0.35, -0.1, -0.3],
                twist: [0.0, 0.0, 0.0, 0.02, 0.01, 0.0],
            }],
            cameras: ring_cameras(4, 3.0, 1.6, 110.0),
            holdout,
        }
    }

    /// A small static scene for closed-loop episodes: two 32×32 supervision
    /// cameras and one held-out camera.
    pub fn episode() -> Self {
        SceneSpec {
            seed: 11,
            bounds: Bounds::default(),
            width: 32,
            height: 32,
            interval: crate::field::DEFAULT_INTERVAL,
            background: [0.08, 0.08, 0.12],
            gripper: GripperSpec {
                count: 36,
                extent: 0.6,
                color: [0.85, 0.35, 0.15],
                pose: Se3::from_translation(0.0, 0.0, 0.2),
                twist: [0.0; 6],
            },
            objects: vec![ObjectSpec {
                name: "block".into(),
                label: 2,
                count: 24,
                extent: 0.4,
                color: [0.2, 0.6, 0.85],
                center: [0.0, 0.0, -0.6],
                twist: [0.0; 6],
            }],
            cameras: vec![
                CameraSpec { eye: [2.6, 0.9, 1.5], target: [0.0, 0.0, 0.0], up: default_up(), focal: 70.0 },
                CameraSpec { eye: [-0.9, 2.6, 1.2], target: [0.0, 0.0, 0.0], up: default_up(), focal: 70.0 },
            ],
            holdout: vec![CameraSpec { eye: [-1.5, -2.4, 1.6], target: [0.0, 0.0, 0.0], up: default_up(), focal: 70.0 }],
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig::with_background(self.background)
    }

    fn camera(&self, c: &CameraSpec) -> Result<Camera, HarnessError> {
        Ok(Camera::look_at(Vector3::from(c.eye), Vector3::from(c.target), Vector3::from(c.up), c.focal, self.width, self.height)?)
    }

    pub fn supervision_cameras(&self) -> Result<Vec<Camera>, HarnessError> {
        self.cameras.iter().map(|c| self.camera(c)).collect()
    }

    pub fn holdout_cameras(&self) -> Result<Vec<Camera>, HarnessError> {
        self.holdout.iter().map(|c| self.camera(c)).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.into()));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if self.interval == 0 {
            return bad("interval must be positive");
        }
        if (0..3).any(|i| !(self.bounds.min[i] < self.bounds.max[i])) {
            return bad("empty bounding box");
        }
        if self.cameras.is_empty() {
            return bad("at least one supervision camera is required");
        }
        let colors = std::iter::once(&self.gripper.color).chain(self.objects.iter().map(|o| &o.color)).chain(std::iter::once(&self.background));
        if colors.flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("colors must lie in [0, 1]");
        }
        if self.gripper.count < 3 || !(self.gripper.extent > 0.0) {
            return bad("gripper needs at least 3 gaussians and a positive extent");
        }
        if !self.bounds.contains(&self.gripper.pose.translation) {
            return bad("gripper starts outside the bounding box");
        }
        let mut names = std::collections::HashSet::new();
        for o in &self.objects {
            if o.label <= GRIPPER_LABEL {
                return bad(&format!("object {} must use a label of at least 2", o.name));
            }
            if o.count == 0 || !(o.extent > 0.0) {
                return bad(&format!("object {} needs gaussians and a positive extent", o.name));
            }
            if !names.insert(o.name.as_str()) {
                return bad(&format!("duplicate object name {}", o.name));
            }
            if !self.bounds.contains(&Vector3::from(o.center)) {
                return bad(&format!("object {} lies outside the bounding box", o.name));
            }
        }
        for (name, twist) in std::iter::once(("gripper", &self.gripper.twist)).chain(self.objects.iter().map(|o| (o.name.as_str(), &o.twist))) {
            if twist.iter().any(|v| !v.is_finite()) || Vector3::new(twist[0], twist[1], twist[2]).norm() >= MAX_TWIST_ROTATION {
                return bad(&format!("twist of {name} must rotate less than 45 degrees per interval"));
            }
        }
        self.supervision_cameras()?;
        self.holdout_cameras()?;
        Ok(())
    }
}

const GRIPPER_JITTER_SEED: u64 = 0x6772_6970;

/// Skeleton of the gripper primitive in units of its extent: a palm bar, two
/// fingers and a wrist stem.
const GRIPPER_SEGMENTS: [([f64; 3], [f64; 3]); 4] = [
    ([-0.3, 0.0, 0.0], [0.3, 0.0, 0.0]),
    ([-0.3, 0.0, 0.0], [-0.3, 0.0, -0.5]),
    ([0.3, 0.0, 0.0], [0.3, 0.0, -0.5]),
    ([0.0, 0.0, 0.0], [0.0, 0.0, 0.4]),
];

/// Gripper Gaussians in the body frame, spread along the skeleton with a
/// fixed pseudo-random jitter and a periodic shading, so the cloud has no
/// sliding symmetry and motion along a segment stays observable.
pub fn gripper_primitive(count: usize, extent: f64, color: [f64; 3]) -> Vec<GaussianPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(GRIPPER_JITTER_SEED);
    let segs: Vec<(Vector3<f64>, Vector3<f64>)> = GRIPPER_SEGMENTS.iter().map(|(a, b)| (Vector3::from(*a) * extent, Vector3::from(*b) * extent)).collect();
    let lengths: Vec<f64> = segs.iter().map(|(a, b)| (b - a).norm()).collect();
    let total: f64 = lengths.iter().sum();
    let spacing = total / count as f64;
    let thickness = 0.06 * extent;
    (0..count)
        .map(|i| {
            let mut s = (i as f64 + 0.5 + rng.random_range(-0.4..0.4)) * spacing;
            let mut k = 0;
            while k + 1 < segs.len() && s > lengths[k] {
                s -= lengths[k];
                k += 1;
            }
            let (a, b) = segs[k];
            let offset = Vector3::from_fn(|_, _| rng.random_range(-thickness..thickness));
            let mean = a + (b - a) * (s / lengths[k]).clamp(0.0, 1.0) + offset;
            let shade = 0.7 + 0.3 * (i as f64 * 1.9).sin();
            let c = Vector3::from(color).map(|v| (v * shade).clamp(0.0, 1.0));
            let scale = Vector3::repeat((0.9 * spacing).max(0.05 * extent));
            GaussianPoint::new(mean, c, 3.0, Quaternion::IDENTITY, scale, GRIPPER_LABEL)
        })
        .collect()
}

fn object_points(o: &ObjectSpec, rng: &mut ChaCha8Rng) -> Vec<GaussianPoint> {
    let radius = o.extent / 2.0;
    let blob = radius * 1.3 / (o.count as f64).cbrt();
    (0..o.count)
        .map(|_| {
            let dir = loop {
                let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if v.norm_squared() <= 1.0 {
                    break v;
                }
            };
            let mean = Vector3::from(o.center) + dir * (radius - blob).max(0.0);
            let color = Vector3::from(o.color).map(|c| (c + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0));
            let rot = Quaternion::new(rng.random_range(0.2..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalized();
            let scale = Vector3::new(rng.random_range(0.6..1.2), rng.random_range(0.6..1.2), rng.random_range(0.6..1.2)) * blob;
            GaussianPoint::new(mean, color, rng.random_range(1.5..3.5), rot, scale, o.label)
        })
        .collect()
}

/// World-frame motion of a body turning by `twist` about `center`.
pub fn body_motion(twist: &Twist, center: &Vector3<f64>) -> Se3 {
    let c = Se3::from_translation(center.x, center.y, center.z);
    c.compose(&Se3::exp(twist)).compose(&c.inverse())
}

fn bounding_radius(points: &[GaussianPoint], center: &Vector3<f64>) -> f64 {
    points.iter().map(|p| (p.mean - center).norm() + 2.0 * p.scale().max()).fold(0.0, f64::max)
}

/// Ground truth produced by [`generate_scene`].
#[derive(Clone, Debug)]
pub struct Scene {
    /// Field at `t` with ground-truth displacements.
    pub field: GaussianField,
    pub supervision: SupervisionSet,
    pub holdout: SupervisionSet,
    /// Gripper primitive in its body frame.
    pub primitive: Vec<GaussianPoint>,
    pub gripper_pose: Se3,
    /// World-frame gripper motion over the interval.
    pub gripper_motion: Se3,
}

fn views(field: &GaussianField, cams: &[Camera], cfg: &RenderConfig) -> Vec<View> {
    cams.par_iter().map(|c| View { camera: *c, image: render(field, c, cfg).image }).collect()
}

/// Builds the field with `Δμᵢ = M_b μᵢ - μᵢ` for the motion `M_b` of its
/// body and renders every camera at `t` and `t + Δt`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = &spec.gripper;
    let primitive = gripper_primitive(g.count, g.extent, g.color);
    let mut bodies: Vec<(String, Vec<GaussianPoint>, Vector3<f64>, Se3)> = Vec::new();
    let gripper_center = g.pose.translation;
    let gripper_motion = body_motion(&g.twist, &gripper_center);
    bodies.push(("gripper".into(), primitive.iter().map(|p| p.transformed(&g.pose)).collect(), gripper_center, gripper_motion));
    for o in &spec.objects {
        let center = Vector3::from(o.center);
        bodies.push((o.name.clone(), object_points(o, &mut rng), center, body_motion(&o.twist, &center)));
    }
    for i in 0..bodies.len() {
        for j in i + 1..bodies.len() {
            let ri = bounding_radius(&bodies[i].1, &bodies[i].2);
            let rj = bounding_radius(&bodies[j].1, &bodies[j].2);
            if (bodies[i].2 - bodies[j].2).norm() < ri + rj {
                return Err(HarnessError::Overlap(bodies[i].0.clone(), bodies[j].0.clone()));
            }
        }
    }
    let mut points = Vec::new();
    for (_, pts, _, motion) in bodies {
        points.extend(pts.into_iter().map(|mut p| {
            p.disp = motion.apply(&p.mean) - p.mean;
            p
        }));
    }
    let mut field = GaussianField::new(points);
    field.interval = spec.interval;
    let cfg = spec.render_config();
    let future = field.advance(1.0).expect("unit fraction");
    let cams = spec.supervision_cameras()?;
    let held = spec.holdout_cameras()?;
    Ok(Scene {
        supervision: SupervisionSet { current: views(&field, &cams, &cfg), future: views(&future, &cams, &cfg) },
        holdout: SupervisionSet { current: views(&field, &held, &cfg), future: views(&future, &held, &cfg) },
        field,
        primitive,
        gripper_pose: g.pose,
        gripper_motion,
    })
}

/// Perturbation applied by [`perturbed_init`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Jitter {
    pub position: f64,
    pub color: f64,
    pub opacity: f64,
    pub log_scale: f64,
    pub rotation: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter { position: 0.01, color: 0.1, opacity: 0.5, log_scale: 0.15, rotation: 0.1 }
    }
}

impl Jitter {
    pub fn positions_only(position: f64) -> Self {
        Jitter { position, color: 0.0, opacity: 0.0, log_scale: 0.0, rotation: 0.0 }
    }
}

/// Copy of `field` with zero displacement and Gaussian noise of the given
/// standard deviations on every other parameter. Labels are kept.
pub fn perturbed_init(field: &GaussianField, jitter: &Jitter, seed: u64) -> GaussianField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = |s: f64| if s > 0.0 { Normal::new(0.0, s).expect("positive deviation").sample(&mut rng) } else { 0.0 };
    let mut out = field.clone();
    for p in &mut out.points {
        p.disp = Vector3::zeros();
        p.mean += Vector3::new(n(jitter.position), n(jitter.position), n(jitter.position));
        p.color = p.color.map(|c| c + n(jitter.color)).map(|c| c.clamp(0.0, 1.0));
        p.opacity += n(jitter.opacity);
        p.log_scale += Vector3::new(n(jitter.log_scale), n(jitter.log_scale), n(jitter.log_scale));
        let axis = Vector3::new(n(1.0), n(1.0), n(1.0));
        p.rotation = Quaternion::from_axis_angle(axis, n(jitter.rotation)).mul(p.rotation.normalized());
    }
    out
}

/// `n` Gaussians placed uniformly in `bounds` with gray color, zero opacity
/// logit, zero displacement and an isotropic scale of twice the mean
/// nearest-neighbor distance. Each takes the label of the closest Gaussian
/// of `reference`.
pub fn uniform_init(reference: &GaussianField, bounds: &Bounds, n: usize, seed: u64) -> GaussianField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::from_fn(|i, _| rng.random_range(bounds.min[i]..bounds.max[i]))).collect();
    let mean_nn = if n < 2 {
        1.0
    } else {
        (0..n)
            .map(|i| {
                let others: Vec<Vector3<f64>> = means.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, m)| *m).collect();
                KdTree::build(&others).nearest(&means[i]).expect("nonempty").1.sqrt()
            })
            .sum::<f64>()
            / n as f64
    };
    let refs: Vec<Vector3<f64>> = reference.points.iter().map(|p| p.mean).collect();
    let tree = KdTree::build(&refs);
    let points = means
        .into_iter()
        .map(|m| {
            let label = tree.nearest(&m).map_or(0, |(i, _)| reference.points[i].label);
            GaussianPoint::new(m, Vector3::repeat(0.5), 0.0, Quaternion::IDENTITY, Vector3::repeat(2.0 * mean_nn), label)
        })
        .collect();
    let mut f = GaussianField::new(points);
    f.interval = reference.interval;
    f
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perception {
    /// Read the field with its true displacements.
    #[serde(rename = "gt")]
    #[default]
    GroundTruth,
    /// Fit the field to rendered observations every cycle.
    Fitted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    #[default]
    Oracle,
    Ridge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub perception: Perception,
    pub denoiser: DenoiserKind,
    /// Perceive-act cycles allowed before giving up.
    pub budget: usize,
    pub horizon: usize,
    pub translation_tolerance: f64,
    pub rotation_tolerance_deg: f64,
    /// Largest expert motion per cycle.
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    /// Standard deviation of uniform per-axis translation noise added to every executed step.
    pub execution_noise: f64,
    pub fit: FitConfig,
    pub init_jitter: Jitter,
    pub icp: IcpConfig,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            perception: Perception::GroundTruth,
            denoiser: DenoiserKind::Oracle,
            budget: 20,
            horizon: crate::field::DEFAULT_INTERVAL as usize,
            translation_tolerance: 0.02,
            rotation_tolerance_deg: 2.0,
            max_translation: 0.1,
            max_rotation_deg: 15.0,
            execution_noise: 0.0,
            fit: FitConfig {
                iterations: 120,
                learning_rates: LearningRates { mean: 5e-4, disp: 4e-3, color: 1e-3, opacity: 1e-2, rotation: 5e-4, scale: 1e-3 },
                ..FitConfig::default()
            },
            init_jitter: Jitter::positions_only(0.003),
            icp: IcpConfig::default(),
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.into()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.translation_tolerance > 0.0 && self.rotation_tolerance_deg > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.max_translation > 0.0 && self.max_rotation_deg > 0.0 && self.max_rotation_deg < 45.0) {
            return bad("expert step limits must be positive and below 45 degrees");
        }
        if !(self.execution_noise >= 0.0) {
            return bad("execution noise must be non-negative");
        }
        Ok(())
    }

    fn reached(&self, pose: &Se3, goal: &Se3) -> bool {
        let (angle, dist) = pose.distance(goal);
        dist < self.translation_tolerance && angle.to_degrees() < self.rotation_tolerance_deg
    }
}

/// Ground-truth state of a running episode.
#[derive(Clone, Debug)]
pub struct EpisodeState {
    /// Scene at the current step, displacements zero.
    pub field: GaussianField,
    pub gripper_pose: Se3,
    pub goal: Se3,
    pub step: usize,
    pub success: bool,
    /// Set when the gripper leaves the bounding box.
    pub failed: bool,
    pub gripper_closed: bool,
}

/// Applies one body-frame step, `T_g^w ← T_g^w ∘ step ∘ noise`, and moves
/// the gripper Gaussians rigidly with it.
pub fn execute(state: &EpisodeState, step: &Se3, gripper: f64, primitive: &[GaussianPoint], bounds: &Bounds, noise: f64, rng: &mut impl Rng) -> EpisodeState {
    let mut pose = state.gripper_pose.compose(step);
    if noise > 0.0 {
        let half = noise * 3f64.sqrt();
        let jitter = Vector3::from_fn(|_, _| rng.random_range(-half..=half));
        pose = pose.compose(&Se3::new(Quaternion::IDENTITY, jitter));
    }
    let mut field = state.field.clone();
    let mut k = 0;
    for p in field.points.iter_mut().filter(|p| p.label == GRIPPER_LABEL) {
        *p = primitive[k].transformed(&pose);
        k += 1;
    }
    EpisodeState {
        field,
        gripper_pose: pose,
        goal: state.goal,
        step: state.step,
        success: state.success,
        failed: state.failed || !bounds.contains(&pose.translation),
        gripper_closed: gripper > crate::refine::GRIPPER_THRESHOLD,
    }
}

/// Body-frame motion toward `goal`, shortened along the screw so that it
/// translates at most `max_translation` and turns at most `max_rotation_deg`.
pub fn expert_motion(pose: &Se3, goal: &Se3, cfg: &EpisodeConfig) -> Result<Se3, HarnessError> {
    let rel = pose.inverse().compose(goal);
    let mut s: f64 = 1.0;
    let (angle, dist) = (rel.rotation_angle(), rel.translation.norm());
    if dist > cfg.max_translation {
        s = s.min(cfg.max_translation / dist);
    }
    if angle.to_degrees() > cfg.max_rotation_deg {
        s = s.min(cfg.max_rotation_deg / angle.to_degrees());
    }
    Ok(rel.interpolate(s)?)
}

/// Errors of one perceive-act cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: usize,
    /// Distance to the goal before acting.
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    /// Init action vs. the expert motion.
    pub init_rotation_error_deg: f64,
    pub init_translation_error: f64,
    /// Refined action vs. the expert motion.
    pub refined_rotation_error_deg: f64,
    pub refined_translation_error: f64,
    /// Final photometric loss of the fit, zero for ground-truth perception.
    pub fit_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub steps: usize,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub success: bool,
    pub cycles: Vec<CycleMetrics>,
}

impl EpisodeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cycle,rotation_error_deg,translation_error,init_rotation_error_deg,init_translation_error,refined_rotation_error_deg,refined_translation_error,fit_loss\n");
        for c in &self.cycles {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.cycle, c.rotation_error_deg, c.translation_error, c.init_rotation_error_deg, c.init_translation_error, c.refined_rotation_error_deg, c.refined_translation_error, c.fit_loss
            ));
        }
        s.push_str(&format!("final,{},{},,,,,\n", self.rotation_error_deg, self.translation_error));
        s
    }
}

/// Hook receiving the guidance rendered in every cycle.
pub type GuidanceSink<'a> = &'a mut dyn FnMut(usize, &[Vec<crate::refine::GuidanceImage>]);

/// Expert target for one cycle: the clipped motion split into `horizon`
/// steps, with the gripper closing when the motion completes the task.
fn expert_target(pose: &Se3, goal: &Se3, cfg: &EpisodeConfig) -> Result<(Se3, ActionVector), HarnessError> {
    let motion = expert_motion(pose, goal, cfg)?;
    let closes = cfg.reached(&pose.compose(&motion), goal);
    let steps = InitAction::from_total(&motion, cfg.horizon)?.steps;
    let target = ActionSequence::from_poses(&steps, if closes { 1.0 } else { 0.0 }).to_vector()?;
    Ok((motion, target))
}

/// Runs the closed loop from the scene's gripper pose toward `goal`.
pub fn run_episode(spec: &SceneSpec, cfg: &EpisodeConfig, goal: &Se3, ridge: Option<&RidgeDenoiser>, mut sink: Option<GuidanceSink>) -> Result<EpisodeReport, HarnessError> {
    cfg.validate()?;
    if cfg.denoiser == DenoiserKind::Ridge && ridge.is_none() {
        return Err(HarnessError::InvalidSpec("ridge denoiser requested but none supplied".into()));
    }
    let mut static_spec = spec.clone();
    static_spec.gripper.twist = [0.0; 6];
    static_spec.objects.iter_mut().for_each(|o| o.twist = [0.0; 6]);
    let scene = generate_scene(&static_spec)?;
    let cams = spec.supervision_cameras()?;
    let rcfg = spec.render_config();
    let schedule = DenoiseSchedule::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = EpisodeState {
        field: scene.field.clone(),
        gripper_pose: scene.gripper_pose,
        goal: *goal,
        step: 0,
        success: false,
        failed: false,
        gripper_closed: false,
    };
    let mut cycles = Vec::new();
    loop {
        if cfg.reached(&state.gripper_pose, goal) {
            state.success = true;
            break;
        }
        if state.failed || state.step >= cfg.budget {
            break;
        }
        let (err_angle, err_dist) = state.gripper_pose.distance(goal);
        let (motion, target) = expert_target(&state.gripper_pose, goal, cfg)?;
        let world = motion.conjugate_by(&state.gripper_pose);
        let mut truth = state.field.clone();
        for p in truth.points.iter_mut().filter(|p| p.label == GRIPPER_LABEL) {
            p.disp = world.apply(&p.mean) - p.mean;
        }
        let (perceived, fit_loss) = match cfg.perception {
            Perception::GroundTruth => (truth, 0.0),
            Perception::Fitted => {
                let future = truth.advance(1.0).expect("unit fraction");
                let sup = SupervisionSet { current: views(&truth, &cams, &rcfg), future: views(&future, &cams, &rcfg) };
                let init = perturbed_init(&truth, &cfg.init_jitter, cfg.seed.wrapping_mul(1_000_003).wrapping_add(state.step as u64));
                let fit_cfg = FitConfig { background: spec.background, ..cfg.fit.clone() };
                let res = fit(&init, &sup, &fit_cfg)?;
                let loss = res.history.last().map_or(0.0, |r| r.total);
                (res.field, loss)
            }
        };
        let (init, _) = compute_init_action(&perceived, GRIPPER_LABEL, cfg.horizon, &cfg.icp)?;
        let init_seq = ActionSequence::from_init(&init, &state.gripper_pose, 0.0);
        let (ia, id) = init_seq.total().distance(&motion);
        let guidance = GuidanceScene { field: perceived, gripper_pose: state.gripper_pose, cameras: cams.clone(), primitive: scene.primitive.clone(), render: rcfg };
        let denoiser: &dyn Denoiser = match cfg.denoiser {
            DenoiserKind::Oracle => &OracleDenoiser { target: target.clone() },
            DenoiserKind::Ridge => ridge.expect("checked above"),
        };
        let trace = refine_action(&init_seq.to_vector()?, &guidance, denoiser, &schedule)?;
        if let Some(sink) = sink.as_mut() {
            sink(state.step, &trace.guidance);
        }
        let (ra, rd) = trace.action.total().distance(&motion);
        for s in &trace.action.steps {
            state = execute(&state, &s.pose, s.gripper, &scene.primitive, &spec.bounds, cfg.execution_noise, &mut rng);
        }
        cycles.push(CycleMetrics {
            cycle: state.step,
            rotation_error_deg: err_angle.to_degrees(),
            translation_error: err_dist,
            init_rotation_error_deg: ia.to_degrees(),
            init_translation_error: id,
            refined_rotation_error_deg: ra.to_degrees(),
            refined_translation_error: rd,
            fit_loss,
        });
        state.step += 1;
    }
    let (angle, dist) = state.gripper_pose.distance(goal);
    Ok(EpisodeReport { steps: state.step, rotation_error_deg: angle.to_degrees(), translation_error: dist, success: state.success, cycles })
}

/// Goal offsets drawn by [`random_goal`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalSampler {
    pub max_offset: f64,
    pub max_rotation_deg: f64,
}

impl Default for GoalSampler {
    fn default() -> Self {
        GoalSampler { max_offset: 0.3, max_rotation_deg: 30.0 }
    }
}

/// A goal near `start`: uniform translation offset per axis and a rotation
/// about a random axis.
pub fn random_goal(start: &Se3, sampler: &GoalSampler, seed: u64) -> Se3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = sampler.max_offset;
    let offset = Vector3::from_fn(|_, _| rng.random_range(-m..=m));
    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let angle = rng.random_range(0.0..=sampler.max_rotation_deg).to_radians();
    let rotation = Quaternion::from_axis_angle(axis, angle).mul(start.rotation).normalized();
    Se3::new(rotation, start.translation + offset)
}

/// Training episodes for the ridge denoiser: random gripper poses and goals
/// in the scene, the expert motion as the target and an init action
/// corrupted by Gaussian rotation and translation error.
pub fn ridge_examples(spec: &SceneSpec, cfg: &EpisodeConfig, count: usize, init_error: (f64, f64), seed: u64) -> Result<Vec<RidgeExample>, HarnessError> {
    let mut static_spec = spec.clone();
    static_spec.gripper.twist = [0.0; 6];
    static_spec.objects.iter_mut().for_each(|o| o.twist = [0.0; 6]);
    let scene = generate_scene(&static_spec)?;
    let cams = spec.supervision_cameras()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = GoalSampler::default();
    let (rot_sd, trans_sd) = init_error;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let start = random_goal(&scene.gripper_pose, &GoalSampler { max_offset: 0.35, max_rotation_deg: 35.0 }, rng.random());
        let reach: f64 = rng.random();
        let near = GoalSampler { max_offset: sampler.max_offset * reach, max_rotation_deg: sampler.max_rotation_deg * reach };
        let goal = random_goal(&start, &near, rng.random());
        let (motion, target) = expert_target(&start, &goal, cfg)?;
        let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let noisy_rot = Normal::new(0.0, rot_sd.max(1e-12)).expect("positive").sample(&mut rng);
        let shift = Vector3::from_fn(|_, _| Normal::new(0.0, trans_sd.max(1e-12)).expect("positive").sample(&mut rng));
        let corrupted = motion.compose(&Se3::new(Quaternion::from_axis_angle(axis, noisy_rot), shift));
        let init = ActionSequence::from_poses(&InitAction::from_total(&corrupted, cfg.horizon)?.steps, 0.0).to_vector()?;
        let mut field = scene.field.clone();
        let mut k = 0;
        for p in field.points.iter_mut().filter(|p| p.label == GRIPPER_LABEL) {
            *p = scene.primitive[k].transformed(&start);
            k += 1;
        }
        out.push(RidgeExample {
            init,
            target,
            scene: GuidanceScene { field, gripper_pose: start, cameras: cams.clone(), primitive: scene.primitive.clone(), render: spec.render_config() },
        });
    }
    Ok(out)
}

/// Training set size that keeps the ridge denoiser inside its fitted range over episode poses.
pub const RIDGE_TRAINING_EXAMPLES: usize = 1000;

/// Ridge denoiser trained on [`ridge_examples`] with the default inference schedule.
pub fn train_ridge(spec: &SceneSpec, cfg: &EpisodeConfig, count: usize, seed: u64) -> Result<RidgeDenoiser, HarnessError> {
    let examples = ridge_examples(spec, cfg, count, (1f64.to_radians(), 0.004), seed)?;
    Ok(RidgeDenoiser::train(&examples, &DenoiseSchedule::inference(), 1e-3)?)
}

/// Goal grid for [`sweep`]: `nx × ny` positions spanning `min..max` in the
/// world x-y plane at height `z`, with the start orientation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalGrid {
    pub nx: usize,
    pub ny: usize,
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub z: f64,
}

impl GoalGrid {
    pub fn goal(&self, ix: usize, iy: usize, start: &Se3) -> Se3 {
        let lerp = |lo: f64, hi: f64, i: usize, n: usize| if n <= 1 { (lo + hi) / 2.0 } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
        Se3::new(start.rotation, Vector3::new(lerp(self.min[0], self.max[0], ix, self.nx), lerp(self.min[1], self.max[1], iy, self.ny), self.z))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub ix: usize,
    pub iy: usize,
    pub goal: Se3,
    pub report: EpisodeReport,
}

/// One episode per grid cell, in parallel, each seeded from `cfg.seed` and its cell.
pub fn sweep(spec: &SceneSpec, cfg: &EpisodeConfig, grid: &GoalGrid, ridge: Option<&RidgeDenoiser>) -> Result<Vec<SweepCell>, HarnessError> {
    let cells: Vec<(usize, usize)> = (0..grid.ny).flat_map(|iy| (0..grid.nx).map(move |ix| (ix, iy))).collect();
    cells
        .par_iter()
        .map(|&(ix, iy)| {
            let goal = grid.goal(ix, iy, &spec.gripper.pose);
            let cell_cfg = EpisodeConfig { seed: cfg.seed.wrapping_add((iy * grid.nx + ix) as u64), ..cfg.clone() };
            let report = run_episode(spec, &cell_cfg, &goal, ridge, None)?;
            Ok(SweepCell { ix, iy, goal, report })
        })
        .collect()
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("ix,iy,goal_x,goal_y,goal_z,success,steps,rotation_error_deg,translation_error\n");
    for c in cells {
        let t = c.goal.translation;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.ix, c.iy, t.x, t.y, t.z, c.report.success, c.report.steps, c.report.rotation_error_deg, c.report.translation_error
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::BACKGROUND_LABEL;

    #[test]
    fn zero_twists_give_static_scene() {
        let mut spec = SceneSpec::episode();
        spec.gripper.twist = [0.0; 6];
        let scene = generate_scene(&spec).unwrap();
        assert!(scene.field.points.iter().all(|p| p.disp == Vector3::zeros()));
        for (a, b) in scene.supervision.current.iter().zip(&scene.supervision.future) {
            assert_eq!(a.image, b.image);
        }
        assert!(!scene.field.has_label(BACKGROUND_LABEL));
    }

    #[test]
    fn pure_translation_moves_gripper_uniformly() {
        let mut spec = SceneSpec::episode();
        spec.gripper.twist = [0.0, 0.0, 0.0, 0.08, 0.0, 0.0];
        let scene = generate_scene(&spec).unwrap();
        let (now, next) = scene.field.extract_subset(GRIPPER_LABEL).unwrap();
        assert_eq!(now.len(), spec.gripper.count);
        for (a, b) in now.iter().zip(&next) {
            assert!((b - a - Vector3::new(0.08, 0.0, 0.0)).norm() < 1e-15);
        }
        for (p, q) in now.iter().zip(&scene.primitive) {
            assert!((p - spec.gripper.pose.apply(&q.mean)).norm() < 1e-15);
        }
    }

    #[test]
    fn rotating_body_is_rigid() {
        let spec = SceneSpec::benchmark();
        let scene = generate_scene(&spec).unwrap();
        for body in [GRIPPER_LABEL, 2] {
            let pts: Vec<_> = scene.field.points.iter().filter(|p| p.label == body).collect();
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    let d0 = (pts[i].mean - pts[j].mean).norm();
                    let d1 = (pts[i].mean + pts[i].disp - pts[j].mean - pts[j].disp).norm();
                    assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }
        let future = scene.field.advance(1.0).unwrap();
        for v in &scene.supervision.future {
            assert_eq!(render(&future, &v.camera, &spec.render_config()).image, v.image);
        }
    }

    #[test]
    fn rotation_about_center_preserves_radius() {
        let mut spec = SceneSpec::episode();
        spec.gripper.twist = [0.1, 0.2, 0.3, 0.0, 0.0, 0.0];
        let scene = generate_scene(&spec).unwrap();
        let c = spec.gripper.pose.translation;
        for p in scene.field.points.iter().filter(|p| p.label == GRIPPER_LABEL) {
            assert!(((p.mean + p.disp - c).norm() - (p.mean - c).norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SceneSpec::episode();
        spec.objects[0].center = [0.0, 0.0, 0.25];
        assert!(matches!(generate_scene(&spec), Err(HarnessError::Overlap(_, _))));
        let mut spec = SceneSpec::episode();
        spec.gripper.twist = [0.0, 0.0, 0.9, 0.0, 0.0, 0.0];
        assert!(matches!(generate_scene(&spec), Err(HarnessError::InvalidSpec(_))));
        let mut spec = SceneSpec::episode();
        spec.objects[0].label = GRIPPER_LABEL;
        assert!(matches!(generate_scene(&spec), Err(HarnessError::InvalidSpec(_))));
        let mut spec = SceneSpec::episode();
        spec.cameras.clear();
        assert!(matches!(generate_scene(&spec), Err(HarnessError::InvalidSpec(_))));
    }

    #[test]
    fn spec_json_round_trip_and_unknown_keys() {
        let spec = SceneSpec::benchmark();
        let text = serde_json::to_string_pretty(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SceneSpec>(&text).unwrap(), spec);
        let bad = text.replacen("\"seed\"", "\"sneed\": 1, \"seed\"", 1);
        assert!(serde_json::from_str::<SceneSpec>(&bad).is_err());
    }

    fn start_state() -> (SceneSpec, Scene, EpisodeState) {
        let spec = SceneSpec::episode();
        let scene = generate_scene(&spec).unwrap();
        let state = EpisodeState {
            field: scene.field.clone(),
            gripper_pose: scene.gripper_pose,
            goal: scene.gripper_pose,
            step: 0,
            success: false,
            failed: false,
            gripper_closed: false,
        };
        (spec, scene, state)
    }

    #[test]
    fn execute_examples() {
        let (spec, scene, state) = start_state();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = execute(&state, &Se3::identity(), 0.0, &scene.primitive, &spec.bounds, 0.0, &mut rng);
        assert_eq!(same.field, state.field);
        assert_eq!(same.gripper_pose, state.gripper_pose);
        let mut s = state.clone();
        for _ in 0..8 {
            s = execute(&s, &Se3::from_translation(0.01, 0.0, 0.0), 0.0, &scene.primitive, &spec.bounds, 0.0, &mut rng);
        }
        assert!((s.gripper_pose.translation - state.gripper_pose.translation - Vector3::new(0.08, 0.0, 0.0)).norm() < 1e-12);
        let (now, _) = s.field.extract_subset(GRIPPER_LABEL).unwrap();
        let (before, _) = state.field.extract_subset(GRIPPER_LABEL).unwrap();
        assert!(now.iter().zip(&before).all(|(a, b)| (a - b - Vector3::new(0.08, 0.0, 0.0)).norm() < 1e-12));
        let far = execute(&state, &Se3::from_translation(5.0, 0.0, 0.0), 0.0, &scene.primitive, &spec.bounds, 0.0, &mut rng);
        assert!(far.failed);
    }

    #[test]
    fn execution_noise_stays_within_random_walk_bound() {
        let (spec, scene, state) = start_state();
        let sigma = 0.002;
        let bound = 3.0 * sigma * 8f64.sqrt();
        let mut inside = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mut s = state.clone();
            for _ in 0..8 {
                s = execute(&s, &Se3::from_translation(0.01, 0.0, 0.0), 0.0, &scene.primitive, &spec.bounds, sigma, &mut rng);
            }
            let err = s.gripper_pose.translation - state.gripper_pose.translation - Vector3::new(0.08, 0.0, 0.0);
            if err.iter().all(|e| e.abs() <= bound) {
                inside += 1;
            }
        }
        assert!(inside >= 990, "{inside}");
    }

    #[test]
    fn episode_at_goal_takes_no_steps() {
        let spec = SceneSpec::episode();
        let report = run_episode(&spec, &EpisodeConfig::default(), &spec.gripper.pose, None, None).unwrap();
        assert!(report.success);
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn ground_truth_oracle_episode_succeeds() {
        let spec = SceneSpec::episode();
        let goal = random_goal(&spec.gripper.pose, &GoalSampler::default(), 3);
        let cfg = EpisodeConfig::default();
        let a = run_episode(&spec, &cfg, &goal, None, None).unwrap();
        assert!(a.success, "{a:?}");
        assert!(a.steps >= 1 && a.steps <= cfg.budget);
        assert_eq!(run_episode(&spec, &cfg, &goal, None, None).unwrap(), a);
    }

    #[test]
    fn uniform_init_labels_follow_reference() {
        let scene = generate_scene(&SceneSpec::episode()).unwrap();
        let f = uniform_init(&scene.field, &Bounds::default(), 50, 3);
        assert_eq!(f.len(), 50);
        assert!(f.points.iter().all(|p| p.disp == Vector3::zeros() && p.opacity == 0.0 && p.color == Vector3::repeat(0.5)));
        assert!(f.points.iter().all(|p| p.label == GRIPPER_LABEL || p.label == 2));
    }

    #[test]
    fn sweep_csv_keeps_cell_coordinates() {
        let spec = SceneSpec::episode();
        let grid = GoalGrid { nx: 3, ny: 1, min: [-0.1, 0.0], max: [0.1, 0.0], z: 0.2 };
        let cells = sweep(&spec, &EpisodeConfig::default(), &grid, None).unwrap();
        let csv = sweep_csv(&cells);
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 4);
        assert!(rows[1].starts_with("0,0,-0.1,0,0.2,true"));
        assert!(rows[3].starts_with("2,0,0.1,0,0.2,true"));
    }
}
