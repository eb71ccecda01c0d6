//! Action refinement: candidate actions are rendered as gripper overlays on
//! the current views and denoised with a deterministic DDIM sampler in twist
//! coordinates.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::InitAction;
use crate::error::RefineError;
use crate::field::{GaussianField, GaussianPoint, GRIPPER_LABEL};
use crate::geometry::se3_serde::PoseRepr;
use crate::geometry::{Camera, Se3, Twist};
use crate::image::Image;
use crate::renderer::{render, RenderConfig};

pub const TRAINING_LEVELS: usize = 50;
pub const INFERENCE_LEVELS: usize = 3;
/// Signal coefficient of the cleanest level.
pub const ALPHA_BAR_MAX: f64 = 1.0 - 1e-6;
const COSINE_OFFSET: f64 = 0.008;
/// Gripper predictions are clamped to `[GRIPPER_CLAMP, 1 - GRIPPER_CLAMP]` before the BCE.
pub const GRIPPER_CLAMP: f64 = 1e-7;
/// Coverage at or above which a pixel belongs to the overlay mask.
pub const MASK_THRESHOLD: f64 = 0.5;
/// Commands above this close the gripper.
pub const GRIPPER_THRESHOLD: f64 = 0.5;

/// One commanded step: a body-frame motion and a gripper command in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionStep {
    pub pose: Se3,
    pub gripper: f64,
}

/// Ordered action steps over a horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SequenceRepr", into = "SequenceRepr")]
pub struct ActionSequence {
    pub steps: Vec<ActionStep>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRepr {
    q: [f64; 4],
    t: [f64; 3],
    g: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRepr {
    horizon: usize,
    steps: Vec<StepRepr>,
}

impl From<ActionSequence> for SequenceRepr {
    fn from(a: ActionSequence) -> Self {
        let steps = a
            .steps
            .iter()
            .map(|s| {
                let p = PoseRepr::from(&s.pose);
                StepRepr { q: p.q, t: p.t, g: s.gripper }
            })
            .collect();
        SequenceRepr { horizon: a.steps.len(), steps }
    }
}

impl TryFrom<SequenceRepr> for ActionSequence {
    type Error = String;
    fn try_from(r: SequenceRepr) -> Result<Self, String> {
        if r.horizon != r.steps.len() {
            return Err(format!("horizon {} but {} steps", r.horizon, r.steps.len()));
        }
        let steps = r.steps.into_iter().map(|s| ActionStep { pose: Se3::from(PoseRepr { q: s.q, t: s.t }), gripper: s.g }).collect();
        Ok(ActionSequence { steps })
    }
}

impl ActionSequence {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn from_poses(poses: &[Se3], gripper: f64) -> Self {
        ActionSequence { steps: poses.iter().map(|&pose| ActionStep { pose, gripper }).collect() }
    }

    /// Body-frame steps of an init action for a body at `pose`, with a fixed gripper command.
    pub fn from_init(init: &InitAction, pose: &Se3, gripper: f64) -> Self {
        ActionSequence::from_poses(&init.in_body_frame(pose), gripper)
    }

    /// `steps[0] ∘ … ∘ steps[H-1]`: the body-frame motion of the whole sequence.
    pub fn total(&self) -> Se3 {
        self.steps.iter().fold(Se3::identity(), |acc, s| acc.compose(&s.pose))
    }

    pub fn to_vector(&self) -> Result<ActionVector, RefineError> {
        let steps = self.steps.iter().map(|s| s.pose.log()).collect::<Result<_, _>>()?;
        Ok(ActionVector { steps, gripper: self.steps.iter().map(|s| s.gripper).collect() })
    }
}

/// An action in twist coordinates: one 6-vector `(ω, v)` and one gripper
/// scalar per step.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionVector {
    pub steps: Vec<Twist>,
    pub gripper: Vec<f64>,
}

impl ActionVector {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.steps.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64], gripper: Vec<f64>) -> Self {
        ActionVector { steps: flat.chunks_exact(6).map(|c| c.try_into().expect("chunk of six")).collect(), gripper }
    }

    pub fn total(&self) -> Se3 {
        self.steps.iter().fold(Se3::identity(), |acc, xi| acc.compose(&Se3::exp(xi)))
    }

    /// Thresholds the gripper channel into open/close commands.
    pub fn to_sequence(&self) -> ActionSequence {
        let steps = self
            .steps
            .iter()
            .zip(&self.gripper)
            .map(|(xi, &g)| ActionStep { pose: Se3::exp(xi), gripper: if g > GRIPPER_THRESHOLD { 1.0 } else { 0.0 } })
            .collect();
        ActionSequence { steps }
    }
}

/// An action at noise level `level`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyAction {
    pub action: ActionVector,
    pub level: usize,
}

/// Cumulative signal coefficients `ᾱ_k`, non-increasing in `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl DenoiseSchedule {
    /// Accepts any non-empty, non-increasing sequence in `(0, 1)`.
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self, RefineError> {
        if alpha_bar.is_empty() {
            return Err(RefineError::InvalidSchedule("no levels".into()));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(RefineError::InvalidSchedule("coefficients must lie in (0, 1)".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(RefineError::InvalidSchedule("coefficients must not increase".into()));
        }
        Ok(DenoiseSchedule { alpha_bar })
    }

    /// Cosine schedule over `levels` levels starting at [`ALPHA_BAR_MAX`].
    pub fn cosine(levels: usize) -> Result<Self, RefineError> {
        if levels == 0 {
            return Err(RefineError::InvalidSchedule("no levels".into()));
        }
        let f = |k: f64| (std::f64::consts::FRAC_PI_2 * (k / levels as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)).cos().powi(2);
        let f0 = f(0.0);
        DenoiseSchedule::new((0..levels).map(|k| ALPHA_BAR_MAX * f(k as f64) / f0).collect())
    }

    /// `count` evenly spaced levels of `self`, always including the first and last.
    pub fn strided(&self, count: usize) -> Result<Self, RefineError> {
        let n = self.alpha_bar.len();
        if count == 0 || count > n {
            return Err(RefineError::InvalidSchedule(format!("cannot take {count} of {n} levels")));
        }
        if count == 1 {
            return DenoiseSchedule::new(vec![self.alpha_bar[0]]);
        }
        let picks = (0..count).map(|i| self.alpha_bar[(i * (n - 1) + (count - 1) / 2) / (count - 1)]).collect();
        DenoiseSchedule::new(picks)
    }

    /// The default inference schedule: three levels of the 50-level cosine schedule.
    pub fn inference() -> Self {
        DenoiseSchedule::cosine(TRAINING_LEVELS).and_then(|s| s.strided(INFERENCE_LEVELS)).expect("valid default schedule")
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, level: usize) -> Result<f64, RefineError> {
        self.alpha_bar.get(level).copied().ok_or(RefineError::LevelOutOfRange { level, len: self.alpha_bar.len() })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `x_k = √ᾱ_k·x₀ + √(1-ᾱ_k)·ε` with `ε ~ N(0, I)` drawn from `seed`. The
/// gripper channel is left clean. Returns the noisy action and `ε`.
pub fn add_noise(clean: &ActionVector, level: usize, schedule: &DenoiseSchedule, seed: u64) -> Result<(NoisyAction, Vec<Twist>), RefineError> {
    let a = schedule.alpha_bar(level)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<Twist> = clean.steps.iter().map(|_| std::array::from_fn(|_| StandardNormal.sample(&mut rng))).collect();
    let steps = clean.steps.iter().zip(&eps).map(|(x, e)| std::array::from_fn(|i| a.sqrt() * x[i] + (1.0 - a).sqrt() * e[i])).collect();
    Ok((NoisyAction { action: ActionVector { steps, gripper: clean.gripper.clone() }, level }, eps))
}

/// `x̂₀ = (x_k - √(1-ᾱ_k)·ε̂) / √ᾱ_k`.
pub fn predict_clean(x: &NoisyAction, eps: &[Twist], schedule: &DenoiseSchedule) -> Result<Vec<Twist>, RefineError> {
    if eps.len() != x.action.horizon() {
        return Err(RefineError::ShapeMismatch { expected: x.action.horizon(), got: eps.len() });
    }
    let a = schedule.alpha_bar(x.level)?;
    Ok(x.action.steps.iter().zip(eps).map(|(xk, e)| std::array::from_fn(|i| (xk[i] - (1.0 - a).sqrt() * e[i]) / a.sqrt())).collect())
}

/// Deterministic DDIM update from level `k` to `k - 1`. Returns the new
/// action and the clean estimate `x̂₀` it was built from.
pub fn ddim_step(x: &NoisyAction, eps: &[Twist], schedule: &DenoiseSchedule) -> Result<(NoisyAction, Vec<Twist>), RefineError> {
    if x.level == 0 {
        return Err(RefineError::LevelOutOfRange { level: 0, len: schedule.len() });
    }
    let x0 = predict_clean(x, eps, schedule)?;
    let prev = schedule.alpha_bar(x.level - 1)?;
    let steps = x0.iter().zip(eps).map(|(c, e)| std::array::from_fn(|i| prev.sqrt() * c[i] + (1.0 - prev).sqrt() * e[i])).collect();
    Ok((NoisyAction { action: ActionVector { steps, gripper: x.action.gripper.clone() }, level: x.level - 1 }, x0))
}

/// Everything needed to draw a candidate action over the current views.
#[derive(Clone, Debug)]
pub struct GuidanceScene {
    /// Reconstructed scene at the current timestep.
    pub field: GaussianField,
    /// Gripper pose `T_g^w`.
    pub gripper_pose: Se3,
    pub cameras: Vec<Camera>,
    /// Gripper primitive in its body frame.
    pub primitive: Vec<GaussianPoint>,
    pub render: RenderConfig,
}

/// A current view with the gripper drawn at a candidate pose.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceImage {
    pub image: Image,
    /// Per-pixel opacity of the overlay.
    pub coverage: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GuidanceImage {
    /// Mean overlay coverage over a `cells × cells` grid, row-major.
    pub fn pooled_coverage(&self, cells: usize) -> Vec<f64> {
        let (w, h) = self.image.dims();
        let mut sums = vec![0.0; cells * cells];
        let mut counts = vec![0usize; cells * cells];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * cells / h) * cells + x * cells / w;
                sums[cell] += self.coverage[y * w + x];
                counts[cell] += 1;
            }
        }
        sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
    }
}

/// Renders the gripper primitive posed at `T_g^w ∘ action` over the current
/// render of every camera. A primitive behind a camera leaves its mask empty.
pub fn render_action_guidance(scene: &GuidanceScene, action: &Se3) -> Vec<GuidanceImage> {
    let pose = scene.gripper_pose.compose(action);
    let overlay = GaussianField::new(scene.primitive.iter().map(|p| p.transformed(&pose)).collect());
    let clear = RenderConfig { background: [0.0; 3], ..scene.render };
    scene
        .cameras
        .par_iter()
        .map(|cam| {
            let base = render(&scene.field, cam, &scene.render).image;
            let top = render(&overlay, cam, &clear);
            let mut image = top.image;
            for (i, t) in top.transmittance.iter().enumerate() {
                for ch in 0..3 {
                    image.data[3 * i + ch] += t * base.data[3 * i + ch];
                }
            }
            let coverage: Vec<f64> = top.transmittance.iter().map(|t| 1.0 - t).collect();
            let mask = coverage.iter().map(|&c| c >= MASK_THRESHOLD).collect();
            GuidanceImage { image, coverage, mask }
        })
        .collect()
}

/// Mask of the gripper Gaussians of `field` rendered on their own.
pub fn gripper_mask(field: &GaussianField, cam: &Camera, cfg: &RenderConfig) -> Vec<bool> {
    let gripper = GaussianField::new(field.points.iter().filter(|p| p.label == GRIPPER_LABEL).cloned().collect());
    render(&gripper, cam, cfg).coverage_mask(MASK_THRESHOLD)
}

/// Predicted noise per step and gripper command per step.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub noise: Vec<Twist>,
    pub gripper: Vec<f64>,
}

pub trait Denoiser: Sync {
    fn denoise(&self, x: &NoisyAction, guidance: &[GuidanceImage], schedule: &DenoiseSchedule) -> Result<DenoiserOutput, RefineError>;
}

/// Knows the clean action and returns the exact noise that produced `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleDenoiser {
    pub target: ActionVector,
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, x: &NoisyAction, _: &[GuidanceImage], schedule: &DenoiseSchedule) -> Result<DenoiserOutput, RefineError> {
        if self.target.horizon() != x.action.horizon() {
            return Err(RefineError::ShapeMismatch { expected: x.action.horizon(), got: self.target.horizon() });
        }
        let a = schedule.alpha_bar(x.level)?;
        let noise = x
            .action
            .steps
            .iter()
            .zip(&self.target.steps)
            .map(|(xk, x0)| std::array::from_fn(|i| (xk[i] - a.sqrt() * x0[i]) / (1.0 - a).sqrt()))
            .collect();
        Ok(DenoiserOutput { noise, gripper: self.target.gripper.clone() })
    }
}

/// Result of [`refine_action`] with the intermediate state of every iteration.
#[derive(Clone, Debug)]
pub struct RefineTrace {
    pub action: ActionSequence,
    pub refined: ActionVector,
    /// Guidance rendered at the start of each iteration.
    pub guidance: Vec<Vec<GuidanceImage>>,
    /// Clean estimate produced by each iteration.
    pub estimates: Vec<Vec<Twist>>,
}

/// Runs the denoiser over the whole schedule starting from `init` at the
/// noisiest level. Guidance is re-rendered every iteration at the current
/// candidate: the initial action, then the latest clean estimate. The final
/// iteration returns its clean estimate.
pub fn refine_action(init: &ActionVector, scene: &GuidanceScene, denoiser: &dyn Denoiser, schedule: &DenoiseSchedule) -> Result<RefineTrace, RefineError> {
    let mut x = NoisyAction { action: init.clone(), level: schedule.len() - 1 };
    let mut candidate = init.steps.clone();
    let mut guidance = Vec::with_capacity(schedule.len());
    let mut estimates = Vec::with_capacity(schedule.len());
    let mut gripper: Vec<f64>;
    loop {
        let views = render_action_guidance(scene, &ActionVector { steps: candidate.clone(), gripper: vec![] }.total());
        let out = denoiser.denoise(&x, &views, schedule)?;
        if out.noise.len() != init.horizon() {
            return Err(RefineError::ShapeMismatch { expected: init.horizon(), got: out.noise.len() });
        }
        if out.gripper.len() != init.horizon() {
            return Err(RefineError::ShapeMismatch { expected: init.horizon(), got: out.gripper.len() });
        }
        guidance.push(views);
        gripper = out.gripper.iter().map(|g| g.clamp(0.0, 1.0)).collect();
        let x0 = if x.level == 0 {
            predict_clean(&x, &out.noise, schedule)?
        } else {
            let (next, x0) = ddim_step(&x, &out.noise, schedule)?;
            x = next;
            x0
        };
        estimates.push(x0.clone());
        candidate = x0;
        if estimates.len() == schedule.len() {
            break;
        }
    }
    let refined = ActionVector { steps: candidate, gripper };
    Ok(RefineTrace { action: refined.to_sequence(), refined, guidance, estimates })
}

/// Components and gradients of `L1(D, D_gt) + L1(ε, ε_gt) + BCE(g, g_gt)`,
/// each term a mean over its entries.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineLoss {
    pub total: f64,
    pub direction: f64,
    pub noise: f64,
    pub gripper: f64,
    pub grad_direction: Vec<f64>,
    pub grad_noise: Vec<f64>,
    pub grad_gripper: Vec<f64>,
}

pub fn refine_loss(d: &[f64], d_gt: &[f64], eps: &[f64], eps_gt: &[f64], g: &[f64], g_gt: &[f64]) -> Result<RefineLoss, RefineError> {
    if d.len() != d_gt.len() || eps.len() != eps_gt.len() || g.len() != g_gt.len() {
        return Err(RefineError::LengthMismatch);
    }
    let l1 = |a: &[f64], b: &[f64]| -> (f64, Vec<f64>) {
        let n = a.len().max(1) as f64;
        let loss = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        let grad = a.iter().zip(b).map(|(x, y)| if x > y { 1.0 / n } else if x < y { -1.0 / n } else { 0.0 }).collect();
        (loss, grad)
    };
    let (direction, grad_direction) = l1(d, d_gt);
    let (noise, grad_noise) = l1(eps, eps_gt);
    let n = g.len().max(1) as f64;
    let mut gripper = 0.0;
    let mut grad_gripper = Vec::with_capacity(g.len());
    for (&p, &t) in g.iter().zip(g_gt) {
        let inside = p > GRIPPER_CLAMP && p < 1.0 - GRIPPER_CLAMP;
        let q = p.clamp(GRIPPER_CLAMP, 1.0 - GRIPPER_CLAMP);
        gripper -= (t * q.ln() + (1.0 - t) * (1.0 - q).ln()) / n;
        grad_gripper.push(if inside { (-t / q + (1.0 - t) / (1.0 - q)) / n } else { 0.0 });
    }
    Ok(RefineLoss { total: direction + noise + gripper, direction, noise, gripper, grad_direction, grad_noise, grad_gripper })
}

/// Cells per side when pooling overlay coverage into denoiser features.
pub const POOL_CELLS: usize = 4;

/// Linear denoiser: one ridge regression per level mapping the noisy action,
/// pooled overlay coverage and a bias to the clean action and gripper
/// command. The noise estimate is derived from the predicted clean action.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeDenoiser {
    horizon: usize,
    /// Per level: `(outputs × features)` weights.
    weights: Vec<DMatrix<f64>>,
}

/// One training episode for [`RidgeDenoiser::train`].
#[derive(Clone, Debug)]
pub struct RidgeExample {
    pub init: ActionVector,
    pub target: ActionVector,
    pub scene: GuidanceScene,
}

fn ridge_features(x: &NoisyAction, guidance: &[GuidanceImage]) -> DVector<f64> {
    let mut f = x.action.flat();
    for g in guidance {
        f.extend(g.pooled_coverage(POOL_CELLS));
    }
    f.push(1.0);
    DVector::from_vec(f)
}

impl RidgeDenoiser {
    /// Fits the levels from noisiest to cleanest. Each level is trained on
    /// the states produced by running the already-trained noisier levels on
    /// the examples, so training inputs follow the inference distribution.
    pub fn train(examples: &[RidgeExample], schedule: &DenoiseSchedule, lambda: f64) -> Result<Self, RefineError> {
        let Some(first) = examples.first() else { return Err(RefineError::Solve("no training examples".into())) };
        let horizon = first.init.horizon();
        if examples.iter().any(|e| e.init.horizon() != horizon || e.target.horizon() != horizon || e.target.gripper.len() != horizon) {
            return Err(RefineError::LengthMismatch);
        }
        let mut states: Vec<(NoisyAction, Vec<Twist>)> =
            examples.iter().map(|e| (NoisyAction { action: e.init.clone(), level: schedule.len() - 1 }, e.init.steps.clone())).collect();
        let mut model = RidgeDenoiser { horizon, weights: vec![DMatrix::zeros(0, 0); schedule.len()] };
        for level in (0..schedule.len()).rev() {
            let feats: Vec<(DVector<f64>, Vec<GuidanceImage>)> = examples
                .par_iter()
                .zip(&states)
                .map(|(e, (x, cand))| {
                    let views = render_action_guidance(&e.scene, &ActionVector { steps: cand.clone(), gripper: vec![] }.total());
                    (ridge_features(x, &views), views)
                })
                .collect();
            let dim = feats[0].0.len();
            let outputs = 7 * horizon;
            let mut gram = DMatrix::<f64>::zeros(dim, dim);
            let mut cross = DMatrix::<f64>::zeros(dim, outputs);
            for ((f, _), e) in feats.iter().zip(examples) {
                let mut y = e.target.flat();
                y.extend(&e.target.gripper);
                gram += f * f.transpose();
                cross += f * DVector::from_vec(y).transpose();
            }
            for i in 0..dim - 1 {
                gram[(i, i)] += lambda;
            }
            let chol = gram.cholesky().ok_or_else(|| RefineError::Solve(format!("normal equations of level {level} not positive definite")))?;
            model.weights[level] = chol.solve(&cross).transpose();
            if level > 0 {
                let next: Result<Vec<_>, RefineError> = states
                    .iter()
                    .zip(&feats)
                    .map(|((x, _), (_, views))| {
                        let out = model.denoise(x, views, schedule)?;
                        let (x1, x0) = ddim_step(x, &out.noise, schedule)?;
                        Ok((x1, x0))
                    })
                    .collect();
                states = next?;
            }
        }
        Ok(model)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

impl Denoiser for RidgeDenoiser {
    fn denoise(&self, x: &NoisyAction, guidance: &[GuidanceImage], schedule: &DenoiseSchedule) -> Result<DenoiserOutput, RefineError> {
        if x.action.horizon() != self.horizon {
            return Err(RefineError::ShapeMismatch { expected: self.horizon, got: x.action.horizon() });
        }
        let w = self.weights.get(x.level).ok_or(RefineError::LevelOutOfRange { level: x.level, len: self.weights.len() })?;
        let f = ridge_features(x, guidance);
        if f.len() != w.ncols() {
            return Err(RefineError::ShapeMismatch { expected: w.ncols(), got: f.len() });
        }
        let y = w * f;
        let a = schedule.alpha_bar(x.level)?;
        let noise = x
            .action
            .steps
            .iter()
            .enumerate()
            .map(|(s, xk)| std::array::from_fn(|i| (xk[i] - a.sqrt() * y[6 * s + i]) / (1.0 - a).sqrt()))
            .collect();
        let gripper = (0..self.horizon).map(|s| y[6 * self.horizon + s].clamp(GRIPPER_CLAMP, 1.0 - GRIPPER_CLAMP)).collect();
        Ok(DenoiserOutput { noise, gripper })
    }
}
