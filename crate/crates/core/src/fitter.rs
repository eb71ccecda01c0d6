//! Analysis-by-synthesis fitting of a field to images at `t` and `t + Δt`.
//!
//! The objective sums, over every view, `(1 - λ)·MSE + λ·(1 - SSIM)` of the
//! current render against the current images and of the advanced render
//! against the future images. Parameters are updated with Adam.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FitError, ImageError};
use crate::field::{param, FieldDelta, GaussianField, PARAM_COUNT};
use crate::geometry::{Camera, SCALE_FLOOR};
use crate::image::{ssim_with_gradient, Image};
use crate::renderer::{render, render_backward, RenderConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const OPACITY_LOGIT_LIMIT: f64 = 12.0;
/// Largest admissible Gaussian scale, in scene units.
pub const SCALE_CEILING: f64 = 1.0;
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}

/// Observed images at the current timestep and after the interval Δt.
#[derive(Clone, Debug, Default)]
pub struct SupervisionSet {
    pub current: Vec<View>,
    pub future: Vec<View>,
}

impl SupervisionSet {
    /// At least one current view is required. An empty future list is
    /// accepted and leaves the displacement unsupervised.
    pub fn validate(&self) -> Result<(), FitError> {
        if self.current.is_empty() {
            return Err(FitError::InvalidSupervision("no current views".into()));
        }
        for v in self.current.iter().chain(&self.future) {
            if v.image.dims() != (v.camera.width, v.camera.height) {
                return Err(FitError::InvalidSupervision("image size does not match its camera".into()));
            }
            if v.image.data.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(FitError::InvalidSupervision("pixel values outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub mean: f64,
    pub disp: f64,
    pub color: f64,
    pub opacity: f64,
    pub rotation: f64,
    pub scale: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates { mean: 1.6e-3, disp: 1.6e-3, color: 2.5e-3, opacity: 5e-2, rotation: 1e-3, scale: 5e-3 }
    }
}

impl LearningRates {
    fn per_param(&self) -> [f64; PARAM_COUNT] {
        let mut lr = [0.0; PARAM_COUNT];
        lr[param::MEAN..param::MEAN + 3].fill(self.mean);
        lr[param::DISP..param::DISP + 3].fill(self.disp);
        lr[param::COLOR..param::COLOR + 3].fill(self.color);
        lr[param::OPACITY] = self.opacity;
        lr[param::ROTATION..param::ROTATION + 4].fill(self.rotation);
        lr[param::LOG_SCALE..param::LOG_SCALE + 3].fill(self.scale);
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub ssim_weight: f64,
    pub seed: u64,
    pub background: [f64; 3],
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { iterations: 2000, learning_rates: LearningRates::default(), ssim_weight: 0.2, seed: 0, background: [0.0; 3] }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let lr = &self.learning_rates;
        let rates = [lr.mean, lr.disp, lr.color, lr.opacity, lr.rotation, lr.scale];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(FitError::InvalidConfig("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ssim_weight) {
            return Err(FitError::InvalidConfig("ssim_weight must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig::with_background(self.background)
    }
}

/// `(1-λ)·MSE + λ·(1-SSIM)` and its gradient with respect to `rendered`.
pub fn photometric_loss(rendered: &Image, target: &Image, ssim_weight: f64) -> Result<(f64, Image), ImageError> {
    rendered.check_same_dims(target)?;
    let n = rendered.data.len() as f64;
    let mut grad = Image::new(rendered.width, rendered.height);
    if rendered.data == target.data {
        return Ok((0.0, grad));
    }
    let mut mse = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = a - b;
        mse += d * d;
        *g = (1.0 - ssim_weight) * 2.0 * d / n;
    }
    mse /= n;
    let mut loss = (1.0 - ssim_weight) * mse;
    if ssim_weight > 0.0 {
        let (ssim, sg) = ssim_with_gradient(rendered, target, true)?;
        loss += ssim_weight * (1.0 - ssim);
        for (g, s) in grad.data.iter_mut().zip(sg.expect("gradient requested")) {
            *g -= ssim_weight * s;
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub current: f64,
    pub future: f64,
}

/// Sum of per-view photometric losses at both timesteps and its gradient.
/// Only future views contribute to the displacement gradient.
pub fn total_loss(field: &GaussianField, supervision: &SupervisionSet, cfg: &FitConfig) -> Result<(LossRecord, FieldDelta), FitError> {
    let rcfg = cfg.render_config();
    let future_field = field.advance(1.0).expect("unit fraction");
    let jobs: Vec<(&GaussianField, &View, bool)> = supervision
        .current
        .iter()
        .map(|v| (field, v, false))
        .chain(supervision.future.iter().map(|v| (&future_field, v, true)))
        .collect();
    let per_view: Vec<Result<(f64, FieldDelta, bool), ImageError>> = jobs
        .par_iter()
        .map(|&(f, view, is_future)| {
            let out = render(f, &view.camera, &rcfg);
            let (loss, grad) = photometric_loss(&out.image, &view.image, cfg.ssim_weight)?;
            let delta = render_backward(f, &view.camera, &rcfg, &grad);
            Ok((loss, if is_future { delta.routed_to_displacement() } else { delta }, is_future))
        })
        .collect();
    let mut record = LossRecord::default();
    let mut delta = FieldDelta::zeros(field.len());
    for r in per_view {
        let (loss, d, is_future) = r?;
        if is_future {
            record.future += loss;
        } else {
            record.current += loss;
        }
        delta.add_assign(&d);
    }
    record.total = record.current + record.future;
    Ok((record, delta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<[f64; PARAM_COUNT]>,
    pub second: Vec<[f64; PARAM_COUNT]>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { first: vec![[0.0; PARAM_COUNT]; n], second: vec![[0.0; PARAM_COUNT]; n], step: 0 }
    }
}

/// One bias-corrected Adam update. Rotations are renormalized, colors kept
/// in `[0, 1]`, and opacity logits and log-scales clamped.
pub fn adam_step(field: &GaussianField, delta: &FieldDelta, state: &AdamState, cfg: &FitConfig) -> Result<(GaussianField, AdamState), FitError> {
    assert_eq!(field.len(), delta.len(), "delta must align with the field");
    assert_eq!(field.len(), state.first.len(), "optimizer state must align with the field");
    delta.is_finite().map_err(FitError::NonFiniteGradient)?;
    let lr = cfg.learning_rates.per_param();
    let mut next = state.clone();
    next.step += 1;
    let t = next.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    let mut out = field.clone();
    let (lo_scale, hi_scale) = (SCALE_FLOOR.ln(), SCALE_CEILING.ln());
    for (i, point) in out.points.iter_mut().enumerate() {
        let g = &delta.grads[i];
        let m = &mut next.first[i];
        let v = &mut next.second[i];
        let mut p = point.params();
        for k in 0..PARAM_COUNT {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            p[k] -= lr[k] * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
        for c in &mut p[param::COLOR..param::COLOR + 3] {
            *c = c.clamp(0.0, 1.0);
        }
        p[param::OPACITY] = p[param::OPACITY].clamp(-OPACITY_LOGIT_LIMIT, OPACITY_LOGIT_LIMIT);
        for s in &mut p[param::LOG_SCALE..param::LOG_SCALE + 3] {
            *s = s.clamp(lo_scale, hi_scale);
        }
        let rot = &mut p[param::ROTATION..param::ROTATION + 4];
        if m[param::ROTATION..param::ROTATION + 4].iter().any(|&x| x != 0.0) {
            let n = rot.iter().map(|x| x * x).sum::<f64>().sqrt();
            rot.iter_mut().for_each(|x| *x /= n);
        }
        point.set_params(&p);
    }
    Ok((out, next))
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub field: GaussianField,
    /// Loss evaluated before each update.
    pub history: Vec<LossRecord>,
}

pub fn fit(initial: &GaussianField, supervision: &SupervisionSet, cfg: &FitConfig) -> Result<FitResult, FitError> {
    fit_with_observer(initial, supervision, cfg, |_| {})
}

/// [`fit`] with a callback invoked after every loss evaluation.
pub fn fit_with_observer(
    initial: &GaussianField,
    supervision: &SupervisionSet,
    cfg: &FitConfig,
    mut observe: impl FnMut(&LossRecord),
) -> Result<FitResult, FitError> {
    cfg.validate()?;
    supervision.validate()?;
    let mut field = initial.clone();
    let mut state = AdamState::new(field.len());
    let mut history = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let (mut record, delta) = total_loss(&field, supervision, cfg)?;
        record.iteration = iteration;
        history.push(record);
        observe(&record);
        if !record.total.is_finite() || record.total > DIVERGENCE_LOSS {
            return Err(FitError::Diverged { iteration, loss: record.total, history });
        }
        let (f, s) = adam_step(&field, &delta, &state, cfg)?;
        field = f;
        state = s;
    }
    Ok(FitResult { field, history })
}

/// Loss history as CSV: `iteration,total,current,future`.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("iteration,total,current,future\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.iteration, r.total, r.current, r.future));
    }
    s
}
