//! Differentiable splatting.
//!
//! Visible Gaussians are sorted front-to-back by camera depth (ties broken by
//! field index) and alpha-composited per pixel. The backward pass is analytic
//! and covers every parameter, including the quaternion normalization and the
//! dependence of the perspective Jacobian on the Gaussian center. The near
//! plane, the support radius and the alpha cutoff/ceiling act as gates with
//! zero gradient.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::field::{param, FieldDelta, GaussianField, PARAM_COUNT};
use crate::geometry::{covariance_from_rs, project_gaussian, Camera, SCALE_FLOOR};
use crate::image::Image;

/// Rows per work unit. Fixed so reductions do not depend on the thread count.
const ROW_BLOCK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub alpha_ceiling: f64,
    pub alpha_cutoff: f64,
    /// Mahalanobis radius beyond which a Gaussian contributes nothing.
    pub support_radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { background: [0.0; 3], alpha_ceiling: 0.999, alpha_cutoff: 1.0 / 255.0, support_radius: 3.0 }
    }
}

impl RenderConfig {
    pub fn with_background(background: [f64; 3]) -> Self {
        RenderConfig { background, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// Transmittance left after the last Gaussian, per pixel.
    pub transmittance: Vec<f64>,
}

impl RenderOutput {
    /// Pixels whose accumulated opacity reaches `threshold`.
    pub fn coverage_mask(&self, threshold: f64) -> Vec<bool> {
        self.transmittance.iter().map(|t| 1.0 - t >= threshold).collect()
    }
}

/// Ordered contributors of every pixel, as recorded by a forward pass.
/// Each entry is `(field index, clamped at the alpha ceiling)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Visibility {
    pub width: usize,
    pub pixels: Vec<Vec<(u32, bool)>>,
}

/// Screen-space state of one Gaussian.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: usize,
    pub depth: f64,
    pub mean: Vector2<f64>,
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub x_range: (usize, usize),
    pub y_range: (usize, usize),
    pub visible_box: bool,
}

impl Splat {
    /// `(α before clamping, Gaussian falloff)` at continuous pixel `p`, or
    /// `None` outside the support radius.
    #[inline]
    pub fn falloff(&self, px: f64, py: f64, support: f64) -> Option<(Vector2<f64>, f64)> {
        let d = Vector2::new(px - self.mean.x, py - self.mean.y);
        let m = self.conic[(0, 0)] * d.x * d.x + 2.0 * self.conic[(0, 1)] * d.x * d.y + self.conic[(1, 1)] * d.y * d.y;
        if m > support * support {
            return None;
        }
        Some((d, (-0.5 * m).exp()))
    }
}

fn inverse_2x2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    Matrix2::new(m[(1, 1)] / det, -m[(0, 1)] / det, -m[(1, 0)] / det, m[(0, 0)] / det)
}

pub(crate) fn make_splat(field: &GaussianField, index: usize, cam: &Camera, cfg: &RenderConfig) -> Option<Splat> {
    let g = &field.points[index];
    let cov3 = covariance_from_rs(g.rotation, g.scale());
    let proj = project_gaussian(&g.mean, &cov3, cam)?;
    let conic = inverse_2x2(&proj.cov);
    let rx = cfg.support_radius * proj.cov[(0, 0)].sqrt();
    let ry = cfg.support_radius * proj.cov[(1, 1)].sqrt();
    let lo_x = (proj.mean.x - rx).ceil().max(0.0);
    let hi_x = (proj.mean.x + rx).floor().min(cam.width as f64 - 1.0);
    let lo_y = (proj.mean.y - ry).ceil().max(0.0);
    let hi_y = (proj.mean.y + ry).floor().min(cam.height as f64 - 1.0);
    let visible_box = lo_x <= hi_x && lo_y <= hi_y;
    let clip = |v: f64| if v.is_finite() && v > 0.0 { v as usize } else { 0 };
    Some(Splat {
        index,
        depth: proj.depth,
        mean: proj.mean,
        conic,
        opacity: g.alpha(),
        color: g.color,
        x_range: (clip(lo_x), clip(hi_x)),
        y_range: (clip(lo_y), clip(hi_y)),
        visible_box,
    })
}

/// Projected Gaussians in front of the camera, sorted by `(depth, index)`.
fn sorted_splats(field: &GaussianField, cam: &Camera, cfg: &RenderConfig) -> Vec<Splat> {
    let mut splats: Vec<Splat> = (0..field.len())
        .filter_map(|i| make_splat(field, i, cam, cfg))
        .filter(|s| s.visible_box)
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

/// One contributor at one pixel.
#[derive(Clone, Copy)]
struct Contribution {
    slot: usize,
    alpha: f64,
    falloff: f64,
    offset: Vector2<f64>,
    clamped: bool,
    transmittance: f64,
}

fn row_candidates(splats: &[Splat], y: usize) -> Vec<usize> {
    (0..splats.len()).filter(|&k| splats[k].y_range.0 <= y && y <= splats[k].y_range.1).collect()
}

fn pixel_contributions(splats: &[Splat], row: &[usize], x: usize, y: usize, cfg: &RenderConfig, out: &mut Vec<Contribution>) -> f64 {
    out.clear();
    let mut t = 1.0;
    for &k in row {
        let s = &splats[k];
        if x < s.x_range.0 || x > s.x_range.1 {
            continue;
        }
        let Some((offset, falloff)) = s.falloff(x as f64, y as f64, cfg.support_radius) else { continue };
        let raw = s.opacity * falloff;
        if raw < cfg.alpha_cutoff {
            continue;
        }
        let clamped = raw > cfg.alpha_ceiling;
        let alpha = if clamped { cfg.alpha_ceiling } else { raw };
        out.push(Contribution { slot: k, alpha, falloff, offset, clamped, transmittance: t });
        t *= 1.0 - alpha;
    }
    t
}

fn composite(splats: &[Splat], contribs: &[Contribution], t_final: f64, bg: &[f64; 3]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for e in contribs {
        let col = &splats[e.slot].color;
        let w = e.alpha * e.transmittance;
        for ch in 0..3 {
            c[ch] += w * col[ch];
        }
    }
    for ch in 0..3 {
        c[ch] += t_final * bg[ch];
    }
    c
}

fn forward(field: &GaussianField, cam: &Camera, cfg: &RenderConfig, record: bool) -> (RenderOutput, Option<Visibility>) {
    let splats = sorted_splats(field, cam, cfg);
    let (w, h) = (cam.width, cam.height);
    let blocks: Vec<(Vec<f64>, Vec<f64>, Vec<Vec<(u32, bool)>>)> = (0..h.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let rows = (b * ROW_BLOCK)..((b + 1) * ROW_BLOCK).min(h);
            let mut rgb = Vec::with_capacity(rows.len() * w * 3);
            let mut trans = Vec::with_capacity(rows.len() * w);
            let mut vis = Vec::new();
            let mut contribs = Vec::new();
            for y in rows {
                let row = row_candidates(&splats, y);
                for x in 0..w {
                    let t = pixel_contributions(&splats, &row, x, y, cfg, &mut contribs);
                    rgb.extend(composite(&splats, &contribs, t, &cfg.background));
                    trans.push(t);
                    if record {
                        vis.push(contribs.iter().map(|e| (splats[e.slot].index as u32, e.clamped)).collect());
                    }
                }
            }
            (rgb, trans, vis)
        })
        .collect();
    let mut image = Image::new(w, h);
    image.data.clear();
    let mut transmittance = Vec::with_capacity(w * h);
    let mut pixels = Vec::new();
    for (rgb, t, v) in blocks {
        image.data.extend(rgb);
        transmittance.extend(t);
        pixels.extend(v);
    }
    (RenderOutput { image, transmittance }, record.then_some(Visibility { width: w, pixels }))
}

/// Renders `field` from `cam`. An empty visible set yields the background.
pub fn render(field: &GaussianField, cam: &Camera, cfg: &RenderConfig) -> RenderOutput {
    forward(field, cam, cfg, false).0
}

/// Forward pass that also records which Gaussians reached each pixel.
pub fn render_with_visibility(field: &GaussianField, cam: &Camera, cfg: &RenderConfig) -> (RenderOutput, Visibility) {
    let (out, vis) = forward(field, cam, cfg, true);
    (out, vis.expect("visibility requested"))
}

/// Re-renders with the gates of a previous pass held fixed: the recorded
/// contributors are composited in the recorded order with no cutoff or
/// support test, clamped entries stay at the ceiling. Used for
/// finite-difference checks, where gates must not flip under perturbation.
pub fn render_frozen(field: &GaussianField, cam: &Camera, cfg: &RenderConfig, vis: &Visibility) -> RenderOutput {
    let splats: Vec<Option<Splat>> = (0..field.len()).map(|i| make_splat(field, i, cam, cfg)).collect();
    let (w, h) = (cam.width, cam.height);
    let mut image = Image::new(w, h);
    let mut transmittance = vec![1.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for &(idx, clamped) in &vis.pixels[y * w + x] {
                let s = splats[idx as usize].as_ref().expect("frozen contributor left the view");
                let alpha = if clamped {
                    cfg.alpha_ceiling
                } else {
                    s.falloff(x as f64, y as f64, f64::INFINITY).map_or(0.0, |(_, f)| s.opacity * f)
                };
                for ch in 0..3 {
                    c[ch] += alpha * t * s.color[ch];
                }
                t *= 1.0 - alpha;
            }
            for ch in 0..3 {
                c[ch] += t * cfg.background[ch];
            }
            image.set_pixel(x, y, c);
            transmittance[y * w + x] = t;
        }
    }
    RenderOutput { image, transmittance }
}

/// Brute-force oracle: every pixel evaluates every Gaussian and sorts its own
/// contributor list, with no bounding-box rejection.
pub fn render_reference(field: &GaussianField, cam: &Camera, cfg: &RenderConfig) -> RenderOutput {
    let splats: Vec<Splat> = (0..field.len()).filter_map(|i| make_splat(field, i, cam, cfg)).collect();
    let (w, h) = (cam.width, cam.height);
    let mut image = Image::new(w, h);
    let mut transmittance = vec![1.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut hits: Vec<(f64, usize, f64, Vector3<f64>)> = splats
                .iter()
                .filter_map(|s| {
                    let (_, f) = s.falloff(x as f64, y as f64, cfg.support_radius)?;
                    let a = s.opacity * f;
                    (a >= cfg.alpha_cutoff).then(|| (s.depth, s.index, a.min(cfg.alpha_ceiling), s.color))
                })
                .collect();
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for (_, _, a, col) in hits {
                for ch in 0..3 {
                    c[ch] += a * t * col[ch];
                }
                t *= 1.0 - a;
            }
            for ch in 0..3 {
                c[ch] += t * cfg.background[ch];
            }
            image.set_pixel(x, y, c);
            transmittance[y * w + x] = t;
        }
    }
    RenderOutput { image, transmittance }
}

/// Screen-space gradient accumulators of one splat:
/// `[dμ2d.x, dμ2d.y, dK00, dK01, dK11, dopacity, dr, dg, db]`.
type ScreenGrad = [f64; 9];

/// Gradient of a loss with respect to every Gaussian parameter, given the
/// gradient of that loss with respect to the rendered image.
pub fn render_backward(field: &GaussianField, cam: &Camera, cfg: &RenderConfig, image_grad: &Image) -> FieldDelta {
    assert_eq!(image_grad.dims(), (cam.width, cam.height), "image gradient must match the camera");
    let splats = sorted_splats(field, cam, cfg);
    let (w, h) = (cam.width, cam.height);
    let n = splats.len();
    let partials: Vec<Vec<ScreenGrad>> = (0..h.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![[0.0; 9]; n];
            let mut contribs = Vec::new();
            for y in (b * ROW_BLOCK)..((b + 1) * ROW_BLOCK).min(h) {
                let row = row_candidates(&splats, y);
                for x in 0..w {
                    let g = image_grad.pixel(x, y);
                    if g == [0.0; 3] {
                        continue;
                    }
                    let t_final = pixel_contributions(&splats, &row, x, y, cfg, &mut contribs);
                    backprop_pixel(&splats, &contribs, t_final, &g, &cfg.background, &mut acc);
                }
            }
            acc
        })
        .collect();
    let mut screen = vec![[0.0; 9]; n];
    for part in &partials {
        for (s, p) in screen.iter_mut().zip(part) {
            for k in 0..9 {
                s[k] += p[k];
            }
        }
    }
    let mut delta = FieldDelta::zeros(field.len());
    for (splat, sg) in splats.iter().zip(&screen) {
        delta.grads[splat.index] = chain_to_parameters(field, splat, sg, cam);
    }
    delta
}

fn backprop_pixel(splats: &[Splat], contribs: &[Contribution], t_final: f64, g: &[f64; 3], bg: &[f64; 3], acc: &mut [ScreenGrad]) {
    // Contribution of everything behind the current entry, dotted with g.
    let mut behind = t_final * (bg[0] * g[0] + bg[1] * g[1] + bg[2] * g[2]);
    for e in contribs.iter().rev() {
        let s = &splats[e.slot];
        let cg = s.color.x * g[0] + s.color.y * g[1] + s.color.z * g[2];
        let w = e.alpha * e.transmittance;
        let a = &mut acc[e.slot];
        a[6] += w * g[0];
        a[7] += w * g[1];
        a[8] += w * g[2];
        if !e.clamped {
            let d_alpha = e.transmittance * cg - behind / (1.0 - e.alpha);
            a[5] += d_alpha * e.falloff;
            // α = o·exp(-m/2)
            let d_m = -0.5 * d_alpha * e.alpha;
            let d = e.offset;
            let kd = s.conic * d;
            a[0] += -2.0 * d_m * kd.x;
            a[1] += -2.0 * d_m * kd.y;
            a[2] += d_m * d.x * d.x;
            a[3] += d_m * d.x * d.y;
            a[4] += d_m * d.y * d.y;
        }
        behind += w * cg;
    }
}

/// ∂R/∂q for a unit quaternion `(w, x, y, z)`.
fn rotation_partials(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

fn chain_to_parameters(field: &GaussianField, splat: &Splat, sg: &ScreenGrad, cam: &Camera) -> [f64; PARAM_COUNT] {
    let g = &field.points[splat.index];
    let mut out = [0.0; PARAM_COUNT];
    out[param::COLOR] = sg[6];
    out[param::COLOR + 1] = sg[7];
    out[param::COLOR + 2] = sg[8];
    out[param::OPACITY] = sg[5] * splat.opacity * (1.0 - splat.opacity);

    let raw = g.rotation;
    let rnorm = raw.norm();
    let q = raw.normalized();
    let rot = q.to_matrix();
    let log_s = g.log_scale;
    let scale = g.scale();
    let s_mat = Matrix3::from_diagonal(&scale);
    let m = rot * s_mat;
    let cov3 = m * m.transpose();
    let w = cam.world_to_camera.rotation_matrix();
    let pc = cam.to_camera_frame(&g.mean);
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let j = Matrix2x3::new(fx / z, 0.0, -fx * x / (z * z), 0.0, fy / z, -fy * y / (z * z));
    let v = w * cov3 * w.transpose();

    // Loss gradient w.r.t. the conic as a full matrix, then the 2D covariance.
    let g_conic = Matrix2::new(sg[2], sg[3], sg[3], sg[4]);
    let g_cov2 = -(splat.conic * g_conic * splat.conic);
    let g_v = j.transpose() * g_cov2 * j;
    let g_j = g_cov2 * j * v * 2.0;
    let g_cov3 = w.transpose() * g_v * w;
    let g_m = g_cov3 * m * 2.0;
    let g_rot = g_m * s_mat;
    let g_scale_diag = rot.transpose() * g_m;
    for k in 0..3 {
        if log_s[k].exp() >= SCALE_FLOOR {
            out[param::LOG_SCALE + k] = g_scale_diag[(k, k)] * scale[k];
        }
    }
    let qa = q.to_array();
    let partials = rotation_partials(qa);
    let g_q: Vec<f64> = partials.iter().map(|p| g_rot.component_mul(p).sum()).collect();
    let dot: f64 = (0..4).map(|i| g_q[i] * qa[i]).sum();
    for i in 0..4 {
        out[param::ROTATION + i] = (g_q[i] - qa[i] * dot) / rnorm;
    }

    let (gu, gv) = (sg[0], sg[1]);
    let mut g_pc = Vector3::new(gu * fx / z, gv * fy / z, -gu * fx * x / (z * z) - gv * fy * y / (z * z));
    g_pc.x += g_j[(0, 2)] * (-fx / (z * z));
    g_pc.y += g_j[(1, 2)] * (-fy / (z * z));
    g_pc.z += g_j[(0, 0)] * (-fx / (z * z))
        + g_j[(0, 2)] * (2.0 * fx * x / (z * z * z))
        + g_j[(1, 1)] * (-fy / (z * z))
        + g_j[(1, 2)] * (2.0 * fy * y / (z * z * z));
    let g_mean = w.transpose() * g_pc;
    out[param::MEAN] = g_mean.x;
    out[param::MEAN + 1] = g_mean.y;
    out[param::MEAN + 2] = g_mean.z;
    out
}
