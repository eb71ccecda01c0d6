//! Fixtures and numerical checks shared by unit, integration and acceptance tests.

use nalgebra::Vector3;
use rand::Rng;

use crate::field::{param, GaussianField, GaussianPoint, PARAM_COUNT};
use crate::geometry::{Camera, Quaternion, Se3};
use crate::image::Image;
use crate::renderer::{render_backward, render_frozen, render_with_visibility, RenderConfig};

/// 8×8 camera at the origin looking down +z with a focal length of 8 px.
pub fn small_camera() -> Camera {
    Camera::new(8.0, 8.0, 4.0, 4.0, 8, 8, Se3::identity()).expect("valid camera")
}

/// `n` Gaussians in front of [`small_camera`] with distinct depths, random
/// appearance and raw (non-unit) quaternions.
pub fn random_scene(n: usize, rng: &mut impl Rng) -> GaussianField {
    let points = (0..n)
        .map(|i| {
            let z = 2.0 + 0.2 * i as f64 + rng.random_range(0.0..0.15);
            let mean = Vector3::new(rng.random_range(-0.4..0.4) * z, rng.random_range(-0.4..0.4) * z, z);
            let color = Vector3::new(rng.random(), rng.random(), rng.random());
            let rot = Quaternion::new(rng.random_range(0.2..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let scale = Vector3::new(rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)) * (z / 2.0);
            let mut p = GaussianPoint::new(mean, color, rng.random_range(-1.5..2.5), rot, scale, 0);
            p.rotation = Quaternion::new(p.rotation.w * 1.3, p.rotation.x * 1.3, p.rotation.y * 1.3, p.rotation.z * 1.3);
            p
        })
        .collect();
    GaussianField::new(points)
}

/// Worst disagreement found by [`gradient_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub point: usize,
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the analytic gradient of `L = Σ w·C` against central differences
/// with step `h`, for every parameter of every Gaussian, with the visibility
/// gates frozen at the unperturbed configuration. Displacements are checked
/// through the advanced field, `advance(F, 1)`.
pub fn gradient_check(field: &GaussianField, cam: &Camera, cfg: &RenderConfig, weights: &Image, h: f64, floor: f64) -> GradientCheck {
    let loss = |img: &Image| img.data.iter().zip(&weights.data).map(|(c, w)| c * w).sum::<f64>();
    let advanced = field.advance(1.0).expect("unit fraction");
    let (_, vis_now) = render_with_visibility(field, cam, cfg);
    let (_, vis_next) = render_with_visibility(&advanced, cam, cfg);
    let now = render_backward(field, cam, cfg, weights);
    let next = render_backward(&advanced, cam, cfg, weights).routed_to_displacement();
    let mut worst = GradientCheck { max_rel_error: 0.0, point: 0, param: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for i in 0..field.len() {
        for k in 0..PARAM_COUNT {
            let is_disp = (param::DISP..param::DISP + 3).contains(&k);
            let eval = |delta: f64| {
                let mut f = field.clone();
                let mut p = f.points[i].params();
                p[k] += delta;
                f.points[i].set_params(&p);
                if is_disp {
                    loss(&render_frozen(&f.advance(1.0).expect("unit fraction"), cam, cfg, &vis_next).image)
                } else {
                    loss(&render_frozen(&f, cam, cfg, &vis_now).image)
                }
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = if is_disp { next.grads[i][k] } else { now.grads[i][k] };
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst.checked += 1;
            if rel > worst.max_rel_error {
                worst = GradientCheck { max_rel_error: rel, point: i, param: k, analytic, numeric, checked: worst.checked };
            }
        }
    }
    worst
}

/// Image of independent uniform weights in `[-1, 1]`.
pub fn random_weights(width: usize, height: usize, rng: &mut impl Rng) -> Image {
    let mut img = Image::new(width, height);
    for v in &mut img.data {
        *v = rng.random_range(-1.0..1.0);
    }
    img
}
