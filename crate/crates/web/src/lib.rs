//! Browser demo over the benchmark scene: orbit renders at any time
//! fraction, the guidance overlay of a candidate gripper action, and the
//! denoising trajectory toward the true gripper motion.

use gaf_core::action::InitAction;
use gaf_core::field::GaussianField;
use gaf_core::geometry::{Camera, Quaternion, Se3};
use gaf_core::harness::{generate_scene, Scene, SceneSpec};
use gaf_core::image::Image;
use gaf_core::refine::{add_noise, ddim_step, predict_clean, render_action_guidance, ActionSequence, ActionVector, DenoiseSchedule, Denoiser, GuidanceScene, OracleDenoiser, TRAINING_LEVELS};
use gaf_core::renderer::{render, RenderConfig};
use nalgebra::Vector3;
use wasm_bindgen::prelude::*;

/// Side of the square demo canvas in pixels.
pub const VIEW_SIZE: usize = 128;
/// Steps the gripper motion is split into.
pub const HORIZON: usize = 8;
const ORBIT_RADIUS: f64 = 3.2;
const FOCAL: f64 = 200.0;
/// Blend weight of the mask tint in the guidance view.
const MASK_TINT: f64 = 0.35;

/// Values per row of [`DemoScene::trajectory`].
pub const TRAJECTORY_COLUMNS: usize = 7;

/// The benchmark scene and its render settings.
pub struct DemoScene {
    scene: Scene,
    render: RenderConfig,
}

impl DemoScene {
    pub fn new() -> Self {
        let spec = SceneSpec::benchmark();
        let scene = generate_scene(&spec).expect("benchmark spec is valid");
        DemoScene { scene, render: spec.render_config() }
    }

    /// Camera on a circle around the origin, `azimuth` and `elevation` in degrees.
    pub fn orbit_camera(azimuth: f64, elevation: f64) -> Camera {
        let (az, el) = (azimuth.to_radians(), elevation.clamp(-80.0, 80.0).to_radians());
        let eye = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * ORBIT_RADIUS;
        Camera::look_at(eye, Vector3::zeros(), Vector3::z(), FOCAL, VIEW_SIZE, VIEW_SIZE).expect("orbit camera is valid")
    }

    pub fn field(&self) -> &GaussianField {
        &self.scene.field
    }

    /// The scene advanced by `fraction` of the interval.
    pub fn render_view(&self, fraction: f64, azimuth: f64, elevation: f64) -> Image {
        let field = self.scene.field.advance(fraction.clamp(0.0, 1.0)).expect("clamped fraction");
        render(&field, &Self::orbit_camera(azimuth, elevation), &self.render).image
    }

    /// The gripper drawn at `pose ∘ action`, with `action` a body-frame
    /// translation plus a yaw in degrees, over the current render. Masked
    /// pixels are tinted green.
    pub fn guidance(&self, azimuth: f64, elevation: f64, translation: [f64; 3], yaw: f64) -> Image {
        let scene = GuidanceScene {
            field: self.scene.field.clone(),
            gripper_pose: self.scene.gripper_pose,
            cameras: vec![Self::orbit_camera(azimuth, elevation)],
            primitive: self.scene.primitive.clone(),
            render: self.render,
        };
        let action = Se3::new(Quaternion::from_axis_angle(Vector3::z(), yaw.to_radians()), Vector3::from(translation));
        let mut view = render_action_guidance(&scene, &action).remove(0);
        for (i, &m) in view.mask.iter().enumerate() {
            if m {
                for (ch, target) in [0.1, 1.0, 0.2].into_iter().enumerate() {
                    let v = &mut view.image.data[3 * i + ch];
                    *v = (1.0 - MASK_TINT) * *v + MASK_TINT * target;
                }
            }
        }
        view.image
    }

    /// Body-frame gripper motion over the interval as `HORIZON` actions.
    pub fn target_action(&self) -> ActionVector {
        let init = InitAction::from_total(&self.scene.gripper_motion, HORIZON).expect("positive horizon");
        ActionSequence::from_init(&init, &self.scene.gripper_pose, 1.0).to_vector().expect("small motion")
    }

    /// Deterministic DDIM sampling over `levels` strided levels with an
    /// oracle for the true motion, starting from noise drawn from `seed`.
    /// One row per state: level, ᾱ, total translation (x, y, z), total
    /// rotation in degrees, and the distance of the state's clean estimate
    /// from the target. The last row is the returned clean action.
    pub fn trajectory(&self, levels: usize, seed: u64) -> Vec<[f64; TRAJECTORY_COLUMNS]> {
        let schedule = DenoiseSchedule::cosine(TRAINING_LEVELS).expect("valid schedule").strided(levels.clamp(1, TRAINING_LEVELS)).expect("valid stride");
        let target = self.target_action();
        let goal = target.total();
        let oracle = OracleDenoiser { target: target.clone() };
        let (mut x, _) = add_noise(&target, schedule.len() - 1, &schedule, seed).expect("top level exists");
        let row = |level: usize, steps: &[[f64; 6]], estimate: &[[f64; 6]]| {
            let total = ActionVector { steps: steps.to_vec(), gripper: vec![] }.total();
            let (_, miss) = ActionVector { steps: estimate.to_vec(), gripper: vec![] }.total().distance(&goal);
            let t = total.translation;
            [level as f64, schedule.alpha_bar(level).expect("level in range"), t.x, t.y, t.z, total.rotation_angle().to_degrees(), miss]
        };
        let mut rows = Vec::with_capacity(schedule.len() + 1);
        loop {
            let eps = oracle.denoise(&x, &[], &schedule).expect("matching horizon").noise;
            let estimate = predict_clean(&x, &eps, &schedule).expect("matching horizon");
            rows.push(row(x.level, &x.action.steps, &estimate));
            if x.level == 0 {
                rows.push(row(0, &estimate, &estimate));
                break;
            }
            x = ddim_step(&x, &eps, &schedule).expect("positive level").0;
        }
        rows
    }
}

impl Default for DemoScene {
    fn default() -> Self {
        Self::new()
    }
}

/// RGBA bytes for a canvas `ImageData`.
pub fn to_rgba(img: &Image) -> Vec<u8> {
    img.to_rgb8().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

#[wasm_bindgen]
pub struct Demo {
    inner: DemoScene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Demo {
        Demo { inner: DemoScene::new() }
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        VIEW_SIZE
    }

    /// RGBA render at time `fraction` of the interval.
    pub fn render(&self, fraction: f64, azimuth: f64, elevation: f64) -> Vec<u8> {
        to_rgba(&self.inner.render_view(fraction, azimuth, elevation))
    }

    /// RGBA guidance overlay for a body-frame translation and yaw.
    pub fn guidance(&self, azimuth: f64, elevation: f64, dx: f64, dy: f64, dz: f64, yaw: f64) -> Vec<u8> {
        to_rgba(&self.inner.guidance(azimuth, elevation, [dx, dy, dz], yaw))
    }

    /// Flattened trajectory rows of `TRAJECTORY_COLUMNS` values each.
    pub fn trajectory(&self, levels: usize, seed: u32) -> Vec<f64> {
        self.inner.trajectory(levels, seed as u64).into_iter().flatten().collect()
    }

    #[wasm_bindgen(getter)]
    pub fn trajectory_columns(&self) -> usize {
        TRAJECTORY_COLUMNS
    }
}

impl Default for Demo {
    fn default() -> Self {
        Self::new()
    }
}
