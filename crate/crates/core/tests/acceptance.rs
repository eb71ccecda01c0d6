//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::time::{Duration, Instant};

use gaf_core::action::{compute_init_action, icp, IcpConfig, InitAction};
use gaf_core::field::{GaussianField, GRIPPER_LABEL};
use gaf_core::fitter::{fit, FitConfig, SupervisionSet};
use gaf_core::geometry::{Camera, Quaternion, Se3};
use gaf_core::harness::{generate_scene, perturbed_init, random_goal, run_episode, sweep, sweep_csv, train_ridge, DenoiserKind, EpisodeConfig, GoalGrid, GoalSampler, Jitter, Perception, SceneSpec, RIDGE_TRAINING_EXAMPLES};
use gaf_core::image::{compute_psnr, Image};
use gaf_core::refine::{add_noise, ddim_step, predict_clean, refine_loss, ActionSequence, ActionVector, DenoiseSchedule, Denoiser, OracleDenoiser, TRAINING_LEVELS};
use gaf_core::renderer::{render, render_reference, RenderConfig};
use gaf_core::testing::{gradient_check, random_scene, random_weights, small_camera};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_transform(rng: &mut impl Rng, max_angle: f64, max_translation: f64) -> Se3 {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let dir = loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 1e-3 && v.norm() <= 1.0 {
            break v.normalize();
        }
    };
    Se3::new(Quaternion::from_axis_angle(axis, rng.random_range(0.0..=max_angle)), dir * rng.random_range(0.0..=max_translation))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cam = small_camera();
    let cfg = RenderConfig::with_background([0.1, 0.2, 0.3]);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let scenes = 100;
    for _ in 0..scenes {
        let mut field = random_scene(rng.random_range(1..=10), &mut rng);
        for p in &mut field.points {
            p.disp = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
        }
        let weights = random_weights(cam.width, cam.height, &mut rng);
        let check = gradient_check(&field, &cam, &cfg, &weights, 1e-4, 1e-6);
        worst = worst.max(check.max_rel_error);
        checked += check.checked;
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-3 && elapsed < Duration::from_secs(120),
        format!("{scenes} scenes, {checked} parameters, max rel error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let cfg = RenderConfig::with_background([0.05, 0.1, 0.15]);
    let wide = Camera::new(24.0, 24.0, 12.0, 12.0, 24, 24, Se3::identity()).expect("valid camera");
    let mut worst = 0.0f64;
    let mut permutation_exact = true;
    for s in 0..50 {
        let cam = if s % 2 == 0 { small_camera() } else { wide };
        let field = random_scene(rng.random_range(1..=30), &mut rng);
        let fast = render(&field, &cam, &cfg).image;
        let slow = render_reference(&field, &cam, &cfg).image;
        worst = fast.data.iter().zip(&slow.data).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        let mut shuffled = field.points.clone();
        shuffled.shuffle(&mut rng);
        permutation_exact &= render(&GaussianField::new(shuffled), &cam, &cfg).image == fast;
    }
    outcome(worst <= 1e-6 && permutation_exact, format!("50 scenes, max channel difference {worst:.2e}, permutation bit-exact: {permutation_exact}"))
}

struct FitSummary {
    train_psnr: f64,
    holdout_psnr: f64,
    iterations: usize,
    elapsed: Duration,
    disp_error: f64,
    icp_rotation_deg: f64,
    icp_translation: f64,
}

fn min_psnr(field: &GaussianField, set: &SupervisionSet, cfg: &RenderConfig) -> f64 {
    let future = field.advance(1.0).expect("unit fraction");
    let current = set.current.iter().map(|v| compute_psnr(&render(field, &v.camera, cfg).image, &v.image).expect("same size"));
    let next = set.future.iter().map(|v| compute_psnr(&render(&future, &v.camera, cfg).image, &v.image).expect("same size"));
    current.chain(next).fold(f64::INFINITY, f64::min)
}

fn dynamic_fit() -> Result<FitSummary, String> {
    let spec = SceneSpec::benchmark();
    let scene = generate_scene(&spec).map_err(|e| e.to_string())?;
    let init = perturbed_init(&scene.field, &Jitter::default(), 5);
    let cfg = FitConfig { background: spec.background, ..FitConfig::default() };
    let start = Instant::now();
    let result = fit(&init, &scene.supervision, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let rcfg = spec.render_config();
    let errors: Vec<f64> = result
        .field
        .points
        .iter()
        .zip(&scene.field.points)
        .filter(|(p, _)| p.label == GRIPPER_LABEL)
        .map(|(p, q)| (p.disp - q.disp).norm())
        .collect();
    let (_, registration) = compute_init_action(&result.field, GRIPPER_LABEL, 8, &IcpConfig::default()).map_err(|e| e.to_string())?;
    let (angle, dist) = registration.transform.distance(&scene.gripper_motion);
    Ok(FitSummary {
        train_psnr: min_psnr(&result.field, &scene.supervision, &rcfg),
        holdout_psnr: min_psnr(&result.field, &scene.holdout, &rcfg),
        iterations: result.history.len(),
        elapsed,
        disp_error: errors.iter().sum::<f64>() / errors.len() as f64,
        icp_rotation_deg: angle.to_degrees(),
        icp_translation: dist,
    })
}

fn icp_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let trials = 100;
    let mut clean_ok = 0;
    let mut noisy_rot = Vec::new();
    let mut noisy_trans = Vec::new();
    let noise = Normal::new(0.0, 0.005).expect("positive deviation");
    for _ in 0..trials {
        let src: Vec<Vector3<f64>> =
            (0..150).map(|_| Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.15..0.15), rng.random_range(-0.1..0.25))).collect();
        let truth = random_transform(&mut rng, 20f64.to_radians(), 0.1);
        let mut dst: Vec<Vector3<f64>> = src.iter().map(|p| truth.apply(p)).collect();
        dst.shuffle(&mut rng);
        let (angle, dist) = icp(&src, &dst, &IcpConfig::default()).expect("well-posed").transform.distance(&truth);
        if angle.to_degrees() <= 0.5 && dist <= 1e-3 {
            clean_ok += 1;
        }
        let noisy: Vec<Vector3<f64>> = dst.iter().map(|p| p + Vector3::from_fn(|_, _| noise.sample(&mut rng))).collect();
        let (angle, dist) = icp(&src, &noisy, &IcpConfig::default()).expect("well-posed").transform.distance(&truth);
        noisy_rot.push(angle.to_degrees());
        noisy_trans.push(dist);
    }
    let p95 = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[(0.95 * v.len() as f64).ceil() as usize - 1]
    };
    let (r95, t95) = (p95(&mut noisy_rot), p95(&mut noisy_trans));
    outcome(
        clean_ok == trials && r95 <= 2.0 && t95 <= 0.01,
        format!("noiseless {clean_ok}/{trials} within 0.5 deg/1e-3; noisy p95 {r95:.3} deg, {t95:.4}"),
    )
}

fn interpolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut endpoints = true;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = random_transform(&mut rng, 3.0, 1.0);
        endpoints &= t.interpolate(0.0).expect("in range") == Se3::identity() && t.interpolate(1.0).expect("in range") == t;
        let horizon = rng.random_range(1..=16);
        let (angle, dist) = InitAction::from_total(&t, horizon).expect("positive horizon").total().distance(&t);
        worst = worst.max(angle).max(dist);
    }
    outcome(endpoints && worst < 1e-8, format!("1000 transforms, endpoints exact: {endpoints}, max composition error {worst:.2e}"))
}

fn ddim_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let base = DenoiseSchedule::cosine(TRAINING_LEVELS).expect("valid schedule");
    let mut worst = 0.0f64;
    for k in [1, 3, 50] {
        let schedule = base.strided(k).expect("valid stride");
        for trial in 0..20 {
            let clean = ActionVector {
                steps: (0..8).map(|_| std::array::from_fn(|_| rng.random_range(-0.3..0.3))).collect(),
                gripper: (0..8).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
            };
            let oracle = OracleDenoiser { target: clean.clone() };
            let (mut x, _) = add_noise(&clean, k - 1, &schedule, trial).expect("level in range");
            let recovered = loop {
                let eps = oracle.denoise(&x, &[], &schedule).expect("matching shape").noise;
                if x.level == 0 {
                    break predict_clean(&x, &eps, &schedule).expect("matching shape");
                }
                x = ddim_step(&x, &eps, &schedule).expect("positive level").0;
            };
            worst = recovered.iter().flatten().zip(clean.flat()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    let level = 25;
    let a = base.alpha_bar(level).expect("level in range");
    let clean = ActionVector { steps: vec![[0.1, -0.2, 0.3, 0.05, 0.0, -0.1]], gripper: vec![0.0] };
    let samples = 100_000;
    let mut sum = [0.0; 6];
    let mut sq = [0.0; 6];
    for seed in 0..samples {
        let (x, _) = add_noise(&clean, level, &base, seed).expect("level in range");
        for i in 0..6 {
            let v = x.action.steps[0][i] - a.sqrt() * clean.steps[0][i];
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let expected = 1.0 - a;
    let worst_var = (0..6)
        .map(|i| {
            let mean = sum[i] / samples as f64;
            ((sq[i] / samples as f64 - mean * mean) / expected - 1.0).abs()
        })
        .fold(0.0, f64::max);
    outcome(
        worst < 1e-9 && worst_var < 0.02,
        format!("oracle recovery max error {worst:.2e} for K in {{1, 3, 50}}; variance relative error {:.3}% at level {level}", 100.0 * worst_var),
    )
}

fn refine_loss_checks() -> Outcome {
    let bce = refine_loss(&[], &[], &[], &[], &[0.5], &[1.0]).expect("matching lengths").gripper;
    let bce_ok = (bce - std::f64::consts::LN_2).abs() < 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut worst = 0.0f64;
    let h = 1e-6;
    for _ in 0..50 {
        let n = rng.random_range(1..=24);
        let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (d, d_gt, e, e_gt) = (vec(&mut rng), vec(&mut rng), vec(&mut rng), vec(&mut rng));
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let g_gt: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let base = refine_loss(&d, &d_gt, &e, &e_gt, &g, &g_gt).expect("matching lengths");
        let inputs = [(&d, &base.grad_direction, 0), (&e, &base.grad_noise, 1), (&g, &base.grad_gripper, 2)];
        for (values, grads, which) in inputs {
            for i in 0..n {
                let eval = |delta: f64| {
                    let mut v = values.clone();
                    v[i] += delta;
                    let (dd, ee, gg) = match which {
                        0 => (&v, &e, &g),
                        1 => (&d, &v, &g),
                        _ => (&d, &e, &v),
                    };
                    refine_loss(dd, &d_gt, ee, &e_gt, gg, &g_gt).expect("matching lengths").total
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (grads[i] - numeric).abs() / grads[i].abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    outcome(bce_ok && worst < 1e-4, format!("BCE(0.5, 1) = {bce:.7}, max gradient rel error {worst:.2e}"))
}

fn closed_loop() -> Outcome {
    let spec = SceneSpec::episode();
    let sampler = GoalSampler::default();
    let episodes = 100;
    let gt_cfg = EpisodeConfig::default();
    let mut gt_ok = 0;
    for i in 0..episodes {
        let goal = random_goal(&spec.gripper.pose, &sampler, 1000 + i);
        let report = run_episode(&spec, &EpisodeConfig { seed: i, ..gt_cfg.clone() }, &goal, None, None).expect("valid episode");
        if report.success && report.steps <= gt_cfg.budget {
            gt_ok += 1;
        }
    }
    let fitted_cfg = EpisodeConfig { perception: Perception::Fitted, denoiser: DenoiserKind::Ridge, ..EpisodeConfig::default() };
    let ridge = train_ridge(&spec, &fitted_cfg, RIDGE_TRAINING_EXAMPLES, 1).expect("trainable");
    let mut fitted_ok = 0;
    for i in 0..episodes {
        let goal = random_goal(&spec.gripper.pose, &sampler, 2000 + i);
        let report = run_episode(&spec, &EpisodeConfig { seed: i, ..fitted_cfg.clone() }, &goal, Some(&ridge), None).expect("valid episode");
        if report.success {
            fitted_ok += 1;
        }
    }
    let grid = GoalGrid { nx: 3, ny: 3, min: [-0.2, -0.2], max: [0.2, 0.2], z: 0.2 };
    let csv_with = |threads: usize, cfg: &EpisodeConfig, grid: &GoalGrid| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        pool.install(|| sweep_csv(&sweep(&spec, cfg, grid, Some(&ridge)).expect("valid sweep")))
    };
    let gt_sweep = csv_with(1, &gt_cfg, &grid);
    let gt_all = gt_sweep.lines().skip(1).all(|l| l.split(',').nth(5) == Some("true"));
    let small = GoalGrid { nx: 2, ny: 1, ..grid };
    let reproducible = gt_sweep == csv_with(4, &gt_cfg, &grid) && csv_with(1, &fitted_cfg, &small) == csv_with(3, &fitted_cfg, &small);
    outcome(
        gt_ok == episodes && fitted_ok >= 95 && gt_all && reproducible,
        format!("GT+oracle {gt_ok}/{episodes}, fitted+ridge {fitted_ok}/{episodes}, 3x3 GT sweep all success: {gt_all}, sweep CSV bit-identical across runs and thread counts: {reproducible}"),
    )
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let scene = generate_scene(&SceneSpec::benchmark()).expect("valid spec");
    let field = scene.field.quantized();
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("scene.gaf");
    field.save(&path).expect("writable");
    let loaded = GaussianField::load(&path).expect("readable");
    let mut again = Vec::new();
    loaded.write_to(&mut again).expect("in-memory write");
    let gaf_ok = loaded == field && again == std::fs::read(&path).expect("readable");

    let mut img = random_weights(17, 9, &mut rng);
    img.data.iter_mut().for_each(|v| *v = v.abs());
    let bytes = img.encode_ppm();
    let decoded = Image::decode_ppm(&bytes).expect("valid ppm");
    let ppm_ok = decoded.encode_ppm() == bytes && Image::decode_ppm(&decoded.encode_ppm()).expect("valid ppm") == decoded;

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = random_transform(&mut rng, 1.0, 0.3);
        let init = InitAction::from_total(&t, 8).expect("positive horizon");
        let back: InitAction = serde_json::from_str(&serde_json::to_string(&init).expect("serializable")).expect("parsable");
        let seq = ActionSequence::from_init(&init, &Se3::identity(), 1.0);
        let seq_back: ActionSequence = serde_json::from_str(&serde_json::to_string(&seq).expect("serializable")).expect("parsable");
        for (a, b) in init.steps.iter().zip(&back.steps).chain(seq.steps.iter().map(|s| &s.pose).zip(seq_back.steps.iter().map(|s| &s.pose))) {
            let qa = a.rotation.to_array();
            let qb = b.rotation.to_array();
            worst = (0..4).map(|i| (qa[i] - qb[i]).abs()).chain((0..3).map(|i| (a.translation[i] - b.translation[i]).abs())).fold(worst, f64::max);
        }
        worst = seq.steps.iter().zip(&seq_back.steps).map(|(a, b)| (a.gripper - b.gripper).abs()).fold(worst, f64::max);
    }
    outcome(gaf_ok && ppm_ok && worst <= 1e-12, format!("GAF1 bit-exact: {gaf_ok}, PPM bit-exact: {ppm_ok}, action JSON max error {worst:.1e}"))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, o: Outcome| {
        println!("criterion {id:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failures += 1;
        }
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "renderer oracle equivalence", oracle_equivalence());
    match dynamic_fit() {
        Ok(s) => {
            report(
                3,
                "dynamic fit",
                outcome(
                    s.train_psnr >= 30.0 && s.holdout_psnr >= 25.0 && s.iterations <= 2000 && s.elapsed < Duration::from_secs(600),
                    format!("min training PSNR {:.2} dB, held-out PSNR {:.2} dB, {} iterations, {:.1}s", s.train_psnr, s.holdout_psnr, s.iterations, s.elapsed.as_secs_f64()),
                ),
            );
            report(
                4,
                "motion recovery",
                outcome(
                    s.disp_error < 0.05 && s.icp_rotation_deg < 1.0 && s.icp_translation < 0.01,
                    format!("mean gripper displacement error {:.4}, ICP error {:.3} deg / {:.4}", s.disp_error, s.icp_rotation_deg, s.icp_translation),
                ),
            );
        }
        Err(e) => {
            report(3, "dynamic fit", outcome(false, e.clone()));
            report(4, "motion recovery", outcome(false, e));
        }
    }
    report(5, "ICP suite", icp_suite());
    report(6, "interpolation", interpolation());
    report(7, "DDIM identities", ddim_identities());
    report(8, "refine loss", refine_loss_checks());
    report(9, "closed loop", closed_loop());
    report(10, "format round-trips", round_trips());
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
