use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gaf_core::action::{compute_init_action, IcpConfig};
use gaf_core::error::{ActionError, FieldError, FitError, GeometryError, HarnessError, RefineError};
use gaf_core::field::{GaussianField, GRIPPER_LABEL};
use gaf_core::fitter::{fit, history_csv, FitConfig, SupervisionSet, View};
use gaf_core::geometry::Se3;
use gaf_core::harness::{
    generate_scene, perturbed_init, random_goal, run_episode, sweep, sweep_csv, train_ridge, uniform_init, DenoiserKind, EpisodeConfig, GoalGrid, GoalSampler, Jitter,
    Perception, SceneSpec, RIDGE_TRAINING_EXAMPLES,
};
use gaf_core::image::{compute_psnr, compute_ssim, Image};
use gaf_core::refine::{GuidanceImage, RidgeDenoiser};
use gaf_core::renderer::render;
use serde::{Deserialize, Serialize};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "gaf", version, about = "Gaussian action fields: fit dynamic scenes, extract and refine gripper actions, run closed-loop episodes")]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene: ground-truth field and supervision images.
    GenScene(GenSceneArgs),
    /// Fit a field to a generated scene directory.
    Fit(FitArgs),
    /// Register the gripper Gaussians of a field file and write the action sequence.
    ExtractAction(ExtractArgs),
    /// Run one closed-loop episode toward a random goal.
    Loop(LoopArgs),
    /// Run one episode per cell of a goal grid.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenSceneArgs {
    /// Scene description (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the scene description.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Scene directory written by gen-scene.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fit options (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Seed of the initialization.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Field file (GAF1).
    #[arg(long)]
    field: PathBuf,
    #[arg(long, default_value_t = 8)]
    horizon: usize,
    /// Label of the gripper Gaussians.
    #[arg(long, default_value_t = GRIPPER_LABEL)]
    label: u8,
    /// Action JSON path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Gt,
    Fitted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DenoiserArg {
    Oracle,
    Ridge,
}

#[derive(Args, Debug)]
struct EpisodeArgs {
    /// Scene description (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Episode options (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Fit iterations per cycle in fitted mode.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    denoiser: Option<DenoiserArg>,
}

#[derive(Args, Debug)]
struct LoopArgs {
    #[command(flatten)]
    episode: EpisodeArgs,
    /// Write the guidance overlay of every refinement iteration as PPM.
    #[arg(long)]
    dump_guidance: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    episode: EpisodeArgs,
    /// Grid size as NXxNY.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected NXxNY, got {s}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|n| *n > 0).ok_or_else(|| format!("grid sizes must be positive integers, got {s}"));
    Ok((parse(a)?, parse(b)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum InitKind {
    /// Ground-truth field with jittered parameters and zero displacement.
    #[default]
    Perturbed,
    /// Gaussians scattered uniformly in the scene bounds.
    Uniform,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct InitConfig {
    kind: InitKind,
    jitter: Jitter,
    /// Gaussian count for uniform initialization; defaults to the scene's.
    count: Option<usize>,
    seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FitRun {
    fit: FitConfig,
    init: InitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EpisodeRun {
    episode: EpisodeConfig,
    goals: GoalSampler,
    /// Seed of the goal; defaults to the episode seed.
    goal_seed: Option<u64>,
    ridge_examples: usize,
    ridge_seed: u64,
    grid: Option<GoalGrid>,
}

impl Default for EpisodeRun {
    fn default() -> Self {
        EpisodeRun { episode: EpisodeConfig::default(), goals: GoalSampler::default(), goal_seed: None, ridge_examples: RIDGE_TRAINING_EXAMPLES, ridge_seed: 1, grid: None }
    }
}

/// An error together with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Failure { code: if is_numerical(&error) { EXIT_NUMERICAL } else { EXIT_USAGE }, error }
    }
}

fn is_numerical(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<HarnessError>().is_some_and(HarnessError::is_numerical)
            || c.downcast_ref::<FitError>().is_some_and(FitError::is_numerical)
            || c.downcast_ref::<ActionError>().is_some_and(ActionError::is_numerical)
            || c.downcast_ref::<RefineError>().is_some_and(RefineError::is_numerical)
            || c.downcast_ref::<GeometryError>().is_some_and(GeometryError::is_numerical)
    })
}

type Outcome = Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn view_name(split: &str, index: usize, timestep: usize) -> String {
    format!("{split}_{index}_t{timestep}.ppm")
}

fn write_views(dir: &Path, split: &str, set: &SupervisionSet) -> anyhow::Result<()> {
    for (t, views) in [&set.current, &set.future].into_iter().enumerate() {
        for (i, v) in views.iter().enumerate() {
            let path = dir.join(view_name(split, i, t));
            v.image.save_ppm(&path).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Truth {
    gripper_pose: PoseJson,
    gripper_motion: PoseJson,
}

#[derive(Serialize)]
struct PoseJson {
    q: [f64; 4],
    t: [f64; 3],
}

impl From<&Se3> for PoseJson {
    fn from(p: &Se3) -> Self {
        PoseJson { q: p.rotation.to_array(), t: [p.translation.x, p.translation.y, p.translation.z] }
    }
}

fn cmd_gen_scene(args: &GenSceneArgs) -> Outcome {
    let mut spec: SceneSpec = read_json(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let scene = generate_scene(&spec)?;
    let views = args.out.join("views");
    create_dir(&views)?;
    write_json(&args.out.join("scene.json"), &spec)?;
    scene.field.save(args.out.join("field.gaf")).context("writing field.gaf")?;
    write_json(&args.out.join("truth.json"), &Truth { gripper_pose: (&scene.gripper_pose).into(), gripper_motion: (&scene.gripper_motion).into() })?;
    write_views(&views, "train", &scene.supervision)?;
    write_views(&views, "holdout", &scene.holdout)?;
    println!(
        "wrote {} gaussians and {} views to {}",
        scene.field.len(),
        2 * (scene.supervision.current.len() + scene.holdout.current.len()),
        args.out.display()
    );
    Ok(())
}

fn load_views(dir: &Path, split: &str, cameras: Vec<gaf_core::geometry::Camera>) -> anyhow::Result<SupervisionSet> {
    let mut set = SupervisionSet { current: Vec::new(), future: Vec::new() };
    for (i, camera) in cameras.into_iter().enumerate() {
        for t in 0..2 {
            let path = dir.join(view_name(split, i, t));
            let image = Image::load_ppm(&path).map_err(|e| anyhow!("reading {}: {e}", path.display()))?;
            let view = View { camera, image };
            if t == 0 { set.current.push(view) } else { set.future.push(view) }
        }
    }
    Ok(set)
}

struct ViewMetrics {
    split: &'static str,
    index: usize,
    current: (f64, f64),
    future: (f64, f64),
}

fn evaluate(field: &GaussianField, set: &SupervisionSet, split: &'static str, fit: &FitConfig) -> anyhow::Result<Vec<ViewMetrics>> {
    let cfg = fit.render_config();
    let future = field.advance(1.0)?;
    let score = |f: &GaussianField, v: &View| -> anyhow::Result<(f64, f64)> {
        let img = render(f, &v.camera, &cfg).image;
        Ok((compute_psnr(&img, &v.image)?, compute_ssim(&img, &v.image)?))
    };
    set.current
        .iter()
        .zip(&set.future)
        .enumerate()
        .map(|(index, (now, next))| Ok(ViewMetrics { split, index, current: score(field, now)?, future: score(&future, next)? }))
        .collect()
}

fn cmd_fit(args: &FitArgs) -> Outcome {
    let mut run: FitRun = match &args.config {
        Some(p) => read_json(p)?,
        None => FitRun::default(),
    };
    let spec: SceneSpec = read_json(&args.spec.join("scene.json"))?;
    spec.validate()?;
    if let Some(n) = args.iterations {
        run.fit.iterations = n;
    }
    if let Some(seed) = args.seed {
        run.init.seed = seed;
    }
    run.fit.background = spec.background;
    let views = args.spec.join("views");
    let supervision = load_views(&views, "train", spec.supervision_cameras()?)?;
    let holdout = load_views(&views, "holdout", spec.holdout_cameras()?)?;
    let reference = GaussianField::load(args.spec.join("field.gaf")).context("reading field.gaf")?;
    let init = match run.init.kind {
        InitKind::Perturbed => perturbed_init(&reference, &run.init.jitter, run.init.seed),
        InitKind::Uniform => uniform_init(&reference, &spec.bounds, run.init.count.unwrap_or(reference.len()), run.init.seed),
    };
    create_dir(&args.out)?;
    let result = match fit(&init, &supervision, &run.fit) {
        Ok(r) => r,
        Err(FitError::Diverged { iteration, loss, history }) => {
            fs::write(args.out.join("loss.csv"), history_csv(&history)).context("writing loss.csv")?;
            return Err(FitError::Diverged { iteration, loss, history }.into());
        }
        Err(e) => return Err(e.into()),
    };
    fs::write(args.out.join("loss.csv"), history_csv(&result.history)).context("writing loss.csv")?;
    result.field.save(args.out.join("fitted.gaf")).context("writing fitted.gaf")?;
    let mut rows = evaluate(&result.field, &supervision, "train", &run.fit)?;
    rows.extend(evaluate(&result.field, &holdout, "holdout", &run.fit)?);
    let mut csv = String::from("split,view,current_psnr,current_ssim,future_psnr,future_ssim\n");
    println!("{:<10} {:>13} {:>13} {:>13} {:>13}", "view", "PSNR (t)", "SSIM (t)", "PSNR (t+dt)", "SSIM (t+dt)");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.split, r.index, r.current.0, r.current.1, r.future.0, r.future.1));
        println!("{:<10} {:>13.2} {:>13.4} {:>13.2} {:>13.4}", format!("{}{}", r.split, r.index), r.current.0, r.current.1, r.future.0, r.future.1);
    }
    fs::write(args.out.join("metrics.csv"), csv).context("writing metrics.csv")?;
    if let Some(last) = result.history.last() {
        println!("final loss {:.6e} after {} iterations", last.total, result.history.len());
    }
    Ok(())
}

fn cmd_extract(args: &ExtractArgs) -> Outcome {
    let field = GaussianField::load(&args.field).map_err(|e| match e {
        FieldError::Io(io) => anyhow!("reading {}: {io}", args.field.display()),
        other => anyhow!("reading {}: {other}", args.field.display()),
    })?;
    let (action, registration) = compute_init_action(&field, args.label, args.horizon, &IcpConfig::default())?;
    let json = serde_json::to_string_pretty(&action).map_err(anyhow::Error::from)? + "\n";
    match &args.out {
        Some(path) => {
            fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
            let total = registration.transform;
            println!(
                "{} steps; total rotation {:.4} deg, translation [{:.6}, {:.6}, {:.6}]; rms {:.3e} after {} iterations",
                action.horizon,
                total.rotation_angle().to_degrees(),
                total.translation.x,
                total.translation.y,
                total.translation.z,
                registration.rms,
                registration.iterations
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn episode_setup(args: &EpisodeArgs) -> Result<(SceneSpec, EpisodeRun, Option<RidgeDenoiser>), Failure> {
    let spec: SceneSpec = read_json(&args.spec)?;
    let mut run: EpisodeRun = match &args.config {
        Some(p) => read_json(p)?,
        None => EpisodeRun::default(),
    };
    let ep = &mut run.episode;
    if let Some(seed) = args.seed {
        ep.seed = seed;
    }
    if let Some(h) = args.horizon {
        ep.horizon = h;
    }
    if let Some(n) = args.iterations {
        ep.fit.iterations = n;
    }
    if let Some(m) = args.mode {
        ep.perception = match m {
            ModeArg::Gt => Perception::GroundTruth,
            ModeArg::Fitted => Perception::Fitted,
        };
    }
    if let Some(d) = args.denoiser {
        ep.denoiser = match d {
            DenoiserArg::Oracle => DenoiserKind::Oracle,
            DenoiserArg::Ridge => DenoiserKind::Ridge,
        };
    }
    ep.validate()?;
    spec.validate()?;
    let ridge = match ep.denoiser {
        DenoiserKind::Ridge => {
            if run.ridge_examples == 0 {
                return Err(anyhow!("ridge_examples must be positive").into());
            }
            Some(train_ridge(&spec, ep, run.ridge_examples, run.ridge_seed)?)
        }
        DenoiserKind::Oracle => None,
    };
    Ok((spec, run, ridge))
}

fn cmd_loop(args: &LoopArgs) -> Outcome {
    let (spec, run, ridge) = episode_setup(&args.episode)?;
    let out = &args.episode.out;
    create_dir(out)?;
    let goal = random_goal(&spec.gripper.pose, &run.goals, run.goal_seed.unwrap_or(run.episode.seed));
    let guidance_dir = out.join("guidance");
    let mut dumped: Vec<(PathBuf, Image)> = Vec::new();
    let mut sink = |cycle: usize, iterations: &[Vec<GuidanceImage>]| {
        for (k, views) in iterations.iter().enumerate() {
            for (c, g) in views.iter().enumerate() {
                dumped.push((guidance_dir.join(format!("cycle{cycle:02}_iter{k}_cam{c}.ppm")), g.image.clone()));
            }
        }
    };
    let report = if args.dump_guidance {
        run_episode(&spec, &run.episode, &goal, ridge.as_ref(), Some(&mut sink))?
    } else {
        run_episode(&spec, &run.episode, &goal, ridge.as_ref(), None)?
    };
    if args.dump_guidance {
        create_dir(&guidance_dir)?;
        for (path, img) in &dumped {
            img.save_ppm(path).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    fs::write(out.join("report.csv"), report.to_csv()).context("writing report.csv")?;
    println!(
        "{} after {} cycles: rotation error {:.4} deg, translation error {:.5}",
        if report.success { "success" } else { "failure" },
        report.steps,
        report.rotation_error_deg,
        report.translation_error
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Outcome {
    let (spec, run, ridge) = episode_setup(&args.episode)?;
    let start = spec.gripper.pose.translation;
    let mut grid = run.grid.unwrap_or(GoalGrid { nx: 3, ny: 3, min: [start.x - 0.2, start.y - 0.2], max: [start.x + 0.2, start.y + 0.2], z: start.z });
    if let Some((nx, ny)) = args.grid {
        grid.nx = nx;
        grid.ny = ny;
    }
    if grid.nx == 0 || grid.ny == 0 {
        return Err(anyhow!("grid sizes must be positive").into());
    }
    let corners = [grid.goal(0, 0, &spec.gripper.pose), grid.goal(grid.nx - 1, grid.ny - 1, &spec.gripper.pose)];
    if corners.iter().any(|g| !spec.bounds.contains(&g.translation)) {
        return Err(anyhow!("goal grid leaves the scene bounds").into());
    }
    let cells = sweep(&spec, &run.episode, &grid, ridge.as_ref())?;
    create_dir(&args.episode.out)?;
    fs::write(args.episode.out.join("sweep.csv"), sweep_csv(&cells)).context("writing sweep.csv")?;
    let ok = cells.iter().filter(|c| c.report.success).count();
    println!("{ok}/{} cells succeeded", cells.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match &cli.command {
        Command::GenScene(a) => cmd_gen_scene(a),
        Command::Fit(a) => cmd_fit(a),
        Command::ExtractAction(a) => cmd_extract(a),
        Command::Loop(a) => cmd_loop(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
