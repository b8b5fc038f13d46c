//! Command-line front end: argument definitions and one `run_*` function per
//! subcommand. Every `run_*` returns the process exit code on success and an
//! error for I/O or parse failures, which `main` reports with exit code 2.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapefit::geometry::Pose;
use shapefit::io::{self, BundleFile, DetectionEntry, DetectionFile, FrameBundle, ResultRecord};
use shapefit::oracle::{self, OracleSetup};
use shapefit::priors::GroundPlane;
use shapefit::shape::{build_model, ShapeModel};
use shapefit::solver::{fit_frame, SolverConfig};
use shapefit::synth::{self, SceneCamera, SyntheticScene};
use shapefit::{Error, Result};

/// Exit code when at least one instance failed to fit.
pub const EXIT_INSTANCE_FAILED: i32 = 1;
/// Exit code for unreadable inputs and other fatal errors.
pub const EXIT_FATAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "shapefit", version, about = "Stereo pose and shape refinement of vehicles")]
pub struct Cli {
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Refine pose and shape of every detection in a stereo frame.
    Refine(Box<RefineArgs>),
    /// Render a synthetic frame and write it as an input bundle.
    Synth(SynthArgs),
    /// Build a PCA shape model from exemplar grids.
    BuildModel(BuildModelArgs),
    /// Compare analytic Jacobians with finite differences.
    CheckJacobians(CheckJacobiansArgs),
    /// Completeness, accuracy and RMSE of one point cloud against another.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Bundle file naming calibration, images, detections and plane.
    #[arg(long, conflicts_with_all = ["calib", "left", "right", "detections"])]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub left: Option<PathBuf>,
    #[arg(long)]
    pub right: Option<PathBuf>,
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Ground plane file; overrides the bundle's.
    #[arg(long)]
    pub plane: Option<PathBuf>,
    /// Shape model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Solver configuration (TOML, keys of the solver configuration).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also write the left image with fitted contours.
    #[arg(long)]
    pub overlay: bool,
    /// Also write each fitted surface as an xyz point cloud.
    #[arg(long)]
    pub export_clouds: bool,
    /// Distance threshold for the shape metrics, meters.
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
}

/// Flags that take precedence over the configuration file.
#[derive(Debug, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub lambda_shape: Option<f64>,
    #[arg(long)]
    pub lambda_photo: Option<f64>,
    /// Drop the right-image silhouette term.
    #[arg(long)]
    pub left_silhouette_only: bool,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut SolverConfig) {
        if let Some(v) = self.zeta {
            cfg.zeta = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.max_iterations = v;
        }
        if let Some(v) = self.lambda_shape {
            cfg.lambda_shape = v;
        }
        if let Some(v) = self.lambda_photo {
            cfg.lambda_photo = v;
        }
        if self.left_silhouette_only {
            cfg.use_right_silhouette = false;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// One sphere, one-component model.
    Sphere,
    /// One car from the built-in exemplar set.
    Car,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Shape components of the car model.
    #[arg(short, long, default_value_t = 3)]
    pub k: usize,
    /// Largest translation offset of the initial pose, meters.
    #[arg(long, default_value_t = 0.0)]
    pub perturb_translation: f64,
    /// Largest yaw offset of the initial pose, degrees.
    #[arg(long, default_value_t = 0.0)]
    pub perturb_yaw: f64,
}

#[derive(Debug, Args)]
pub struct BuildModelArgs {
    /// Exemplar grid files.
    pub exemplars: Vec<PathBuf>,
    /// Use this many generated car exemplars instead of files.
    #[arg(long, conflicts_with = "exemplars")]
    pub car_exemplars: Option<usize>,
    #[arg(long, default_value_t = synth::DEFAULT_EXEMPLAR_SEED)]
    pub seed: u64,
    #[arg(short, long)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckJacobiansArgs {
    /// Shape model file; the built-in three-component car model by default.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Random configurations per residual family.
    #[arg(long, default_value_t = 500)]
    pub configs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Estimated surface points (xyz).
    pub estimate: PathBuf,
    /// Ground-truth surface points (xyz).
    pub truth: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
}

/// Runs `cli` on a pool with the requested thread count.
pub fn run(cli: Cli) -> Result<i32> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Refine(a) => run_refine(a),
        Command::Synth(a) => run_synth(a),
        Command::BuildModel(a) => run_build_model(a),
        Command::CheckJacobians(a) => run_check_jacobians(a),
        Command::Metrics(a) => run_metrics(a),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn missing(flag: &str) -> Error {
    Error::InvalidArgument(format!("--{flag} is required without --bundle"))
}

fn bundle_paths(args: &RefineArgs) -> Result<BundleFile> {
    let mut paths = match &args.bundle {
        Some(p) => BundleFile::load(p)?,
        None => BundleFile {
            calib: args.calib.clone().ok_or_else(|| missing("calib"))?,
            left: args.left.clone().ok_or_else(|| missing("left"))?,
            right: args.right.clone().ok_or_else(|| missing("right"))?,
            detections: args.detections.clone().ok_or_else(|| missing("detections"))?,
            plane: None,
        },
    };
    if args.plane.is_some() {
        paths.plane = args.plane.clone();
    }
    Ok(paths)
}

pub fn run_refine(args: &RefineArgs) -> Result<i32> {
    let mut cfg = match &args.config {
        Some(p) => io::load_config(p)?,
        None => SolverConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    let model = io::load_model(&args.model)?;
    let bundle = FrameBundle::load(&bundle_paths(args)?)?;
    let plane = bundle.plane.unwrap_or_default();
    create_dir(&args.out_dir)?;

    let fits = fit_frame(&bundle.frame, &bundle.detections, &model, &plane, &cfg);
    let mut records = Vec::with_capacity(fits.len());
    let mut contours = Vec::new();
    let mut failed = 0;
    for ((det, gt), fit) in bundle.detections.iter().zip(&bundle.ground_truth).zip(fits) {
        match fit {
            Ok(fit) => {
                let cloud = synth::surface_point_cloud(&fit.grid, &fit.pose);
                let metrics = match &gt.cloud {
                    Some(truth) => Some(synth::shape_metrics(&cloud, truth, args.tau)?),
                    None => None,
                };
                if args.export_clouds {
                    io::write_xyz(&args.out_dir.join(format!("instance_{}.xyz", det.id)), &cloud)?;
                }
                eprintln!(
                    "instance {}: {} after {} iterations, energy {:.6e}",
                    det.id, fit.status, fit.iterations, fit.energy.total
                );
                contours.push((fit.pose, fit.z.clone()));
                records.push(ResultRecord::from_fit(&fit, metrics));
            }
            Err(e) => {
                eprintln!("instance {}: {e}", det.id);
                failed += 1;
                records.push(ResultRecord::failed(det.id, &det.init_pose, model.num_components(), &e));
            }
        }
    }
    io::save_results(&args.out_dir.join("results.toml"), &records)?;
    if args.overlay {
        let img = io::overlay(&bundle.frame.left, &bundle.frame.rig, &model, &contours, cfg.zeta, cfg.ray_samples)?;
        io::save_rgb(&args.out_dir.join("overlay.png"), &img)?;
    }
    Ok(if failed == 0 { 0 } else { EXIT_INSTANCE_FAILED })
}

/// Sphere preset: a one-component model, centered 6 m ahead; its plane
/// passes through the sphere's center, which is the object origin.
fn sphere_scene(rng: &mut ChaCha8Rng) -> Result<(ShapeModel, SyntheticScene, GroundPlane)> {
    use rand::Rng;
    let model = synth::sphere_model()?;
    let camera = SceneCamera::default();
    let plane = GroundPlane::level(0.9);
    let x = rng.random_range(-0.5..0.5);
    let pose = Pose::from_yaw(rng.random_range(-1.0..1.0), Vector3::new(x, plane.height_at(x, 6.0), 6.0));
    let z = [rng.random_range(-1.0..1.0) * model.sigmas()[0]];
    let scene = synth::render_scene(&model, &z, &pose, &camera.rig, camera.width, camera.height, &Default::default())?;
    Ok((model, scene, plane))
}

/// Truth written next to a synthetic bundle.
#[derive(Debug, serde::Serialize)]
struct Truth {
    pose: [f64; 16],
    z: Vec<f64>,
}

pub fn run_synth(args: &SynthArgs) -> Result<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (model, scene, plane) = match args.preset {
        Preset::Sphere => sphere_scene(&mut rng)?,
        Preset::Car => {
            let model = synth::car_model(args.k)?;
            let scene = synth::random_car_scene(&model, &SceneCamera::default(), &mut rng)?;
            (model, scene, GroundPlane::default())
        }
    };
    let init = synth::perturb_pose(&scene.pose, &mut rng, args.perturb_translation, args.perturb_yaw.to_radians());
    let bbox = shapefit::sampling::BBox::of_mask(&scene.mask_left, 0.5)
        .ok_or_else(|| Error::Degenerate("the rendered object is not visible".into()))?;

    let dir = &args.out_dir;
    create_dir(dir)?;
    io::save_model(&dir.join("model.sdfm"), &model)?;
    write_text(&dir.join("calib.txt"), &io::format_calibration(&scene.rig))?;
    io::save_gray(&dir.join("left.png"), &scene.left)?;
    io::save_gray(&dir.join("right.png"), &scene.right)?;
    io::save_gray(&dir.join("mask_left_1.pgm"), &scene.mask_left)?;
    io::save_gray(&dir.join("mask_right_1.pgm"), &scene.mask_right)?;
    io::save_depth(&dir.join("depth_left.sdfg"), &scene.depth_left)?;
    io::save_depth(&dir.join("depth_right.sdfg"), &scene.depth_right)?;
    io::write_xyz(&dir.join("gt_1.xyz"), &scene.cloud)?;
    write_text(&dir.join("plane.txt"), &io::format_plane(&plane))?;
    io::save_detections(
        &dir.join("detections.toml"),
        &DetectionFile {
            instance: vec![DetectionEntry {
                id: 1,
                bbox: [bbox.u_min, bbox.v_min, bbox.u_max, bbox.v_max],
                init_pose: io::pose_to_row_major(&init),
                mask_left: "mask_left_1.pgm".into(),
                mask_right: "mask_right_1.pgm".into(),
                gt_pose: Some(io::pose_to_row_major(&scene.pose)),
                gt_cloud: Some("gt_1.xyz".into()),
            }],
        },
    )?;
    BundleFile {
        calib: "calib.txt".into(),
        left: "left.png".into(),
        right: "right.png".into(),
        detections: "detections.toml".into(),
        plane: Some("plane.txt".into()),
    }
    .save(&dir.join("bundle.toml"))?;
    let cfg = toml::to_string(&SolverConfig::synthetic_recovery()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_text(&dir.join("config.toml"), &cfg)?;
    let truth = Truth {
        pose: io::pose_to_row_major(&scene.pose),
        z: scene.z.clone(),
    };
    write_text(
        &dir.join("truth.toml"),
        &toml::to_string(&truth).map_err(|e| Error::InvalidArgument(e.to_string()))?,
    )?;
    eprintln!("wrote {}", dir.join("bundle.toml").display());
    Ok(0)
}

pub fn run_build_model(args: &BuildModelArgs) -> Result<i32> {
    let exemplars = match args.car_exemplars {
        Some(n) => synth::car_exemplars(n, args.seed)?,
        None => args.exemplars.iter().map(|p| io::load_grid(p)).collect::<Result<Vec<_>>>()?,
    };
    let model = build_model(&exemplars, args.k)?;
    io::save_model(&args.out, &model)?;
    let sigmas: Vec<String> = model.sigmas().iter().map(|s| format!("{s:.4}")).collect();
    eprintln!(
        "{} components from {} exemplars, sigmas [{}]",
        model.num_components(),
        exemplars.len(),
        sigmas.join(", ")
    );
    Ok(0)
}

pub fn run_check_jacobians(args: &CheckJacobiansArgs) -> Result<i32> {
    let model = match &args.model {
        Some(p) => io::load_model(p)?,
        None => synth::car_model(3)?,
    };
    let setup = OracleSetup {
        model: &model,
        camera: SceneCamera::default(),
    };
    let reports = oracle::check_all(&setup, args.configs, args.seed)?;
    let mut ok = true;
    for r in &reports {
        let (rel, abs) = r.family.tolerance();
        println!(
            "{} {:<18} configs {:>5}  skipped {:>5}  failures {:>4}  max |err| {:.2e}  worst/allowed {:.3}  (rel {rel:e}, abs {abs:e})  {:.1}s",
            if r.passed() { "PASS" } else { "FAIL" },
            r.family.name(),
            r.configs,
            r.skipped,
            r.failures,
            r.max_abs_error,
            r.worst_ratio,
            r.seconds,
        );
        ok &= r.passed();
    }
    Ok(if ok { 0 } else { 1 })
}

pub fn run_metrics(args: &MetricsArgs) -> Result<i32> {
    let estimate = io::read_xyz(&args.estimate)?;
    let truth = io::read_xyz(&args.truth)?;
    let m = synth::shape_metrics(&estimate, &truth, args.tau)?;
    println!("{}", toml::to_string(&m).map_err(|e| Error::InvalidArgument(e.to_string()))?);
    Ok(0)
}
