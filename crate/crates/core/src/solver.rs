//! Damped Gauss-Newton over `[δξ; z]` on the weighted sum of silhouette,
//! photometric and prior energies.
//!
//! Normal equations are assembled at full scale: `b = ∇E` and `H` is the
//! Gauss-Newton approximation of `∇²E`. Squared terms `λr²` contribute
//! `2λJJᵀ` and `2λrJ`; the silhouette sum `wΣr` is linearized through its
//! IRLS form with weights `ω′ = 1/r`, contributing `wω′JJᵀ` and `wω′rJ`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{se3_exp, CameraIntrinsics, Pose, StereoRig, Twist};
use crate::image::GrayImage;
use crate::photometric::{self, PatchPattern};
use crate::priors::{rotation_prior, shape_prior, translation_prior, GroundPlane};
use crate::sampling::{adaptive_sample, occlusion_mask_in, BBox, Detection, PixelSet, SamplingParams};
use crate::sdf::SdfGrid;
use crate::shape::{ShapeCode, ShapeInstance, ShapeModel};
use crate::silhouette::{self, mask_probabilities};

pub use crate::silhouette::irls_weight;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub lambda_silh: f64,
    /// Shape prior weight λ1.
    pub lambda_shape: f64,
    /// Ground-plane translation prior weight λ2.
    pub lambda_trans: f64,
    /// Up-axis rotation prior weight λ3.
    pub lambda_rot: f64,
    pub lambda_photo: f64,
    pub zeta: f64,
    /// Softer sharpness values fitted first, in order, before `zeta`. Each
    /// stage widens the basin the next one starts in.
    pub zeta_continuation: Vec<f64>,
    pub ray_samples: usize,
    pub huber_gamma: f64,
    pub gradient_c: f64,
    pub patch: PatchPattern,
    pub use_right_silhouette: bool,
    /// Restrict photometric pixels to patches inside the instance mask.
    pub photometric_inside_mask: bool,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    /// Relative energy decrease below which an accepted step ends the fit.
    pub energy_tolerance: f64,
    pub initial_damping: f64,
    pub max_damping: f64,
    /// Consecutive rejected steps before the fit stops.
    pub max_rejections: usize,
    pub eps_irls: f64,
    /// Accepted pose-only iterations before the shape is released.
    pub warmup_iterations: usize,
    /// Box growth on each side, as a fraction of the box size.
    pub bbox_margin: f64,
    pub sampling: SamplingParams,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda_silh: 12.0,
            lambda_shape: 10.0,
            lambda_trans: 10.0,
            lambda_rot: 1e7,
            lambda_photo: 1.0,
            zeta: silhouette::DEFAULT_ZETA,
            zeta_continuation: Vec::new(),
            ray_samples: silhouette::DEFAULT_RAY_SAMPLES,
            huber_gamma: photometric::DEFAULT_HUBER,
            gradient_c: photometric::DEFAULT_GRADIENT_C,
            patch: PatchPattern::Eight,
            use_right_silhouette: true,
            photometric_inside_mask: true,
            max_iterations: 50,
            step_tolerance: 1e-6,
            energy_tolerance: 1e-8,
            initial_damping: 1e-4,
            max_damping: 1e12,
            max_rejections: 5,
            eps_irls: 1e-6,
            warmup_iterations: 0,
            bbox_margin: 0.15,
            sampling: SamplingParams::default(),
        }
    }
}

impl SolverConfig {
    /// Weights tuned for recovering pose from clean synthetic renders: a weak
    /// shape prior, photometric weight on the scale of 8-bit intensities and
    /// a sharp contour reached through softer stages.
    pub fn synthetic_recovery() -> Self {
        Self {
            lambda_shape: 0.1,
            lambda_photo: 1e4,
            zeta: 300.0,
            zeta_continuation: vec![30.0, 100.0],
            ..Self::default()
        }
    }

    // negated comparisons so that NaN fails every check
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_silh,
            self.lambda_shape,
            self.lambda_trans,
            self.lambda_rot,
            self.lambda_photo,
        ];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("energy weights must be finite and nonnegative".into()));
        }
        if !(self.zeta > 0.0) || self.zeta_continuation.iter().any(|z| !(*z > 0.0)) || self.ray_samples == 0 {
            return Err(Error::InvalidArgument("zeta and ray_samples must be positive".into()));
        }
        if !(self.huber_gamma > 0.0 && self.gradient_c > 0.0) {
            return Err(Error::InvalidArgument("huber_gamma and gradient_c must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if !(self.initial_damping > 0.0 && self.max_damping >= self.initial_damping) {
            return Err(Error::InvalidArgument("damping bounds are inconsistent".into()));
        }
        if !(self.eps_irls > 0.0) || self.max_rejections == 0 {
            return Err(Error::InvalidArgument("eps_irls and max_rejections must be positive".into()));
        }
        if !(self.bbox_margin >= 0.0) {
            return Err(Error::InvalidArgument("bbox_margin must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A sampled pixel with its floored foreground/background probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelObservation {
    pub u: usize,
    pub v: usize,
    pub p_fg: f64,
    pub p_bg: f64,
}

impl PixelObservation {
    pub fn from_mask(u: usize, v: usize, mask: &GrayImage) -> Self {
        let (p_fg, p_bg) = mask_probabilities(mask.get(u, v));
        Self { u, v, p_fg, p_bg }
    }
}

/// Everything needed to fit one instance.
#[derive(Debug, Clone)]
pub struct InstanceProblem<'a> {
    pub model: &'a ShapeModel,
    pub rig: &'a StereoRig,
    pub left: &'a GrayImage,
    pub right: &'a GrayImage,
    pub silhouette_left: Vec<PixelObservation>,
    pub silhouette_right: Vec<PixelObservation>,
    /// Left pixels carrying photometric patches.
    pub photometric: Vec<(usize, usize)>,
    pub plane: GroundPlane,
}

impl<'a> InstanceProblem<'a> {
    /// Builds observations from sampled pixel sets and probability masks.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a ShapeModel,
        rig: &'a StereoRig,
        left: &'a GrayImage,
        right: &'a GrayImage,
        pixels_left: &PixelSet,
        mask_left: &GrayImage,
        pixels_right: &PixelSet,
        mask_right: &GrayImage,
        plane: GroundPlane,
    ) -> Self {
        Self {
            model,
            rig,
            left,
            right,
            silhouette_left: pixels_left
                .iter()
                .map(|p| PixelObservation::from_mask(p.u, p.v, mask_left))
                .collect(),
            silhouette_right: pixels_right
                .iter()
                .map(|p| PixelObservation::from_mask(p.u, p.v, mask_right))
                .collect(),
            photometric: pixels_left.iter().map(|p| (p.u, p.v)).collect(),
            plane,
        }
    }

    pub fn num_params(&self) -> usize {
        6 + self.model.num_components()
    }

    /// Drops photometric pixels whose patch is not entirely foreground in
    /// `mask_left`. Patch pixels on the background break brightness
    /// constancy under the central depth, and because they enter and leave
    /// the ray-hit set as the shape moves they pull the depth off.
    pub fn keep_photometric_inside(&mut self, mask_left: &GrayImage, pattern: PatchPattern) {
        let (w, h) = (mask_left.width() as i64, mask_left.height() as i64);
        self.photometric.retain(|&(u, v)| {
            pattern.offsets().iter().all(|&(du, dv)| {
                let (x, y) = (u as i64 + du as i64, v as i64 + dv as i64);
                x >= 0 && y >= 0 && x < w && y < h && mask_left.get(x as usize, y as usize) >= 0.5
            })
        });
    }
}

/// Optimization variables: `T_c^o` and the shape code.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub camera_to_object: Pose,
    pub z: Vec<f64>,
}

impl State {
    /// Starts from an object-to-camera pose and the mean shape.
    pub fn from_object_pose(object_to_camera: &Pose, k: usize) -> Self {
        Self {
            camera_to_object: object_to_camera.inverse(),
            z: vec![0.0; k],
        }
    }

    pub fn object_to_camera(&self) -> Pose {
        self.camera_to_object.inverse()
    }

    /// `exp(δξ̂)·T` and `z + δz`.
    pub fn retract(&self, delta: &DVector<f64>) -> State {
        let xi = Twist::from_slice(&delta.as_slice()[..6]);
        State {
            camera_to_object: se3_exp(&xi) * self.camera_to_object,
            z: self.z.iter().zip(&delta.as_slice()[6..]).map(|(z, d)| z + d).collect(),
        }
    }
}

/// Weighted contribution of each term to the total energy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub silhouette_left: f64,
    pub silhouette_right: f64,
    pub photometric: f64,
    pub shape: f64,
    pub translation: f64,
    pub rotation: f64,
    pub total: f64,
}

impl EnergyTerms {
    fn finish(mut self) -> Self {
        self.total = self.silhouette_left + self.silhouette_right + self.photometric + self.shape + self.translation + self.rotation;
        self
    }
}

#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub energy: EnergyTerms,
    /// `Σ ω′·r²` over all silhouette residuals (both images).
    pub irls_weighted_sum: f64,
    /// `Σ r` over all silhouette residuals.
    pub residual_sum: f64,
    /// `|Ω′|`, pixels whose ray hit the surface.
    pub photometric_pixels: usize,
}

struct Accumulator {
    h: DMatrix<f64>,
    b: DVector<f64>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self {
            h: DMatrix::zeros(n, n),
            b: DVector::zeros(n),
        }
    }

    /// `H += w·JJᵀ`, `b += w·r·J`.
    fn add(&mut self, w: f64, r: f64, j: &DVector<f64>) {
        if w == 0.0 {
            return;
        }
        self.h.ger(w, j, j, 1.0);
        self.b.axpy(w * r, j, 1.0);
    }
}

fn ray_dir(k: &CameraIntrinsics, u: usize, v: usize) -> Vector3<f64> {
    k.ray(&nalgebra::Vector2::new(u as f64, v as f64))
}

struct SilhouetteSums {
    energy: f64,
    residual_sum: f64,
    irls_sum: f64,
}

fn silhouette_block(
    shape: &ShapeInstance,
    camera_to_object: &Pose,
    k: &CameraIntrinsics,
    pixels: &[PixelObservation],
    cfg: &SolverConfig,
    acc: Option<&mut Accumulator>,
) -> SilhouetteSums {
    if pixels.is_empty() || cfg.lambda_silh == 0.0 {
        return SilhouetteSums {
            energy: 0.0,
            residual_sum: 0.0,
            irls_sum: 0.0,
        };
    }
    let w = cfg.lambda_silh / pixels.len() as f64;
    let origin = Vector3::zeros();
    let mut residual_sum = 0.0;
    let mut irls_sum = 0.0;
    match acc {
        Some(acc) => {
            let terms: Vec<_> = pixels
                .par_iter()
                .map(|p| {
                    silhouette::silhouette_term(
                        shape,
                        camera_to_object,
                        &origin,
                        &ray_dir(k, p.u, p.v),
                        p.p_fg,
                        p.p_bg,
                        cfg.zeta,
                        cfg.ray_samples,
                        cfg.eps_irls,
                    )
                })
                .collect();
            for t in &terms {
                residual_sum += t.value;
                irls_sum += t.irls_weight * t.value * t.value;
                acc.add(w * t.irls_weight, t.value, &t.jacobian);
            }
        }
        None => {
            let values: Vec<f64> = pixels
                .par_iter()
                .map(|p| {
                    let pi = silhouette::pi_value(shape, camera_to_object, &origin, &ray_dir(k, p.u, p.v), cfg.zeta, cfg.ray_samples);
                    silhouette::silhouette_residual(pi, p.p_fg, p.p_bg)
                })
                .collect();
            for r in values {
                residual_sum += r;
                irls_sum += irls_weight(r, cfg.eps_irls) * r * r;
            }
        }
    }
    SilhouetteSums {
        energy: w * residual_sum,
        residual_sum,
        irls_sum,
    }
}

fn photometric_block(
    problem: &InstanceProblem,
    shape: &ShapeInstance,
    camera_to_object: &Pose,
    cfg: &SolverConfig,
    acc: Option<&mut Accumulator>,
) -> (f64, usize) {
    if problem.photometric.is_empty() || cfg.lambda_photo == 0.0 {
        return (0.0, 0);
    }
    let with_jac = acc.is_some();
    let terms: Vec<_> = problem
        .photometric
        .par_iter()
        .filter_map(|&p| {
            photometric::photometric_term(
                shape,
                camera_to_object,
                problem.rig,
                problem.left,
                problem.right,
                p,
                cfg.patch,
                cfg.huber_gamma,
                cfg.gradient_c,
                with_jac,
            )
        })
        .collect();
    if terms.is_empty() {
        return (0.0, 0);
    }
    let s = cfg.lambda_photo / (terms.len() * cfg.patch.len()) as f64;
    let cost: f64 = terms.iter().map(|t| t.cost(cfg.huber_gamma)).sum();
    if let Some(acc) = acc {
        for t in &terms {
            for ((r, wh), j) in t.values.iter().zip(&t.huber_weights).zip(&t.jacobians) {
                acc.add(2.0 * s * t.grad_weight * wh, *r, j);
            }
        }
    }
    (s * cost, terms.len())
}

fn prior_block(problem: &InstanceProblem, state: &State, cfg: &SolverConfig, acc: Option<&mut Accumulator>) -> Result<(f64, f64, f64)> {
    let k = problem.model.num_components();
    let (rs, js) = shape_prior(&state.z, problem.model.sigmas())?;
    let (rt, jt) = translation_prior(&state.camera_to_object, &problem.plane);
    let (rr, jr) = rotation_prior(&state.camera_to_object, &problem.plane);
    if let Some(acc) = acc {
        for i in 0..k {
            acc.add(2.0 * cfg.lambda_shape, rs[i], &js.row(i).transpose());
        }
        let pad = |j: DVector<f64>| {
            let mut full = DVector::zeros(6 + k);
            full.rows_mut(0, 6).copy_from(&j);
            full
        };
        acc.add(2.0 * cfg.lambda_trans, rt, &pad(jt));
        acc.add(2.0 * cfg.lambda_rot, rr, &pad(jr));
    }
    Ok((
        cfg.lambda_shape * rs.norm_squared(),
        cfg.lambda_trans * rt * rt,
        cfg.lambda_rot * rr * rr,
    ))
}

fn evaluate(problem: &InstanceProblem, state: &State, cfg: &SolverConfig, linearize: bool) -> Result<NormalEquations> {
    let n = problem.num_params();
    let shape = ShapeInstance::new(problem.model, &state.z)?;
    let mut acc = Accumulator::new(n);
    let right_pose = state.camera_to_object * problem.rig.right_to_left();
    let sl = silhouette_block(
        &shape,
        &state.camera_to_object,
        &problem.rig.left,
        &problem.silhouette_left,
        cfg,
        linearize.then_some(&mut acc),
    );
    let sr = if cfg.use_right_silhouette {
        silhouette_block(
            &shape,
            &right_pose,
            &problem.rig.right,
            &problem.silhouette_right,
            cfg,
            linearize.then_some(&mut acc),
        )
    } else {
        SilhouetteSums {
            energy: 0.0,
            residual_sum: 0.0,
            irls_sum: 0.0,
        }
    };
    let (photo, omega_prime) = photometric_block(problem, &shape, &state.camera_to_object, cfg, linearize.then_some(&mut acc));
    let (shape_e, trans_e, rot_e) = prior_block(problem, state, cfg, linearize.then_some(&mut acc))?;
    let energy = EnergyTerms {
        silhouette_left: sl.energy,
        silhouette_right: sr.energy,
        photometric: photo,
        shape: shape_e,
        translation: trans_e,
        rotation: rot_e,
        total: 0.0,
    }
    .finish();
    Ok(NormalEquations {
        h: acc.h,
        b: acc.b,
        energy,
        irls_weighted_sum: sl.irls_sum + sr.irls_sum,
        residual_sum: sl.residual_sum + sr.residual_sum,
        photometric_pixels: omega_prime,
    })
}

/// Gauss-Newton system and true energy at `state`.
pub fn build_normal_equations(problem: &InstanceProblem, state: &State, cfg: &SolverConfig) -> Result<NormalEquations> {
    evaluate(problem, state, cfg, true)
}

/// True energy at `state`, without derivatives.
pub fn energy(problem: &InstanceProblem, state: &State, cfg: &SolverConfig) -> Result<EnergyTerms> {
    Ok(evaluate(problem, state, cfg, false)?.energy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
    Diverged,
    SkippedOccluded,
}

impl std::fmt::Display for FitStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FitStatus::Converged => "converged",
            FitStatus::MaxIterations => "max-iterations",
            FitStatus::Diverged => "diverged",
            FitStatus::SkippedOccluded => "skipped-occluded",
        })
    }
}

/// Linearization point of an accepted iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub energy: EnergyTerms,
    pub irls_weighted_sum: f64,
    pub residual_sum: f64,
    pub damping: f64,
    /// Contour sharpness of the stage the iterate belongs to.
    pub zeta: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub id: u64,
    /// Refined `T_o^c`.
    pub pose: Pose,
    pub z: Vec<f64>,
    pub grid: SdfGrid,
    pub energy: EnergyTerms,
    pub iterations: usize,
    pub status: FitStatus,
    /// One record per accepted iterate, starting with the initial state.
    pub trace: Vec<IterationRecord>,
    pub seconds: f64,
}

/// Relative floor on the damping diagonal. Plain `diag(H)` scaling makes a
/// barely observed direction as cheap to move along as a well observed one,
/// so rank-deficient systems would take huge steps along it.
const DAMPING_FLOOR: f64 = 1e-3;

/// Solves `(H + μD)δ = −b` with `D = diag(H)` floored; `None` if the damped
/// matrix is not positive definite.
fn damped_step(h: &DMatrix<f64>, b: &DVector<f64>, mu: f64, frozen: &[bool]) -> Option<DVector<f64>> {
    let n = b.len();
    let floor = (DAMPING_FLOOR * h.diagonal().max()).max(DAMPING_FLOOR);
    let mut a = h.clone();
    let mut rhs = -b.clone();
    for i in 0..n {
        if frozen[i] {
            for j in 0..n {
                a[(i, j)] = 0.0;
                a[(j, i)] = 0.0;
            }
            a[(i, i)] = 1.0;
            rhs[i] = 0.0;
        } else {
            a[(i, i)] += mu * h[(i, i)].max(floor);
        }
    }
    a.cholesky().map(|c| c.solve(&rhs))
}

/// Progress carried across continuation stages.
struct Progress {
    state: State,
    trace: Vec<IterationRecord>,
    iterations: usize,
    accepted: usize,
}

/// Levenberg-damped Gauss-Newton at one contour sharpness `cfg.zeta`.
fn run_stage(
    problem: &InstanceProblem,
    progress: &mut Progress,
    cfg: &SolverConfig,
    warmup: usize,
) -> Result<(NormalEquations, FitStatus)> {
    let n = problem.num_params();
    let mut ne = build_normal_equations(problem, &progress.state, cfg)?;
    let mut mu = cfg.initial_damping;
    let record = |ne: &NormalEquations, mu: f64| IterationRecord {
        energy: ne.energy,
        irls_weighted_sum: ne.irls_weighted_sum,
        residual_sum: ne.residual_sum,
        damping: mu,
        zeta: cfg.zeta,
    };
    progress.trace.push(record(&ne, mu));
    let mut rejections = 0;
    let mut accepted = 0;
    for _ in 0..cfg.max_iterations {
        progress.iterations += 1;
        let frozen: Vec<bool> = (0..n).map(|i| i >= 6 && accepted < warmup).collect();
        let Some(delta) = damped_step(&ne.h, &ne.b, mu, &frozen) else {
            mu *= 10.0;
            if mu > cfg.max_damping {
                return Ok((ne, FitStatus::Diverged));
            }
            continue;
        };
        if delta.norm() < cfg.step_tolerance {
            return Ok((ne, FitStatus::Converged));
        }
        let candidate = progress.state.retract(&delta);
        let e_new = energy(problem, &candidate, cfg)?;
        if e_new.total < ne.energy.total {
            let e_old = ne.energy.total;
            progress.state = candidate;
            ne = build_normal_equations(problem, &progress.state, cfg)?;
            mu = (mu * 0.5).max(1e-12);
            rejections = 0;
            accepted += 1;
            progress.accepted += 1;
            progress.trace.push(record(&ne, mu));
            if (e_old - ne.energy.total) <= cfg.energy_tolerance * e_old.abs().max(f64::MIN_POSITIVE) && accepted > warmup {
                return Ok((ne, FitStatus::Converged));
            }
        } else {
            rejections += 1;
            mu *= 10.0;
            if rejections >= cfg.max_rejections || mu > cfg.max_damping {
                // no descent direction left at this point
                let status = if progress.accepted > 0 {
                    FitStatus::Converged
                } else {
                    FitStatus::Diverged
                };
                return Ok((ne, status));
            }
        }
    }
    Ok((ne, FitStatus::MaxIterations))
}

/// Levenberg-damped Gauss-Newton from `init`, run once per entry of
/// `cfg.zeta_continuation` and then at `cfg.zeta`, each stage starting where
/// the previous one stopped. The status is that of the last stage.
pub fn gauss_newton_fit(problem: &InstanceProblem, init: &State, cfg: &SolverConfig) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    if init.z.len() != problem.model.num_components() {
        return Err(Error::DimensionMismatch {
            expected: problem.model.num_components(),
            actual: init.z.len(),
        });
    }
    let mut progress = Progress {
        state: init.clone(),
        trace: Vec::new(),
        iterations: 0,
        accepted: 0,
    };
    let mut stage_cfg = cfg.clone();
    let mut last = None;
    for (i, &zeta) in cfg.zeta_continuation.iter().chain(std::iter::once(&cfg.zeta)).enumerate() {
        stage_cfg.zeta = zeta;
        let warmup = if i == 0 { cfg.warmup_iterations } else { 0 };
        last = Some(run_stage(problem, &mut progress, &stage_cfg, warmup)?);
    }
    let (ne, status) = last.expect("at least one stage");
    let Progress {
        state, trace, iterations, ..
    } = progress;
    let grid = problem.model.decode(&ShapeCode(state.z.clone()))?;
    Ok(FitResult {
        id: 0,
        pose: state.object_to_camera(),
        z: state.z,
        grid,
        energy: ne.energy,
        iterations,
        status,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Rectified stereo pair with calibration.
#[derive(Debug, Clone)]
pub struct StereoFrame {
    pub rig: StereoRig,
    pub left: GrayImage,
    pub right: GrayImage,
}

/// Pixel sets of one detection in both images.
#[derive(Debug, Clone)]
pub struct InstanceSampling {
    pub region_left: BBox,
    pub region_right: BBox,
    pub pixels_left: PixelSet,
    pub pixels_right: PixelSet,
}

/// Occlusion-aware pixel selection for detection `id`.
pub fn sample_instance(frame: &StereoFrame, detections: &[Detection], id: u64, cfg: &SolverConfig) -> Result<InstanceSampling> {
    let det = detections
        .iter()
        .find(|d| d.id == id)
        .ok_or_else(|| Error::InvalidArgument(format!("no detection with id {id}")))?;
    let (w, h) = (frame.left.width(), frame.left.height());
    if !det.bbox.fits(w, h) {
        return Err(Error::InvalidArgument(format!("detection {id}: bounding box outside the image")));
    }
    for m in [&det.mask_left, &det.mask_right] {
        if m.width() != w || m.height() != h {
            return Err(Error::InvalidArgument(format!("detection {id}: mask size differs from the image")));
        }
    }
    let region_left = det.bbox.expanded(cfg.bbox_margin, 0, w, h);
    let region_right = BBox::of_mask(&det.mask_right, 0.5)
        .map(|b| b.expanded(cfg.bbox_margin, 0, w, h))
        .unwrap_or(region_left);
    let occ_left = occlusion_mask_in(detections, id, |d| &d.mask_left, region_left)?;
    let occ_right = occlusion_mask_in(detections, id, |d| &d.mask_right, region_right)?;
    Ok(InstanceSampling {
        region_left,
        region_right,
        pixels_left: adaptive_sample(&frame.left, &region_left, &occ_left, &cfg.sampling)?,
        pixels_right: adaptive_sample(&frame.right, &region_right, &occ_right, &cfg.sampling)?,
    })
}

/// Fits one detection of a frame.
pub fn fit_instance(
    frame: &StereoFrame,
    detections: &[Detection],
    id: u64,
    model: &ShapeModel,
    plane: &GroundPlane,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    let det = detections
        .iter()
        .find(|d| d.id == id)
        .ok_or_else(|| Error::InvalidArgument(format!("no detection with id {id}")))?;
    let sampling = sample_instance(frame, detections, id, cfg)?;
    let init = State::from_object_pose(&det.init_pose, model.num_components());
    if sampling.pixels_left.is_empty() {
        return Ok(FitResult {
            id,
            pose: det.init_pose,
            z: init.z.clone(),
            grid: model.mean().clone(),
            energy: EnergyTerms::default(),
            iterations: 0,
            status: FitStatus::SkippedOccluded,
            trace: Vec::new(),
            seconds: 0.0,
        });
    }
    let mut problem = InstanceProblem::new(
        model,
        &frame.rig,
        &frame.left,
        &frame.right,
        &sampling.pixels_left,
        &det.mask_left,
        &sampling.pixels_right,
        &det.mask_right,
        *plane,
    );
    if cfg.photometric_inside_mask {
        problem.keep_photometric_inside(&det.mask_left, cfg.patch);
    }
    let mut result = gauss_newton_fit(&problem, &init, cfg)?;
    result.id = id;
    Ok(result)
}

/// Fits every detection independently; failures stay per instance.
pub fn fit_frame(
    frame: &StereoFrame,
    detections: &[Detection],
    model: &ShapeModel,
    plane: &GroundPlane,
    cfg: &SolverConfig,
) -> Vec<Result<FitResult>> {
    detections
        .par_iter()
        .map(|d| fit_instance(frame, detections, d.id, model, plane, cfg))
        .collect()
}
