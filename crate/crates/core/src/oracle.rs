//! Central finite-difference oracle for every analytic Jacobian, run as one
//! parameterized suite over randomized configurations.
//!
//! The interpolated fields are only piecewise smooth: trilinear grids kink on
//! cell faces and bilinear images on pixel lines. A configuration whose
//! finite-difference stencil straddles such a kink, or whose depth derivative
//! is clamped at grazing incidence, is redrawn and counted as skipped.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{se3_exp, Pose, StereoRig, Twist};
use crate::image::GrayImage;
use crate::photometric::{self, PatchPattern};
use crate::priors::{rotation_prior, shape_prior, translation_prior, GroundPlane};
use crate::sdf::{clip_ray_faces, SdfGrid, COS_MIN};
use crate::shape::{ShapeInstance, ShapeModel};
use crate::silhouette;
use crate::solver::State;
use crate::synth::SceneCamera;

/// Default steps: `1e-6` on the twist, `1e-5` on the shape code.
pub fn default_steps(k: usize) -> Vec<f64> {
    let mut s = vec![1e-6; 6];
    s.resize(6 + k, 1e-5);
    s
}

/// Central differences of `f` around the zero increment; column `i` uses
/// step `steps[i]`.
pub fn finite_difference_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, steps: &[f64]) -> DMatrix<f64> {
    let n = steps.len();
    let mut cols = Vec::with_capacity(n);
    for (i, &h) in steps.iter().enumerate() {
        let mut d = DVector::zeros(n);
        d[i] = h;
        let plus = f(&d);
        d[i] = -h;
        let minus = f(&d);
        cols.push((plus - minus) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualFamily {
    Silhouette,
    Photometric,
    ShapePrior,
    TranslationPrior,
    RotationPrior,
}

impl ResidualFamily {
    pub const ALL: [ResidualFamily; 5] = [
        ResidualFamily::Silhouette,
        ResidualFamily::Photometric,
        ResidualFamily::ShapePrior,
        ResidualFamily::TranslationPrior,
        ResidualFamily::RotationPrior,
    ];

    /// `(relative, absolute)`: an entry passes when its error is within the
    /// larger of `relative·|fd|` and `absolute`.
    pub fn tolerance(self) -> (f64, f64) {
        match self {
            ResidualFamily::Silhouette => (1e-3, 1e-6),
            ResidualFamily::Photometric => (5e-3, 1e-6),
            _ => (0.0, 1e-6),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ResidualFamily::Silhouette => "silhouette",
            ResidualFamily::Photometric => "photometric",
            ResidualFamily::ShapePrior => "shape-prior",
            ResidualFamily::TranslationPrior => "translation-prior",
            ResidualFamily::RotationPrior => "rotation-prior",
        }
    }
}

impl std::fmt::Display for ResidualFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub family: ResidualFamily,
    pub configs: usize,
    /// Draws rejected for straddling a kink.
    pub skipped: usize,
    pub max_abs_error: f64,
    /// Largest error divided by its allowance; at most 1 when passing.
    pub worst_ratio: f64,
    pub failures: usize,
    pub seconds: f64,
}

impl JacobianReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Shared fixture: a shape model, a camera and a smooth texture pair.
pub struct OracleSetup<'a> {
    pub model: &'a ShapeModel,
    pub camera: SceneCamera,
}

/// Largest error and worst allowance ratio of `analytic` against `numeric`.
fn compare(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>, (rel, abs): (f64, f64)) -> (f64, f64) {
    let mut max_err = 0.0f64;
    let mut worst = 0.0f64;
    for (a, f) in analytic.iter().zip(numeric.iter()) {
        let err = (a - f).abs();
        max_err = max_err.max(err);
        worst = worst.max(err / (rel * f.abs()).max(abs));
    }
    (max_err, worst)
}

/// A random shape, pose and camera side for the image-based families.
struct Draw {
    z: Vec<f64>,
    state: State,
    right: bool,
}

fn draw_configuration(model: &ShapeModel, rng: &mut impl Rng) -> Draw {
    let plane = GroundPlane::default();
    let depth = rng.random_range(5.0..15.0);
    let x = rng.random_range(-0.2..0.2) * depth;
    let tilt = se3_exp(&Twist::new(
        Vector3::zeros(),
        Vector3::new(rng.random_range(-0.1..0.1), 0.0, rng.random_range(-0.1..0.1)),
    ));
    let pose = tilt.compose(&Pose::from_yaw(
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        Vector3::zeros(),
    ));
    let object_to_camera = Pose::new(
        pose.rotation,
        Vector3::new(x, plane.height_at(x, depth) + rng.random_range(-0.2..0.2), depth),
    );
    let z: Vec<f64> = model.sigmas().iter().map(|s| rng.random_range(-2.0..2.0) * s).collect();
    Draw {
        state: State {
            camera_to_object: object_to_camera.inverse(),
            z: z.clone(),
        },
        z,
        right: rng.random_bool(0.5),
    }
}

/// Camera-to-object pose of the chosen view.
fn view_pose(state: &State, rig: &StereoRig, right: bool) -> Pose {
    if right {
        state.camera_to_object * rig.right_to_left()
    } else {
        state.camera_to_object
    }
}

fn cell_of(grid: &SdfGrid, x: &Vector3<f64>) -> [i64; 3] {
    let r = (x - grid.origin()) / grid.voxel_size();
    [r.x.floor() as i64, r.y.floor() as i64, r.z.floor() as i64]
}

/// Everything that must stay fixed across the stencil for the silhouette
/// residual to be smooth there: sample cells and limiting box faces.
fn silhouette_signature(shape: &ShapeInstance, pose: &Pose, dir: &Vector3<f64>, n: usize) -> Vec<i64> {
    let o = pose.translation;
    let d = pose.rotation * dir;
    let (lo, hi) = shape.model().support();
    let mut sig = Vec::new();
    if let Some(c) = clip_ray_faces(&lo, &hi, &o, &d) {
        sig.push(c.entry_axis.map_or(-1, |a| a as i64));
        sig.push(c.exit_axis as i64);
    }
    for xc in silhouette::ray_samples(shape, pose, &Vector3::zeros(), dir, n) {
        sig.extend(cell_of(shape.grid(), &pose.transform_point(&xc)));
    }
    sig
}

/// Perturbed states of the central stencil, in parameter order.
fn stencil_states(state: &State, steps: &[f64]) -> Vec<State> {
    let n = steps.len();
    let mut out = Vec::with_capacity(2 * n);
    for (i, &h) in steps.iter().enumerate() {
        for s in [h, -h] {
            let mut d = DVector::zeros(n);
            d[i] = s;
            out.push(state.retract(&d));
        }
    }
    out
}

const ZETA: f64 = silhouette::DEFAULT_ZETA;
const RAY_SAMPLES: usize = silhouette::DEFAULT_RAY_SAMPLES;
const MAX_DRAWS: usize = 10_000;

/// Analytic and numeric Jacobians of one configuration, plus the draws
/// rejected before it.
type Comparison = (DMatrix<f64>, DMatrix<f64>, usize);

/// One silhouette configuration: a pixel in the contour band where π is
/// neither 0 nor 1, with a random foreground probability.
fn silhouette_config(setup: &OracleSetup, rng: &mut impl Rng) -> Result<Option<Comparison>> {
    let k = setup.model.num_components();
    let rig = setup.camera.rig;
    let steps = default_steps(k);
    let mut skipped = 0;
    for _ in 0..MAX_DRAWS / 10 {
        let draw = draw_configuration(setup.model, rng);
        let shape = ShapeInstance::new(setup.model, &draw.z)?;
        let cam = if draw.right { &rig.right } else { &rig.left };
        let pose = view_pose(&draw.state, &rig, draw.right);
        for _ in 0..200 {
            let (u, v) = (
                rng.random_range(0..setup.camera.width) as f64,
                rng.random_range(0..setup.camera.height) as f64,
            );
            let dir = cam.ray(&Vector2::new(u, v));
            let (pi, set) = silhouette::pi_project(&shape, &pose, &Vector3::zeros(), &dir, ZETA, RAY_SAMPLES);
            if !(1e-4..=1.0 - 1e-4).contains(&pi) || set.clamped.iter().any(|c| *c) {
                continue;
            }
            let sig = silhouette_signature(&shape, &pose, &dir, RAY_SAMPLES);
            let smooth = stencil_states(&draw.state, &steps).iter().all(|s| {
                let sh = ShapeInstance::new(setup.model, &s.z).expect("valid code");
                silhouette_signature(&sh, &view_pose(s, &rig, draw.right), &dir, RAY_SAMPLES) == sig
            });
            if !smooth {
                skipped += 1;
                continue;
            }
            let (p_fg, p_bg) = silhouette::mask_probabilities(rng.random_range(0.0..=1.0));
            let analytic = silhouette::silhouette_jacobian(&set, pi, p_fg, p_bg, k, ZETA, 1e-6).jacobian;
            let numeric = finite_difference_jacobian(
                |d| {
                    let s = draw.state.retract(d);
                    let sh = ShapeInstance::new(setup.model, &s.z).expect("valid code");
                    let pi = silhouette::pi_value(&sh, &view_pose(&s, &rig, draw.right), &Vector3::zeros(), &dir, ZETA, RAY_SAMPLES);
                    DVector::from_element(1, silhouette::silhouette_residual(pi, p_fg, p_bg))
                },
                &steps,
            );
            return Ok(Some((DMatrix::from_row_slice(1, 6 + k, analytic.as_slice()), numeric, skipped)));
        }
    }
    Ok(None)
}

/// Smooth random texture of the camera's size.
fn texture(width: usize, height: usize, rng: &mut impl Rng) -> GrayImage {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..6.3),
                rng.random_range(0.05..0.12),
            )
        })
        .collect();
    GrayImage::from_fn(width, height, |x, y| {
        0.5 + waves
            .iter()
            .map(|(a, b, p, amp)| amp * (a * x as f64 + b * y as f64 + p).sin())
            .sum::<f64>()
    })
    .expect("finite texture")
}

/// Kink signature of a photometric residual: hit cell, warped pixel cells
/// and the kept patch layout.
fn photometric_signature(
    shape: &ShapeInstance,
    pose: &Pose,
    rig: &StereoRig,
    p: (usize, usize),
    pattern: PatchPattern,
) -> Option<Vec<i64>> {
    let center = Vector2::new(p.0 as f64, p.1 as f64);
    let hit = photometric::depth_at_pixel(shape, pose, rig, &center, false)?;
    if hit.normal_cos <= 1.5 * COS_MIN {
        return None;
    }
    let mut sig: Vec<i64> = cell_of(shape.grid(), &hit.point_object).to_vec();
    for &(du, dv) in pattern.offsets() {
        let pt = Vector2::new(center.x + du as f64, center.y + dv as f64);
        let w = photometric::warp_pixel(rig, &pt, hit.depth).ok()?;
        sig.push(w.x.floor() as i64);
        sig.push(w.y.floor() as i64);
    }
    Some(sig)
}

fn photometric_config(setup: &OracleSetup, rng: &mut impl Rng) -> Result<Option<Comparison>> {
    let k = setup.model.num_components();
    let rig = setup.camera.rig;
    let (w, h) = (setup.camera.width, setup.camera.height);
    let steps = default_steps(k);
    let pattern = PatchPattern::Eight;
    let gamma = photometric::DEFAULT_HUBER;
    let c = photometric::DEFAULT_GRADIENT_C;
    let mut skipped = 0;
    for _ in 0..MAX_DRAWS / 10 {
        let draw = draw_configuration(setup.model, rng);
        let shape = ShapeInstance::new(setup.model, &draw.z)?;
        let (left, right) = (texture(w, h, rng), texture(w, h, rng));
        let pose = draw.state.camera_to_object;
        for _ in 0..200 {
            let p = (rng.random_range(1..w - 1), rng.random_range(1..h - 1));
            let Some(term) = photometric::photometric_term(&shape, &pose, &rig, &left, &right, p, pattern, gamma, c, true) else {
                continue;
            };
            if term.values.len() != pattern.len() {
                continue;
            }
            let Some(sig) = photometric_signature(&shape, &pose, &rig, p, pattern) else {
                continue;
            };
            let smooth = stencil_states(&draw.state, &steps).iter().all(|s| {
                let sh = ShapeInstance::new(setup.model, &s.z).expect("valid code");
                photometric_signature(&sh, &s.camera_to_object, &rig, p, pattern).as_ref() == Some(&sig)
            });
            if !smooth {
                skipped += 1;
                continue;
            }
            let rows: Vec<_> = term.jacobians.iter().map(|j| j.transpose()).collect();
            let analytic = DMatrix::from_rows(&rows);
            let numeric = finite_difference_jacobian(
                |d| {
                    let s = draw.state.retract(d);
                    let sh = ShapeInstance::new(setup.model, &s.z).expect("valid code");
                    let t = photometric::photometric_term(&sh, &s.camera_to_object, &rig, &left, &right, p, pattern, gamma, c, false)
                        .expect("hit persists across the stencil");
                    DVector::from_vec(t.values)
                },
                &steps,
            );
            return Ok(Some((analytic, numeric, skipped)));
        }
    }
    Ok(None)
}

fn random_plane(rng: &mut impl Rng) -> GroundPlane {
    GroundPlane::new(
        Vector3::new(rng.random_range(-0.1..0.1), -1.0, rng.random_range(-0.1..0.1)),
        rng.random_range(1.4..1.9),
    )
    .expect("non-vertical plane")
}

fn prior_config(family: ResidualFamily, setup: &OracleSetup, rng: &mut impl Rng) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = setup.model.num_components();
    let steps = default_steps(k);
    let mut draw = draw_configuration(setup.model, rng);
    // any orientation, not only near-upright ones
    draw.state.camera_to_object = se3_exp(&Twist::new(
        Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-20.0..20.0),
        ),
        Vector3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        ),
    ));
    let plane = random_plane(rng);
    let sigmas = setup.model.sigmas();
    let eval = |s: &State| -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok(match family {
            ResidualFamily::ShapePrior => shape_prior(&s.z, sigmas)?,
            ResidualFamily::TranslationPrior => {
                let (r, j) = translation_prior(&s.camera_to_object, &plane);
                (DVector::from_element(1, r), pad_row(&j, k))
            }
            ResidualFamily::RotationPrior => {
                let (r, j) = rotation_prior(&s.camera_to_object, &plane);
                (DVector::from_element(1, r), pad_row(&j, k))
            }
            _ => unreachable!("image families are drawn elsewhere"),
        })
    };
    let (_, analytic) = eval(&draw.state)?;
    let numeric = finite_difference_jacobian(|d| eval(&draw.state.retract(d)).expect("valid code").0, &steps);
    Ok((analytic, numeric))
}

fn pad_row(j: &DVector<f64>, k: usize) -> DMatrix<f64> {
    let mut row = DMatrix::zeros(1, 6 + k);
    for (i, v) in j.iter().enumerate() {
        row[(0, i)] = *v;
    }
    row
}

/// Runs `configs` randomized checks of one residual family. Each
/// configuration has its own seeded generator, so results do not depend on
/// the thread count.
pub fn check_family(family: ResidualFamily, setup: &OracleSetup, configs: usize, seed: u64) -> Result<JacobianReport> {
    let start = Instant::now();
    let tol = family.tolerance();
    let outcomes: Vec<Result<Option<(f64, f64, usize)>>> = (0..configs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((family as u64) << 48) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let drawn = match family {
                ResidualFamily::Silhouette => silhouette_config(setup, &mut rng)?,
                ResidualFamily::Photometric => photometric_config(setup, &mut rng)?,
                _ => prior_config(family, setup, &mut rng).map(|(a, n)| Some((a, n, 0)))?,
            };
            Ok(drawn.map(|(a, n, skipped)| {
                let (err, ratio) = compare(&a, &n, tol);
                (err, ratio, skipped)
            }))
        })
        .collect();
    let mut report = JacobianReport {
        family,
        configs: 0,
        skipped: 0,
        max_abs_error: 0.0,
        worst_ratio: 0.0,
        failures: 0,
        seconds: 0.0,
    };
    for o in outcomes {
        // a configuration that could not be drawn counts as a failure
        let Some((err, ratio, skipped)) = o? else {
            report.failures += 1;
            continue;
        };
        report.configs += 1;
        report.skipped += skipped;
        report.max_abs_error = report.max_abs_error.max(err);
        report.worst_ratio = report.worst_ratio.max(ratio);
        if ratio > 1.0 {
            report.failures += 1;
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// All registered families.
pub fn check_all(setup: &OracleSetup, configs: usize, seed: u64) -> Result<Vec<JacobianReport>> {
    ResidualFamily::ALL.iter().map(|f| check_family(*f, setup, configs, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sphere_model;
    use approx::assert_relative_eq;

    #[test]
    fn linear_residual_gives_its_coefficients() {
        let a = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let j = finite_difference_jacobian(|d| DVector::from_element(1, a.dot(d) + 3.0), &[1e-3, 1e-6, 1e-1]);
        for i in 0..3 {
            assert_relative_eq!(j[(0, i)], a[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn quadratic_residual_gives_twice_theta() {
        let theta = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let j = finite_difference_jacobian(|d| DVector::from_element(1, (&theta + d).norm_squared()), &[1e-5; 3]);
        for i in 0..3 {
            assert!((j[(0, i)] - 2.0 * theta[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn every_family_passes_on_a_sphere_model() {
        let model = sphere_model().unwrap();
        let setup = OracleSetup {
            model: &model,
            camera: SceneCamera::default(),
        };
        for r in check_all(&setup, 20, 3).unwrap() {
            assert!(r.passed(), "{r:?}");
            assert_eq!(r.configs, 20);
        }
    }
}
