//! Differentiable silhouette projection and the per-pixel silhouette residual.
//!
//! Grids store distances negative inside. The projection is evaluated on the
//! inside-positive field `ψ = −Φ`, i.e. each ray sample contributes the factor
//! `C = 1/(e^{ψζ} + 1) = σ(Φζ)`: samples far outside give `C ≈ 1`, samples
//! inside give `C ≈ 0`, and `π = 1 − ∏ C`.
//!
//! Samples span the part of the ray inside the model's support box. The box
//! moves with the object, so the sample positions depend on the pose; the
//! Jacobian accounts for that through the derivatives of the clip end points.

use nalgebra::{DVector, Vector3};

use crate::geometry::{point_jacobian, Pose};
use crate::sdf::clip_ray_faces;
use crate::shape::ShapeInstance;

/// Default contour smoothness ζ, per meter.
pub const DEFAULT_ZETA: f64 = 75.0;
/// Default number of interior samples per ray (the two clip end points are added).
pub const DEFAULT_RAY_SAMPLES: usize = 32;
/// Floor on foreground/background probabilities.
pub const EPS_PROB: f64 = 1e-3;

/// Ray samples of one pixel, in the object frame, with cached field data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RaySampleSet {
    /// Sample positions in the camera frame the ray was cast from.
    pub points_camera: Vec<Vector3<f64>>,
    pub points_object: Vec<Vector3<f64>>,
    pub values: Vec<f64>,
    pub gradients: Vec<Vector3<f64>>,
    /// Row-major `len × K` basis values at each sample.
    pub basis: Vec<f64>,
    pub clamped: Vec<bool>,
    /// `log C` per sample.
    pub log_factors: Vec<f64>,
    /// Object-frame motion of every sample per unit twist, beyond the rigid
    /// motion of a fixed camera-frame point. Empty for fixed samples.
    pub sliding: Vec<[f64; 6]>,
    /// Ray direction in the object frame.
    pub dir_object: Vector3<f64>,
}

impl RaySampleSet {
    pub fn len(&self) -> usize {
        self.points_object.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_object.is_empty()
    }
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample factor `C(Φ) = 1/(e^{−Φζ} + 1)`.
pub fn sample_factor(phi: f64, zeta: f64) -> f64 {
    sigmoid(phi * zeta)
}

/// `∂C/∂ψ` with `ψ = −Φ`; equals `−ζ/4` on the surface.
pub fn sample_factor_derivative(phi: f64, zeta: f64) -> f64 {
    let c = sigmoid(phi * zeta);
    -zeta * c * (1.0 - c)
}

/// `π = 1 − exp(Σ log C)` from per-sample field values.
pub fn pi_from_values(values: &[f64], zeta: f64) -> f64 {
    let b: f64 = values.iter().map(|&phi| log_sigmoid(phi * zeta)).sum();
    -b.exp_m1()
}

/// Ray parameters of the sample positions on the segment `[t0, t1]`:
/// both end points plus `n` evenly spaced interior points.
pub fn sample_parameters(t0: f64, t1: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = (t1 - t0) / (n + 1) as f64;
    (0..n + 2).map(move |j| if j == n + 1 { t1 } else { t0 + j as f64 * step })
}

/// Samples of one ray, in the camera frame, with the ray-parameter
/// derivative of each sample with respect to the twist.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RaySegment {
    pub points_camera: Vec<Vector3<f64>>,
    pub dt: Vec<[f64; 6]>,
}

/// `∂t/∂δξ` of the point where the ray crosses a box face normal to `axis`:
/// the face is fixed in the object frame while the ray moves with the pose.
fn face_crossing_derivative(x_object: &Vector3<f64>, dir_object: &Vector3<f64>, axis: usize) -> [f64; 6] {
    let j = point_jacobian(x_object);
    let mut out = [0.0; 6];
    for (k, o) in out.iter_mut().enumerate() {
        *o = -j[(axis, k)] / dir_object[axis];
    }
    out
}

/// Places samples along the camera ray `origin + t·dir` clipped to the
/// model's support box; empty when the ray misses.
pub fn ray_segment(shape: &ShapeInstance, camera_to_object: &Pose, origin: &Vector3<f64>, dir: &Vector3<f64>, n: usize) -> RaySegment {
    let o = camera_to_object.transform_point(origin);
    let d = camera_to_object.transform_vector(dir);
    let (lo, hi) = shape.model().support();
    let Some(clip) = clip_ray_faces(&lo, &hi, &o, &d) else {
        return RaySegment::default();
    };
    let dt0 = clip
        .entry_axis
        .map(|a| face_crossing_derivative(&(o + d * clip.t0), &d, a))
        .unwrap_or([0.0; 6]);
    let dt1 = face_crossing_derivative(&(o + d * clip.t1), &d, clip.exit_axis);
    let mut seg = RaySegment::default();
    for (j, t) in sample_parameters(clip.t0, clip.t1, n).enumerate() {
        let f = j as f64 / (n + 1) as f64;
        seg.points_camera.push(origin + dir * t);
        seg.dt.push(std::array::from_fn(|k| (1.0 - f) * dt0[k] + f * dt1[k]));
    }
    seg
}

/// Camera-frame sample points of [`ray_segment`].
pub fn ray_samples(
    shape: &ShapeInstance,
    camera_to_object: &Pose,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    n: usize,
) -> Vec<Vector3<f64>> {
    ray_segment(shape, camera_to_object, origin, dir, n).points_camera
}

/// Evaluates the field at fixed camera-frame samples under the current pose
/// and shape.
pub fn evaluate_samples(shape: &ShapeInstance, camera_to_object: &Pose, points_camera: Vec<Vector3<f64>>, zeta: f64) -> RaySampleSet {
    let k = shape.num_components();
    let mut set = RaySampleSet {
        points_object: Vec::with_capacity(points_camera.len()),
        values: Vec::with_capacity(points_camera.len()),
        gradients: Vec::with_capacity(points_camera.len()),
        basis: Vec::with_capacity(points_camera.len() * k),
        clamped: Vec::with_capacity(points_camera.len()),
        log_factors: Vec::with_capacity(points_camera.len()),
        points_camera: Vec::new(),
        sliding: Vec::new(),
        dir_object: Vector3::zeros(),
    };
    for xc in &points_camera {
        let xo = camera_to_object.transform_point(xc);
        let s = shape.sample(&xo);
        set.points_object.push(xo);
        set.values.push(s.value);
        set.gradients.push(s.gradient);
        set.basis.extend_from_slice(&s.basis);
        set.clamped.push(s.out_of_bounds);
        set.log_factors.push(log_sigmoid(s.value * zeta));
    }
    set.points_camera = points_camera;
    set
}

/// Silhouette projection π of the ray `origin + t·dir` (camera frame).
pub fn pi_project(
    shape: &ShapeInstance,
    camera_to_object: &Pose,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    zeta: f64,
    ray_samples_count: usize,
) -> (f64, RaySampleSet) {
    let seg = ray_segment(shape, camera_to_object, origin, dir, ray_samples_count);
    let mut set = evaluate_samples(shape, camera_to_object, seg.points_camera, zeta);
    set.sliding = seg.dt;
    set.dir_object = camera_to_object.transform_vector(dir);
    (pi_of(&set), set)
}

/// π alone, without caching derivative data.
pub fn pi_value(
    shape: &ShapeInstance,
    camera_to_object: &Pose,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    zeta: f64,
    ray_samples_count: usize,
) -> f64 {
    let b: f64 = ray_samples(shape, camera_to_object, origin, dir, ray_samples_count)
        .iter()
        .map(|xc| log_sigmoid(shape.value(&camera_to_object.transform_point(xc)) * zeta))
        .sum();
    -b.exp_m1()
}

/// π from a sample set; zero for an empty set.
pub fn pi_of(set: &RaySampleSet) -> f64 {
    let b: f64 = set.log_factors.iter().sum();
    -b.exp_m1()
}

/// `∂π/∂[δξ; z]`, with the twist increment applied on the left of the
/// camera-to-object pose. Samples slide along the ray as recorded in
/// `set.sliding`; with no sliding data they are held fixed in the camera frame.
pub fn pi_jacobian(set: &RaySampleSet, k: usize, zeta: f64) -> DVector<f64> {
    let mut jac = DVector::zeros(6 + k);
    if set.is_empty() {
        return jac;
    }
    let e_b = set.log_factors.iter().sum::<f64>().exp();
    for j in 0..set.len() {
        if set.clamped[j] {
            continue;
        }
        // ∂π/∂Φ_j = −e^B·ζ·(1 − C_j), 1 − C_j = σ(−Φ_j ζ)
        let dpi_dphi = -e_b * zeta * sigmoid(-set.values[j] * zeta);
        if dpi_dphi == 0.0 {
            continue;
        }
        let g = &set.gradients[j];
        let dphi_dxi = g.transpose() * point_jacobian(&set.points_object[j]);
        let along = set.sliding.get(j).map(|_| g.dot(&set.dir_object));
        for a in 0..6 {
            let slide = along.map_or(0.0, |v| v * set.sliding[j][a]);
            jac[a] += dpi_dphi * (dphi_dxi[a] + slide);
        }
        for c in 0..k {
            jac[6 + c] += dpi_dphi * set.basis[j * k + c];
        }
    }
    jac
}

/// Floors a foreground probability into `[EPS_PROB, 1 − EPS_PROB]` and returns
/// `(p_fg, p_bg)` with `p_bg = 1 − p_fg`.
pub fn mask_probabilities(mask_value: f64) -> (f64, f64) {
    let p_fg = mask_value.clamp(EPS_PROB, 1.0 - EPS_PROB);
    (p_fg, 1.0 - p_fg)
}

/// `−log(π·p_fg + (1 − π)·p_bg)`; nonnegative for probabilities in `[0, 1]`.
pub fn silhouette_residual(pi: f64, p_fg: f64, p_bg: f64) -> f64 {
    let a = pi * p_fg + (1.0 - pi) * p_bg;
    (-a.ln()).max(0.0)
}

/// `∂r/∂π = −(p_fg − p_bg)/A`.
pub fn silhouette_residual_derivative(pi: f64, p_fg: f64, p_bg: f64) -> f64 {
    let a = pi * p_fg + (1.0 - pi) * p_bg;
    -(p_fg - p_bg) / a
}

/// Silhouette residual of one pixel with its Jacobian and IRLS weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteResidual {
    pub value: f64,
    pub pi: f64,
    pub jacobian: DVector<f64>,
    pub irls_weight: f64,
}

/// Full silhouette residual evaluation for the ray `origin + t·dir`.
#[allow(clippy::too_many_arguments)]
pub fn silhouette_term(
    shape: &ShapeInstance,
    camera_to_object: &Pose,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    p_fg: f64,
    p_bg: f64,
    zeta: f64,
    ray_samples_count: usize,
    eps_irls: f64,
) -> SilhouetteResidual {
    let (pi, set) = pi_project(shape, camera_to_object, origin, dir, zeta, ray_samples_count);
    silhouette_jacobian(&set, pi, p_fg, p_bg, shape.num_components(), zeta, eps_irls)
}

/// Composes `∂r/∂π` with `∂π/∂[δξ; z]` for a cached sample set.
pub fn silhouette_jacobian(set: &RaySampleSet, pi: f64, p_fg: f64, p_bg: f64, k: usize, zeta: f64, eps_irls: f64) -> SilhouetteResidual {
    let value = silhouette_residual(pi, p_fg, p_bg);
    let dr_dpi = silhouette_residual_derivative(pi, p_fg, p_bg);
    let jacobian = if dr_dpi == 0.0 {
        DVector::zeros(6 + k)
    } else {
        pi_jacobian(set, k, zeta) * dr_dpi
    };
    SilhouetteResidual {
        value,
        pi,
        jacobian,
        irls_weight: irls_weight(value, eps_irls),
    }
}

/// IRLS weight `1/max(r, ε)`, so that `ω′·r² = r` at the linearization point.
pub fn irls_weight(r: f64, eps_irls: f64) -> f64 {
    1.0 / r.max(eps_irls)
}
