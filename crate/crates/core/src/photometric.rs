//! Left-to-right photometric residuals through ray-cast depth.

use nalgebra::{DVector, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_jacobian, Pose, StereoRig};
use crate::image::GrayImage;
use crate::sdf::COS_MIN;
use crate::shape::ShapeInstance;

pub const DEFAULT_HUBER: f64 = 0.03;
pub const DEFAULT_GRADIENT_C: f64 = 0.2;

/// Neighborhood `N_p` of a sampled pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PatchPattern {
    Single,
    Five,
    #[default]
    Eight,
}

impl PatchPattern {
    pub fn offsets(self) -> &'static [(i32, i32)] {
        match self {
            PatchPattern::Single => &[(0, 0)],
            PatchPattern::Five => &[(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)],
            PatchPattern::Eight => &[(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1)],
        }
    }

    pub fn len(self) -> usize {
        self.offsets().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

/// Left pixel at z-depth `d` mapped into the right image.
pub fn warp_pixel(rig: &StereoRig, p: &Vector2<f64>, d: f64) -> Result<Vector2<f64>> {
    let xl = rig.left.backproject(p, d)?;
    rig.right.project(&rig.left_to_right.transform_point(&xl))
}

/// `∂warp/∂d` at `(p, d)`.
pub fn warp_depth_derivative(rig: &StereoRig, p: &Vector2<f64>, d: f64) -> Result<Vector2<f64>> {
    let m = rig.left.ray(p);
    let xr = rig.left_to_right.transform_point(&(m * d));
    if xr.z <= 0.0 {
        return Err(Error::BehindCamera(xr.z));
    }
    Ok(projection_jacobian(rig, &xr) * (rig.left_to_right.rotation * m))
}

fn projection_jacobian(rig: &StereoRig, xr: &Vector3<f64>) -> Matrix2x3<f64> {
    let k = &rig.right;
    let iz = 1.0 / xr.z;
    Matrix2x3::new(k.fu * iz, 0.0, -k.fu * xr.x * iz * iz, 0.0, k.fv * iz, -k.fv * xr.y * iz * iz)
}

/// `ω_p = c²/(c² + ‖∇I‖²)`.
pub fn gradient_weight(grad: &Vector2<f64>, c: f64) -> f64 {
    let c2 = c * c;
    c2 / (c2 + grad.norm_squared())
}

/// Huber cost, quadratic up to `γ` and linear beyond, C¹ at the seam.
pub fn huber_cost(r: f64, gamma: f64) -> f64 {
    let a = r.abs();
    if a <= gamma {
        r * r
    } else {
        2.0 * gamma * a - gamma * gamma
    }
}

/// IRLS weight turning the Huber cost into a reweighted square.
pub fn huber_weight(r: f64, gamma: f64) -> f64 {
    let a = r.abs();
    if a <= gamma {
        1.0
    } else {
        gamma / a
    }
}

/// Depth of the first surface crossing along the left ray through `p`,
/// with `∂d/∂[δξ; z]` when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHit {
    /// z-depth in the left camera frame.
    pub depth: f64,
    pub point_object: Vector3<f64>,
    pub normal_cos: f64,
    pub jacobian: Option<DVector<f64>>,
}

/// Ray-casts the decoded shape through left pixel `p`. The depth derivative
/// is the implicit derivative of `Φ(T·(d·m)) = 0`, with the incidence cosine
/// clamped at [`COS_MIN`].
pub fn depth_at_pixel(
    shape: &ShapeInstance,
    camera_to_object: &Pose,
    rig: &StereoRig,
    p: &Vector2<f64>,
    with_jacobian: bool,
) -> Option<DepthHit> {
    let m = rig.left.ray(p);
    let m_norm = m.norm();
    let origin = camera_to_object.translation;
    let dir = camera_to_object.rotation * (m / m_norm);
    let (lo, hi) = shape.model().support();
    let hit = shape.grid().raycast_in(&origin, &dir, &lo, &hi, &Default::default())?;
    let depth = hit.depth / m_norm;
    if depth <= 0.0 {
        return None;
    }
    let xo = hit.point_object;
    let s = shape.sample(&xo);
    let g = s.gradient;
    let gn = g.norm();
    let dir_dot = g.dot(&dir);
    let normal_cos = if gn > 0.0 { (dir_dot / gn).abs().max(COS_MIN) } else { COS_MIN };
    let jacobian = if with_jacobian && gn > 0.0 && !s.out_of_bounds {
        let k = shape.num_components();
        // ∂Φ/∂d along m: g·R m, negative when entering the surface
        let along = (-dir_dot).max(COS_MIN * gn) * m_norm;
        let dphi_dxi = g.transpose() * point_jacobian(&xo);
        let mut jac = DVector::zeros(6 + k);
        for a in 0..6 {
            jac[a] = dphi_dxi[a] / along;
        }
        for c in 0..k {
            jac[6 + c] = s.basis[c] / along;
        }
        Some(jac)
    } else if with_jacobian {
        Some(DVector::zeros(6 + shape.num_components()))
    } else {
        None
    };
    Some(DepthHit {
        depth,
        point_object: xo,
        normal_cos,
        jacobian,
    })
}

/// Per-patch photometric residuals of one sampled pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotoResidual {
    pub depth: f64,
    /// `ω_p` of the central pixel.
    pub grad_weight: f64,
    /// Residuals of the patch pixels that warped inside the right image.
    pub values: Vec<f64>,
    pub huber_weights: Vec<f64>,
    /// Unweighted `∂r/∂[δξ; z]` per kept residual, when requested.
    pub jacobians: Vec<DVector<f64>>,
}

impl PhotoResidual {
    /// `ω_p·Σ ρ_γ(r)` over the kept patch pixels.
    pub fn cost(&self, gamma: f64) -> f64 {
        self.grad_weight * self.values.iter().map(|&r| huber_cost(r, gamma)).sum::<f64>()
    }
}

/// Residual `I_r(warp(p̃, d)) − I_l(p̃)`, `None` when either sample falls
/// outside its image.
pub fn photometric_residual(left: &GrayImage, right: &GrayImage, rig: &StereoRig, p_tilde: &Vector2<f64>, d: f64) -> Option<f64> {
    let il = left.sample(p_tilde.x, p_tilde.y)?;
    let w = warp_pixel(rig, p_tilde, d).ok()?;
    Some(right.sample(w.x, w.y)? - il)
}

/// Photometric residuals for the patch around left pixel `p`; `None` when the
/// ray through `p` misses the shape.
#[allow(clippy::too_many_arguments)]
pub fn photometric_term(
    shape: &ShapeInstance,
    camera_to_object: &Pose,
    rig: &StereoRig,
    left: &GrayImage,
    right: &GrayImage,
    p: (usize, usize),
    pattern: PatchPattern,
    gamma: f64,
    c: f64,
    with_jacobian: bool,
) -> Option<PhotoResidual> {
    let center = Vector2::new(p.0 as f64, p.1 as f64);
    let hit = depth_at_pixel(shape, camera_to_object, rig, &center, with_jacobian)?;
    let d = hit.depth;
    let grad_weight = gradient_weight(&left.central_gradient(p.0, p.1), c);
    let mut out = PhotoResidual {
        depth: d,
        grad_weight,
        values: Vec::with_capacity(pattern.len()),
        huber_weights: Vec::with_capacity(pattern.len()),
        jacobians: Vec::new(),
    };
    for &(du, dv) in pattern.offsets() {
        let pt = Vector2::new(center.x + du as f64, center.y + dv as f64);
        let Some(il) = left.sample(pt.x, pt.y) else { continue };
        let Ok(w) = warp_pixel(rig, &pt, d) else { continue };
        let Some((ir, grad_r)) = right.sample_with_gradient(w.x, w.y) else {
            continue;
        };
        let r = ir - il;
        out.values.push(r);
        out.huber_weights.push(huber_weight(r, gamma));
        if let Some(dd) = &hit.jacobian {
            let Ok(dw) = warp_depth_derivative(rig, &pt, d) else {
                out.jacobians.push(DVector::zeros(dd.len()));
                continue;
            };
            out.jacobians.push(dd * grad_r.dot(&dw));
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig() -> StereoRig {
        StereoRig::rectified(CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0).unwrap(), 0.54)
    }

    #[test]
    fn rectified_warp_is_disparity() {
        let r = rig();
        let p = Vector2::new(100.0, 80.0);
        let w = warp_pixel(&r, &p, 10.0).unwrap();
        assert_relative_eq!(w.x, 100.0 - 300.0 * 0.54 / 10.0, epsilon = 1e-12);
        assert_relative_eq!(w.y, 80.0, epsilon = 1e-12);
        let far = warp_pixel(&r, &p, 1e12).unwrap();
        assert_relative_eq!(far, p, epsilon = 1e-6);
    }

    #[test]
    fn rectified_warp_depth_derivative() {
        let r = rig();
        let p = Vector2::new(40.0, 200.0);
        let d = 7.5;
        let dw = warp_depth_derivative(&r, &p, d).unwrap();
        assert_relative_eq!(dw.x, 300.0 * 0.54 / (d * d), epsilon = 1e-12);
        assert_relative_eq!(dw.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn general_warp_matches_composition_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let k = CameraIntrinsics::new(
                rng.random_range(200.0..800.0),
                rng.random_range(200.0..800.0),
                rng.random_range(100.0..400.0),
                rng.random_range(100.0..300.0),
            )
            .unwrap();
            let ext = crate::geometry::se3_exp(&crate::geometry::Twist::new(
                Vector3::new(
                    rng.random_range(-0.6..0.0),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ),
                Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ),
            ));
            let rig = StereoRig {
                left: k,
                right: k,
                left_to_right: ext,
            };
            let p = Vector2::new(rng.random_range(0.0..600.0), rng.random_range(0.0..400.0));
            let d = rng.random_range(2.0..40.0);
            let w = warp_pixel(&rig, &p, d).unwrap();
            let oracle = k
                .project(&(ext.rotation * (k.matrix().try_inverse().unwrap() * p.push(1.0) * d) + ext.translation))
                .unwrap();
            assert_relative_eq!(w, oracle, epsilon = 1e-8);
            // back from the right camera with the inverse extrinsics
            let xr = ext.transform_point(&k.backproject(&p, d).unwrap());
            let back_rig = StereoRig {
                left: k,
                right: k,
                left_to_right: ext.inverse(),
            };
            let back = warp_pixel(&back_rig, &w, xr.z).unwrap();
            assert!((back - p).norm() < 1e-6);
        }
    }

    #[test]
    fn gradient_weight_examples() {
        let c = 0.2;
        assert_eq!(gradient_weight(&Vector2::zeros(), c), 1.0);
        assert_relative_eq!(gradient_weight(&Vector2::new(c, 0.0), c), 0.5, epsilon = 1e-15);
        assert_relative_eq!(gradient_weight(&Vector2::new(0.0, 3.0 * c), c), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn huber_is_continuous_and_c1() {
        let g = 0.03;
        let eps = 1e-9;
        assert_relative_eq!(huber_cost(g - eps, g), huber_cost(g + eps, g), epsilon = 1e-9);
        let slope_in = (huber_cost(g, g) - huber_cost(g - eps, g)) / eps;
        let slope_out = (huber_cost(g + eps, g) - huber_cost(g, g)) / eps;
        assert_relative_eq!(slope_in, slope_out, epsilon = 1e-5);
        assert_eq!(huber_cost(0.01, g), 1e-4);
        assert_relative_eq!(huber_cost(-0.1, g), 2.0 * g * 0.1 - g * g, epsilon = 1e-15);
        assert_eq!(huber_weight(0.01, g), 1.0);
        assert_relative_eq!(huber_weight(0.06, g), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn constant_and_biased_images() {
        let r = rig();
        let left = GrayImage::filled(320, 240, 0.4);
        let right = GrayImage::filled(320, 240, 0.5);
        let p = Vector2::new(160.0, 120.0);
        assert_eq!(photometric_residual(&left, &left, &r, &p, 10.0), Some(0.0));
        assert_relative_eq!(photometric_residual(&left, &right, &r, &p, 10.0).unwrap(), 0.1, epsilon = 1e-12);
        // warping past the left border drops the residual
        assert!(photometric_residual(&left, &left, &r, &Vector2::new(2.0, 120.0), 5.0).is_none());
    }

    #[test]
    fn patterns_have_expected_sizes() {
        assert_eq!(PatchPattern::Single.len(), 1);
        assert_eq!(PatchPattern::Five.len(), 5);
        assert_eq!(PatchPattern::Eight.len(), 8);
        let mut offs = PatchPattern::Eight.offsets().to_vec();
        offs.sort();
        offs.dedup();
        assert_eq!(offs.len(), 8);
    }
}
