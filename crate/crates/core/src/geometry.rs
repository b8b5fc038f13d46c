//! Rigid-body poses, twist coordinates and the pinhole stereo rig.
//!
//! Twists are ordered translation first: `[v; w]`, elements 0-2 translational
//! and 3-5 rotational. All Jacobian columns in the crate follow this order.
//! Pose increments are applied on the left, `exp(δξ^)·T`.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// Below this angle `θ / (2 sin θ)` uses its series.
const SMALL_ANGLE: f64 = 1e-8;
/// Below this angle the Rodrigues coefficients use truncated series.
const SERIES_ANGLE: f64 = 1e-2;

/// Largest rotation angle accepted by [`se3_log`].
const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Element of SE(3). Maps points from frame `a` to frame `b` as `R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Rotation by `angle` radians about the camera/object y axis.
    pub fn from_yaw(angle: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = angle.sin_cos();
        let r = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        Self::new(r, translation)
    }

    /// Builds a pose from a homogeneous matrix, rejecting non-rigid input.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument("pose matrix bottom row must be [0 0 0 1]".into()));
        }
        let orth = (r * r.transpose() - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("pose rotation is not orthonormal with det +1".into()));
        }
        Ok(Self::new(r, t))
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = 0.5 * vee(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Tangent vector of SE(3): `v` translational part, `w` rotational part.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl Twist {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Self { v, w }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self::new(Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5]))
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self::new(Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5]))
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.v.x, self.v.y, self.v.z, self.w.x, self.w.y, self.w.z)
    }

    /// The 4×4 matrix `ξ^` in se(3).
    pub fn hat(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.w));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.v);
        m
    }
}

/// Coefficients `(sinθ/θ, (1-cosθ)/θ², (θ-sinθ)/θ³)`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SERIES_ANGLE {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
        )
    } else {
        let s = theta.sin();
        let h = (0.5 * theta).sin();
        (s / theta, 2.0 * h * h / t2, (theta - s) / (t2 * theta))
    }
}

/// Exponential map se(3) → SE(3).
pub fn se3_exp(xi: &Twist) -> Pose {
    let theta = xi.w.norm();
    let (a, b, c) = rodrigues_coefficients(theta);
    let k = skew(&xi.w);
    let k2 = k * k;
    let r = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    Pose::new(r, v * xi.v)
}

/// Logarithm SE(3) → se(3). Rotations within 1e-6 of π are rejected.
pub fn se3_log(p: &Pose) -> Result<Twist> {
    let r = &p.rotation;
    let theta = rotation_angle(r);
    if theta > LOG_ANGLE_LIMIT {
        return Err(Error::Degenerate(format!(
            "rotation angle {theta} too close to π for a unique logarithm"
        )));
    }
    let axis_part = vee(&(r - r.transpose()));
    let w = if theta < SMALL_ANGLE {
        axis_part * (0.5 * (1.0 + theta * theta / 6.0))
    } else {
        axis_part * (theta / (2.0 * theta.sin()))
    };
    let k = skew(&w);
    let coeff = if theta < SERIES_ANGLE {
        // series of (1 - a/(2b)) / θ² around 0
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let (a, b, _) = rodrigues_coefficients(theta);
        (1.0 - a / (2.0 * b)) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - k * 0.5 + (k * k) * coeff;
    Ok(Twist::new(v_inv * p.translation, w))
}

/// Infinitesimal generators `G0..G5` of SE(3), translation generators first.
pub fn se3_generators() -> [Matrix4<f64>; 6] {
    let mut g = [Matrix4::zeros(); 6];
    g[0][(0, 3)] = 1.0;
    g[1][(1, 3)] = 1.0;
    g[2][(2, 3)] = 1.0;
    g[3][(1, 2)] = -1.0;
    g[3][(2, 1)] = 1.0;
    g[4][(0, 2)] = 1.0;
    g[4][(2, 0)] = -1.0;
    g[5][(0, 1)] = -1.0;
    g[5][(1, 0)] = 1.0;
    g
}

/// `∂(exp(δξ^)·x)/∂δξ` at `δξ = 0`: columns are `G_k·[x; 1]` (first three rows).
pub fn point_jacobian(x: &Vector3<f64>) -> nalgebra::Matrix3x6<f64> {
    let mut j = nalgebra::Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(x)));
    j
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
}

impl CameraIntrinsics {
    pub fn new(fu: f64, fv: f64, cu: f64, cv: f64) -> Result<Self> {
        if !(fu > 0.0 && fv > 0.0) {
            return Err(Error::InvalidArgument(format!("focal lengths must be positive (got {fu}, {fv})")));
        }
        Ok(Self { fu, fv, cu, cv })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fu, 0.0, self.cu, 0.0, self.fv, self.cv, 0.0, 0.0, 1.0)
    }

    /// Ray direction with unit z component: `K⁻¹·(u, v, 1)`.
    pub fn ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cu) / self.fu, (p.y - self.cv) / self.fv, 1.0)
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        if x.z <= 0.0 {
            return Err(Error::BehindCamera(x.z));
        }
        Ok(Vector2::new(self.fu * x.x / x.z + self.cu, self.fv * x.y / x.z + self.cv))
    }

    pub fn backproject(&self, p: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if depth <= 0.0 {
            return Err(Error::NonPositiveDepth(depth));
        }
        Ok(self.ray(p) * depth)
    }
}

pub fn project(k: &CameraIntrinsics, x: &Vector3<f64>) -> Result<Vector2<f64>> {
    k.project(x)
}

pub fn backproject(k: &CameraIntrinsics, p: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    k.backproject(p, depth)
}

/// Two pinhole cameras with the left→right extrinsic `X_r = R·X_l + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoRig {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
    pub left_to_right: Pose,
}

impl StereoRig {
    /// Rectified rig with identical cameras and the right camera `baseline`
    /// meters along +x of the left one.
    pub fn rectified(k: CameraIntrinsics, baseline: f64) -> Self {
        Self {
            left: k,
            right: k,
            left_to_right: Pose::from_translation(Vector3::new(-baseline, 0.0, 0.0)),
        }
    }

    pub fn baseline(&self) -> f64 {
        self.left_to_right.inverse().translation.norm()
    }

    pub fn right_to_left(&self) -> Pose {
        self.left_to_right.inverse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    /// Matrix exponential by scaling and squaring of a truncated series.
    fn expm(m: &Matrix4<f64>) -> Matrix4<f64> {
        let s = 20;
        let scaled = m / f64::from(1u32 << s);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..12 {
            term = term * scaled / k as f64;
            sum += term;
        }
        for _ in 0..s {
            sum = sum * sum;
        }
        sum
    }

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
        let v = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        Twist::new(v, axis * rng.random_range(0.0..max_angle))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(se3_exp(&Twist::zero()), Pose::identity());
    }

    #[test]
    fn exp_of_pure_translation() {
        let p = se3_exp(&Twist::new(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros()));
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn exp_quarter_turn_about_z_matches_matrix_exponential() {
        let xi = Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, FRAC_PI_2));
        let p = se3_exp(&xi);
        let reference = expm(&xi.hat());
        assert_relative_eq!(p.to_matrix(), reference, epsilon = 1e-10);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(p.rotation, expected, epsilon = 1e-12);
        assert_relative_eq!(p.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn exp_matches_matrix_exponential_for_random_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let xi = random_twist(&mut rng, 3.0);
            assert_relative_eq!(se3_exp(&xi).to_matrix(), expm(&xi.hat()), epsilon = 1e-8);
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Twist::zero());
    }

    #[test]
    fn log_inverts_exp_on_example() {
        let xi = Twist::new(Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.0, 0.0, 0.3));
        let back = se3_log(&se3_exp(&xi)).unwrap();
        assert_relative_eq!(back.to_vector(), xi.to_vector(), epsilon = 1e-9);
    }

    #[test]
    fn log_rejects_half_turn() {
        let xi = Twist::new(Vector3::zeros(), Vector3::new(std::f64::consts::PI, 0.0, 0.0));
        assert!(matches!(se3_log(&se3_exp(&xi)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn exp_log_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, 3.0);
            let p = se3_exp(&xi);
            let back = se3_log(&p).unwrap();
            assert!((back.to_vector() - xi.to_vector()).norm() < 1e-9);
            assert_relative_eq!(se3_exp(&back).to_matrix(), p.to_matrix(), epsilon = 1e-9);
        }
    }

    #[test]
    fn tiny_rotations_round_trip() {
        for &angle in &[0.0, 1e-12, 1e-9, 1e-7, 1e-5, 1e-3] {
            let xi = Twist::new(Vector3::new(0.3, -0.2, 1.0), Vector3::new(angle, -angle, 0.5 * angle));
            let back = se3_log(&se3_exp(&xi)).unwrap();
            let err = (back.to_vector() - xi.to_vector()).norm();
            assert!(err < 1e-10, "angle {angle}: {err}");
        }
    }

    #[test]
    fn pose_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = se3_exp(&random_twist(&mut rng, 3.0));
            let r = p.rotation;
            assert_relative_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-9);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-9);
            let id = p.compose(&p.inverse());
            assert_relative_eq!(id.to_matrix(), Matrix4::identity(), epsilon = 1e-9);
        }
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let a = se3_exp(&random_twist(&mut rng, 3.0));
            let b = se3_exp(&random_twist(&mut rng, 3.0));
            let c = se3_exp(&random_twist(&mut rng, 3.0));
            assert_relative_eq!((a * b * c).to_matrix(), (a * (b * c)).to_matrix(), epsilon = 1e-9);
        }
    }

    #[test]
    fn generators_match_printed_matrices() {
        let g = se3_generators();
        let mut g0 = Matrix4::zeros();
        g0[(0, 3)] = 1.0;
        assert_eq!(g[0], g0);
        let block: Matrix3<f64> = g[5].fixed_view::<3, 3>(0, 0).into_owned();
        assert_eq!(block, Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(g[5].column(3).sum(), 0.0);
        assert_eq!(g[3][(1, 2)], -1.0);
        assert_eq!(g[3][(2, 1)], 1.0);
        assert_eq!(g[4][(0, 2)], 1.0);
        assert_eq!(g[4][(2, 0)], -1.0);
    }

    #[test]
    fn generators_are_derivatives_of_exp_at_identity() {
        let eps = 1e-6;
        for (k, gk) in se3_generators().iter().enumerate() {
            let mut d = Vector6::zeros();
            d[k] = eps;
            let plus = se3_exp(&Twist::from_vector(&d)).to_matrix();
            let minus = se3_exp(&Twist::from_vector(&(-d))).to_matrix();
            let fd = (plus - minus) / (2.0 * eps);
            assert_relative_eq!(fd, *gk, epsilon = 1e-6);
            // first order: exp(εG) ≈ I + εG
            assert!((plus - (Matrix4::identity() + gk * eps)).abs().max() < 1e-11);
        }
    }

    #[test]
    fn point_jacobian_matches_generators() {
        let x = Vector3::new(0.4, -1.2, 3.0);
        let j = point_jacobian(&x);
        for (k, gk) in se3_generators().iter().enumerate() {
            let col = gk * x.push(1.0);
            assert_relative_eq!(j.column(k).into_owned(), col.xyz(), epsilon = 1e-15);
        }
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
        assert_eq!(k.project(&Vector3::new(1.0, 2.0, 2.0)).unwrap(), Vector2::new(50.0, 100.0));
        assert_eq!(k.backproject(&Vector2::new(50.0, 100.0), 2.0).unwrap(), Vector3::new(1.0, 2.0, 2.0));
        let k2 = CameraIntrinsics::new(700.0, 710.0, 320.0, 240.0).unwrap();
        assert_eq!(k2.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(320.0, 240.0));
        assert_eq!(
            k2.backproject(&Vector2::new(320.0, 240.0), 3.0).unwrap(),
            Vector3::new(0.0, 0.0, 3.0)
        );
    }

    #[test]
    fn projection_rejects_nonpositive_depth() {
        let k = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
        assert!(matches!(k.project(&Vector3::new(0.0, 0.0, 0.0)), Err(Error::BehindCamera(_))));
        assert!(matches!(
            k.backproject(&Vector2::new(1.0, 1.0), -1.0),
            Err(Error::NonPositiveDepth(_))
        ));
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn projection_round_trips() {
        let k = CameraIntrinsics::new(721.5, 721.5, 609.6, 172.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.5..60.0),
            );
            let back = k.backproject(&k.project(&x).unwrap(), x.z).unwrap();
            assert_relative_eq!(back, x, epsilon = 1e-9);
            let p = Vector2::new(rng.random_range(0.0..1242.0), rng.random_range(0.0..375.0));
            let again = k.project(&k.backproject(&p, x.z).unwrap()).unwrap();
            assert_relative_eq!(again, p, epsilon = 1e-9);
        }
    }
}
