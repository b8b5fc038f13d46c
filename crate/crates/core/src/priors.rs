//! Shape, ground-plane translation and up-axis rotation priors.
//!
//! Pose arguments are the camera-to-object transform `T_c^o`; twist
//! increments are applied on its left.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{se3_generators, Pose};

/// Plane `n·X + d = 0` in camera coordinates. The normal is stored pointing
/// up (negative y in a y-down camera frame), which the rotation prior needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    normal: Vector3<f64>,
    offset: f64,
}

impl GroundPlane {
    /// Normalizes `(n, d)` jointly and flips it so that `n_y < 0`.
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0 && len.is_finite() && offset.is_finite()) {
            return Err(Error::InvalidArgument("ground plane normal must be finite and non-zero".into()));
        }
        let (mut n, mut d) = (normal / len, offset / len);
        if n.y.abs() < 1e-6 {
            return Err(Error::InvalidArgument("ground plane must not be vertical".into()));
        }
        if n.y > 0.0 {
            n = -n;
            d = -d;
        }
        Ok(Self { normal: n, offset: d })
    }

    /// Camera `height` meters above a level ground (y down).
    pub fn level(height: f64) -> Self {
        Self {
            normal: Vector3::new(0.0, -1.0, 0.0),
            offset: height,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Signed distance of `x`, positive above the plane.
    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(x) + self.offset
    }

    /// Height of the plane below `(x, ·, z)`: the `y` with `n·(x, y, z) + d = 0`.
    pub fn height_at(&self, x: f64, z: f64) -> f64 {
        -(self.normal.x * x + self.normal.z * z + self.offset) / self.normal.y
    }
}

impl Default for GroundPlane {
    fn default() -> Self {
        Self::level(1.65)
    }
}

/// `r_i = z_i/σ_i`, with the `K × (6+K)` Jacobian.
pub fn shape_prior(z: &[f64], sigmas: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if z.len() != sigmas.len() {
        return Err(Error::DimensionMismatch {
            expected: sigmas.len(),
            actual: z.len(),
        });
    }
    if sigmas.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument("sigmas must be positive".into()));
    }
    let k = z.len();
    let r = DVector::from_iterator(k, z.iter().zip(sigmas).map(|(zi, si)| zi / si));
    let mut j = DMatrix::zeros(k, 6 + k);
    for (i, s) in sigmas.iter().enumerate() {
        j[(i, 6 + i)] = 1.0 / s;
    }
    Ok((r, j))
}

/// Object origin (car bottom) height above the plane, measured along camera y:
/// `r = t_y + (n_x t_x + n_z t_z + d)/n_y` with `t` the object position.
pub fn translation_prior(camera_to_object: &Pose, plane: &GroundPlane) -> (f64, DVector<f64>) {
    let object_to_camera = camera_to_object.inverse();
    let t = object_to_camera.translation;
    let n = plane.normal;
    let r = t.y + (n.x * t.x + n.z * t.z + plane.offset) / n.y;
    let coeff = Vector3::new(n.x / n.y, 1.0, n.z / n.y);
    // t_o^c under the left increment: (T_c^o)⁻¹·exp(−δξ̂), so ∂t/∂δξ_k = −(T_o^c·G_k)(0:2, 3)
    let m = object_to_camera.to_matrix();
    let gens = se3_generators();
    let mut j = DVector::zeros(6);
    for (k, g) in gens.iter().enumerate() {
        let dm = m * g;
        let dt = -Vector3::new(dm[(0, 3)], dm[(1, 3)], dm[(2, 3)]);
        j[k] = coeff.dot(&dt);
    }
    (r, j)
}

/// `r = 1 + ⟨row₁(R_c^o), n_g⟩`, zero when the object's up axis (−y) agrees
/// with the plane normal; in `[0, 2]`.
pub fn rotation_prior(camera_to_object: &Pose, plane: &GroundPlane) -> (f64, DVector<f64>) {
    let n = plane.normal;
    let row = camera_to_object.rotation.row(1).transpose();
    let r = 1.0 + row.dot(&n);
    let m = camera_to_object.to_matrix();
    let gens = se3_generators();
    let mut j = DVector::zeros(6);
    for (k, g) in gens.iter().enumerate() {
        let dm = g * m;
        j[k] = dm[(1, 0)] * n.x + dm[(1, 1)] * n.y + dm[(1, 2)] * n.z;
    }
    (r, j)
}
