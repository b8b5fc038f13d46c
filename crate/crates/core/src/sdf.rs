//! Dense signed-distance voxel grids.
//!
//! Values are stored at voxel centers `origin + (i, j, k)·voxel_size`, x
//! fastest. Negative inside, positive outside. Between centers the field is
//! the trilinear interpolant; its gradient is the exact derivative of that
//! interpolant, so it is piecewise smooth with kinks on cell faces.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Smallest `normal_cos` a ray hit reports.
pub const COS_MIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    dims: [usize; 3],
    origin: Vector3<f64>,
    voxel_size: f64,
    values: Vec<f64>,
}

/// Trilinear stencil of a query point: eight corner indices with weights
/// and the derivative of each weight along x, y, z (per meter).
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub indices: [usize; 8],
    pub weights: [f64; 8],
    pub dweights: [[f64; 3]; 8],
    /// Query point was outside the interpolable box and got clamped.
    pub clamped: bool,
}

impl Stencil {
    pub fn apply(&self, values: &[f64]) -> f64 {
        self.indices.iter().zip(&self.weights).map(|(&i, &w)| w * values[i]).sum()
    }

    pub fn apply_gradient(&self, values: &[f64]) -> Vector3<f64> {
        if self.clamped {
            return Vector3::zeros();
        }
        let mut g = Vector3::zeros();
        for (&i, dw) in self.indices.iter().zip(&self.dweights) {
            let v = values[i];
            g.x += dw[0] * v;
            g.y += dw[1] * v;
            g.z += dw[2] * v;
        }
        g
    }
}

/// Result of [`SdfGrid::sample_checked`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub out_of_bounds: bool,
}

/// First surface crossing of a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Distance along the (unit) ray from its origin, meters.
    pub depth: f64,
    pub point_object: Vector3<f64>,
    /// `|cos|` of the angle between ray and surface normal, at least [`COS_MIN`].
    pub normal_cos: f64,
    /// Field gradient at the hit.
    pub gradient: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct RaycastOptions {
    /// March step as a fraction of the voxel size.
    pub step_fraction: f64,
    /// Stop refining once `|Φ|` is below this.
    pub tolerance: f64,
    pub max_refinements: usize,
}

impl Default for RaycastOptions {
    fn default() -> Self {
        Self {
            step_fraction: 0.5,
            tolerance: 1e-12,
            max_refinements: 60,
        }
    }
}

impl SdfGrid {
    pub fn new(dims: [usize; 3], origin: Vector3<f64>, voxel_size: f64, values: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidGrid(format!("dims {dims:?} must be >= 2 on every axis")));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidGrid(format!("voxel size {voxel_size} must be positive")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            dims,
            origin,
            voxel_size,
            values,
        })
    }

    /// Evaluates `f` at every voxel center.
    pub fn from_fn(dims: [usize; 3], origin: Vector3<f64>, voxel_size: f64, f: impl Fn(&Vector3<f64>) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = origin + Vector3::new(i as f64, j as f64, k as f64) * voxel_size;
                    values.push(f(&p));
                }
            }
        }
        Self::new(dims, origin, voxel_size, values)
    }

    /// Same geometry with new values (checked for length and finiteness).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.origin, self.voxel_size, values)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_geometry(&self, other: &SdfGrid) -> bool {
        self.dims == other.dims && self.origin == other.origin && self.voxel_size == other.voxel_size
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn value_at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.voxel_size
    }

    /// Lower and upper corners of the interpolable box (outermost centers).
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let ext = Vector3::new((self.dims[0] - 1) as f64, (self.dims[1] - 1) as f64, (self.dims[2] - 1) as f64) * self.voxel_size;
        (self.origin, self.origin + ext)
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|a| x[a] >= lo[a] && x[a] <= hi[a])
    }

    pub fn stencil(&self, x: &Vector3<f64>) -> Stencil {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut clamped = false;
        for a in 0..3 {
            let g = (x[a] - self.origin[a]) / self.voxel_size;
            let max_cell = (self.dims[a] - 2) as f64;
            let g_clamped = if g.is_nan() { 0.0 } else { g.clamp(0.0, max_cell + 1.0) };
            if g_clamped != g {
                clamped = true;
            }
            let cell = g_clamped.floor().min(max_cell);
            base[a] = cell as usize;
            frac[a] = g_clamped - cell;
        }
        let [fx, fy, fz] = frac;
        let inv = 1.0 / self.voxel_size;
        let mut indices = [0usize; 8];
        let mut weights = [0.0; 8];
        let mut dweights = [[0.0; 3]; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let wx = if dx == 1 { fx } else { 1.0 - fx };
            let wy = if dy == 1 { fy } else { 1.0 - fy };
            let wz = if dz == 1 { fz } else { 1.0 - fz };
            let sx = if dx == 1 { inv } else { -inv };
            let sy = if dy == 1 { inv } else { -inv };
            let sz = if dz == 1 { inv } else { -inv };
            indices[c] = self.index(base[0] + dx, base[1] + dy, base[2] + dz);
            weights[c] = wx * wy * wz;
            dweights[c] = [sx * wy * wz, wx * sy * wz, wx * wy * sz];
        }
        Stencil {
            indices,
            weights,
            dweights,
            clamped,
        }
    }

    /// Trilinear sample; outside the interpolable box the point is clamped
    /// onto it and the flag is set.
    pub fn sample_checked(&self, x: &Vector3<f64>) -> Sample {
        let s = self.stencil(x);
        Sample {
            value: s.apply(&self.values),
            out_of_bounds: s.clamped,
        }
    }

    pub fn sample(&self, x: &Vector3<f64>) -> f64 {
        self.sample_checked(x).value
    }

    /// Gradient of the trilinear interpolant; zero where clamped.
    pub fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.stencil(x).apply_gradient(&self.values)
    }

    pub fn sample_with_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>, bool) {
        let s = self.stencil(x);
        (s.apply(&self.values), s.apply_gradient(&self.values), s.clamped)
    }

    /// Distance in voxel units from `x` to the nearest cell face, where the
    /// interpolant is not differentiable.
    pub fn distance_to_cell_face(&self, x: &Vector3<f64>) -> f64 {
        (0..3)
            .map(|a| {
                let g = (x[a] - self.origin[a]) / self.voxel_size;
                let f = g - g.floor();
                f.min(1.0 - f)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Parametric range `[t0, t1]` where `origin + t·dir` lies inside the
    /// interpolable box, restricted to `t >= 0`.
    pub fn clip_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let (lo, hi) = self.bounds();
        clip_ray_to_box(&lo, &hi, origin, dir)
    }

    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
        self.raycast_with(origin, dir, &RaycastOptions::default())
    }

    /// Marches a unit ray at a fixed step and refines the first `+ → -`
    /// crossing with a bracketing secant (Illinois) iteration.
    pub fn raycast_with(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, opts: &RaycastOptions) -> Option<RayHit> {
        let (lo, hi) = self.bounds();
        self.raycast_in(origin, dir, &lo, &hi, opts)
    }

    /// Ray cast restricted to the box `[lo, hi]`.
    pub fn raycast_in(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        lo: &Vector3<f64>,
        hi: &Vector3<f64>,
        opts: &RaycastOptions,
    ) -> Option<RayHit> {
        let field = |t: f64| self.sample(&(origin + dir * t));
        let range = clip_ray_to_box(lo, hi, origin, dir)?;
        let t = self.march(range, dir, &field, opts)?;
        Some(self.make_hit(origin, dir, t))
    }

    /// Marches `field(t)` over `[t_start, t_end]` at a step tied to this
    /// grid's voxel size and returns the refined parameter of the first
    /// `+ → −` crossing.
    fn march(&self, (t_start, t_end): (f64, f64), dir: &Vector3<f64>, field: &impl Fn(f64) -> f64, opts: &RaycastOptions) -> Option<f64> {
        // shrink slightly so rounding never clamps the end points
        let eps = 1e-9 * self.voxel_size;
        let (t_start, t_end) = (t_start.max(0.0) + eps, t_end - eps);
        if t_end <= t_start {
            return None;
        }
        let step = opts.step_fraction * self.voxel_size / dir.norm();
        let mut t_prev = t_start;
        let mut f_prev = field(t_prev);
        loop {
            if t_prev >= t_end {
                return None;
            }
            let t = (t_prev + step).min(t_end);
            let f = field(t);
            if f_prev > 0.0 && f <= 0.0 {
                return Some(self.refine_crossing(field, (t_prev, f_prev), (t, f), opts));
            }
            t_prev = t;
            f_prev = f;
        }
    }

    fn refine_crossing(
        &self,
        at: &impl Fn(f64) -> f64,
        (mut a, mut fa): (f64, f64),
        (mut b, mut fb): (f64, f64),
        opts: &RaycastOptions,
    ) -> f64 {
        if fb == 0.0 {
            return b;
        }
        let mut side = 0i8;
        let mut t = b;
        for _ in 0..opts.max_refinements {
            t = (a * fb - b * fa) / (fb - fa);
            if !(t > a.min(b) && t < a.max(b)) {
                t = 0.5 * (a + b);
            }
            let f = at(t);
            if f.abs() < opts.tolerance || (b - a).abs() < 1e-15 {
                break;
            }
            if f > 0.0 {
                a = t;
                fa = f;
                if side == 1 {
                    fb *= 0.5;
                }
                side = 1;
            } else {
                b = t;
                fb = f;
                if side == -1 {
                    fa *= 0.5;
                }
                side = -1;
            }
        }
        t
    }

    fn make_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> RayHit {
        let p = origin + dir * t;
        let g = self.gradient(&p);
        let gn = g.norm();
        let cos = if gn > 0.0 { (g.dot(dir) / gn).abs() } else { 1.0 };
        RayHit {
            depth: t,
            point_object: p,
            normal_cos: cos.max(COS_MIN),
            gradient: g,
        }
    }

    /// Voxelwise `self + scale·other`.
    pub fn axpy(&self, scale: f64, other: &SdfGrid) -> Result<SdfGrid> {
        if !self.same_geometry(other) {
            return Err(Error::InvalidGrid("grid geometries differ".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + scale * b).collect();
        self.with_values(values)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Parametric range `[t0, t1]`, `t0 >= 0`, of `origin + t·dir` inside the
/// axis-aligned box `[lo, hi]`.
pub fn clip_ray_to_box(lo: &Vector3<f64>, hi: &Vector3<f64>, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
    clip_ray_faces(lo, hi, origin, dir).map(|c| (c.t0, c.t1))
}

/// Result of clipping a ray to a box, with the axes of the limiting faces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxClip {
    pub t0: f64,
    pub t1: f64,
    /// Axis of the entry face; `None` when the origin is inside the box.
    pub entry_axis: Option<usize>,
    pub exit_axis: usize,
}

/// Like [`clip_ray_to_box`], also reporting which faces bound the range.
pub fn clip_ray_faces(lo: &Vector3<f64>, hi: &Vector3<f64>, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<BoxClip> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    let mut entry_axis = None;
    let mut exit_axis = None;
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        if ta > t0 {
            t0 = ta;
            entry_axis = Some(a);
        }
        if tb < t1 {
            t1 = tb;
            exit_axis = Some(a);
        }
    }
    let exit_axis = exit_axis?;
    (t0 < t1).then_some(BoxClip {
        t0,
        t1,
        entry_axis,
        exit_axis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64) -> SdfGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [5, 4, 6];
        let values = (0..dims[0] * dims[1] * dims[2]).map(|_| rng.random_range(-1.0..1.0)).collect();
        SdfGrid::new(dims, Vector3::new(-0.3, 0.1, 0.7), 0.25, values).unwrap()
    }

    fn sphere_grid(radius: f64) -> SdfGrid {
        SdfGrid::from_fn([41, 41, 41], Vector3::new(-2.0, -2.0, -2.0), 0.1, |p| p.norm() - radius).unwrap()
    }

    /// Independent weight-sum evaluation of the trilinear interpolant.
    fn brute_force_sample(g: &SdfGrid, x: &Vector3<f64>) -> f64 {
        let rel = (x - g.origin()) / g.voxel_size();
        let i0 = [rel.x.floor() as usize, rel.y.floor() as usize, rel.z.floor() as usize];
        let mut total = 0.0;
        for di in 0..2 {
            for dj in 0..2 {
                for dk in 0..2 {
                    let (i, j, k) = (i0[0] + di, i0[1] + dj, i0[2] + dk);
                    let w = (1.0 - (rel.x - i as f64).abs()) * (1.0 - (rel.y - j as f64).abs()) * (1.0 - (rel.z - k as f64).abs());
                    total += w * g.value_at(i, j, k);
                }
            }
        }
        total
    }

    #[test]
    fn construction_validates() {
        assert!(SdfGrid::new([1, 2, 2], Vector3::zeros(), 1.0, vec![0.0; 4]).is_err());
        assert!(SdfGrid::new([2, 2, 2], Vector3::zeros(), 1.0, vec![0.0; 7]).is_err());
        assert!(SdfGrid::new([2, 2, 2], Vector3::zeros(), 0.0, vec![0.0; 8]).is_err());
        let mut v = vec![0.0; 8];
        v[3] = f64::NAN;
        assert!(SdfGrid::new([2, 2, 2], Vector3::zeros(), 1.0, v).is_err());
    }

    #[test]
    fn sample_at_voxel_center_is_exact() {
        let g = random_grid(1);
        let [nx, ny, nz] = g.dims();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let c = g.voxel_center(i, j, k);
                    assert_relative_eq!(g.sample(&c), g.value_at(i, j, k), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn sample_at_midpoint_is_mean() {
        let g = random_grid(2);
        let a = g.voxel_center(1, 2, 3);
        let b = g.voxel_center(2, 2, 3);
        let mid = (a + b) * 0.5;
        assert_relative_eq!(g.sample(&mid), 0.5 * (g.value_at(1, 2, 3) + g.value_at(2, 2, 3)), epsilon = 1e-12);
    }

    #[test]
    fn sample_matches_brute_force() {
        let g = random_grid(3);
        let (lo, hi) = g.bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x = Vector3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            assert_relative_eq!(g.sample(&x), brute_force_sample(&g, &x), epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_is_clamped_and_flagged() {
        let g = random_grid(5);
        let (lo, _) = g.bounds();
        let s = g.sample_checked(&(lo - Vector3::new(1.0, 0.0, 0.0)));
        assert!(s.out_of_bounds);
        assert_eq!(s.value, g.sample(&lo));
        assert_eq!(g.gradient(&(lo - Vector3::new(1.0, 0.0, 0.0))), Vector3::zeros());
        assert!(!g.sample_checked(&lo).out_of_bounds);
    }

    #[test]
    fn gradient_of_linear_and_constant_fields() {
        let lin = SdfGrid::from_fn([4, 4, 4], Vector3::zeros(), 0.5, |p| p.x).unwrap();
        let c = SdfGrid::from_fn([4, 4, 4], Vector3::zeros(), 0.5, |_| 2.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x = Vector3::new(rng.random_range(0.0..1.5), rng.random_range(0.0..1.5), rng.random_range(0.0..1.5));
            assert_relative_eq!(lin.gradient(&x), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
            assert_relative_eq!(c.gradient(&x), Vector3::zeros(), epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_within_cells() {
        let g = random_grid(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = g.voxel_size() / 100.0;
        let mut checked = 0;
        while checked < 500 {
            let cell = [rng.random_range(0..4), rng.random_range(0..3), rng.random_range(0..5)];
            let f = Vector3::new(
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
            );
            let x = g.voxel_center(cell[0], cell[1], cell[2]) + f * g.voxel_size();
            let analytic = g.gradient(&x);
            for a in 0..3 {
                let mut d = Vector3::zeros();
                d[a] = h;
                let fd = (g.sample(&(x + d)) - g.sample(&(x - d))) / (2.0 * h);
                assert!((fd - analytic[a]).abs() <= 1e-5 * analytic.norm().max(1.0));
            }
            checked += 1;
        }
    }

    #[test]
    fn raycast_sphere_depth_and_normal() {
        let r = 0.8;
        let g = sphere_grid(r);
        let d = 5.0;
        let origin = Vector3::new(0.0, 0.0, -d);
        let hit = g.raycast(&origin, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((hit.depth - (d - r)).abs() < 1e-3, "depth {}", hit.depth);
        // forward differences across a node tilt the gradient slightly
        assert!((hit.normal_cos - 1.0).abs() < 1e-2);
        assert!(g.sample(&hit.point_object).abs() < 1e-3 * g.voxel_size());
    }

    #[test]
    fn raycast_oblique_rays_hit_the_surface() {
        let g = sphere_grid(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let origin = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -6.0);
            let target = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0);
            let dir = (target - origin).normalize();
            let hit = g.raycast(&origin, &dir).unwrap();
            assert!(hit.depth > 0.0);
            assert!(g.sample(&hit.point_object).abs() < 1e-9);
            assert!((hit.point_object.norm() - 1.0).abs() < 0.02);
            assert!(hit.normal_cos >= COS_MIN && hit.normal_cos <= 1.0);
        }
    }

    #[test]
    fn raycast_misses() {
        let g = sphere_grid(0.5);
        // passes beside the sphere
        assert!(g.raycast(&Vector3::new(1.5, 0.0, -5.0), &Vector3::new(0.0, 0.0, 1.0)).is_none());
        // never enters the grid box
        assert!(g.raycast(&Vector3::new(5.0, 5.0, -5.0), &Vector3::new(0.0, 0.0, 1.0)).is_none());
        // points away
        assert!(g.raycast(&Vector3::new(0.0, 0.0, -5.0), &Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    proptest! {
        #[test]
        fn interpolation_stays_within_corner_values(
            seed in 0u64..1000,
            fx in 0.0f64..1.0, fy in 0.0f64..1.0, fz in 0.0f64..1.0,
        ) {
            let g = random_grid(seed);
            let x = g.voxel_center(1, 1, 1) + Vector3::new(fx, fy, fz) * g.voxel_size();
            let st = g.stencil(&x);
            let corners: Vec<f64> = st.indices.iter().map(|&i| g.values()[i]).collect();
            let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = g.sample(&x);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
