//! Linear PCA shape space over SDF grids: `Φ(z) = Σ_k v_k·z_k + Φ_mean`.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::sdf::SdfGrid;

/// Coefficients of a shape in a [`ShapeModel`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShapeCode(pub Vec<f64>);

impl ShapeCode {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ShapeCode {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    mean: SdfGrid,
    basis: Vec<SdfGrid>,
    /// Standard deviation of the training set along each component.
    sigmas: Vec<f64>,
    /// Box containing every surface with `|z_k| ≤ SUPPORT_SIGMAS·σ_k`.
    support: (Vector3<f64>, Vector3<f64>),
}

/// Code range, in standard deviations, covered by [`ShapeModel::support`].
pub const SUPPORT_SIGMAS: f64 = 3.0;

/// Field value, gradient and per-component basis values at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    pub value: f64,
    pub gradient: Vector3<f64>,
    /// `[v_1(X), …, v_K(X)]`, i.e. `∂Φ(X)/∂z`.
    pub basis: Vec<f64>,
    pub out_of_bounds: bool,
}

impl ShapeModel {
    pub fn new(mean: SdfGrid, basis: Vec<SdfGrid>, sigmas: Vec<f64>) -> Result<Self> {
        if basis.len() != sigmas.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                actual: sigmas.len(),
            });
        }
        if basis.iter().any(|b| !b.same_geometry(&mean)) {
            return Err(Error::InvalidGrid("basis grid geometry differs from the mean".into()));
        }
        if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("component sigmas must be positive".into()));
        }
        if sigmas.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("component sigmas must be sorted descending".into()));
        }
        let support = support_box(&mean, &basis, &sigmas);
        Ok(Self {
            mean,
            basis,
            sigmas,
            support,
        })
    }

    /// A model without shape variation.
    pub fn rigid(mean: SdfGrid) -> Self {
        let support = support_box(&mean, &[], &[]);
        Self {
            mean,
            basis: Vec::new(),
            sigmas: Vec::new(),
            support,
        }
    }

    /// Axis-aligned box, inside the grid, outside of which the field stays
    /// positive for codes within `SUPPORT_SIGMAS` standard deviations.
    pub fn support(&self) -> (Vector3<f64>, Vector3<f64>) {
        self.support
    }

    pub fn num_components(&self) -> usize {
        self.basis.len()
    }

    pub fn mean(&self) -> &SdfGrid {
        &self.mean
    }

    pub fn basis(&self) -> &[SdfGrid] {
        &self.basis
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Variances `σ_k²` of the components.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.sigmas.iter().map(|s| s * s).collect()
    }

    fn check_code(&self, z: &ShapeCode) -> Result<()> {
        if z.len() != self.basis.len() {
            return Err(Error::DimensionMismatch {
                expected: self.basis.len(),
                actual: z.len(),
            });
        }
        Ok(())
    }

    pub fn decode(&self, z: &ShapeCode) -> Result<SdfGrid> {
        self.check_code(z)?;
        let mut values = self.mean.values().to_vec();
        for (b, &zk) in self.basis.iter().zip(z.as_slice()) {
            if zk == 0.0 {
                continue;
            }
            for (v, bv) in values.iter_mut().zip(b.values()) {
                *v += bv * zk;
            }
        }
        self.mean.with_values(values)
    }

    /// Evaluates `Φ(z)` at `x` by interpolating the mean and each basis grid,
    /// without decoding the whole grid.
    pub fn decode_at(&self, z: &ShapeCode, x: &Vector3<f64>) -> Result<ShapeSample> {
        self.check_code(z)?;
        Ok(self.sample_unchecked(z.as_slice(), x))
    }

    pub(crate) fn sample_unchecked(&self, z: &[f64], x: &Vector3<f64>) -> ShapeSample {
        let st = self.mean.stencil(x);
        let mut value = st.apply(self.mean.values());
        let mut gradient = st.apply_gradient(self.mean.values());
        let mut basis = Vec::with_capacity(self.basis.len());
        for (b, &zk) in self.basis.iter().zip(z) {
            let bv = st.apply(b.values());
            value += bv * zk;
            if zk != 0.0 {
                gradient += st.apply_gradient(b.values()) * zk;
            }
            basis.push(bv);
        }
        ShapeSample {
            value,
            gradient,
            basis,
            out_of_bounds: st.clamped,
        }
    }

    /// Basis values `[v_1(X), …, v_K(X)]` at `x`.
    pub fn basis_at(&self, x: &Vector3<f64>) -> Vec<f64> {
        let st = self.mean.stencil(x);
        self.basis.iter().map(|b| st.apply(b.values())).collect()
    }

    /// Least-squares code of `grid` (orthogonal projection onto the basis).
    pub fn project(&self, grid: &SdfGrid) -> Result<ShapeCode> {
        if !grid.same_geometry(&self.mean) {
            return Err(Error::InvalidGrid("grid geometry differs from the model".into()));
        }
        let centered: Vec<f64> = grid.values().iter().zip(self.mean.values()).map(|(g, m)| g - m).collect();
        let code = self
            .basis
            .iter()
            .map(|b| {
                let bv = b.values();
                let num: f64 = centered.iter().zip(bv).map(|(c, v)| c * v).sum();
                let den: f64 = bv.iter().map(|v| v * v).sum();
                num / den
            })
            .collect();
        Ok(ShapeCode(code))
    }
}

/// Bounding box of the voxels whose lower bound `Φ_mean − Σ 3σ_k|v_k|` is
/// negative, grown by one and a half voxels and clipped to the grid; the whole grid when
/// no voxel qualifies.
fn support_box(mean: &SdfGrid, basis: &[SdfGrid], sigmas: &[f64]) -> (Vector3<f64>, Vector3<f64>) {
    let [nx, ny, nz] = mean.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = mean.index(i, j, k);
                let spread: f64 = basis
                    .iter()
                    .zip(sigmas)
                    .map(|(b, s)| SUPPORT_SIGMAS * s * b.values()[idx].abs())
                    .sum();
                if mean.values()[idx] - spread < 0.0 {
                    for (a, c) in [i, j, k].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return mean.bounds();
    }
    // faces sit mid-cell so samples on them avoid the interpolant's kinks
    let pad = 1.5 * mean.voxel_size();
    let (g_lo, g_hi) = mean.bounds();
    let lo_c = mean.voxel_center(lo[0], lo[1], lo[2]).add_scalar(-pad).sup(&g_lo);
    let hi_c = mean.voxel_center(hi[0], hi[1], hi[2]).add_scalar(pad).inf(&g_hi);
    (lo_c, hi_c)
}

/// A shape code together with its decoded grid, for repeated sampling.
#[derive(Debug, Clone)]
pub struct ShapeInstance<'a> {
    model: &'a ShapeModel,
    z: Vec<f64>,
    grid: SdfGrid,
}

impl<'a> ShapeInstance<'a> {
    pub fn new(model: &'a ShapeModel, z: &[f64]) -> Result<Self> {
        let grid = model.decode(&ShapeCode(z.to_vec()))?;
        Ok(Self {
            model,
            z: z.to_vec(),
            grid,
        })
    }

    pub fn model(&self) -> &'a ShapeModel {
        self.model
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn num_components(&self) -> usize {
        self.model.num_components()
    }

    pub fn grid(&self) -> &SdfGrid {
        &self.grid
    }

    pub fn value(&self, x: &Vector3<f64>) -> f64 {
        self.grid.sample(x)
    }

    /// Value and gradient from the decoded grid, basis values from the model.
    pub fn sample(&self, x: &Vector3<f64>) -> ShapeSample {
        let st = self.grid.stencil(x);
        ShapeSample {
            value: st.apply(self.grid.values()),
            gradient: st.apply_gradient(self.grid.values()),
            basis: self.model.basis.iter().map(|b| st.apply(b.values())).collect(),
            out_of_bounds: st.clamped,
        }
    }
}

/// Relative eigenvalue below which a component is treated as absent.
const DEGENERATE_RATIO: f64 = 1e-12;

/// PCA over exemplar grids by the snapshot method: eigen-decompose the
/// N×N Gram matrix of centered exemplars, lift the top-K eigenvectors back
/// to voxel space and normalize them to unit length.
pub fn build_model(exemplars: &[SdfGrid], k: usize) -> Result<ShapeModel> {
    if exemplars.len() < k + 1 || exemplars.len() < 2 {
        return Err(Error::TooFewExemplars {
            needed: (k + 1).max(2),
            got: exemplars.len(),
        });
    }
    let first = &exemplars[0];
    if let Some(i) = exemplars.iter().position(|g| !g.same_geometry(first)) {
        return Err(Error::InvalidGrid(format!("exemplar {i} has different grid geometry")));
    }
    let n = exemplars.len();
    let m = first.len();
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0; m];
    for g in exemplars {
        for (acc, v) in mean.iter_mut().zip(g.values()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v *= inv_n);

    let centered = DMatrix::from_fn(m, n, |r, c| exemplars[c].values()[r] - mean[r]);
    let gram = centered.transpose() * &centered;
    let scale = gram.trace().max(f64::MIN_POSITIVE);
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let largest = eig.eigenvalues[order[0]].max(0.0);
    if largest <= DEGENERATE_RATIO * scale || largest == 0.0 {
        return Err(Error::DegenerateDataset("exemplars have no variation".into()));
    }
    let mut basis = Vec::with_capacity(k);
    let mut sigmas = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let lambda = eig.eigenvalues[idx];
        if lambda <= DEGENERATE_RATIO * scale {
            return Err(Error::DegenerateDataset(format!(
                "only {} independent components available, {k} requested",
                basis.len()
            )));
        }
        let u: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        let mut v = &centered * u;
        v /= v.norm();
        basis.push(first.with_values(v.iter().copied().collect())?);
        sigmas.push((lambda / (n - 1) as f64).sqrt());
    }
    ShapeModel::new(first.with_values(mean)?, basis, sigmas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng) -> SdfGrid {
        let dims = [6, 5, 7];
        let values = (0..dims.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect();
        SdfGrid::new(dims, Vector3::new(-0.5, -0.5, -0.5), 0.2, values).unwrap()
    }

    fn random_model(seed: u64, k: usize) -> (ShapeModel, Vec<SdfGrid>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exemplars: Vec<SdfGrid> = (0..k + 3).map(|_| random_grid(&mut rng)).collect();
        (build_model(&exemplars, k).unwrap(), exemplars)
    }

    fn random_point(g: &SdfGrid, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let (lo, hi) = g.bounds();
        Vector3::new(
            rng.random_range(lo.x..hi.x),
            rng.random_range(lo.y..hi.y),
            rng.random_range(lo.z..hi.z),
        )
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn decode_zero_is_mean() {
        let (m, _) = random_model(1, 3);
        let d = m.decode(&ShapeCode::zeros(3)).unwrap();
        assert_eq!(d.values(), m.mean().values());
    }

    #[test]
    fn decode_single_component() {
        let (m, _) = random_model(2, 3);
        let s = m.sigmas()[0];
        let d = m.decode(&ShapeCode(vec![s, 0.0, 0.0])).unwrap();
        for ((dv, mv), bv) in d.values().iter().zip(m.mean().values()).zip(m.basis()[0].values()) {
            assert_eq!(*dv, mv + s * bv);
        }
    }

    #[test]
    fn decode_rejects_wrong_length() {
        let (m, _) = random_model(3, 2);
        assert!(matches!(
            m.decode(&ShapeCode::zeros(3)),
            Err(Error::DimensionMismatch { expected: 2, actual: 3 })
        ));
        assert!(m.decode_at(&ShapeCode::zeros(1), &Vector3::zeros()).is_err());
    }

    #[test]
    fn decode_is_affine() {
        let (m, _) = random_model(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..20 {
            let za: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let zb: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sum: Vec<f64> = za.iter().zip(&zb).map(|(a, b)| a + b).collect();
            let a = m.decode(&ShapeCode(za)).unwrap();
            let b = m.decode(&ShapeCode(zb)).unwrap();
            let zero = m.decode(&ShapeCode::zeros(3)).unwrap();
            let ab = m.decode(&ShapeCode(sum)).unwrap();
            for i in 0..a.len() {
                let lhs = a.values()[i] + b.values()[i] - zero.values()[i];
                assert!((lhs - ab.values()[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decode_finite_difference_is_basis() {
        let (m, _) = random_model(5, 2);
        let h = 0.5;
        for k in 0..2 {
            let mut zp = vec![0.3, -0.1];
            let mut zm = zp.clone();
            zp[k] += h;
            zm[k] -= h;
            let p = m.decode(&ShapeCode(zp)).unwrap();
            let q = m.decode(&ShapeCode(zm)).unwrap();
            for i in 0..p.len() {
                let fd = (p.values()[i] - q.values()[i]) / (2.0 * h);
                assert!((fd - m.basis()[k].values()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_at_matches_full_decode() {
        let (m, _) = random_model(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..1000 {
            let z = ShapeCode((0..3).map(|_| rng.random_range(-2.0..2.0)).collect());
            let x = random_point(m.mean(), &mut rng);
            let full = m.decode(&z).unwrap();
            let s = m.decode_at(&z, &x).unwrap();
            assert!((s.value - full.sample(&x)).abs() < 1e-9);
            assert_relative_eq!(s.gradient, full.gradient(&x), epsilon = 1e-9);
            for (k, b) in m.basis().iter().enumerate() {
                assert_eq!(s.basis[k], b.sample(&x));
            }
        }
        let x = random_point(m.mean(), &mut rng);
        let s = m.decode_at(&ShapeCode::zeros(3), &x).unwrap();
        assert_eq!(s.value, m.mean().sample(&x));
    }

    #[test]
    fn instance_matches_decode_at() {
        let (m, _) = random_model(12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(120);
        for _ in 0..200 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let inst = ShapeInstance::new(&m, &z).unwrap();
            let x = random_point(m.mean(), &mut rng);
            let a = inst.sample(&x);
            let b = m.decode_at(&ShapeCode(z), &x).unwrap();
            assert!((a.value - b.value).abs() < 1e-9);
            assert_relative_eq!(a.gradient, b.gradient, epsilon = 1e-9);
            assert_eq!(a.basis, b.basis);
        }
    }

    #[test]
    fn support_box_bounds_the_shape() {
        let g = SdfGrid::from_fn([41, 41, 41], Vector3::repeat(-2.0), 0.1, |p| p.norm() - 0.5).unwrap();
        let m = ShapeModel::rigid(g);
        let (lo, hi) = m.support();
        for a in 0..3 {
            assert!(lo[a] <= -0.5 && lo[a] >= -0.75);
            assert!(hi[a] >= 0.5 && hi[a] <= 0.75);
        }
        let empty = SdfGrid::from_fn([4, 4, 4], Vector3::zeros(), 1.0, |_| 1.0).unwrap();
        let m = ShapeModel::rigid(empty.clone());
        assert_eq!(m.support(), empty.bounds());
    }

    #[test]
    fn two_point_pca() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g1 = random_grid(&mut rng);
        let g2 = random_grid(&mut rng);
        let m = build_model(&[g1.clone(), g2.clone()], 1).unwrap();
        let diff: Vec<f64> = g1.values().iter().zip(g2.values()).map(|(a, b)| a - b).collect();
        let dn = dot(&diff, &diff).sqrt();
        let b = m.basis()[0].values();
        let cos = dot(&diff, b) / dn;
        assert_relative_eq!(cos.abs(), 1.0, epsilon = 1e-9);
        for i in 0..g1.len() {
            assert_relative_eq!(m.mean().values()[i], 0.5 * (g1.values()[i] + g2.values()[i]), epsilon = 1e-12);
        }
        // two samples at ±diff/2: sample variance = |diff|²/2
        assert_relative_eq!(m.sigmas()[0], dn / 2f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn identical_exemplars_are_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_grid(&mut rng);
        assert!(matches!(
            build_model(&[g.clone(), g.clone(), g], 1),
            Err(Error::DegenerateDataset(_))
        ));
    }

    #[test]
    fn too_few_and_mismatched_exemplars() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_grid(&mut rng);
        let b = random_grid(&mut rng);
        assert!(matches!(
            build_model(&[a.clone(), b.clone()], 2),
            Err(Error::TooFewExemplars { needed: 3, got: 2 })
        ));
        let other = SdfGrid::new([2, 2, 2], Vector3::zeros(), 1.0, vec![0.0; 8]).unwrap();
        assert!(matches!(build_model(&[a, b, other], 1), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn full_rank_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let exemplars: Vec<SdfGrid> = (0..5).map(|_| random_grid(&mut rng)).collect();
        let m = build_model(&exemplars, 4).unwrap();
        for g in &exemplars {
            let z = m.project(g).unwrap();
            let rec = m.decode(&z).unwrap();
            let se: f64 = rec.values().iter().zip(g.values()).map(|(a, b)| (a - b).powi(2)).sum();
            assert!((se / g.len() as f64).sqrt() < 1e-6);
        }
    }

    #[test]
    fn basis_is_orthonormal_and_sorted() {
        let (m, _) = random_model(11, 4);
        for i in 0..4 {
            let bi = m.basis()[i].values();
            assert_relative_eq!(dot(bi, bi), 1.0, epsilon = 1e-9);
            for j in 0..i {
                assert!(dot(bi, m.basis()[j].values()).abs() < 1e-6);
            }
        }
        assert!(m.sigmas().windows(2).all(|w| w[0] >= w[1]));
        assert!(m.eigenvalues().iter().all(|&e| e > 0.0));
    }
}
