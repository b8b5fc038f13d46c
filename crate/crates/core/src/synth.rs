//! Synthetic stereo scenes rendered from analytic shapes, plus the surface
//! point clouds and shape metrics used to score reconstructions.
//!
//! Object frames follow the camera convention (x right, y down, z forward);
//! cars stand on their origin with the roof towards −y.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, StereoRig};
use crate::image::GrayImage;
use crate::priors::GroundPlane;
use crate::sdf::SdfGrid;
use crate::shape::{build_model, ShapeCode, ShapeModel};

/// Voxel counts of the car grid: 5 m × 2.5 m × 5 m at 1/12 m.
pub const CAR_GRID_DIMS: [usize; 3] = [61, 31, 61];
pub const CAR_VOXEL: f64 = 1.0 / 12.0;

/// Grid origin of the car frame; the ground contact plane is `y = 0`.
pub fn car_grid_origin() -> Vector3<f64> {
    Vector3::new(-2.5, -2.25, -2.5)
}

/// Overall car dimensions in meters. Length runs along z, width along x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarDimensions {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl CarDimensions {
    pub const MIN: CarDimensions = CarDimensions {
        length: 3.6,
        width: 1.55,
        height: 1.35,
    };
    pub const MAX: CarDimensions = CarDimensions {
        length: 4.7,
        width: 1.9,
        height: 1.8,
    };
}

fn rounded_box(p: &Vector3<f64>, center: &Vector3<f64>, half: &Vector3<f64>, radius: f64) -> f64 {
    let q = (p - center).abs() - (half - Vector3::repeat(radius));
    let outside = q.sup(&Vector3::zeros()).norm();
    outside + q.max().min(0.0) - radius
}

/// Ellipsoid distance bound, exact on the axes and never off by more than the
/// axis ratio elsewhere.
fn ellipsoid(p: &Vector3<f64>, center: &Vector3<f64>, radii: &Vector3<f64>) -> f64 {
    let d = p - center;
    let k0 = d.component_div(radii).norm();
    let k1 = d.component_div(&radii.component_mul(radii)).norm();
    if k1 == 0.0 {
        -radii.min()
    } else {
        k0 * (k0 - 1.0) / k1
    }
}

/// Rounded-box body with a half-ellipsoid cabin on top; negative inside.
pub fn car_sdf(dims: &CarDimensions, p: &Vector3<f64>) -> f64 {
    let clearance = 0.18;
    let body_h = 0.55 * dims.height - clearance;
    let body_center = Vector3::new(0.0, -clearance - 0.5 * body_h, 0.0);
    let body_half = Vector3::new(0.5 * dims.width, 0.5 * body_h, 0.5 * dims.length);
    let body = rounded_box(p, &body_center, &body_half, 0.12);
    let roof = -clearance - body_h;
    let cabin_center = Vector3::new(0.0, roof, -0.05 * dims.length);
    let cabin_radii = Vector3::new(0.45 * dims.width, dims.height - clearance - body_h, 0.32 * dims.length);
    // keep only the part above the body top
    let cabin = ellipsoid(p, &cabin_center, &cabin_radii).max(p.y - roof - 0.05);
    body.min(cabin)
}

pub fn car_grid(dims: &CarDimensions) -> Result<SdfGrid> {
    SdfGrid::from_fn(CAR_GRID_DIMS, car_grid_origin(), CAR_VOXEL, |p| car_sdf(dims, p))
}

/// `count` cars with dimensions spread over the full range; deterministic
/// in `seed`.
pub fn car_exemplars(count: usize, seed: u64) -> Result<Vec<SdfGrid>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (CarDimensions::MIN, CarDimensions::MAX);
    let dims: Vec<CarDimensions> = (0..count)
        .map(|_| CarDimensions {
            length: rng.random_range(lo.length..=hi.length),
            width: rng.random_range(lo.width..=hi.width),
            height: rng.random_range(lo.height..=hi.height),
        })
        .collect();
    dims.par_iter().map(car_grid).collect()
}

pub const DEFAULT_EXEMPLARS: usize = 16;
pub const DEFAULT_EXEMPLAR_SEED: u64 = 7;

/// PCA car model with `k` components over the default exemplar set.
pub fn car_model(k: usize) -> Result<ShapeModel> {
    build_model(&car_exemplars(DEFAULT_EXEMPLARS, DEFAULT_EXEMPLAR_SEED)?, k)
}

/// Spheres of radius 0.5–0.9 m around the origin of a 2 m grid; spans a
/// one-dimensional shape space.
pub fn sphere_exemplars(count: usize) -> Result<Vec<SdfGrid>> {
    (0..count)
        .map(|i| {
            let r = 0.5 + 0.4 * i as f64 / (count.max(2) - 1) as f64;
            SdfGrid::from_fn([25, 25, 25], Vector3::repeat(-1.0), 1.0 / 12.0, |p| p.norm() - r)
        })
        .collect()
}

pub fn sphere_model() -> Result<ShapeModel> {
    build_model(&sphere_exemplars(5)?, 1)
}

/// Scene lighting and background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Direction towards the light, camera frame.
    pub light: Vector3<f64>,
    pub diffuse: f64,
    pub ambient: f64,
    /// Textured ground plane; `None` renders a flat background.
    pub ground: Option<GroundPlane>,
    /// Depth of the textured back wall.
    pub wall_depth: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            light: Vector3::new(0.3, -1.0, -0.4).normalize(),
            diffuse: 0.7,
            ambient: 0.3,
            ground: Some(GroundPlane::default()),
            wall_depth: 60.0,
        }
    }
}

/// Per-pixel depth, `f64::INFINITY` where the object is not hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Ground-truth `T_o^c`.
    pub pose: Pose,
    pub z: Vec<f64>,
    pub rig: StereoRig,
    pub left: GrayImage,
    pub right: GrayImage,
    pub mask_left: GrayImage,
    pub mask_right: GrayImage,
    pub depth_left: DepthMap,
    pub depth_right: DepthMap,
    /// Surface points of the true shape, camera frame.
    pub cloud: Vec<Vector3<f64>>,
}

/// Surface albedo, fixed to the object so both views agree.
fn object_albedo(x: &Vector3<f64>) -> f64 {
    0.55 + 0.2 * (x.x * 9.0).sin() * (x.y * 7.0 + 0.5).cos() + 0.15 * (x.z * 6.0 + 1.0).sin()
}

fn background(origin: &Vector3<f64>, dir: &Vector3<f64>, opts: &RenderOptions) -> f64 {
    if let Some(g) = &opts.ground {
        let n = g.normal();
        let denom = n.dot(dir);
        if denom < 0.0 {
            let t = -g.signed_distance(origin) / denom;
            if t > 0.0 {
                let x = origin + dir * t;
                if x.z < opts.wall_depth {
                    return 0.35 + 0.15 * (x.x * 2.3).sin() * (x.z * 1.7).sin() + 0.05 * (x.z * 5.1).cos();
                }
            }
        }
    }
    if dir.z > 0.0 {
        let x = origin + dir * ((opts.wall_depth - origin.z) / dir.z);
        0.6 + 0.15 * (x.x * 0.9).sin() + 0.1 * (x.y * 1.3).cos()
    } else {
        0.5
    }
}

/// One camera view: pixel centers at integer coordinates.
struct View {
    image: Vec<f64>,
    mask: Vec<f64>,
    depth: Vec<f64>,
}

/// First surface hit of the ray through pixel `(u, v)` of a camera whose
/// frame maps to the object by `camera_to_object`; returns z-depth and the
/// object-frame point.
fn cast(grid: &SdfGrid, k: &CameraIntrinsics, camera_to_object: &Pose, u: f64, v: f64) -> Option<(f64, Vector3<f64>)> {
    let m = k.ray(&Vector2::new(u, v));
    let dir = camera_to_object.rotation * (m / m.norm());
    let hit = grid.raycast(&camera_to_object.translation, &dir)?;
    let depth = hit.depth / m.norm();
    (depth > 0.0).then_some((depth, hit.point_object))
}

/// z-depth of the shape `grid` seen through pixel `(u, v)` of camera `k`.
pub fn render_depth_at(grid: &SdfGrid, k: &CameraIntrinsics, object_to_camera: &Pose, u: f64, v: f64) -> Option<f64> {
    cast(grid, k, &object_to_camera.inverse(), u, v).map(|(d, _)| d)
}

/// Renders through camera `k` placed at `camera_to_left` in the left frame,
/// where the background lives.
#[allow(clippy::too_many_arguments)]
fn render_view(
    grid: &SdfGrid,
    k: &CameraIntrinsics,
    object_to_camera: &Pose,
    camera_to_left: &Pose,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> View {
    let camera_to_object = object_to_camera.inverse();
    let light = opts.light.normalize();
    let pixels: Vec<(f64, f64, f64)> = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let (u, v) = ((i % width) as f64, (i / width) as f64);
            match cast(grid, k, &camera_to_object, u, v) {
                Some((depth, xo)) => {
                    let g = grid.gradient(&xo);
                    let n = object_to_camera.rotation * g.normalize();
                    let shade = opts.diffuse * n.dot(&light).max(0.0) + opts.ambient;
                    ((object_albedo(&xo) * shade).clamp(0.0, 1.0), 1.0, depth)
                }
                None => {
                    let m = camera_to_left.rotation * k.ray(&Vector2::new(u, v));
                    (background(&camera_to_left.translation, &m.normalize(), opts), 0.0, f64::INFINITY)
                }
            }
        })
        .collect();
    View {
        image: pixels.iter().map(|p| p.0).collect(),
        mask: pixels.iter().map(|p| p.1).collect(),
        depth: pixels.iter().map(|p| p.2).collect(),
    }
}

/// Renders the decoded shape `z` at `object_to_camera` into both cameras of
/// `rig`. The right view is ray-cast on its own, not warped from the left.
pub fn render_scene(
    model: &ShapeModel,
    z: &[f64],
    object_to_camera: &Pose,
    rig: &StereoRig,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> Result<SyntheticScene> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("image dimensions must be positive".into()));
    }
    let grid = model.decode(&ShapeCode(z.to_vec()))?;
    let left = render_view(&grid, &rig.left, object_to_camera, &Pose::identity(), width, height, opts);
    let right_pose = rig.left_to_right * *object_to_camera;
    let right = render_view(&grid, &rig.right, &right_pose, &rig.right_to_left(), width, height, opts);
    let to_image = |data: Vec<f64>| GrayImage::new(width, height, data);
    Ok(SyntheticScene {
        pose: *object_to_camera,
        z: z.to_vec(),
        rig: *rig,
        left: to_image(left.image)?,
        right: to_image(right.image)?,
        mask_left: to_image(left.mask)?,
        mask_right: to_image(right.mask)?,
        depth_left: DepthMap {
            width,
            height,
            data: left.depth,
        },
        depth_right: DepthMap {
            width,
            height,
            data: right.depth,
        },
        cloud: surface_point_cloud(&grid, object_to_camera),
    })
}

/// Zero crossings of `grid` on its axis-aligned edges, by linear
/// interpolation, mapped to the camera frame with `object_to_camera`.
pub fn surface_point_cloud(grid: &SdfGrid, object_to_camera: &Pose) -> Vec<Vector3<f64>> {
    let [nx, ny, nz] = grid.dims();
    let mut points = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let a = grid.value_at(i, j, k);
                let pa = grid.voxel_center(i, j, k);
                for (di, dj, dk) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    let (i2, j2, k2) = (i + di, j + dj, k + dk);
                    if i2 >= nx || j2 >= ny || k2 >= nz {
                        continue;
                    }
                    let b = grid.value_at(i2, j2, k2);
                    if (a < 0.0) == (b < 0.0) {
                        continue;
                    }
                    let t = a / (a - b);
                    let p = pa + (grid.voxel_center(i2, j2, k2) - pa) * t;
                    points.push(object_to_camera.transform_point(&p));
                }
            }
        }
    }
    points
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    /// Fraction of ground-truth points with an estimate within `threshold`.
    pub completeness: f64,
    /// Fraction of estimated points with a ground-truth point within `threshold`.
    pub accuracy: f64,
    pub f1: f64,
    /// RMS nearest-estimate distance over the matched ground-truth points;
    /// NaN when none matched.
    pub rmse: f64,
    pub threshold: f64,
}

/// Uniform hash grid with cell size equal to the query radius, so every
/// neighbour within the radius lies in the 27 surrounding cells.
struct SpatialHash<'a> {
    cell: f64,
    points: &'a [Vector3<f64>],
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> SpatialHash<'a> {
    fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, points, buckets }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// Nearest distance to `q` if some point lies within the cell size.
    fn nearest_within(&self, q: &Vector3<f64>) -> Option<f64> {
        let [a, b, c] = Self::key(q, self.cell);
        let mut best = f64::INFINITY;
        for da in -1..=1 {
            for db in -1..=1 {
                for dc in -1..=1 {
                    if let Some(ids) = self.buckets.get(&[a + da, b + db, c + dc]) {
                        for &i in ids {
                            best = best.min(point_distance(q, &self.points[i]));
                        }
                    }
                }
            }
        }
        (best <= self.cell).then_some(best)
    }
}

/// Euclidean distance, shared with the brute-force reference so both agree
/// bit for bit.
pub fn point_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = a - b;
    (d.x * d.x + d.y * d.y + d.z * d.z).sqrt()
}

fn assemble_metrics(gt_matches: &[Option<f64>], est_matched: usize, est_len: usize, threshold: f64) -> ShapeMetrics {
    let matched: Vec<f64> = gt_matches.iter().flatten().copied().collect();
    let completeness = matched.len() as f64 / gt_matches.len() as f64;
    let accuracy = est_matched as f64 / est_len as f64;
    let f1 = if completeness + accuracy > 0.0 {
        2.0 * completeness * accuracy / (completeness + accuracy)
    } else {
        0.0
    };
    let rmse = if matched.is_empty() {
        f64::NAN
    } else {
        (matched.iter().map(|d| d * d).sum::<f64>() / matched.len() as f64).sqrt()
    };
    ShapeMetrics {
        completeness,
        accuracy,
        f1,
        rmse,
        threshold,
    }
}

fn check_metric_inputs(estimate: &[Vector3<f64>], truth: &[Vector3<f64>], threshold: f64) -> Result<()> {
    if estimate.is_empty() {
        return Err(Error::EmptyCloud("estimate"));
    }
    if truth.is_empty() {
        return Err(Error::EmptyCloud("ground truth"));
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidArgument("metric threshold must be positive".into()));
    }
    Ok(())
}

/// Completeness, accuracy, F1 and matched-point RMSE at distance `threshold`.
pub fn shape_metrics(estimate: &[Vector3<f64>], truth: &[Vector3<f64>], threshold: f64) -> Result<ShapeMetrics> {
    check_metric_inputs(estimate, truth, threshold)?;
    let est_hash = SpatialHash::new(estimate, threshold);
    let gt_hash = SpatialHash::new(truth, threshold);
    let gt_matches: Vec<Option<f64>> = truth.par_iter().map(|q| est_hash.nearest_within(q)).collect();
    let est_matched = estimate.par_iter().filter(|q| gt_hash.nearest_within(q).is_some()).count();
    Ok(assemble_metrics(&gt_matches, est_matched, estimate.len(), threshold))
}

/// All-pairs reference for [`shape_metrics`].
pub fn shape_metrics_brute_force(estimate: &[Vector3<f64>], truth: &[Vector3<f64>], threshold: f64) -> Result<ShapeMetrics> {
    check_metric_inputs(estimate, truth, threshold)?;
    let nearest = |q: &Vector3<f64>, set: &[Vector3<f64>]| set.iter().map(|p| point_distance(q, p)).fold(f64::INFINITY, f64::min);
    let gt_matches: Vec<Option<f64>> = truth
        .iter()
        .map(|q| Some(nearest(q, estimate)).filter(|d| *d <= threshold))
        .collect();
    let est_matched = estimate.iter().filter(|q| nearest(q, truth) <= threshold).count();
    Ok(assemble_metrics(&gt_matches, est_matched, estimate.len(), threshold))
}

/// Heading of the object's forward (+z) axis in the camera x–z plane.
pub fn yaw_of(object_to_camera: &Pose) -> f64 {
    let f = object_to_camera.rotation.column(2);
    f.x.atan2(f.z)
}

/// Absolute heading difference, wrapped to `[0, π]`.
pub fn yaw_error(a: &Pose, b: &Pose) -> f64 {
    let d = yaw_of(a) - yaw_of(b);
    d.sin().atan2(d.cos()).abs()
}

/// Moves the object by a random offset of length at most `max_translation`
/// and turns it about its vertical axis by at most `max_yaw` radians.
pub fn perturb_pose(object_to_camera: &Pose, rng: &mut impl Rng, max_translation: f64, max_yaw: f64) -> Pose {
    let offset = loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() <= 1.0 {
            break v * max_translation;
        }
    };
    let yaw = rng.random_range(-max_yaw..=max_yaw);
    let turned = object_to_camera.compose(&Pose::from_yaw(yaw, Vector3::zeros()));
    Pose::new(turned.rotation, turned.translation + offset)
}

/// Camera and image size shared by the generated scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneCamera {
    pub rig: StereoRig,
    pub width: usize,
    pub height: usize,
}

impl Default for SceneCamera {
    /// 320×240, f = 300 px, 0.54 m baseline.
    fn default() -> Self {
        let k = CameraIntrinsics::new(300.0, 300.0, 159.5, 119.5).expect("valid intrinsics");
        Self {
            rig: StereoRig::rectified(k, 0.54),
            width: 320,
            height: 240,
        }
    }
}

/// A car on the default ground plane, 7–12 m ahead, any heading, with a code
/// drawn within 1.5 standard deviations.
pub fn random_car_scene(model: &ShapeModel, camera: &SceneCamera, rng: &mut impl Rng) -> Result<SyntheticScene> {
    let plane = GroundPlane::default();
    let depth = rng.random_range(7.0..12.0);
    let x = rng.random_range(-0.15..0.15) * depth;
    let pose = Pose::from_yaw(
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        Vector3::new(x, plane.height_at(x, depth), depth),
    );
    let z: Vec<f64> = model.sigmas().iter().map(|s| rng.random_range(-1.5..1.5) * s).collect();
    render_scene(
        model,
        &z,
        &pose,
        &camera.rig,
        camera.width,
        camera.height,
        &RenderOptions::default(),
    )
}
