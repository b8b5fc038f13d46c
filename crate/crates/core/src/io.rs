//! File formats: grids, models, calibration, images and masks, detections,
//! frame bundles, results, point clouds, ground planes and overlays.
//!
//! Paths inside bundle and detection files are resolved against the
//! directory of the file that names them.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, StereoRig};
use crate::image::GrayImage;
use crate::priors::GroundPlane;
use crate::sampling::{BBox, Detection};
use crate::sdf::SdfGrid;
use crate::shape::{ShapeInstance, ShapeModel};
use crate::silhouette;
use crate::solver::{EnergyTerms, FitResult, FitStatus, SolverConfig, StereoFrame};
use crate::synth::{DepthMap, ShapeMetrics};

const GRID_MAGIC: &[u8; 4] = b"SDFG";
const MODEL_MAGIC: &[u8; 4] = b"SDFM";
const GRID_VERSION: u32 = 1;
/// Version tag of the two-dimensional variant used for depth maps.
const DEPTH_VERSION: u32 = 2;
const MODEL_VERSION: u32 = 1;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

// ---- binary grids -------------------------------------------------------

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: String,
}

impl<'a> ByteReader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::parse(&self.name, format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().expect("chunk length"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.take().map(f64::from_le_bytes)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.take().map(|b| f32::from_le_bytes(b) as f64)).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::parse(&self.name, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_geometry(out: &mut Vec<u8>, grid: &SdfGrid) {
    for d in grid.dims() {
        out.extend((d as u32).to_le_bytes());
    }
    for o in grid.origin().iter() {
        out.extend(o.to_le_bytes());
    }
    out.extend(grid.voxel_size().to_le_bytes());
}

fn put_values(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend((*v as f32).to_le_bytes());
    }
}

fn take_geometry(r: &mut ByteReader) -> Result<([usize; 3], Vector3<f64>, f64)> {
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let origin = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
    Ok((dims, origin, r.f64()?))
}

/// Binary grid: magic, version, dims, origin, voxel size, then `f32`
/// values with x fastest, all little-endian.
pub fn encode_grid(grid: &SdfGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(44 + 4 * grid.len());
    out.extend(GRID_MAGIC);
    out.extend(GRID_VERSION.to_le_bytes());
    put_geometry(&mut out, grid);
    put_values(&mut out, grid.values());
    out
}

/// Decodes a grid in either the binary or the text form.
pub fn decode_grid(bytes: &[u8], name: &str) -> Result<SdfGrid> {
    if !bytes.starts_with(GRID_MAGIC) {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::parse(name, "neither a binary nor a text grid"))?;
        return parse_grid_text(text, name);
    }
    let mut r = ByteReader {
        bytes,
        pos: 4,
        name: name.to_string(),
    };
    let version = r.u32()?;
    if version != GRID_VERSION {
        return Err(Error::parse(name, format!("unsupported grid version {version}")));
    }
    let (dims, origin, voxel) = take_geometry(&mut r)?;
    let values = r.f32s(dims.iter().product())?;
    r.finish()?;
    SdfGrid::new(dims, origin, voxel, values)
}

/// Text grid for hand-written fixtures:
///
/// ```text
/// # comment
/// dims 2 2 2
/// origin 0 0 0
/// voxel_size 0.5
/// values
/// -1 -1 -1 -1
///  1  1  1  1
/// ```
pub fn parse_grid_text(text: &str, name: &str) -> Result<SdfGrid> {
    let mut dims = None;
    let mut origin = None;
    let mut voxel = None;
    let mut values: Option<Vec<f64>> = None;
    for (i, line) in text.lines().enumerate() {
        let loc = || format!("{name}:{}", i + 1);
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let nums = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(loc(), format!("bad number {t:?}"))))
                .collect()
        };
        if let Some(v) = values.as_mut() {
            v.extend(nums(line)?);
            continue;
        }
        let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        match key {
            "dims" => {
                let d = nums(rest)?;
                if d.len() != 3 || d.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
                    return Err(Error::parse(loc(), "dims needs three positive integers"));
                }
                dims = Some([d[0] as usize, d[1] as usize, d[2] as usize]);
            }
            "origin" => {
                let o = nums(rest)?;
                if o.len() != 3 {
                    return Err(Error::parse(loc(), "origin needs three numbers"));
                }
                origin = Some(Vector3::new(o[0], o[1], o[2]));
            }
            "voxel_size" => {
                let v = nums(rest)?;
                if v.len() != 1 {
                    return Err(Error::parse(loc(), "voxel_size needs one number"));
                }
                voxel = Some(v[0]);
            }
            "values" => values = Some(nums(rest)?),
            other => return Err(Error::parse(loc(), format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::parse(name, format!("missing {k}"));
    SdfGrid::new(
        dims.ok_or_else(|| missing("dims"))?,
        origin.ok_or_else(|| missing("origin"))?,
        voxel.ok_or_else(|| missing("voxel_size"))?,
        values.ok_or_else(|| missing("values"))?,
    )
}

pub fn save_grid(path: &Path, grid: &SdfGrid) -> Result<()> {
    write_file(path, &encode_grid(grid))
}

pub fn load_grid(path: &Path) -> Result<SdfGrid> {
    decode_grid(&read_file(path)?, &path.display().to_string())
}

/// Model file: magic, version, K, shared grid geometry, the mean and K basis
/// value blocks as `f32`, then the K eigenvalues as `f64`.
pub fn encode_model(model: &ShapeModel) -> Vec<u8> {
    let mean = model.mean();
    let mut out = Vec::with_capacity(48 + 4 * mean.len() * (1 + model.num_components()));
    out.extend(MODEL_MAGIC);
    out.extend(MODEL_VERSION.to_le_bytes());
    out.extend((model.num_components() as u32).to_le_bytes());
    put_geometry(&mut out, mean);
    put_values(&mut out, mean.values());
    for b in model.basis() {
        put_values(&mut out, b.values());
    }
    for e in model.eigenvalues() {
        out.extend(e.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8], name: &str) -> Result<ShapeModel> {
    if !bytes.starts_with(MODEL_MAGIC) {
        return Err(Error::parse(name, "not a shape model file"));
    }
    let mut r = ByteReader {
        bytes,
        pos: 4,
        name: name.to_string(),
    };
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::parse(name, format!("unsupported model version {version}")));
    }
    let k = r.u32()? as usize;
    let (dims, origin, voxel) = take_geometry(&mut r)?;
    let n = dims.iter().product();
    let mean = SdfGrid::new(dims, origin, voxel, r.f32s(n)?)?;
    let basis = (0..k).map(|_| mean.with_values(r.f32s(n)?)).collect::<Result<Vec<_>>>()?;
    let sigmas = (0..k).map(|_| r.f64().map(f64::sqrt)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if k == 0 {
        return Ok(ShapeModel::rigid(mean));
    }
    ShapeModel::new(mean, basis, sigmas)
}

pub fn save_model(path: &Path, model: &ShapeModel) -> Result<()> {
    write_file(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<ShapeModel> {
    decode_model(&read_file(path)?, &path.display().to_string())
}

/// Depth map in the two-dimensional grid variant: magic, version 2, width,
/// height, then `f32` depths row by row (infinite where nothing was hit).
pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * depth.data.len());
    out.extend(GRID_MAGIC);
    out.extend(DEPTH_VERSION.to_le_bytes());
    out.extend((depth.width as u32).to_le_bytes());
    out.extend((depth.height as u32).to_le_bytes());
    put_values(&mut out, &depth.data);
    out
}

pub fn decode_depth(bytes: &[u8], name: &str) -> Result<DepthMap> {
    if !bytes.starts_with(GRID_MAGIC) {
        return Err(Error::parse(name, "not a depth file"));
    }
    let mut r = ByteReader {
        bytes,
        pos: 4,
        name: name.to_string(),
    };
    let version = r.u32()?;
    if version != DEPTH_VERSION {
        return Err(Error::parse(name, format!("expected a depth map, found grid version {version}")));
    }
    let (width, height) = (r.u32()? as usize, r.u32()? as usize);
    let data = r.f32s(width * height)?;
    r.finish()?;
    Ok(DepthMap { width, height, data })
}

pub fn save_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write_file(path, &encode_depth(depth))
}

// ---- calibration ---------------------------------------------------------

/// Parses KITTI-style `P2:` / `P3:` projection lines into a rectified rig.
/// The baseline is `(P2[0,3] − P3[0,3])/f`, i.e. `−P3[0,3]/f` when the left
/// matrix carries no offset. Other lines are ignored.
pub fn parse_calibration(text: &str) -> Result<StereoRig> {
    let mut p2 = None;
    let mut p3 = None;
    for (i, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        let slot = match key.trim() {
            "P2" => &mut p2,
            "P3" => &mut p3,
            _ => continue,
        };
        let loc = format!("line {} ({})", i + 1, key.trim());
        let nums = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(&loc, format!("bad number {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if nums.len() != 12 {
            return Err(Error::parse(&loc, format!("expected 12 numbers, found {}", nums.len())));
        }
        if nums.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(&loc, "non-finite entry"));
        }
        *slot = Some(nums);
    }
    let p2 = p2.ok_or_else(|| Error::parse("calibration", "missing P2 line"))?;
    let p3 = p3.ok_or_else(|| Error::parse("calibration", "missing P3 line"))?;
    let (f, fv) = (p2[0], p2[5]);
    if !(f > 0.0 && fv > 0.0) {
        return Err(Error::parse("calibration", format!("focal length must be positive, got {f}")));
    }
    let baseline = (p2[3] - p3[3]) / f;
    if baseline == 0.0 {
        return Err(Error::parse("calibration", "zero baseline"));
    }
    let k = CameraIntrinsics::new(f, fv, p2[2], p2[6])?;
    Ok(StereoRig::rectified(k, baseline))
}

pub fn load_calibration(path: &Path) -> Result<StereoRig> {
    parse_calibration(&read_text(path)?).map_err(|e| match e {
        Error::Parse { location, message } => Error::parse(format!("{}: {location}", path.display()), message),
        other => other,
    })
}

/// Writes the `P2:`/`P3:` lines of a rectified rig.
pub fn format_calibration(rig: &StereoRig) -> String {
    let k = &rig.left;
    let b = rig.baseline();
    let row = |tx: f64| format!("{} 0 {} {} 0 {} {} 0 0 0 1 0", k.fu, k.cu, tx, k.fv, k.cv);
    format!("P2: {}\nP3: {}\n", row(0.0), row(-k.fu * b))
}

// ---- images --------------------------------------------------------------

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Loads an 8- or 16-bit grayscale (or color, converted) image into `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let bytes = read_file(path)?;
    let img = image::load_from_memory(&bytes).map_err(|e| image_error(path, e))?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    GrayImage::new(w as usize, h as usize, luma.into_raw().into_iter().map(f64::from).collect())
}

/// A mask is a grayscale image with 255 meaning foreground probability 1.
pub fn load_mask(path: &Path) -> Result<GrayImage> {
    load_gray(path)
}

fn to_luma8(img: &GrayImage) -> image::GrayImage {
    let data = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(img.width() as u32, img.height() as u32, data).expect("buffer size")
}

/// Saves as 8-bit; the format follows the extension (`.pgm`, `.png`).
pub fn save_gray(path: &Path, img: &GrayImage) -> Result<()> {
    to_luma8(img).save(path).map_err(|e| image_error(path, e))
}

// ---- ground plane --------------------------------------------------------

/// One plane `nx ny nz d` per non-empty line; `#` starts a comment.
pub fn parse_planes(text: &str) -> Result<Vec<GroundPlane>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let v = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(&loc, format!("bad number {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != 4 {
            return Err(Error::parse(&loc, format!("expected 4 numbers, found {}", v.len())));
        }
        out.push(GroundPlane::new(Vector3::new(v[0], v[1], v[2]), v[3]).map_err(|e| Error::parse(&loc, e.to_string()))?);
    }
    Ok(out)
}

/// The plane of the first frame in a plane file.
pub fn load_plane(path: &Path) -> Result<GroundPlane> {
    let name = path.display().to_string();
    parse_planes(&read_text(path)?)
        .map_err(|e| match e {
            Error::Parse { location, message } => Error::parse(format!("{name}: {location}"), message),
            other => other,
        })?
        .into_iter()
        .next()
        .ok_or_else(|| Error::parse(name, "no plane"))
}

pub fn format_plane(plane: &GroundPlane) -> String {
    let n = plane.normal();
    format!("{} {} {} {}\n", n.x, n.y, n.z, plane.offset())
}

// ---- point clouds --------------------------------------------------------

/// ASCII cloud, one `x y z` per line.
pub fn write_xyz(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_xyz(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let loc = format!("{}:{}", path.display(), i + 1);
        let v = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(&loc, format!("bad number {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != 3 {
            return Err(Error::parse(&loc, format!("expected 3 numbers, found {}", v.len())));
        }
        out.push(Vector3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

// ---- structured text -----------------------------------------------------

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::parse(path.display().to_string(), e.message().to_string()))
}

fn save_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    write_file(path, text.as_bytes())
}

/// Solver configuration from a `key = value` file; absent keys keep their
/// defaults and unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<SolverConfig> {
    let cfg: SolverConfig = load_toml(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn pose_to_row_major(pose: &Pose) -> [f64; 16] {
    let m = pose.to_matrix();
    std::array::from_fn(|i| m[(i / 4, i % 4)])
}

pub fn pose_from_row_major(v: &[f64; 16]) -> Result<Pose> {
    Pose::from_matrix(&Matrix4::from_row_slice(v))
}

/// One instance block of a detection file. Poses are object-to-camera,
/// 4×4 row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionEntry {
    pub id: u64,
    /// `[u_min, v_min, u_max, v_max]`, the max bounds exclusive.
    pub bbox: [usize; 4],
    pub init_pose: [f64; 16],
    pub mask_left: PathBuf,
    pub mask_right: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<[f64; 16]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_cloud: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFile {
    #[serde(default)]
    pub instance: Vec<DetectionEntry>,
}

/// Optional ground truth carried with a detection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub pose: Option<Pose>,
    pub cloud: Option<Vec<Vector3<f64>>>,
}

/// Reads a detection file and every file it references.
pub fn load_detections(path: &Path) -> Result<Vec<(Detection, GroundTruth)>> {
    let file: DetectionFile = load_toml(path)?;
    let base = parent_dir(path);
    let mut ids = std::collections::HashSet::new();
    file.instance
        .iter()
        .map(|e| {
            let loc = || format!("{}: instance {}", path.display(), e.id);
            if !ids.insert(e.id) {
                return Err(Error::parse(loc(), "duplicate id"));
            }
            let [u0, v0, u1, v1] = e.bbox;
            let bbox = BBox::new(u0, v0, u1, v1).map_err(|err| Error::parse(loc(), err.to_string()))?;
            let init_pose = pose_from_row_major(&e.init_pose).map_err(|err| Error::parse(loc(), err.to_string()))?;
            let gt = GroundTruth {
                pose: e
                    .gt_pose
                    .map(|p| pose_from_row_major(&p).map_err(|err| Error::parse(loc(), err.to_string())))
                    .transpose()?,
                cloud: e.gt_cloud.as_ref().map(|p| read_xyz(&resolve(&base, p))).transpose()?,
            };
            Ok((
                Detection {
                    id: e.id,
                    bbox,
                    mask_left: load_mask(&resolve(&base, &e.mask_left))?,
                    mask_right: load_mask(&resolve(&base, &e.mask_right))?,
                    init_pose,
                },
                gt,
            ))
        })
        .collect()
}

pub fn save_detections(path: &Path, file: &DetectionFile) -> Result<()> {
    save_toml(path, file)
}

/// File names of one frame's inputs, relative to the bundle file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleFile {
    pub calib: PathBuf,
    pub left: PathBuf,
    pub right: PathBuf,
    pub detections: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane: Option<PathBuf>,
}

impl BundleFile {
    pub fn load(path: &Path) -> Result<BundleFile> {
        let mut b: BundleFile = load_toml(path)?;
        let base = parent_dir(path);
        for p in [&mut b.calib, &mut b.left, &mut b.right, &mut b.detections] {
            *p = resolve(&base, p);
        }
        b.plane = b.plane.map(|p| resolve(&base, &p));
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_toml(path, self)
    }
}

/// All inputs of one frame, loaded and checked.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub frame: StereoFrame,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
    pub plane: Option<GroundPlane>,
}

impl FrameBundle {
    /// Loads the files named by `paths` (already resolved) and checks that
    /// all images share one size.
    pub fn load(paths: &BundleFile) -> Result<FrameBundle> {
        let rig = load_calibration(&paths.calib)?;
        let left = load_gray(&paths.left)?;
        let right = load_gray(&paths.right)?;
        let size = (left.width(), left.height());
        if (right.width(), right.height()) != size {
            return Err(image_error(
                &paths.right,
                format!("size differs from the left image {}x{}", size.0, size.1),
            ));
        }
        let (detections, ground_truth): (Vec<_>, Vec<_>) = load_detections(&paths.detections)?.into_iter().unzip();
        for d in &detections {
            for m in [&d.mask_left, &d.mask_right] {
                if (m.width(), m.height()) != size {
                    return Err(Error::parse(
                        paths.detections.display().to_string(),
                        format!("instance {}: mask size differs from the images", d.id),
                    ));
                }
            }
            if !d.bbox.fits(size.0, size.1) {
                return Err(Error::parse(
                    paths.detections.display().to_string(),
                    format!("instance {}: bounding box outside the image", d.id),
                ));
            }
        }
        let plane = paths.plane.as_deref().map(load_plane).transpose()?;
        Ok(FrameBundle {
            frame: StereoFrame { rig, left, right },
            detections,
            ground_truth,
            plane,
        })
    }
}

// ---- results -------------------------------------------------------------

/// Per-instance output. `status` is absent and `error` set when the fit
/// failed outright.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub id: u64,
    /// Refined object-to-camera pose, 4×4 row-major.
    pub pose: [f64; 16],
    pub z: Vec<f64>,
    pub energy: EnergyTerms,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<FitStatus>,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<ShapeMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResultRecord {
    pub fn from_fit(fit: &FitResult, metrics: Option<ShapeMetrics>) -> Self {
        Self {
            id: fit.id,
            pose: pose_to_row_major(&fit.pose),
            z: fit.z.clone(),
            energy: fit.energy,
            status: Some(fit.status),
            iterations: fit.iterations,
            metrics,
            error: None,
        }
    }

    pub fn failed(id: u64, init_pose: &Pose, k: usize, error: &Error) -> Self {
        Self {
            id,
            pose: pose_to_row_major(init_pose),
            z: vec![0.0; k],
            energy: EnergyTerms::default(),
            status: None,
            iterations: 0,
            metrics: None,
            error: Some(error.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    #[serde(default)]
    pub result: Vec<ResultRecord>,
}

pub fn format_results(records: &[ResultRecord]) -> Result<String> {
    toml::to_string(&ResultFile { result: records.to_vec() }).map_err(|e| Error::parse("results", e.to_string()))
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>> {
    toml::from_str::<ResultFile>(text)
        .map(|f| f.result)
        .map_err(|e| Error::parse("results", e.message().to_string()))
}

pub fn save_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    write_file(path, format_results(records)?.as_bytes())
}

pub fn load_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_results(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

// ---- overlay -------------------------------------------------------------

const OVERLAY_COLORS: [[u8; 3]; 6] = [
    [255, 40, 40],
    [40, 220, 40],
    [60, 120, 255],
    [255, 200, 0],
    [220, 60, 220],
    [0, 220, 220],
];

/// Pixel box covering the projection of the model's support box, or the
/// whole image when part of it lies behind the camera.
fn projected_region(
    shape: &ShapeInstance,
    object_to_camera: &Pose,
    k: &CameraIntrinsics,
    w: usize,
    h: usize,
) -> (usize, usize, usize, usize) {
    let (lo, hi) = shape.model().support();
    let mut u = (f64::INFINITY, f64::NEG_INFINITY);
    let mut v = (f64::INFINITY, f64::NEG_INFINITY);
    for c in 0..8 {
        let x = Vector3::new(
            if c & 1 == 0 { lo.x } else { hi.x },
            if c & 2 == 0 { lo.y } else { hi.y },
            if c & 4 == 0 { lo.z } else { hi.z },
        );
        let Ok(p) = k.project(&object_to_camera.transform_point(&x)) else {
            return (0, 0, w - 1, h - 1);
        };
        u = (u.0.min(p.x), u.1.max(p.x));
        v = (v.0.min(p.y), v.1.max(p.y));
    }
    let clamp = |x: f64, n: usize| x.clamp(0.0, (n - 1) as f64) as usize;
    (
        clamp(u.0.floor() - 1.0, w),
        clamp(v.0.floor() - 1.0, h),
        clamp(u.1.ceil() + 1.0, w),
        clamp(v.1.ceil() + 1.0, h),
    )
}

/// Left image with the `π = 0.5` contour of each fitted shape drawn on top,
/// one color per instance. The input image is not modified.
pub fn overlay(
    left: &GrayImage,
    rig: &StereoRig,
    model: &ShapeModel,
    fits: &[(Pose, Vec<f64>)],
    zeta: f64,
    samples: usize,
) -> Result<image::RgbImage> {
    let (w, h) = (left.width(), left.height());
    let mut out = image::DynamicImage::ImageLuma8(to_luma8(left)).to_rgb8();
    for (n, (object_to_camera, z)) in fits.iter().enumerate() {
        let shape = ShapeInstance::new(model, z)?;
        let camera_to_object = object_to_camera.inverse();
        let (u0, v0, u1, v1) = projected_region(&shape, object_to_camera, &rig.left, w, h);
        let rw = u1 - u0 + 1;
        let inside: Vec<bool> = (0..rw * (v1 - v0 + 1))
            .into_par_iter()
            .map(|i| {
                let dir = rig.left.ray(&Vector2::new((u0 + i % rw) as f64, (v0 + i / rw) as f64));
                silhouette::pi_value(&shape, &camera_to_object, &Vector3::zeros(), &dir, zeta, samples) >= 0.5
            })
            .collect();
        let at = |u: usize, v: usize| inside[(v - v0) * rw + (u - u0)];
        let color = image::Rgb(OVERLAY_COLORS[n % OVERLAY_COLORS.len()]);
        for v in v0..=v1 {
            for u in u0..=u1 {
                let edge = at(u, v)
                    && ((u > u0 && !at(u - 1, v)) || (u < u1 && !at(u + 1, v)) || (v > v0 && !at(u, v - 1)) || (v < v1 && !at(u, v + 1)));
                if edge {
                    out.put_pixel(u as u32, v as u32, color);
                }
            }
        }
    }
    Ok(out)
}

pub fn save_rgb(path: &Path, img: &image::RgbImage) -> Result<()> {
    img.save(path).map_err(|e| image_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kitti_calibration_baseline() {
        let text = "P0: 7.215377e+02 0 6.095593e+02 0 0 7.215377e+02 1.72854e+02 0 0 0 1 0\n\
                    P2: 7.215377e+02 0 6.095593e+02 0 0 7.215377e+02 1.72854e+02 0 0 0 1 0\n\
                    P3: 7.215377e+02 0 6.095593e+02 -3.395242e+02 0 7.215377e+02 1.72854e+02 0 0 0 1 0\n";
        let rig = parse_calibration(text).unwrap();
        assert!((rig.baseline() - 0.4706).abs() < 1e-3);
        assert_eq!(rig.left.fu, 721.5377);
        assert_eq!(rig.left.cu, 609.5593);
        assert_eq!(rig.left.cv, 172.854);
        assert_eq!(rig.left_to_right.rotation, nalgebra::Matrix3::identity());
    }

    #[test]
    fn unit_focal_baseline_is_negated_offset() {
        let rig = parse_calibration("P2: 1 0 0 0 0 1 0 0 0 0 1 0\nP3: 1 0 0 -0.7 0 1 0 0 0 0 1 0\n").unwrap();
        assert_relative_eq!(rig.baseline(), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn calibration_errors_name_the_line() {
        let err = parse_calibration("P2: 1 0 0 0 0 1 0 0 0 0 1 0\nP3: 1 0 x\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse_calibration("P2: 1 0 0 0 0 1 0 0 0 0 1\nP3: 1 0 0 -1 0 1 0 0 0 0 1 0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 1") && err.contains("12"), "{err}");
        assert!(parse_calibration("P2: 1 0 0 0 0 1 0 0 0 0 1 0\n")
            .unwrap_err()
            .to_string()
            .contains("P3"));
        assert!(parse_calibration("P2: 0 0 0 0 0 1 0 0 0 0 1 0\nP3: 0 0 0 -1 0 1 0 0 0 0 1 0\n").is_err());
        assert!(parse_calibration("P2: 1 0 0 0 0 1 0 0 0 0 1 0\nP3: 1 0 0 0 0 1 0 0 0 0 1 0\n").is_err());
    }

    #[test]
    fn calibration_round_trips() {
        let rig = StereoRig::rectified(CameraIntrinsics::new(300.0, 310.0, 159.5, 119.5).unwrap(), 0.54);
        let back = parse_calibration(&format_calibration(&rig)).unwrap();
        assert_eq!(back.left, rig.left);
        assert_relative_eq!(back.baseline(), 0.54, epsilon = 1e-14);
    }

    fn grid() -> SdfGrid {
        SdfGrid::from_fn([4, 3, 2], Vector3::new(-0.5, 0.25, 1.0), 0.25, |p| p.x - 0.125 * p.y + 0.5 * p.z).unwrap()
    }

    #[test]
    fn binary_grid_round_trips_through_f32() {
        let g = grid();
        let back = decode_grid(&encode_grid(&g), "g").unwrap();
        assert!(back.same_geometry(&g));
        for (a, b) in back.values().iter().zip(g.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bytes = encode_grid(&g);
        assert!(decode_grid(&bytes[..bytes.len() - 1], "g").is_err());
    }

    #[test]
    fn text_grid_matches_binary() {
        let text = "# fixture\ndims 2 2 2\norigin 0 0 0\nvoxel_size 0.5\nvalues\n-1 -1 -1 -1\n1 1 1 1\n";
        let g = parse_grid_text(text, "t").unwrap();
        assert_eq!(g.dims(), [2, 2, 2]);
        assert_eq!(g.value_at(1, 1, 1), 1.0);
        assert_eq!(decode_grid(text.as_bytes(), "t").unwrap(), g);
        let err = parse_grid_text("dims 2 2\n", "t").unwrap_err().to_string();
        assert!(err.contains("t:1"), "{err}");
    }

    #[test]
    fn model_round_trips() {
        let g = grid();
        let b = g.with_values(g.values().iter().map(|v| v * 0.5).collect()).unwrap();
        let model = ShapeModel::new(g, vec![b], vec![0.75]).unwrap();
        let back = decode_model(&encode_model(&model), "m").unwrap();
        assert_eq!(back.num_components(), 1);
        assert_relative_eq!(back.sigmas()[0], 0.75, epsilon = 1e-15);
        assert!(decode_model(&encode_grid(model.mean()), "m").is_err());
    }

    #[test]
    fn depth_round_trips_with_misses() {
        let d = DepthMap {
            width: 3,
            height: 2,
            data: vec![1.5, f64::INFINITY, 2.0, 3.25, 4.0, f64::INFINITY],
        };
        assert_eq!(decode_depth(&encode_depth(&d), "d").unwrap(), d);
        assert!(decode_depth(&encode_grid(&grid()), "d").is_err());
    }

    #[test]
    fn planes_parse_and_canonicalize() {
        let planes = parse_planes("# frame planes\n0 1 0 -1.65\n0.0 -1 0.0 1.7\n").unwrap();
        assert_eq!(planes.len(), 2);
        assert_eq!(planes[0].normal(), Vector3::new(0.0, -1.0, 0.0));
        assert_eq!(planes[0].offset(), 1.65);
        assert!(parse_planes("0 1 0\n").unwrap_err().to_string().contains("line 1"));
        let back = parse_planes(&format_plane(&planes[1])).unwrap();
        assert_eq!(back[0], planes[1]);
    }

    #[test]
    fn result_records_round_trip() {
        let records = vec![
            ResultRecord {
                id: 3,
                pose: pose_to_row_major(&Pose::from_yaw(0.3, Vector3::new(1.0 / 3.0, 1.6, 9.1))),
                z: vec![0.1, -1.0 / 7.0, 2e-17],
                energy: EnergyTerms {
                    silhouette_left: 0.123456789012345,
                    total: 1.0 / 3.0,
                    ..Default::default()
                },
                status: Some(FitStatus::Converged),
                iterations: 12,
                metrics: Some(ShapeMetrics {
                    completeness: 0.9,
                    accuracy: 0.8,
                    f1: 2.0 * 0.72 / 1.7,
                    rmse: 0.031,
                    threshold: 0.2,
                }),
                error: None,
            },
            ResultRecord::failed(4, &Pose::identity(), 2, &Error::InvalidArgument("bad box".into())),
        ];
        let text = format_results(&records).unwrap();
        assert_eq!(parse_results(&text).unwrap(), records);
    }

    #[test]
    fn xyz_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        let pts = vec![Vector3::new(0.1, -2.0 / 3.0, 5.0), Vector3::new(1e-9, 2.5, -3.0)];
        write_xyz(&path, &pts).unwrap();
        assert_eq!(read_xyz(&path).unwrap(), pts);
    }

    #[test]
    fn masks_map_255_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut m = GrayImage::filled(4, 3, 0.0);
        m.set(1, 2, 1.0);
        save_gray(&path, &m).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back, m);
        let err = load_mask(&dir.path().join("missing.pgm")).unwrap_err().to_string();
        assert!(err.contains("missing.pgm"), "{err}");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "lambda_silh = 3.0\nzeta = 50.0\n").unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.lambda_silh, 3.0);
        assert_eq!(cfg.max_iterations, SolverConfig::default().max_iterations);
        fs::write(&path, "lambda_silk = 3.0\n").unwrap();
        assert!(load_config(&path).is_err());
    }
}
