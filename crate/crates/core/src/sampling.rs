//! Gradient-driven pixel selection inside a detection box, and occlusion
//! masks between detections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::image::GrayImage;

/// Pixel rectangle `[u_min, u_max) × [v_min, v_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub u_min: usize,
    pub v_min: usize,
    pub u_max: usize,
    pub v_max: usize,
}

impl BBox {
    pub fn new(u_min: usize, v_min: usize, u_max: usize, v_max: usize) -> Result<Self> {
        if u_max <= u_min || v_max <= v_min {
            return Err(Error::InvalidArgument(format!(
                "empty bounding box ({u_min}, {v_min}, {u_max}, {v_max})"
            )));
        }
        Ok(Self {
            u_min,
            v_min,
            u_max,
            v_max,
        })
    }

    pub fn width(&self) -> usize {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> usize {
        self.v_max - self.v_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        u >= self.u_min && u < self.u_max && v >= self.v_min && v < self.v_max
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.u_max <= width && self.v_max <= height
    }

    /// Grows the box by `fraction` of its size on every side, plus `pixels`,
    /// clipped to a `width × height` image.
    pub fn expanded(&self, fraction: f64, pixels: usize, width: usize, height: usize) -> BBox {
        let du = (self.width() as f64 * fraction).round() as usize + pixels;
        let dv = (self.height() as f64 * fraction).round() as usize + pixels;
        BBox {
            u_min: self.u_min.saturating_sub(du),
            v_min: self.v_min.saturating_sub(dv),
            u_max: (self.u_max + du).min(width),
            v_max: (self.v_max + dv).min(height),
        }
    }

    /// Tight box around mask pixels above `threshold`.
    pub fn of_mask(mask: &GrayImage, threshold: f64) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for v in 0..mask.height() {
            for u in 0..mask.width() {
                if mask.get(u, v) > threshold {
                    let bb = b.get_or_insert(BBox {
                        u_min: u,
                        v_min: v,
                        u_max: u + 1,
                        v_max: v + 1,
                    });
                    bb.u_min = bb.u_min.min(u);
                    bb.u_max = bb.u_max.max(u + 1);
                    bb.v_max = bb.v_max.max(v + 1);
                }
            }
        }
        b
    }
}

/// One object instance: box, per-image foreground probabilities and the
/// initial object-to-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub id: u64,
    pub bbox: BBox,
    pub mask_left: GrayImage,
    pub mask_right: GrayImage,
    /// `T_o^c`, object to left camera.
    pub init_pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: bool) {
        self.data[v * self.width + u] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Orders detections from closest to farthest: larger box bottom first,
/// then larger area, then smaller id.
pub fn depth_order(detections: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..detections.len()).collect();
    idx.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.bbox
            .v_max
            .cmp(&da.bbox.v_max)
            .then(db.bbox.area().cmp(&da.bbox.area()))
            .then(da.id.cmp(&db.id))
    });
    idx
}

/// Occlusion mask of `target` in the left image.
pub fn occlusion_mask(detections: &[Detection], target: u64) -> Result<BinaryMask> {
    let t = find(detections, target)?;
    occlusion_mask_in(detections, target, |d| &d.mask_left, detections[t].bbox)
}

/// Union of the masks (thresholded at 0.5) of every detection closer than
/// `target`, restricted to `region`.
pub fn occlusion_mask_in<'a>(
    detections: &'a [Detection],
    target: u64,
    mask_of: impl Fn(&'a Detection) -> &'a GrayImage,
    region: BBox,
) -> Result<BinaryMask> {
    let t = find(detections, target)?;
    let target_mask = mask_of(&detections[t]);
    let mut occ = BinaryMask::empty(target_mask.width(), target_mask.height());
    for &i in depth_order(detections).iter().take_while(|&&i| i != t) {
        let m = mask_of(&detections[i]);
        for v in region.v_min..region.v_max.min(m.height()) {
            for u in region.u_min..region.u_max.min(m.width()) {
                if m.get(u, v) > 0.5 {
                    occ.set(u, v, true);
                }
            }
        }
    }
    Ok(occ)
}

fn find(detections: &[Detection], id: u64) -> Result<usize> {
    detections
        .iter()
        .position(|d| d.id == id)
        .ok_or_else(|| Error::InvalidArgument(format!("no detection with id {id}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub coarse_cell: usize,
    pub fine_cell: usize,
    /// Target count as a fraction of the box area.
    pub density: f64,
    /// Initial threshold offset above the coarse-cell median gradient.
    pub offset: f64,
    pub max_repasses: usize,
    /// Accepted relative deviation from the target count.
    pub tolerance: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            coarse_cell: 32,
            fine_cell: 8,
            density: 0.05,
            offset: 7.0 / 255.0,
            max_repasses: 3,
            tolerance: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledPixel {
    pub u: usize,
    pub v: usize,
    pub round: u8,
}

/// Selected pixels in row-major order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PixelSet {
    pub pixels: Vec<SampledPixel>,
}

impl PixelSet {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SampledPixel> {
        self.pixels.iter()
    }
}

/// Target count `round(density·h·w)`.
pub fn target_count(bbox: &BBox, density: f64) -> usize {
    (density * bbox.area() as f64).round() as usize
}

struct Region {
    bbox: BBox,
    grad: Vec<f64>,
    valid: Vec<bool>,
}

impl Region {
    /// Cells of size `cell` anchored at the box corner, as index lists in
    /// row-major order over valid pixels.
    fn cells(&self, cell: usize) -> Vec<Vec<usize>> {
        let (w, h) = (self.bbox.width(), self.bbox.height());
        let (cw, ch) = (w.div_ceil(cell), h.div_ceil(cell));
        let mut out = vec![Vec::new(); cw * ch];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if self.valid[i] {
                    out[(y / cell) * cw + x / cell].push(i);
                }
            }
        }
        out
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Two-round selection: pixels above their coarse cell's median gradient
/// plus an offset, then the strongest pixel of every fine cell left empty.
/// The offset is re-tuned for up to `max_repasses` passes and the result is
/// then trimmed or topped up toward the target count.
pub fn adaptive_sample(image: &GrayImage, bbox: &BBox, occ: &BinaryMask, params: &SamplingParams) -> Result<PixelSet> {
    if bbox.area() == 0 || !bbox.fits(image.width(), image.height()) {
        return Err(Error::InvalidArgument("bounding box outside the image".into()));
    }
    let mut region = Region {
        bbox: *bbox,
        grad: Vec::with_capacity(bbox.area()),
        valid: Vec::with_capacity(bbox.area()),
    };
    for v in bbox.v_min..bbox.v_max {
        for u in bbox.u_min..bbox.u_max {
            region.grad.push(image.central_gradient(u, v).norm());
            let occluded = u < occ.width() && v < occ.height() && occ.get(u, v);
            region.valid.push(!occluded);
        }
    }
    let coarse = region.cells(params.coarse_cell.max(1));
    let fine = region.cells(params.fine_cell.max(1));
    let medians: Vec<f64> = coarse
        .iter()
        .map(|c| {
            let mut g: Vec<f64> = c.iter().map(|&i| region.grad[i]).collect();
            if g.is_empty() {
                0.0
            } else {
                median(&mut g)
            }
        })
        .collect();
    let w = bbox.width();
    let cw = w.div_ceil(params.coarse_cell.max(1));
    let coarse_of = |i: usize| {
        let (x, y) = (i % w, i / w);
        (y / params.coarse_cell.max(1)) * cw + x / params.coarse_cell.max(1)
    };

    let n_target = target_count(bbox, params.density);
    let lower = ((1.0 - params.tolerance) * n_target as f64).ceil() as usize;
    let upper = ((1.0 + params.tolerance) * n_target as f64).floor() as usize;

    let select = |offset: f64| -> Vec<u8> {
        let mut round = vec![0u8; region.grad.len()];
        for (i, r) in round.iter_mut().enumerate() {
            let g = region.grad[i];
            if region.valid[i] && g > 0.0 && g > medians[coarse_of(i)] + offset {
                *r = 1;
            }
        }
        for cell in &fine {
            if cell.is_empty() || cell.iter().any(|&i| round[i] == 1) {
                continue;
            }
            // first maximum in row-major order
            let best = cell
                .iter()
                .copied()
                .fold(cell[0], |b, i| if region.grad[i] > region.grad[b] { i } else { b });
            round[best] = 2;
        }
        round
    };
    let count = |r: &[u8]| r.iter().filter(|&&x| x > 0).count();

    let mut offset = params.offset;
    let mut step = params.offset.abs().max(1.0 / 255.0);
    let mut rounds = select(offset);
    for _ in 0..params.max_repasses {
        let c = count(&rounds);
        if c > upper {
            offset += step;
        } else if c < lower {
            offset -= step;
        } else {
            break;
        }
        step *= 0.5;
        rounds = select(offset);
    }

    let mut c = count(&rounds);
    if c > upper {
        // drop the weakest round-1 picks, keeping one per fine cell
        let mut per_cell: Vec<usize> = fine.iter().map(|cell| cell.iter().filter(|&&i| rounds[i] == 1).count()).collect();
        let fine_w = w.div_ceil(params.fine_cell.max(1));
        let fine_of = |i: usize| (i / w / params.fine_cell.max(1)) * fine_w + (i % w) / params.fine_cell.max(1);
        let mut r1: Vec<usize> = (0..rounds.len()).filter(|&i| rounds[i] == 1).collect();
        r1.sort_by(|&a, &b| region.grad[a].total_cmp(&region.grad[b]).then(b.cmp(&a)));
        for i in r1 {
            if c <= n_target {
                break;
            }
            let f = fine_of(i);
            if per_cell[f] > 1 {
                per_cell[f] -= 1;
                rounds[i] = 0;
                c -= 1;
            }
        }
    } else if c < lower {
        // top up with the strongest remaining pixels that have any gradient
        let mut rest: Vec<usize> = (0..rounds.len())
            .filter(|&i| rounds[i] == 0 && region.valid[i] && region.grad[i] > 0.0)
            .collect();
        rest.sort_by(|&a, &b| region.grad[b].total_cmp(&region.grad[a]).then(a.cmp(&b)));
        for i in rest {
            if c >= n_target {
                break;
            }
            rounds[i] = 1;
            c += 1;
        }
    }

    let pixels = (0..rounds.len())
        .filter(|&i| rounds[i] > 0)
        .map(|i| SampledPixel {
            u: bbox.u_min + i % w,
            v: bbox.v_min + i / w,
            round: rounds[i],
        })
        .collect();
    Ok(PixelSet { pixels })
}
