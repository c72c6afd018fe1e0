//! Per-slice Sobel gradients and edge-candidate extraction.
//!
//! Gradients are computed on axial slices by cross-correlation with the
//! Sobel kernels below, with replicate-edge padding. `Gx` responds to
//! intensity change along x (columns), `Gy` along y (rows).
//!
//! Edge candidates are voxels inside the (1-voxel dilated) mask whose
//! gradient magnitude exceeds a percentile of the in-mask magnitudes and
//! that survive non-maximum suppression along the quantized gradient
//! direction.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid2;
use crate::volume::{Volume, VoxelData};

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

pub const DEFAULT_THRESHOLD_PERCENTILE: f64 = 75.0;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error("slice is {width}x{height}, need at least 3x3")]
    TooSmall { width: usize, height: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image and mask grids differ")]
    DimMismatch,
    #[error("mask has no foreground voxels")]
    EmptyMask,
    #[error("threshold percentile must lie in (0, 100), got {0}")]
    BadPercentile(f64),
    #[error("malformed edge map: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cross-correlate `slice` with both Sobel kernels. Returns `(Gx, Gy)`.
pub fn sobel_slice(slice: &Grid2<f64>) -> Result<(Grid2<f64>, Grid2<f64>), EdgeError> {
    if slice.width < 3 || slice.height < 3 {
        return Err(EdgeError::TooSmall {
            width: slice.width,
            height: slice.height,
        });
    }
    let (w, h) = (slice.width, slice.height);
    let mut gx = Grid2::new(w, h);
    let mut gy = Grid2::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for (dy, (krow_x, krow_y)) in SOBEL_X.iter().zip(SOBEL_Y.iter()).enumerate() {
                for dx in 0..3 {
                    let v = slice.get_clamped(x as i64 + dx as i64 - 1, y as i64 + dy as i64 - 1);
                    sx += krow_x[dx] * v;
                    sy += krow_y[dx] * v;
                }
            }
            gx.set(x, y, sx);
            gy.set(x, y, sy);
        }
    }
    Ok((gx, gy))
}

pub fn gradient_magnitude(gx: &Grid2<f64>, gy: &Grid2<f64>) -> Result<Grid2<f64>, EdgeError> {
    if !gx.same_shape(gy) {
        return Err(EdgeError::ShapeMismatch(format!(
            "Gx is {}x{}, Gy is {}x{}",
            gx.width, gx.height, gy.width, gy.height
        )));
    }
    Ok(Grid2 {
        width: gx.width,
        height: gx.height,
        data: gx
            .data
            .iter()
            .zip(&gy.data)
            .map(|(a, b)| a.hypot(*b))
            .collect(),
    })
}

/// Sobel gradients of axial slice `z`.
pub fn axial_gradients(v: &Volume, z: usize) -> Result<(Grid2<f64>, Grid2<f64>), EdgeError> {
    let [nx, ny, _] = v.dims();
    sobel_slice(&Grid2::from_vec(nx, ny, v.axial_slice(z)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SliceAxis {
    Axial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeVoxel {
    pub index: [usize; 3],
    pub grad_x: f64,
    pub grad_y: f64,
    pub magnitude: f64,
    pub slice_axis: SliceAxis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    /// Sorted by (z, y, x).
    pub voxels: Vec<EdgeVoxel>,
    pub source_dims: [usize; 3],
    pub threshold_used: f64,
}

impl EdgeMap {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,z,gx,gy,mag\n");
        for e in &self.voxels {
            let [x, y, z] = e.index;
            let _ = writeln!(
                s,
                "{x},{y},{z},{:?},{:?},{:?}",
                e.grad_x, e.grad_y, e.magnitude
            );
        }
        s
    }

    /// Parse the CSV written by [`EdgeMap::to_csv`]; geometry comes from the caller.
    pub fn from_csv(
        text: &str,
        source_dims: [usize; 3],
        threshold_used: f64,
    ) -> Result<Self, EdgeError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let mut voxels = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| EdgeError::Malformed(e.to_string()))?;
            if rec.len() != 6 {
                return Err(EdgeError::Malformed(format!("expected 6 fields, got {}", rec.len())));
            }
            let int = |i: usize| {
                rec[i]
                    .parse::<usize>()
                    .map_err(|_| EdgeError::Malformed(format!("bad index {:?}", &rec[i])))
            };
            let real = |i: usize| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| EdgeError::Malformed(format!("bad value {:?}", &rec[i])))
            };
            let index = [int(0)?, int(1)?, int(2)?];
            if (0..3).any(|k| index[k] >= source_dims[k]) {
                return Err(EdgeError::Malformed(format!("index {index:?} out of bounds")));
            }
            voxels.push(EdgeVoxel {
                index,
                grad_x: real(3)?,
                grad_y: real(4)?,
                magnitude: real(5)?,
                slice_axis: SliceAxis::Axial,
            });
        }
        Ok(Self {
            voxels,
            source_dims,
            threshold_used,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), EdgeError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Linear-interpolated percentile of `values` (sorted in place).
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Neighbour offsets `(dx, dy)` along the gradient direction quantized to 0/45/90/135 degrees.
#[inline]
fn nms_offset(gx: f64, gy: f64) -> (i64, i64) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (1, 0)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (0, 1)
    } else {
        (-1, 1)
    }
}

/// Non-maximum suppression test at `(x, y)`. Ties along a plateau resolve to the
/// voxel on the positive side, so a two-voxel ridge keeps exactly one voxel.
#[inline]
pub fn is_local_max(mag: &Grid2<f64>, gx: f64, gy: f64, x: usize, y: usize) -> bool {
    let (dx, dy) = nms_offset(gx, gy);
    let m = mag.get(x, y);
    let (x, y) = (x as i64, y as i64);
    let fwd = mag.get_clamped(x + dx, y + dy);
    let back = mag.get_clamped(x - dx, y - dy);
    let fwd = if in_bounds(mag, x + dx, y + dy) { fwd } else { f64::NEG_INFINITY };
    let back = if in_bounds(mag, x - dx, y - dy) { back } else { f64::NEG_INFINITY };
    m >= back && m > fwd
}

#[inline]
fn in_bounds<T>(g: &Grid2<T>, x: i64, y: i64) -> bool {
    x >= 0 && y >= 0 && (x as usize) < g.width && (y as usize) < g.height
}

/// In-plane 8-neighbour dilation of a binary mask slice.
fn dilate_slice(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    out[ny * w + nx] = true;
                }
            }
        }
    }
    out
}

/// The 1-voxel in-plane dilation of `mask`, x-fastest.
pub fn dilated_mask(mask: &Volume) -> Vec<bool> {
    let [nx, ny, nz] = mask.dims();
    let n = nx * ny;
    let mut out = Vec::with_capacity(mask.len());
    for z in 0..nz {
        let slice: Vec<bool> = (0..n)
            .map(|i| mask.get(i % nx, i / nx, z) != 0.0)
            .collect();
        out.extend(dilate_slice(&slice, nx, ny));
    }
    out
}

struct SliceEdges {
    mags_in_mask: Vec<f64>,
    candidates: Vec<EdgeVoxel>,
}

/// Extract edge candidates from `v` inside `mask`.
pub fn extract_edges(
    v: &Volume,
    mask: &Volume,
    threshold_percentile: f64,
) -> Result<EdgeMap, EdgeError> {
    if !(threshold_percentile > 0.0 && threshold_percentile < 100.0) {
        return Err(EdgeError::BadPercentile(threshold_percentile));
    }
    if !v.same_grid(mask) {
        return Err(EdgeError::DimMismatch);
    }
    let any_fg = match mask.data() {
        VoxelData::U8(d) => d.iter().any(|&m| m != 0),
        VoxelData::I16(d) => d.iter().any(|&m| m != 0),
    };
    if !any_fg {
        return Err(EdgeError::EmptyMask);
    }
    let [nx, ny, nz] = v.dims();
    if nx < 3 || ny < 3 {
        return Err(EdgeError::TooSmall {
            width: nx,
            height: ny,
        });
    }
    let region = dilated_mask(mask);
    let plane = nx * ny;

    let per_slice: Vec<SliceEdges> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let in_region = &region[z * plane..(z + 1) * plane];
            if !in_region.iter().any(|&b| b) {
                return SliceEdges {
                    mags_in_mask: Vec::new(),
                    candidates: Vec::new(),
                };
            }
            let (gx, gy) = axial_gradients(v, z).expect("slice checked >= 3x3");
            let mag = gradient_magnitude(&gx, &gy).expect("same shape");
            let mut mags_in_mask = Vec::new();
            let mut candidates = Vec::new();
            for y in 0..ny {
                for x in 0..nx {
                    if !in_region[y * nx + x] {
                        continue;
                    }
                    let m = mag.get(x, y);
                    mags_in_mask.push(m);
                    if m > 0.0 && is_local_max(&mag, gx.get(x, y), gy.get(x, y), x, y) {
                        candidates.push(EdgeVoxel {
                            index: [x, y, z],
                            grad_x: gx.get(x, y),
                            grad_y: gy.get(x, y),
                            magnitude: m,
                            slice_axis: SliceAxis::Axial,
                        });
                    }
                }
            }
            SliceEdges {
                mags_in_mask,
                candidates,
            }
        })
        .collect();

    let mut all_mags: Vec<f64> = per_slice
        .iter()
        .flat_map(|s| s.mags_in_mask.iter().copied())
        .collect();
    let threshold = percentile(&mut all_mags, threshold_percentile);
    let voxels = per_slice
        .into_iter()
        .flat_map(|s| s.candidates)
        .filter(|e| e.magnitude > threshold)
        .collect();
    Ok(EdgeMap {
        voxels,
        source_dims: v.dims(),
        threshold_used: threshold,
    })
}

/// |G| of every axial slice as a `MET_SHORT` volume (saturating), for inspection.
pub fn magnitude_volume(v: &Volume) -> Result<Volume, EdgeError> {
    let [_, _, nz] = v.dims();
    let slices: Vec<Vec<i16>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let (gx, gy) = axial_gradients(v, z)?;
            let mag = gradient_magnitude(&gx, &gy)?;
            Ok(mag
                .data
                .iter()
                .map(|m| m.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
                .collect())
        })
        .collect::<Result<_, EdgeError>>()?;
    Volume::new(
        v.dims(),
        v.spacing(),
        v.origin(),
        VoxelData::I16(slices.concat()),
    )
    .map_err(|e| EdgeError::Malformed(e.to_string()))
}
