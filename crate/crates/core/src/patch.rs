//! 2.5D patch extraction at edge voxels and labeled patch-set assembly.
//!
//! A patch is three 64x64 planes centered on a voxel: axial (rows y, columns x),
//! coronal (rows z, columns x) and sagittal (rows z, columns y). Pixel `(32, 32)`
//! of each plane sits on the center voxel. Intensities are clamped to the
//! `[-200, 1300]` HU bone window and scaled to `[0, 1]`; samples outside the
//! volume read as air (-1000 HU).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convnet::{derive_seed, Dataset};
use crate::edgemap::{axial_gradients, EdgeMap, EdgeVoxel};
use crate::grid::Grid2;
use crate::orientation::{orientation_at, EdgeOrientation, OrientMode, DEFAULT_WINDOW_RADIUS};
use crate::volume::{Annotation, Volume, AIR_HU};

pub const PATCH_SIZE: usize = 64;
pub const PATCH_CENTER: usize = PATCH_SIZE / 2;
pub const PLANE_LEN: usize = PATCH_SIZE * PATCH_SIZE;
pub const HU_WINDOW: (f64, f64) = (-200.0, 1300.0);
pub const DEFAULT_RADIUS_MM: f64 = 5.0;
pub const DEFAULT_POS_FRACTION: f64 = 0.33;

const PATCHSET_MAGIC: &[u8; 4] = b"P25D";
const PATCHSET_VERSION: u32 = 1;
const RECORD_LEN: usize = 1 + 1 + 4 + 12 + 3 * PLANE_LEN * 4;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("edge map is empty")]
    EmptyEdgeMap,
    #[error("no fracture-labelled edge voxels available")]
    NoPositives,
    #[error("invalid sampling parameter: {0}")]
    InvalidParam(String),
    #[error("malformed patch set: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    NonFracture = 0,
    Fracture = 1,
}

impl Label {
    pub fn class(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Original,
    Mirrored,
    Oriented,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Original, Strategy::Mirrored, Strategy::Oriented];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Original => "original",
            Strategy::Mirrored => "mirrored",
            Strategy::Oriented => "oriented",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which patch axis a mirror flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MirrorAxis {
    /// Left-right: column `j` goes to `63 - j`.
    #[default]
    Horizontal,
    /// Top-bottom: row `i` goes to `63 - i`.
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch25D {
    /// Axial, coronal, sagittal; each `PLANE_LEN` values, row-major.
    pub planes: [Vec<f32>; 3],
    pub label: Label,
    pub source_index: [usize; 3],
    pub strategy: Strategy,
    pub theta_used: Option<f64>,
}

impl Patch25D {
    pub fn pixel(&self, plane: usize, row: usize, col: usize) -> f32 {
        self.planes[plane][row * PATCH_SIZE + col]
    }
}

/// Map HU to `[0, 1]` through the bone window.
#[inline]
pub fn window_hu(hu: f64) -> f64 {
    let (lo, hi) = HU_WINDOW;
    (hu.clamp(lo, hi) - lo) / (hi - lo)
}

/// Bilinear sample of axial slice `z` at continuous `(x, y)`; air outside the volume.
#[inline]
fn bilinear_axial(v: &Volume, x: f64, y: f64, z: i64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as i64, y0 as i64);
    if fx == 0.0 && fy == 0.0 {
        return v.get_or(xi, yi, z, AIR_HU);
    }
    let v00 = v.get_or(xi, yi, z, AIR_HU);
    let v10 = v.get_or(xi + 1, yi, z, AIR_HU);
    let v01 = v.get_or(xi, yi + 1, z, AIR_HU);
    let v11 = v.get_or(xi + 1, yi + 1, z, AIR_HU);
    (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
}

fn plane_from_fn(mut f: impl FnMut(i64, i64) -> f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(PLANE_LEN);
    let c = PATCH_CENTER as i64;
    for r in 0..PATCH_SIZE as i64 {
        for col in 0..PATCH_SIZE as i64 {
            out.push(window_hu(f(r - c, col - c)) as f32);
        }
    }
    out
}

fn axis_aligned_planes(v: &Volume, index: [usize; 3]) -> [Vec<f32>; 3] {
    let [x, y, z] = [index[0] as i64, index[1] as i64, index[2] as i64];
    [
        plane_from_fn(|dr, dc| v.get_or(x + dc, y + dr, z, AIR_HU)),
        plane_from_fn(|dr, dc| v.get_or(x + dc, y, z + dr, AIR_HU)),
        plane_from_fn(|dr, dc| v.get_or(x, y + dc, z + dr, AIR_HU)),
    ]
}

pub fn mirror_plane(plane: &[f32], axis: MirrorAxis) -> Vec<f32> {
    let mut out = vec![0f32; PLANE_LEN];
    for r in 0..PATCH_SIZE {
        for c in 0..PATCH_SIZE {
            let (sr, sc) = match axis {
                MirrorAxis::Horizontal => (r, PATCH_SIZE - 1 - c),
                MirrorAxis::Vertical => (PATCH_SIZE - 1 - r, c),
            };
            out[r * PATCH_SIZE + c] = plane[sr * PATCH_SIZE + sc];
        }
    }
    out
}

/// Flip every plane of `p`.
pub fn mirror(p: &Patch25D, axis: MirrorAxis) -> Patch25D {
    Patch25D {
        planes: [
            mirror_plane(&p.planes[0], axis),
            mirror_plane(&p.planes[1], axis),
            mirror_plane(&p.planes[2], axis),
        ],
        ..p.clone()
    }
}

pub fn label_edge_voxel(
    e: &EdgeVoxel,
    annotations: &[Annotation],
    v: &Volume,
    radius_mm: f64,
) -> Label {
    label_index(e.index, annotations, v, radius_mm)
}

/// Fracture iff the voxel's world point is within `radius_mm` of any annotation.
pub fn label_index(index: [usize; 3], annotations: &[Annotation], v: &Volume, radius_mm: f64) -> Label {
    let w = v.world(index);
    let hit = annotations.iter().any(|a| {
        let d2: f64 = (0..3).map(|k| (w[k] - a.position[k]).powi(2)).sum();
        d2.sqrt() <= radius_mm
    });
    if hit {
        Label::Fracture
    } else {
        Label::NonFracture
    }
}

/// Axis-aligned planes at `e`. The label is left as `NonFracture`.
pub fn extract_original(v: &Volume, e: &EdgeVoxel) -> Patch25D {
    Patch25D {
        planes: axis_aligned_planes(v, e.index),
        label: Label::NonFracture,
        source_index: e.index,
        strategy: Strategy::Original,
        theta_used: None,
    }
}

pub fn extract_mirrored(v: &Volume, e: &EdgeVoxel, axis: MirrorAxis) -> Patch25D {
    let mut p = mirror(&extract_original(v, e), axis);
    p.strategy = Strategy::Mirrored;
    p
}

/// Axial plane resampled on a grid rotated by `orient.theta`, so the edge axis runs
/// along patch rows. Coronal and sagittal planes stay axis-aligned. Degenerate
/// orientations fall back to unrotated sampling with `theta_used = None`.
pub fn extract_oriented(v: &Volume, e: &EdgeVoxel, orient: &EdgeOrientation) -> Patch25D {
    let mut p = extract_original(v, e);
    p.strategy = Strategy::Oriented;
    if orient.is_degenerate() {
        return p;
    }
    let theta = orient.theta;
    let (s, c) = theta.sin_cos();
    let [x, y, z] = e.index;
    let (x, y, z) = (x as f64, y as f64, z as i64);
    p.planes[0] = plane_from_fn(|dr, dc| {
        let (u, w) = (dc as f64, dr as f64);
        bilinear_axial(v, x + u * c - w * s, y + u * s + w * c, z)
    });
    p.theta_used = Some(theta);
    p
}

/// Sobel gradients of the axial slices a set of voxels lives on.
pub struct GradientCache {
    slices: BTreeMap<usize, (Grid2<f64>, Grid2<f64>)>,
}

impl GradientCache {
    pub fn new<'a>(v: &Volume, voxels: impl IntoIterator<Item = &'a EdgeVoxel>) -> Self {
        let mut zs: Vec<usize> = voxels.into_iter().map(|e| e.index[2]).collect();
        zs.sort_unstable();
        zs.dedup();
        let slices = zs
            .into_par_iter()
            .map(|z| (z, axial_gradients(v, z).expect("volume slices are >= 3x3")))
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        Self { slices }
    }

    pub fn orientation(&self, e: &EdgeVoxel, window_radius: usize, mode: OrientMode) -> EdgeOrientation {
        let (gx, gy) = &self.slices[&e.index[2]];
        orientation_at(gx, gy, [e.index[0], e.index[1]], window_radius, mode)
            .expect("edge voxel lies in its slice")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub radius_mm: f64,
    pub mirror_axis: MirrorAxis,
    pub orient_mode: OrientMode,
    pub window_radius: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            radius_mm: DEFAULT_RADIUS_MM,
            mirror_axis: MirrorAxis::Horizontal,
            orient_mode: OrientMode::Tangent,
            window_radius: DEFAULT_WINDOW_RADIUS,
        }
    }
}

/// Patch used for scoring a voxel: never mirrored.
pub fn inference_patch(
    v: &Volume,
    e: &EdgeVoxel,
    strategy: Strategy,
    grads: Option<&GradientCache>,
    cfg: &SamplerConfig,
) -> Patch25D {
    match strategy {
        Strategy::Original | Strategy::Mirrored => extract_original(v, e),
        Strategy::Oriented => {
            let o = grads
                .expect("oriented extraction needs slice gradients")
                .orientation(e, cfg.window_radius, cfg.orient_mode);
            extract_oriented(v, e, &o)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch25D>,
    pub positives: usize,
    pub negatives: usize,
    pub seed: u64,
    /// Requested positives that could not be produced.
    pub pos_shortfall: usize,
    pub neg_shortfall: usize,
}

impl PatchSet {
    pub fn from_patches(patches: Vec<Patch25D>, seed: u64) -> Self {
        let positives = patches.iter().filter(|p| p.label == Label::Fracture).count();
        let negatives = patches.len() - positives;
        Self {
            patches,
            positives,
            negatives,
            seed,
            pos_shortfall: 0,
            neg_shortfall: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Concatenate sets in order; shortfalls add up.
    pub fn concat(sets: Vec<PatchSet>, seed: u64) -> Self {
        let pos_shortfall = sets.iter().map(|s| s.pos_shortfall).sum();
        let neg_shortfall = sets.iter().map(|s| s.neg_shortfall).sum();
        let patches = sets.into_iter().flat_map(|s| s.patches).collect();
        Self {
            pos_shortfall,
            neg_shortfall,
            ..Self::from_patches(patches, seed)
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.len() * RECORD_LEN);
        out.extend_from_slice(PATCHSET_MAGIC);
        out.extend_from_slice(&PATCHSET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for p in &self.patches {
            out.push(p.label as u8);
            out.push(p.strategy.code());
            let theta = p.theta_used.map(|t| t as f32).unwrap_or(f32::NAN);
            out.extend_from_slice(&theta.to_le_bytes());
            for &i in &p.source_index {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
            for plane in &p.planes {
                for v in plane {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parse a `P25D` file. The sampling seed is not part of the format; `seed` is set to 0.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PatchError> {
        let bad = |m: &str| PatchError::Malformed(m.to_owned());
        if bytes.len() < 12 || &bytes[..4] != PATCHSET_MAGIC {
            return Err(bad("missing P25D magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != PATCHSET_VERSION {
            return Err(PatchError::Malformed(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + count * RECORD_LEN {
            return Err(PatchError::Malformed(format!(
                "{} bytes for {count} patches",
                bytes.len()
            )));
        }
        let mut patches = Vec::with_capacity(count);
        for rec in bytes[12..].chunks_exact(RECORD_LEN) {
            let label = match rec[0] {
                0 => Label::NonFracture,
                1 => Label::Fracture,
                _ => return Err(bad("bad label byte")),
            };
            let strategy = Strategy::from_code(rec[1]).ok_or_else(|| bad("bad strategy byte"))?;
            let theta = f32::from_le_bytes(rec[2..6].try_into().unwrap());
            let idx = |k: usize| u32::from_le_bytes(rec[6 + 4 * k..10 + 4 * k].try_into().unwrap()) as usize;
            let source_index = [idx(0), idx(1), idx(2)];
            let floats: Vec<f32> = rec[18..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let planes = [
                floats[..PLANE_LEN].to_vec(),
                floats[PLANE_LEN..2 * PLANE_LEN].to_vec(),
                floats[2 * PLANE_LEN..].to_vec(),
            ];
            patches.push(Patch25D {
                planes,
                label,
                source_index,
                strategy,
                theta_used: (!theta.is_nan()).then_some(theta as f64),
            });
        }
        Ok(Self::from_patches(patches, 0))
    }

    pub fn save(&self, path: &Path) -> Result<(), PatchError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PatchError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl Dataset for PatchSet {
    fn len(&self) -> usize {
        self.patches.len()
    }

    fn label(&self, i: usize) -> usize {
        self.patches[i].label.class()
    }

    fn fill_input(&self, i: usize, out: &mut [f32]) {
        for (k, plane) in self.patches[i].planes.iter().enumerate() {
            out[k * PLANE_LEN..(k + 1) * PLANE_LEN].copy_from_slice(plane);
        }
    }
}

fn choose(n_avail: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked = sample(rng, n_avail, n.min(n_avail)).into_vec();
    picked.sort_unstable();
    picked
}

/// Sample labeled patches from one volume's edge map.
///
/// `target_count * pos_fraction` (rounded) patches are positives; for the mirrored
/// and oriented strategies half of them are mirrored copies of the other half.
/// Missing positives or negatives are reported in the shortfall fields, not padded.
#[allow(clippy::too_many_arguments)]
pub fn build_patchset(
    v: &Volume,
    edges: &EdgeMap,
    annotations: &[Annotation],
    strategy: Strategy,
    target_count: usize,
    pos_fraction: f64,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<PatchSet, PatchError> {
    if target_count == 0 {
        return Err(PatchError::InvalidParam("target_count must be > 0".into()));
    }
    if !(pos_fraction > 0.0 && pos_fraction < 1.0) {
        return Err(PatchError::InvalidParam(format!(
            "pos_fraction must lie in (0, 1), got {pos_fraction}"
        )));
    }
    if !(cfg.radius_mm > 0.0) {
        return Err(PatchError::InvalidParam("radius_mm must be > 0".into()));
    }
    if edges.is_empty() {
        return Err(PatchError::EmptyEdgeMap);
    }

    let labels: Vec<Label> = edges
        .voxels
        .iter()
        .map(|e| label_edge_voxel(e, annotations, v, cfg.radius_mm))
        .collect();
    let pos_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Fracture).collect();
    let neg_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::NonFracture).collect();

    let n_pos = ((target_count as f64) * pos_fraction).round() as usize;
    let n_neg = target_count - n_pos;
    if n_pos > 0 && pos_idx.is_empty() {
        return Err(PatchError::NoPositives);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5A, strategy.code() as u64]));
    let mirrors = matches!(strategy, Strategy::Mirrored | Strategy::Oriented);
    let n_pos_voxels = if mirrors { n_pos.div_ceil(2) } else { n_pos };
    let pos_pick: Vec<usize> = choose(pos_idx.len(), n_pos_voxels, &mut rng)
        .into_iter()
        .map(|i| pos_idx[i])
        .collect();
    let neg_pick: Vec<usize> = choose(neg_idx.len(), n_neg, &mut rng)
        .into_iter()
        .map(|i| neg_idx[i])
        .collect();

    let grads = (strategy == Strategy::Oriented).then(|| {
        GradientCache::new(
            v,
            pos_pick.iter().chain(&neg_pick).map(|&i| &edges.voxels[i]),
        )
    });
    let extract = |i: usize, label: Label| {
        let e = &edges.voxels[i];
        let mut p = match strategy {
            Strategy::Original => extract_original(v, e),
            Strategy::Mirrored => {
                let mut p = extract_original(v, e);
                p.strategy = Strategy::Mirrored;
                p
            }
            Strategy::Oriented => {
                let o = grads
                    .as_ref()
                    .expect("built for oriented")
                    .orientation(e, cfg.window_radius, cfg.orient_mode);
                extract_oriented(v, e, &o)
            }
        };
        p.label = label;
        p
    };

    let mut positives: Vec<Patch25D> = pos_pick
        .par_iter()
        .flat_map_iter(|&i| {
            let p = extract(i, Label::Fracture);
            if mirrors {
                let m = mirror(&p, cfg.mirror_axis);
                vec![p, m]
            } else {
                vec![p]
            }
        })
        .collect();
    positives.truncate(n_pos);
    let negatives: Vec<Patch25D> = neg_pick
        .par_iter()
        .map(|&i| extract(i, Label::NonFracture))
        .collect();

    let pos_shortfall = n_pos - positives.len();
    let neg_shortfall = n_neg - negatives.len();
    let patches = positives.into_iter().chain(negatives).collect();
    Ok(PatchSet {
        pos_shortfall,
        neg_shortfall,
        ..PatchSet::from_patches(patches, seed)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edgemap::SliceAxis;
    use crate::orientation::{principal_orientation, structure_tensor, Tensor2};
    use crate::volume::{ProcessLabel, VoxelData};
    use rand::Rng;

    fn edge(index: [usize; 3]) -> EdgeVoxel {
        EdgeVoxel {
            index,
            grad_x: 1.0,
            grad_y: 0.0,
            magnitude: 1.0,
            slice_axis: SliceAxis::Axial,
        }
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.random_range(-400i16..1500)).collect();
        Volume::new(dims, [0.5, 0.5, 1.0], [0.0; 3], VoxelData::I16(data)).unwrap()
    }

    fn annotation(pos: [f64; 3]) -> Annotation {
        Annotation {
            patient_id: "p".into(),
            position: pos,
            process_label: ProcessLabel::SpinousProcess,
        }
    }

    #[test]
    fn labels_by_world_distance() {
        let v = random_volume([20, 20, 20], 1);
        let e = edge([10, 10, 10]);
        let w = v.world(e.index);
        let near = annotation([w[0] + 2.0, w[1], w[2]]);
        assert_eq!(label_edge_voxel(&e, &[near], &v, 5.0), Label::Fracture);
        assert_eq!(label_edge_voxel(&e, &[], &v, 5.0), Label::NonFracture);
        let boundary = annotation([w[0], w[1], w[2] + 5.0]);
        assert_eq!(label_edge_voxel(&e, &[boundary], &v, 5.0), Label::Fracture);
        let far = annotation([w[0], w[1], w[2] + 5.5]);
        assert_eq!(label_edge_voxel(&e, &[far], &v, 5.0), Label::NonFracture);
    }

    #[test]
    fn window_arithmetic_and_air_padding() {
        let mut data = vec![0i16; 9 * 9 * 9];
        data[(4 * 9 + 4) * 9 + 4] = 500;
        let v = Volume::new([9, 9, 9], [1.0; 3], [0.0; 3], VoxelData::I16(data)).unwrap();
        let p = extract_original(&v, &edge([4, 4, 4]));
        let expected = ((500.0 + 200.0) / 1500.0) as f32;
        for k in 0..3 {
            assert_eq!(p.pixel(k, PATCH_CENTER, PATCH_CENTER), expected);
        }
        assert!((expected - 0.4667).abs() < 1e-4);

        let corner = extract_original(&v, &edge([0, 0, 0]));
        assert_eq!(corner.pixel(0, 0, 0), 0.0);
        assert_eq!(corner.pixel(0, 63, 63), 0.0);
        // interior 0 HU
        assert_eq!(corner.pixel(0, PATCH_CENTER, PATCH_CENTER), (200.0 / 1500.0) as f32);
    }

    #[test]
    fn mirror_is_an_involution_and_flips_columns() {
        let v = random_volume([30, 30, 12], 2);
        let e = edge([12, 17, 6]);
        let p = extract_original(&v, &e);
        for axis in [MirrorAxis::Horizontal, MirrorAxis::Vertical] {
            assert_eq!(mirror(&mirror(&p, axis), axis), p);
        }
        let m = extract_mirrored(&v, &e, MirrorAxis::Horizontal);
        for k in 0..3 {
            for r in 0..PATCH_SIZE {
                for c in 0..PATCH_SIZE {
                    assert_eq!(m.pixel(k, r, c), p.pixel(k, r, 63 - c));
                }
            }
        }
        let sym: Vec<f32> = (0..PLANE_LEN)
            .map(|i| {
                let c = i % PATCH_SIZE;
                c.min(63 - c) as f32 / 32.0
            })
            .collect();
        assert_eq!(mirror_plane(&sym, MirrorAxis::Horizontal), sym);
    }

    #[test]
    fn oriented_identity_and_fallback() {
        let v = random_volume([40, 40, 10], 3);
        let e = edge([20, 21, 5]);
        let o = EdgeOrientation {
            theta: 0.0,
            anisotropy: 1.0,
            eigenvector: [1.0, 0.0],
        };
        let a = extract_oriented(&v, &e, &o);
        let b = extract_original(&v, &e);
        assert_eq!(a.planes, b.planes);
        assert_eq!(a.theta_used, Some(0.0));

        let iso = principal_orientation(&Tensor2 { xx: 1.0, xy: 0.0, yy: 1.0 });
        let f = extract_oriented(&v, &e, &iso);
        assert_eq!(f.theta_used, None);
        assert_eq!(f.planes, b.planes);
    }

    #[test]
    fn planes_share_the_center_and_stay_normalized() {
        let v = random_volume([36, 36, 10], 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..40 {
            let e = edge([rng.random_range(0..36), rng.random_range(0..36), rng.random_range(0..10)]);
            let [x, y, z] = e.index;
            let want = window_hu(v.get(x, y, z)) as f32;
            let theta: f64 = rng.random_range(-1.5..1.5);
            let o = EdgeOrientation {
                theta,
                anisotropy: 1.0,
                eigenvector: [theta.cos(), theta.sin()],
            };
            let mh = extract_mirrored(&v, &e, MirrorAxis::Horizontal);
            let mv = extract_mirrored(&v, &e, MirrorAxis::Vertical);
            for k in 0..3 {
                assert_eq!(extract_original(&v, &e).pixel(k, PATCH_CENTER, PATCH_CENTER), want);
                assert!((extract_oriented(&v, &e, &o).pixel(k, PATCH_CENTER, PATCH_CENTER) - want).abs() <= 1e-6);
                // a pure flip moves the center one pixel: j -> 63 - j
                assert_eq!(mh.pixel(k, PATCH_CENTER, 63 - PATCH_CENTER), want);
                assert_eq!(mv.pixel(k, 63 - PATCH_CENTER, PATCH_CENTER), want);
            }
            for p in [extract_original(&v, &e), mh, extract_oriented(&v, &e, &o)] {
                assert!(p.planes.iter().flatten().all(|&q| (0.0..=1.0).contains(&q)));
                assert!(p.planes.iter().all(|pl| pl.len() == PLANE_LEN));
            }
        }
    }

    #[test]
    fn oriented_patch_makes_a_tilted_line_horizontal() {
        // bright line through (50, 50) at 30 degrees, Gaussian cross-section (sigma 1.5 px)
        let (n, nz) = (101, 3);
        let angle = 30f64.to_radians();
        let (s, c) = angle.sin_cos();
        let mut data = Vec::with_capacity(n * n * nz);
        for _ in 0..nz {
            for y in 0..n {
                for x in 0..n {
                    let (dx, dy) = (x as f64 - 50.0, y as f64 - 50.0);
                    let dist = (-s * dx + c * dy).abs();
                    let hu = 40.0 + 1160.0 * (-dist * dist / 4.5).exp();
                    data.push(hu.round() as i16);
                }
            }
        }
        let v = Volume::new([n, n, nz], [1.0; 3], [0.0; 3], VoxelData::I16(data)).unwrap();
        let e = edge([50, 50, 1]);
        let (gx, gy) = axial_gradients(&v, 1).unwrap();
        let t = structure_tensor(&gx, &gy, [50, 50], 3).unwrap();
        let o = principal_orientation(&t);
        let p = extract_oriented(&v, &e, &o);

        // intensity-weighted centroid row per column, then least-squares slope
        let rows: Vec<(f64, f64)> = (0..PATCH_SIZE)
            .map(|col| {
                let (mut wsum, mut rsum) = (0.0, 0.0);
                for r in 0..PATCH_SIZE {
                    let w = (p.pixel(0, r, col) as f64 - window_hu(40.0)).max(0.0);
                    wsum += w;
                    rsum += w * r as f64;
                }
                (col as f64, rsum / wsum)
            })
            .collect();
        let n = rows.len() as f64;
        let mx = rows.iter().map(|r| r.0).sum::<f64>() / n;
        let my = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let sxy: f64 = rows.iter().map(|r| (r.0 - mx) * (r.1 - my)).sum();
        let sxx: f64 = rows.iter().map(|r| (r.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((slope * 63.0).abs() < 1.0, "drift {} px", slope * 63.0);
        assert!((my - PATCH_CENTER as f64).abs() < 1.0);
    }

    fn step_setup() -> (Volume, EdgeMap, Vec<Annotation>) {
        let (nx, ny, nz) = (40, 40, 8);
        let mut d = Vec::new();
        for _ in 0..nz {
            for _ in 0..ny {
                for x in 0..nx {
                    d.push(if x < 20 { 0 } else { 1000 });
                }
            }
        }
        let v = Volume::new([nx, ny, nz], [1.0; 3], [0.0; 3], VoxelData::I16(d)).unwrap();
        let voxels = (0..nz)
            .flat_map(|z| (0..ny).map(move |y| edge([20, y, z])))
            .collect();
        let em = EdgeMap {
            voxels,
            source_dims: [nx, ny, nz],
            threshold_used: 0.0,
        };
        (v, em, vec![annotation([20.0, 5.0, 3.0])])
    }

    #[test]
    fn patchset_counts_and_determinism() {
        let (v, em, ann) = step_setup();
        let cfg = SamplerConfig::default();
        // 320 edge voxels, those within 5 mm of the annotation are positive
        let n_pos_avail = em
            .voxels
            .iter()
            .filter(|e| label_edge_voxel(e, &ann, &v, 5.0) == Label::Fracture)
            .count();
        assert!(n_pos_avail > 10);

        let ps = build_patchset(&v, &em, &ann, Strategy::Original, 100, 0.1, 7, &cfg).unwrap();
        assert_eq!((ps.positives, ps.negatives), (10, 90));
        assert_eq!(ps.positives + ps.negatives, ps.len());

        let again = build_patchset(&v, &em, &ann, Strategy::Original, 100, 0.1, 7, &cfg).unwrap();
        assert_eq!(again.to_bytes(), ps.to_bytes());

        let m = build_patchset(&v, &em, &ann, Strategy::Mirrored, 40, 0.5, 7, &cfg).unwrap();
        assert_eq!(m.positives, 20);
        assert_eq!(m.pos_shortfall, 0);
        let o = build_patchset(&v, &em, &ann, Strategy::Oriented, 30, 0.3, 7, &cfg).unwrap();
        assert_eq!((o.positives, o.negatives), (9, 21));
    }

    #[test]
    fn positive_shortfall_is_reported_not_padded() {
        let (v, mut em, ann) = step_setup();
        // keep exactly 10 positive voxels
        let mut kept_pos = 0;
        em.voxels.retain(|e| {
            if label_edge_voxel(e, &ann, &v, 5.0) == Label::Fracture {
                kept_pos += 1;
                kept_pos <= 10
            } else {
                true
            }
        });
        let cfg = SamplerConfig::default();
        let ps = build_patchset(&v, &em, &ann, Strategy::Mirrored, 200, 0.5, 1, &cfg).unwrap();
        assert_eq!(ps.positives, 20);
        assert_eq!(ps.pos_shortfall, 80);
        assert_eq!(ps.negatives, 100);
    }

    #[test]
    fn patchset_errors() {
        let (v, em, ann) = step_setup();
        let cfg = SamplerConfig::default();
        let empty = EdgeMap {
            voxels: vec![],
            ..em.clone()
        };
        assert!(matches!(
            build_patchset(&v, &empty, &ann, Strategy::Original, 10, 0.3, 0, &cfg),
            Err(PatchError::EmptyEdgeMap)
        ));
        assert!(matches!(
            build_patchset(&v, &em, &[], Strategy::Original, 10, 0.3, 0, &cfg),
            Err(PatchError::NoPositives)
        ));
        assert!(matches!(
            build_patchset(&v, &em, &ann, Strategy::Original, 10, 1.0, 0, &cfg),
            Err(PatchError::InvalidParam(_))
        ));
    }

    #[test]
    fn file_roundtrip_and_layout() {
        let (v, em, ann) = step_setup();
        let ps = build_patchset(
            &v,
            &em,
            &ann,
            Strategy::Oriented,
            12,
            0.5,
            3,
            &SamplerConfig::default(),
        )
        .unwrap();
        let bytes = ps.to_bytes();
        assert_eq!(&bytes[..4], b"P25D");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 12);
        assert_eq!(bytes.len(), 12 + 12 * (1 + 1 + 4 + 12 + 3 * 4096 * 4));
        let back = PatchSet::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.positives, ps.positives);
        assert!(PatchSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
