//! Synthetic spine-like volumes with implanted fracture gaps.
//!
//! Each vertebra is an elliptical cylinder (cortical shell around a cancellous
//! interior) with three box-shaped, fully cortical posterior protrusions: left,
//! right and spinous.
//! A fracture is a slab of soft tissue cut across one protrusion.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convnet::derive_seed;
use crate::volume::{Annotation, ProcessLabel, Volume, VoxelData};

pub const CORTICAL_HU: i16 = 1200;
pub const CANCELLOUS_HU: i16 = 300;
pub const SOFT_TISSUE_HU: i16 = 40;

const SHELL_MM: f64 = 1.5;
const BODY_SEMI_AXES_MM: [f64; 2] = [14.0, 10.0];
const PROCESS_WIDTH_MM: f64 = 4.0;
const SPINOUS_LENGTH_MM: f64 = 22.0;
const LATERAL_LENGTH_MM: f64 = 16.0;
const PROCESS_THICKNESS_MM: f64 = 8.0;
const MASK_MARGIN_MM: f64 = 1.5;
const BORDER_MM: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("phantom does not fit: {0}")]
    SpecTooSmall(String),
    #[error("invalid phantom spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub n_vertebrae: usize,
    pub fracture_count: usize,
    pub gap_width_mm: f64,
    pub noise_sigma_hu: f64,
    pub seed: u64,
    /// Written into every annotation.
    pub patient_id: String,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [128, 128, 96],
            spacing: [0.5, 0.5, 1.0],
            n_vertebrae: 4,
            fracture_count: 3,
            gap_width_mm: 2.0,
            noise_sigma_hu: 20.0,
            seed: 0,
            patient_id: "phantom".into(),
        }
    }
}

/// One posterior protrusion: a box from `root` along unit `dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct Process {
    pub vertebra: usize,
    pub label: ProcessLabel,
    /// In-plane root point (mm), inside the vertebral body.
    pub root: [f64; 2],
    pub dir: [f64; 2],
    pub length_mm: f64,
    pub width_mm: f64,
    /// World z range (mm), inclusive.
    pub z_range: [f64; 2],
    /// Distance of the fracture gap center from `root` along `dir`.
    pub gap_at_mm: Option<f64>,
}

impl Process {
    /// (along, lateral) coordinates of in-plane point `p`.
    pub fn local(&self, p: [f64; 2]) -> (f64, f64) {
        let d = [p[0] - self.root[0], p[1] - self.root[1]];
        (
            d[0] * self.dir[0] + d[1] * self.dir[1],
            -d[0] * self.dir[1] + d[1] * self.dir[0],
        )
    }

    pub fn point_at(&self, along: f64) -> [f64; 2] {
        [self.root[0] + along * self.dir[0], self.root[1] + along * self.dir[1]]
    }

    fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let (a, l) = self.local([p[0], p[1]]);
        (-margin..=self.length_mm + margin).contains(&a)
            && l.abs() <= self.width_mm / 2.0 + margin
            && (self.z_range[0] - margin..=self.z_range[1] + margin).contains(&p[2])
    }

    fn mid_z(&self) -> f64 {
        (self.z_range[0] + self.z_range[1]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertebra {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub z_range: [f64; 2],
}

impl Vertebra {
    fn contains(&self, p: [f64; 3]) -> bool {
        let u = (p[0] - self.center[0]) / self.semi_axes[0];
        let v = (p[1] - self.center[1]) / self.semi_axes[1];
        u * u + v * v <= 1.0 && (self.z_range[0]..=self.z_range[1]).contains(&p[2])
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume,
    pub mask: Volume,
    pub annotations: Vec<Annotation>,
    pub vertebrae: Vec<Vertebra>,
    pub processes: Vec<Process>,
    pub gap_width_mm: f64,
}

fn layout(spec: &PhantomSpec) -> Result<(Vec<Vertebra>, Vec<Process>), PhantomError> {
    let extent: Vec<f64> = (0..3).map(|k| spec.dims[k] as f64 * spec.spacing[k]).collect();
    let height = extent[2] / spec.n_vertebrae as f64;
    if height < PROCESS_THICKNESS_MM + 2.0 {
        return Err(PhantomError::SpecTooSmall(format!(
            "{:.1} mm per vertebra along z, need {:.1}",
            height,
            PROCESS_THICKNESS_MM + 2.0
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x90]));
    let mut vertebrae = Vec::new();
    let mut processes = Vec::new();
    for k in 0..spec.n_vertebrae {
        let z0 = k as f64 * height;
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0.92..1.08);
        let semi_axes = [BODY_SEMI_AXES_MM[0] * jitter(&mut rng), BODY_SEMI_AXES_MM[1] * jitter(&mut rng)];
        let center = [extent[0] / 2.0, extent[1] * 0.35];
        let v = Vertebra {
            center,
            semi_axes,
            z_range: [z0 + 0.1 * height, z0 + 0.9 * height],
        };
        let zm = z0 + height / 2.0;
        let z_range = [zm - PROCESS_THICKNESS_MM / 2.0, zm + PROCESS_THICKNESS_MM / 2.0];
        // ellipse parameter angle of the root and direction angle, degrees from +x
        let slots: [(ProcessLabel, f64, f64, f64, f64); 3] = [
            (ProcessLabel::LeftProcess, 130.0, 150.0, 12.0, LATERAL_LENGTH_MM),
            (ProcessLabel::RightProcess, 50.0, 30.0, 12.0, LATERAL_LENGTH_MM),
            (ProcessLabel::SpinousProcess, 90.0, 90.0, 15.0, SPINOUS_LENGTH_MM),
        ];
        for (label, at, dir, spread, length) in slots {
            let phi = dir + rng.random_range(-spread..spread);
            let dir = [phi.to_radians().cos(), phi.to_radians().sin()];
            let t = at.to_radians();
            let edge = [
                center[0] + semi_axes[0] * t.cos(),
                center[1] + semi_axes[1] * t.sin(),
            ];
            // start 2 mm inside the body so the union is connected
            let root = [edge[0] - 2.0 * dir[0], edge[1] - 2.0 * dir[1]];
            processes.push(Process {
                vertebra: k,
                label,
                root,
                dir,
                length_mm: length + 2.0,
                width_mm: PROCESS_WIDTH_MM,
                z_range,
                gap_at_mm: None,
            });
        }
        vertebrae.push(v);
    }
    for p in &processes {
        let half = p.width_mm / 2.0;
        let n = [-p.dir[1], p.dir[0]];
        for along in [0.0, p.length_mm] {
            for side in [-half, half] {
                let c = p.point_at(along);
                let q = [c[0] + side * n[0], c[1] + side * n[1]];
                for k in 0..2 {
                    if q[k] < BORDER_MM || q[k] > extent[k] - BORDER_MM {
                        return Err(PhantomError::SpecTooSmall(format!(
                            "{} of vertebra {} reaches {:.1} mm on axis {k}, extent {:.1} mm",
                            p.label, p.vertebra, q[k], extent[k]
                        )));
                    }
                }
            }
        }
    }
    Ok((vertebrae, processes))
}

/// In-plane disk offsets (voxels) within `r_mm`.
fn disk(spacing: [f64; 3], r_mm: f64) -> Vec<(i64, i64)> {
    let rx = (r_mm / spacing[0]).floor() as i64;
    let ry = (r_mm / spacing[1]).floor() as i64;
    let mut out = Vec::new();
    for dy in -ry..=ry {
        for dx in -rx..=rx {
            let (mx, my) = (dx as f64 * spacing[0], dy as f64 * spacing[1]);
            if mx * mx + my * my <= r_mm * r_mm + 1e-9 {
                out.push((dx, dy));
            }
        }
    }
    out
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    if spec.dims.iter().any(|&d| d < 3) || spec.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(PhantomError::Invalid("dims must be >= 3 and spacing > 0".into()));
    }
    if spec.n_vertebrae == 0 {
        return Err(PhantomError::Invalid("n_vertebrae must be >= 1".into()));
    }
    if spec.fracture_count > 3 * spec.n_vertebrae {
        return Err(PhantomError::Invalid(format!(
            "fracture_count {} exceeds 3 x {} processes",
            spec.fracture_count, spec.n_vertebrae
        )));
    }
    if !(spec.gap_width_mm > 0.0) || !(spec.noise_sigma_hu >= 0.0) {
        return Err(PhantomError::Invalid("gap_width_mm must be > 0 and noise_sigma_hu >= 0".into()));
    }
    let (vertebrae, mut processes) = layout(spec)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x91]));
    let mut fractured = sample(&mut rng, processes.len(), spec.fracture_count).into_vec();
    fractured.sort_unstable();
    for &i in &fractured {
        let p = &mut processes[i];
        // measured from the body edge, which sits 2 mm past the root
        let visible = p.length_mm - 2.0;
        p.gap_at_mm = Some(2.0 + visible * rng.random_range(0.45..0.75));
    }

    let [nx, ny, nz] = spec.dims;
    let sp = spec.spacing;
    let world = |x: usize, y: usize, z: usize| [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]];
    let solid_at = |p: [f64; 3]| vertebrae.iter().any(|v| v.contains(p)) || processes.iter().any(|q| q.contains(p, 0.0));
    let shell = disk(sp, SHELL_MM);

    let slices: Vec<(Vec<i16>, Vec<u8>)> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let solid: Vec<bool> = (0..nx * ny).map(|i| solid_at(world(i % nx, i / nx, z))).collect();
            let is_solid = |x: i64, y: i64| {
                x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny && solid[y as usize * nx + x as usize]
            };
            let mut img = vec![SOFT_TISSUE_HU; nx * ny];
            let mut mask = vec![0u8; nx * ny];
            for y in 0..ny {
                for x in 0..nx {
                    let i = y * nx + x;
                    let p = world(x, y, z);
                    let in_body = vertebrae.iter().any(|v| v.contains(p));
                    if solid[i] {
                        // processes are thin enough to be all cortical
                        let interior =
                            in_body && shell.iter().all(|&(dx, dy)| is_solid(x as i64 + dx, y as i64 + dy));
                        img[i] = if interior { CANCELLOUS_HU } else { CORTICAL_HU };
                    }
                    for q in &processes {
                        if let Some(g) = q.gap_at_mm {
                            let (a, l) = q.local([p[0], p[1]]);
                            let others = processes.iter().any(|o| !std::ptr::eq(o, q) && o.contains(p, 0.0));
                            if q.contains(p, 0.0)
                                && (a - g).abs() <= spec.gap_width_mm / 2.0
                                && l.abs() <= q.width_mm / 2.0
                                && !in_body
                                && !others
                            {
                                img[i] = SOFT_TISSUE_HU;
                            }
                        }
                    }
                    if processes.iter().any(|q| q.contains(p, MASK_MARGIN_MM)) {
                        mask[i] = 1;
                    }
                }
            }
            if spec.noise_sigma_hu > 0.0 {
                let normal = Normal::new(0.0, spec.noise_sigma_hu).expect("sigma > 0");
                let mut r = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x92, z as u64]));
                for v in &mut img {
                    let n: f64 = normal.sample(&mut r);
                    *v = (*v as f64 + n).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                }
            }
            (img, mask)
        })
        .collect();

    let mut img = Vec::with_capacity(nx * ny * nz);
    let mut mask = Vec::with_capacity(nx * ny * nz);
    for (i, m) in slices {
        img.extend(i);
        mask.extend(m);
    }
    let image = Volume::new(spec.dims, sp, [0.0; 3], VoxelData::I16(img)).expect("valid grid");
    let mask = Volume::new(spec.dims, sp, [0.0; 3], VoxelData::U8(mask)).expect("valid grid");

    let annotations = processes
        .iter()
        .filter_map(|p| {
            p.gap_at_mm.map(|g| {
                let c = p.point_at(g);
                Annotation {
                    patient_id: spec.patient_id.clone(),
                    position: [c[0], c[1], p.mid_z()],
                    process_label: p.label,
                }
            })
        })
        .collect();
    Ok(Phantom {
        image,
        mask,
        annotations,
        vertebrae,
        processes,
        gap_width_mm: spec.gap_width_mm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edgemap::{extract_edges, DEFAULT_THRESHOLD_PERCENTILE};
    use std::collections::VecDeque;

    fn small(fractures: usize, noise: f64, seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: [128, 128, 24],
            spacing: [0.5, 0.5, 1.0],
            n_vertebrae: 1,
            fracture_count: fractures,
            noise_sigma_hu: noise,
            seed,
            ..Default::default()
        }
    }

    fn components(v: &Volume, keep: impl Fn(f64) -> bool) -> Vec<Vec<[usize; 3]>> {
        let [nx, ny, nz] = v.dims();
        let mut seen = vec![false; nx * ny * nz];
        let mut out = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = v.linear_index(x, y, z);
                    if seen[i] || !keep(v.get(x, y, z)) {
                        continue;
                    }
                    seen[i] = true;
                    let mut comp = vec![];
                    let mut q = VecDeque::from([[x, y, z]]);
                    while let Some(c) = q.pop_front() {
                        comp.push(c);
                        for dz in -1i64..=1 {
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let n = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                                    if !v.contains_index(n[0], n[1], n[2]) {
                                        continue;
                                    }
                                    let n = n.map(|k| k as usize);
                                    let j = v.linear_index(n[0], n[1], n[2]);
                                    if !seen[j] && keep(v.get(n[0], n[1], n[2])) {
                                        seen[j] = true;
                                        q.push_back(n);
                                    }
                                }
                            }
                        }
                    }
                    out.push(comp);
                }
            }
        }
        out
    }

    #[test]
    fn unfractured_shell_is_connected() {
        let spec = PhantomSpec {
            fracture_count: 0,
            noise_sigma_hu: 0.0,
            n_vertebrae: 2,
            dims: [128, 128, 48],
            ..Default::default()
        };
        let ph = generate(&spec).unwrap();
        assert!(ph.annotations.is_empty());
        let comps = components(&ph.image, |v| v == CORTICAL_HU as f64);
        assert_eq!(comps.len(), 2);
        let comp_of = |idx: [usize; 3]| comps.iter().position(|c| c.contains(&idx));
        for p in &ph.processes {
            let c = p.point_at(p.length_mm - 0.5);
            let tip = ph.image.voxel_of([c[0], c[1], p.mid_z()]).unwrap();
            let v = &ph.vertebrae[p.vertebra];
            let side = [v.center[0] + v.semi_axes[0] - 0.25, v.center[1], p.mid_z()];
            let body = ph.image.voxel_of(side).unwrap();
            assert!(comp_of(tip).is_some());
            assert_eq!(comp_of(tip), comp_of(body), "{:?}", p.label);
        }
    }

    #[test]
    fn gap_is_the_only_dip_along_the_centerline() {
        for seed in 0..3 {
            let ph = generate(&small(1, 0.0, seed)).unwrap();
            assert_eq!(ph.annotations.len(), 1);
            let p = ph.processes.iter().find(|p| p.gap_at_mm.is_some()).unwrap();
            assert_eq!(p.label, ph.annotations[0].process_label);
            let g = p.gap_at_mm.unwrap();
            let mut dips = 0;
            let mut along = 0.0;
            while along <= p.length_mm - 0.5 {
                let c = p.point_at(along);
                let idx = ph.image.voxel_of([c[0], c[1], p.mid_z()]).unwrap();
                let w = ph.image.world(idx);
                let (a, _) = p.local([w[0], w[1]]);
                let low = ph.image.get(idx[0], idx[1], idx[2]) < 200.0;
                assert_eq!(low, (a - g).abs() <= ph.gap_width_mm / 2.0, "seed {seed} at {along}");
                dips += low as usize;
                along += 0.1;
            }
            assert!(dips > 0);
        }
    }

    #[test]
    fn deterministic_and_material_values() {
        let a = generate(&small(2, 15.0, 4)).unwrap();
        let b = generate(&small(2, 15.0, 4)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.annotations, b.annotations);

        let clean = generate(&small(2, 0.0, 4)).unwrap();
        let vals = clean.image.as_i16().unwrap();
        assert!(vals
            .iter()
            .all(|v| [CORTICAL_HU, CANCELLOUS_HU, SOFT_TISSUE_HU].contains(v)));
        for a in &clean.annotations {
            let i = clean.mask.voxel_of(a.position).unwrap();
            assert_eq!(clean.mask.get(i[0], i[1], i[2]), 1.0);
        }
    }

    #[test]
    fn edges_reach_every_annotation() {
        let spec = PhantomSpec {
            noise_sigma_hu: 0.0,
            fracture_count: 6,
            n_vertebrae: 2,
            dims: [128, 128, 48],
            ..Default::default()
        };
        let ph = generate(&spec).unwrap();
        let em = extract_edges(&ph.image, &ph.mask, DEFAULT_THRESHOLD_PERCENTILE).unwrap();
        for a in &ph.annotations {
            let near = em.voxels.iter().any(|e| {
                let w = ph.image.world(e.index);
                (0..3).map(|k| (w[k] - a.position[k]).powi(2)).sum::<f64>().sqrt() <= 2.0
            });
            assert!(near, "{a:?}");
        }
    }

    #[test]
    fn too_small_and_invalid_specs() {
        let tiny = PhantomSpec {
            dims: [40, 40, 40],
            ..Default::default()
        };
        assert!(matches!(generate(&tiny), Err(PhantomError::SpecTooSmall(_))));
        let flat = PhantomSpec {
            dims: [128, 128, 20],
            ..Default::default()
        };
        assert!(matches!(generate(&flat), Err(PhantomError::SpecTooSmall(_))));
        let many = PhantomSpec {
            fracture_count: 13,
            ..Default::default()
        };
        assert!(matches!(generate(&many), Err(PhantomError::Invalid(_))));
    }
}
