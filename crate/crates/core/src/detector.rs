//! Probability maps along edge maps and connected-component detections.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::convnet::{ConvNetModel, NetError};
use crate::edgemap::EdgeMap;
use crate::patch::{inference_patch, GradientCache, SamplerConfig, Strategy, PLANE_LEN};
use crate::volume::{Annotation, Volume};

pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("edge map is empty")]
    EmptyEdgeMap,
    #[error("edge map dims {edges:?} do not match volume dims {volume:?}")]
    DimMismatch { edges: [usize; 3], volume: [usize; 3] },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    /// One entry per edge voxel, in edge-map order.
    pub entries: Vec<([usize; 3], f64)>,
    pub source_dims: [usize; 3],
}

impl ProbabilityMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,z,prob\n");
        for ([x, y, z], p) in &self.entries {
            let _ = writeln!(s, "{x},{y},{z},{p:?}");
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DetectError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str, source_dims: [usize; 3]) -> Result<Self, DetectError> {
        let bad = |m: String| DetectError::InvalidParam(format!("probability CSV: {m}"));
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", rec.len())));
            }
            let mut index = [0usize; 3];
            for k in 0..3 {
                index[k] = rec[k].parse().map_err(|_| bad(format!("bad index {:?}", &rec[k])))?;
                if index[k] >= source_dims[k] {
                    return Err(bad(format!("index {index:?} out of bounds")));
                }
            }
            let p: f64 = rec[3].parse().map_err(|_| bad(format!("bad probability {:?}", &rec[3])))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(bad(format!("probability {p} outside [0, 1]")));
            }
            entries.push((index, p));
        }
        Ok(Self { entries, source_dims })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Probability-weighted centroid in mm.
    pub position: [f64; 3],
    pub score: f64,
    /// Sorted by (z, y, x).
    pub member_voxels: Vec<[usize; 3]>,
    pub matched_annotation: Option<Annotation>,
}

/// Fracture-class probability for every edge voxel. Each voxel is scored on its own,
/// so the result does not depend on `batch_size`.
pub fn predict_map(
    model: &ConvNetModel<f32>,
    v: &Volume,
    edges: &EdgeMap,
    strategy: Strategy,
    cfg: &SamplerConfig,
    batch_size: usize,
) -> Result<ProbabilityMap, DetectError> {
    if edges.is_empty() {
        return Err(DetectError::EmptyEdgeMap);
    }
    if edges.source_dims != v.dims() {
        return Err(DetectError::DimMismatch {
            edges: edges.source_dims,
            volume: v.dims(),
        });
    }
    if batch_size == 0 {
        return Err(DetectError::InvalidParam("batch_size must be >= 1".into()));
    }
    if model.input_len() != 3 * PLANE_LEN {
        return Err(NetError::ShapeMismatch(format!(
            "model expects {} inputs, patches have {}",
            model.input_len(),
            3 * PLANE_LEN
        ))
        .into());
    }
    let grads = (strategy == Strategy::Oriented).then(|| GradientCache::new(v, &edges.voxels));
    let mut entries = Vec::with_capacity(edges.len());
    for chunk in edges.voxels.chunks(batch_size) {
        let inputs: Vec<f32> = chunk
            .par_iter()
            .flat_map_iter(|e| {
                let p = inference_patch(v, e, strategy, grads.as_ref(), cfg);
                p.planes.into_iter().flatten()
            })
            .collect();
        let out = model.forward_with_pass(&inputs, chunk.len(), None);
        entries.extend(chunk.iter().zip(out).map(|(e, o)| (e.index, o[1] as f64)));
    }
    Ok(ProbabilityMap {
        entries,
        source_dims: edges.source_dims,
    })
}

/// Group voxels with probability >= `prob_threshold` into 26-connected components.
///
/// Sorted by descending score, ties by centroid (z, y, x).
pub fn cluster_detections(p: &ProbabilityMap, v: &Volume, prob_threshold: f64) -> Vec<Detection> {
    let above: HashMap<[usize; 3], f64> = p
        .entries
        .iter()
        .filter(|(_, prob)| *prob >= prob_threshold)
        .map(|&(i, prob)| (i, prob))
        .collect();
    let mut seeds: Vec<[usize; 3]> = above.keys().copied().collect();
    seeds.sort_unstable_by_key(|i| [i[2], i[1], i[0]]);

    let mut seen: HashSet<[usize; 3]> = HashSet::with_capacity(above.len());
    let mut out = Vec::new();
    for s in seeds {
        if !seen.insert(s) {
            continue;
        }
        let mut stack = vec![s];
        let mut members = Vec::new();
        while let Some(c) = stack.pop() {
            members.push(c);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let n = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        if n.iter().any(|&k| k < 0) {
                            continue;
                        }
                        let n = [n[0] as usize, n[1] as usize, n[2] as usize];
                        if above.contains_key(&n) && seen.insert(n) {
                            stack.push(n);
                        }
                    }
                }
            }
        }
        members.sort_unstable_by_key(|i| [i[2], i[1], i[0]]);
        let mut wsum = 0.0;
        let mut acc = [0.0; 3];
        let mut score = f64::NEG_INFINITY;
        for m in &members {
            let w = above[m];
            let pos = v.world(*m);
            for k in 0..3 {
                acc[k] += w * pos[k];
            }
            wsum += w;
            score = score.max(w);
        }
        out.push(Detection {
            position: acc.map(|a| a / wsum),
            score,
            member_voxels: members,
            matched_annotation: None,
        });
    }
    out.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| {
            let (pa, pb) = (a.position, b.position);
            pa[2].total_cmp(&pb[2])
                .then(pa[1].total_cmp(&pb[1]))
                .then(pa[0].total_cmp(&pb[0]))
        })
    });
    out
}

/// CSV `x_mm,y_mm,z_mm,score,n_voxels,matched`; `matched` is the annotation's
/// process label or empty.
pub fn detections_csv(dets: &[Detection]) -> String {
    let mut s = String::from("x_mm,y_mm,z_mm,score,n_voxels,matched\n");
    for d in dets {
        let m = d
            .matched_annotation
            .as_ref()
            .map(|a| a.process_label.as_str())
            .unwrap_or("");
        let _ = writeln!(
            s,
            "{:?},{:?},{:?},{:?},{},{}",
            d.position[0],
            d.position[1],
            d.position[2],
            d.score,
            d.member_voxels.len(),
            m
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::{desk64, ConvNetModel};
    use crate::edgemap::{EdgeVoxel, SliceAxis};
    use crate::volume::VoxelData;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn vol(n: usize) -> Volume {
        Volume::new([n; 3], [1.0, 1.0, 2.0], [0.0; 3], VoxelData::I16(vec![0; n * n * n])).unwrap()
    }

    fn pmap(entries: Vec<([usize; 3], f64)>) -> ProbabilityMap {
        ProbabilityMap {
            entries,
            source_dims: [20; 3],
        }
    }

    #[test]
    fn connectivity_examples() {
        let v = vol(20);
        let adj = pmap(vec![([3, 3, 3], 0.9), ([4, 4, 4], 0.6), ([9, 9, 9], 0.1)]);
        let d = cluster_detections(&adj, &v, 0.5);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].member_voxels.len(), 2);
        assert_eq!(d[0].score, 0.9);
        let cz = (0.9 * 6.0 + 0.6 * 8.0) / 1.5;
        assert!((d[0].position[2] - cz).abs() < 1e-12);

        let apart = pmap(vec![([3, 3, 3], 0.9), ([13, 3, 3], 0.8)]);
        let d = cluster_detections(&apart, &v, 0.5);
        assert_eq!(d.len(), 2);
        assert!(d[0].score > d[1].score);

        assert!(cluster_detections(&adj, &v, 0.95).is_empty());
    }

    proptest! {
        #[test]
        fn clustering_ignores_entry_order_and_shrinks_with_threshold(
            pts in prop::collection::vec((0usize..8, 0usize..8, 0usize..8, 0.0f64..1.0), 1..60),
            t in 0.05f64..0.9,
            rot in 0usize..60,
        ) {
            let v = vol(20);
            let mut uniq: HashMap<[usize; 3], f64> = HashMap::new();
            for (x, y, z, p) in pts {
                uniq.insert([x, y, z], p);
            }
            let mut entries: Vec<_> = uniq.into_iter().collect();
            entries.sort_by_key(|e| e.0);
            let a = cluster_detections(&pmap(entries.clone()), &v, t);
            let r = rot % entries.len();
            entries.rotate_left(r);
            entries.reverse();
            let b = cluster_detections(&pmap(entries.clone()), &v, t);
            prop_assert_eq!(&a, &b);

            let hi = cluster_detections(&pmap(entries), &v, (t + 0.1).min(0.99));
            for d in &hi {
                let parent = a.iter().find(|c| c.member_voxels.contains(&d.member_voxels[0])).unwrap();
                prop_assert!(d.member_voxels.len() <= parent.member_voxels.len());
            }
        }
    }

    fn edges_in(v: &Volume, n: usize) -> EdgeMap {
        let voxels = (0..n)
            .map(|i| EdgeVoxel {
                index: [5 + i % 10, 5 + i / 10, 4],
                grad_x: 1.0,
                grad_y: 0.5,
                magnitude: 1.0,
                slice_axis: SliceAxis::Axial,
            })
            .collect();
        EdgeMap {
            voxels,
            source_dims: v.dims(),
            threshold_used: 0.0,
        }
    }

    fn textured(n: usize) -> Volume {
        let data = (0..n * n * n).map(|i| ((i * 37) % 1500) as i16 - 200).collect();
        Volume::new([n; 3], [1.0; 3], [0.0; 3], VoxelData::I16(data)).unwrap()
    }

    #[test]
    fn zeroed_final_layer_gives_one_half() {
        let v = textured(20);
        let e = edges_in(&v, 5);
        let mut m = ConvNetModel::<f32>::new(desk64(), [3, 64, 64], 1).unwrap();
        let last = m.params().len() - 2;
        let p = &mut m.params_mut()[last];
        p.weights.iter_mut().for_each(|w| *w = 0.0);
        p.bias.iter_mut().for_each(|b| *b = 0.0);
        let pm = predict_map(&m, &v, &e, Strategy::Original, &SamplerConfig::default(), 64).unwrap();
        assert!(pm.entries.iter().all(|&(_, p)| p == 0.5));
    }

    #[test]
    fn batching_does_not_change_the_map() {
        let v = textured(20);
        let e = edges_in(&v, 70);
        let m = ConvNetModel::<f32>::new(desk64(), [3, 64, 64], 3).unwrap();
        let cfg = SamplerConfig::default();
        for s in Strategy::ALL {
            let one = predict_map(&m, &v, &e, s, &cfg, 1).unwrap();
            let many = predict_map(&m, &v, &e, s, &cfg, 64).unwrap();
            assert_eq!(one, many);
            let idx: Vec<_> = one.entries.iter().map(|e| e.0).collect();
            let src: Vec<_> = e.voxels.iter().map(|e| e.index).collect();
            assert_eq!(idx, src);
            assert!(one.entries.iter().all(|&(_, p)| (0.0..=1.0).contains(&p)));
        }
        // inference never mirrors: mirrored and original score identically
        assert_eq!(
            predict_map(&m, &v, &e, Strategy::Mirrored, &cfg, 8).unwrap(),
            predict_map(&m, &v, &e, Strategy::Original, &cfg, 8).unwrap()
        );
    }

    #[test]
    fn empty_edge_map_rejected() {
        let v = textured(20);
        let e = edges_in(&v, 0);
        let m = ConvNetModel::<f32>::new(desk64(), [3, 64, 64], 3).unwrap();
        assert!(matches!(
            predict_map(&m, &v, &e, Strategy::Original, &SamplerConfig::default(), 4),
            Err(DetectError::EmptyEdgeMap)
        ));
    }
}
