//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so every line is printed in order.
//! Exits nonzero when a hard criterion fails; the strategy-ordering check only flags.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinecade::convnet::{gradient_check, tiny_check_net, ConvNetModel};
use spinecade::detector::Detection;
use spinecade::edgemap::{sobel_slice, EdgeVoxel, SliceAxis};
use spinecade::evaluation::{froc, roc, MatchMode};
use spinecade::grid::Grid2;
use spinecade::orientation::{fold_line_angle, principal_orientation, EdgeOrientation, Tensor2};
use spinecade::patch::{extract_original, extract_oriented, mirror, MirrorAxis, Strategy};
use spinecade::pipeline::{cmd_run_all, PipelineConfig};
use spinecade::volume::{Annotation, ProcessLabel, Volume, VoxelData};

enum Outcome {
    Pass(String),
    Fail(String),
    /// Soft criterion not met: reported, never fails the run.
    Flag(String),
    NotApplicable(String),
}

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, outcome: Outcome) {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                self.failed += 1;
                ("FAIL", d)
            }
            Outcome::Flag(d) => ("FLAG", d),
            Outcome::NotApplicable(d) => ("N/A ", d),
        };
        println!("{tag} {name}: {detail}");
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn sobel_oracle() -> Outcome {
    const KX: [[i64; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
    const KY: [[i64; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x50B);
    let mut mismatches = 0;
    for _ in 0..50 {
        let img: Vec<i64> = (0..256).map(|_| rng.random_range(i16::MIN..=i16::MAX) as i64).collect();
        let grid = Grid2::from_vec(16, 16, img.iter().map(|&v| v as f64).collect());
        let (gx, gy) = sobel_slice(&grid).expect("16x16 slice");
        for y in 0..16i64 {
            for x in 0..16i64 {
                let (mut sx, mut sy) = (0i64, 0i64);
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let yy = (y + ky - 1).clamp(0, 15);
                        let xx = (x + kx - 1).clamp(0, 15);
                        let v = img[(yy * 16 + xx) as usize];
                        sx += KX[ky as usize][kx as usize] * v;
                        sy += KY[ky as usize][kx as usize] * v;
                    }
                }
                let i = (y * 16 + x) as usize;
                if gx.data[i] != sx as f64 || gy.data[i] != sy as f64 {
                    mismatches += 1;
                }
            }
        }
    }
    let el = t.elapsed();
    verdict(
        mismatches == 0 && el < Duration::from_secs(1),
        format!("50 slices, {mismatches} mismatching pixels, {} (limit 1s)", secs(el)),
    )
}

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let m = ConvNetModel::<f64>::new(tiny_check_net(), [3, 8, 8], seed).expect("tiny net");
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let batch: Vec<f64> = (0..3 * m.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = match gradient_check(&m, &batch, &[0, 1, 1], Some(seed), 1e-5) {
            Ok(e) => e,
            Err(e) => return Outcome::Fail(format!("seed {seed}: {e}")),
        };
        worst = worst.max(e);
    }
    let el = t.elapsed();
    verdict(
        worst < 1e-4 && el < Duration::from_secs(30),
        format!("10 seeds, max relative error {worst:.2e} (limit 1e-4), {} (limit 30s)", secs(el)),
    )
}

fn roc_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA0C + inst);
        let mut samples: Vec<(f64, bool)> = (0..200)
            .map(|_| (rng.random_range(0..25) as f64 / 24.0, rng.random_bool(0.4)))
            .collect();
        samples[0].1 = true;
        samples[1].1 = false;
        let (mut num, mut pairs) = (0.0, 0.0);
        for &(sp, lp) in &samples {
            if !lp {
                continue;
            }
            for &(sn, ln) in &samples {
                if ln {
                    continue;
                }
                pairs += 1.0;
                num += if sp > sn {
                    1.0
                } else if sp == sn {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let auc = match roc(&samples) {
            Ok(r) => r.auc,
            Err(e) => return Outcome::Fail(format!("instance {inst}: {e}")),
        };
        worst = worst.max((auc - num / pairs).abs());
    }
    let el = t.elapsed();
    verdict(
        worst <= 1e-12 && el < Duration::from_secs(5),
        format!("20 x 200 samples with ties, max |AUC - U| = {worst:.1e} (limit 1e-12), {} (limit 5s)", secs(el)),
    )
}

fn froc_fixture() -> Outcome {
    let ann = |pid: &str, p: [f64; 3]| Annotation {
        patient_id: pid.into(),
        position: p,
        process_label: ProcessLabel::SpinousProcess,
    };
    let det = |p: [f64; 3], s: f64| Detection {
        position: p,
        score: s,
        member_voxels: Vec::new(),
        matched_annotation: None,
    };
    let mut anns = BTreeMap::new();
    anns.insert("A".to_string(), vec![ann("A", [0.0, 0.0, 0.0]), ann("A", [30.0, 0.0, 0.0])]);
    anns.insert("B".to_string(), vec![ann("B", [0.0, 0.0, 0.0])]);
    let mut dets = BTreeMap::new();
    dets.insert(
        "A".to_string(),
        vec![det([1.0, 0.0, 0.0], 0.9), det([2.0, 0.0, 0.0], 0.8), det([35.0, 0.0, 0.0], 0.4)],
    );
    dets.insert("B".to_string(), vec![det([50.0, 0.0, 0.0], 0.7), det([0.0, 9.0, 0.0], 0.2)]);
    // (threshold, sensitivity, fp_per_patient), enumerated by hand
    let expected = [
        (0.95, 0.0, 0.0),
        (0.75, 1.0 / 3.0, 0.5),
        (0.5, 1.0 / 3.0, 1.0),
        (0.3, 2.0 / 3.0, 1.0),
        (0.1, 1.0, 1.0),
    ];
    let ts: Vec<f64> = expected.iter().map(|e| e.0).collect();
    let curve = match froc(&dets, &anns, 10.0, &ts, MatchMode::Distance) {
        Ok(c) => c,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let got: Vec<(f64, f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.threshold, p.sensitivity, p.fp_per_patient))
        .collect();
    verdict(
        got == expected,
        format!("2 patients, 5 detections, 3 annotations, 5 thresholds: got {got:?}"),
    )
}

fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1000i16..2000)).collect();
    Volume::new(dims, [0.7, 0.7, 1.3], [0.0; 3], VoxelData::I16(data)).expect("volume")
}

fn mirror_and_identity() -> Outcome {
    let v = random_volume([48, 48, 12], 7);
    let mut bad_mirror = 0;
    let mut bad_identity = 0;
    let theta0 = EdgeOrientation {
        theta: 0.0,
        anisotropy: 1.0,
        eigenvector: [1.0, 0.0],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..25 {
        let e = EdgeVoxel {
            index: [rng.random_range(0..48), rng.random_range(0..48), rng.random_range(0..12)],
            grad_x: 1.0,
            grad_y: 0.0,
            magnitude: 1.0,
            slice_axis: SliceAxis::Axial,
        };
        let p = extract_original(&v, &e);
        for axis in [MirrorAxis::Horizontal, MirrorAxis::Vertical] {
            if mirror(&mirror(&p, axis), axis).planes != p.planes {
                bad_mirror += 1;
            }
        }
        if extract_oriented(&v, &e, &theta0).planes != p.planes {
            bad_identity += 1;
        }
    }
    verdict(
        bad_mirror == 0 && bad_identity == 0,
        format!("25 voxels: {bad_mirror} mirror-involution and {bad_identity} theta=0 identity mismatches"),
    )
}

fn angle_gap(a: f64, b: f64) -> f64 {
    // line angles are equal modulo pi
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

fn eigen_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE16);
    let mut worst_res = 0.0f64;
    for _ in 0..1000 {
        let t = Tensor2 {
            xx: rng.random_range(-10.0..10.0),
            xy: rng.random_range(-10.0..10.0),
            yy: rng.random_range(-10.0..10.0),
        };
        let (l1, _) = t.eigenvalues();
        let v = t.major_eigenvector();
        let tv = t.apply(v);
        let res = ((tv[0] - l1 * v[0]).powi(2) + (tv[1] - l1 * v[1]).powi(2)).sqrt();
        worst_res = worst_res.max(res);
    }
    let mut worst_rot = 0.0f64;
    for _ in 0..1000 {
        let l1 = rng.random_range(1.0..10.0);
        let l2 = l1 * rng.random_range(0.0..0.8);
        let a = rng.random_range(-PI..PI);
        let phi = rng.random_range(-PI..PI);
        let tensor = |ang: f64| {
            let (s, c) = ang.sin_cos();
            Tensor2 {
                xx: l1 * c * c + l2 * s * s,
                xy: (l1 - l2) * c * s,
                yy: l1 * s * s + l2 * c * c,
            }
        };
        let base = principal_orientation(&tensor(a)).theta;
        let rotated = principal_orientation(&tensor(a + phi)).theta;
        worst_rot = worst_rot.max(angle_gap(rotated, fold_line_angle(base + phi)));
    }
    verdict(
        worst_res < 1e-9 && worst_rot < 1e-6,
        format!(
            "1000 symmetric matrices, max residual {worst_res:.1e} (limit 1e-9); max rotation error {worst_rot:.1e} rad (limit 1e-6)"
        ),
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

struct E2e {
    oriented_auc: Vec<f64>,
    oriented_sens5: Vec<f64>,
    original_auc: Vec<f64>,
    elapsed: Duration,
}

fn run_e2e(root: &std::path::Path) -> Result<E2e, String> {
    let t = Instant::now();
    let mut out = E2e {
        oriented_auc: Vec::new(),
        oriented_sens5: Vec::new(),
        original_auc: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for seed in 0..3u64 {
        let cfg = PipelineConfig {
            output_dir: root.join(format!("seed{seed}")),
            seed,
            ..PipelineConfig::default()
        };
        let rows = cmd_run_all(&cfg, &[Strategy::Original, Strategy::Oriented]).map_err(|e| e.to_string())?;
        for r in rows {
            println!(
                "     seed {seed} {}: auc {:.4}, sens@5FP {:.4}, sens@10FP {:.4}, targets {}",
                r.strategy, r.summary.auc, r.summary.sens_at_5fp, r.summary.sens_at_10fp, r.summary.n_targets
            );
            match r.strategy {
                Strategy::Oriented => {
                    out.oriented_auc.push(r.summary.auc);
                    out.oriented_sens5.push(r.summary.sens_at_5fp);
                }
                Strategy::Original => out.original_auc.push(r.summary.auc),
                Strategy::Mirrored => {}
            }
        }
    }
    out.elapsed = t.elapsed();
    Ok(out)
}

fn determinism(root: &std::path::Path) -> Outcome {
    let config = r#"{
        "seed": 11,
        "phantom": {"n_train": 2, "n_test": 1,
                    "spec": {"dims": [112, 112, 24], "n_vertebrae": 1, "fracture_count": 1}},
        "sampling": {"strategy": "oriented", "target_count": 200},
        "net": [
            {"kind": "Conv", "in_channels": 3, "out_channels": 4, "kernel_size": 5, "stride": 2, "padding": 2},
            {"kind": "ReLU"},
            {"kind": "MaxPool", "window": 4, "stride": 4},
            {"kind": "FullyConnected", "in_dim": 256, "out_dim": 2},
            {"kind": "Softmax"}
        ],
        "train": {"learning_rate": 0.01, "momentum": 0.9, "batch_size": 16, "epochs": 2,
                  "weight_decay": 0.0001, "seed": 0}
    }"#;
    let mut summaries = Vec::new();
    for run in 0..2 {
        let dir = root.join(format!("det{run}"));
        let cfg = PipelineConfig::from_json(config, &[], root)
            .map(|c| PipelineConfig { output_dir: dir.clone(), ..c })
            .and_then(|c| cmd_run_all(&c, &[c.sampling.strategy]).map(|_| c));
        if let Err(e) = cfg {
            return Outcome::Fail(format!("run {run}: {e}"));
        }
        match std::fs::read(dir.join("eval").join("summary.json")) {
            Ok(b) => summaries.push(b),
            Err(e) => return Outcome::Fail(format!("run {run}: {e}")),
        }
    }
    verdict(
        summaries[0] == summaries[1],
        format!("two run-all passes, summary.json {} bytes, byte-identical: {}", summaries[0].len(), summaries[0] == summaries[1]),
    )
}

fn main() -> ExitCode {
    let mut report = Report { failed: 0 };
    report.line(
        "published-number reproduction",
        Outcome::NotApplicable("clinical dataset is private; covered by the oracle suite below".into()),
    );
    report.line("sobel oracle", sobel_oracle());
    report.line("gradient check", gradient_oracle());
    report.line("roc oracle", roc_oracle());
    report.line("froc hand instance", froc_fixture());
    report.line("mirror involution and oriented identity", mirror_and_identity());
    report.line("eigen residual and rotation equivariance", eigen_checks());

    let tmp = tempfile::tempdir().expect("tempdir");
    report.line("determinism", determinism(tmp.path()));

    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match run_e2e(tmp.path()) {
        Ok(e) => {
            let auc = median(e.oriented_auc.clone());
            let sens = median(e.oriented_sens5.clone());
            let minutes = e.elapsed.as_secs_f64() / 60.0;
            report.line(
                "end-to-end phantom run",
                verdict(
                    auc >= 0.90 && sens >= 0.75 && minutes <= 20.0,
                    format!(
                        "oriented median AUC {auc:.4} (>= 0.90), median sens@5FP {sens:.4} (>= 0.75), \
                         runtime {minutes:.1} min on {cores} core(s) (<= 20 min, both strategies, 3 seeds)"
                    ),
                ),
            );
            let orig = median(e.original_auc.clone());
            let detail = format!("median AUC oriented {auc:.4} vs original {orig:.4}, required margin 0.02");
            report.line(
                "strategy ordering (soft)",
                if auc >= orig + 0.02 { Outcome::Pass(detail) } else { Outcome::Flag(detail) },
            );
        }
        Err(e) => {
            report.line("end-to-end phantom run", Outcome::Fail(e.clone()));
            report.line("strategy ordering (soft)", Outcome::Flag(format!("no run: {e}")));
        }
    }

    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criterion(s) failed", report.failed);
        ExitCode::FAILURE
    }
}
