use std::ffi::{CStr, CString};
use std::ptr;

use spinecade::convnet::{save_model, ConvNetModel, LayerSpec};
use spinecade::edgemap::extract_edges;
use spinecade::phantom::{generate, PhantomSpec};
use spinecade::volume::{save_volume, Volume, VoxelData};
use spinecade_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(spc_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

/// Phantom image plus a mask limited to one slice, so prediction stays cheap.
fn fixture(dir: &std::path::Path) -> (Volume, Volume) {
    let spec = PhantomSpec { noise_sigma_hu: 0.0, fracture_count: 1, ..PhantomSpec::default() };
    let ph = generate(&spec).unwrap();
    let [nx, ny, _] = ph.mask.dims();
    let zr = ph.processes[0].z_range;
    let z = ((zr[0] + zr[1]) / 2.0 / spec.spacing[2]) as usize;
    let mut m = ph.mask.as_u8().unwrap().to_vec();
    for (i, v) in m.iter_mut().enumerate() {
        if i / (nx * ny) != z {
            *v = 0;
        }
    }
    let mask = Volume::new(ph.mask.dims(), ph.mask.spacing(), ph.mask.origin(), VoxelData::U8(m)).unwrap();
    save_volume(&ph.image, &dir.join("image.mhd")).unwrap();
    save_volume(&mask, &dir.join("mask.mhd")).unwrap();
    (ph.image, mask)
}

#[test]
fn version_and_null_handling() {
    let v = unsafe { CStr::from_ptr(spc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { spc_volume_load(ptr::null(), &mut out) }, SpcStatus::NullPointer);
    assert!(last_error().contains("path"));
    assert!(out.is_null());
    assert_eq!(unsafe { spc_edges_len(ptr::null()) }, 0);
    unsafe { spc_volume_free(ptr::null_mut()) };
}

#[test]
fn missing_file_reports_io() {
    let mut out = ptr::null_mut();
    let p = CString::new("/nonexistent/volume.mhd").unwrap();
    assert_eq!(unsafe { spc_volume_load(p.as_ptr(), &mut out) }, SpcStatus::Io);
    assert!(last_error().contains("/nonexistent/volume.mhd"));
}

#[test]
fn volume_edges_and_prediction_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (image, mask) = fixture(dir.path());
    let expected = extract_edges(&image, &mask, 75.0).unwrap();

    let layers = vec![LayerSpec::fc(3 * 64 * 64, 2), LayerSpec::Softmax];
    let model = ConvNetModel::<f32>::new(layers, [3, 64, 64], 5).unwrap();
    save_model(&model, &dir.path().join("m.cnet")).unwrap();

    unsafe {
        let (mut img, mut msk) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(spc_volume_load(cstr(&dir.path().join("image.mhd")).as_ptr(), &mut img), SpcStatus::Ok);
        assert_eq!(spc_volume_load(cstr(&dir.path().join("mask.mhd")).as_ptr(), &mut msk), SpcStatus::Ok);
        let (mut dims, mut spacing) = ([0usize; 3], [0f64; 3]);
        assert_eq!(spc_volume_geometry(img, dims.as_mut_ptr(), spacing.as_mut_ptr()), SpcStatus::Ok);
        assert_eq!(dims, image.dims());
        assert_eq!(spacing, image.spacing());

        let mut edges = ptr::null_mut();
        assert_eq!(spc_edges_extract(img, msk, 75.0, &mut edges), SpcStatus::Ok);
        let n = spc_edges_len(edges);
        assert_eq!(n, expected.len());
        assert!(n > 0);
        let mut idx = [0usize; 3];
        assert_eq!(spc_edges_get(edges, 0, idx.as_mut_ptr()), SpcStatus::Ok);
        assert_eq!(idx, expected.voxels[0].index);
        assert_eq!(spc_edges_get(edges, n, idx.as_mut_ptr()), SpcStatus::InvalidArgument);

        let mut bad = ptr::null_mut();
        assert_eq!(spc_edges_extract(img, msk, 150.0, &mut bad), SpcStatus::InvalidArgument);
        assert!(last_error().contains("150"));

        let mut m = ptr::null_mut();
        assert_eq!(spc_model_load(cstr(&dir.path().join("m.cnet")).as_ptr(), &mut m), SpcStatus::Ok);
        let mut probs = ptr::null_mut();
        assert_eq!(spc_predict(m, img, edges, SpcStrategy::Oriented, &mut probs), SpcStatus::Ok);
        assert_eq!(spc_probability_map_len(probs), n);
        for i in 0..n {
            let mut p = -1.0;
            assert_eq!(spc_probability_map_get(probs, i, idx.as_mut_ptr(), &mut p), SpcStatus::Ok);
            assert_eq!(idx, expected.voxels[i].index);
            assert!((0.0..=1.0).contains(&p));
        }

        spc_probability_map_free(probs);
        spc_model_free(m);
        spc_edges_free(edges);
        spc_volume_free(msk);
        spc_volume_free(img);
    }
}

#[test]
fn roc_auc_through_c_abi() {
    let scores = [0.9, 0.8, 0.8, 0.1];
    let labels = [1u8, 1, 0, 0];
    let mut auc = 0.0;
    assert_eq!(unsafe { spc_roc_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut auc) }, SpcStatus::Ok);
    assert_eq!(auc, 0.875);
    let one = [1u8; 4];
    assert_eq!(unsafe { spc_roc_auc(scores.as_ptr(), one.as_ptr(), 4, &mut auc) }, SpcStatus::InvalidArgument);
}

#[test]
fn run_all_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"sampling": {"strategy": "diagonal"}}"#).unwrap();
    let mut auc = 0.0;
    let st = unsafe { spc_run_all(cstr(&cfg).as_ptr(), ptr::null(), 0, &mut auc) };
    assert_eq!(st, SpcStatus::ConfigInvalid);
    let bad = CString::new("no-equals-sign").unwrap();
    let list = [bad.as_ptr()];
    let st = unsafe { spc_run_all(cstr(&cfg).as_ptr(), list.as_ptr(), 1, &mut auc) };
    assert_eq!(st, SpcStatus::ConfigInvalid);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/spinecade.h")).unwrap();
    for name in [
        "spc_version",
        "spc_last_error",
        "spc_volume_load",
        "spc_edges_extract",
        "spc_predict",
        "spc_roc_auc",
        "spc_run_all",
        "SPC_STATUS_OK",
        "typedef struct SpcVolume SpcVolume",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
