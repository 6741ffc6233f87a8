use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsloc::features::{ConvConfig, FeatureMap};
use wsloc::geometry::BBox;
use wsloc::model::checkpoint::{load_checkpoint, save_checkpoint};
use wsloc::model::{FeatureSource, HeadKind, Model, ModelConfig, ModelInput, PoolSettings};
use wsloc_ffi::*;

fn conv_model() -> Model {
    let cfg = ModelConfig {
        head: HeadKind::ContrastiveS,
        classes: 3,
        pool: PoolSettings { grid: 2, ratio: 1.8 },
        trunk_width: 8,
        features: FeatureSource::Conv(ConvConfig {
            in_channels: 1,
            channels: vec![4, 4],
            strides: vec![2, 2],
        }),
    };
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
}

/// Saves `model` and returns its path with the reloaded copy; checkpoints
/// store single precision, so the copy is the reference.
fn saved(model: &Model, dir: &Path) -> (CString, Model) {
    let p = dir.join("m.cltf");
    save_checkpoint(model, &p).unwrap();
    (CString::new(p.to_str().unwrap()).unwrap(), load_checkpoint(&p).unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(wsloc_last_error()) }.to_string_lossy().into_owned()
}

fn load(path: &CString) -> *mut WslocModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { wsloc_model_load(path.as_ptr(), &mut m) }, WslocStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

fn rois() -> Vec<WslocBox> {
    vec![
        WslocBox { x1: 0.0, y1: 0.0, x2: 12.0, y2: 12.0 },
        WslocBox { x1: 2.0, y1: 3.0, x2: 15.0, y2: 16.0 },
        WslocBox { x1: 5.0, y1: 1.0, x2: 9.0, y2: 14.0 },
    ]
}

fn bboxes(r: &[WslocBox]) -> Vec<BBox> {
    r.iter().map(|b| BBox::new(b.x1, b.y1, b.x2, b.y2).unwrap()).collect()
}

#[test]
fn image_scores_match_direct_forward() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = saved(&conv_model(), dir.path());
    let m = load(&path);
    let (mut classes, mut ch, mut stride, mut pre) = (0, 0, 0, -1);
    assert_eq!(unsafe { wsloc_model_info(m, &mut classes, &mut ch, &mut stride, &mut pre) }, WslocStatus::Ok);
    assert_eq!((classes, ch, stride, pre), (3, 1, 4, 0));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Array3::from_shape_fn((1, 16, 16), |_| rng.gen_range(0.0..1.0));
    let r = rois();
    let mut scores = vec![0.0; r.len() * 3];
    let mut image = vec![0.0; 3];
    let st = unsafe {
        wsloc_model_score_image(m, img.as_ptr(), 1, 16, 16, r.as_ptr(), r.len(), scores.as_mut_ptr(), scores.len(), image.as_mut_ptr())
    };
    assert_eq!(st, WslocStatus::Ok, "{}", last_error());
    let direct = model.forward(&ModelInput::Image(img.clone()), &bboxes(&r)).unwrap();
    assert_eq!(scores, direct.final_scores.iter().copied().collect::<Vec<_>>());
    assert_eq!(image, direct.image_scores.to_vec());

    let mut small = vec![0.0; 2];
    let st = unsafe {
        wsloc_model_score_image(m, img.as_ptr(), 1, 16, 16, r.as_ptr(), r.len(), small.as_mut_ptr(), small.len(), ptr::null_mut())
    };
    assert_eq!(st, WslocStatus::BufferTooSmall);
    assert!(last_error().contains("9"), "{}", last_error());

    let st = unsafe {
        wsloc_model_score_image(m, img.as_ptr(), 3, 16, 16, r.as_ptr(), r.len(), scores.as_mut_ptr(), scores.len(), ptr::null_mut())
    };
    assert_eq!(st, WslocStatus::Shape);
    unsafe { wsloc_model_free(m) };
}

#[test]
fn feature_scores_match_direct_forward() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        head: HeadKind::Additive,
        classes: 2,
        pool: PoolSettings { grid: 2, ratio: 1.8 },
        trunk_width: 5,
        features: FeatureSource::Precomputed { channels: 3, stride: 4 },
    };
    let (path, model) = saved(&Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap(), dir.path());
    let m = load(&path);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fm = Array3::from_shape_fn((3, 5, 5), |_| rng.gen_range(0.0..2.0));
    let r = rois();
    let mut scores = vec![0.0; r.len() * 2];
    let st = unsafe {
        wsloc_model_score_features(m, fm.as_ptr(), 3, 5, 5, 4, r.as_ptr(), r.len(), scores.as_mut_ptr(), scores.len(), ptr::null_mut())
    };
    assert_eq!(st, WslocStatus::Ok, "{}", last_error());
    let direct = model.forward(&ModelInput::Features(FeatureMap::new(fm.clone(), 4)), &bboxes(&r)).unwrap();
    assert_eq!(scores, direct.final_scores.iter().copied().collect::<Vec<_>>());
    let st = unsafe {
        wsloc_model_score_image(m, fm.as_ptr(), 3, 5, 5, r.as_ptr(), r.len(), scores.as_mut_ptr(), scores.len(), ptr::null_mut())
    };
    assert_eq!(st, WslocStatus::InvalidArgument);
    unsafe { wsloc_model_free(m) };
}

#[test]
fn load_failures_set_status_and_message() {
    let mut m = ptr::null_mut();
    let missing = CString::new("/nonexistent/dir/m.cltf").unwrap();
    let st = unsafe { wsloc_model_load(missing.as_ptr(), &mut m) };
    assert_eq!(st, WslocStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("nonexistent"));
    assert_eq!(unsafe { wsloc_model_load(ptr::null(), &mut m) }, WslocStatus::NullPointer);
    assert!(last_error().contains("path"));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.cltf");
    std::fs::write(&p, b"not a tensor").unwrap();
    std::fs::write(dir.path().join("junk.cltf.meta"), b"head = baseline\n").unwrap();
    let junk = CString::new(p.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { wsloc_model_load(junk.as_ptr(), &mut m) }, WslocStatus::Format);
    unsafe { wsloc_model_free(ptr::null_mut()) };
}

#[test]
fn iou_and_nms() {
    let a = WslocBox { x1: 0.0, y1: 0.0, x2: 2.0, y2: 2.0 };
    let b = WslocBox { x1: 1.0, y1: 0.0, x2: 3.0, y2: 2.0 };
    let mut v = 0.0f64;
    assert_eq!(unsafe { wsloc_iou(&a, &b, &mut v) }, WslocStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(last_error(), "");
    let bad = WslocBox { x1: 2.0, y1: 0.0, x2: 1.0, y2: 1.0 };
    assert_eq!(unsafe { wsloc_iou(&a, &bad, &mut v) }, WslocStatus::InvalidArgument);

    // b overlaps a at 1/3, c is disjoint: at 0.3 b goes, at 0.4 it stays.
    let c = WslocBox { x1: 10.0, y1: 10.0, x2: 12.0, y2: 12.0 };
    let boxes = [b, a, c];
    let scores = [0.5, 0.9, 0.1];
    let mut keep = [usize::MAX; 3];
    let mut n = 0;
    assert_eq!(unsafe { wsloc_nms(boxes.as_ptr(), scores.as_ptr(), 3, 0.3, keep.as_mut_ptr(), &mut n) }, WslocStatus::Ok);
    assert_eq!(&keep[..n], &[1, 2]);
    assert_eq!(unsafe { wsloc_nms(boxes.as_ptr(), scores.as_ptr(), 3, 0.4, keep.as_mut_ptr(), &mut n) }, WslocStatus::Ok);
    assert_eq!(&keep[..n], &[1, 0, 2]);
    assert_eq!(unsafe { wsloc_nms(ptr::null(), ptr::null(), 0, 0.4, ptr::null_mut(), &mut n) }, WslocStatus::Ok);
    assert_eq!(n, 0);
    let nan = [f64::NAN, 0.1, 0.2];
    assert_eq!(unsafe { wsloc_nms(boxes.as_ptr(), nan.as_ptr(), 3, 0.4, keep.as_mut_ptr(), &mut n) }, WslocStatus::NonFinite);
    assert_eq!(unsafe { wsloc_nms(boxes.as_ptr(), scores.as_ptr(), 3, 1.5, keep.as_mut_ptr(), &mut n) }, WslocStatus::InvalidArgument);
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(crate_dir().join("include/wsloc.h")).unwrap();
    let src = std::fs::read_to_string(crate_dir().join("src/lib.rs")).unwrap();
    let exported: Vec<&str> = src
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 8);
    for f in exported {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    for name in ["WSLOC_STATUS_OK = 0", "WSLOC_STATUS_PANIC = 8", "typedef struct WslocModel WslocModel"] {
        assert!(header.contains(name), "{name}");
    }
}

/// Compiles a C program against the header and the static library and runs it.
#[test]
fn c_program_links_and_agrees() {
    let target = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = target.join("libwsloc_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler on PATH");
    assert!(status.success());
    let (path, model) = saved(&conv_model(), dir.path());
    let out = Command::new(&exe).arg(path.to_str().unwrap()).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = text.split_whitespace().collect();
    let px = Array3::from_shape_fn((1, 16, 16), |(_, r, c)| ((r * 16 + c) % 7) as f64 / 7.0);
    let r = [BBox::new(0.0, 0.0, 12.0, 12.0).unwrap(), BBox::new(2.0, 3.0, 15.0, 16.0).unwrap()];
    let direct = model.forward(&ModelInput::Image(px), &r).unwrap();
    assert_eq!(fields[0], "3");
    assert_eq!(fields[1].parse::<f64>().unwrap(), direct.final_scores[[0, 0]]);
    assert_eq!(fields[2].parse::<f64>().unwrap(), direct.image_scores[0]);
}
