//! Seeded synthetic shapes corpus.
//!
//! Every object is a class archetype (ring, cross, blob, bar) drawn on a noisy
//! background, optionally carrying a small high-contrast part whose pattern
//! also depends on the class. Proposals mix jittered object boxes, boxes
//! around the part, object sub-boxes, random boxes and sliding windows.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_ground_truth, write_labels, write_proposals, write_raster, CLASSES_FILE};
use crate::error::{Error, Result};
use crate::geometry::{filter_proposals, iou, BBox, DEFAULT_MIN_PROPOSAL_SIDE};
use crate::model::LabelVector;

pub const ARCHETYPES: [&str; 4] = ["ring", "cross", "blob", "bar"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub classes: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub parts: bool,
    pub part_size: f64,
    pub background: f64,
    pub noise: f64,
    pub jittered_gt: usize,
    pub part_proposals: usize,
    pub sub_proposals: usize,
    pub random_proposals: usize,
    pub window_sizes: Vec<usize>,
    pub window_step: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 128,
            classes: 3,
            train_images: 200,
            test_images: 100,
            min_objects: 1,
            max_objects: 2,
            min_object_size: 44.0,
            max_object_size: 72.0,
            parts: true,
            part_size: 12.0,
            background: 0.3,
            noise: 0.05,
            jittered_gt: 4,
            part_proposals: 3,
            sub_proposals: 2,
            random_proposals: 20,
            window_sizes: vec![32, 64, 96],
            window_step: 32,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synthetic corpus: {m}")));
        if self.classes == 0 || self.classes > ARCHETYPES.len() {
            return bad(&format!("classes must be in 1..={}", ARCHETYPES.len()));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        let side = self.image_size as f64;
        if !(self.min_object_size > DEFAULT_MIN_PROPOSAL_SIDE
            && self.min_object_size <= self.max_object_size
            && self.max_object_size + 4.0 <= side)
        {
            return bad("object sizes must exceed the proposal minimum and fit in the image");
        }
        if self.parts && !(self.part_size >= 2.0 && self.part_size * 2.0 < self.min_object_size) {
            return bad("part size must be at least 2 and under half the smallest object");
        }
        if !(0.0..=1.0).contains(&self.background) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("background must be in [0, 1] and noise non-negative");
        }
        if self.window_step == 0 && !self.window_sizes.is_empty() {
            return bad("window step must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthObject {
    pub class: usize,
    pub bbox: BBox,
    pub part: Option<BBox>,
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub pixels: Array3<f64>,
    pub objects: Vec<SynthObject>,
    pub proposals: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub images: usize,
    pub positives_per_class: Vec<usize>,
    pub mean_proposals: f64,
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class % ARCHETYPES.len() {
        0 => (0.3025..=1.0).contains(&r2),
        1 => u.abs() <= 0.32 || v.abs() <= 0.32,
        2 => r2 <= 1.0,
        _ => (u - v).abs() <= 0.45,
    }
}

fn part_value(class: usize, px: usize, py: usize) -> f64 {
    match class % ARCHETYPES.len() {
        0 => 1.0,
        1 => 0.0,
        2 => {
            if (px / 3 + py / 3).is_multiple_of(2) {
                1.0
            } else {
                0.0
            }
        }
        _ => {
            if (py / 3).is_multiple_of(2) {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn clip(b: &BBox, side: f64) -> Option<BBox> {
    BBox::new(b.x1.max(0.0), b.y1.max(0.0), b.x2.min(side), b.y2.min(side))
}

fn place_objects(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<SynthObject> {
    let side = cfg.image_size as f64;
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SynthObject> = Vec::new();
    for _ in 0..n {
        for _attempt in 0..50 {
            let w = rng.gen_range(cfg.min_object_size..=cfg.max_object_size).round();
            let h = (w * rng.gen_range(0.8..1.25)).round().clamp(cfg.min_object_size, cfg.max_object_size);
            let x1 = rng.gen_range(2.0..=side - 2.0 - w).round();
            let y1 = rng.gen_range(2.0..=side - 2.0 - h).round();
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h).expect("positive size");
            if objects.iter().any(|o| o.bbox.intersection_area(&bbox) > 0.0) {
                continue;
            }
            let class = rng.gen_range(0..cfg.classes);
            let part = cfg.parts.then(|| {
                let (cx, cy) = bbox.center();
                let p = cfg.part_size;
                loop {
                    let u: f64 = rng.gen_range(-0.8..0.8);
                    let v: f64 = rng.gen_range(-0.8..0.8);
                    if inside(class, u, v) {
                        let px = (cx + u * w / 2.0 - p / 2.0).round().clamp(bbox.x1, bbox.x2 - p);
                        let py = (cy + v * h / 2.0 - p / 2.0).round().clamp(bbox.y1, bbox.y2 - p);
                        break BBox::new(px, py, px + p, py + p).expect("positive part");
                    }
                }
            });
            objects.push(SynthObject { class, bbox, part });
            break;
        }
    }
    objects
}

fn render(cfg: &SynthConfig, objects: &[SynthObject], rng: &mut ChaCha8Rng) -> Array3<f64> {
    let s = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let gx: f64 = rng.gen_range(-0.05..0.05);
    let gy: f64 = rng.gen_range(-0.05..0.05);
    let mut img = Array3::from_shape_fn((1, s, s), |(_, r, c)| {
        cfg.background + gx * (c as f64 / s as f64 - 0.5) + gy * (r as f64 / s as f64 - 0.5)
    });
    for o in objects {
        let tone = 0.75 + rng.gen_range(-0.05..0.05);
        let (cx, cy) = o.bbox.center();
        let (hw, hh) = (o.bbox.width() / 2.0, o.bbox.height() / 2.0);
        for r in o.bbox.y1 as usize..o.bbox.y2 as usize {
            for c in o.bbox.x1 as usize..o.bbox.x2 as usize {
                let u = (c as f64 + 0.5 - cx) / hw;
                let v = (r as f64 + 0.5 - cy) / hh;
                if inside(o.class, u, v) {
                    img[[0, r, c]] = tone;
                }
            }
        }
        if let Some(p) = &o.part {
            for r in p.y1 as usize..p.y2 as usize {
                for c in p.x1 as usize..p.x2 as usize {
                    img[[0, r, c]] = part_value(o.class, c - p.x1 as usize, r - p.y1 as usize);
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        img.mapv_inplace(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
    }
    img
}

fn jitter_box(b: &BBox, frac: f64, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let (w, h) = (b.width(), b.height());
    let mut d = || rng.gen_range(-frac..=frac);
    BBox::new(b.x1 + d() * w, b.y1 + d() * h, b.x2 + d() * w, b.y2 + d() * h)
}

fn make_proposals(cfg: &SynthConfig, objects: &[SynthObject], rng: &mut ChaCha8Rng) -> Vec<BBox> {
    let side = cfg.image_size as f64;
    let mut out = Vec::new();
    for o in objects {
        for _ in 0..cfg.jittered_gt {
            out.extend(jitter_box(&o.bbox, 0.15, rng));
        }
        if let Some(p) = &o.part {
            for _ in 0..cfg.part_proposals {
                let (cx, cy) = p.center();
                let s = (p.width() * rng.gen_range(1.3..2.4)).max(DEFAULT_MIN_PROPOSAL_SIDE + 2.0);
                let ox = rng.gen_range(-0.25..0.25) * s;
                let oy = rng.gen_range(-0.25..0.25) * s;
                out.extend(BBox::centered(cx + ox, cy + oy, s));
            }
        }
        for _ in 0..cfg.sub_proposals {
            let w = o.bbox.width() * rng.gen_range(0.4..0.7);
            let h = o.bbox.height() * rng.gen_range(0.4..0.7);
            let x = rng.gen_range(o.bbox.x1..=o.bbox.x2 - w);
            let y = rng.gen_range(o.bbox.y1..=o.bbox.y2 - h);
            out.extend(BBox::new(x, y, x + w, y + h));
        }
    }
    for _ in 0..cfg.random_proposals {
        let w = rng.gen_range(24.0..=side);
        let h = rng.gen_range(24.0..=side);
        let x = rng.gen_range(0.0..=side - w);
        let y = rng.gen_range(0.0..=side - h);
        out.extend(BBox::new(x, y, x + w, y + h));
    }
    for &ws in &cfg.window_sizes {
        let mut y = 0;
        while y + ws <= cfg.image_size {
            let mut x = 0;
            while x + ws <= cfg.image_size {
                out.extend(BBox::new(x as f64, y as f64, (x + ws) as f64, (y + ws) as f64));
                x += cfg.window_step;
            }
            y += cfg.window_step;
        }
    }
    let mut out: Vec<BBox> = out
        .iter()
        .filter_map(|b| clip(b, side))
        .map(|b| BBox::new(b.x1.round(), b.y1.round(), b.x2.round(), b.y2.round()).unwrap_or(b))
        .collect();
    for o in objects {
        let covered = filter_proposals(&out, DEFAULT_MIN_PROPOSAL_SIDE)
            .iter()
            .any(|p| iou(p, &o.bbox) > 0.5);
        if !covered {
            out.push(o.bbox);
        }
    }
    out.shuffle(rng);
    out
}

/// Generates one image with its objects and proposals.
pub fn synth_image(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SynthImage {
    let objects = place_objects(cfg, rng);
    let pixels = render(cfg, &objects, rng);
    let proposals = make_proposals(cfg, &objects, rng);
    SynthImage {
        pixels,
        objects,
        proposals,
    }
}

pub fn labels_of(objects: &[SynthObject], classes: usize) -> LabelVector {
    let v = (0..classes)
        .map(|c| if objects.iter().any(|o| o.class == c) { 1 } else { -1 })
        .collect();
    LabelVector::new(v).expect("labels are +-1")
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `train.tsv`, `test.tsv`, `classes.txt` and per-image rasters, label,
/// proposal and ground-truth CSVs under `out`.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    mkdir(out)?;
    let names: String = ARCHETYPES[..cfg.classes].iter().map(|n| format!("{n}\n")).collect();
    let classes_path = out.join(CLASSES_FILE);
    fs::write(&classes_path, names).map_err(|e| Error::io(&classes_path, e))?;
    let mut positives = vec![0; cfg.classes];
    let mut total_props = 0usize;
    let mut manifests = Vec::new();
    for (stream, (split, count)) in [("train", cfg.train_images), ("test", cfg.test_images)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream as u64);
        for sub in ["images", "labels", "proposals", "gt"] {
            mkdir(&out.join(split).join(sub))?;
        }
        let mut manifest = String::new();
        for i in 0..count {
            let id = format!("{split}_{i:04}");
            let img = synth_image(cfg, &mut rng);
            let labels = labels_of(&img.objects, cfg.classes);
            for (c, p) in positives.iter_mut().enumerate() {
                *p += usize::from(labels.is_positive(c));
            }
            total_props += img.proposals.len();
            let rel = |sub: &str, ext: &str| format!("{split}/{sub}/{id}.{ext}");
            write_raster(&out.join(rel("images", "pgm")), &img.pixels)?;
            write_labels(&out.join(rel("labels", "csv")), &labels)?;
            write_proposals(&out.join(rel("proposals", "csv")), &img.proposals)?;
            let gt: Vec<(usize, BBox)> = img.objects.iter().map(|o| (o.class, o.bbox)).collect();
            write_ground_truth(&out.join(rel("gt", "csv")), &gt)?;
            manifest.push_str(&format!(
                "{id}\t{}\t{}\t{}\t{}\n",
                rel("images", "pgm"),
                rel("labels", "csv"),
                rel("proposals", "csv"),
                rel("gt", "csv")
            ));
        }
        let mpath = out.join(format!("{split}.tsv"));
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        manifests.push(mpath);
    }
    let images = cfg.train_images + cfg.test_images;
    Ok(SynthSummary {
        test_manifest: manifests.pop().expect("two splits"),
        train_manifest: manifests.pop().expect("two splits"),
        images,
        positives_per_class: positives,
        mean_proposals: if images == 0 { 0.0 } else { total_props as f64 / images as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{load_ground_truth, load_labels, load_proposals, DatasetManifest};
    use tempfile::tempdir;

    fn small() -> SynthConfig {
        SynthConfig {
            train_images: 6,
            test_images: 3,
            ..SynthConfig::default()
        }
    }

    fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
        synth_generate(&small(), a.path()).unwrap();
        synth_generate(&small(), b.path()).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
        let c = tempdir().unwrap();
        synth_generate(&SynthConfig { seed: 8, ..small() }, c.path()).unwrap();
        assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
    }

    #[test]
    fn zero_objects_means_all_negative() {
        let d = tempdir().unwrap();
        let cfg = SynthConfig {
            min_objects: 0,
            max_objects: 0,
            ..small()
        };
        let s = synth_generate(&cfg, d.path()).unwrap();
        assert_eq!(s.positives_per_class, vec![0, 0, 0]);
        let m = DatasetManifest::load(&s.train_manifest).unwrap();
        for w in m.weak().samples {
            assert_eq!(load_labels(&w.labels, 3).unwrap().as_slice(), &[-1, -1, -1]);
        }
    }

    #[test]
    fn every_object_has_a_good_proposal_exhaustive() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..200 {
            let img = synth_image(&cfg, &mut rng);
            let side = cfg.image_size as f64;
            for o in &img.objects {
                assert!(o.bbox.x1 >= 0.0 && o.bbox.y1 >= 0.0 && o.bbox.x2 <= side && o.bbox.y2 <= side);
                let p = o.part.unwrap();
                assert!(p.x1 >= o.bbox.x1 && p.x2 <= o.bbox.x2 && p.y1 >= o.bbox.y1 && p.y2 <= o.bbox.y2);
                let best = filter_proposals(&img.proposals, DEFAULT_MIN_PROPOSAL_SIDE)
                    .iter()
                    .map(|b| iou(b, &o.bbox))
                    .fold(0.0, f64::max);
                assert!(best > 0.5, "best IoU {best}");
            }
        }
    }

    #[test]
    fn files_agree_with_manifest() {
        let d = tempdir().unwrap();
        let s = synth_generate(&small(), d.path()).unwrap();
        let m = DatasetManifest::load(&s.test_manifest).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.class_names().unwrap(), ["ring", "cross", "blob"]);
        let gts = m.ground_truth(3).unwrap();
        for (w, gt) in m.weak().samples.iter().zip(&gts) {
            let y = load_labels(&w.labels, 3).unwrap();
            for c in 0..3 {
                assert_eq!(y.is_positive(c), gt.boxes.iter().any(|(k, _)| *k == c));
            }
            assert!(!load_proposals(&w.proposals).unwrap().is_empty());
            let img = crate::dataio::raster::image_to_array(&crate::dataio::read_raster(&w.image).unwrap());
            assert_eq!(img.dim(), (1, 128, 128));
        }
        assert_eq!(load_ground_truth(&d.path().join("test/gt/test_0000.csv"), 3).unwrap(), gts[0].boxes);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SynthConfig { classes: 5, ..small() }.validate().is_err());
        assert!(SynthConfig { min_objects: 3, ..small() }.validate().is_err());
        assert!(SynthConfig { max_object_size: 200.0, ..small() }.validate().is_err());
    }
}
