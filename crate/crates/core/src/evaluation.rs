//! Test-time score averaging, non-maximum suppression, detection AP/mAP and
//! CorLoc.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use ndarray::Array2;

use crate::dataio::{load_proposals, ImageGroundTruth, InputSource, WeakDataset};
use crate::error::{Error, Result};
use crate::geometry::{filter_proposals, iou, BBox};
use crate::model::{Model, ModelInput, ScoreMatrix};

pub const DEFAULT_MIN_SCORE: f64 = 1e-4;
pub const DEFAULT_NMS_IOU: f64 = 0.4;
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Ground-truth boxes indexed by image id and class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruthSet {
    classes: usize,
    images: BTreeMap<String, Vec<Vec<BBox>>>,
}

impl GroundTruthSet {
    pub fn new(classes: usize) -> Self {
        GroundTruthSet {
            classes,
            images: BTreeMap::new(),
        }
    }

    pub fn from_images(gts: &[ImageGroundTruth], classes: usize) -> Result<Self> {
        let mut set = GroundTruthSet::new(classes);
        for g in gts {
            set.add_image(&g.id);
            for (c, b) in &g.boxes {
                set.add(&g.id, *c, *b)?;
            }
        }
        Ok(set)
    }

    /// Registers an image, possibly without boxes.
    pub fn add_image(&mut self, id: &str) {
        let classes = self.classes;
        self.images.entry(id.to_string()).or_insert_with(|| vec![Vec::new(); classes]);
    }

    pub fn add(&mut self, id: &str, class: usize, b: BBox) -> Result<()> {
        if class >= self.classes {
            return Err(Error::Invalid(format!("ground-truth class {class} out of range")));
        }
        self.add_image(id);
        self.images.get_mut(id).expect("just added")[class].push(b);
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn boxes(&self, id: &str, class: usize) -> &[BBox] {
        self.images.get(id).map_or(&[], |v| v[class].as_slice())
    }

    pub fn count(&self, class: usize) -> usize {
        self.images.values().map(|v| v[class].len()).sum()
    }

    /// Images holding at least one box of `class`, in id order.
    pub fn positive_images(&self, class: usize) -> impl Iterator<Item = &str> {
        self.images
            .iter()
            .filter(move |(_, v)| !v[class].is_empty())
            .map(|(k, _)| k.as_str())
    }
}

/// Element-wise mean of per-setting score matrices.
pub fn average_scores(settings: &[ScoreMatrix]) -> Result<ScoreMatrix> {
    let first = settings.first().ok_or_else(|| Error::Invalid("no score matrices to average".into()))?;
    let mut acc = Array2::<f64>::zeros(first.dim());
    for m in settings {
        if m.dim() != first.dim() {
            return Err(Error::Shape(format!("score matrices {:?} vs {:?}", m.dim(), first.dim())));
        }
        acc += m;
    }
    Ok(acc / settings.len() as f64)
}

/// Indices kept by greedy NMS, highest score first. Equal scores keep the
/// lower index first; a box survives iff its IoU with every kept box is `<= thr`.
pub fn nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= thr) {
            kept.push(i);
        }
    }
    kept
}

/// NMS over detections of one image and class.
pub fn nms_detections(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms(&boxes, &scores, thr).into_iter().map(|i| dets[i].clone()).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ApMode {
    /// Area under the monotone precision envelope.
    #[default]
    Continuous,
    /// Mean of the best precision at recall >= 0, 0.1, ..., 1.
    ElevenPoint,
}

impl FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(ApMode::Continuous),
            "eleven_point" => Ok(ApMode::ElevenPoint),
            other => Err(Error::Invalid(format!("unknown AP mode `{other}` (continuous | eleven_point)"))),
        }
    }
}

impl fmt::Display for ApMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApMode::Continuous => "continuous",
            ApMode::ElevenPoint => "eleven_point",
        })
    }
}

/// True-positive flags in descending score order after greedy matching of each
/// detection to the highest-IoU unmatched ground truth of its image.
fn match_detections(dets: &[&Detection], gts: &GroundTruthSet, class: usize, thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used: HashMap<&str, Vec<bool>> = HashMap::new();
    order
        .into_iter()
        .map(|i| {
            let d = dets[i];
            let boxes = gts.boxes(&d.image_id, class);
            let flags = used.entry(d.image_id.as_str()).or_insert_with(|| vec![false; boxes.len()]);
            let best = boxes
                .iter()
                .enumerate()
                .filter(|(j, _)| !flags[*j])
                .map(|(j, g)| (j, iou(&d.bbox, g)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v > thr => {
                    flags[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Precision and recall after each detection, in descending score order.
pub fn precision_recall(tp: &[bool], positives: usize) -> (Vec<f64>, Vec<f64>) {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        precision.push(t as f64 / (t + f) as f64);
        recall.push(t as f64 / positives as f64);
    }
    (precision, recall)
}

fn ap_from_curve(precision: &[f64], recall: &[f64], mode: ApMode) -> f64 {
    match mode {
        ApMode::Continuous => {
            let mut mrec = vec![0.0];
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = f64::from(t) / 10.0;
                    precision
                        .iter()
                        .zip(recall)
                        .filter(|(_, r)| **r >= t)
                        .map(|(p, _)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP of `class` over all images, or `None` when the class has no ground truth.
/// Detections of other classes are ignored.
pub fn average_precision(dets: &[Detection], gts: &GroundTruthSet, class: usize, thr: f64, mode: ApMode) -> Option<f64> {
    let positives = gts.count(class);
    if positives == 0 {
        return None;
    }
    let mine: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    let tp = match_detections(&mine, gts, class, thr);
    let (p, r) = precision_recall(&tp, positives);
    Some(ap_from_curve(&p, &r, mode))
}

/// Mean over defined entries; `None` when nothing is defined.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = values.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean AP over classes with a defined AP.
pub fn map(aps: &[Option<f64>]) -> Option<f64> {
    mean_defined(aps)
}

/// Percentage of positive images whose top box hits a ground truth of the
/// class with IoU strictly above `thr`. `tops` holds one detection per image
/// and class; a positive image without one counts as a miss.
pub fn corloc(tops: &[Detection], gts: &GroundTruthSet, class: usize, thr: f64) -> Option<f64> {
    let top: HashMap<&str, &BBox> = tops
        .iter()
        .filter(|d| d.class == class)
        .map(|d| (d.image_id.as_str(), &d.bbox))
        .collect();
    let mut n = 0usize;
    let mut hits = 0usize;
    for id in gts.positive_images(class) {
        n += 1;
        if let Some(b) = top.get(id) {
            if gts.boxes(id, class).iter().any(|g| iou(b, g) > thr) {
                hits += 1;
            }
        }
    }
    (n > 0).then(|| 100.0 * hits as f64 / n as f64)
}

/// Test-time transforms: every scale, each with and without a flip.
pub fn test_settings(scales: &[f64], flips: bool) -> Vec<(f64, bool)> {
    let mut v = Vec::new();
    for &s in scales {
        v.push((s, false));
        if flips {
            v.push((s, true));
        }
    }
    v
}

/// `S * sigma(L)` averaged over `settings`, one row per ROI in input order.
/// Feature-map inputs are scored once, untransformed.
pub fn averaged_final_scores(model: &Model, source: &InputSource, rois: &[BBox], settings: &[(f64, bool)]) -> Result<ScoreMatrix> {
    let identity = [(1.0, false)];
    let settings = if source.is_raster() { settings } else { &identity[..] };
    let mats = settings
        .iter()
        .map(|&(scale, flip)| {
            let (input, boxes) = source.view(rois, scale, flip);
            Ok(model.forward(&input, &boxes)?.final_scores)
        })
        .collect::<Result<Vec<_>>>()?;
    average_scores(&mats)
}

/// Averaged scores of one image over its filtered proposals.
#[derive(Clone, Debug)]
pub struct ImageScores {
    pub id: String,
    pub rois: Vec<BBox>,
    pub scores: ScoreMatrix,
}

pub fn score_dataset(
    model: &Model,
    data: &WeakDataset,
    settings: &[(f64, bool)],
    min_side: f64,
) -> Result<Vec<ImageScores>> {
    let mut out = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let rois = filter_proposals(&load_proposals(&s.proposals)?, min_side);
        if rois.is_empty() {
            warn!("`{}` has no proposal after filtering; no detections", s.id);
            continue;
        }
        let source = InputSource::load(&s.image, &model.config.features)?;
        let scores = averaged_final_scores(model, &source, &rois, settings)?;
        out.push(ImageScores {
            id: s.id.clone(),
            rois,
            scores,
        });
    }
    Ok(out)
}

/// Per image and class: drop scores below `min_score`, then NMS.
pub fn detections_from_scores(images: &[ImageScores], min_score: f64, nms_thr: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for im in images {
        for c in 0..im.scores.ncols() {
            let dets: Vec<Detection> = im
                .rois
                .iter()
                .zip(im.scores.column(c))
                .filter(|(_, s)| **s >= min_score)
                .map(|(b, s)| Detection {
                    image_id: im.id.clone(),
                    class: c,
                    bbox: *b,
                    score: *s,
                })
                .collect();
            out.extend(nms_detections(&dets, nms_thr));
        }
    }
    out
}

/// Highest-scoring ROI per image and class (lowest index on ties), unfiltered.
pub fn top_boxes(images: &[ImageScores]) -> Vec<Detection> {
    let mut out = Vec::new();
    for im in images {
        for c in 0..im.scores.ncols() {
            let col = im.scores.column(c);
            let best = (0..col.len()).fold(0, |b, i| if col[i] > col[b] { i } else { b });
            out.push(Detection {
                image_id: im.id.clone(),
                class: c,
                bbox: im.rois[best],
                score: col[best],
            });
        }
    }
    out
}

pub const DETECTIONS_HEADER: &str = "image_id,class,x1,y1,x2,y2,score";

pub fn render_detections(dets: &[Detection]) -> String {
    let mut s = format!("{DETECTIONS_HEADER}\n");
    for d in dets {
        let b = d.bbox;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", d.image_id, d.class, b.x1, b.y1, b.x2, b.y2, d.score);
    }
    s
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, render_detections(dets)).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line == DETECTIONS_HEADER) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(Error::parse(path, i + 1, format!("expected 7 fields, got {}", f.len())));
        }
        let num = |t: &str| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, i + 1, format!("invalid number `{t}`")))
        };
        let class = f[1]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("invalid class `{}`", f[1])))?;
        let bbox = BBox::new(num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?)
            .ok_or_else(|| Error::parse(path, i + 1, "degenerate box"))?;
        out.push(Detection {
            image_id: f[0].to_string(),
            class,
            bbox,
            score: num(f[6])?,
        });
    }
    Ok(out)
}

/// Per-class metric rows with a trailing mean column, values in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub class_names: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl ResultsTable {
    pub fn new(class_names: Vec<String>) -> Self {
        ResultsTable {
            class_names,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: &str, values: Vec<Option<f64>>) {
        self.rows.push((metric.to_string(), values));
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|(m, _)| m == metric).and_then(|(_, v)| mean_defined(v))
    }

    pub fn render_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.2}"));
        let mut s = format!("metric,{},mean\n", self.class_names.join(","));
        for (m, v) in &self.rows {
            let cells: Vec<String> = v.iter().map(|x| fmt(*x)).collect();
            let _ = writeln!(s, "{m},{},{}", cells.join(","), fmt(mean_defined(v)));
        }
        s
    }
}

/// Class names from the dataset, or `c0, c1, ...`.
pub fn class_names_or_default(names: Option<&[String]>, classes: usize) -> Vec<String> {
    match names {
        Some(n) if n.len() == classes => n.to_vec(),
        _ => (0..classes).map(|c| format!("c{c}")).collect(),
    }
}

/// Per-class AP (percent) from detections against ground truth.
pub fn ap_row(dets: &[Detection], gts: &GroundTruthSet, thr: f64, mode: ApMode) -> Vec<Option<f64>> {
    (0..gts.classes())
        .map(|c| average_precision(dets, gts, c, thr, mode).map(|v| 100.0 * v))
        .collect()
}

pub fn corloc_row(tops: &[Detection], gts: &GroundTruthSet, thr: f64) -> Vec<Option<f64>> {
    (0..gts.classes()).map(|c| corloc(tops, gts, c, thr)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub size: f64,
    pub branch_roi: f64,
    pub branch_context: f64,
    pub localization: f64,
}

/// Localization branch outputs for square boxes of each size centred on `center`.
pub fn score_sweep(model: &Model, input: &ModelInput, center: (f64, f64), class: usize, sizes: &[f64]) -> Result<Vec<SweepRow>> {
    if class >= model.config.classes {
        return Err(Error::Invalid(format!("class {class} out of range")));
    }
    let boxes = sizes
        .iter()
        .map(|&s| BBox::centered(center.0, center.1, s).ok_or_else(|| Error::Invalid(format!("invalid sweep size {s}"))))
        .collect::<Result<Vec<_>>>()?;
    let out = model.forward(input, &boxes)?;
    let loc = &out.localization;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(k, &size)| SweepRow {
            size,
            branch_roi: loc.branch_roi[[k, class]],
            branch_context: loc.branch_context[[k, class]],
            localization: loc.scores[[k, class]],
        })
        .collect())
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("size,branch_roi,branch_context,L\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.size, r.branch_roi, r.branch_context, r.localization);
    }
    s
}
