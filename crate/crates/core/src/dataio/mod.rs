//! Dataset manifests and the CSV formats for proposals, labels and
//! ground-truth boxes.
//!
//! Training only ever receives a [`WeakDataset`], which carries no
//! ground-truth paths. Ground truth is reachable solely through
//! [`DatasetManifest::ground_truth`], which the evaluation code uses.

pub mod raster;
pub mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::LabelVector;

pub use raster::{load_model_input, read_raster, write_raster, InputSource};
pub use synth::{synth_generate, SynthConfig, SynthSummary};

/// File next to a manifest listing one class name per line.
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Clone, Debug, PartialEq)]
struct Sample {
    id: String,
    image: PathBuf,
    labels: PathBuf,
    proposals: PathBuf,
    gt: Option<PathBuf>,
}

/// One training example as seen by the optimizer: no ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakSample {
    pub id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
    pub proposals: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakDataset {
    pub samples: Vec<WeakSample>,
    pub class_names: Option<Vec<String>>,
}

/// Ground-truth boxes of one image, as `(class, box)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGroundTruth {
    pub id: String,
    pub boxes: Vec<(usize, BBox)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    path: PathBuf,
    samples: Vec<Sample>,
    class_names: Option<Vec<String>>,
}

impl DatasetManifest {
    /// Parses `id<TAB>image<TAB>labels<TAB>proposals[<TAB>gt]` lines. Relative
    /// paths resolve against the manifest's directory; blank lines and lines
    /// starting with `#` are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut m = Self::parse(&text, base, path)?;
        let classes = base.join(CLASSES_FILE);
        if classes.is_file() {
            let names = fs::read_to_string(&classes).map_err(|e| Error::io(&classes, e))?;
            m.class_names = Some(names.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
        }
        Ok(m)
    }

    pub fn parse(text: &str, base: &Path, path: &Path) -> Result<Self> {
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(4..=5).contains(&fields.len()) || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("expected 4 or 5 non-empty tab-separated fields, got {}", fields.len()),
                ));
            }
            let id = fields[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::parse(path, i + 1, format!("duplicate image id `{id}`")));
            }
            samples.push(Sample {
                id,
                image: base.join(fields[1]),
                labels: base.join(fields[2]),
                proposals: base.join(fields[3]),
                gt: fields.get(4).map(|g| base.join(g)),
            });
        }
        Ok(DatasetManifest {
            path: path.to_path_buf(),
            samples,
            class_names: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Everything training may see.
    pub fn weak(&self) -> WeakDataset {
        WeakDataset {
            samples: self
                .samples
                .iter()
                .map(|s| WeakSample {
                    id: s.id.clone(),
                    image: s.image.clone(),
                    labels: s.labels.clone(),
                    proposals: s.proposals.clone(),
                })
                .collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Loads every ground-truth file. Fails if any sample lacks one or a file
    /// cannot be read.
    pub fn ground_truth(&self, classes: usize) -> Result<Vec<ImageGroundTruth>> {
        self.samples
            .iter()
            .map(|s| {
                let gt = s
                    .gt
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("image `{}` has no ground-truth file in {}", s.id, self.path.display())))?;
                Ok(ImageGroundTruth {
                    id: s.id.clone(),
                    boxes: load_ground_truth(gt, classes)?,
                })
            })
            .collect()
    }
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
}

fn records(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for rec in csv_reader(&text).records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        out.push((line, rec.iter().map(String::from).collect()));
    }
    Ok(out)
}

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(path, line, format!("invalid number `{tok}`")))
}

fn parse_box(path: &Path, line: usize, toks: &[String]) -> Result<BBox> {
    let v = toks
        .iter()
        .map(|t| parse_f64(path, line, t))
        .collect::<Result<Vec<_>>>()?;
    BBox::new(v[0], v[1], v[2], v[3])
        .ok_or_else(|| Error::parse(path, line, format!("degenerate box ({}, {}, {}, {}): need x1 < x2 and y1 < y2", v[0], v[1], v[2], v[3])))
}

/// Reads `x1,y1,x2,y2` lines in file order.
pub fn load_proposals(path: &Path) -> Result<Vec<BBox>> {
    records(path)?
        .into_iter()
        .map(|(line, rec)| {
            if rec.len() != 4 {
                return Err(Error::parse(path, line, format!("expected 4 fields, got {}", rec.len())));
            }
            parse_box(path, line, &rec)
        })
        .collect()
}

pub fn write_proposals(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format!("{},{},{},{}\n", b.x1, b.y1, b.x2, b.y2));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads one line of `classes` comma-separated entries in `{-1, 1}`.
pub fn load_labels(path: &Path, classes: usize) -> Result<LabelVector> {
    let recs = records(path)?;
    let (line, rec) = match recs.as_slice() {
        [one] => one,
        [] => return Err(Error::parse(path, 1, "empty label file")),
        [_, (line, _), ..] => return Err(Error::parse(path, *line, "label file must hold a single line")),
    };
    if rec.len() != classes {
        return Err(Error::parse(path, *line, format!("expected {classes} labels, got {}", rec.len())));
    }
    let vals = rec
        .iter()
        .map(|t| match t.as_str() {
            "1" | "+1" => Ok(1),
            "-1" => Ok(-1),
            other => Err(Error::parse(path, *line, format!("label `{other}` is not -1 or 1"))),
        })
        .collect::<Result<Vec<i8>>>()?;
    LabelVector::new(vals)
}

pub fn write_labels(path: &Path, labels: &LabelVector) -> Result<()> {
    let s: Vec<String> = labels.as_slice().iter().map(i8::to_string).collect();
    fs::write(path, format!("{}\n", s.join(","))).map_err(|e| Error::io(path, e))
}

/// Reads `class,x1,y1,x2,y2` lines; class indices must be below `classes`.
pub fn load_ground_truth(path: &Path, classes: usize) -> Result<Vec<(usize, BBox)>> {
    records(path)?
        .into_iter()
        .map(|(line, rec)| {
            if rec.len() != 5 {
                return Err(Error::parse(path, line, format!("expected 5 fields, got {}", rec.len())));
            }
            let c: usize = rec[0]
                .parse()
                .ok()
                .filter(|c| *c < classes)
                .ok_or_else(|| Error::parse(path, line, format!("class `{}` is not in 0..{classes}", rec[0])))?;
            Ok((c, parse_box(path, line, &rec[1..])?))
        })
        .collect()
}

pub fn write_ground_truth(path: &Path, boxes: &[(usize, BBox)]) -> Result<()> {
    let mut s = String::new();
    for (c, b) in boxes {
        s.push_str(&format!("{c},{},{},{},{}\n", b.x1, b.y1, b.x2, b.y2));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn proposals_parse_in_order() {
        let d = tempdir().unwrap();
        let p = write(d.path(), "p.csv", "0,0,10,10\n2.5, 3 ,20,30.5\n");
        let b = load_proposals(&p).unwrap();
        assert_eq!(b, vec![BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), BBox::new(2.5, 3.0, 20.0, 30.5).unwrap()]);
    }

    #[test]
    fn empty_proposal_file_is_empty_list() {
        let d = tempdir().unwrap();
        assert!(load_proposals(&write(d.path(), "p.csv", "")).unwrap().is_empty());
    }

    #[test]
    fn inverted_or_malformed_proposals_are_errors() {
        let d = tempdir().unwrap();
        let err = load_proposals(&write(d.path(), "a.csv", "0,0,10,10\n10,0,5,10\n")).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        assert!(load_proposals(&write(d.path(), "b.csv", "0,0,10\n")).is_err());
        assert!(load_proposals(&write(d.path(), "c.csv", "0,0,x,10\n")).is_err());
        assert!(load_proposals(&write(d.path(), "e.csv", "0,0,nan,10\n")).is_err());
    }

    #[test]
    fn labels_examples() {
        let d = tempdir().unwrap();
        let y = load_labels(&write(d.path(), "a.csv", "1,-1,-1\n"), 3).unwrap();
        assert_eq!(y.as_slice(), &[1, -1, -1]);
        let y = load_labels(&write(d.path(), "b.csv", "1,1,1"), 3).unwrap();
        assert_eq!(y.as_slice(), &[1, 1, 1]);
        assert!(load_labels(&write(d.path(), "c.csv", "0,1,-1\n"), 3).is_err());
        assert!(load_labels(&write(d.path(), "e.csv", "1,-1\n"), 3).is_err());
        assert!(load_labels(&write(d.path(), "f.csv", "1,-1\n1,-1\n"), 2).is_err());
    }

    #[test]
    fn ground_truth_round_trip_and_class_range() {
        let d = tempdir().unwrap();
        let p = d.path().join("g.csv");
        let boxes = vec![(0, BBox::new(1.0, 2.0, 30.0, 40.0).unwrap()), (2, BBox::new(5.0, 5.0, 9.5, 9.5).unwrap())];
        write_ground_truth(&p, &boxes).unwrap();
        assert_eq!(load_ground_truth(&p, 3).unwrap(), boxes);
        assert!(load_ground_truth(&p, 2).is_err());
    }

    #[test]
    fn manifest_resolves_paths_and_hides_ground_truth() {
        let d = tempdir().unwrap();
        let m = write(
            d.path(),
            "m.tsv",
            "# comment\na\timg/a.pgm\tl/a.csv\tp/a.csv\tg/a.csv\nb\timg/b.pgm\tl/b.csv\tp/b.csv\n",
        );
        write(d.path(), CLASSES_FILE, "ring\ncross\n");
        let man = DatasetManifest::load(&m).unwrap();
        assert_eq!(man.len(), 2);
        assert_eq!(man.class_names().unwrap(), ["ring", "cross"]);
        let weak = man.weak();
        assert_eq!(weak.samples[0].image, d.path().join("img/a.pgm"));
        assert_eq!(weak.samples[1].proposals, d.path().join("p/b.csv"));
        assert!(man.ground_truth(2).is_err());
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_arity() {
        let p = Path::new("m.tsv");
        assert!(DatasetManifest::parse("a\ti\tl\tp\na\ti\tl\tp\n", Path::new(""), p).is_err());
        let err = DatasetManifest::parse("a\ti\tl\n", Path::new(""), p).unwrap_err();
        assert!(err.to_string().contains("m.tsv:1"), "{err}");
    }
}
