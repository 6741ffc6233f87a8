//! Flat `key = value` run configuration.
//!
//! Every key has a default; a file only lists what it changes. Unknown keys,
//! repeated keys and unparsable values are errors carrying the line number.
//! [`RunConfig::render`] prints every key, and parsing its output gives back
//! the same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::evaluation::{test_settings, ApMode, DEFAULT_MATCH_IOU, DEFAULT_MIN_SCORE, DEFAULT_NMS_IOU};
use crate::features::ConvConfig;
use crate::model::{FeatureSource, HeadKind, ModelConfig, PoolSettings};
use crate::training::{TrainConfig, DEFAULT_JITTER_SCALES};

/// Name of the resolved configuration written into every output directory.
pub const EFFECTIVE_CONFIG: &str = "effective.conf";

/// Key, default as written, description. Order is the rendering order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "7", "drives corpus generation, initialization, shuffling and jitter"),
    ("head", "contrastive_s", "baseline | additive | contrastive_a | contrastive_s"),
    ("classes", "3", "number of object classes"),
    ("pool_ratio", "1.8", "context box side / box side; frame hole side = box side / ratio"),
    ("pool_grid", "6", "pooled cells per side"),
    ("trunk_width", "256", "width of the two shared fully connected layers"),
    ("features", "conv", "conv (learned from rasters) | precomputed (.cltf maps)"),
    ("conv_in_channels", "1", "1 for PGM input, 3 for PPM"),
    ("conv_channels", "16, 32, 64, 64", "output channels per 3x3 conv layer"),
    ("conv_strides", "2, 2, 2, 1", "stride per conv layer, each 1 or 2"),
    ("feature_channels", "64", "channels of precomputed maps"),
    ("feature_stride", "8", "image pixels per cell of precomputed maps"),
    ("epochs", "30", "training epochs"),
    ("lr", "1e-5", "learning rate up to lr_drop_epoch"),
    ("lr_after_drop", "1e-6", "learning rate after lr_drop_epoch"),
    ("lr_drop_epoch", "10", "last epoch trained at lr"),
    ("lr_scale", "1", "multiplies both learning rates"),
    ("momentum", "0.9", "SGD momentum"),
    ("dampening", "0", "SGD dampening"),
    ("jitter_scales", "0.7, 0.85, 1, 1.2, 1.44", "training rescale factors, drawn uniformly per step"),
    ("flip_prob", "0.5", "probability of a horizontal flip per step"),
    ("min_proposal_side", "20", "proposals need width and height above this"),
    ("checkpoint_every", "0", "epochs between checkpoints; 0 keeps only the final model"),
    ("train_conv", "true", "update the conv stack during training"),
    ("test_scales", "0.7, 0.85, 1, 1.2, 1.44", "rescale factors averaged at test time"),
    ("test_flips", "true", "also average horizontally flipped views"),
    ("min_score", "1e-4", "detections scoring below this are dropped"),
    ("nms_iou", "0.4", "non-maximum suppression overlap threshold"),
    ("match_iou", "0.5", "a detection is correct when IoU exceeds this"),
    ("ap_mode", "continuous", "continuous | eleven_point"),
    ("synth_image_size", "128", "side of synthetic images"),
    ("synth_train_images", "200", "synthetic training images"),
    ("synth_test_images", "100", "synthetic test images"),
    ("synth_min_objects", "1", "objects per image, lower bound"),
    ("synth_max_objects", "2", "objects per image, upper bound"),
    ("synth_min_object_size", "44", "object side, lower bound"),
    ("synth_max_object_size", "72", "object side, upper bound"),
    ("synth_parts", "true", "draw a class-specific part on every object"),
    ("synth_part_size", "12", "part side"),
    ("synth_background", "0.3", "mean background intensity"),
    ("synth_noise", "0.05", "pixel noise standard deviation"),
    ("synth_jittered_gt", "4", "proposals jittered around each object"),
    ("synth_part_proposals", "3", "proposals centred on each part"),
    ("synth_sub_proposals", "2", "proposals covering part of each object"),
    ("synth_random_proposals", "20", "uniformly random proposals per image"),
    ("synth_window_sizes", "32, 64, 96", "sliding-window proposal sides"),
    ("synth_window_step", "32", "sliding-window step"),
    ("data_dir", "data", "where synth writes the corpus"),
    ("train_manifest", "data/train.tsv", "manifest used by train and for CorLoc"),
    ("test_manifest", "data/test.tsv", "manifest used by detect and for AP"),
    ("run_dir", "run", "where train writes logs and checkpoints"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub scales: Vec<f64>,
    pub flips: bool,
    pub min_score: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub ap_mode: ApMode,
}

impl EvalConfig {
    /// `(scale, flip)` views averaged at test time.
    pub fn settings(&self) -> Vec<(f64, bool)> {
        test_settings(&self.scales, self.flips)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub paths: Paths,
    conv: ConvConfig,
    precomputed: (usize, usize),
    precomputed_selected: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig::bare();
        for (key, value, _) in KEYS {
            cfg.set(key, value).expect("built-in defaults parse");
        }
        cfg.sync();
        cfg
    }
}

fn value<T: FromStr>(raw: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    raw.parse::<T>().map_err(|e| format!("cannot parse `{raw}`: {e}"))
}

fn list<T: FromStr>(raw: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    raw.split(',').map(|s| value(s.trim())).collect()
}

fn show_list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    fn bare() -> Self {
        let model = ModelConfig {
            head: HeadKind::ContrastiveS,
            classes: 1,
            pool: PoolSettings { grid: 1, ratio: 1.8 },
            trunk_width: 1,
            features: FeatureSource::Conv(ConvConfig::default()),
        };
        RunConfig {
            seed: 0,
            train: TrainConfig::new(model),
            eval: EvalConfig {
                scales: DEFAULT_JITTER_SCALES.to_vec(),
                flips: true,
                min_score: DEFAULT_MIN_SCORE,
                nms_iou: DEFAULT_NMS_IOU,
                match_iou: DEFAULT_MATCH_IOU,
                ap_mode: ApMode::Continuous,
            },
            synth: SynthConfig::default(),
            paths: Paths {
                data_dir: PathBuf::new(),
                train_manifest: PathBuf::new(),
                test_manifest: PathBuf::new(),
                run_dir: PathBuf::new(),
            },
            conv: ConvConfig::default(),
            precomputed: (1, 1),
            precomputed_selected: false,
        }
    }

    /// Propagates keys that feed more than one sub-configuration.
    fn sync(&mut self) {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.synth.classes = self.train.model.classes;
        self.train.model.features = if self.precomputed_selected {
            FeatureSource::Precomputed {
                channels: self.precomputed.0,
                stride: self.precomputed.1,
            }
        } else {
            FeatureSource::Conv(self.conv.clone())
        };
    }

    fn set(&mut self, key: &str, raw: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let m = &mut t.model;
        let s = &mut self.synth;
        let e = &mut self.eval;
        let p = &mut self.paths;
        match key {
            "seed" => self.seed = value(raw)?,
            "head" => m.head = value(raw)?,
            "classes" => m.classes = value(raw)?,
            "pool_ratio" => m.pool.ratio = value(raw)?,
            "pool_grid" => m.pool.grid = value(raw)?,
            "trunk_width" => m.trunk_width = value(raw)?,
            "features" => {
                self.precomputed_selected = match raw {
                    "conv" => false,
                    "precomputed" => true,
                    _ => return Err(format!("expected conv or precomputed, got `{raw}`")),
                }
            }
            "conv_in_channels" => self.conv.in_channels = value(raw)?,
            "conv_channels" => self.conv.channels = list(raw)?,
            "conv_strides" => self.conv.strides = list(raw)?,
            "feature_channels" => self.precomputed.0 = value(raw)?,
            "feature_stride" => self.precomputed.1 = value(raw)?,
            "epochs" => t.epochs = value(raw)?,
            "lr" => t.lr = value(raw)?,
            "lr_after_drop" => t.lr_after_drop = value(raw)?,
            "lr_drop_epoch" => t.lr_drop_epoch = value(raw)?,
            "lr_scale" => t.lr_scale = value(raw)?,
            "momentum" => t.momentum = value(raw)?,
            "dampening" => t.dampening = value(raw)?,
            "jitter_scales" => t.jitter_scales = list(raw)?,
            "flip_prob" => t.flip_prob = value(raw)?,
            "min_proposal_side" => t.min_proposal_side = value(raw)?,
            "checkpoint_every" => t.checkpoint_every = value(raw)?,
            "train_conv" => t.train_conv = value(raw)?,
            "test_scales" => e.scales = list(raw)?,
            "test_flips" => e.flips = value(raw)?,
            "min_score" => e.min_score = value(raw)?,
            "nms_iou" => e.nms_iou = value(raw)?,
            "match_iou" => e.match_iou = value(raw)?,
            "ap_mode" => e.ap_mode = value(raw)?,
            "synth_image_size" => s.image_size = value(raw)?,
            "synth_train_images" => s.train_images = value(raw)?,
            "synth_test_images" => s.test_images = value(raw)?,
            "synth_min_objects" => s.min_objects = value(raw)?,
            "synth_max_objects" => s.max_objects = value(raw)?,
            "synth_min_object_size" => s.min_object_size = value(raw)?,
            "synth_max_object_size" => s.max_object_size = value(raw)?,
            "synth_parts" => s.parts = value(raw)?,
            "synth_part_size" => s.part_size = value(raw)?,
            "synth_background" => s.background = value(raw)?,
            "synth_noise" => s.noise = value(raw)?,
            "synth_jittered_gt" => s.jittered_gt = value(raw)?,
            "synth_part_proposals" => s.part_proposals = value(raw)?,
            "synth_sub_proposals" => s.sub_proposals = value(raw)?,
            "synth_random_proposals" => s.random_proposals = value(raw)?,
            "synth_window_sizes" => s.window_sizes = list(raw)?,
            "synth_window_step" => s.window_step = value(raw)?,
            "data_dir" => p.data_dir = raw.into(),
            "train_manifest" => p.train_manifest = raw.into(),
            "test_manifest" => p.test_manifest = raw.into(),
            "run_dir" => p.run_dir = raw.into(),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        let m = &t.model;
        let s = &self.synth;
        let e = &self.eval;
        let p = &self.paths;
        match key {
            "seed" => self.seed.to_string(),
            "head" => m.head.to_string(),
            "classes" => m.classes.to_string(),
            "pool_ratio" => m.pool.ratio.to_string(),
            "pool_grid" => m.pool.grid.to_string(),
            "trunk_width" => m.trunk_width.to_string(),
            "features" => if self.precomputed_selected { "precomputed" } else { "conv" }.into(),
            "conv_in_channels" => self.conv.in_channels.to_string(),
            "conv_channels" => show_list(&self.conv.channels),
            "conv_strides" => show_list(&self.conv.strides),
            "feature_channels" => self.precomputed.0.to_string(),
            "feature_stride" => self.precomputed.1.to_string(),
            "epochs" => t.epochs.to_string(),
            "lr" => t.lr.to_string(),
            "lr_after_drop" => t.lr_after_drop.to_string(),
            "lr_drop_epoch" => t.lr_drop_epoch.to_string(),
            "lr_scale" => t.lr_scale.to_string(),
            "momentum" => t.momentum.to_string(),
            "dampening" => t.dampening.to_string(),
            "jitter_scales" => show_list(&t.jitter_scales),
            "flip_prob" => t.flip_prob.to_string(),
            "min_proposal_side" => t.min_proposal_side.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "train_conv" => t.train_conv.to_string(),
            "test_scales" => show_list(&e.scales),
            "test_flips" => e.flips.to_string(),
            "min_score" => e.min_score.to_string(),
            "nms_iou" => e.nms_iou.to_string(),
            "match_iou" => e.match_iou.to_string(),
            "ap_mode" => e.ap_mode.to_string(),
            "synth_image_size" => s.image_size.to_string(),
            "synth_train_images" => s.train_images.to_string(),
            "synth_test_images" => s.test_images.to_string(),
            "synth_min_objects" => s.min_objects.to_string(),
            "synth_max_objects" => s.max_objects.to_string(),
            "synth_min_object_size" => s.min_object_size.to_string(),
            "synth_max_object_size" => s.max_object_size.to_string(),
            "synth_parts" => s.parts.to_string(),
            "synth_part_size" => s.part_size.to_string(),
            "synth_background" => s.background.to_string(),
            "synth_noise" => s.noise.to_string(),
            "synth_jittered_gt" => s.jittered_gt.to_string(),
            "synth_part_proposals" => s.part_proposals.to_string(),
            "synth_sub_proposals" => s.sub_proposals.to_string(),
            "synth_random_proposals" => s.random_proposals.to_string(),
            "synth_window_sizes" => show_list(&s.window_sizes),
            "synth_window_step" => s.window_step.to_string(),
            "data_dir" => p.data_dir.display().to_string(),
            "train_manifest" => p.train_manifest.display().to_string(),
            "test_manifest" => p.test_manifest.display().to_string(),
            "run_dir" => p.run_dir.display().to_string(),
            _ => unreachable!("key table and getter disagree on `{key}`"),
        }
    }

    /// Parses `text` on top of the defaults. `origin` only labels errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::parse(origin, i + 1, msg);
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, val) = (key.trim(), val.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("key `{key}` given twice")));
            }
            cfg.set(key, val).map_err(|m| err(format!("key `{key}`: {m}")))?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync();
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        let e = &self.eval;
        if e.scales.is_empty() || e.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config {
                key: "test_scales".into(),
                msg: "need a non-empty list of positive numbers".into(),
            });
        }
        for (key, v) in [("nms_iou", e.nms_iou), ("match_iou", e.match_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config {
                    key: key.into(),
                    msg: format!("{v} is not in [0, 1]"),
                });
            }
        }
        if !e.min_score.is_finite() {
            return Err(Error::Config {
                key: "min_score".into(),
                msg: "must be finite".into(),
            });
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line.
    pub fn render(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Writes [`EFFECTIVE_CONFIG`] into `dir`.
    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("t.conf"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse("# nothing\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.model.head, HeadKind::ContrastiveS);
        assert_eq!(cfg.train.model.pool, PoolSettings { grid: 6, ratio: 1.8 });
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.dampening, 0.0);
        assert_eq!(cfg.eval.min_score, 1e-4);
        assert_eq!(cfg.eval.nms_iou, 0.4);
        assert_eq!(cfg.synth.train_images, 200);
        assert_eq!(cfg.synth.seed, 7);
    }

    #[test]
    fn render_round_trips_and_lists_every_key() {
        let cfg = parse("head = baseline\nlr_scale = 123.5\nconv_channels = 4,8\nconv_strides = 2, 2\nseed = 11").unwrap();
        let text = cfg.render();
        assert_eq!(text.lines().count(), KEYS.len());
        for ((k, _, _), line) in KEYS.iter().zip(text.lines()) {
            assert!(line.starts_with(&format!("{k} = ")), "{line}");
        }
        assert_eq!(parse(&text).unwrap(), cfg);
        assert_eq!(cfg.synth.seed, 11);
        assert_eq!(cfg.train.seed, 11);
    }

    #[test]
    fn defaults_table_matches_rendered_defaults() {
        let cfg = RunConfig::default();
        for (k, d, _) in KEYS {
            let mut one = RunConfig::bare();
            one.set(k, d).unwrap();
            assert_eq!(one.get(k), cfg.get(k), "{k}");
        }
    }

    #[test]
    fn errors_name_the_line() {
        let msg = parse("seed = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(msg.contains("t.conf:2") && msg.contains("bogus"), "{msg}");
        let msg = parse("epochs = many").unwrap_err().to_string();
        assert!(msg.contains(":1") && msg.contains("epochs"), "{msg}");
        assert!(parse("epochs 3").is_err());
        assert!(parse("seed = 1\nseed = 2").unwrap_err().to_string().contains("twice"));
        assert!(parse("head = fancy").is_err());
        assert!(parse("features = magic").is_err());
    }

    #[test]
    fn invalid_values_are_rejected_after_parsing() {
        assert!(parse("momentum = 1.5").is_err());
        assert!(parse("nms_iou = 2").is_err());
        assert!(parse("test_scales = 0").is_err());
        assert!(parse("conv_strides = 2, 2").is_err());
    }

    #[test]
    fn precomputed_features_use_their_own_keys() {
        let cfg = parse("features = precomputed\nfeature_channels = 5\nfeature_stride = 16").unwrap();
        assert_eq!(cfg.train.model.features, FeatureSource::Precomputed { channels: 5, stride: 16 });
        assert!(cfg.render().contains("features = precomputed"));
    }

    #[test]
    fn seed_override_reaches_every_consumer() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(9);
        assert_eq!((cfg.train.seed, cfg.synth.seed), (9, 9));
        assert!(cfg.render().starts_with("seed = 9\n"));
    }
}
