use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wsloc::config::RunConfig;
use wsloc::dataio::{load_model_input, synth_generate, DatasetManifest};
use wsloc::evaluation::{
    ap_row, class_names_or_default, corloc_row, detections_from_scores, read_detections, render_sweep,
    score_dataset, score_sweep, top_boxes, write_detections, GroundTruthSet, ResultsTable,
};
use wsloc::geometry::{context_outer, frame_inner, BBox};
use wsloc::model::checkpoint::load_checkpoint;
use wsloc::model::Model;
use wsloc::pooling::{pool_box, PoolKind};
use wsloc::training::train;
use wsloc::{gradcheck, Error, Result};

pub const DETECTIONS_FILE: &str = "detections.csv";
pub const TOP_BOXES_FILE: &str = "top_boxes.csv";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Parser)]
#[command(name = "wsloc", version, about = "Weakly supervised object localization from image-level labels")]
struct Cli {
    /// Run configuration (`key = value` lines); built-in defaults otherwise.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; each command has its own default.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic shapes corpus.
    Synth,
    /// Train from image-level labels; writes logs and checkpoints.
    Train {
        /// Training manifest; defaults to `train_manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score every proposal; writes detections and per-class top boxes.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images to score; defaults to `test_manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// AP from detections and CorLoc from top boxes, against ground truth.
    Eval(EvalArgs),
    /// Finite-difference gradient check of every differentiable block.
    Gradcheck,
    /// Pooled ROI, context and frame grids for one box.
    PoolDump {
        /// Raster, or `.cltf` feature map for precomputed-feature models.
        #[arg(long)]
        image: PathBuf,
        /// `x1,y1,x2,y2` in image pixels.
        #[arg(long = "box", value_parser = parse_box)]
        bbox: BBox,
        /// Uses this model's features; a freshly initialized one otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Localization branch outputs over square boxes of growing size.
    ScoreSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `cx,cy` in image pixels.
        #[arg(long, value_parser = parse_pair)]
        center: (f64, f64),
        #[arg(long)]
        class: usize,
        /// Comma-separated box sides; defaults to 8, 12, ... up to the image side.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<f64>,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Detections CSV scored for AP.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Ground truth for AP; defaults to `test_manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Top-box CSV scored for CorLoc.
    #[arg(long)]
    top_boxes: Option<PathBuf>,
    /// Ground truth for CorLoc; defaults to `train_manifest`.
    #[arg(long)]
    corloc_manifest: Option<PathBuf>,
}

fn parse_floats(s: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated numbers"));
    }
    Ok(v)
}

fn parse_box(s: &str) -> std::result::Result<BBox, String> {
    let v = parse_floats(s, 4)?;
    BBox::new(v[0], v[1], v[2], v[3]).ok_or_else(|| "box needs x1 < x2 and y1 < y2".into())
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let v = parse_floats(s, 2)?;
    Ok((v[0], v[1]))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Output directory: `--out`, else `fallback`; created, with the effective config inside.
fn prepare_out(cfg: &RunConfig, out: Option<&Path>, fallback: &Path) -> Result<PathBuf> {
    let dir = out.unwrap_or(fallback).to_path_buf();
    create_dir(&dir)?;
    cfg.write_effective(&dir)?;
    Ok(dir)
}

fn ground_truth(manifest: &Path, classes: usize) -> Result<(GroundTruthSet, Vec<String>)> {
    let m = DatasetManifest::load(manifest)?;
    let gts = GroundTruthSet::from_images(&m.ground_truth(classes)?, classes)?;
    Ok((gts, class_names_or_default(m.class_names(), classes)))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let out = cli.out.as_deref();
    match cli.cmd {
        Cmd::Synth => {
            let dir = prepare_out(&cfg, out, &cfg.paths.data_dir)?;
            let s = synth_generate(&cfg.synth, &dir)?;
            println!(
                "{} images, {:.1} proposals per image, positives per class {:?}",
                s.images, s.mean_proposals, s.positives_per_class
            );
            println!("{}", s.train_manifest.display());
            println!("{}", s.test_manifest.display());
        }
        Cmd::Train { manifest } => {
            let manifest = manifest.unwrap_or_else(|| cfg.paths.train_manifest.clone());
            let data = DatasetManifest::load(&manifest)?.weak();
            let dir = prepare_out(&cfg, out, &cfg.paths.run_dir)?;
            let outcome = train(&data, &cfg.train, Some(&dir))?;
            if let Some(last) = outcome.epoch_losses.last() {
                println!("final epoch mean loss {last:.6}");
            }
            println!("{}", dir.display());
        }
        Cmd::Detect { checkpoint, manifest } => {
            let model = load_checkpoint(&checkpoint)?;
            let manifest = manifest.unwrap_or_else(|| cfg.paths.test_manifest.clone());
            let data = DatasetManifest::load(&manifest)?.weak();
            let dir = prepare_out(&cfg, out, &cfg.paths.run_dir.join("detect"))?;
            let scores = score_dataset(&model, &data, &cfg.eval.settings(), cfg.train.min_proposal_side)?;
            let dets = detections_from_scores(&scores, cfg.eval.min_score, cfg.eval.nms_iou);
            let tops = top_boxes(&scores);
            write_detections(&dir.join(DETECTIONS_FILE), &dets)?;
            write_detections(&dir.join(TOP_BOXES_FILE), &tops)?;
            info!("{} detections over {} images", dets.len(), scores.len());
            println!("{}", dir.join(DETECTIONS_FILE).display());
            println!("{}", dir.join(TOP_BOXES_FILE).display());
        }
        Cmd::Eval(args) => {
            if args.detections.is_none() && args.top_boxes.is_none() {
                return Err(Error::Invalid("eval needs --detections, --top-boxes or both".into()));
            }
            let classes = cfg.train.model.classes;
            let mut names = None;
            let mut rows = Vec::new();
            if let Some(path) = &args.detections {
                let m = args.manifest.clone().unwrap_or_else(|| cfg.paths.test_manifest.clone());
                let (gts, n) = ground_truth(&m, classes)?;
                rows.push(("AP", ap_row(&read_detections(path)?, &gts, cfg.eval.match_iou, cfg.eval.ap_mode)));
                names = Some(n);
            }
            if let Some(path) = &args.top_boxes {
                let m = args.corloc_manifest.clone().unwrap_or_else(|| cfg.paths.train_manifest.clone());
                let (gts, n) = ground_truth(&m, classes)?;
                rows.push(("CorLoc", corloc_row(&read_detections(path)?, &gts, cfg.eval.match_iou)));
                names.get_or_insert(n);
            }
            let mut table = ResultsTable::new(names.unwrap_or_default());
            for (metric, row) in rows {
                table.push(metric, row);
            }
            let dir = prepare_out(&cfg, out, &cfg.paths.run_dir.join("eval"))?;
            let csv = table.render_csv();
            write_file(&dir.join(RESULTS_FILE), &csv)?;
            print!("{csv}");
        }
        Cmd::Gradcheck => {
            let report = gradcheck::run_all(cfg.seed)?;
            let text = report.to_string();
            if let Some(dir) = out {
                create_dir(dir)?;
                cfg.write_effective(dir)?;
                write_file(&dir.join("gradcheck.csv"), &text)?;
            }
            print!("{text}");
            let ok = report.passed(gradcheck::TOLERANCE);
            println!(
                "{} max relative error {:.3e} (tolerance {:e})",
                if ok { "PASS" } else { "FAIL" },
                report.max_rel_err(),
                gradcheck::TOLERANCE
            );
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::PoolDump { image, bbox, checkpoint } => {
            let model = match checkpoint {
                Some(p) => load_checkpoint(&p)?,
                None => Model::new(cfg.train.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
            };
            let input = load_model_input(&image, &model.config.features)?;
            let fmap = model.features(&input)?;
            let pool = model.config.pool;
            let mut csv = String::from("kind,channel,row,col,value\n");
            for kind in [PoolKind::Roi, PoolKind::Context, PoolKind::Frame] {
                let p = pool_box(&fmap, &bbox, kind, pool.ratio, pool.grid)?;
                for ((c, i, j), v) in p.values.indexed_iter() {
                    let _ = writeln!(csv, "{},{c},{i},{j},{v}", kind.name());
                }
            }
            let dir = prepare_out(&cfg, out, &cfg.paths.run_dir.join("pool_dump"))?;
            let (outer, inner) = (context_outer(&bbox, pool.ratio), frame_inner(&bbox, pool.ratio));
            let boxes = format!(
                "region,x1,y1,x2,y2\nroi,{},{},{},{}\ncontext_outer,{},{},{},{}\nframe_inner,{},{},{},{}\n",
                bbox.x1, bbox.y1, bbox.x2, bbox.y2, outer.x1, outer.y1, outer.x2, outer.y2, inner.x1, inner.y1, inner.x2, inner.y2
            );
            write_file(&dir.join("pooled.csv"), &csv)?;
            write_file(&dir.join("regions.csv"), &boxes)?;
            println!("{}", dir.join("pooled.csv").display());
        }
        Cmd::ScoreSweep { checkpoint, image, center, class, sizes } => {
            let model = load_checkpoint(&checkpoint)?;
            let input = load_model_input(&image, &model.config.features)?;
            let sizes = if sizes.is_empty() {
                let side = match &input {
                    wsloc::model::ModelInput::Image(a) => a.dim().1.max(a.dim().2),
                    wsloc::model::ModelInput::Features(f) => f.dims().1.max(f.dims().2) * f.stride,
                };
                (2..=side / 4).map(|k| (4 * k) as f64).collect()
            } else {
                sizes
            };
            let rows = score_sweep(&model, &input, center, class, &sizes)?;
            let dir = prepare_out(&cfg, out, &cfg.paths.run_dir.join("score_sweep"))?;
            write_file(&dir.join("sweep.csv"), &render_sweep(&rows))?;
            println!("{}", dir.join("sweep.csv").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
