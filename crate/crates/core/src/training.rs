//! SGD with momentum over single images, with scale and flip jittering.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{load_labels, load_proposals, InputSource, WeakDataset};
use crate::error::{Error, Result};
use crate::geometry::{filter_proposals, BBox, DEFAULT_MIN_PROPOSAL_SIDE};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{LabelVector, Model, ModelConfig, ModelParams};

pub const DEFAULT_JITTER_SCALES: [f64; 5] = [0.7, 0.85, 1.0, 1.2, 1.44];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub lr_after_drop: f64,
    /// Last epoch (1-based) that uses `lr`.
    pub lr_drop_epoch: usize,
    /// Multiplies both learning rates.
    pub lr_scale: f64,
    pub momentum: f64,
    pub dampening: f64,
    pub jitter_scales: Vec<f64>,
    pub flip_prob: f64,
    pub min_proposal_side: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub train_conv: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            epochs: 30,
            lr: 1e-5,
            lr_after_drop: 1e-6,
            lr_drop_epoch: 10,
            lr_scale: 1.0,
            momentum: 0.9,
            dampening: 0.0,
            jitter_scales: DEFAULT_JITTER_SCALES.to_vec(),
            flip_prob: 0.5,
            min_proposal_side: DEFAULT_MIN_PROPOSAL_SIDE,
            seed: 7,
            checkpoint_every: 0,
            train_conv: true,
        }
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = if epoch <= self.lr_drop_epoch { self.lr } else { self.lr_after_drop };
        base * self.lr_scale
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Invalid(format!("training: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        let lrs = [self.lr, self.lr_after_drop, self.lr_scale];
        if lrs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("learning rates and scale must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.dampening) {
            return bad("momentum must be in [0, 1) and dampening in [0, 1]");
        }
        if self.jitter_scales.is_empty() || self.jitter_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("jitter scales must be a non-empty list of positive numbers");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip probability must be in [0, 1]");
        }
        Ok(())
    }
}

/// Momentum buffers plus the step and epoch counters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: ModelParams,
    pub steps: u64,
    pub epoch: usize,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        OptimState {
            velocity: params.zeros_like(),
            steps: 0,
            epoch: 0,
        }
    }
}

/// `v <- momentum * v + (1 - dampening) * g; p <- p - lr * v`, tensor by tensor.
/// Non-finite gradients abort before anything is modified.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimState,
    lr: f64,
    momentum: f64,
    dampening: f64,
) -> Result<()> {
    let g = grads.tensors();
    let p_shapes: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    let v_shapes: Vec<(String, Vec<usize>)> = state.velocity.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    let g_shapes: Vec<(String, Vec<usize>)> = g.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect();
    if p_shapes != g_shapes || p_shapes != v_shapes {
        return Err(Error::Shape("parameter, gradient and velocity tensors differ".into()));
    }
    if let Some((name, _, _)) = g.iter().find(|(_, _, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of `{name}` at step {}", state.steps + 1)));
    }
    for (((_, p), (_, v)), (_, _, gv)) in params
        .tensors_mut()
        .into_iter()
        .zip(state.velocity.tensors_mut())
        .zip(g.iter())
    {
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(gv.iter()) {
            *vi = momentum * *vi + (1.0 - dampening) * gi;
            *pi -= lr * *vi;
        }
    }
    state.steps += 1;
    if !params.is_finite() {
        return Err(Error::NonFinite(format!("parameters after step {}", state.steps)));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub scale: f64,
    pub flip: bool,
}

/// Uniform choice over `scales`, flip with probability `flip_prob`.
pub fn sample_jitter<R: Rng>(rng: &mut R, scales: &[f64], flip_prob: f64) -> Jitter {
    let scale = *scales.choose(rng).expect("non-empty scale list");
    Jitter {
        scale,
        flip: rng.gen_bool(flip_prob),
    }
}

struct TrainExample {
    source: InputSource,
    labels: LabelVector,
    rois: Vec<BBox>,
}

fn load_examples(data: &WeakDataset, cfg: &TrainConfig) -> Result<(Vec<TrainExample>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for s in &data.samples {
        let rois = filter_proposals(&load_proposals(&s.proposals)?, cfg.min_proposal_side);
        if rois.is_empty() {
            warn!("skipping `{}`: no proposal survives the size filter", s.id);
            skipped += 1;
            continue;
        }
        let labels = load_labels(&s.labels, cfg.model.classes)?;
        let source = InputSource::load(&s.image, &cfg.model.features)?;
        out.push(TrainExample { source, labels, rois });
    }
    if out.is_empty() {
        return Err(Error::Invalid("no training image has a surviving proposal".into()));
    }
    Ok((out, skipped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub steps: Vec<StepLog>,
    pub epoch_losses: Vec<f64>,
    /// Images skipped for having no usable proposal.
    pub skipped: usize,
    pub checkpoints: Vec<PathBuf>,
}

pub const STEP_LOG_FILE: &str = "loss_log.csv";
pub const EPOCH_LOG_FILE: &str = "epoch_loss.csv";
pub const FINAL_CHECKPOINT: &str = "model.cltf";

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn render_step_log(steps: &[StepLog]) -> String {
    let mut s = String::from("epoch,step,loss\n");
    for l in steps {
        let _ = writeln!(s, "{},{},{}", l.epoch, l.step, l.loss);
    }
    s
}

pub fn render_epoch_log(losses: &[f64], cfg: &TrainConfig) -> String {
    let mut s = String::from("epoch,mean_loss,lr\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", i + 1, l, cfg.lr_at(i + 1));
    }
    s
}

/// Trains from scratch. With `out_dir`, writes the loss logs and checkpoints there.
pub fn train(data: &WeakDataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (examples, skipped) = load_examples(data, cfg)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order_rng = init_rng.clone();
    order_rng.set_stream(1);
    let mut jitter_rng = init_rng.clone();
    jitter_rng.set_stream(2);
    let mut model = Model::new(cfg.model.clone(), &mut init_rng)?;
    train_model(&mut model, &examples, cfg, &mut order_rng, &mut jitter_rng, out_dir).map(
        |(steps, epoch_losses, checkpoints)| TrainOutcome {
            model,
            steps,
            epoch_losses,
            skipped,
            checkpoints,
        },
    )
}

type LoopResult = (Vec<StepLog>, Vec<f64>, Vec<PathBuf>);

fn train_model(
    model: &mut Model,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    order_rng: &mut ChaCha8Rng,
    jitter_rng: &mut ChaCha8Rng,
    out_dir: Option<&Path>,
) -> Result<LoopResult> {
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut state = OptimState::new(&model.params);
    let mut steps = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        let lr = cfg.lr_at(epoch);
        order.shuffle(order_rng);
        let mut sum = 0.0;
        for &i in &order {
            let j = sample_jitter(jitter_rng, &cfg.jitter_scales, cfg.flip_prob);
            let (input, rois) = examples[i].source.view(&examples[i].rois, j.scale, j.flip);
            let r = model.step(&input, &rois, &examples[i].labels, cfg.train_conv)?;
            sgd_step(&mut model.params, &r.grads, &mut state, lr, cfg.momentum, cfg.dampening)?;
            sum += r.loss;
            steps.push(StepLog {
                epoch,
                step: state.steps,
                loss: r.loss,
            });
        }
        let mean = sum / examples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("mean loss of epoch {epoch}")));
        }
        info!("epoch {epoch}/{}: mean loss {mean:.6}, lr {lr:e}", cfg.epochs);
        epoch_losses.push(mean);
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
                let p = d.join(format!("checkpoint_epoch{epoch:03}.cltf"));
                save_checkpoint(model, &p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(d) = out_dir {
        let p = d.join(FINAL_CHECKPOINT);
        save_checkpoint(model, &p)?;
        checkpoints.push(p);
        write_file(&d.join(STEP_LOG_FILE), &render_step_log(&steps))?;
        write_file(&d.join(EPOCH_LOG_FILE), &render_epoch_log(&epoch_losses, cfg))?;
    }
    Ok((steps, epoch_losses, checkpoints))
}
