//! Differentiable two-stream localization model.

pub mod checkpoint;
pub mod heads;
pub mod linear;
pub mod network;
pub mod scores;

use ndarray::{Array1, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{ConvCache, ConvConfig, ConvStack, FeatureMap};
use crate::geometry::BBox;

pub use heads::{HeadKind, LocHead, LocalizationOutput};
pub use linear::Linear;
pub use network::{ForwardCache, ForwardOutput, Network, PoolSettings, Trunk};
pub use scores::{hinge_loss, hinge_loss_grad, image_scores, softmax_over_rois, LabelVector, ScoreMatrix};

pub const DEFAULT_TRUNK_WIDTH: usize = 256;

/// Where feature maps come from.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    /// Trainable conv stack applied to raster images.
    Conv(ConvConfig),
    /// Feature maps loaded from disk with the given channel count and stride.
    Precomputed { channels: usize, stride: usize },
}

impl FeatureSource {
    pub fn channels(&self) -> usize {
        match self {
            FeatureSource::Conv(c) => c.out_channels(),
            FeatureSource::Precomputed { channels, .. } => *channels,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            FeatureSource::Conv(c) => c.total_stride(),
            FeatureSource::Precomputed { stride, .. } => *stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub classes: usize,
    pub pool: PoolSettings,
    pub trunk_width: usize,
    pub features: FeatureSource,
}

impl ModelConfig {
    pub fn trunk_input(&self) -> usize {
        self.features.channels() * self.pool.grid * self.pool.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.trunk_width == 0 || self.pool.grid == 0 {
            return Err(Error::Invalid("classes, trunk width and pooling grid must be positive".into()));
        }
        if !(self.pool.ratio.is_finite() && self.pool.ratio > 0.0) {
            return Err(Error::Invalid("context ratio must be positive".into()));
        }
        match &self.features {
            FeatureSource::Conv(c) => c.validate(),
            FeatureSource::Precomputed { channels, stride } if *channels == 0 || *stride == 0 => {
                Err(Error::Invalid("precomputed features need positive channels and stride".into()))
            }
            FeatureSource::Precomputed { .. } => Ok(()),
        }
    }
}

/// All trainable tensors; also used as the gradient and velocity container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub conv: Option<ConvStack>,
    pub net: Network,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let conv = match &cfg.features {
            FeatureSource::Conv(c) => Some(ConvStack::zeros(c)?),
            FeatureSource::Precomputed { .. } => None,
        };
        let net = Network::zeros(cfg.head, cfg.trunk_input(), cfg.trunk_width, cfg.classes);
        Ok(ModelParams { conv, net })
    }

    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let conv = match &cfg.features {
            FeatureSource::Conv(c) => Some(ConvStack::init(c, rng)?),
            FeatureSource::Precomputed { .. } => None,
        };
        let net = Network::init(cfg.head, cfg.trunk_input(), cfg.trunk_width, cfg.classes, rng);
        Ok(ModelParams { conv, net })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `(name, shape, values)` for every tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        if let Some(conv) = &self.conv {
            for (i, l) in conv.layers.iter().enumerate() {
                out.push((format!("conv.{i}.weight"), l.weight.shape().to_vec(), slice(l.weight.as_slice())));
                out.push((format!("conv.{i}.bias"), l.bias.shape().to_vec(), slice(l.bias.as_slice())));
            }
        }
        for (name, l) in self.net.layers() {
            out.push((format!("{name}.weight"), l.weight.shape().to_vec(), slice(l.weight.as_slice())));
            out.push((format!("{name}.bias"), l.bias.shape().to_vec(), slice(l.bias.as_slice())));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        if let Some(conv) = &mut self.conv {
            for (i, l) in conv.layers.iter_mut().enumerate() {
                out.push((format!("conv.{i}.weight"), slice_mut(l.weight.as_slice_mut())));
                out.push((format!("conv.{i}.bias"), slice_mut(l.bias.as_slice_mut())));
            }
        }
        for (name, l) in self.net.layers_mut() {
            out.push((format!("{name}.weight"), slice_mut(l.weight.as_slice_mut())));
            out.push((format!("{name}.bias"), slice_mut(l.bias.as_slice_mut())));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }
}

fn slice(s: Option<&[f64]>) -> &[f64] {
    s.expect("parameters are always standard layout")
}

fn slice_mut(s: Option<&mut [f64]>) -> &mut [f64] {
    s.expect("parameters are always standard layout")
}

/// Model input: a raster for the conv stack, or a precomputed feature map.
#[derive(Clone, Debug)]
pub enum ModelInput {
    Image(Array3<f64>),
    Features(FeatureMap),
}

/// Loss, outputs and gradients of one training example.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub loss: f64,
    pub output: ForwardOutput,
    pub grads: ModelParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Model { config, params })
    }

    pub fn head(&self) -> HeadKind {
        self.config.head
    }

    fn feature_map(&self, input: &ModelInput, keep_cache: bool) -> Result<(FeatureMap, Option<ConvCache>)> {
        match (input, &self.params.conv) {
            (ModelInput::Image(img), Some(conv)) => {
                let (fm, cache) = conv.forward(img)?;
                Ok((fm, keep_cache.then_some(cache)))
            }
            (ModelInput::Features(fm), None) => {
                if fm.channels() != self.config.features.channels() {
                    return Err(Error::Shape(format!(
                        "feature map has {} channels, model expects {}",
                        fm.channels(),
                        self.config.features.channels()
                    )));
                }
                Ok((fm.clone(), None))
            }
            (ModelInput::Image(_), None) => Err(Error::Invalid(
                "model was configured for precomputed features but received an image".into(),
            )),
            (ModelInput::Features(_), Some(_)) => Err(Error::Invalid(
                "model has a conv stack but received a precomputed feature map".into(),
            )),
        }
    }

    /// The feature map the network pools from.
    pub fn features(&self, input: &ModelInput) -> Result<FeatureMap> {
        Ok(self.feature_map(input, false)?.0)
    }

    pub fn forward(&self, input: &ModelInput, rois: &[BBox]) -> Result<ForwardOutput> {
        let (fm, _) = self.feature_map(input, false)?;
        Ok(self.params.net.forward(&fm, rois, &self.config.pool)?.0)
    }

    /// Forward, hinge loss and exact gradients for one labelled image.
    pub fn step(&self, input: &ModelInput, rois: &[BBox], labels: &LabelVector, train_conv: bool) -> Result<StepResult> {
        if labels.len() != self.config.classes {
            return Err(Error::Shape(format!(
                "{} labels for a {}-class model",
                labels.len(),
                self.config.classes
            )));
        }
        let want_conv = train_conv && self.params.conv.is_some();
        let (fm, conv_cache) = self.feature_map(input, want_conv)?;
        let (output, cache) = self.params.net.forward(&fm, rois, &self.config.pool)?;
        let loss = hinge_loss(output.image_scores.view(), labels)?;
        let d_f: Array1<f64> = hinge_loss_grad(output.image_scores.view(), labels)?;
        let mut grads = self.params.zeros_like();
        let g_fmap = self
            .params
            .net
            .backward(&cache, &output, d_f.view(), &mut grads.net, want_conv)?;
        if let (Some(g_fmap), Some(conv), Some(cc)) = (g_fmap, &self.params.conv, conv_cache) {
            let (g_conv, _) = conv.backward(&cc, &g_fmap)?;
            grads.conv = Some(g_conv);
        }
        Ok(StepResult { loss, output, grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(head: HeadKind) -> ModelConfig {
        ModelConfig {
            head,
            classes: 2,
            pool: PoolSettings { grid: 2, ratio: 1.8 },
            trunk_width: 6,
            features: FeatureSource::Conv(ConvConfig {
                in_channels: 1,
                channels: vec![3, 4],
                strides: vec![2, 2],
            }),
        }
    }

    #[test]
    fn tensor_names_follow_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::new(small_config(HeadKind::ContrastiveS), &mut rng).unwrap();
        let names: Vec<String> = m.params.tensors().into_iter().map(|t| t.0).collect();
        assert_eq!(
            names,
            [
                "conv.0.weight", "conv.0.bias", "conv.1.weight", "conv.1.bias", "trunk.fc6.weight",
                "trunk.fc6.bias", "trunk.fc7.weight", "trunk.fc7.bias", "cls.weight", "cls.bias",
                "loc.shared.weight", "loc.shared.bias",
            ]
        );
    }

    #[test]
    fn step_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Model::new(small_config(HeadKind::Additive), &mut rng).unwrap();
        let img = Array3::from_shape_fn((1, 32, 32), |(_, r, c)| ((r * 7 + c * 3) % 11) as f64 / 11.0);
        let rois = [BBox::new(0.0, 0.0, 24.0, 24.0).unwrap(), BBox::new(6.0, 8.0, 30.0, 31.0).unwrap()];
        let y = LabelVector::new(vec![1, -1]).unwrap();
        let a = m.step(&ModelInput::Image(img.clone()), &rois, &y, true).unwrap();
        let b = m.step(&ModelInput::Image(img), &rois, &y, true).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn input_kind_must_match_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Model::new(small_config(HeadKind::Baseline), &mut rng).unwrap();
        let fm = FeatureMap::new(Array3::zeros((4, 4, 4)), 4);
        let rois = [BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()];
        assert!(m.forward(&ModelInput::Features(fm), &rois).is_err());
    }
}
