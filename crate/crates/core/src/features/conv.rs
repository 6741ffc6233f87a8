//! Small 3x3 convolutional stack (same padding, ReLU) via im2col.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::model::linear::he_uniform;

/// Subtracted from every input value before padding, so `[0, 1]` rasters
/// enter centred and padded cells read as mid-grey.
pub const INPUT_OFFSET: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvConfig {
    pub in_channels: usize,
    /// Output channels per layer.
    pub channels: Vec<usize>,
    /// Stride per layer, each 1 or 2.
    pub strides: Vec<usize>,
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig {
            in_channels: 1,
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
        }
    }
}

impl ConvConfig {
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Invalid("conv stack needs at least one layer".into()));
        }
        if self.channels.len() != self.strides.len() {
            return Err(Error::Invalid(format!(
                "conv stack has {} channel entries but {} strides",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.strides.iter().any(|s| !matches!(s, 1 | 2)) {
            return Err(Error::Invalid("conv strides must be 1 or 2".into()));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Invalid("conv channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `out_channels x (in_channels * 9)`, taps ordered `(ci, ky, kx)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

impl ConvLayer {
    pub fn zeros(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        ConvLayer {
            weight: Array2::zeros((out_ch, in_ch * 9)),
            bias: Array1::zeros(out_ch),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }
}

fn out_len(len: usize, stride: usize) -> usize {
    // kernel 3, padding 1
    (len - 1) / stride + 1
}

fn im2col(input: &Array3<f64>, stride: usize) -> (Array2<f64>, usize, usize) {
    let (cin, h, w) = input.dim();
    let (ho, wo) = (out_len(h, stride), out_len(w, stride));
    let mut col = Array2::<f64>::zeros((cin * 9, ho * wo));
    let src = input.as_slice().expect("standard layout");
    let dst = col.as_slice_mut().expect("fresh array");
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[row + oy * wo + ox] = src[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

fn col2im(col: &Array2<f64>, dims: (usize, usize, usize), stride: usize) -> Array3<f64> {
    let (cin, h, w) = dims;
    let (ho, wo) = (out_len(h, stride), out_len(w, stride));
    let mut out = Array3::<f64>::zeros(dims);
    let src = col.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("fresh array");
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[dst_row + ix as usize] += src[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Intermediates retained for [`ConvStack::backward`].
#[derive(Clone, Debug)]
pub struct ConvCache {
    input_dims: Vec<(usize, usize, usize)>,
    cols: Vec<Array2<f64>>,
    outputs: Vec<Array3<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

impl ConvStack {
    pub fn zeros(cfg: &ConvConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.channels.len());
        let mut cin = cfg.in_channels;
        for (&cout, &stride) in cfg.channels.iter().zip(&cfg.strides) {
            layers.push(ConvLayer::zeros(cin, cout, stride));
            cin = cout;
        }
        Ok(ConvStack { layers })
    }

    pub fn init<R: Rng>(cfg: &ConvConfig, rng: &mut R) -> Result<Self> {
        let mut stack = ConvStack::zeros(cfg)?;
        for layer in &mut stack.layers {
            let fan_in = layer.in_channels() * 9;
            he_uniform(&mut layer.weight, fan_in, rng);
        }
        Ok(stack)
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(ConvLayer::out_channels).unwrap_or(0)
    }

    /// Zero-extends `image` on the bottom/right so both sides divide the total stride.
    pub fn pad_to_stride(&self, image: &Array3<f64>) -> Array3<f64> {
        let s = self.total_stride();
        let (c, h, w) = image.dim();
        let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
        if (ph, pw) == (h, w) {
            return image.as_standard_layout().to_owned();
        }
        let mut out = Array3::zeros((c, ph, pw));
        out.slice_mut(s![.., ..h, ..w]).assign(image);
        out
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<(FeatureMap, ConvCache)> {
        if image.dim().0 != self.in_channels() {
            return Err(Error::Shape(format!(
                "image has {} channels, conv stack expects {}",
                image.dim().0,
                self.in_channels()
            )));
        }
        let mut x = self.pad_to_stride(&image.mapv(|v| v - INPUT_OFFSET));
        let mut cache = ConvCache {
            input_dims: Vec::with_capacity(self.layers.len()),
            cols: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let (col, ho, wo) = im2col(&x, layer.stride);
            let mut z = layer.weight.dot(&col);
            z += &layer.bias.view().insert_axis(Axis(1));
            z.mapv_inplace(|v| v.max(0.0));
            let out = z
                .into_shape_with_order((layer.out_channels(), ho, wo))
                .map_err(|e| Error::Shape(e.to_string()))?;
            cache.input_dims.push(x.dim());
            cache.cols.push(col);
            cache.outputs.push(out.clone());
            x = out;
        }
        Ok((FeatureMap::new(x, self.total_stride()), cache))
    }

    /// Returns parameter gradients (as a stack) and the gradient with respect to the padded input.
    pub fn backward(&self, cache: &ConvCache, grad_out: &Array3<f64>) -> Result<(ConvStack, Array3<f64>)> {
        if cache.outputs.len() != self.layers.len() {
            return Err(Error::NoForwardState);
        }
        let mut grads = ConvStack {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer::zeros(l.in_channels(), l.out_channels(), l.stride))
                .collect(),
        };
        let last = cache.outputs.last().expect("non-empty stack");
        if grad_out.dim() != last.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match conv output {:?}",
                grad_out.dim(),
                last.dim()
            )));
        }
        let mut g = grad_out.to_owned();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.outputs[idx];
            let (cout, ho, wo) = out.dim();
            // ReLU mask
            g.zip_mut_with(out, |gv, &o| {
                if o <= 0.0 {
                    *gv = 0.0;
                }
            });
            let dz = g
                .into_shape_with_order((cout, ho * wo))
                .map_err(|e| Error::Shape(e.to_string()))?;
            grads.layers[idx].weight = dz.dot(&cache.cols[idx].t());
            grads.layers[idx].bias = dz.sum_axis(Axis(1));
            let dcol = layer.weight.t().dot(&dz);
            g = col2im(&dcol, cache.input_dims[idx], layer.stride);
        }
        Ok((grads, g))
    }
}
