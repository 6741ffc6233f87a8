//! PGM/PPM rasters and the scale/flip transforms used for jittering.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageEncoder, ImageReader, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::features::{load_feature_map, FeatureMap};
use crate::geometry::{flip_box, rescale_box, BBox};
use crate::model::{FeatureSource, ModelInput};

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn read_raster(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

/// `(C, H, W)` array in `[0, 1]`; single-channel images stay single-channel,
/// everything else becomes RGB.
pub fn image_to_array(img: &DynamicImage) -> Array3<f64> {
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, r, c)| {
                f64::from(g.get_pixel(c as u32, r as u32)[0]) / 255.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((3, h as usize, w as usize), |(ch, r, c)| {
                f64::from(rgb.get_pixel(c as u32, r as u32)[ch]) / 255.0
            })
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Inverse of [`image_to_array`] up to 8-bit quantization. Accepts 1 or 3 channels.
pub fn array_to_image(a: &Array3<f64>) -> Result<DynamicImage> {
    let (c, h, w) = a.dim();
    match c {
        1 => Ok(DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([quantize(a[[0, y as usize, x as usize]])])
        }))),
        3 => Ok(DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|ch| quantize(a[[ch, y as usize, x as usize]])))
        }))),
        _ => Err(Error::Shape(format!("rasters need 1 or 3 channels, got {c}"))),
    }
}

/// Writes binary PGM (1 channel) or PPM (3 channels).
pub fn write_raster(path: &Path, a: &Array3<f64>) -> Result<()> {
    let img = array_to_image(a)?;
    let subtype = match img {
        DynamicImage::ImageLuma8(_) => PnmSubtype::Graymap(SampleEncoding::Binary),
        _ => PnmSubtype::Pixmap(SampleEncoding::Binary),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(img.as_bytes(), img.width(), img.height(), img.color().into())
        .map_err(|e| image_err(path, e))
}

/// Resizes by `scale` (rounded to whole pixels, at least 1) and optionally
/// mirrors horizontally. Returns the image and the realised `(sx, sy)`.
pub fn jitter_image(img: &DynamicImage, scale: f64, flip: bool) -> (DynamicImage, f64, f64) {
    let (w, h) = (img.width(), img.height());
    let nw = ((f64::from(w) * scale).round() as u32).max(1);
    let nh = ((f64::from(h) * scale).round() as u32).max(1);
    let mut out = if (nw, nh) == (w, h) {
        img.clone()
    } else {
        img.resize_exact(nw, nh, FilterType::Triangle)
    };
    if flip {
        out = match out {
            DynamicImage::ImageLuma8(g) => DynamicImage::ImageLuma8(imageops::flip_horizontal(&g)),
            other => DynamicImage::ImageRgb8(imageops::flip_horizontal(&other.to_rgb8())),
        };
    }
    (out, f64::from(nw) / f64::from(w), f64::from(nh) / f64::from(h))
}

/// A decoded image, or a precomputed feature map, ready for jittered views.
#[derive(Clone, Debug)]
pub enum InputSource {
    Raster(DynamicImage),
    Features(FeatureMap),
}

impl InputSource {
    /// Loads a raster, or a feature map when the file ends in `.cltf`; the
    /// kind must agree with `source`.
    pub fn load(path: &Path, source: &FeatureSource) -> Result<Self> {
        let is_tensor = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("cltf"));
        match (is_tensor, source) {
            (true, FeatureSource::Precomputed { stride, .. }) => Ok(InputSource::Features(load_feature_map(path, *stride)?)),
            (false, FeatureSource::Conv(_)) => Ok(InputSource::Raster(read_raster(path)?)),
            (true, FeatureSource::Conv(_)) => Err(Error::Invalid(format!(
                "{} is a feature map but the model extracts features from images",
                path.display()
            ))),
            (false, FeatureSource::Precomputed { .. }) => Err(Error::Invalid(format!(
                "{} is not a .cltf feature map but the model uses precomputed features",
                path.display()
            ))),
        }
    }

    /// Model input and boxes rescaled by `scale` and optionally flipped.
    /// Feature maps ignore the transform and are returned as stored.
    pub fn view(&self, rois: &[BBox], scale: f64, flip: bool) -> (ModelInput, Vec<BBox>) {
        match self {
            InputSource::Features(fm) => (ModelInput::Features(fm.clone()), rois.to_vec()),
            InputSource::Raster(img) => {
                let (out, sx, sy) = jitter_image(img, scale, flip);
                let w = f64::from(out.width());
                let boxes = rois
                    .iter()
                    .map(|b| {
                        let r = rescale_box(b, sx, sy);
                        if flip {
                            flip_box(&r, w)
                        } else {
                            r
                        }
                    })
                    .collect();
                (ModelInput::Image(image_to_array(&out)), boxes)
            }
        }
    }

    pub fn is_raster(&self) -> bool {
        matches!(self, InputSource::Raster(_))
    }
}

/// Loads a raster, or a precomputed feature map when the file ends in `.cltf`.
pub fn load_model_input(path: &Path, source: &FeatureSource) -> Result<ModelInput> {
    Ok(InputSource::load(path, source)?.view(&[], 1.0, false).0)
}
