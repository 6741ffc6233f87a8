//! Feature extraction: the trainable convolutional stack, feature maps and
//! their on-disk tensor format.

pub mod conv;
pub mod tensor_file;

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry::FeatureGeometry;

pub use conv::{ConvCache, ConvConfig, ConvLayer, ConvStack};
pub use tensor_file::StoredTensor;

/// `C x H x W` activations with the pixel stride of one feature cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: usize) -> Self {
        assert!(stride >= 1, "feature stride must be positive");
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        FeatureMap { data, stride }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn geometry(&self) -> FeatureGeometry {
        let (_, h, w) = self.data.dim();
        FeatureGeometry::new(self.stride, h, w)
    }
}

pub fn save_feature_map(fm: &FeatureMap, path: &Path) -> Result<()> {
    let (c, h, w) = fm.dims();
    let data = fm.data.as_slice().expect("standard layout");
    let t = StoredTensor::from_f64(vec![c, h, w], data)?;
    tensor_file::write_tensor(path, &t)
}

/// Loads a rank-3 CLTF tensor as a feature map of the given pixel stride.
pub fn load_feature_map(path: &Path, stride: usize) -> Result<FeatureMap> {
    let t = tensor_file::read_tensor(path)?;
    feature_map_from_tensor(&t, stride, path)
}

fn feature_map_from_tensor(t: &StoredTensor, stride: usize, path: &Path) -> Result<FeatureMap> {
    if t.dims.len() != 3 {
        return Err(Error::TensorFormat {
            path: path.to_path_buf(),
            msg: format!("feature map must have rank 3, found rank {}", t.dims.len()),
        });
    }
    if t.dims.contains(&0) {
        return Err(Error::TensorFormat {
            path: path.to_path_buf(),
            msg: "feature map dimensions must be positive".into(),
        });
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("feature map {}", path.display())));
    }
    let data = Array3::from_shape_vec((t.dims[0], t.dims[1], t.dims[2]), t.to_f64())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FeatureMap::new(data, stride))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn hand_encoded_fixture() {
        // 2x2x2 tensor holding 0.0, 0.5, ..., 3.5
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CLTF");
        bytes.extend_from_slice(&[1, 0, 0, 0]); // version
        bytes.extend_from_slice(&[3, 0, 0, 0]); // rank
        for _ in 0..3 {
            bytes.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
        }
        let payload: [[u8; 4]; 8] = [
            [0x00, 0x00, 0x00, 0x00], // 0.0
            [0x00, 0x00, 0x00, 0x3f], // 0.5
            [0x00, 0x00, 0x80, 0x3f], // 1.0
            [0x00, 0x00, 0xc0, 0x3f], // 1.5
            [0x00, 0x00, 0x00, 0x40], // 2.0
            [0x00, 0x00, 0x20, 0x40], // 2.5
            [0x00, 0x00, 0x40, 0x40], // 3.0
            [0x00, 0x00, 0x60, 0x40], // 3.5
        ];
        for p in payload {
            bytes.extend_from_slice(&p);
        }
        let dir = tempdir().unwrap();
        let path = dir.path().join("fixture.cltf");
        std::fs::write(&path, &bytes).unwrap();
        let fm = load_feature_map(&path, 8).unwrap();
        assert_eq!(fm.dims(), (2, 2, 2));
        assert_eq!(fm.data[[0, 0, 0]], 0.0);
        assert_eq!(fm.data[[0, 1, 1]], 1.5);
        assert_eq!(fm.data[[1, 0, 1]], 2.5);
        assert_eq!(fm.data[[1, 1, 1]], 3.5);
    }

    #[test]
    fn round_trip_is_exact() {
        let data = Array3::from_shape_fn((3, 4, 5), |(c, r, w)| ((c * 31 + r * 7 + w) as f32 * 0.37 - 4.0) as f64);
        let fm = FeatureMap::new(data, 8);
        let dir = tempdir().unwrap();
        let path = dir.path().join("fm.cltf");
        save_feature_map(&fm, &path).unwrap();
        let back = load_feature_map(&path, 8).unwrap();
        assert_eq!(back, fm);
    }

    #[test]
    fn wrong_rank_and_bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r2.cltf");
        tensor_file::write_tensor(&path, &StoredTensor::new(vec![2, 2], vec![0.0; 4]).unwrap()).unwrap();
        assert!(matches!(load_feature_map(&path, 8), Err(Error::TensorFormat { .. })));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(b"NOPE");
        std::fs::write(&path, bytes).unwrap();
        assert!(load_feature_map(&path, 8).is_err());
    }
}
