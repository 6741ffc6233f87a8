//! Checkpoints: one CLTC container record per parameter tensor plus a
//! `key = value` sidecar (`<checkpoint>.meta`) describing the architecture.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{FeatureSource, HeadKind, Model, ModelConfig, ModelParams, PoolSettings};
use crate::error::{Error, Result};
use crate::features::conv::ConvConfig;
use crate::features::tensor_file::{read_container, write_container, StoredTensor};

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn render_sidecar(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("head = {}\n", cfg.head));
    s.push_str(&format!("classes = {}\n", cfg.classes));
    s.push_str(&format!("grid = {}\n", cfg.pool.grid));
    s.push_str(&format!("ratio = {}\n", cfg.pool.ratio));
    s.push_str(&format!("trunk_width = {}\n", cfg.trunk_width));
    match &cfg.features {
        FeatureSource::Conv(c) => {
            s.push_str("features = conv\n");
            s.push_str(&format!("in_channels = {}\n", c.in_channels));
            s.push_str(&format!("conv_channels = {}\n", join(&c.channels)));
            s.push_str(&format!("conv_strides = {}\n", join(&c.strides)));
        }
        FeatureSource::Precomputed { channels, stride } => {
            s.push_str("features = precomputed\n");
            s.push_str(&format!("feature_channels = {channels}\n"));
            s.push_str(&format!("feature_stride = {stride}\n"));
        }
    }
    s
}

pub fn parse_sidecar(text: &str, path: &Path) -> Result<ModelConfig> {
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `key = value`"))?;
        kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
    }
    let get = |k: &str| -> Result<(usize, String)> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::parse(path, 0, format!("missing key `{k}`")))
    };
    fn num<T: std::str::FromStr>(path: &Path, (line, v): (usize, String)) -> Result<T> {
        v.parse()
            .map_err(|_| Error::parse(path, line, format!("invalid number `{v}`")))
    }
    fn list(path: &Path, (line, v): (usize, String)) -> Result<Vec<usize>> {
        v.split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::parse(path, line, format!("invalid list `{v}`")))
            })
            .collect()
    }
    let (hl, hv) = get("head")?;
    let head: HeadKind = hv.parse().map_err(|e: Error| Error::parse(path, hl, e.to_string()))?;
    let (fl, fv) = get("features")?;
    let features = match fv.as_str() {
        "conv" => FeatureSource::Conv(ConvConfig {
            in_channels: num(path, get("in_channels")?)?,
            channels: list(path, get("conv_channels")?)?,
            strides: list(path, get("conv_strides")?)?,
        }),
        "precomputed" => FeatureSource::Precomputed {
            channels: num(path, get("feature_channels")?)?,
            stride: num(path, get("feature_stride")?)?,
        },
        other => return Err(Error::parse(path, fl, format!("unknown feature source `{other}`"))),
    };
    let cfg = ModelConfig {
        head,
        classes: num(path, get("classes")?)?,
        pool: PoolSettings {
            grid: num(path, get("grid")?)?,
            ratio: num(path, get("ratio")?)?,
        },
        trunk_width: num(path, get("trunk_width")?)?,
        features,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let records = model
        .params
        .tensors()
        .into_iter()
        .map(|(name, shape, values)| Ok((name, StoredTensor::from_f64(shape, values)?)))
        .collect::<Result<Vec<_>>>()?;
    write_container(path, &records)?;
    let side = sidecar_path(path);
    fs::write(&side, render_sidecar(&model.config)).map_err(|e| Error::io(side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let config = parse_sidecar(&text, &side)?;
    let mut params = ModelParams::zeros(&config)?;
    let mut records: BTreeMap<String, StoredTensor> = read_container(path)?.into_iter().collect();
    let fmt_err = |msg: String| Error::TensorFormat {
        path: path.to_path_buf(),
        msg,
    };
    let shapes: Vec<Vec<usize>> = params.tensors().into_iter().map(|t| t.1).collect();
    for ((name, dst), shape) in params.tensors_mut().into_iter().zip(shapes) {
        let t = records
            .remove(&name)
            .ok_or_else(|| fmt_err(format!("missing tensor `{name}`")))?;
        if t.dims != shape {
            return Err(fmt_err(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.dims)));
        }
        for (d, s) in dst.iter_mut().zip(&t.data) {
            *d = f64::from(*s);
        }
    }
    if let Some(extra) = records.keys().next() {
        return Err(fmt_err(format!("unexpected tensor `{extra}`")));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite(format!("checkpoint {}", path.display())));
    }
    Ok(Model { config, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn round_trip_through_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for features in [
            FeatureSource::Conv(ConvConfig {
                in_channels: 1,
                channels: vec![2, 3],
                strides: vec![2, 1],
            }),
            FeatureSource::Precomputed { channels: 5, stride: 16 },
        ] {
            for head in HeadKind::ALL {
                let cfg = ModelConfig {
                    head,
                    classes: 3,
                    pool: PoolSettings { grid: 2, ratio: 1.8 },
                    trunk_width: 4,
                    features: features.clone(),
                };
                let model = Model::new(cfg, &mut rng).unwrap();
                let dir = tempdir().unwrap();
                let path = dir.path().join("m.cltf");
                save_checkpoint(&model, &path).unwrap();
                let back = load_checkpoint(&path).unwrap();
                assert_eq!(back.config, model.config);
                for ((n1, _, a), (n2, _, b)) in back.params.tensors().iter().zip(model.params.tensors().iter()) {
                    assert_eq!(n1, n2);
                    for (x, y) in a.iter().zip(b.iter()) {
                        assert_eq!(*x, f64::from(*y as f32));
                    }
                }
            }
        }
    }

    #[test]
    fn bad_sidecar_reports_line() {
        let err = parse_sidecar("head = baseline\nclasses = three\n", Path::new("m.meta"));
        assert!(err.is_err());
        let err = parse_sidecar("head = joint\n", Path::new("m.meta")).unwrap_err();
        assert!(err.to_string().contains("m.meta:1"), "{err}");
    }
}
