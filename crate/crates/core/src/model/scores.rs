//! Score fusion: softmax over ROIs, image-level scores and the multi-label hinge loss.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// `K x C` matrix over (ROI, class).
pub type ScoreMatrix = Array2<f64>;

/// Image-level labels with entries in `{-1, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector(Vec<i8>);

impl LabelVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !matches!(v, -1 | 1)) {
            return Err(Error::Invalid(format!("label entries must be -1 or 1, found {bad}")));
        }
        Ok(LabelVector(values))
    }

    pub fn negatives(classes: usize) -> Self {
        LabelVector(vec![-1; classes])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_positive(&self, class: usize) -> bool {
        self.0[class] == 1
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn get(&self, class: usize) -> f64 {
        f64::from(self.0[class])
    }
}

/// Column-wise softmax: each class column is normalized over the ROIs.
pub fn softmax_over_rois(l: ArrayView2<'_, f64>) -> ScoreMatrix {
    let mut out = l.to_owned();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

/// Vector-Jacobian product of [`softmax_over_rois`]: `dL = sigma * (d_sigma - colsum(sigma * d_sigma))`.
pub fn softmax_over_rois_backward(sigma: ArrayView2<'_, f64>, d_sigma: ArrayView2<'_, f64>) -> ScoreMatrix {
    let dot = (&sigma * &d_sigma).sum_axis(Axis(0));
    let mut out = d_sigma.to_owned();
    out -= &dot;
    out *= &sigma;
    out
}

/// `f_c = sum_k S_kc * sigma_kc`.
pub fn image_scores(s: ArrayView2<'_, f64>, sigma: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if s.dim() != sigma.dim() {
        return Err(Error::Shape(format!(
            "classification scores {:?} vs localization weights {:?}",
            s.dim(),
            sigma.dim()
        )));
    }
    Ok((&s * &sigma).sum_axis(Axis(0)))
}

/// Per-image hinge loss `(1/C) sum_c max(0, 1 - y_c f_c)`.
pub fn hinge_loss(f: ArrayView1<'_, f64>, y: &LabelVector) -> Result<f64> {
    check_len(f, y)?;
    let c = f.len() as f64;
    Ok(f.iter()
        .zip(y.as_slice())
        .map(|(&fc, &yc)| (1.0 - f64::from(yc) * fc).max(0.0))
        .sum::<f64>()
        / c)
}

/// Gradient of [`hinge_loss`] with respect to `f`; zero where the margin is met.
pub fn hinge_loss_grad(f: ArrayView1<'_, f64>, y: &LabelVector) -> Result<Array1<f64>> {
    check_len(f, y)?;
    let c = f.len() as f64;
    Ok(f.iter()
        .zip(y.as_slice())
        .map(|(&fc, &yc)| {
            let yc = f64::from(yc);
            if 1.0 - yc * fc > 0.0 {
                -yc / c
            } else {
                0.0
            }
        })
        .collect())
}

fn check_len(f: ArrayView1<'_, f64>, y: &LabelVector) -> Result<()> {
    if f.len() != y.len() || f.is_empty() {
        return Err(Error::Shape(format!(
            "{} image scores for {} labels",
            f.len(),
            y.len()
        )));
    }
    Ok(())
}
