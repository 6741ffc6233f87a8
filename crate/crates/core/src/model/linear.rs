use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Fills `w` from U(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(w: &mut Array2<f64>, fan_in: usize, fan_out: usize, rng: &mut R) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    w.mapv_inplace(|_| rng.gen_range(-a..a));
}

/// Fills `w` from U(-a, a) with `a = sqrt(6 / fan_in)`, for layers followed by a ReLU.
pub fn he_uniform<R: Rng>(w: &mut Array2<f64>, fan_in: usize, rng: &mut R) {
    let a = (6.0 / fan_in as f64).sqrt();
    w.mapv_inplace(|_| rng.gen_range(-a..a));
}

/// Fully connected layer `y = x W^T + b`, applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut l = Linear::zeros(input, output);
        glorot_uniform(&mut l.weight, input, output, rng);
        l
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        Ok(y)
    }

    /// Accumulates parameter gradients for upstream `dy` into `grad`.
    pub fn accumulate_grads(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grad: &mut Linear) {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    /// Gradient with respect to the input rows.
    pub fn input_grad(&self, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        dy.dot(&self.weight)
    }
}
