//! Localization heads: the plain ROI head and the context-aware additive and
//! contrastive variants.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::linear::Linear;
use super::scores::ScoreMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Localization from ROI features only (no context).
    Baseline,
    /// `FC_roi(F_roi) + FC_context(F_context)` with independent layers.
    Additive,
    /// `G(F_roi) - G(F_context)` with one shared layer.
    ContrastiveA,
    /// `G(F_frame) - G(F_context)` with one shared layer.
    ContrastiveS,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::Baseline,
        HeadKind::Additive,
        HeadKind::ContrastiveA,
        HeadKind::ContrastiveS,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Baseline => "baseline",
            HeadKind::Additive => "additive",
            HeadKind::ContrastiveA => "contrastive_a",
            HeadKind::ContrastiveS => "contrastive_s",
        }
    }

    pub fn needs_context(&self) -> bool {
        !matches!(self, HeadKind::Baseline)
    }

    pub fn needs_frame(&self) -> bool {
        matches!(self, HeadKind::ContrastiveS)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown head `{s}` (expected baseline, additive, contrastive_a or contrastive_s)"
                ))
            })
    }
}

/// Localization scores `L` with the two branch outputs that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationOutput {
    pub scores: ScoreMatrix,
    pub branch_roi: ScoreMatrix,
    /// Zero for the baseline head.
    pub branch_context: ScoreMatrix,
}

/// Trunk features per pooling type, one row per ROI.
#[derive(Clone, Copy, Debug)]
pub struct HeadInputs<'a> {
    pub roi: ArrayView2<'a, f64>,
    pub context: Option<ArrayView2<'a, f64>>,
    pub frame: Option<ArrayView2<'a, f64>>,
}

/// Gradients with respect to the [`HeadInputs`] rows.
#[derive(Clone, Debug, Default)]
pub struct HeadInputGrads {
    pub roi: Option<Array2<f64>>,
    pub context: Option<Array2<f64>>,
    pub frame: Option<Array2<f64>>,
}

/// Localization head parameters. Contrastive heads hold a single shared
/// layer that serves both the region and the context branch.
#[derive(Clone, Debug, PartialEq)]
pub enum LocHead {
    Baseline { fc: Linear },
    Additive { roi: Linear, context: Linear },
    ContrastiveA { shared: Linear },
    ContrastiveS { shared: Linear },
}

pub fn head_baseline(fc: &Linear, f_roi: ArrayView2<'_, f64>) -> Result<LocalizationOutput> {
    let l = fc.forward(f_roi)?;
    let zeros = Array2::zeros(l.dim());
    Ok(LocalizationOutput {
        branch_roi: l.clone(),
        branch_context: zeros,
        scores: l,
    })
}

pub fn head_additive(
    fc_roi: &Linear,
    fc_context: &Linear,
    f_roi: ArrayView2<'_, f64>,
    f_context: ArrayView2<'_, f64>,
) -> Result<LocalizationOutput> {
    let g_roi = fc_roi.forward(f_roi)?;
    let g_ctx = fc_context.forward(f_context)?;
    check_same(&g_roi, &g_ctx)?;
    Ok(LocalizationOutput {
        scores: &g_roi + &g_ctx,
        branch_roi: g_roi,
        branch_context: g_ctx,
    })
}

fn contrast(shared: &Linear, inner: ArrayView2<'_, f64>, f_context: ArrayView2<'_, f64>) -> Result<LocalizationOutput> {
    let g_roi = shared.forward(inner)?;
    let g_ctx = shared.forward(f_context)?;
    check_same(&g_roi, &g_ctx)?;
    Ok(LocalizationOutput {
        scores: &g_roi - &g_ctx,
        branch_roi: g_roi,
        branch_context: g_ctx,
    })
}

pub fn head_contrastive_a(
    shared: &Linear,
    f_roi: ArrayView2<'_, f64>,
    f_context: ArrayView2<'_, f64>,
) -> Result<LocalizationOutput> {
    contrast(shared, f_roi, f_context)
}

pub fn head_contrastive_s(
    shared: &Linear,
    f_frame: ArrayView2<'_, f64>,
    f_context: ArrayView2<'_, f64>,
) -> Result<LocalizationOutput> {
    contrast(shared, f_frame, f_context)
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("branch outputs {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn require<'a>(v: Option<ArrayView2<'a, f64>>, what: &str) -> Result<ArrayView2<'a, f64>> {
    v.ok_or_else(|| Error::Shape(format!("head needs {what} features")))
}

impl LocHead {
    pub fn zeros(kind: HeadKind, input: usize, classes: usize) -> Self {
        let l = || Linear::zeros(input, classes);
        match kind {
            HeadKind::Baseline => LocHead::Baseline { fc: l() },
            HeadKind::Additive => LocHead::Additive {
                roi: l(),
                context: l(),
            },
            HeadKind::ContrastiveA => LocHead::ContrastiveA { shared: l() },
            HeadKind::ContrastiveS => LocHead::ContrastiveS { shared: l() },
        }
    }

    pub fn init<R: Rng>(kind: HeadKind, input: usize, classes: usize, rng: &mut R) -> Self {
        match kind {
            HeadKind::Baseline => LocHead::Baseline {
                fc: Linear::init(input, classes, rng),
            },
            HeadKind::Additive => {
                let roi = Linear::init(input, classes, rng);
                let context = Linear::init(input, classes, rng);
                LocHead::Additive { roi, context }
            }
            HeadKind::ContrastiveA => LocHead::ContrastiveA {
                shared: Linear::init(input, classes, rng),
            },
            HeadKind::ContrastiveS => LocHead::ContrastiveS {
                shared: Linear::init(input, classes, rng),
            },
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            LocHead::Baseline { .. } => HeadKind::Baseline,
            LocHead::Additive { .. } => HeadKind::Additive,
            LocHead::ContrastiveA { .. } => HeadKind::ContrastiveA,
            LocHead::ContrastiveS { .. } => HeadKind::ContrastiveS,
        }
    }

    /// Named parameter layers in a stable order.
    pub fn layers(&self) -> Vec<(&'static str, &Linear)> {
        match self {
            LocHead::Baseline { fc } => vec![("loc.fc", fc)],
            LocHead::Additive { roi, context } => vec![("loc.roi", roi), ("loc.context", context)],
            LocHead::ContrastiveA { shared } | LocHead::ContrastiveS { shared } => vec![("loc.shared", shared)],
        }
    }

    pub fn layers_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        match self {
            LocHead::Baseline { fc } => vec![("loc.fc", fc)],
            LocHead::Additive { roi, context } => vec![("loc.roi", roi), ("loc.context", context)],
            LocHead::ContrastiveA { shared } | LocHead::ContrastiveS { shared } => vec![("loc.shared", shared)],
        }
    }

    pub fn forward(&self, inputs: &HeadInputs<'_>) -> Result<LocalizationOutput> {
        match self {
            LocHead::Baseline { fc } => head_baseline(fc, inputs.roi),
            LocHead::Additive { roi, context } => {
                head_additive(roi, context, inputs.roi, require(inputs.context, "context")?)
            }
            LocHead::ContrastiveA { shared } => {
                head_contrastive_a(shared, inputs.roi, require(inputs.context, "context")?)
            }
            LocHead::ContrastiveS { shared } => head_contrastive_s(
                shared,
                require(inputs.frame, "frame")?,
                require(inputs.context, "context")?,
            ),
        }
    }

    /// Accumulates parameter gradients into `grad` (a head of the same kind)
    /// and returns gradients with respect to the inputs.
    pub fn backward(
        &self,
        inputs: &HeadInputs<'_>,
        d_l: ArrayView2<'_, f64>,
        grad: &mut LocHead,
    ) -> Result<HeadInputGrads> {
        let mismatch = || Error::Shape("gradient head kind differs from model head".into());
        match (self, grad) {
            (LocHead::Baseline { fc }, LocHead::Baseline { fc: g }) => {
                fc.accumulate_grads(inputs.roi, d_l, g);
                Ok(HeadInputGrads {
                    roi: Some(fc.input_grad(d_l)),
                    ..Default::default()
                })
            }
            (LocHead::Additive { roi, context }, LocHead::Additive { roi: gr, context: gc }) => {
                let f_ctx = require(inputs.context, "context")?;
                roi.accumulate_grads(inputs.roi, d_l, gr);
                context.accumulate_grads(f_ctx, d_l, gc);
                Ok(HeadInputGrads {
                    roi: Some(roi.input_grad(d_l)),
                    context: Some(context.input_grad(d_l)),
                    frame: None,
                })
            }
            (LocHead::ContrastiveA { shared }, LocHead::ContrastiveA { shared: g }) => {
                let f_ctx = require(inputs.context, "context")?;
                let neg = d_l.mapv(|v| -v);
                shared.accumulate_grads(inputs.roi, d_l, g);
                shared.accumulate_grads(f_ctx, neg.view(), g);
                Ok(HeadInputGrads {
                    roi: Some(shared.input_grad(d_l)),
                    context: Some(shared.input_grad(neg.view())),
                    frame: None,
                })
            }
            (LocHead::ContrastiveS { shared }, LocHead::ContrastiveS { shared: g }) => {
                let f_ctx = require(inputs.context, "context")?;
                let f_frame = require(inputs.frame, "frame")?;
                let neg = d_l.mapv(|v| -v);
                shared.accumulate_grads(f_frame, d_l, g);
                shared.accumulate_grads(f_ctx, neg.view(), g);
                Ok(HeadInputGrads {
                    roi: None,
                    context: Some(shared.input_grad(neg.view())),
                    frame: Some(shared.input_grad(d_l)),
                })
            }
            _ => Err(mismatch()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matmul_oracle(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
        let (k, d) = x.dim();
        let c = w.nrows();
        Array2::from_shape_fn((k, c), |(i, j)| b[j] + (0..d).map(|t| x[[i, t]] * w[[j, t]]).sum::<f64>())
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
        a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn parse_names() {
        for k in HeadKind::ALL {
            assert_eq!(k.name().parse::<HeadKind>().unwrap(), k);
        }
        assert!("joint".parse::<HeadKind>().is_err());
    }

    #[test]
    fn baseline_cases() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let zero = Linear::zeros(2, 3);
        assert!(head_baseline(&zero, x.view()).unwrap().scores.iter().all(|&v| v == 0.0));
        let mut bias_only = Linear::zeros(2, 3);
        bias_only.bias = array![1.0, -2.0, 0.5];
        let out = head_baseline(&bias_only, x.view()).unwrap();
        for row in out.scores.rows() {
            assert_eq!(row, bias_only.bias.view());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::init(5, 3, &mut rng);
        let x = random(&mut rng, 4, 5);
        let out = head_baseline(&l, x.view()).unwrap();
        assert!(close(&out.scores, &matmul_oracle(&x, &l.weight, &l.bias), 1e-12));
        assert!(out.branch_context.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn additive_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 3, 4);
        let roi = Linear::init(4, 2, &mut rng);
        let ctx = Linear::zeros(4, 2);
        let out = head_additive(&roi, &ctx, x.view(), Array2::zeros((3, 4)).view()).unwrap();
        assert!(close(&out.scores, &roi.forward(x.view()).unwrap(), 0.0));

        let mut a = Linear::zeros(4, 2);
        let mut b = Linear::zeros(4, 2);
        a.bias = array![1.0, 2.0];
        b.bias = array![0.5, -3.0];
        let out = head_additive(&a, &b, x.view(), x.view()).unwrap();
        for row in out.scores.rows() {
            assert_eq!(row, array![1.5, -1.0].view());
        }

        let roi = Linear::init(4, 2, &mut rng);
        let ctx = Linear::init(4, 2, &mut rng);
        let xc = random(&mut rng, 3, 4);
        let out = head_additive(&roi, &ctx, x.view(), xc.view()).unwrap();
        let expect = matmul_oracle(&x, &roi.weight, &roi.bias) + matmul_oracle(&xc, &ctx.weight, &ctx.bias);
        assert!(close(&out.scores, &expect, 1e-12));
    }

    #[test]
    fn contrastive_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 4);
        let mut shared = Linear::init(4, 2, &mut rng);
        shared.bias = array![0.3, -0.7];
        for f in [head_contrastive_a, head_contrastive_s] {
            assert!(f(&shared, x.view(), x.view()).unwrap().scores.iter().all(|&v| v == 0.0));
            let mut w0 = Linear::zeros(4, 2);
            w0.bias = array![5.0, -5.0];
            let xc = random(&mut rng, 3, 4);
            assert!(f(&w0, x.view(), xc.view()).unwrap().scores.iter().all(|&v| v == 0.0));
            let out = f(&shared, x.view(), xc.view()).unwrap();
            let diff = &x - &xc;
            let expect = matmul_oracle(&diff, &shared.weight, &Array1::zeros(2));
            assert!(close(&out.scores, &expect, 1e-12));
            assert!(close(&out.scores, &(&out.branch_roi - &out.branch_context), 0.0));
        }
    }

    #[test]
    fn additive_with_negated_context_equals_contrastive_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut shared = Linear::init(6, 3, &mut rng);
        shared.bias = array![0.1, -0.2, 0.4];
        let neg = Linear {
            weight: shared.weight.mapv(|v| -v),
            bias: shared.bias.mapv(|v| -v),
        };
        let x = random(&mut rng, 5, 6);
        let xc = random(&mut rng, 5, 6);
        let a = head_contrastive_a(&shared, x.view(), xc.view()).unwrap();
        let b = head_additive(&shared, &neg, x.view(), xc.view()).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn contrastive_bias_gradient_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = LocHead::init(HeadKind::ContrastiveS, 4, 2, &mut rng);
        let (xf, xc) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        let d_l = random(&mut rng, 3, 2);
        let mut g = LocHead::zeros(HeadKind::ContrastiveS, 4, 2);
        let inputs = HeadInputs {
            roi: xf.view(),
            context: Some(xc.view()),
            frame: Some(xf.view()),
        };
        head.backward(&inputs, d_l.view(), &mut g).unwrap();
        let LocHead::ContrastiveS { shared } = g else { unreachable!() };
        assert!(shared.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_inputs_are_shape_errors() {
        let head = LocHead::zeros(HeadKind::Additive, 2, 2);
        let x = Array2::zeros((1, 2));
        let inputs = HeadInputs {
            roi: x.view(),
            context: None,
            frame: None,
        };
        assert!(matches!(head.forward(&inputs), Err(Error::Shape(_))));
    }
}
