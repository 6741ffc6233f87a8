//! The two-stream network on top of a feature map: region pooling, the shared
//! FC trunk, the classification stream and a localization head, fused into
//! per-ROI and per-image scores.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::heads::{HeadInputs, HeadKind, LocHead, LocalizationOutput};
use super::linear::Linear;
use super::scores::{image_scores, softmax_over_rois, softmax_over_rois_backward, ScoreMatrix};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::BBox;
use crate::pooling::{pool_backward_into, pool_box, PoolKind, PooledFeature};

/// Region pooling parameters shared by all pooling types.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolSettings {
    /// Output grid side `n`.
    pub grid: usize,
    /// Outer/inner side ratio for context and frame pooling.
    pub ratio: f64,
}

impl Default for PoolSettings {
    fn default() -> Self {
        PoolSettings {
            grid: crate::pooling::DEFAULT_GRID,
            ratio: crate::geometry::DEFAULT_CONTEXT_RATIO,
        }
    }
}

/// Two linear+ReLU layers applied identically to every pooled feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub fc6: Linear,
    pub fc7: Linear,
}

#[derive(Clone, Debug)]
pub struct TrunkActivations {
    pub z1: Array2<f64>,
    pub h1: Array2<f64>,
    pub z2: Array2<f64>,
    pub out: Array2<f64>,
}

impl Trunk {
    pub fn zeros(input: usize, width: usize) -> Self {
        Trunk {
            fc6: Linear::zeros(input, width),
            fc7: Linear::zeros(width, width),
        }
    }

    pub fn init<R: Rng>(input: usize, width: usize, rng: &mut R) -> Self {
        let fc6 = Linear::init(input, width, rng);
        let fc7 = Linear::init(width, width, rng);
        Trunk { fc6, fc7 }
    }

    pub fn input_dim(&self) -> usize {
        self.fc6.input_dim()
    }

    pub fn width(&self) -> usize {
        self.fc7.output_dim()
    }

    /// Row-wise trunk over a matrix of flattened pooled features.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<TrunkActivations> {
        let z1 = self.fc6.forward(x)?;
        let h1 = z1.mapv(relu);
        let z2 = self.fc7.forward(h1.view())?;
        let out = z2.mapv(relu);
        Ok(TrunkActivations { z1, h1, z2, out })
    }

    /// Accumulates parameter gradients; returns the input gradient when requested.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        acts: &TrunkActivations,
        d_out: ArrayView2<'_, f64>,
        grad: &mut Trunk,
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let mut dz2 = d_out.to_owned();
        dz2.zip_mut_with(&acts.z2, |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        self.fc7.accumulate_grads(acts.h1.view(), dz2.view(), &mut grad.fc7);
        let mut dz1 = self.fc7.input_grad(dz2.view());
        dz1.zip_mut_with(&acts.z1, |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        self.fc6.accumulate_grads(x, dz1.view(), &mut grad.fc6);
        want_input_grad.then(|| self.fc6.input_grad(dz1.view()))
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Trunk feature vector for one pooled region.
pub fn trunk_forward(trunk: &Trunk, pooled: &PooledFeature) -> Result<Array1<f64>> {
    let x = ArrayView2::from_shape((1, pooled.as_slice().len()), pooled.as_slice())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(trunk.forward(x)?.out.row(0).to_owned())
}

/// Classification stream `S = FC_cls(F_roi)`, no nonlinearity.
pub fn classification_scores(cls: &Linear, f_roi: ArrayView2<'_, f64>) -> Result<ScoreMatrix> {
    if f_roi.nrows() == 0 {
        return Err(Error::NoRois);
    }
    cls.forward(f_roi)
}

/// Everything the forward pass produces for one image.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `f`, one entry per class.
    pub image_scores: Array1<f64>,
    /// `S * sigma(L)` per ROI and class.
    pub final_scores: ScoreMatrix,
    pub cls_scores: ScoreMatrix,
    pub localization: LocalizationOutput,
    pub sigma: ScoreMatrix,
}

/// Intermediates retained for [`Network::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    rois: usize,
    kinds: Vec<PoolKind>,
    pooled: Vec<PooledFeature>,
    x: Array2<f64>,
    acts: TrunkActivations,
    fmap_dims: (usize, usize, usize),
}

impl ForwardCache {
    fn block(&self, kind: PoolKind) -> Option<std::ops::Range<usize>> {
        self.kinds
            .iter()
            .position(|&k| k == kind)
            .map(|i| i * self.rois..(i + 1) * self.rois)
    }

    fn features(&self, kind: PoolKind) -> Option<ArrayView2<'_, f64>> {
        self.block(kind).map(|r| self.acts.out.slice(s![r, ..]))
    }

    pub fn pooled(&self) -> &[PooledFeature] {
        &self.pooled
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub trunk: Trunk,
    pub cls: Linear,
    pub head: LocHead,
}

impl Network {
    pub fn zeros(head: HeadKind, input: usize, width: usize, classes: usize) -> Self {
        Network {
            trunk: Trunk::zeros(input, width),
            cls: Linear::zeros(width, classes),
            head: LocHead::zeros(head, width, classes),
        }
    }

    pub fn init<R: Rng>(head: HeadKind, input: usize, width: usize, classes: usize, rng: &mut R) -> Self {
        let trunk = Trunk::init(input, width, rng);
        let cls = Linear::init(width, classes, rng);
        let head = LocHead::init(head, width, classes, rng);
        Network { trunk, cls, head }
    }

    pub fn classes(&self) -> usize {
        self.cls.output_dim()
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head.kind()
    }

    /// Named layers in checkpoint order.
    pub fn layers(&self) -> Vec<(&'static str, &Linear)> {
        let mut v = vec![("trunk.fc6", &self.trunk.fc6), ("trunk.fc7", &self.trunk.fc7), ("cls", &self.cls)];
        v.extend(self.head.layers());
        v
    }

    pub fn layers_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        let mut v = vec![
            ("trunk.fc6", &mut self.trunk.fc6),
            ("trunk.fc7", &mut self.trunk.fc7),
            ("cls", &mut self.cls),
        ];
        v.extend(self.head.layers_mut());
        v
    }

    fn pool_kinds(&self) -> Vec<PoolKind> {
        let kind = self.head_kind();
        let mut kinds = vec![PoolKind::Roi];
        if kind.needs_context() {
            kinds.push(PoolKind::Context);
        }
        if kind.needs_frame() {
            kinds.push(PoolKind::Frame);
        }
        kinds
    }

    pub fn forward(
        &self,
        fmap: &FeatureMap,
        rois: &[BBox],
        pool: &PoolSettings,
    ) -> Result<(ForwardOutput, ForwardCache)> {
        if rois.is_empty() {
            return Err(Error::NoRois);
        }
        let expected = fmap.channels() * pool.grid * pool.grid;
        if expected != self.trunk.input_dim() {
            return Err(Error::Shape(format!(
                "pooled features have {expected} values, trunk expects {}",
                self.trunk.input_dim()
            )));
        }
        let k = rois.len();
        let kinds = self.pool_kinds();
        let mut pooled = Vec::with_capacity(k * kinds.len());
        let mut x = Array2::<f64>::zeros((k * kinds.len(), expected));
        for (bi, &kind) in kinds.iter().enumerate() {
            for (ri, roi) in rois.iter().enumerate() {
                let p = pool_box(fmap, roi, kind, pool.ratio, pool.grid)?;
                x.row_mut(bi * k + ri)
                    .as_slice_mut()
                    .expect("row of standard-layout matrix")
                    .copy_from_slice(p.as_slice());
                pooled.push(p);
            }
        }
        let acts = self.trunk.forward(x.view())?;
        let cache = ForwardCache {
            rois: k,
            kinds,
            pooled,
            x,
            acts,
            fmap_dims: fmap.dims(),
        };
        let out = self.score(&cache)?;
        Ok((out, cache))
    }

    fn head_inputs<'a>(&self, cache: &'a ForwardCache) -> HeadInputs<'a> {
        HeadInputs {
            roi: cache.features(PoolKind::Roi).expect("roi block always present"),
            context: cache.features(PoolKind::Context),
            frame: cache.features(PoolKind::Frame),
        }
    }

    fn score(&self, cache: &ForwardCache) -> Result<ForwardOutput> {
        let inputs = self.head_inputs(cache);
        let cls_scores = classification_scores(&self.cls, inputs.roi)?;
        let localization = self.head.forward(&inputs)?;
        let sigma = softmax_over_rois(localization.scores.view());
        let final_scores = &cls_scores * &sigma;
        let image_scores = image_scores(cls_scores.view(), sigma.view())?;
        Ok(ForwardOutput {
            image_scores,
            final_scores,
            cls_scores,
            localization,
            sigma,
        })
    }

    /// Reverse pass for an upstream gradient `d_f` on the image scores.
    ///
    /// Parameter gradients are accumulated into `grad`; the feature-map
    /// gradient is returned when `want_fmap_grad` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        out: &ForwardOutput,
        d_f: ArrayView1<'_, f64>,
        grad: &mut Network,
        want_fmap_grad: bool,
    ) -> Result<Option<Array3<f64>>> {
        if d_f.len() != self.classes() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} classes, network has {}",
                d_f.len(),
                self.classes()
            )));
        }
        if grad.head_kind() != self.head_kind() {
            return Err(Error::Shape("gradient container has a different head".into()));
        }
        let k = cache.rois;
        // d f / d P is all-ones per column
        let d_p = d_f.broadcast((k, d_f.len())).expect("broadcast rows").to_owned();
        let d_s = &d_p * &out.sigma;
        let d_sigma = &d_p * &out.cls_scores;
        let d_l = softmax_over_rois_backward(out.sigma.view(), d_sigma.view());

        let inputs = self.head_inputs(cache);
        let mut d_feat = Array2::<f64>::zeros(cache.acts.out.dim());

        self.cls.accumulate_grads(inputs.roi, d_s.view(), &mut grad.cls);
        let roi_rows = cache.block(PoolKind::Roi).expect("roi block");
        {
            let mut blk = d_feat.slice_mut(s![roi_rows.clone(), ..]);
            blk += &self.cls.input_grad(d_s.view());
        }

        let head_grads = self.head.backward(&inputs, d_l.view(), &mut grad.head)?;
        for (kind, g) in [
            (PoolKind::Roi, head_grads.roi),
            (PoolKind::Context, head_grads.context),
            (PoolKind::Frame, head_grads.frame),
        ] {
            if let Some(g) = g {
                let rows = cache.block(kind).ok_or_else(|| Error::Shape(format!("no {} block", kind.name())))?;
                let mut blk = d_feat.slice_mut(s![rows, ..]);
                blk += &g;
            }
        }

        let d_x = self
            .trunk
            .backward(cache.x.view(), &cache.acts, d_feat.view(), &mut grad.trunk, want_fmap_grad);
        let Some(d_x) = d_x else {
            return Ok(None);
        };
        let mut g_fmap = Array3::<f64>::zeros(cache.fmap_dims);
        for (row, pooled) in d_x.axis_iter(Axis(0)).zip(&cache.pooled) {
            let row = row.to_owned();
            pool_backward_into(pooled, row.as_slice().expect("owned row"), &mut g_fmap)?;
        }
        Ok(Some(g_fmap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::scores::{hinge_loss, hinge_loss_grad, LabelVector};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_fmap(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        // well-separated values keep max pooling away from ties
        let n = c * h * w;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        FeatureMap::new(Array3::from_shape_vec((c, h, w), vals).unwrap(), 8)
    }

    #[test]
    fn trunk_hand_relu() {
        let mut t = Trunk::zeros(2, 2);
        t.fc6.weight = array![[1.0, 0.0], [0.0, 1.0]];
        t.fc7.weight = array![[1.0, 0.0], [0.0, 1.0]];
        let acts = t.forward(array![[1.0, -1.0]].view()).unwrap();
        assert_eq!(acts.h1, array![[1.0, 0.0]]);
        assert_eq!(acts.out, array![[1.0, 0.0]]);

        let mut t = Trunk::zeros(3, 2);
        t.fc6.bias = array![0.5, 2.0];
        t.fc7.weight = array![[1.0, 0.0], [0.0, 1.0]];
        let acts = t.forward(array![[4.0, -7.0, 1.0]].view()).unwrap();
        assert_eq!(acts.out, array![[0.5, 2.0]]);
    }

    #[test]
    fn trunk_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = Trunk::init(10, 6, &mut rng);
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dense = |w: &Array2<f64>, b: &Array1<f64>, v: &[f64]| -> Vec<f64> {
            (0..w.nrows())
                .map(|i| (b[i] + (0..v.len()).map(|j| w[[i, j]] * v[j]).sum::<f64>()).max(0.0))
                .collect()
        };
        let h = dense(&t.fc6.weight, &t.fc6.bias, &x);
        let expect = dense(&t.fc7.weight, &t.fc7.bias, &h);
        let got = t.forward(ArrayView2::from_shape((1, 10), &x).unwrap()).unwrap().out;
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_cases() {
        let mut cls = Linear::zeros(3, 2);
        cls.bias = array![1.0, 2.0];
        let s = classification_scores(&cls, Array2::from_elem((4, 3), 0.3).view()).unwrap();
        assert!(s.rows().into_iter().all(|r| r == array![1.0, 2.0].view()));
        assert!(matches!(
            classification_scores(&cls, Array2::zeros((0, 3)).view()),
            Err(Error::NoRois)
        ));
    }

    #[test]
    fn zero_params_give_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = toy_fmap(&mut rng, 2, 6, 6);
        let net = Network::zeros(HeadKind::ContrastiveS, 2 * 9, 4, 3);
        let rois = [BBox::new(0.0, 0.0, 30.0, 30.0).unwrap(), BBox::new(8.0, 8.0, 40.0, 40.0).unwrap()];
        let (out, _) = net.forward(&fm, &rois, &PoolSettings { grid: 3, ratio: 1.8 }).unwrap();
        assert!(out.image_scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_roi_image_score_is_cls_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fm = toy_fmap(&mut rng, 2, 6, 6);
        for head in HeadKind::ALL {
            let net = Network::init(head, 2 * 4, 5, 3, &mut rng);
            let rois = [BBox::new(4.0, 4.0, 40.0, 36.0).unwrap()];
            let (out, _) = net.forward(&fm, &rois, &PoolSettings { grid: 2, ratio: 1.8 }).unwrap();
            for c in 0..3 {
                assert!((out.image_scores[c] - out.cls_scores[[0, c]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn no_rois_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fm = toy_fmap(&mut rng, 1, 4, 4);
        let net = Network::zeros(HeadKind::Baseline, 4, 2, 2);
        assert!(matches!(
            net.forward(&fm, &[], &PoolSettings { grid: 2, ratio: 1.8 }),
            Err(Error::NoRois)
        ));
    }

    #[test]
    fn inactive_hinge_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fm = toy_fmap(&mut rng, 2, 6, 6);
        let mut net = Network::init(HeadKind::Additive, 2 * 4, 5, 2, &mut rng);
        net.cls.bias = array![3.0, -3.0];
        net.cls.weight.fill(0.0);
        let rois = [BBox::new(0.0, 0.0, 30.0, 30.0).unwrap(), BBox::new(10.0, 4.0, 44.0, 40.0).unwrap()];
        let pool = PoolSettings { grid: 2, ratio: 1.8 };
        let (out, cache) = net.forward(&fm, &rois, &pool).unwrap();
        let y = LabelVector::new(vec![1, -1]).unwrap();
        assert_eq!(hinge_loss(out.image_scores.view(), &y).unwrap(), 0.0);
        let d_f = hinge_loss_grad(out.image_scores.view(), &y).unwrap();
        let mut g = Network::zeros(HeadKind::Additive, 2 * 4, 5, 2);
        let gf = net.backward(&cache, &out, d_f.view(), &mut g, true).unwrap().unwrap();
        for (_, l) in g.layers() {
            assert!(l.weight.iter().chain(l.bias.iter()).all(|&v| v == 0.0));
        }
        assert!(gf.iter().all(|&v| v == 0.0));
    }
}
