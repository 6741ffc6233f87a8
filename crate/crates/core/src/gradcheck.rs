//! Central-difference gradient checks for every differentiable component.
//!
//! Each suite builds a small random problem, computes analytic gradients with
//! the production backward code and compares them with
//! `(loss(x + h) - loss(x - h)) / 2h` evaluated through forward code only.
//! Feature maps use distinct, well-separated values so max pooling stays away
//! from ties.

use std::fmt;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::features::{ConvConfig, ConvStack, FeatureMap};
use crate::geometry::{context_outer, project_to_feature, BBox};
use crate::model::heads::{HeadInputs, HeadKind, LocHead};
use crate::model::network::{Network, PoolSettings, Trunk};
use crate::model::scores::{
    hinge_loss, hinge_loss_grad, image_scores, softmax_over_rois, softmax_over_rois_backward, LabelVector,
};
use crate::model::Linear;
use crate::pooling::{frame_region_pool, pool_backward, roi_pool, PoolKind};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up to
/// round-off are judged on absolute error.
pub const DENOM_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Debug)]
pub struct CheckEntry {
    pub suite: String,
    pub tensor: String,
    pub elements: usize,
    pub max_abs_grad: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<CheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn suite_max(&self, suite: &str) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.suite == suite)
            .map(|e| e.max_rel_err)
            .reduce(f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.max_rel_err <= tol)
    }

    pub fn suites(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for e in &self.entries {
            if !v.contains(&e.suite) {
                v.push(e.suite.clone());
            }
        }
        v
    }

    fn push<'a>(&mut self, suite: &str, tensor: &str, analytic: impl IntoIterator<Item = &'a f64>, max_rel_err: f64) {
        let (elements, max_abs_grad) = analytic
            .into_iter()
            .fold((0, 0.0f64), |(n, m), g| (n + 1, m.max(g.abs())));
        self.entries.push(CheckEntry {
            suite: suite.to_string(),
            tensor: tensor.to_string(),
            elements,
            max_abs_grad,
            max_rel_err,
        });
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite,tensor,elements,max_abs_grad,max_rel_err,status")?;
        for e in &self.entries {
            let status = if e.max_rel_err <= TOLERANCE { "PASS" } else { "FAIL" };
            writeln!(f, "{},{},{},{:.3e},{:.3e},{}", e.suite, e.tensor, e.elements, e.max_abs_grad, e.max_rel_err, status)?;
        }
        Ok(())
    }
}

/// Max relative error between `analytic` and central differences of `loss`
/// with respect to the slice selected by `select`.
pub fn check_slice<T: Clone>(
    state: &T,
    select: impl Fn(&mut T) -> &mut [f64],
    analytic: &[f64],
    loss: impl Fn(&T) -> f64,
) -> f64 {
    let mut s = state.clone();
    let n = select(&mut s).len();
    assert_eq!(n, analytic.len(), "analytic gradient length");
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = select(&mut s)[i];
        select(&mut s)[i] = orig + STEP;
        let plus = loss(&s);
        select(&mut s)[i] = orig - STEP;
        let minus = loss(&s);
        select(&mut s)[i] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        worst = worst.max(relative_error(a, numeric));
    }
    worst
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

fn with_bias<R: Rng>(l: &mut Linear, rng: &mut R) {
    l.bias.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
}

/// Feature map of distinct values `i / n` in random order.
pub fn separated_fmap(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, stride: usize) -> FeatureMap {
    let n = c * h * w;
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    FeatureMap::new(Array3::from_shape_vec((c, h, w), vals).expect("shape"), stride)
}

fn weighted_sum(x: ArrayView2<'_, f64>, r: &Array2<f64>) -> f64 {
    (&x * r).sum()
}

fn slice_of(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn linear_parts(l: &Linear) -> (Vec<f64>, Vec<f64>) {
    (
        l.weight.as_slice().expect("std").to_vec(),
        l.bias.as_slice().expect("std").to_vec(),
    )
}

fn check_trunk(rng: &mut ChaCha8Rng, report: &mut GradCheckReport) -> Result<()> {
    let (k, d, width) = (4, 7, 5);
    let mut trunk = Trunk::init(d, width, rng);
    with_bias(&mut trunk.fc6, rng);
    with_bias(&mut trunk.fc7, rng);
    let x = random_matrix(rng, k, d);
    let r = random_matrix(rng, k, width);
    let acts = trunk.forward(x.view())?;
    let mut g = Trunk::zeros(d, width);
    let dx = trunk
        .backward(x.view(), &acts, r.view(), &mut g, true)
        .expect("input grad requested");
    let loss = |t: &(Trunk, Array2<f64>)| weighted_sum(t.0.forward(t.1.view()).unwrap().out.view(), &r);
    let state = (trunk, x);
    let (w6, b6) = linear_parts(&g.fc6);
    let (w7, b7) = linear_parts(&g.fc7);
    let e = check_slice(&state, |s| slice_of(&mut s.0.fc6.weight), &w6, loss);
    report.push("trunk", "fc6.weight", &w6, e);
    let e = check_slice(&state, |s| s.0.fc6.bias.as_slice_mut().unwrap(), &b6, loss);
    report.push("trunk", "fc6.bias", &b6, e);
    let e = check_slice(&state, |s| slice_of(&mut s.0.fc7.weight), &w7, loss);
    report.push("trunk", "fc7.weight", &w7, e);
    let e = check_slice(&state, |s| s.0.fc7.bias.as_slice_mut().unwrap(), &b7, loss);
    report.push("trunk", "fc7.bias", &b7, e);
    let e = check_slice(&state, |s| slice_of(&mut s.1), dx.as_slice().unwrap(), loss);
    report.push("trunk", "input", &dx, e);
    Ok(())
}

fn check_cls(rng: &mut ChaCha8Rng, report: &mut GradCheckReport) -> Result<()> {
    let (k, d, c) = (5, 6, 3);
    let mut cls = Linear::init(d, c, rng);
    with_bias(&mut cls, rng);
    let f = random_matrix(rng, k, d);
    let r = random_matrix(rng, k, c);
    let mut g = Linear::zeros(d, c);
    cls.accumulate_grads(f.view(), r.view(), &mut g);
    let df = cls.input_grad(r.view());
    let loss = |s: &(Linear, Array2<f64>)| weighted_sum(s.0.forward(s.1.view()).unwrap().view(), &r);
    let state = (cls, f);
    let (w, b) = linear_parts(&g);
    let e = check_slice(&state, |s| slice_of(&mut s.0.weight), &w, loss);
    report.push("fc_cls", "weight", &w, e);
    let e = check_slice(&state, |s| s.0.bias.as_slice_mut().unwrap(), &b, loss);
    report.push("fc_cls", "bias", &b, e);
    let e = check_slice(&state, |s| slice_of(&mut s.1), df.as_slice().unwrap(), loss);
    report.push("fc_cls", "input", &df, e);
    Ok(())
}

fn check_head(kind: HeadKind, rng: &mut ChaCha8Rng, report: &mut GradCheckReport) -> Result<()> {
    let (k, d, c) = (4, 6, 3);
    let mut head = LocHead::init(kind, d, c, rng);
    for (_, l) in head.layers_mut() {
        with_bias(l, rng);
    }
    let feats = [random_matrix(rng, k, d), random_matrix(rng, k, d), random_matrix(rng, k, d)];
    let r = random_matrix(rng, k, c);
    let hi = HeadInputs {
        roi: feats[0].view(),
        context: Some(feats[1].view()),
        frame: Some(feats[2].view()),
    };
    let mut g = LocHead::zeros(kind, d, c);
    let dins = head.backward(&hi, r.view(), &mut g)?;
    let loss = |s: &(LocHead, [Array2<f64>; 3])| {
        let hi = HeadInputs {
            roi: s.1[0].view(),
            context: Some(s.1[1].view()),
            frame: Some(s.1[2].view()),
        };
        weighted_sum(s.0.forward(&hi).unwrap().scores.view(), &r)
    };
    let state = (head, feats);
    let suite = format!("head_{}", kind.name());
    let grads: Vec<(&'static str, Vec<f64>, Vec<f64>)> = g
        .layers()
        .into_iter()
        .map(|(n, l)| {
            let (w, b) = linear_parts(l);
            (n, w, b)
        })
        .collect();
    for (li, (name, w, b)) in grads.iter().enumerate() {
        let e = check_slice(&state, |s| slice_of(&mut s.0.layers_mut().swap_remove(li).1.weight), w, loss);
        report.push(&suite, &format!("{name}.weight"), w, e);
        let e = check_slice(&state, |s| s.0.layers_mut().swap_remove(li).1.bias.as_slice_mut().unwrap(), b, loss);
        report.push(&suite, &format!("{name}.bias"), b, e);
    }
    let zeros = Array2::<f64>::zeros((k, d));
    for (i, (name, dg)) in [("roi", dins.roi), ("context", dins.context), ("frame", dins.frame)]
        .into_iter()
        .enumerate()
    {
        let dg = dg.unwrap_or_else(|| zeros.clone());
        let e = check_slice(&state, |s| slice_of(&mut s.1[i]), dg.as_slice().unwrap(), loss);
        report.push(&suite, &format!("input.{name}"), &dg, e);
    }
    Ok(())
}

fn check_fusion(rng: &mut ChaCha8Rng, report: &mut GradCheckReport) -> Result<()> {
    let (k, c) = (6, 4);
    let s = random_matrix(rng, k, c) * 0.5;
    let l = random_matrix(rng, k, c) * 2.0;
    let y = LabelVector::new((0..c).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect())?;
    let sigma = softmax_over_rois(l.view());
    let f = image_scores(s.view(), sigma.view())?;
    let d_f = hinge_loss_grad(f.view(), &y)?;
    let d_p = Array2::from_shape_fn((k, c), |(_, j)| d_f[j]);
    let d_s = &d_p * &sigma;
    let d_l = softmax_over_rois_backward(sigma.view(), (&d_p * &s).view());
    let loss = |st: &(Array2<f64>, Array2<f64>)| {
        let sg = softmax_over_rois(st.1.view());
        let f = image_scores(st.0.view(), sg.view()).unwrap();
        hinge_loss(f.view(), &y).unwrap()
    };
    let state = (s, l);
    let e = check_slice(&state, |st| slice_of(&mut st.0), d_s.as_slice().unwrap(), loss);
    report.push("softmax_fusion_hinge", "S", &d_s, e);
    let e = check_slice(&state, |st| slice_of(&mut st.1), d_l.as_slice().unwrap(), loss);
    report.push("softmax_fusion_hinge", "L", &d_l, e);
    Ok(())
}

fn check_pooling(rng: &mut ChaCha8Rng, report: &mut GradCheckReport) -> Result<()> {
    let fm = separated_fmap(rng, 2, 10, 10, 8);
    let roi = BBox::new(13.0, 9.0, 61.0, 70.0).expect("valid box");
    let g = fm.geometry();
    let roi_cells = project_to_feature(&roi, &g);
    let outer = project_to_feature(&context_outer(&roi, 1.8), &g);
    let inner = project_to_feature(&crate::geometry::frame_inner(&roi, 1.8), &g);
    let n = 3;
    type PoolFn = Box<dyn Fn(&FeatureMap) -> crate::pooling::PooledFeature>;
    let cases: Vec<(PoolKind, PoolFn)> = vec![
        (PoolKind::Roi, Box::new(move |m| roi_pool(m, &roi_cells, n).unwrap())),
        (
            PoolKind::Context,
            Box::new(move |m| frame_region_pool(m, &outer, &roi_cells, n, PoolKind::Context).unwrap()),
        ),
        (
            PoolKind::Frame,
            Box::new(move |m| frame_region_pool(m, &roi_cells, &inner, n, PoolKind::Frame).unwrap()),
        ),
    ];
    for (kind, pool) in cases {
        let p = pool(&fm);
        let r: Vec<f64> = (0..p.argmax.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = pool_backward(&p, &r, fm.dims())?;
        let loss = |m: &FeatureMap| pool(m).as_slice().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        let e = check_slice(&fm, |m| m.data.as_slice_mut().unwrap(), grad.as_slice().unwrap(), loss);
        report.push(&format!("pool_{}", kind.name()), "fmap", &grad, e);
    }
    Ok(())
}

fn check_conv(rng: &mut ChaCha8Rng, report: &mut GradCheckReport) -> Result<()> {
    let cfg = ConvConfig {
        in_channels: 1,
        channels: vec![3, 4],
        strides: vec![2, 1],
    };
    let mut stack = ConvStack::init(&cfg, rng)?;
    for l in &mut stack.layers {
        l.bias.mapv_inplace(|_| rng.gen_range(0.0..0.2));
    }
    let img = Array3::from_shape_fn((1, 8, 8), |_| rng.gen_range(-1.0..1.0));
    let (fm, cache) = stack.forward(&img)?;
    let r = Array3::from_shape_fn(fm.dims(), |_| rng.gen_range(-1.0..1.0));
    let (g, gi) = stack.backward(&cache, &r)?;
    let loss = |s: &(ConvStack, Array3<f64>)| (&s.0.forward(&s.1).unwrap().0.data * &r).sum();
    let state = (stack, img);
    for (i, gl) in g.layers.iter().enumerate() {
        let e = check_slice(&state, |s| s.0.layers[i].weight.as_slice_mut().unwrap(), gl.weight.as_slice().unwrap(), loss);
        report.push("conv", &format!("conv.{i}.weight"), &gl.weight, e);
        let e = check_slice(&state, |s| s.0.layers[i].bias.as_slice_mut().unwrap(), gl.bias.as_slice().unwrap(), loss);
        report.push("conv", &format!("conv.{i}.bias"), &gl.bias, e);
    }
    let e = check_slice(&state, |s| s.1.as_slice_mut().unwrap(), gi.as_slice().unwrap(), loss);
    report.push("conv", "input", &gi, e);
    Ok(())
}

/// End to end from a feature map through pooling, trunk, both streams, fusion and hinge.
fn check_network(kind: HeadKind, rng: &mut ChaCha8Rng, report: &mut GradCheckReport) -> Result<()> {
    let (channels, classes, width) = (2, 2, 8);
    let pool = PoolSettings { grid: 3, ratio: 1.8 };
    let fm = separated_fmap(rng, channels, 12, 12, 8);
    let rois = [
        BBox::new(8.0, 8.0, 72.0, 80.0).expect("box"),
        BBox::new(20.0, 4.0, 90.0, 60.0).expect("box"),
        BBox::new(30.0, 30.0, 94.0, 94.0).expect("box"),
    ];
    let mut net = Network::init(kind, channels * 9, width, classes, rng);
    for (_, l) in net.layers_mut() {
        l.bias.mapv_inplace(|_| rng.gen_range(0.0..0.2));
    }
    let (out, cache) = net.forward(&fm, &rois, &pool)?;
    // y = -sign(f) keeps every hinge term active.
    let y = LabelVector::new(out.image_scores.iter().map(|&f| if f > 0.0 { -1 } else { 1 }).collect())?;
    let d_f: Array1<f64> = hinge_loss_grad(out.image_scores.view(), &y)?;
    let mut g = Network::zeros(kind, channels * 9, width, classes);
    let g_fmap = net
        .backward(&cache, &out, d_f.view(), &mut g, true)?
        .expect("fmap grad requested");
    let loss = |s: &(Network, FeatureMap)| {
        let (o, _) = s.0.forward(&s.1, &rois, &pool).unwrap();
        hinge_loss(o.image_scores.view(), &y).unwrap()
    };
    let state = (net, fm);
    let suite = format!("network_{}", kind.name());
    let grads: Vec<(&'static str, Vec<f64>, Vec<f64>)> = g
        .layers()
        .into_iter()
        .map(|(n, l)| {
            let (w, b) = linear_parts(l);
            (n, w, b)
        })
        .collect();
    for (li, (name, w, b)) in grads.iter().enumerate() {
        let e = check_slice(&state, |s| slice_of(&mut s.0.layers_mut().swap_remove(li).1.weight), w, loss);
        report.push(&suite, &format!("{name}.weight"), w, e);
        let e = check_slice(&state, |s| s.0.layers_mut().swap_remove(li).1.bias.as_slice_mut().unwrap(), b, loss);
        report.push(&suite, &format!("{name}.bias"), b, e);
    }
    let e = check_slice(&state, |s| s.1.data.as_slice_mut().unwrap(), g_fmap.as_slice().unwrap(), loss);
    report.push(&suite, "fmap", &g_fmap, e);
    Ok(())
}

/// Runs every suite with randomness derived from `seed`.
pub fn run_all(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    check_trunk(&mut rng, &mut report)?;
    check_cls(&mut rng, &mut report)?;
    for kind in HeadKind::ALL {
        check_head(kind, &mut rng, &mut report)?;
    }
    check_fusion(&mut rng, &mut report)?;
    check_pooling(&mut rng, &mut report)?;
    check_conv(&mut rng, &mut report)?;
    for kind in HeadKind::ALL {
        check_network(kind, &mut rng, &mut report)?;
    }
    Ok(report)
}
