//! Fixed-size max pooling over ROI, context and frame regions of a feature map.
//!
//! All three pooling types split their outer rectangle into the same n x n
//! adaptive grid. Context and frame pooling additionally exclude every cell
//! of a hole rectangle, so their outputs share a shape and hold zeros where a
//! bin sees only hole cells.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{context_outer, frame_inner, project_to_feature, BBox, CellRect};

pub const DEFAULT_GRID: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Roi,
    Context,
    Frame,
}

impl PoolKind {
    pub fn name(&self) -> &'static str {
        match self {
            PoolKind::Roi => "roi",
            PoolKind::Context => "context",
            PoolKind::Frame => "frame",
        }
    }
}

/// Pooled `C x n x n` grid plus the flat feature-map index each bin took its max from.
#[derive(Clone, Debug)]
pub struct PooledFeature {
    pub kind: PoolKind,
    pub values: Array3<f64>,
    /// Indexed like `values` (channel-major); `None` marks an empty bin.
    pub argmax: Vec<Option<usize>>,
}

impl PooledFeature {
    pub fn grid(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// Flattened `(c, i, j)` row-major view of the pooled values.
    pub fn as_slice(&self) -> &[f64] {
        self.values
            .as_slice()
            .expect("pooled values are always standard layout")
    }
}

/// Cell span `[start, end)` of bin `i` along an axis of `len` cells starting at `start`.
#[inline]
pub(crate) fn bin_span(start: usize, len: usize, n: usize, i: usize) -> (usize, usize) {
    let lo = start + (i * len) / n;
    let hi = start + ((i + 1) * len).div_ceil(n);
    (lo, hi)
}

pub fn roi_pool(fmap: &FeatureMap, region: &CellRect, n: usize) -> Result<PooledFeature> {
    pool_impl(fmap, region, None, n, PoolKind::Roi)
}

/// Frame-shaped pooling: cells of `outer` that are not in `inner`.
///
/// `inner` is clipped to `outer` first; a hole that vanishes under clipping
/// leaves plain ROI pooling of `outer`.
pub fn frame_region_pool(
    fmap: &FeatureMap,
    outer: &CellRect,
    inner: &CellRect,
    n: usize,
    kind: PoolKind,
) -> Result<PooledFeature> {
    let hole = inner.clip_to(outer);
    pool_impl(fmap, outer, hole.as_ref(), n, kind)
}

fn pool_impl(
    fmap: &FeatureMap,
    outer: &CellRect,
    hole: Option<&CellRect>,
    n: usize,
    kind: PoolKind,
) -> Result<PooledFeature> {
    if n == 0 {
        return Err(Error::Invalid("pooling grid size must be positive".into()));
    }
    let (c, h, w) = fmap.dims();
    if !outer.fits(h, w) {
        return Err(Error::RegionOutOfGrid(outer.to_string()));
    }
    let data = fmap
        .data
        .as_slice()
        .expect("feature maps are always standard layout");
    let rh = outer.height();
    let rw = outer.width();

    // Cell lists per bin are shared by all channels.
    let mut bins: Vec<Vec<usize>> = Vec::with_capacity(n * n);
    for i in 0..n {
        let (r0, r1) = bin_span(outer.row_start, rh, n, i);
        for j in 0..n {
            let (c0, c1) = bin_span(outer.col_start, rw, n, j);
            let mut cells = Vec::with_capacity((r1 - r0) * (c1 - c0));
            for r in r0..r1 {
                for col in c0..c1 {
                    if hole.is_some_and(|hl| hl.contains_cell(r, col)) {
                        continue;
                    }
                    cells.push(r * w + col);
                }
            }
            bins.push(cells);
        }
    }

    let plane = h * w;
    let mut values = Array3::<f64>::zeros((c, n, n));
    let mut argmax = vec![None; c * n * n];
    {
        let out = values.as_slice_mut().expect("fresh array");
        for ch in 0..c {
            let base = ch * plane;
            for (b, cells) in bins.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for &cell in cells {
                    let v = data[base + cell];
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((base + cell, v));
                    }
                }
                if let Some((idx, v)) = best {
                    out[ch * n * n + b] = v;
                    argmax[ch * n * n + b] = Some(idx);
                }
            }
        }
    }
    Ok(PooledFeature {
        kind,
        values,
        argmax,
    })
}

/// Scatters pooled gradients back onto their argmax cells, accumulating into `grad_fmap`.
pub fn pool_backward_into(
    pooled: &PooledFeature,
    pooled_grad: &[f64],
    grad_fmap: &mut Array3<f64>,
) -> Result<()> {
    if pooled_grad.len() != pooled.argmax.len() {
        return Err(Error::Shape(format!(
            "pooled gradient has {} entries, forward produced {}",
            pooled_grad.len(),
            pooled.argmax.len()
        )));
    }
    let out = grad_fmap
        .as_slice_mut()
        .ok_or_else(|| Error::Shape("gradient map must be contiguous".into()))?;
    let cells = out.len();
    for (g, idx) in pooled_grad.iter().zip(&pooled.argmax) {
        if let Some(idx) = idx {
            let slot = out.get_mut(*idx).ok_or_else(|| {
                Error::Shape(format!("argmax {idx} outside gradient map of {cells} cells"))
            })?;
            *slot += g;
        }
    }
    Ok(())
}

/// Gradient with respect to a feature map of shape `dims` from a single pooled output.
pub fn pool_backward(
    pooled: &PooledFeature,
    pooled_grad: &[f64],
    dims: (usize, usize, usize),
) -> Result<Array3<f64>> {
    let mut g = Array3::zeros(dims);
    pool_backward_into(pooled, pooled_grad, &mut g)?;
    Ok(g)
}

/// Pools one ROI box for the requested kind using the context `ratio`.
pub fn pool_box(
    fmap: &FeatureMap,
    roi: &BBox,
    kind: PoolKind,
    ratio: f64,
    n: usize,
) -> Result<PooledFeature> {
    let g = fmap.geometry();
    let roi_cells = project_to_feature(roi, &g);
    match kind {
        PoolKind::Roi => roi_pool(fmap, &roi_cells, n),
        PoolKind::Context => {
            let outer = project_to_feature(&context_outer(roi, ratio), &g);
            frame_region_pool(fmap, &outer, &roi_cells, n, kind)
        }
        PoolKind::Frame => {
            let inner = project_to_feature(&frame_inner(roi, ratio), &g);
            frame_region_pool(fmap, &roi_cells, &inner, n, kind)
        }
    }
}
