//! Box arithmetic and the pixel to feature-cell projection used by pooling.
//!
//! Coordinates are 0-based and continuous with exclusive `x2`/`y2`, so a box
//! `(0, 0, 10, 10)` covers exactly 100 square pixels. Boxes may extend past
//! the image; clamping only happens in [`project_to_feature`].

use std::fmt;

/// Side ratio between the outer and inner rectangle of context and frame pooling.
pub const DEFAULT_CONTEXT_RATIO: f64 = 1.8;

/// Proposals must be strictly wider and taller than this many pixels.
pub const DEFAULT_MIN_PROPOSAL_SIDE: f64 = 20.0;

/// Axis-aligned rectangle in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, returning `None` unless `x1 < x2` and `y1 < y2` (and all finite).
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        (finite && x1 < x2 && y1 < y2).then_some(BBox { x1, y1, x2, y2 })
    }

    /// Converts a 1-based inclusive pixel annotation (VOC style) to continuous coordinates.
    pub fn from_voc_inclusive(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        BBox::new(x1 - 1.0, y1 - 1.0, x2, y2)
    }

    /// Square box of side `side` centered on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, side: f64) -> Option<Self> {
        let h = side / 2.0;
        BBox::new(cx - h, cy - h, cx + h, cy + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Inclusive rectangle of feature-grid cells. Always covers at least one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl CellRect {
    pub fn new(row_start: usize, row_end: usize, col_start: usize, col_end: usize) -> Self {
        debug_assert!(row_start <= row_end && col_start <= col_end);
        CellRect {
            row_start,
            row_end,
            col_start,
            col_end,
        }
    }

    pub fn height(&self) -> usize {
        self.row_end - self.row_start + 1
    }

    pub fn width(&self) -> usize {
        self.col_end - self.col_start + 1
    }

    pub fn fits(&self, fmap_h: usize, fmap_w: usize) -> bool {
        self.row_start <= self.row_end
            && self.col_start <= self.col_end
            && self.row_end < fmap_h
            && self.col_end < fmap_w
    }

    pub fn contains_cell(&self, row: usize, col: usize) -> bool {
        (self.row_start..=self.row_end).contains(&row) && (self.col_start..=self.col_end).contains(&col)
    }

    /// Intersection with `other`, or `None` when they share no cell.
    pub fn clip_to(&self, other: &CellRect) -> Option<CellRect> {
        let rs = self.row_start.max(other.row_start);
        let re = self.row_end.min(other.row_end);
        let cs = self.col_start.max(other.col_start);
        let ce = self.col_end.min(other.col_end);
        (rs <= re && cs <= ce).then(|| CellRect::new(rs, re, cs, ce))
    }
}

impl fmt::Display for CellRect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rows {}..={}, cols {}..={}",
            self.row_start, self.row_end, self.col_start, self.col_end
        )
    }
}

/// Pixel stride and dimensions of a convolutional feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureGeometry {
    pub stride: usize,
    pub fmap_h: usize,
    pub fmap_w: usize,
}

impl FeatureGeometry {
    pub fn new(stride: usize, fmap_h: usize, fmap_w: usize) -> Self {
        assert!(stride >= 1, "feature stride must be positive");
        assert!(fmap_h >= 1 && fmap_w >= 1, "feature grid must be non-empty");
        FeatureGeometry {
            stride,
            fmap_h,
            fmap_w,
        }
    }
}

/// Intersection over union of two boxes, 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Same center, each side multiplied by `factor`.
pub fn scale_box(b: &BBox, factor: f64) -> BBox {
    assert!(factor > 0.0, "scale factor must be positive");
    let (cx, cy) = b.center();
    let hw = b.width() * factor / 2.0;
    let hh = b.height() * factor / 2.0;
    BBox {
        x1: cx - hw,
        y1: cy - hh,
        x2: cx + hw,
        y2: cy + hh,
    }
}

/// Outer rectangle for context pooling.
pub fn context_outer(b: &BBox, ratio: f64) -> BBox {
    scale_box(b, ratio)
}

/// Inner rectangle for frame pooling.
pub fn frame_inner(b: &BBox, ratio: f64) -> BBox {
    scale_box(b, 1.0 / ratio)
}

/// Zero-offset floor/ceil projection onto the feature grid, clamped so at least one cell remains.
pub fn project_to_feature(b: &BBox, g: &FeatureGeometry) -> CellRect {
    let s = g.stride as f64;
    let (row_start, row_end) = project_axis(b.y1, b.y2, s, g.fmap_h);
    let (col_start, col_end) = project_axis(b.x1, b.x2, s, g.fmap_w);
    CellRect::new(row_start, row_end, col_start, col_end)
}

fn project_axis(lo: f64, hi: f64, stride: f64, len: usize) -> (usize, usize) {
    let max = (len - 1) as f64;
    let start = (lo / stride).floor().clamp(0.0, max) as usize;
    let end = ((hi / stride).ceil() - 1.0).clamp(0.0, max) as usize;
    (start, end.max(start))
}

/// Keeps boxes strictly wider and taller than `min_side`, preserving order.
pub fn filter_proposals(boxes: &[BBox], min_side: f64) -> Vec<BBox> {
    boxes
        .iter()
        .filter(|b| b.width() > min_side && b.height() > min_side)
        .copied()
        .collect()
}

/// Like [`filter_proposals`] but returns the indices of the surviving boxes.
pub fn filter_proposal_indices(boxes: &[BBox], min_side: f64) -> Vec<usize> {
    boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| b.width() > min_side && b.height() > min_side)
        .map(|(i, _)| i)
        .collect()
}

/// Mirrors a box horizontally inside an image of width `image_width`.
pub fn flip_box(b: &BBox, image_width: f64) -> BBox {
    BBox {
        x1: image_width - b.x2,
        y1: b.y1,
        x2: image_width - b.x1,
        y2: b.y2,
    }
}

pub fn rescale_box(b: &BBox, sx: f64, sy: f64) -> BBox {
    assert!(sx > 0.0 && sy > 0.0, "rescale factors must be positive");
    BBox {
        x1: b.x1 * sx,
        y1: b.y1 * sy,
        x2: b.x2 * sx,
        y2: b.y2 * sy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn assert_box_eq(a: BBox, b: BBox, tol: f64) {
        for (u, v) in [(a.x1, b.x1), (a.y1, b.y1), (a.x2, b.x2), (a.y2, b.y2)] {
            assert!((u - v).abs() <= tol, "{a} != {b}");
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &bx(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
        // touching edges share no area
        assert_eq!(iou(&a, &bx(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(10.0, 0.0, 5.0, 10.0).is_none());
        assert!(BBox::new(0.0, 0.0, 0.0, 10.0).is_none());
        assert!(BBox::new(0.0, f64::NAN, 1.0, 1.0).is_none());
    }

    #[test]
    fn voc_conversion() {
        let b = BBox::from_voc_inclusive(1.0, 1.0, 10.0, 20.0).unwrap();
        assert_eq!(b, bx(0.0, 0.0, 10.0, 20.0));
    }

    #[test]
    fn scale_examples() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert_box_eq(scale_box(&b, 1.0), b, 0.0);
        assert_box_eq(scale_box(&b, 1.8), bx(-4.0, -4.0, 14.0, 14.0), 1e-12);
        assert_box_eq(scale_box(&bx(0.0, 0.0, 18.0, 18.0), 1.0 / 1.8), bx(4.0, 4.0, 14.0, 14.0), 1e-12);
    }

    #[test]
    fn context_and_frame_examples() {
        let b = bx(10.0, 10.0, 28.0, 28.0);
        assert_box_eq(context_outer(&b, 1.8), bx(2.8, 2.8, 35.2, 35.2), 1e-12);
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert_box_eq(context_outer(&b, 1.8), bx(-4.0, -4.0, 14.0, 14.0), 1e-12);
        let inner = frame_inner(&b, 1.8);
        let side = 10.0 / 1.8;
        assert_box_eq(inner, bx(5.0 - side / 2.0, 5.0 - side / 2.0, 5.0 + side / 2.0, 5.0 + side / 2.0), 1e-12);
        assert!((inner.width() - 5.555_555_555_6).abs() < 1e-9);
        assert_box_eq(frame_inner(&b, 1.0), b, 0.0);
        assert_box_eq(frame_inner(&bx(0.0, 0.0, 18.0, 18.0), 1.8), bx(4.0, 4.0, 14.0, 14.0), 1e-12);
    }

    #[test]
    fn projection_examples() {
        let g = FeatureGeometry::new(16, 8, 8);
        assert_eq!(project_to_feature(&bx(0.0, 0.0, 32.0, 32.0), &g), CellRect::new(0, 1, 0, 1));
        assert_eq!(project_to_feature(&bx(10.0, 10.0, 20.0, 20.0), &g), CellRect::new(0, 1, 0, 1));
        assert_eq!(project_to_feature(&bx(33.0, 33.0, 34.0, 34.0), &g), CellRect::new(2, 2, 2, 2));
    }

    #[test]
    fn projection_clamps_outside_boxes() {
        let g = FeatureGeometry::new(16, 8, 8);
        assert_eq!(
            project_to_feature(&bx(-50.0, -50.0, -10.0, -10.0), &g),
            CellRect::new(0, 0, 0, 0)
        );
        assert_eq!(
            project_to_feature(&bx(500.0, 0.0, 600.0, 300.0), &g),
            CellRect::new(0, 7, 7, 7)
        );
        // exact cell boundary does not spill into the next cell
        assert_eq!(project_to_feature(&bx(16.0, 16.0, 32.0, 32.0), &g), CellRect::new(1, 1, 1, 1));
    }

    #[test]
    fn filter_examples() {
        assert_eq!(filter_proposals(&[bx(0.0, 0.0, 21.0, 21.0)], 20.0).len(), 1);
        assert!(filter_proposals(&[bx(0.0, 0.0, 20.0, 25.0)], 20.0).is_empty());
        let input = [bx(0.0, 0.0, 50.0, 50.0), bx(0.0, 0.0, 10.0, 50.0), bx(0.0, 0.0, 30.0, 30.0)];
        assert_eq!(filter_proposals(&input, 20.0), vec![input[0], input[2]]);
        assert_eq!(filter_proposal_indices(&input, 20.0), vec![0, 2]);
    }

    #[test]
    fn flip_examples() {
        let b = bx(10.0, 0.0, 30.0, 20.0);
        assert_eq!(flip_box(&b, 100.0), bx(70.0, 0.0, 90.0, 20.0));
        let c = bx(40.0, 0.0, 60.0, 20.0);
        assert_eq!(flip_box(&c, 100.0), c);
        assert_eq!(flip_box(&flip_box(&b, 100.0), 100.0), b);
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_box(&bx(0.0, 0.0, 10.0, 10.0), 2.0, 2.0), bx(0.0, 0.0, 20.0, 20.0));
        assert_eq!(rescale_box(&bx(5.0, 5.0, 10.0, 10.0), 1.0, 1.0), bx(5.0, 5.0, 10.0, 10.0));
        assert_eq!(rescale_box(&bx(4.0, 8.0, 12.0, 16.0), 0.5, 0.25), bx(2.0, 2.0, 6.0, 4.0));
    }

    #[test]
    fn clip_cell_rects() {
        let outer = CellRect::new(2, 5, 2, 5);
        assert_eq!(CellRect::new(0, 3, 4, 9).clip_to(&outer), Some(CellRect::new(2, 3, 4, 5)));
        assert_eq!(CellRect::new(6, 7, 0, 9).clip_to(&outer), None);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..150.0f64, -50.0..150.0f64, 0.5..120.0f64, 0.5..120.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn scale_preserves_center(b in arb_box(), r in 0.2..5.0f64) {
            let s = scale_box(&b, r);
            let (cx, cy) = b.center();
            let (sx, sy) = s.center();
            prop_assert!((cx - sx).abs() < 1e-9 && (cy - sy).abs() < 1e-9);
            prop_assert!((s.width() - b.width() * r).abs() < 1e-9);
            prop_assert!((s.height() - b.height() * r).abs() < 1e-9);
            assert_box_eq(scale_box(&s, 1.0 / r), b, 1e-9);
        }

        #[test]
        fn projection_nonempty_and_monotone(b in arb_box(), grow in 0.0..40.0f64,
                                            stride in 1usize..20, h in 1usize..20, w in 1usize..20) {
            let g = FeatureGeometry::new(stride, h, w);
            let r = project_to_feature(&b, &g);
            prop_assert!(r.fits(h, w));
            let big = BBox::new(b.x1 - grow, b.y1 - grow, b.x2 + grow, b.y2 + grow).unwrap();
            let rb = project_to_feature(&big, &g);
            prop_assert!(rb.row_start <= r.row_start && rb.row_end >= r.row_end);
            prop_assert!(rb.col_start <= r.col_start && rb.col_end >= r.col_end);
        }

        #[test]
        fn filter_is_subsequence(boxes in proptest::collection::vec(arb_box(), 0..30)) {
            let kept = filter_proposals(&boxes, 20.0);
            let mut it = boxes.iter();
            for k in &kept {
                prop_assert!(it.any(|b| b == k));
            }
        }
    }
}
