//! Axis-aligned box geometry shared by the generator, the anchor matcher and
//! the evaluator.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates, `x_min < x_max` and `y_min < y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// True when the box is finite and has strictly positive extent.
    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Largest magnitude allowed for a decoded log size ratio; keeps `exp` finite
/// for untrained regressors.
pub const MAX_LOG_RATIO: f64 = 4.135; // ln(1000 / 16)

/// Regression target of `gt` relative to `anchor`: center offsets scaled by
/// the anchor size, then log size ratios.
pub fn encode(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode`].
pub fn decode(offsets: &[f64], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + offsets[0] * aw;
    let cy = ay + offsets[1] * ah;
    let w = aw * offsets[2].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    let h = ah * offsets[3].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Greedy non-maximum suppression. `order` must already be sorted by
/// descending score; returns the kept indices in that order.
pub fn nms(boxes: &[BBox], order: &[usize], iou_threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for &i in order {
        if keep
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BBox::new(1.0, 2.0, 5.0, 7.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(10.0, 10.0, 12.0, 12.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_quarter_overlap() {
        // inter = 1, union = 4 + 4 - 1 = 7
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn touching_edges_do_not_overlap() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(2.0, 0.0, 4.0, 2.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn encode_identity_is_zero() {
        let a = BBox::new(3.0, 4.0, 19.0, 20.0);
        assert_eq!(encode(&a, &a), [0.0; 4]);
    }

    #[test]
    fn nms_drops_duplicate() {
        let boxes = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(nms(&boxes, &[0, 1], 0.5), vec![0]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..90.0f64, 0.0..90.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    fn arb_sized_box() -> impl Strategy<Value = BBox> {
        (0.0..90.0f64, 0.0..90.0f64, 2.0..40.0f64, 2.0..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_in_unit_interval(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn encode_decode_round_trip(gt in arb_sized_box(), anchor in arb_sized_box()) {
            let back = decode(&encode(&gt, &anchor), &anchor);
            prop_assert!((back.x_min - gt.x_min).abs() < 1e-5);
            prop_assert!((back.y_min - gt.y_min).abs() < 1e-5);
            prop_assert!((back.x_max - gt.x_max).abs() < 1e-5);
            prop_assert!((back.y_max - gt.y_max).abs() < 1e-5);
        }
    }
}
