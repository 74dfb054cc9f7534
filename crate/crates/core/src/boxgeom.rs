//! Axis-aligned boxes in image pixel coordinates and the size buckets used by
//! the evaluation protocol.
//!
//! Boxes are stored in corner form. Degenerate boxes (zero width or height)
//! are valid: they come out of noising and clipping and must flow through the
//! pipeline untouched. They have area 0 and overlap nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct Bbox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for Bbox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        Bbox::new(r.x_min, r.y_min, r.x_max, r.y_max)
    }
}

impl From<Bbox> for RawBox {
    fn from(b: Bbox) -> Self {
        RawBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }
}

impl Bbox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinate in {coords:?}"
            )));
        }
        if x_min > x_max || y_min > y_max {
            return Err(Error::InvalidBox(format!(
                "min corner exceeds max corner in {coords:?}"
            )));
        }
        Ok(Bbox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// COCO `[x, y, w, h]` form.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox(format!(
                "negative extent in xywh [{x}, {y}, {w}, {h}]"
            )));
        }
        Bbox::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox(format!(
                "negative extent in cxcywh [{cx}, {cy}, {w}, {h}]"
            )));
        }
        Bbox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[inline]
    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    #[inline]
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    #[inline]
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    #[inline]
    pub fn y_max(&self) -> f64 {
        self.y_max
    }
    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }
    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn to_corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &Bbox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &Bbox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return 0.0;
        }
        (inter / union).clamp(0.0, 1.0)
    }

    /// Clip to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Bbox {
        let x_min = self.x_min.clamp(0.0, width);
        let y_min = self.y_min.clamp(0.0, height);
        Bbox {
            x_min,
            y_min,
            x_max: self.x_max.clamp(x_min, width),
            y_max: self.y_max.clamp(y_min, height),
        }
    }

    pub fn is_within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    pub fn expand(&self, margin: f64) -> Bbox {
        Bbox {
            x_min: self.x_min - margin,
            y_min: self.y_min - margin,
            x_max: self.x_max + margin,
            y_max: self.y_max + margin,
        }
    }
}

pub fn area(b: &Bbox) -> f64 {
    b.area()
}

pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    a.iou(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

/// Pixel-area cut points. Each interval is half-open with the boundary going
/// to the larger bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeThresholds {
    pub small_below: f64,
    pub medium_below: f64,
}

impl Default for SizeThresholds {
    fn default() -> Self {
        SizeThresholds {
            small_below: 32.0 * 32.0,
            medium_below: 96.0 * 96.0,
        }
    }
}

impl SizeThresholds {
    pub fn bucket_of_area(&self, area: f64) -> SizeBucket {
        if area < self.small_below {
            SizeBucket::Small
        } else if area < self.medium_below {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }

    pub fn bucket(&self, b: &Bbox) -> SizeBucket {
        self.bucket_of_area(b.area())
    }

    /// Area range `[lo, hi)` of a bucket.
    pub fn range(&self, bucket: SizeBucket) -> (f64, f64) {
        match bucket {
            SizeBucket::Small => (0.0, self.small_below),
            SizeBucket::Medium => (self.small_below, self.medium_below),
            SizeBucket::Large => (self.medium_below, f64::INFINITY),
        }
    }
}

pub fn bucket(b: &Bbox) -> SizeBucket {
    SizeThresholds::default().bucket(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> Bbox {
        Bbox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&bx(0.0, 0.0, 10.0, 10.0)), 100.0);
        assert_eq!(area(&bx(5.0, 5.0, 5.0, 9.0)), 0.0);
        assert_eq!(area(&bx(0.0, 0.0, 32.0, 32.0)), 1024.0);
    }

    #[test]
    fn iou_examples() {
        let b = bx(3.0, 4.0, 17.5, 9.0);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        // intersection 1, union 4 + 4 - 1
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_overlap_nothing() {
        let d = bx(5.0, 5.0, 5.0, 9.0);
        assert_eq!(iou(&d, &d), 0.0);
        assert_eq!(iou(&d, &bx(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucket(&bx(0.0, 0.0, 10.0, 10.0)), SizeBucket::Small);
        assert_eq!(bucket(&bx(0.0, 0.0, 32.0, 32.0)), SizeBucket::Medium);
        assert_eq!(bucket(&bx(0.0, 0.0, 96.0, 96.0)), SizeBucket::Large);
        assert_eq!(bucket(&bx(0.0, 0.0, 100.0, 100.0)), SizeBucket::Large);
    }

    #[test]
    fn rejects_invalid() {
        assert!(Bbox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(Bbox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(Bbox::from_xywh(0.0, 0.0, -1.0, 1.0).is_err());
        assert!(
            serde_json::from_str::<Bbox>(r#"{"x_min":2,"y_min":0,"x_max":1,"y_max":1}"#).is_err()
        );
    }

    #[test]
    fn xywh_conversion() {
        let b = Bbox::from_xywh(10.0, 20.0, 30.0, 40.0).unwrap();
        assert_eq!(b.to_corners(), [10.0, 20.0, 40.0, 60.0]);
        assert_eq!(b.to_xywh(), [10.0, 20.0, 30.0, 40.0]);
    }

    fn arb_box() -> impl Strategy<Value = Bbox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64)
            .prop_map(|(x, y, w, h)| Bbox::from_xywh(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_one_only_for_equal(a in arb_box(), b in arb_box()) {
            prop_assume!(a.area() > 0.0 && b.area() > 0.0);
            if a != b {
                prop_assert!(iou(&a, &b) < 1.0);
            }
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn bucket_monotone_in_area(a in arb_box(), b in arb_box()) {
            let t = SizeThresholds::default();
            if a.area() <= b.area() {
                prop_assert!(t.bucket(&a) <= t.bucket(&b));
            }
        }

        #[test]
        fn xywh_round_trip(a in arb_box()) {
            let [x, y, w, h] = a.to_xywh();
            let b = Bbox::from_xywh(x, y, w, h).unwrap();
            prop_assert!((a.x_max() - b.x_max()).abs() < 1e-9);
            prop_assert!((a.y_max() - b.y_max()).abs() < 1e-9);
            prop_assert_eq!(a.x_min(), b.x_min());
        }
    }
}
