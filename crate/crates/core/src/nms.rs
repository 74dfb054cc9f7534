//! Greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::boxgeom::Bbox;
use crate::error::{Error, Result};
use crate::ids::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Bbox,
    pub class_id: ClassId,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: Bbox, class_id: ClassId, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Config(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Detection {
            bbox,
            class_id,
            confidence,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    iou_threshold: f64,
    class_agnostic: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: 0.5,
            class_agnostic: false,
        }
    }
}

impl NmsConfig {
    pub fn new(iou_threshold: f64, class_agnostic: bool) -> Result<Self> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "NMS IoU threshold {iou_threshold} outside (0, 1]"
            )));
        }
        Ok(NmsConfig {
            iou_threshold,
            class_agnostic,
        })
    }

    pub fn iou_threshold(&self) -> f64 {
        self.iou_threshold
    }

    pub fn class_agnostic(&self) -> bool {
        self.class_agnostic
    }
}

/// Indices of `dets` ordered by descending confidence, ties in input order.
pub(crate) fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Keep the most confident detection, drop everything of the same class (or
/// any class in agnostic mode) overlapping it with IoU at or above the
/// threshold, repeat. Output is in descending confidence order and every
/// element is an unmodified input element.
pub fn nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let order = confidence_order(dets);
    // Comparing each candidate against the boxes kept so far is the same as
    // suppressing forward from each kept box, and only costs O(n * kept).
    let mut kept: Vec<Detection> = Vec::new();
    let mut kept_by_class: Vec<Vec<usize>> = Vec::new();
    for idx in order {
        let d = dets[idx];
        let slot = if cfg.class_agnostic {
            0
        } else {
            d.class_id.index()
        };
        if kept_by_class.len() <= slot {
            kept_by_class.resize_with(slot + 1, Vec::new);
        }
        let suppressed = kept_by_class[slot]
            .iter()
            .any(|&k| kept[k].bbox.iou(&d.bbox) >= cfg.iou_threshold);
        if !suppressed {
            kept_by_class[slot].push(kept.len());
            kept.push(d);
        }
    }
    kept
}
