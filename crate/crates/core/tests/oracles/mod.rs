//! Straightforward reference implementations used to check the library.
#![allow(dead_code)]

use std::collections::BTreeMap;

use stochdet::boxgeom::Bbox;
use stochdet::evaluation::GtBox;
use stochdet::ids::ImageId;
use stochdet::nms::Detection;

pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.to_corners();
    let [bx0, by0, bx1, by1] = b.to_corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// The textbook loop: pop the best, delete its overlaps, repeat.
pub fn nms(dets: &[Detection], thr: f64, agnostic: bool) -> Vec<Detection> {
    let mut remaining: Vec<Detection> = dets.to_vec();
    remaining.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let top = remaining.remove(0);
        remaining.retain(|d| {
            !((agnostic || d.class_id == top.class_id) && iou(&top.bbox, &d.bbox) >= thr)
        });
        out.push(top);
    }
    out
}

/// AP as the mean over recall levels 0, 0.01, ..., 1 of the best precision
/// reached at that recall or beyond.
pub fn interpolated_ap(flags_by_confidence: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if flags_by_confidence.is_empty() {
            None
        } else {
            Some(0.0)
        };
    }
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, &f) in flags_by_confidence.iter().enumerate() {
        tp += f as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        sum += points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

pub struct Scope {
    pub lo: f64,
    pub hi: f64,
}

impl Scope {
    pub const ALL: Scope = Scope {
        lo: 0.0,
        hi: f64::INFINITY,
    };
    pub const SMALL: Scope = Scope {
        lo: 0.0,
        hi: 1024.0,
    };
    pub const MEDIUM: Scope = Scope {
        lo: 1024.0,
        hi: 9216.0,
    };
    pub const LARGE: Scope = Scope {
        lo: 9216.0,
        hi: f64::INFINITY,
    };

    fn contains(&self, b: &Bbox) -> bool {
        let a = b.area();
        a >= self.lo && a < self.hi
    }
}

/// AP of one class at one threshold in one size scope, COCO rules.
pub fn class_ap(
    dets: &BTreeMap<ImageId, Vec<Detection>>,
    gts: &BTreeMap<ImageId, Vec<GtBox>>,
    class: u32,
    thr: f64,
    scope: &Scope,
    max_dets: usize,
) -> Option<f64> {
    let mut scored: Vec<(f64, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    let mut seq = 0;
    for (id, all) in dets {
        let mut top = all.clone();
        top.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        top.truncate(max_dets);
        let mine: Vec<&Detection> = top.iter().filter(|d| d.class_id.0 == class).collect();
        let g: Vec<&GtBox> = gts[id].iter().filter(|g| g.class_id.0 == class).collect();
        let ignored: Vec<bool> = g.iter().map(|x| !scope.contains(&x.bbox)).collect();
        n_gt += ignored.iter().filter(|i| !**i).count();
        let mut taken = vec![false; g.len()];
        for d in mine {
            let pick = |want_ignored: bool, taken: &[bool]| {
                let mut best: Option<(usize, f64)> = None;
                for j in 0..g.len() {
                    let v = iou(&d.bbox, &g[j].bbox);
                    if !taken[j]
                        && ignored[j] == want_ignored
                        && v >= thr
                        && best.is_none_or(|b| v > b.1)
                    {
                        best = Some((j, v));
                    }
                }
                best.map(|b| b.0)
            };
            match pick(false, &taken).or_else(|| pick(true, &taken)) {
                Some(j) => {
                    taken[j] = true;
                    if !ignored[j] {
                        scored.push((d.confidence, seq, true));
                    }
                }
                None => {
                    if scope.contains(&d.bbox) {
                        scored.push((d.confidence, seq, false));
                    }
                }
            }
            seq += 1;
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let flags: Vec<bool> = scored.iter().map(|s| s.2).collect();
    interpolated_ap(&flags, n_gt)
}

/// Mean of every defined class AP over the thresholds.
pub fn map(
    dets: &BTreeMap<ImageId, Vec<Detection>>,
    gts: &BTreeMap<ImageId, Vec<GtBox>>,
    n_classes: u32,
    thresholds: &[f64],
    scope: &Scope,
    max_dets: usize,
) -> Option<f64> {
    let aps: Vec<f64> = (0..n_classes)
        .flat_map(|c| {
            thresholds
                .iter()
                .filter_map(move |&t| class_ap(dets, gts, c, t, scope, max_dets))
        })
        .collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}
