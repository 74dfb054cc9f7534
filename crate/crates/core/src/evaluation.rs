//! COCO-style evaluation: greedy matching, 101-point interpolated AP, mAP
//! averaged over classes and IoU thresholds, overall and per size bucket.
//!
//! In a bucket, ground truth outside the bucket is ignored: a detection
//! matched to it counts as neither TP nor FP, and so does an unmatched
//! detection whose own area falls outside the bucket.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{Bbox, SizeBucket, SizeThresholds};
use crate::error::{Error, Result};
use crate::ids::{ClassId, ImageId};
use crate::nms::{confidence_order, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: Bbox,
    pub class_id: ClassId,
}

impl From<(Bbox, ClassId)> for GtBox {
    fn from((bbox, class_id): (Bbox, ClassId)) -> Self {
        GtBox { bbox, class_id }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub buckets: bool,
    pub size_thresholds: SizeThresholds,
    /// Highest-confidence detections kept per image, across classes.
    pub max_detections: usize,
    pub class_names: Vec<String>,
}

pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

impl EvalConfig {
    pub fn coco(class_names: Vec<String>) -> Self {
        EvalConfig {
            iou_thresholds: COCO_IOU_THRESHOLDS.to_vec(),
            buckets: true,
            size_thresholds: SizeThresholds::default(),
            max_detections: 100,
            class_names,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty()
            || t.iter().any(|&x| !(x > 0.0 && x <= 1.0))
            || t.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "IoU thresholds must be increasing in (0, 1]: {t:?}"
            )));
        }
        if self.max_detections == 0 || self.class_names.is_empty() {
            return Err(Error::Config(
                "need at least one class and max_detections >= 1".into(),
            ));
        }
        Ok(())
    }

    fn index_of(&self, thr: f64) -> Option<usize> {
        self.iou_thresholds
            .iter()
            .position(|&t| (t - thr).abs() < 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchState {
    TruePositive,
    FalsePositive,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Matched ground-truth index per detection.
    pub det_matches: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching of confidence-sorted detections: each takes the
/// highest-IoU unmatched ground truth of its class with IoU at or above
/// `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thr: f64) -> MatchResult {
    let ignore = vec![false; gts.len()];
    let ious: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| d.bbox.iou(&g.bbox)).collect())
        .collect();
    let (det_matches, gt_matched) = greedy_match(dets, gts, &ignore, &ious, iou_thr);
    MatchResult {
        det_matches,
        gt_matched,
    }
}

/// Non-ignored ground truth is preferred; a detection falls back to ignored
/// ground truth only when no non-ignored one qualifies.
fn greedy_match(
    dets: &[Detection],
    gts: &[GtBox],
    ignore: &[bool],
    ious: &[Vec<f64>],
    iou_thr: f64,
) -> (Vec<Option<usize>>, Vec<bool>) {
    let mut gt_matched = vec![false; gts.len()];
    let mut det_matches = vec![None; dets.len()];
    for (d, det) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64, bool)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] || gt.class_id != det.class_id || ious[d][g] < iou_thr {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, iou, ign)) => {
                    (ign && !ignore[g]) || (ign == ignore[g] && ious[d][g] > iou)
                }
            };
            if better {
                best = Some((g, ious[d][g], ignore[g]));
            }
        }
        if let Some((g, _, _)) = best {
            gt_matched[g] = true;
            det_matches[d] = Some(g);
        }
    }
    (det_matches, gt_matched)
}

/// Precision at the 101 recall levels `0, 0.01, ..., 1`, using the
/// monotone (right-to-left maximum) precision envelope.
pub fn interpolated_precision(scored: &[(f64, bool)], n_gt: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(if n_gt == 0 {
            0.0
        } else {
            tp as f64 / n_gt as f64
        });
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r - 1e-12);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect()
}

/// 101-point interpolated AP of `(confidence, is_tp)` pairs. `None` when
/// there is nothing to score: no ground truth and no detections.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if scored.is_empty() { None } else { Some(0.0) };
    }
    Some(interpolated_precision(scored, n_gt).iter().sum::<f64>() / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: ClassId,
    pub name: String,
    /// One entry per IoU threshold.
    pub ap: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrSample {
    pub class_id: ClassId,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeReport {
    /// `"all"` or a bucket name.
    pub scope: String,
    /// Mean over every defined (class, threshold) AP.
    pub map: Option<f64>,
    pub map50: Option<f64>,
    pub per_class: Vec<ClassAp>,
    pub n_gt: usize,
    /// Counts at the first IoU threshold.
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Interpolated PR curve per class at the first IoU threshold.
    pub pr: Vec<PrSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub n_images: usize,
    pub overall: ScopeReport,
    pub buckets: Vec<ScopeReport>,
}

impl EvalReport {
    pub fn bucket(&self, b: SizeBucket) -> Option<&ScopeReport> {
        self.buckets.iter().find(|s| s.scope == b.name())
    }

    pub fn scopes(&self) -> impl Iterator<Item = &ScopeReport> {
        std::iter::once(&self.overall).chain(&self.buckets)
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "{:<8} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7}\n",
            "scope", "mAP", "mAP@.5", "n_gt", "tp", "fp", "fn"
        );
        for r in self.scopes() {
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7}",
                r.scope,
                fmt(r.map),
                fmt(r.map50),
                r.n_gt,
                r.tp,
                r.fp,
                r.fn_
            );
        }
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("scope,class_id,recall,precision\n");
        for r in self.scopes() {
            for p in &r.pr {
                let _ = writeln!(s, "{},{},{},{}", r.scope, p.class_id, p.recall, p.precision);
            }
        }
        s
    }
}

#[derive(Default, Clone)]
struct Tally {
    scored: Vec<(f64, bool)>,
    n_gt: usize,
    tp: usize,
    fp: usize,
}

/// Evaluate detections against ground truth. Both maps must have the same
/// image ids.
pub fn evaluate(
    dets: &BTreeMap<ImageId, Vec<Detection>>,
    gts: &BTreeMap<ImageId, Vec<GtBox>>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if !dets.keys().eq(gts.keys()) {
        let missing: Vec<String> = dets
            .keys()
            .filter(|k| !gts.contains_key(k))
            .chain(gts.keys().filter(|k| !dets.contains_key(k)))
            .map(|k| k.to_string())
            .collect();
        return Err(Error::MismatchedImageIds(missing.join(", ")));
    }
    let k = cfg.class_names.len();
    for (id, list) in gts.iter() {
        if let Some(g) = list.iter().find(|g| g.class_id.index() >= k) {
            return Err(Error::UnknownClass(format!("{id}: class {}", g.class_id)));
        }
    }
    let mut scopes: Vec<Option<SizeBucket>> = vec![None];
    if cfg.buckets {
        scopes.extend(SizeBucket::ALL.map(Some));
    }
    let n_thr = cfg.iou_thresholds.len();
    // tallies[scope][class][threshold]
    let mut tallies = vec![vec![vec![Tally::default(); n_thr]; k]; scopes.len()];

    for (id, image_dets) in dets {
        let order = confidence_order(image_dets);
        let top: Vec<Detection> = order
            .iter()
            .take(cfg.max_detections)
            .map(|&i| image_dets[i])
            .collect();
        let image_gts = &gts[id];
        for class in 0..k {
            let cid = ClassId(class as u32);
            let cd: Vec<Detection> = top.iter().copied().filter(|d| d.class_id == cid).collect();
            let cg: Vec<GtBox> = image_gts
                .iter()
                .copied()
                .filter(|g| g.class_id == cid)
                .collect();
            let ious: Vec<Vec<f64>> = cd
                .iter()
                .map(|d| cg.iter().map(|g| d.bbox.iou(&g.bbox)).collect())
                .collect();
            for (s, scope) in scopes.iter().enumerate() {
                let in_scope =
                    |b: &Bbox| scope.is_none_or(|want| cfg.size_thresholds.bucket(b) == want);
                let ignore: Vec<bool> = cg.iter().map(|g| !in_scope(&g.bbox)).collect();
                let n_gt = ignore.iter().filter(|&&i| !i).count();
                for (ti, &thr) in cfg.iou_thresholds.iter().enumerate() {
                    let tally = &mut tallies[s][class][ti];
                    tally.n_gt += n_gt;
                    let (matches, _) = greedy_match(&cd, &cg, &ignore, &ious, thr);
                    for (d, m) in cd.iter().zip(&matches) {
                        let state = match m {
                            Some(g) if ignore[*g] => MatchState::Ignored,
                            Some(_) => MatchState::TruePositive,
                            None if !in_scope(&d.bbox) => MatchState::Ignored,
                            None => MatchState::FalsePositive,
                        };
                        match state {
                            MatchState::TruePositive => {
                                tally.scored.push((d.confidence, true));
                                tally.tp += 1;
                            }
                            MatchState::FalsePositive => {
                                tally.scored.push((d.confidence, false));
                                tally.fp += 1;
                            }
                            MatchState::Ignored => {}
                        }
                    }
                }
            }
        }
    }

    let i50 = cfg.index_of(0.5);
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let mut reports: Vec<ScopeReport> = scopes
        .iter()
        .zip(&tallies)
        .map(|(scope, per_class)| {
            let mut all = Vec::new();
            let mut at50 = Vec::new();
            let mut per = Vec::with_capacity(k);
            let mut pr = Vec::new();
            let (mut n_gt, mut tp, mut fp) = (0, 0, 0);
            for (class, by_thr) in per_class.iter().enumerate() {
                let ap: Vec<Option<f64>> = by_thr
                    .iter()
                    .map(|t| average_precision(&t.scored, t.n_gt))
                    .collect();
                all.extend(ap.iter().flatten());
                if let Some(Some(v)) = i50.map(|i| ap[i]) {
                    at50.push(v);
                }
                let first = &by_thr[0];
                n_gt += first.n_gt;
                tp += first.tp;
                fp += first.fp;
                if first.n_gt > 0 {
                    for (r, p) in interpolated_precision(&first.scored, first.n_gt)
                        .into_iter()
                        .enumerate()
                    {
                        pr.push(PrSample {
                            class_id: ClassId(class as u32),
                            recall: r as f64 / 100.0,
                            precision: p,
                        });
                    }
                }
                per.push(ClassAp {
                    class_id: ClassId(class as u32),
                    name: cfg.class_names[class].clone(),
                    ap,
                });
            }
            ScopeReport {
                scope: scope.map_or("all", |b| b.name()).to_string(),
                map: mean(&all),
                map50: mean(&at50),
                per_class: per,
                n_gt,
                tp,
                fp,
                fn_: n_gt - tp,
                pr,
            }
        })
        .collect();
    let overall = reports.remove(0);
    Ok(EvalReport {
        iou_thresholds: cfg.iou_thresholds.clone(),
        n_images: dets.len(),
        overall,
        buckets: reports,
    })
}
