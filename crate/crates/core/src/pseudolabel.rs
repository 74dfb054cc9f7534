//! Pseudo-labels from accumulated detections, and the verified-region
//! filters used to simulate human verification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::accumulator::AccumulatedDetections;
use crate::boxgeom::Bbox;
use crate::error::{Error, Result};
use crate::evaluation::GtBox;
use crate::ids::{ClassId, ImageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Accumulated { n_runs: usize },
    SingleRun,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub image_id: ImageId,
    pub bbox: Bbox,
    pub class_id: ClassId,
    /// In `(0, 1]`.
    pub weight: f64,
    pub provenance: Provenance,
}

/// Image regions an annotator marked as correctly labeled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifiedRegionSet {
    pub regions: BTreeMap<ImageId, Vec<Bbox>>,
}

impl VerifiedRegionSet {
    pub fn regions_for(&self, id: ImageId) -> &[Bbox] {
        self.regions.get(&id).map_or(&[], |v| v.as_slice())
    }

    pub fn validate(&self, image_sizes: &BTreeMap<ImageId, (f64, f64)>) -> Result<()> {
        for (id, rs) in &self.regions {
            let &(w, h) = image_sizes
                .get(id)
                .ok_or_else(|| Error::Integrity(format!("regions reference unknown image {id}")))?;
            if let Some(r) = rs.iter().find(|r| !r.is_within(w, h)) {
                return Err(Error::Integrity(format!(
                    "{id}: region {:?} outside the image",
                    r.to_corners()
                )));
            }
        }
        Ok(())
    }
}

/// Keep detections with confidence strictly above `threshold`, weighted by
/// their confidence.
pub fn make_pseudo_labels(acc: &AccumulatedDetections, threshold: f64) -> Result<Vec<PseudoLabel>> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "pseudo-label threshold {threshold} outside [0, 1)"
        )));
    }
    let provenance = if acc.n_runs == 1 {
        Provenance::SingleRun
    } else {
        Provenance::Accumulated { n_runs: acc.n_runs }
    };
    Ok(acc
        .detections
        .iter()
        .filter(|d| d.confidence > threshold)
        .map(|d| PseudoLabel {
            image_id: acc.image_id,
            bbox: d.bbox,
            class_id: d.class_id,
            weight: d.confidence,
            provenance,
        })
        .collect())
}

fn check_containment(containment: f64) -> Result<()> {
    if !(containment > 0.0 && containment <= 1.0) {
        return Err(Error::Config(format!(
            "containment {containment} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Whether at least `containment` of the box's area lies inside one region.
pub fn is_contained(bbox: &Bbox, regions: &[Bbox], containment: f64) -> bool {
    let need = containment * bbox.area();
    regions.iter().any(|r| bbox.intersection_area(r) >= need)
}

pub fn filter_by_regions(
    labels: &[PseudoLabel],
    regions: &VerifiedRegionSet,
    containment: f64,
) -> Result<Vec<PseudoLabel>> {
    check_containment(containment)?;
    Ok(labels
        .iter()
        .filter(|l| is_contained(&l.bbox, regions.regions_for(l.image_id), containment))
        .copied()
        .collect())
}

/// Ground truth inside verified regions, as weight-1 labels.
pub fn ground_truth_in_regions(
    gts: &BTreeMap<ImageId, Vec<GtBox>>,
    regions: &VerifiedRegionSet,
    containment: f64,
) -> Result<Vec<PseudoLabel>> {
    check_containment(containment)?;
    Ok(gts
        .iter()
        .flat_map(|(id, list)| {
            let rs = regions.regions_for(*id);
            list.iter()
                .filter(move |g| is_contained(&g.bbox, rs, containment))
                .map(move |g| PseudoLabel {
                    image_id: *id,
                    bbox: g.bbox,
                    class_id: g.class_id,
                    weight: 1.0,
                    provenance: Provenance::GroundTruth,
                })
        })
        .collect())
}

/// The same labels with every weight set to 1.
pub fn unweighted(labels: &[PseudoLabel]) -> Vec<PseudoLabel> {
    labels
        .iter()
        .map(|l| PseudoLabel { weight: 1.0, ..*l })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nms::Detection;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> Bbox {
        Bbox::new(x0, y0, x1, y1).unwrap()
    }

    fn acc(confs: &[f64]) -> AccumulatedDetections {
        AccumulatedDetections {
            image_id: ImageId(4),
            n_runs: 18,
            detections: confs
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    Detection::new(bx(i as f64, 0.0, i as f64 + 5.0, 5.0), ClassId(0), c).unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn threshold_is_strict() {
        let labels = make_pseudo_labels(&acc(&[0.9, 0.5, 0.51]), 0.5).unwrap();
        let w: Vec<f64> = labels.iter().map(|l| l.weight).collect();
        assert_eq!(w, vec![0.9, 0.51]);
        assert_eq!(labels[0].provenance, Provenance::Accumulated { n_runs: 18 });
        assert_eq!(
            make_pseudo_labels(&acc(&[0.9, 0.1, 0.001]), 0.0)
                .unwrap()
                .len(),
            3
        );
        assert!(make_pseudo_labels(&acc(&[]), 0.5).unwrap().is_empty());
        assert!(make_pseudo_labels(&acc(&[]), 1.0).is_err());
    }

    fn label(b: Bbox) -> PseudoLabel {
        PseudoLabel {
            image_id: ImageId(1),
            bbox: b,
            class_id: ClassId(0),
            weight: 0.8,
            provenance: Provenance::SingleRun,
        }
    }

    #[test]
    fn region_filtering() {
        let regions = VerifiedRegionSet {
            regions: [(ImageId(1), vec![bx(0.0, 0.0, 10.0, 10.0)])].into(),
        };
        let inside = label(bx(2.0, 2.0, 8.0, 8.0));
        let half = label(bx(5.0, 0.0, 15.0, 10.0));
        assert_eq!(
            filter_by_regions(&[inside], &regions, 1.0).unwrap(),
            vec![inside]
        );
        assert!(filter_by_regions(&[half], &regions, 0.6)
            .unwrap()
            .is_empty());
        assert_eq!(
            filter_by_regions(&[half], &regions, 0.5).unwrap(),
            vec![half]
        );
        assert!(
            filter_by_regions(&[inside], &VerifiedRegionSet::default(), 1.0)
                .unwrap()
                .is_empty()
        );
        assert!(filter_by_regions(&[inside], &regions, 0.0).is_err());
    }

    #[test]
    fn ground_truth_filtering() {
        let regions = VerifiedRegionSet {
            regions: [(ImageId(1), vec![bx(0.0, 0.0, 10.0, 10.0)])].into(),
        };
        let gts: BTreeMap<ImageId, Vec<GtBox>> = [(
            ImageId(1),
            vec![
                GtBox {
                    bbox: bx(1.0, 1.0, 3.0, 3.0),
                    class_id: ClassId(2),
                },
                GtBox {
                    bbox: bx(6.0, 0.0, 16.0, 10.0),
                    class_id: ClassId(1),
                },
            ],
        )]
        .into();
        let kept = ground_truth_in_regions(&gts, &regions, 1.0).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!((kept[0].weight, kept[0].class_id), (1.0, ClassId(2)));
        // 40% of the second box is inside.
        assert_eq!(
            ground_truth_in_regions(&gts, &regions, 0.4).unwrap().len(),
            2
        );
        assert_eq!(
            ground_truth_in_regions(&gts, &regions, 0.41).unwrap().len(),
            1
        );
        assert!(
            ground_truth_in_regions(&gts, &VerifiedRegionSet::default(), 1.0)
                .unwrap()
                .is_empty()
        );
    }

    proptest! {
        #[test]
        fn thresholding_is_monotone(confs in prop::collection::vec(0.0f64..=1.0, 0..30), a in 0.0f64..0.99, b in 0.0f64..0.99) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let acc = acc(&confs);
            let at_lo = make_pseudo_labels(&acc, lo).unwrap();
            let at_hi = make_pseudo_labels(&acc, hi).unwrap();
            prop_assert!(at_hi.len() <= at_lo.len());
            prop_assert!(at_hi.iter().all(|l| l.weight > hi && at_lo.contains(l)));
        }

        #[test]
        fn region_filter_is_subset(xs in prop::collection::vec((0.0f64..90.0, 0.0f64..90.0, 1.0f64..10.0), 0..20), c in 0.05f64..=1.0) {
            let labels: Vec<PseudoLabel> = xs.iter().map(|&(x, y, s)| label(bx(x, y, x + s, y + s))).collect();
            let regions = VerifiedRegionSet { regions: [(ImageId(1), vec![bx(20.0, 20.0, 60.0, 60.0)])].into() };
            let kept = filter_by_regions(&labels, &regions, c).unwrap();
            prop_assert!(kept.iter().all(|k| labels.contains(k)));
        }
    }
}
