mod oracles;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;
use stochdet::boxgeom::{Bbox, SizeBucket};
use stochdet::evaluation::{evaluate, EvalConfig, GtBox, COCO_IOU_THRESHOLDS};
use stochdet::ids::{ClassId, ImageId};
use stochdet::nms::Detection;
use stochdet::seeding;

use oracles::Scope;

const TOL: f64 = 1e-9;

type Instance = (
    BTreeMap<ImageId, Vec<Detection>>,
    BTreeMap<ImageId, Vec<GtBox>>,
);

/// Up to 5 images of mixed-size objects; detections jitter the ground truth,
/// duplicate it, mislabel it, or land at random.
fn random_instance(seed: u64) -> Instance {
    let mut rng = seeding::rng(seed);
    let n_images = rng.random_range(1..=5);
    let mut dets = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for i in 0..n_images {
        let id = ImageId(i as u64 + 1);
        let mut g = Vec::new();
        for _ in 0..rng.random_range(0..8) {
            let s = [8.0, 20.0, 50.0, 120.0][rng.random_range(0..4)] * rng.random_range(0.7..1.3);
            let (w, h) = (
                s * rng.random_range(0.6..1.6),
                s * rng.random_range(0.6..1.6),
            );
            let b = Bbox::from_xywh(
                rng.random_range(0.0..300.0),
                rng.random_range(0.0..300.0),
                w,
                h,
            )
            .unwrap();
            g.push(GtBox {
                bbox: b,
                class_id: ClassId(rng.random_range(0..3)),
            });
        }
        let mut d = Vec::new();
        for gt in &g {
            for _ in 0..rng.random_range(0..3) {
                let [x, y, w, h] = gt.bbox.to_xywh();
                let j =
                    |v: f64, r: &mut seeding::SimRng| v + r.random_range(-0.25..0.25) * w.min(h);
                let b = Bbox::from_xywh(
                    j(x, &mut rng),
                    j(y, &mut rng),
                    w * rng.random_range(0.7..1.3),
                    h * rng.random_range(0.7..1.3),
                )
                .unwrap();
                let class = if rng.random_bool(0.85) {
                    gt.class_id
                } else {
                    ClassId(rng.random_range(0..3))
                };
                d.push(Detection::new(b, class, rng.random_range(0.0..1.0)).unwrap());
            }
        }
        for _ in 0..rng.random_range(0..5) {
            let s = rng.random_range(5.0..150.0);
            let b = Bbox::from_xywh(
                rng.random_range(0.0..300.0),
                rng.random_range(0.0..300.0),
                s,
                s,
            )
            .unwrap();
            d.push(
                Detection::new(
                    b,
                    ClassId(rng.random_range(0..3)),
                    rng.random_range(0.0..1.0),
                )
                .unwrap(),
            );
        }
        dets.insert(id, d);
        gts.insert(id, g);
    }
    (dets, gts)
}

fn names() -> Vec<String> {
    ["a", "b", "c"].map(String::from).to_vec()
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= TOL,
        _ => false,
    }
}

fn check_against_oracle(
    dets: &BTreeMap<ImageId, Vec<Detection>>,
    gts: &BTreeMap<ImageId, Vec<GtBox>>,
    cfg: &EvalConfig,
) {
    let r = evaluate(dets, gts, cfg).unwrap();
    let scopes = [
        (&r.overall, Scope::ALL),
        (r.bucket(SizeBucket::Small).unwrap(), Scope::SMALL),
        (r.bucket(SizeBucket::Medium).unwrap(), Scope::MEDIUM),
        (r.bucket(SizeBucket::Large).unwrap(), Scope::LARGE),
    ];
    for (rep, scope) in scopes {
        for c in 0..3u32 {
            for (ti, &t) in cfg.iou_thresholds.iter().enumerate() {
                let want = oracles::class_ap(dets, gts, c, t, &scope, cfg.max_detections);
                let got = rep.per_class[c as usize].ap[ti];
                assert!(
                    close(got, want),
                    "{} class {c} thr {t}: {got:?} vs {want:?}",
                    rep.scope
                );
            }
        }
        let want = oracles::map(
            dets,
            gts,
            3,
            &cfg.iou_thresholds,
            &scope,
            cfg.max_detections,
        );
        assert!(
            close(rep.map, want),
            "{}: {:?} vs {want:?}",
            rep.scope,
            rep.map
        );
        assert!(close(
            rep.map50,
            oracles::map(dets, gts, 3, &[0.5], &scope, cfg.max_detections)
        ));
    }
}

#[test]
fn matches_reference_on_random_instances() {
    for seed in 0..50 {
        let (dets, gts) = random_instance(seed);
        check_against_oracle(&dets, &gts, &EvalConfig::coco(names()));
    }
}

#[test]
fn max_detections_cap_matches_reference() {
    for seed in 100..120 {
        let (dets, gts) = random_instance(seed);
        let cfg = EvalConfig {
            max_detections: 3,
            ..EvalConfig::coco(names())
        };
        check_against_oracle(&dets, &gts, &cfg);
    }
}

#[test]
fn report_invariants() {
    for seed in 200..230 {
        let (dets, gts) = random_instance(seed);
        let r = evaluate(&dets, &gts, &EvalConfig::coco(names())).unwrap();
        let total: usize = gts.values().map(|v| v.len()).sum();
        assert_eq!(r.overall.n_gt, total);
        assert_eq!(r.buckets.iter().map(|b| b.n_gt).sum::<usize>(), total);
        for s in r.scopes() {
            assert_eq!(s.tp + s.fn_, s.n_gt);
            for ap in s.per_class.iter().flat_map(|c| c.ap.iter().flatten()) {
                assert!((0.0..=1.0).contains(ap));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn confidence_scaling_leaves_ap_unchanged(seed in 0u64..10_000, c in 0.01f64..1.0) {
        let (dets, gts) = random_instance(seed);
        let scaled: BTreeMap<ImageId, Vec<Detection>> = dets
            .iter()
            .map(|(k, v)| (*k, v.iter().map(|d| Detection { confidence: d.confidence * c, ..*d }).collect()))
            .collect();
        let cfg = EvalConfig::coco(names());
        let a = evaluate(&dets, &gts, &cfg).unwrap();
        let b = evaluate(&scaled, &gts, &cfg).unwrap();
        for (x, y) in a.scopes().zip(b.scopes()) {
            prop_assert_eq!(&x.per_class, &y.per_class);
        }
    }

    #[test]
    fn adding_a_top_true_positive_never_lowers_map(seed in 0u64..10_000) {
        let (mut dets, gts) = random_instance(seed);
        let cfg = EvalConfig { iou_thresholds: COCO_IOU_THRESHOLDS.to_vec(), max_detections: 1000, ..EvalConfig::coco(names()) };
        let before = evaluate(&dets, &gts, &cfg).unwrap();
        let target = gts.iter().find_map(|(id, g)| g.first().map(|g| (*id, *g)));
        if let Some((id, g)) = target {
            dets.get_mut(&id).unwrap().push(Detection::new(g.bbox, g.class_id, 1.0).unwrap());
            let after = evaluate(&dets, &gts, &cfg).unwrap();
            prop_assert!(after.overall.map.unwrap() >= before.overall.map.unwrap_or(0.0) - 1e-12);
        }
    }
}
