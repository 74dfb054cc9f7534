//! Accumulation of several stochastic detector runs on one image:
//! concatenate the runs row-wise, then suppress with [`nms`].
//!
//! A kept box keeps the confidence of the run it came from. Nothing is
//! averaged or fused.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ImageId;
use crate::nms::{nms, Detection, NmsConfig};

/// Everything one run of the detector produced for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRun {
    pub image_id: ImageId,
    /// 1-based.
    pub run_index: u32,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatedDetections {
    pub image_id: ImageId,
    pub n_runs: usize,
    /// Descending confidence, pairwise separated per the NMS config used.
    pub detections: Vec<Detection>,
}

fn check_run_index(run: &DetectionRun) -> Result<()> {
    if run.run_index == 0 {
        return Err(Error::Config(format!(
            "{}: run_index must be >= 1",
            run.image_id
        )));
    }
    Ok(())
}

/// Concatenate and suppress. Runs are concatenated in `run_index` order so
/// the result does not depend on the order runs finished in.
pub fn accumulate(runs: &[DetectionRun], cfg: &NmsConfig) -> Result<AccumulatedDetections> {
    let first = runs.first().ok_or(Error::EmptyRuns)?;
    for run in runs {
        check_run_index(run)?;
        if run.image_id != first.image_id {
            return Err(Error::MixedImages {
                first: first.image_id,
                other: run.image_id,
            });
        }
    }
    let mut ordered: Vec<&DetectionRun> = runs.iter().collect();
    ordered.sort_by_key(|r| r.run_index);
    let concat: Vec<Detection> = ordered
        .iter()
        .flat_map(|r| r.detections.iter().copied())
        .collect();
    Ok(AccumulatedDetections {
        image_id: first.image_id,
        n_runs: runs.len(),
        detections: nms(&concat, cfg),
    })
}

/// Incremental form of [`accumulate`]: runs are pushed one at a time and the
/// suppressed result is refreshed after every merge.
///
/// Suppressed detections are retained in the pool. A box kept so far can be
/// knocked out by a more confident box from a later run, which releases
/// whatever it was suppressing; dropping suppressed boxes early would make the
/// final answer differ from the batch path.
#[derive(Debug, Clone)]
pub struct StreamingAccumulator {
    cfg: NmsConfig,
    image_id: Option<ImageId>,
    n_runs: usize,
    pool: Vec<Detection>,
    current: Vec<Detection>,
}

impl StreamingAccumulator {
    pub fn new(cfg: NmsConfig) -> Self {
        StreamingAccumulator {
            cfg,
            image_id: None,
            n_runs: 0,
            pool: Vec::new(),
            current: Vec::new(),
        }
    }

    pub fn push(&mut self, run: DetectionRun) -> Result<()> {
        check_run_index(&run)?;
        match self.image_id {
            None => self.image_id = Some(run.image_id),
            Some(first) if first != run.image_id => {
                return Err(Error::MixedImages {
                    first,
                    other: run.image_id,
                })
            }
            Some(_) => {}
        }
        self.n_runs += 1;
        self.pool.extend(run.detections);
        self.current = nms(&self.pool, &self.cfg);
        Ok(())
    }

    /// Suppressed result over the runs pushed so far.
    pub fn current(&self) -> &[Detection] {
        &self.current
    }

    pub fn n_runs(&self) -> usize {
        self.n_runs
    }

    pub fn finish(self) -> Result<AccumulatedDetections> {
        let image_id = self.image_id.ok_or(Error::EmptyRuns)?;
        Ok(AccumulatedDetections {
            image_id,
            n_runs: self.n_runs,
            detections: self.current,
        })
    }
}

/// Pull `n` runs from `source` (called with run indices `1..=n` in order) and
/// accumulate them as they arrive.
pub fn accumulate_streaming<F>(
    mut source: F,
    n: usize,
    cfg: &NmsConfig,
) -> Result<AccumulatedDetections>
where
    F: FnMut(u32) -> Result<DetectionRun>,
{
    if n == 0 {
        return Err(Error::EmptyRuns);
    }
    let mut acc = StreamingAccumulator::new(*cfg);
    for i in 1..=n {
        acc.push(source(i as u32)?)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::Bbox;
    use crate::ids::ClassId;

    fn det(b: [f64; 4], conf: f64) -> Detection {
        Detection::new(Bbox::new(b[0], b[1], b[2], b[3]).unwrap(), ClassId(0), conf).unwrap()
    }

    fn run(idx: u32, dets: Vec<Detection>) -> DetectionRun {
        DetectionRun {
            image_id: ImageId(7),
            run_index: idx,
            detections: dets,
        }
    }

    #[test]
    fn single_run_is_plain_nms() {
        let r = run(
            1,
            vec![
                det([0.0, 0.0, 10.0, 10.0], 0.9),
                det([0.0, 0.0, 10.0, 11.0], 0.8),
            ],
        );
        let cfg = NmsConfig::default();
        let acc = accumulate(std::slice::from_ref(&r), &cfg).unwrap();
        assert_eq!(acc.detections, nms(&r.detections, &cfg));
        assert_eq!(acc.n_runs, 1);
    }

    #[test]
    fn disjoint_runs_both_kept_in_confidence_order() {
        let a = det([0.0, 0.0, 10.0, 10.0], 0.6);
        let b = det([40.0, 40.0, 50.0, 50.0], 0.7);
        let acc = accumulate(&[run(1, vec![a]), run(2, vec![b])], &NmsConfig::default()).unwrap();
        assert_eq!(acc.detections, vec![b, a]);
    }

    #[test]
    fn identical_runs_collapse() {
        let r = run(
            1,
            vec![
                det([0.0, 0.0, 10.0, 10.0], 0.9),
                det([30.0, 0.0, 40.0, 10.0], 0.4),
            ],
        );
        let mut r2 = r.clone();
        r2.run_index = 2;
        let cfg = NmsConfig::default();
        assert_eq!(
            accumulate(&[r.clone(), r2], &cfg).unwrap().detections,
            accumulate(&[r], &cfg).unwrap().detections
        );
    }

    #[test]
    fn errors() {
        let cfg = NmsConfig::default();
        assert!(matches!(accumulate(&[], &cfg), Err(Error::EmptyRuns)));
        let mut other = run(2, vec![]);
        other.image_id = ImageId(8);
        assert!(matches!(
            accumulate(&[run(1, vec![]), other], &cfg),
            Err(Error::MixedImages { .. })
        ));
        assert!(matches!(
            accumulate_streaming(|i| Ok(run(i, vec![])), 0, &cfg),
            Err(Error::EmptyRuns)
        ));
        assert!(accumulate(&[run(0, vec![])], &cfg).is_err());
    }

    #[test]
    fn streaming_producer_error_propagates() {
        let cfg = NmsConfig::default();
        let res = accumulate_streaming(
            |i| {
                if i == 2 {
                    Err(Error::EmptyInput)
                } else {
                    Ok(run(i, vec![]))
                }
            },
            3,
            &cfg,
        );
        assert!(matches!(res, Err(Error::EmptyInput)));
    }

    /// Folding each run into the already-suppressed result is not the same
    /// as suppressing the concatenation: `x` from run 2 knocks out `a`,
    /// which frees `b`.
    #[test]
    fn naive_fold_differs_but_streaming_matches_batch() {
        let a = det([10.0, 0.0, 20.0, 10.0], 0.9);
        let b = det([14.0, 0.0, 24.0, 10.0], 0.8);
        let x = det([6.0, 0.0, 16.0, 10.0], 0.95);
        let cfg = NmsConfig::new(0.4, false).unwrap();
        assert!(
            a.bbox.iou(&b.bbox) >= 0.4 && x.bbox.iou(&a.bbox) >= 0.4 && x.bbox.iou(&b.bbox) < 0.4
        );

        let runs = vec![run(1, vec![a, b]), run(2, vec![x])];
        let batch = accumulate(&runs, &cfg).unwrap();
        assert_eq!(batch.detections, vec![x, b]);

        let mut naive = nms(&runs[0].detections, &cfg);
        naive.extend(runs[1].detections.iter().copied());
        assert_eq!(nms(&naive, &cfg), vec![x]);

        let streamed = accumulate_streaming(|i| Ok(runs[i as usize - 1].clone()), 2, &cfg).unwrap();
        assert_eq!(streamed, batch);
    }
}
