//! Detection, tier and association quality metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{CoarseSet, TrackletPair};
use crate::bbox::BBox;
use crate::labels::{PseudoLabel, Tier};

pub const DEFAULT_IOU_THRESH: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no ground truth for camera {camera} frame {frame}")]
    MissingGt { camera: String, frame: u64 },
}

/// Ground-truth boxes per camera id, indexed by frame.
pub type GtBoxes = BTreeMap<String, Vec<Vec<BBox>>>;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

fn gt_for<'a>(gt: &'a GtBoxes, camera: &str, frame: u64) -> Result<&'a [BBox], EvalError> {
    gt.get(camera)
        .and_then(|frames| frames.get(frame as usize))
        .map(Vec::as_slice)
        .ok_or_else(|| EvalError::MissingGt {
            camera: camera.to_string(),
            frame,
        })
}

/// Greedy one-to-one matching in descending score order (ties by input
/// position). Returns, for each label in input order, whether it is a TP.
pub fn greedy_match(labels: &[&PseudoLabel], gt: &GtBoxes, iou_thresh: f64) -> Result<Vec<bool>, EvalError> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[b].score.total_cmp(&labels[a].score).then(a.cmp(&b)));
    let mut used: BTreeSet<(&str, u64, usize)> = BTreeSet::new();
    let mut tp = vec![false; labels.len()];
    for i in order {
        let l = labels[i];
        let boxes = gt_for(gt, &l.camera_id, l.frame)?;
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in boxes.iter().enumerate() {
            if used.contains(&(l.camera_id.as_str(), l.frame, g)) {
                continue;
            }
            let v = l.bbox.iou(b);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used.insert((l.camera_id.as_str(), l.frame, g));
            tp[i] = true;
        }
    }
    Ok(tp)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierStats {
    pub n_labels: usize,
    pub true_positives: usize,
    /// `None` when the tier is empty.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl TierStats {
    fn new(tp: usize, n: usize, n_gt: usize) -> Self {
        Self {
            n_labels: n,
            true_positives: tp,
            precision: ratio(tp, n),
            recall: ratio(tp, n_gt),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierQuality {
    pub iou_thresh: f64,
    pub n_gt: usize,
    pub confident: TierStats,
    pub uncertain: TierStats,
    pub combined: TierStats,
}

/// Precision and recall per tier. Matching runs once over all labels so the
/// tiers partition the combined true positives; recall is relative to every
/// GT box on the cameras and frames in `frames`.
pub fn tier_quality(
    labels: &[PseudoLabel],
    gt: &GtBoxes,
    cameras: &[String],
    frames: std::ops::Range<u64>,
    iou_thresh: f64,
) -> Result<TierQuality, EvalError> {
    let refs: Vec<&PseudoLabel> = labels.iter().collect();
    let tp = greedy_match(&refs, gt, iou_thresh)?;
    let mut n_gt = 0;
    for cam in cameras {
        for f in frames.clone() {
            n_gt += gt_for(gt, cam, f)?.len();
        }
    }
    let count = |tier: Option<Tier>| {
        let mut hits = 0;
        let mut n = 0;
        for (l, t) in labels.iter().zip(&tp) {
            if tier.is_none_or(|x| x == l.tier) {
                n += 1;
                hits += usize::from(*t);
            }
        }
        TierStats::new(hits, n, n_gt)
    };
    Ok(TierQuality {
        iou_thresh,
        n_gt,
        confident: count(Some(Tier::Confident)),
        uncertain: count(Some(Tier::Uncertain)),
        combined: count(None),
    })
}

/// All-points interpolated AP from `(score, is_tp)` pairs.
pub fn average_precision_ranked(ranked: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (k, i) in order.iter().enumerate() {
        tp += usize::from(ranked[*i].1);
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope from the right
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// AP of `detections` against all GT boxes on `cameras` over `frames`.
pub fn average_precision(
    detections: &[PseudoLabel],
    gt: &GtBoxes,
    cameras: &[String],
    frames: std::ops::Range<u64>,
    iou_thresh: f64,
) -> Result<f64, EvalError> {
    let refs: Vec<&PseudoLabel> = detections.iter().collect();
    let tp = greedy_match(&refs, gt, iou_thresh)?;
    let mut n_gt = 0;
    for cam in cameras {
        for f in frames.clone() {
            n_gt += gt_for(gt, cam, f)?.len();
        }
    }
    let ranked: Vec<(f64, bool)> = detections.iter().map(|d| d.score).zip(tp).collect();
    Ok(average_precision_ranked(&ranked, n_gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationPr {
    pub accepted: usize,
    pub true_positives: usize,
    /// Recall denominator.
    pub reachable: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Zero when precision or recall is undefined or both are zero.
    pub f1: f64,
}

fn f1(p: Option<f64>, r: Option<f64>) -> f64 {
    match (p, r) {
        (Some(p), Some(r)) if p + r > 0.0 => 2.0 * p * r / (p + r),
        _ => 0.0,
    }
}

/// Streaming counterpart of [`association_pr`].
#[derive(Debug, Clone, Default)]
pub struct PrCounter {
    accepted: usize,
    tp: usize,
}

impl PrCounter {
    pub fn push(&mut self, pair: &TrackletPair) {
        if pair.is_accepted() {
            self.accepted += 1;
            self.tp += usize::from(pair.is_true_match());
        }
    }

    pub fn finish(&self, reachable: usize) -> AssociationPr {
        let precision = ratio(self.tp, self.accepted);
        let recall = ratio(self.tp, reachable);
        AssociationPr {
            accepted: self.accepted,
            true_positives: self.tp,
            reachable,
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

/// A pair is a TP iff both seed detections carry the same non-null identity.
pub fn association_pr(pairs: &[TrackletPair], reachable: usize) -> AssociationPr {
    let accepted: Vec<&TrackletPair> = pairs.iter().filter(|p| p.is_accepted()).collect();
    let tp = accepted.iter().filter(|p| p.is_true_match()).count();
    let precision = ratio(tp, accepted.len());
    let recall = ratio(tp, reachable);
    AssociationPr {
        accepted: accepted.len(),
        true_positives: tp,
        reachable,
        precision,
        recall,
        f1: f1(precision, recall),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    #[serde(flatten)]
    pub pr: AssociationPr,
}

/// Association quality of `coarse` at each threshold.
pub fn tau_sweep(coarse: &[&CoarseSet], reachable: usize, taus: &[f64]) -> Vec<SweepPoint> {
    taus.iter()
        .map(|&tau| {
            let mut counter = PrCounter::default();
            for set in coarse {
                for p in set.finalize(tau) {
                    counter.push(&p);
                }
            }
            SweepPoint {
                tau,
                pr: counter.finish(reachable),
            }
        })
        .collect()
}

/// Threshold with the highest F1; the smallest such tau on ties.
pub fn best_tau(points: &[SweepPoint]) -> Option<f64> {
    let mut best: Option<&SweepPoint> = None;
    for p in points {
        if best.is_none_or(|b| p.pr.f1 > b.pr.f1) {
            best = Some(p);
        }
    }
    best.map(|p| p.tau)
}

/// Evenly spaced thresholds over `[0, max]`, both ends included.
pub fn tau_grid(max: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| max * i as f64 / steps as f64).collect()
}

/// Checks the sweep is a trade-off curve: accepted pairs and recall never
/// drop as tau grows, and no higher-tau point beats a lower-tau point on
/// precision by more than `noise` while also having at least its recall.
/// Points are assumed sorted by tau.
pub fn sweep_is_monotone(points: &[SweepPoint], noise: f64) -> bool {
    for w in points.windows(2) {
        if w[1].pr.accepted < w[0].pr.accepted || w[1].pr.true_positives < w[0].pr.true_positives {
            return false;
        }
    }
    for (i, lo) in points.iter().enumerate() {
        for hi in &points[i + 1..] {
            if let (Some(pl), Some(ph)) = (lo.pr.precision, hi.pr.precision) {
                if ph > pl + noise && hi.pr.recall >= lo.pr.recall {
                    return false;
                }
            }
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub gt_boxes: usize,
    pub reachable_pairs: usize,
    pub all_pairs: usize,
    pub candidates: usize,
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tiers: TierQuality,
    pub association: AssociationPr,
    pub tau: f64,
    pub pruning_factor: f64,
    pub ap_at_08: f64,
    pub counts: EvalCounts,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::Tracklet;
    use proptest::prelude::*;

    fn det(frame: u64, bbox: BBox, score: f64, tier: Tier) -> PseudoLabel {
        PseudoLabel {
            camera_id: "c".into(),
            frame,
            bbox,
            score,
            class_id: 1,
            embedding: vec![],
            gt_identity: None,
            tier,
        }
    }

    fn gt(boxes: Vec<Vec<BBox>>) -> GtBoxes {
        BTreeMap::from([("c".to_string(), boxes)])
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ap_toy_case() {
        let ranked = [(0.9, true), (0.8, false), (0.7, true)];
        assert!((average_precision_ranked(&ranked, 2) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision_ranked(&[(0.9, true), (0.5, true)], 2), 1.0);
        assert_eq!(average_precision_ranked(&[(0.9, false), (0.5, false)], 2), 0.0);
        assert_eq!(average_precision_ranked(&[], 0), 0.0);
    }

    #[test]
    fn ap_from_boxes() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let h = BBox::new(20.0, 0.0, 30.0, 10.0);
        let gtb = gt(vec![vec![g, h]]);
        let dets = vec![
            det(0, g, 0.9, Tier::Confident),
            det(0, BBox::new(50.0, 50.0, 60.0, 60.0), 0.8, Tier::Confident),
            det(0, h, 0.7, Tier::Uncertain),
        ];
        let ap = average_precision(&dets, &gtb, &["c".into()], 0..1, 0.8).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        // a duplicate of a matched box is a false positive
        let dup = [det(0, g, 0.9, Tier::Confident), det(0, g, 0.8, Tier::Confident)];
        let tp = greedy_match(&dup.iter().collect::<Vec<_>>(), &gtb, 0.8).unwrap();
        assert_eq!(tp, vec![true, false]);
    }

    #[test]
    fn missing_gt_is_an_error() {
        let d = vec![det(3, BBox::new(0.0, 0.0, 1.0, 1.0), 0.5, Tier::Uncertain)];
        assert!(matches!(
            average_precision(&d, &gt(vec![vec![]]), &["c".into()], 0..1, 0.8),
            Err(EvalError::MissingGt { .. })
        ));
    }

    #[test]
    fn tier_quality_examples() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let h = BBox::new(20.0, 0.0, 30.0, 10.0);
        let gtb = gt(vec![vec![g, h]]);
        let exact = vec![det(0, g, 0.9, Tier::Confident), det(0, h, 0.5, Tier::Uncertain)];
        let q = tier_quality(&exact, &gtb, &["c".into()], 0..1, 0.8).unwrap();
        assert_eq!(q.confident.precision, Some(1.0));
        assert_eq!(q.uncertain.precision, Some(1.0));
        assert_eq!(q.combined.recall, Some(1.0));

        let only_conf = vec![det(0, g, 0.9, Tier::Confident)];
        let q = tier_quality(&only_conf, &gtb, &["c".into()], 0..1, 0.8).unwrap();
        assert_eq!(q.uncertain.precision, None);
        assert_eq!(q.confident.recall, Some(0.5));
        let json = serde_json::to_string(&q.uncertain).unwrap();
        assert!(json.contains(r#""precision":null"#));
    }

    fn pair(a: Option<u64>, b: Option<u64>, accepted: bool) -> TrackletPair {
        let t = |id| Tracklet {
            camera_id: "x".into(),
            start_frame: 0,
            boxes: vec![],
            embeddings: vec![],
            observed: vec![],
            gt_identities: vec![id],
        };
        TrackletPair {
            a: t(a),
            b: t(b),
            distance: Some(0.0),
            accepted: Some(accepted),
            diagnostic: None,
        }
    }

    #[test]
    fn association_examples() {
        let all_good = vec![pair(Some(1), Some(1), true), pair(Some(2), Some(2), true)];
        let r = association_pr(&all_good, 4);
        assert_eq!(r.precision, Some(1.0));
        assert_eq!(r.recall, Some(0.5));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        let none = vec![pair(Some(1), Some(1), false)];
        let r = association_pr(&none, 4);
        assert_eq!(r.recall, Some(0.0));
        assert_eq!(r.precision, None);
        assert_eq!(r.f1, 0.0);
        // null identities never match
        assert_eq!(association_pr(&[pair(None, None, true)], 1).true_positives, 0);
    }

    proptest! {
        #[test]
        fn streaming_equals_batch(raw in proptest::collection::vec((0u64..3, 0u64..3, any::<bool>(), any::<bool>()), 0..50), reach in 0usize..60) {
            let pairs: Vec<TrackletPair> = raw.iter().map(|(a, b, null, acc)| pair(if *null { None } else { Some(*a) }, Some(*b), *acc)).collect();
            let mut c = PrCounter::default();
            for p in &pairs {
                c.push(p);
            }
            prop_assert_eq!(c.finish(reach), association_pr(&pairs, reach));
        }

        #[test]
        fn ap_depends_on_ranking_only(flags in proptest::collection::vec(any::<bool>(), 1..30), extra in 0usize..5) {
            let n = flags.len();
            let ranked: Vec<(f64, bool)> = flags.iter().enumerate().map(|(i, f)| (1.0 - i as f64 / n as f64, *f)).collect();
            let rescaled: Vec<(f64, bool)> = ranked.iter().map(|(s, f)| (s.powi(3) * 7.0 + 2.0, *f)).collect();
            let n_gt = flags.iter().filter(|f| **f).count() + extra;
            let a = average_precision_ranked(&ranked, n_gt);
            prop_assert_eq!(a, average_precision_ranked(&rescaled, n_gt));
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn iou_symmetric_bounded(x1 in 0.0f64..50.0, y1 in 0.0f64..50.0, w1 in 1.0f64..30.0, h1 in 1.0f64..30.0,
                                 x2 in 0.0f64..50.0, y2 in 0.0f64..50.0, w2 in 1.0f64..30.0, h2 in 1.0f64..30.0) {
            let a = BBox::new(x1, y1, x1 + w1, y1 + h1);
            let b = BBox::new(x2, y2, x2 + w2, y2 + h2);
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
        }
    }

    #[test]
    fn best_tau_prefers_smallest_on_ties() {
        let pt = |tau: f64, f: f64| SweepPoint {
            tau,
            pr: AssociationPr {
                accepted: 1,
                true_positives: 1,
                reachable: 1,
                precision: Some(1.0),
                recall: Some(1.0),
                f1: f,
            },
        };
        assert_eq!(best_tau(&[pt(0.1, 0.5), pt(0.2, 0.9), pt(0.3, 0.9)]), Some(0.2));
        assert_eq!(best_tau(&[]), None);
        assert_eq!(tau_grid(1.0, 4), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
