use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;

pub const DEFAULT_T_CLS: f64 = 0.8;

/// Detections per camera id, indexed by frame.
pub type DetectionStreams = BTreeMap<String, Vec<Vec<PseudoLabel>>>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("classification threshold {0} is outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("invalid pseudo-label: {0}")]
    InvalidLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Confident,
    Uncertain,
    #[default]
    Unassigned,
}

impl Tier {
    pub fn is_unassigned(&self) -> bool {
        matches!(self, Tier::Unassigned)
    }
}

/// One detected box on one camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabel {
    pub camera_id: String,
    pub frame: u64,
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u32,
    pub embedding: Vec<f64>,
    pub gt_identity: Option<u64>,
    #[serde(default, skip_serializing_if = "Tier::is_unassigned")]
    pub tier: Tier,
}

impl PseudoLabel {
    pub fn validate(&self) -> Result<(), LabelError> {
        if !self.bbox.is_valid() {
            return Err(LabelError::InvalidLabel(format!(
                "{}@{}: degenerate box {:?}",
                self.camera_id, self.frame, self.bbox
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(LabelError::InvalidLabel(format!(
                "{}@{}: score {} outside [0, 1]",
                self.camera_id, self.frame, self.score
            )));
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(LabelError::InvalidLabel(format!(
                "{}@{}: non-finite embedding",
                self.camera_id, self.frame
            )));
        }
        Ok(())
    }
}

/// Tier lookup for a single score; the boundary `score == t_cls` is confident.
pub fn tier_for(score: f64, t_cls: f64) -> Tier {
    if score >= t_cls {
        Tier::Confident
    } else {
        Tier::Uncertain
    }
}

pub fn check_threshold(t_cls: f64) -> Result<(), LabelError> {
    if t_cls > 0.0 && t_cls < 1.0 {
        Ok(())
    } else {
        Err(LabelError::InvalidThreshold(t_cls))
    }
}

/// Splits detections into confident (`score >= t_cls`) and uncertain labels,
/// preserving input order and stamping the tier on each label.
pub fn split_labels(
    detections: impl IntoIterator<Item = PseudoLabel>,
    t_cls: f64,
) -> Result<(Vec<PseudoLabel>, Vec<PseudoLabel>), LabelError> {
    check_threshold(t_cls)?;
    let mut confident = Vec::new();
    let mut uncertain = Vec::new();
    for mut det in detections {
        det.tier = tier_for(det.score, t_cls);
        match det.tier {
            Tier::Confident => confident.push(det),
            _ => uncertain.push(det),
        }
    }
    Ok((confident, uncertain))
}

/// Stamps tiers in place without reordering.
pub fn assign_tiers(detections: &mut [PseudoLabel], t_cls: f64) -> Result<(), LabelError> {
    check_threshold(t_cls)?;
    for det in detections {
        det.tier = tier_for(det.score, t_cls);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(score: f64) -> PseudoLabel {
        PseudoLabel {
            camera_id: "c0".into(),
            frame: 0,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            score,
            class_id: 1,
            embedding: vec![1.0, 0.0],
            gt_identity: None,
            tier: Tier::Unassigned,
        }
    }

    #[test]
    fn boundary_goes_to_confident() {
        let (c, u) = split_labels([0.95, 0.80, 0.79].map(det), 0.8).unwrap();
        assert_eq!(c.iter().map(|d| d.score).collect::<Vec<_>>(), vec![0.95, 0.80]);
        assert_eq!(u.iter().map(|d| d.score).collect::<Vec<_>>(), vec![0.79]);
        assert!(c.iter().all(|d| d.tier == Tier::Confident));
        assert!(u.iter().all(|d| d.tier == Tier::Uncertain));
    }

    #[test]
    fn empty_input() {
        let (c, u) = split_labels(Vec::new(), DEFAULT_T_CLS).unwrap();
        assert!(c.is_empty() && u.is_empty());
    }

    #[test]
    fn rejects_bad_thresholds() {
        for t in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(split_labels(vec![det(0.5)], t).is_err());
        }
    }

    #[test]
    fn tier_serialization() {
        let mut d = det(0.5);
        let plain = serde_json::to_string(&d).unwrap();
        assert!(!plain.contains("tier"));
        d.tier = Tier::Uncertain;
        let tiered = serde_json::to_string(&d).unwrap();
        assert!(tiered.ends_with(r#""tier":"uncertain"}"#));
        let back: PseudoLabel = serde_json::from_str(&tiered).unwrap();
        assert_eq!(back, d);
        assert!(serde_json::from_str::<PseudoLabel>(r#"{"camera_id":"a","frame":0,"bbox":[0,0,1,1],"score":0.5,"class_id":0,"embedding":[],"gt_identity":null,"extra":1}"#).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(scores in proptest::collection::vec(0.0f64..=1.0, 0..40), t in 0.01f64..0.99) {
            let input: Vec<_> = scores.iter().copied().map(det).collect();
            let (c, u) = split_labels(input.clone(), t).unwrap();
            prop_assert_eq!(c.len() + u.len(), input.len());
            prop_assert!(c.iter().all(|d| d.score >= t));
            prop_assert!(u.iter().all(|d| d.score < t));
            // order preserved within each tier
            let expect_c: Vec<f64> = scores.iter().copied().filter(|s| *s >= t).collect();
            prop_assert_eq!(c.iter().map(|d| d.score).collect::<Vec<_>>(), expect_c);
        }

        #[test]
        fn raising_threshold_never_promotes(scores in proptest::collection::vec(0.0f64..=1.0, 0..40), t in 0.01f64..0.9, dt in 0.0f64..0.09) {
            let input: Vec<_> = scores.iter().copied().map(det).collect();
            let (c_hi, _) = split_labels(input.clone(), t + dt).unwrap();
            let (c_lo, _) = split_labels(input, t).unwrap();
            prop_assert!(c_hi.len() <= c_lo.len());
            prop_assert!(c_hi.iter().all(|d| d.score >= t));
        }
    }
}
