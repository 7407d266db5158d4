//! Camera-local single-object tracker: constant-velocity prediction plus
//! greedy IoU association against the next frame's detections.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::labels::PseudoLabel;

pub const DEFAULT_HORIZON: usize = 4;
pub const DEFAULT_IOU_MIN: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub camera_id: String,
    pub start_frame: u64,
    pub boxes: Vec<BBox>,
    /// Missed steps carry the last observed embedding forward.
    pub embeddings: Vec<Vec<f64>>,
    pub observed: Vec<bool>,
    /// Ground-truth identity of each matched detection (evaluation only).
    pub gt_identities: Vec<Option<u64>>,
}

impl Tracklet {
    pub fn seed(det: &PseudoLabel) -> Self {
        Self {
            camera_id: det.camera_id.clone(),
            start_frame: det.frame,
            boxes: vec![det.bbox],
            embeddings: vec![det.embedding.clone()],
            observed: vec![true],
            gt_identities: vec![det.gt_identity],
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Frame index of the next step to be appended.
    pub fn next_frame(&self) -> u64 {
        self.start_frame + self.len() as u64
    }

    pub fn predict_next(&self) -> BBox {
        let n = self.boxes.len();
        let tail = &self.boxes[n.saturating_sub(2)..];
        predict(tail)
    }
}

/// Constant-velocity extrapolation from the last one or two boxes: the
/// center moves by the last displacement and the size of the last box is kept.
pub fn predict(prev: &[BBox]) -> BBox {
    match prev {
        [] => panic!("predict needs at least one box"),
        [only] => *only,
        [.., before, last] => {
            let [cx0, cy0] = before.center();
            let [cx1, cy1] = last.center();
            last.translated(cx1 - cx0, cy1 - cy0)
        }
    }
}

/// Advances `track` by one frame. The detection with the highest IoU against
/// the prediction is taken when that IoU reaches `iou_min`; ties go to the
/// lowest index. Otherwise the prediction itself is appended as unobserved.
pub fn step(track: &mut Tracklet, detections: &[PseudoLabel], iou_min: f64) {
    let predicted = track.predict_next();
    let mut best: Option<(usize, f64)> = None;
    for (i, det) in detections.iter().enumerate() {
        debug_assert_eq!(det.camera_id, track.camera_id);
        let iou = predicted.iou(&det.bbox);
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    match best {
        Some((i, iou)) if iou >= iou_min => {
            let det = &detections[i];
            track.boxes.push(det.bbox);
            track.embeddings.push(det.embedding.clone());
            track.observed.push(true);
            track.gt_identities.push(det.gt_identity);
        }
        _ => {
            let carried = track.embeddings.last().cloned().unwrap_or_default();
            track.boxes.push(predicted);
            track.embeddings.push(carried);
            track.observed.push(false);
            track.gt_identities.push(None);
        }
    }
}

/// Read access to one camera's detections by absolute frame index.
pub trait FrameSource {
    fn detections(&self, frame: u64) -> &[PseudoLabel];
}

impl FrameSource for [Vec<PseudoLabel>] {
    fn detections(&self, frame: u64) -> &[PseudoLabel] {
        usize::try_from(frame)
            .ok()
            .and_then(|i| self.get(i))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

impl FrameSource for Vec<Vec<PseudoLabel>> {
    fn detections(&self, frame: u64) -> &[PseudoLabel] {
        self.as_slice().detections(frame)
    }
}

/// Tracks `seed` through the `n` frames that follow it. Frames absent from
/// `frames` count as empty.
pub fn track_n<S>(seed: &PseudoLabel, frames: &S, n: usize, iou_min: f64) -> Tracklet
where
    S: FrameSource + ?Sized,
{
    let mut track = Tracklet::seed(seed);
    for _ in 0..n {
        let dets = frames.detections(track.next_frame());
        step(&mut track, dets, iou_min);
    }
    track
}
