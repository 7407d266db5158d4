//! Cross-camera pair construction: epipolar pruning, tracking augmentation,
//! reID gating and training-set assembly.
//!
//! The teacher side of a pair is any detection on a camera that shares view
//! with the student camera; the student side is drawn from the student
//! camera's uncertain tier (configurable for ablations).

use std::collections::BTreeMap;
use std::ops::Range;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bbox_epipolar_band, fundamental_matrix, CameraModel, FundamentalMatrix, GeometryError};
use crate::labels::{DetectionStreams, PseudoLabel, Tier};
use crate::tracker::{track_n, FrameSource, Tracklet, DEFAULT_HORIZON, DEFAULT_IOU_MIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("aggregated feature has zero norm")]
    ZeroVector,
    #[error("aggregated features differ in length ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("no calibration for camera {0}")]
    MissingCalibration(String),
    #[error("no detections for camera {0}")]
    MissingDetections(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Which pixel of a student box is tested against a teacher band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPoint {
    #[default]
    Center,
    AnyCorner,
}

/// Student-side tier routing. `Uncertain` is the default; the others exist
/// for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentTier {
    #[default]
    Uncertain,
    Confident,
    Both,
}

impl StudentTier {
    pub fn admits(&self, tier: Tier) -> bool {
        match self {
            StudentTier::Uncertain => tier == Tier::Uncertain,
            StudentTier::Confident => tier == Tier::Confident,
            StudentTier::Both => matches!(tier, Tier::Confident | Tier::Uncertain),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationConfig {
    /// Band dilation in pixels.
    pub epsilon: f64,
    /// Aggregated feature distance threshold.
    pub tau: f64,
    pub horizon: usize,
    /// Student frames `i - window ..= i + window` are searched for teacher frame `i`.
    pub window: u64,
    pub query: QueryPoint,
    pub iou_min: f64,
    pub student_tier: StudentTier,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            epsilon: 6.0,
            tau: 0.6,
            horizon: DEFAULT_HORIZON,
            window: 0,
            query: QueryPoint::Center,
            iou_min: DEFAULT_IOU_MIN,
            student_tier: StudentTier::Uncertain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub teacher: PseudoLabel,
    pub student: PseudoLabel,
    /// Positions in the teacher and student slices given to [`prune_candidates`].
    pub teacher_index: usize,
    pub student_index: usize,
    /// Depth of the student query point inside the dilated band, pixels.
    pub band_margin: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pruning {
    pub candidates: Vec<CandidatePair>,
    pub n_teacher: usize,
    pub n_student: usize,
    /// Teacher boxes whose band could not be formed (corner on the epipole).
    pub skipped_teachers: usize,
}

impl Pruning {
    /// `|teacher| * |student| / max(1, |candidates|)`, at least 1.
    pub fn pruning_factor(&self) -> f64 {
        pruning_factor(self.n_teacher * self.n_student, self.candidates.len())
    }
}

pub fn pruning_factor(all_pairs: usize, candidates: usize) -> f64 {
    if all_pairs == 0 {
        return 1.0;
    }
    (all_pairs as f64 / candidates.max(1) as f64).max(1.0)
}

/// Keeps the (teacher, student) pairs whose student query point lies in the
/// teacher box's epipolar band. `f` must map teacher pixels to student lines.
pub fn prune_candidates(
    teacher_dets: &[PseudoLabel],
    student_dets: &[PseudoLabel],
    f: &FundamentalMatrix,
    epsilon: f64,
    query: QueryPoint,
) -> Pruning {
    let mut out = Pruning {
        n_teacher: teacher_dets.len(),
        n_student: student_dets.len(),
        ..Pruning::default()
    };
    for (ti, teacher) in teacher_dets.iter().enumerate() {
        let band = match bbox_epipolar_band(f, &teacher.bbox, epsilon) {
            Ok(b) => b,
            Err(_) => {
                out.skipped_teachers += 1;
                continue;
            }
        };
        for (si, student) in student_dets.iter().enumerate() {
            let margin = match query {
                QueryPoint::Center => band.margin(student.bbox.center()),
                QueryPoint::AnyCorner => student
                    .bbox
                    .corners()
                    .iter()
                    .map(|c| band.margin(*c))
                    .fold(f64::NEG_INFINITY, f64::max),
            };
            let contained = match query {
                QueryPoint::Center => band.contains(student.bbox.center()),
                QueryPoint::AnyCorner => student.bbox.corners().iter().any(|c| band.contains(*c)),
            };
            if contained {
                out.candidates.push(CandidatePair {
                    teacher: teacher.clone(),
                    student: student.clone(),
                    teacher_index: ti,
                    student_index: si,
                    band_margin: margin.max(0.0),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackletPair {
    /// Student-camera tracklet.
    pub a: Tracklet,
    /// Teacher-camera tracklet.
    pub b: Tracklet,
    pub distance: Option<f64>,
    pub accepted: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl TrackletPair {
    pub fn is_accepted(&self) -> bool {
        self.accepted == Some(true)
    }

    /// Both seeds carry the same ground-truth identity.
    pub fn is_true_match(&self) -> bool {
        matches!(
            (self.a.gt_identities.first(), self.b.gt_identities.first()),
            (Some(Some(x)), Some(Some(y))) if x == y
        )
    }
}

/// Tracks both sides of a candidate over `horizon` subsequent frames, each
/// on its own camera.
pub fn augment_with_tracking<S>(
    pair: &CandidatePair,
    student_frames: &S,
    teacher_frames: &S,
    horizon: usize,
    iou_min: f64,
) -> TrackletPair
where
    S: FrameSource + ?Sized,
{
    TrackletPair {
        a: track_n(&pair.student, student_frames, horizon, iou_min),
        b: track_n(&pair.teacher, teacher_frames, horizon, iou_min),
        distance: None,
        accepted: None,
        diagnostic: None,
    }
}

/// Element-wise mean of a tracklet's embeddings, L2-normalized.
pub fn aggregate_feature(tracklet: &Tracklet) -> Result<Vec<f64>, AssociationError> {
    let n = tracklet.embeddings.len();
    let dim = tracklet.embeddings.first().map(Vec::len).unwrap_or(0);
    if n == 0 || dim == 0 {
        return Err(AssociationError::ZeroVector);
    }
    let mut mean = vec![0.0; dim];
    for e in &tracklet.embeddings {
        if e.len() != dim {
            return Err(AssociationError::DimMismatch(dim, e.len()));
        }
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(AssociationError::ZeroVector);
    }
    Ok(mean.into_iter().map(|x| x / norm).collect())
}

pub fn feature_distance(pair: &TrackletPair) -> Result<f64, AssociationError> {
    let fa = aggregate_feature(&pair.a)?;
    let fb = aggregate_feature(&pair.b)?;
    if fa.len() != fb.len() {
        return Err(AssociationError::DimMismatch(fa.len(), fb.len()));
    }
    Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Sets `distance` and `accepted = distance <= tau`. A zero aggregate is a
/// rejection with a diagnostic.
pub fn reid_gate(mut pair: TrackletPair, tau: f64) -> TrackletPair {
    match feature_distance(&pair) {
        Ok(d) => {
            pair.distance = Some(d);
            pair.accepted = Some(d <= tau);
            pair.diagnostic = None;
        }
        Err(e) => {
            pair.distance = None;
            pair.accepted = Some(false);
            pair.diagnostic = Some(e.to_string());
        }
    }
    pair
}

/// Identifies a detection by camera, frame and position within the frame.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DetectionKey {
    pub camera_id: String,
    pub frame: u64,
    pub index: usize,
}

/// A gated pair with its canonical ordering keys.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyedPair {
    pub teacher: DetectionKey,
    pub student: DetectionKey,
    pub pair: TrackletPair,
}

impl KeyedPair {
    fn canonical_key(&self) -> (u64, &str, usize, u64, usize) {
        (
            self.teacher.frame,
            self.teacher.camera_id.as_str(),
            self.teacher.index,
            self.student.frame,
            self.student.index,
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationStats {
    /// Sum over seed frames and teacher cameras of `|teacher| * |student|`.
    pub all_pairs: usize,
    pub candidates: usize,
    pub skipped_teachers: usize,
    /// Teacher cameras that produced at least one candidate.
    pub teacher_cameras_with_candidates: Vec<String>,
}

impl AssociationStats {
    pub fn pruning_factor(&self) -> f64 {
        pruning_factor(self.all_pairs, self.candidates)
    }
}

/// Every candidate pair of a student camera, tracked and scored but not yet
/// thresholded.
#[derive(Debug, Clone, Default)]
pub struct CoarseSet {
    pub student_cam: String,
    pub pairs: Vec<KeyedPair>,
    pub stats: AssociationStats,
}

impl CoarseSet {
    /// Applies the gate at `tau` and keeps, per student box, the accepted
    /// pair with the smallest distance. Output is in canonical order.
    pub fn finalize(&self, tau: f64) -> Vec<TrackletPair> {
        let mut best: BTreeMap<&DetectionKey, &KeyedPair> = BTreeMap::new();
        for kp in &self.pairs {
            let d = match kp.pair.distance {
                Some(d) if d <= tau => d,
                _ => continue,
            };
            match best.get(&kp.student) {
                Some(prev) if prev.pair.distance.unwrap_or(f64::INFINITY) <= d => {}
                _ => {
                    best.insert(&kp.student, kp);
                }
            }
        }
        let mut kept: Vec<&KeyedPair> = best.into_values().collect();
        kept.sort_by(|x, y| x.canonical_key().cmp(&y.canonical_key()));
        kept.into_iter()
            .map(|kp| {
                let mut p = kp.pair.clone();
                p.accepted = Some(true);
                p
            })
            .collect()
    }
}

/// Seed frames of a block: those whose tracking horizon stays inside it.
pub fn seed_frames(frames: &Range<u64>, horizon: usize) -> Range<u64> {
    let end = frames.end.saturating_sub(horizon as u64).max(frames.start);
    frames.start..end
}

fn camera<'a>(cams: &'a [CameraModel], id: &str) -> Result<&'a CameraModel, AssociationError> {
    cams.iter()
        .find(|c| c.id == id)
        .ok_or_else(|| AssociationError::MissingCalibration(id.to_string()))
}

/// Prunes, tracks and scores every candidate pair for one student camera
/// over the seed frames of `frames`. Detections must carry tiers.
pub fn coarse_pairs(
    student_cam: &str,
    detections: &DetectionStreams,
    cameras: &[CameraModel],
    config: &AssociationConfig,
    frames: Range<u64>,
) -> Result<CoarseSet, AssociationError> {
    let student = camera(cameras, student_cam)?;
    let student_stream = detections
        .get(student_cam)
        .ok_or_else(|| AssociationError::MissingDetections(student_cam.to_string()))?;
    let seeds = seed_frames(&frames, config.horizon);
    let mut set = CoarseSet {
        student_cam: student_cam.to_string(),
        ..CoarseSet::default()
    };

    for (teacher_id, teacher_stream) in detections {
        if teacher_id == student_cam {
            continue;
        }
        let teacher = camera(cameras, teacher_id)?;
        let f = match fundamental_matrix(teacher, student) {
            Ok(f) => f,
            Err(e @ GeometryError::DegenerateGeometry { .. }) => {
                warn!("skipping teacher {teacher_id}: {e}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let mut produced = false;
        for i in seeds.clone() {
            let teacher_dets = teacher_stream.detections(i);
            let lo = i.saturating_sub(config.window).max(frames.start);
            let hi = (i + config.window).min(seeds.end.saturating_sub(1));
            let mut students = Vec::new();
            let mut student_keys = Vec::new();
            for j in lo..=hi {
                for (idx, det) in student_stream.detections(j).iter().enumerate() {
                    if config.student_tier.admits(det.tier) {
                        students.push(det.clone());
                        student_keys.push(DetectionKey {
                            camera_id: student_cam.to_string(),
                            frame: j,
                            index: idx,
                        });
                    }
                }
            }
            let pruning = prune_candidates(teacher_dets, &students, &f, config.epsilon, config.query);
            set.stats.all_pairs += pruning.n_teacher * pruning.n_student;
            set.stats.candidates += pruning.candidates.len();
            set.stats.skipped_teachers += pruning.skipped_teachers;
            produced |= !pruning.candidates.is_empty();
            for cand in &pruning.candidates {
                let coarse = augment_with_tracking(
                    cand,
                    student_stream.as_slice(),
                    teacher_stream.as_slice(),
                    config.horizon,
                    config.iou_min,
                );
                set.pairs.push(KeyedPair {
                    teacher: DetectionKey {
                        camera_id: teacher_id.clone(),
                        frame: i,
                        index: cand.teacher_index,
                    },
                    student: student_keys[cand.student_index].clone(),
                    pair: reid_gate(coarse, f64::INFINITY),
                });
            }
        }
        if produced {
            set.stats.teacher_cameras_with_candidates.push(teacher_id.clone());
        }
    }
    set.pairs.sort_by(|x, y| x.canonical_key().cmp(&y.canonical_key()));
    for kp in set.pairs.iter_mut() {
        // distances are final; acceptance is decided by `finalize`
        kp.pair.accepted = None;
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSets {
    pub student_cam: String,
    /// Accepted cross-camera tracklet pairs (non-camera-specific data).
    pub ncs_pairs: Vec<TrackletPair>,
    /// Confident labels of the student camera (camera-specific data).
    pub cs_labels: Vec<PseudoLabel>,
    pub stats: AssociationStats,
    pub warnings: Vec<String>,
}

pub const NO_OVERLAP_WARNING: &str = "no shared FOV: no teacher camera produced candidates";

/// Builds both training sets for `student_cam` over the frame block `frames`.
pub fn build_training_sets(
    student_cam: &str,
    detections: &DetectionStreams,
    cameras: &[CameraModel],
    config: &AssociationConfig,
    frames: Range<u64>,
) -> Result<TrainingSets, AssociationError> {
    let coarse = coarse_pairs(student_cam, detections, cameras, config, frames.clone())?;
    Ok(assemble(coarse, detections, config.tau, frames))
}

/// Thresholds a coarse set and attaches the student camera's confident labels.
pub fn assemble(coarse: CoarseSet, detections: &DetectionStreams, tau: f64, frames: Range<u64>) -> TrainingSets {
    let ncs_pairs = coarse.finalize(tau);
    let cs_labels: Vec<PseudoLabel> = detections
        .get(&coarse.student_cam)
        .map(|stream| {
            frames
                .clone()
                .flat_map(|f| stream.detections(f).iter())
                .filter(|d| d.tier == Tier::Confident)
                .cloned()
                .collect()
        })
        .unwrap_or_default();
    let mut warnings = Vec::new();
    if coarse.stats.teacher_cameras_with_candidates.is_empty() {
        warn!("{}: {NO_OVERLAP_WARNING}", coarse.student_cam);
        warnings.push(NO_OVERLAP_WARNING.to_string());
    }
    TrainingSets {
        student_cam: coarse.student_cam,
        ncs_pairs,
        cs_labels,
        stats: coarse.stats,
        warnings,
    }
}

/// Number of student detections (tier-routed, in seed frames) whose identity
/// also has a detection on some other camera in the search window. This is
/// the recall denominator for association: after deduplication each student
/// box can contribute at most one true pair.
pub fn reachable_true_pairs(
    student_cam: &str,
    detections: &DetectionStreams,
    config: &AssociationConfig,
    frames: Range<u64>,
) -> usize {
    let Some(student_stream) = detections.get(student_cam) else {
        return 0;
    };
    let seeds = seed_frames(&frames, config.horizon);
    let mut count = 0;
    for j in seeds.clone() {
        for det in student_stream.detections(j) {
            let Some(id) = det.gt_identity else { continue };
            if !config.student_tier.admits(det.tier) {
                continue;
            }
            let lo = j.saturating_sub(config.window).max(seeds.start);
            let hi = (j + config.window).min(seeds.end.saturating_sub(1));
            let seen = detections.iter().any(|(cam, stream)| {
                cam != student_cam
                    && (lo..=hi).any(|i| stream.detections(i).iter().any(|t| t.gt_identity == Some(id)))
            });
            if seen {
                count += 1;
            }
        }
    }
    count
}
