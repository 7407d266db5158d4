use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{norm, unit_gaussian, GroundTruth, SceneConfig, SimError};
use crate::bbox::BBox;
use crate::geometry::CameraModel;
use crate::labels::{DetectionStreams, PseudoLabel, Tier};
use crate::rng::substream;

/// Camera-dependent appearance transform `e = A z + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraStyle {
    pub camera_id: String,
    /// Row-major `dim x dim` matrix.
    pub matrix: Vec<Vec<f64>>,
    pub shift: Vec<f64>,
}

impl CameraStyle {
    pub fn identity(camera_id: &str, dim: usize) -> Self {
        let matrix = (0..dim)
            .map(|r| (0..dim).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            camera_id: camera_id.to_string(),
            matrix,
            shift: vec![0.0; dim],
        }
    }

    /// `A = I + scale * G / sqrt(dim)`, `s = scale * g / sqrt(dim)` with
    /// standard normal `G`, `g`.
    pub fn sample(camera_id: &str, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = substream(seed, &format!("style/{camera_id}"));
        let k = scale / (dim as f64).sqrt();
        let mut style = Self::identity(camera_id, dim);
        for row in style.matrix.iter_mut() {
            for v in row.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v += k * g;
            }
        }
        for v in style.shift.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = k * g;
        }
        style
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.shift)
            .map(|(row, s)| row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + s)
            .collect()
    }
}

/// `normalize(A z + s + noise)`, noise `~ N(0, sigma^2 I)`. A degenerate draw
/// is resampled once before failing.
pub fn gen_embedding(
    latent: &[f64],
    style: &CameraStyle,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, SimError> {
    if latent.len() != style.dim() {
        return Err(SimError::Config(format!(
            "latent dim {} does not match style dim {}",
            latent.len(),
            style.dim()
        )));
    }
    let base = style.apply(latent);
    for _ in 0..2 {
        let v: Vec<f64> = base
            .iter()
            .map(|b| {
                let g: f64 = StandardNormal.sample(rng);
                b + sigma * g
            })
            .collect();
        let n = norm(&v);
        if n >= 1e-12 {
            return Ok(v.into_iter().map(|x| x / n).collect());
        }
    }
    Err(SimError::ZeroVector)
}

fn beta(p: super::BetaParams) -> Result<Beta<f64>, SimError> {
    Beta::new(p.alpha, p.beta).map_err(|e| SimError::Config(format!("beta distribution: {e}")))
}

/// Turns ground truth into noisy per-camera detection streams.
///
/// Every visible box draws a score, a miss decision, four jitter offsets, a
/// class-noise decision and an embedding from per-camera streams, whether or
/// not the noise source is enabled, so disabling one source leaves the
/// others' draws untouched.
pub fn render_detections(
    gt: &GroundTruth,
    cameras: &[CameraModel],
    styles: &[CameraStyle],
    config: &SceneConfig,
    seed: u64,
) -> Result<DetectionStreams, SimError> {
    let noise = &config.noise;
    let emb = &config.embedding;
    let tp_score = beta(noise.tp_score)?;
    let fp_score = beta(noise.fp_score)?;
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let fp_count = if noise.fp_rate > 0.0 {
        Some(Poisson::new(noise.fp_rate).map_err(|e| SimError::Config(format!("fp rate: {e}")))?)
    } else {
        None
    };
    let latent_of: BTreeMap<u64, &[f64]> = gt
        .identities
        .iter()
        .map(|i| (i.identity, i.latent.as_slice()))
        .collect();

    let mut out = DetectionStreams::new();
    for (cam, style) in cameras.iter().zip(styles) {
        let stream = |concern: &str| substream(seed, &format!("{concern}/{}", cam.id));
        let mut score_rng = stream("scores");
        let mut miss_rng = stream("misses");
        let mut jitter_rng = stream("jitter");
        let mut class_rng = stream("classes");
        let mut emb_rng = stream("embeddings");
        let mut fp_rng = stream("false-positives");
        let (w, h) = (cam.width as f64, cam.height as f64);

        let mut frames = Vec::with_capacity(gt.frames.len());
        for frame in &gt.frames {
            let mut dets = Vec::new();
            for gt_box in frame.visible(&cam.id) {
                let score: f64 = tp_score.sample(&mut score_rng);
                let miss_draw: f64 = miss_rng.random();
                let offsets: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut jitter_rng));
                let class_draw: f64 = class_rng.random();
                let class_offset = class_rng.random_range(1..emb.n_classes.max(2));
                let latent = latent_of
                    .get(&gt_box.identity)
                    .ok_or_else(|| SimError::Config(format!("unknown identity {}", gt_box.identity)))?;
                let embedding = gen_embedding(latent, style, emb.noise_sigma, &mut emb_rng)?;

                if miss_draw < noise.miss_max * (1.0 - score) {
                    continue;
                }
                let b = gt_box.bbox;
                let s = noise.jitter_sigma;
                let (mut x1, mut y1, mut x2, mut y2) =
                    (b.x1 + s * offsets[0], b.y1 + s * offsets[1], b.x2 + s * offsets[2], b.y2 + s * offsets[3]);
                if x2 - x1 < 1.0 {
                    let c = (x1 + x2) / 2.0;
                    (x1, x2) = (c - 0.5, c + 0.5);
                }
                if y2 - y1 < 1.0 {
                    let c = (y1 + y2) / 2.0;
                    (y1, y2) = (c - 0.5, c + 0.5);
                }
                let class_id = if emb.n_classes > 1 && class_draw < noise.class_noise * (1.0 - score) {
                    (gt_box.class_id - 1 + class_offset) % emb.n_classes + 1
                } else {
                    gt_box.class_id
                };
                dets.push(PseudoLabel {
                    camera_id: cam.id.clone(),
                    frame: frame.frame,
                    bbox: BBox::new(x1, y1, x2, y2),
                    score,
                    class_id,
                    embedding,
                    gt_identity: Some(gt_box.identity),
                    tier: Tier::Unassigned,
                });
            }
            let n_fp = fp_count.map(|p| p.sample(&mut fp_rng) as usize).unwrap_or(0);
            for _ in 0..n_fp {
                let bw = fp_rng.random_range(30.0..80.0f64).min(w);
                let bh = (bw * 1.5).min(h);
                let x1 = fp_rng.random_range(0.0..=(w - bw));
                let y1 = fp_rng.random_range(0.0..=(h - bh));
                let score = fp_score.sample(&mut fp_rng);
                let class_id = fp_rng.random_range(1..=emb.n_classes);
                let embedding = unit_gaussian(&mut fp_rng, emb.dim);
                dets.push(PseudoLabel {
                    camera_id: cam.id.clone(),
                    frame: frame.frame,
                    bbox: BBox::new(x1, y1, x1 + bw, y1 + bh),
                    score,
                    class_id,
                    embedding,
                    gt_identity: None,
                    tier: Tier::Unassigned,
                });
            }
            frames.push(dets);
        }
        out.insert(cam.id.clone(), frames);
    }
    Ok(out)
}
