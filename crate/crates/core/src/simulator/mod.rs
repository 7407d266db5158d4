//! Deterministic synthetic multi-camera world.
//!
//! Objects are axis-aligned cuboids moving on the ground plane `z = 0` with
//! piecewise constant velocity. Cameras sit on a ring around the world,
//! each yawed away from the world center by `(1 - overlap) * 180°`.

mod render;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::geometry::{project_point, CameraModel, GeometryError};
use crate::rng::substream;

pub use crate::labels::DetectionStreams;
pub use render::{gen_embedding, render_detections, CameraStyle};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("embedding collapsed to the zero vector")]
    ZeroVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRigConfig {
    pub ring_radius: f64,
    pub mount_height: f64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    /// Per-camera overlap fraction in [0, 1]; missing entries default to 1.
    pub overlap: Vec<f64>,
}

impl Default for CameraRigConfig {
    fn default() -> Self {
        Self {
            ring_radius: 22.0,
            mount_height: 8.0,
            focal: 1000.0,
            width: 960,
            height: 540,
            overlap: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    /// Speed range in world units per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Per-frame probability of picking a new heading and speed.
    pub turn_prob: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            speed_min: 0.05,
            speed_max: 0.15,
            turn_prob: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorNoise {
    /// Per-coordinate Gaussian jitter in pixels.
    pub jitter_sigma: f64,
    /// Miss probability is `miss_max * (1 - score)`.
    pub miss_max: f64,
    /// Mean number of false positives per camera frame (Poisson).
    pub fp_rate: f64,
    pub tp_score: BetaParams,
    pub fp_score: BetaParams,
    /// Probability of a wrong class is `class_noise * (1 - score)`.
    pub class_noise: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            jitter_sigma: 2.0,
            miss_max: 0.3,
            fp_rate: 1.0,
            tp_score: BetaParams {
                alpha: 5.0,
                beta: 1.5,
            },
            fp_score: BetaParams {
                alpha: 1.5,
                beta: 5.0,
            },
            class_noise: 0.3,
        }
    }
}

impl DetectorNoise {
    pub fn noiseless() -> Self {
        Self {
            jitter_sigma: 0.0,
            miss_max: 0.0,
            fp_rate: 0.0,
            class_noise: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    /// Number of object classes; class ids run from 1, 0 is background.
    pub n_classes: u32,
    /// Weight of the class prototype in each identity latent.
    pub class_separation: f64,
    /// Scale of the per-camera affine style transform.
    pub style_scale: f64,
    /// Per-detection Gaussian noise on the embedding.
    pub noise_sigma: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            n_classes: 2,
            class_separation: 1.0,
            style_scale: 0.15,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_objects: usize,
    pub n_frames: usize,
    pub n_cameras: usize,
    /// The world is the square `[-half_extent, half_extent]^2`.
    pub world_half_extent: f64,
    /// Cuboid footprint side and height, world units.
    pub object_width: f64,
    pub object_height: f64,
    pub motion: MotionConfig,
    pub rig: CameraRigConfig,
    pub noise: DetectorNoise,
    pub embedding: EmbeddingConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_objects: 30,
            n_frames: 200,
            n_cameras: 3,
            world_half_extent: 12.0,
            object_width: 0.6,
            object_height: 1.8,
            motion: MotionConfig::default(),
            rig: CameraRigConfig::default(),
            noise: DetectorNoise::default(),
            embedding: EmbeddingConfig::default(),
        }
    }
}

fn prob(name: &str, v: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(SimError::Config(format!("{name} = {v} is not a probability")))
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let cfg = |m: String| Err(SimError::Config(m));
        if self.n_cameras < 2 {
            return cfg("need at least two cameras".into());
        }
        if self.n_frames == 0 {
            return cfg("n_frames must be positive".into());
        }
        if !(self.world_half_extent > 0.0) {
            return cfg("world bounds must be positive".into());
        }
        if !(self.object_width > 0.0 && self.object_height > 0.0) {
            return cfg("object size must be positive".into());
        }
        if self.object_width >= self.world_half_extent {
            return cfg("objects do not fit inside the world".into());
        }
        let m = &self.motion;
        if !(m.speed_min >= 0.0 && m.speed_max >= m.speed_min) {
            return cfg("invalid speed range".into());
        }
        prob("turn_prob", m.turn_prob)?;
        let r = &self.rig;
        if !(r.ring_radius > self.world_half_extent * 2f64.sqrt()) {
            return cfg("camera ring must lie outside the world".into());
        }
        if !(r.mount_height > self.object_height) || !(r.focal > 0.0) || r.width == 0 || r.height == 0 {
            return cfg("invalid camera rig".into());
        }
        if r.overlap.len() > self.n_cameras {
            return cfg("more overlap entries than cameras".into());
        }
        for v in &r.overlap {
            prob("overlap", *v)?;
        }
        let n = &self.noise;
        if !(n.jitter_sigma >= 0.0) || !(n.fp_rate >= 0.0) {
            return cfg("jitter sigma and fp rate must be non-negative".into());
        }
        prob("miss_max", n.miss_max)?;
        prob("class_noise", n.class_noise)?;
        for b in [n.tp_score, n.fp_score] {
            if !(b.alpha > 0.0 && b.beta > 0.0) {
                return cfg("beta parameters must be positive".into());
            }
        }
        let e = &self.embedding;
        if e.dim < 2 {
            return cfg("embedding dim must be at least 2".into());
        }
        if e.n_classes < 1 {
            return cfg("need at least one object class".into());
        }
        if !(e.style_scale >= 0.0 && e.noise_sigma >= 0.0 && e.class_separation >= 0.0) {
            return cfg("embedding scales must be non-negative".into());
        }
        Ok(())
    }

    pub fn overlap(&self, camera: usize) -> f64 {
        self.rig.overlap.get(camera).copied().unwrap_or(1.0)
    }

    pub fn camera_id(index: usize) -> String {
        format!("cam{index}")
    }
}

/// One annotated object on one camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub identity: u64,
    pub class_id: u32,
    pub bbox: BBox,
    /// All cuboid corners project in front of the camera and inside the image.
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub identity: u64,
    pub class_id: u32,
    /// Ground-plane position of the footprint center.
    pub position: [f64; 2],
}

/// Ground truth for one frame: world state plus per-camera boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtFrame {
    pub frame: u64,
    pub objects: Vec<ObjectState>,
    /// Keyed by camera id; boxes for every object projectable in that camera.
    pub cameras: BTreeMap<String, Vec<GtBox>>,
}

impl GtFrame {
    pub fn visible(&self, camera: &str) -> impl Iterator<Item = &GtBox> {
        self.cameras
            .get(camera)
            .into_iter()
            .flatten()
            .filter(|b| b.visible)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub identity: u64,
    pub class_id: u32,
    /// Unit-norm appearance latent.
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub frames: Vec<GtFrame>,
    pub identities: Vec<Identity>,
    pub object_width: f64,
    pub object_height: f64,
}

impl GroundTruth {
    /// 3D center of an object's cuboid at a frame.
    pub fn object_center(&self, frame: usize, identity: u64) -> Option<Vector3<f64>> {
        self.frames[frame]
            .objects
            .iter()
            .find(|o| o.identity == identity)
            .map(|o| Vector3::new(o.position[0], o.position[1], self.object_height / 2.0))
    }

    pub fn class_of(&self, identity: u64) -> Option<u32> {
        self.identities
            .iter()
            .find(|i| i.identity == identity)
            .map(|i| i.class_id)
    }

    /// Boxes on `camera` at `frame`, visible only.
    pub fn visible_boxes(&self, frame: usize, camera: &str) -> Vec<GtBox> {
        self.frames
            .get(frame)
            .map(|f| f.visible(camera).cloned().collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub cameras: Vec<CameraModel>,
    pub gt: GroundTruth,
    pub styles: Vec<CameraStyle>,
}

pub(crate) fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Places the camera rig described by `config`.
pub fn build_cameras(config: &SceneConfig) -> Result<Vec<CameraModel>, SimError> {
    let rig = &config.rig;
    let k = Matrix3::new(
        rig.focal,
        0.0,
        rig.width as f64 / 2.0,
        0.0,
        rig.focal,
        rig.height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let up = Vector3::new(0.0, 0.0, 1.0);
    (0..config.n_cameras)
        .map(|c| {
            let angle = 2.0 * PI * c as f64 / config.n_cameras as f64;
            let ground = Vector3::new(rig.ring_radius * angle.cos(), rig.ring_radius * angle.sin(), 0.0);
            let inward = (angle + PI) + (1.0 - config.overlap(c)) * PI;
            let target = ground + Vector3::new(inward.cos(), inward.sin(), 0.0) * rig.ring_radius;
            let eye = ground + Vector3::new(0.0, 0.0, rig.mount_height);
            CameraModel::look_at(SceneConfig::camera_id(c), k, eye, target, up, rig.width, rig.height)
                .map_err(SimError::from)
        })
        .collect()
}

/// Projects the cuboid of an object at `position` into `cam`. Returns `None`
/// when any corner is behind the camera.
pub fn project_cuboid(
    cam: &CameraModel,
    position: [f64; 2],
    width: f64,
    height: f64,
) -> Option<(BBox, bool)> {
    let hw = width / 2.0;
    let mut x1 = f64::INFINITY;
    let mut y1 = f64::INFINITY;
    let mut x2 = f64::NEG_INFINITY;
    let mut y2 = f64::NEG_INFINITY;
    let mut all_in = true;
    for (dx, dy, z) in [
        (-hw, -hw, 0.0),
        (hw, -hw, 0.0),
        (hw, hw, 0.0),
        (-hw, hw, 0.0),
        (-hw, -hw, height),
        (hw, -hw, height),
        (hw, hw, height),
        (-hw, hw, height),
    ] {
        let p = Vector3::new(position[0] + dx, position[1] + dy, z);
        let proj = project_point(cam, &p).ok()?;
        if proj.depth <= 0.0 {
            return None;
        }
        all_in &= proj.in_frustum;
        x1 = x1.min(proj.pixel[0]);
        y1 = y1.min(proj.pixel[1]);
        x2 = x2.max(proj.pixel[0]);
        y2 = y2.max(proj.pixel[1]);
    }
    Some((BBox::new(x1, y1, x2, y2), all_in))
}

fn simulate_trajectories(config: &SceneConfig, seed: u64) -> Vec<Vec<[f64; 2]>> {
    let mut rng = substream(seed, "trajectories");
    let b = config.world_half_extent - config.object_width;
    let m = &config.motion;
    let heading = |rng: &mut rand_chacha::ChaCha8Rng| {
        let theta = rng.random_range(0.0..2.0 * PI);
        let speed = if m.speed_max > m.speed_min {
            rng.random_range(m.speed_min..m.speed_max)
        } else {
            m.speed_min
        };
        [speed * theta.cos(), speed * theta.sin()]
    };
    let mut pos: Vec<[f64; 2]> = (0..config.n_objects)
        .map(|_| [rng.random_range(-b..b), rng.random_range(-b..b)])
        .collect();
    let mut vel: Vec<[f64; 2]> = (0..config.n_objects).map(|_| heading(&mut rng)).collect();
    let mut frames = Vec::with_capacity(config.n_frames);
    for f in 0..config.n_frames {
        if f > 0 {
            for (p, v) in pos.iter_mut().zip(vel.iter_mut()) {
                // draw unconditionally so the stream layout does not depend on turn_prob
                let turn: f64 = rng.random();
                let fresh = heading(&mut rng);
                if turn < m.turn_prob {
                    *v = fresh;
                }
                for axis in 0..2 {
                    p[axis] += v[axis];
                    if p[axis] > b {
                        p[axis] = 2.0 * b - p[axis];
                        v[axis] = -v[axis];
                    } else if p[axis] < -b {
                        p[axis] = -2.0 * b - p[axis];
                        v[axis] = -v[axis];
                    }
                }
            }
        }
        frames.push(pos.clone());
    }
    frames
}

fn gen_identities(config: &SceneConfig, seed: u64) -> Result<Vec<Identity>, SimError> {
    identities_from(config, seed, "identities", config.n_objects)
}

/// `n` identities drawn around the scene's class prototypes from stream `stream`.
fn identities_from(config: &SceneConfig, seed: u64, stream: &str, n: usize) -> Result<Vec<Identity>, SimError> {
    let e = &config.embedding;
    let mut proto_rng = substream(seed, "prototypes");
    let prototypes: Vec<Vec<f64>> = (0..e.n_classes).map(|_| unit_gaussian(&mut proto_rng, e.dim)).collect();
    let mut rng = substream(seed, stream);
    let scale = 1.0 / (e.dim as f64).sqrt();
    (0..n)
        .map(|i| {
            let class_id = rng.random_range(1..=e.n_classes);
            let proto = &prototypes[(class_id - 1) as usize];
            let raw: Vec<f64> = proto
                .iter()
                .map(|p| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    e.class_separation * p + g * scale
                })
                .collect();
            let n = norm(&raw);
            if n < 1e-12 {
                return Err(SimError::ZeroVector);
            }
            Ok(Identity {
                identity: i as u64,
                class_id,
                latent: raw.into_iter().map(|x| x / n).collect(),
            })
        })
        .collect()
}

/// Labelled descriptors from a separate source domain: fresh identities of
/// the same classes seen through a camera style outside the rig. Returns
/// `(embedding, class_id)` pairs, `draws` per identity.
pub fn source_domain_samples(
    config: &SceneConfig,
    seed: u64,
    n_identities: usize,
    draws: usize,
) -> Result<Vec<(Vec<f64>, u32)>, SimError> {
    let e = &config.embedding;
    let identities = identities_from(config, seed, "source/identities", n_identities)?;
    let style = CameraStyle::sample("source", e.dim, e.style_scale, seed);
    let mut rng = substream(seed, "source/embeddings");
    let mut out = Vec::with_capacity(n_identities * draws);
    for id in &identities {
        for _ in 0..draws {
            out.push((gen_embedding(&id.latent, &style, e.noise_sigma, &mut rng)?, id.class_id));
        }
    }
    Ok(out)
}

/// Generates trajectories, cameras, camera styles and ground-truth boxes.
pub fn gen_scene(config: &SceneConfig, seed: u64) -> Result<Scene, SimError> {
    config.validate()?;
    let cameras = build_cameras(config)?;
    let identities = gen_identities(config, seed)?;
    let trajectories = simulate_trajectories(config, seed);
    let styles = cameras
        .iter()
        .map(|c| CameraStyle::sample(&c.id, config.embedding.dim, config.embedding.style_scale, seed))
        .collect();

    let frames = trajectories
        .iter()
        .enumerate()
        .map(|(f, positions)| {
            let objects: Vec<ObjectState> = positions
                .iter()
                .zip(&identities)
                .map(|(p, id)| ObjectState {
                    identity: id.identity,
                    class_id: id.class_id,
                    position: *p,
                })
                .collect();
            let cams = cameras
                .iter()
                .map(|cam| {
                    let boxes = objects
                        .iter()
                        .filter_map(|o| {
                            project_cuboid(cam, o.position, config.object_width, config.object_height).map(
                                |(bbox, visible)| GtBox {
                                    identity: o.identity,
                                    class_id: o.class_id,
                                    bbox,
                                    visible,
                                },
                            )
                        })
                        .collect();
                    (cam.id.clone(), boxes)
                })
                .collect();
            GtFrame {
                frame: f as u64,
                objects,
                cameras: cams,
            }
        })
        .collect();

    Ok(Scene {
        cameras,
        gt: GroundTruth {
            frames,
            identities,
            object_width: config.object_width,
            object_height: config.object_height,
        },
        styles,
    })
}
