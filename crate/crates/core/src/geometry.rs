//! Pinhole cameras, fundamental matrices and epipolar bands.
//!
//! Conventions:
//! - Extrinsics map world to camera: `X_cam = R * X_world + t`.
//! - A [`FundamentalMatrix`] built from `(src, dst)` maps a pixel in `src` to
//!   a line in `dst`, so that `p_dst^T F p_src = 0` for every true
//!   correspondence.
//! - Stored fundamental matrices are scaled to unit Frobenius norm.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::bbox::BBox;

/// Tolerance on `R^T R = I` and `det(R) = 1`.
pub const ROTATION_TOL: f64 = 1e-9;
/// Relative translations shorter than this have no epipolar geometry.
pub const MIN_BASELINE: f64 = 1e-12;
/// An epipolar line whose `a^2 + b^2` (unit-Frobenius `F`, `p = (x, y, 1)`)
/// falls below this value is treated as null: `p` sits on the epipole.
pub const NULL_LINE_EPS: f64 = 1e-18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("camera {id}: {reason}")]
    InvalidCamera { id: String, reason: String },
    #[error("degenerate geometry between {src} and {dst}: baseline {baseline:e} is too short")]
    DegenerateGeometry {
        src: String,
        dst: String,
        baseline: f64,
    },
    #[error("bounding box corner {corner} maps to a null epipolar line")]
    DegenerateBand { corner: usize },
    #[error("invalid bounding box or margin: {0}")]
    InvalidBand(String),
    #[error("point lies at the camera center")]
    PointAtCameraCenter,
}

/// Intrinsics, world-to-camera extrinsics and image size of one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub id: String,
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(
        id: impl Into<String>,
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            id: id.into(),
            k,
            r,
            t,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera looking from `eye` at `target` with world `up` (all world frame).
    ///
    /// Camera axes are x right, y down, z forward.
    pub fn look_at(
        id: impl Into<String>,
        k: Matrix3<f64>,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let id = id.into();
        let forward = target - eye;
        let right = forward.cross(&up);
        if forward.norm() < 1e-12 || right.norm() < 1e-12 {
            return Err(GeometryError::InvalidCamera {
                id,
                reason: "look-at direction is degenerate".into(),
            });
        }
        let z = forward.normalize();
        let x = right.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        Self::new(id, k, r, t, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let fail = |reason: &str| {
            Err(GeometryError::InvalidCamera {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.k.iter().chain(self.r.iter()).chain(self.t.iter()).any(|v| !v.is_finite()) {
            return fail("non-finite entries");
        }
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return fail("intrinsic matrix is not upper-triangular");
        }
        if k[(2, 2)] != 1.0 {
            return fail("intrinsic matrix must have K[2][2] = 1");
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return fail("focal lengths must be positive");
        }
        let ortho = (self.r.transpose() * self.r - Matrix3::identity()).norm();
        if ortho > ROTATION_TOL {
            return fail("rotation is not orthonormal");
        }
        if (self.r.determinant() - 1.0).abs() > ROTATION_TOL {
            return fail("rotation determinant is not +1");
        }
        if self.width == 0 || self.height == 0 {
            return fail("image size must be positive");
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    pub fn contains_pixel(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[0] <= self.width as f64 && p[1] >= 0.0 && p[1] <= self.height as f64
    }
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub in_frustum: bool,
}

/// Projects a world point through `cam`.
pub fn project_point(cam: &CameraModel, point: &Vector3<f64>) -> Result<Projection, GeometryError> {
    let pc = cam.r * point + cam.t;
    if pc.norm() < 1e-12 {
        return Err(GeometryError::PointAtCameraCenter);
    }
    let h = cam.k * pc;
    let pixel = [h.x / h.z, h.y / h.z];
    let depth = pc.z;
    let in_frustum = depth > 0.0 && pixel.iter().all(|v| v.is_finite()) && cam.contains_pixel(pixel);
    Ok(Projection {
        pixel,
        depth,
        in_frustum,
    })
}

/// Cross-product matrix: `skew(t) * v == t.cross(v)`.
pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Pose of `dst` relative to `src`: `X_dst = R_rel * X_src + t_rel`.
pub fn relative_pose(src: &CameraModel, dst: &CameraModel) -> (Matrix3<f64>, Vector3<f64>) {
    let r_rel = dst.r * src.r.transpose();
    let t_rel = dst.t - r_rel * src.t;
    (r_rel, t_rel)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrix {
    pub f: Matrix3<f64>,
    pub src_cam: String,
    pub dst_cam: String,
    /// Image size of the source camera, used to flag out-of-bounds queries.
    pub src_size: (u32, u32),
}

/// Builds the fundamental matrix mapping pixels of `src` to epipolar lines in `dst`.
pub fn fundamental_matrix(
    src: &CameraModel,
    dst: &CameraModel,
) -> Result<FundamentalMatrix, GeometryError> {
    src.validate()?;
    dst.validate()?;
    let (r_rel, t_rel) = relative_pose(src, dst);
    let baseline = t_rel.norm();
    if baseline < MIN_BASELINE {
        return Err(GeometryError::DegenerateGeometry {
            src: src.id.clone(),
            dst: dst.id.clone(),
            baseline,
        });
    }
    // Both intrinsics are upper-triangular with positive diagonal, so they invert.
    let k_src_inv = src.k.try_inverse().expect("validated intrinsics are invertible");
    let k_dst_inv = dst.k.try_inverse().expect("validated intrinsics are invertible");
    let f = k_dst_inv.transpose() * skew(&t_rel) * r_rel * k_src_inv;
    let f = f / f.norm();
    Ok(FundamentalMatrix {
        f,
        src_cam: src.id.clone(),
        dst_cam: dst.id.clone(),
        src_size: (src.width, src.height),
    })
}

impl FundamentalMatrix {
    /// `p_dst^T F p_src` for pixel coordinates.
    pub fn residual(&self, p_src: [f64; 2], p_dst: [f64; 2]) -> f64 {
        let a = Vector3::new(p_src[0], p_src[1], 1.0);
        let b = Vector3::new(p_dst[0], p_dst[1], 1.0);
        b.dot(&(self.f * a))
    }

    pub fn singular_values(&self) -> Vector3<f64> {
        let mut s = self.f.svd(false, false).singular_values;
        s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// rank 2 means the smallest singular value is below `1e-9` times the largest.
    pub fn is_rank_two(&self) -> bool {
        let s = self.singular_values();
        s[2] < 1e-9 * s[0] && s[1] >= 1e-9 * s[0]
    }

    /// Same matrix with a different overall scale (lines are scale-free).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            f: self.f * factor,
            ..self.clone()
        }
    }
}

/// Homogeneous line `a x + b y + c = 0` normalized so that `a^2 + b^2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub coeffs: [f64; 3],
    /// `a^2 + b^2` before normalization, computed with unit-Frobenius `F`.
    pub raw_norm_sq: f64,
    /// The query point maps to a null line (it is the epipole).
    pub degenerate: bool,
    /// The query point was outside the source image.
    pub out_of_bounds: bool,
}

impl EpipolarLine {
    /// Signed point-to-line distance in pixels.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        let [a, b, c] = self.coeffs;
        a * p[0] + b * p[1] + c
    }

    pub fn distance(&self, p: [f64; 2]) -> f64 {
        self.signed_distance(p).abs()
    }
}

/// Epipolar line in the destination image of pixel `p` in the source image.
pub fn epipolar_line(f: &FundamentalMatrix, p: [f64; 2]) -> EpipolarLine {
    let fro = f.f.norm();
    let unit = if fro > 0.0 { f.f / fro } else { f.f };
    let l = unit * Vector3::new(p[0], p[1], 1.0);
    let raw_norm_sq = l.x * l.x + l.y * l.y;
    let degenerate = !(raw_norm_sq >= NULL_LINE_EPS);
    let coeffs = if degenerate {
        [l.x, l.y, l.z]
    } else {
        let n = raw_norm_sq.sqrt();
        [l.x / n, l.y / n, l.z / n]
    };
    let (w, h) = f.src_size;
    let out_of_bounds = !(p[0] >= 0.0 && p[0] <= w as f64 && p[1] >= 0.0 && p[1] <= h as f64);
    EpipolarLine {
        coeffs,
        raw_norm_sq,
        degenerate,
        out_of_bounds,
    }
}

/// Region in the destination image bounded by the epipolar lines of the four
/// corners of a source bounding box, dilated by `epsilon` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarBand {
    pub lines: [[f64; 3]; 4],
    pub epsilon: f64,
}

pub fn bbox_epipolar_band(
    f: &FundamentalMatrix,
    bbox: &BBox,
    epsilon: f64,
) -> Result<EpipolarBand, GeometryError> {
    if !bbox.is_valid() {
        return Err(GeometryError::InvalidBand(format!("{bbox:?}")));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(GeometryError::InvalidBand(format!("epsilon {epsilon}")));
    }
    let mut lines = [[0.0; 3]; 4];
    for (i, corner) in bbox.corners().iter().enumerate() {
        let line = epipolar_line(f, *corner);
        if line.degenerate {
            return Err(GeometryError::DegenerateBand { corner: i });
        }
        lines[i] = line.coeffs;
    }
    Ok(EpipolarBand { lines, epsilon }.oriented())
}

impl EpipolarBand {
    /// Flips every line whose normal points away from line 0's normal.
    pub fn oriented(mut self) -> Self {
        let [a0, b0, _] = self.lines[0];
        for line in self.lines.iter_mut().skip(1) {
            if line[0] * a0 + line[1] * b0 < 0.0 {
                for v in line.iter_mut() {
                    *v = -*v;
                }
            }
        }
        self
    }

    pub fn signed_distances(&self, p: [f64; 2]) -> [f64; 4] {
        self.lines.map(|[a, b, c]| a * p[0] + b * p[1] + c)
    }

    /// How far inside the dilated band `p` sits; negative when outside.
    pub fn margin(&self, p: [f64; 2]) -> f64 {
        let s = self.signed_distances(p);
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (self.epsilon - lo).min(hi + self.epsilon)
    }

    /// True iff `p` lies between the outermost oriented lines, dilated by epsilon.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let s = self.signed_distances(p);
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lo <= self.epsilon && hi >= -self.epsilon
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            lines: self.lines,
            epsilon,
        }
    }
}

pub fn band_contains(band: &EpipolarBand, p: [f64; 2]) -> bool {
    band.contains(p)
}
