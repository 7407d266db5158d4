//! File formats: calibration JSON, detection and ground-truth JSON Lines.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraModel;
use crate::labels::{DetectionStreams, PseudoLabel};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(path: &Path) -> Result<(), IoError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

pub fn read_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_string(path: &Path, contents: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| IoError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    s.push('\n');
    write_string(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let s = read_string(path)?;
    serde_json::from_str(&s).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_jsonl<'a, T, I>(path: &Path, items: I) -> Result<(), IoError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| IoError::Invalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads one JSON value per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Calibration record; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibRecord {
    pub id: String,
    #[serde(rename = "K")]
    pub k: [[f64; 3]; 3],
    #[serde(rename = "R")]
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
    pub width: u32,
    pub height: u32,
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

fn matrix(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

impl From<&CameraModel> for CalibRecord {
    fn from(c: &CameraModel) -> Self {
        Self {
            id: c.id.clone(),
            k: rows(&c.k),
            r: rows(&c.r),
            t: [c.t.x, c.t.y, c.t.z],
            width: c.width,
            height: c.height,
        }
    }
}

pub fn write_calib(path: &Path, cameras: &[CameraModel]) -> Result<(), IoError> {
    let records: Vec<CalibRecord> = cameras.iter().map(CalibRecord::from).collect();
    write_json(path, &records)
}

/// Loads and validates every camera in a calibration file.
pub fn read_calib(path: &Path) -> Result<Vec<CameraModel>, IoError> {
    let records: Vec<CalibRecord> = read_json(path)?;
    records
        .into_iter()
        .map(|r| {
            CameraModel::new(
                r.id,
                matrix(&r.k),
                matrix(&r.r),
                Vector3::from(r.t),
                r.width,
                r.height,
            )
            .map_err(|e| IoError::Invalid {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes `<dir>/<camera>.jsonl` for every stream, frames in order.
pub fn write_detections(dir: &Path, streams: &DetectionStreams) -> Result<(), IoError> {
    create_dir(dir)?;
    for (cam, frames) in streams {
        write_jsonl(&dir.join(format!("{cam}.jsonl")), frames.iter().flatten())?;
    }
    Ok(())
}

/// Reads every `*.jsonl` file in `dir` into per-frame streams. Streams are
/// padded to `n_frames`, or to the largest frame seen plus one.
pub fn read_detections(dir: &Path, n_frames: Option<usize>) -> Result<DetectionStreams, IoError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut raw: Vec<(PathBuf, Vec<PseudoLabel>)> = Vec::new();
    let mut max_frame = 0usize;
    for path in files {
        let labels: Vec<PseudoLabel> = read_jsonl(&path)?;
        for (i, l) in labels.iter().enumerate() {
            l.validate().map_err(|e| IoError::Parse {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            max_frame = max_frame.max(l.frame as usize + 1);
        }
        raw.push((path, labels));
    }
    let n = n_frames.unwrap_or(max_frame);
    let mut streams = DetectionStreams::new();
    for (path, labels) in raw {
        let cam = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let mut frames = vec![Vec::new(); n];
        for l in labels {
            if l.camera_id != cam {
                return Err(IoError::Invalid {
                    path,
                    message: format!("record for camera {} in file of {cam}", l.camera_id),
                });
            }
            let f = l.frame as usize;
            if f >= n {
                return Err(IoError::Invalid {
                    path,
                    message: format!("frame {f} beyond {n} frames"),
                });
            }
            frames[f].push(l);
        }
        streams.insert(cam, frames);
    }
    Ok(streams)
}
