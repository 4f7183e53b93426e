//! JSON Lines query manifests and result files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LocalizationResult, Query, Status, TraceEntry};
use crate::geom::{Intrinsics, Pose, PriorPosition, SensorPrior, Vec3};
use crate::imaging::GrayImage;
use crate::matching::MatchSet;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("query {id}: {message}")]
    InvalidQuery { id: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major rotation and translation of a world-to-camera pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let (r, t) = p.to_rt();
        Self { r, t }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Pose {
        Pose::from_rt(&self.r, &self.t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    pub heading_deg: f64,
    pub gravity: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub altitude_m: Option<f64>,
}

impl PriorRecord {
    pub fn from_prior(p: &SensorPrior) -> Self {
        let (mut lat, mut lon, mut x, mut y) = (None, None, None, None);
        match p.position {
            PriorPosition::LatLon { lat: a, lon: b } => (lat, lon) = (Some(a), Some(b)),
            PriorPosition::Metric { x: a, y: b } => (x, y) = (Some(a), Some(b)),
        }
        Self {
            lat,
            lon,
            x,
            y,
            heading_deg: p.compass_heading,
            gravity: [p.gravity_dir.x, p.gravity_dir.y, p.gravity_dir.z],
            altitude_m: p.altitude_m,
        }
    }

    /// Gravity is rescaled to unit length; the heading is wrapped into `[0, 360)`.
    pub fn to_prior(&self) -> Result<SensorPrior, String> {
        let position = match (self.lat, self.lon, self.x, self.y) {
            (Some(lat), Some(lon), None, None) => PriorPosition::LatLon { lat, lon },
            (None, None, Some(x), Some(y)) => PriorPosition::Metric { x, y },
            _ => return Err("prior needs exactly one of lat/lon or x/y".into()),
        };
        let g = Vec3::from(self.gravity);
        let n = g.norm();
        if !(n > 1e-9 && n.is_finite()) {
            return Err("gravity vector is zero or not finite".into());
        }
        if !self.heading_deg.is_finite() {
            return Err("heading is not finite".into());
        }
        let prior = SensorPrior {
            position,
            compass_heading: crate::geom::wrap_degrees(self.heading_deg),
            gravity_dir: g / n,
            altitude_m: self.altitude_m,
        };
        prior.validate().map_err(|e| e.to_string())?;
        Ok(prior)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub id: String,
    pub image: PathBuf,
    pub intrinsics: Intrinsics,
    pub prior: PriorRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<PoseRecord>,
}

impl QueryRecord {
    /// Loads the image and checks it against the intrinsics.
    pub fn load(&self, matches: &[MatchSet]) -> Result<Query, ManifestError> {
        let invalid = |message: String| ManifestError::InvalidQuery {
            id: self.id.clone(),
            message,
        };
        self.intrinsics.validate().map_err(|e| invalid(e.to_string()))?;
        let prior = self.prior.to_prior().map_err(invalid)?;
        let image = GrayImage::load(&self.image).map_err(|e| invalid(e.to_string()))?;
        if (image.width(), image.height()) != (self.intrinsics.width as usize, self.intrinsics.height as usize) {
            return Err(invalid(format!(
                "image is {}x{}, intrinsics say {}x{}",
                image.width(),
                image.height(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        let external_matches: HashMap<usize, MatchSet> = matches
            .iter()
            .filter(|m| m.query_id == self.id)
            .map(|m| (m.seed_id, m.clone()))
            .collect();
        Ok(Query {
            id: self.id.clone(),
            image,
            intrinsics: self.intrinsics,
            prior,
            gt_pose: self.gt_pose.map(|p| p.to_pose()),
            external_matches,
        })
    }
}

/// Parses a manifest; relative image paths are resolved against `base`.
pub fn parse_manifest<R: Read>(reader: R, label: &str, base: &Path) -> Result<Vec<QueryRecord>, ManifestError> {
    let mut out = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|source| ManifestError::Io {
            path: label.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| ManifestError::Parse {
            path: label.to_string(),
            line: i + 1,
            message,
        };
        let mut rec: QueryRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !ids.insert(rec.id.clone()) {
            return Err(parse_err(format!("duplicate query id {}", rec.id)));
        }
        if rec.image.is_relative() {
            rec.image = base.join(&rec.image);
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<QueryRecord>, ManifestError> {
    let f = File::open(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(f, &path.display().to_string(), base)
}

/// One line of a result file; timings are written separately so results stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub query_id: String,
    pub status: Status,
    pub final_pose: PoseRecord,
    pub prior_pose: PoseRecord,
    pub selected_seed_id: Option<usize>,
    pub trace: Vec<TraceEntry>,
}

impl From<&LocalizationResult> for ResultRecord {
    fn from(r: &LocalizationResult) -> Self {
        Self {
            query_id: r.query_id.clone(),
            status: r.status,
            final_pose: PoseRecord::from(&r.final_pose),
            prior_pose: PoseRecord::from(&r.prior_pose),
            selected_seed_id: r.selected_seed_id,
            trace: r.trace.clone(),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<(), ManifestError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for row in rows {
        let s = serde_json::to_string(&row).expect("records serialize");
        writeln!(w, "{s}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_results(path: &Path, results: &[LocalizationResult]) -> Result<(), ManifestError> {
    write_lines(path, results.iter().map(ResultRecord::from))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>, ManifestError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct TimingRecord<'a> {
    query_id: &'a str,
    #[serde(flatten)]
    timings: super::StageTimings,
}

pub fn write_timings(path: &Path, results: &[LocalizationResult]) -> Result<(), ManifestError> {
    write_lines(
        path,
        results.iter().map(|r| TimingRecord {
            query_id: &r.query_id,
            timings: r.timings,
        }),
    )
}
