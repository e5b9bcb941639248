//! Core value types, the binary feature-file codec, dataset manifests and the
//! seconds/feature-grid conversion.

mod featfile;
mod manifest;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use featfile::{decode_feature_bytes, encode_feature_bytes, read_feature_file, write_feature_file};
pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestCounts, Split, SplitCounts, VideoEntry};

/// Features per second for clip features taken every 32 frames of 30 FPS video.
pub const DEFAULT_FEATURE_FPS: f64 = 30.0 / 32.0;

/// Activity classes. The discriminant is the class channel index in the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityClass {
    TimeOut = 0,
    Stop = 1,
}

impl ActivityClass {
    pub const ALL: [ActivityClass; 2] = [ActivityClass::TimeOut, ActivityClass::Stop];
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Wire name used in manifests and detection JSON.
    pub fn key(self) -> &'static str {
        match self {
            ActivityClass::TimeOut => "time_out",
            ActivityClass::Stop => "stop",
        }
    }

    /// Human-readable name for report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ActivityClass::TimeOut => "Time-out",
            ActivityClass::Stop => "StOP?",
        }
    }
}

impl fmt::Display for ActivityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ActivityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time_out" => Ok(ActivityClass::TimeOut),
            "stop" => Ok(ActivityClass::Stop),
            other => Err(Error::Data(format!("unknown activity label `{other}`"))),
        }
    }
}

/// A labelled ground-truth interval, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: ActivityClass,
    pub start_s: f64,
    pub end_s: f64,
}

impl Segment {
    pub fn new(label: ActivityClass, start_s: f64, end_s: f64) -> Result<Self> {
        let seg = Segment {
            label,
            start_s,
            end_s,
        };
        seg.validate()?;
        Ok(seg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_s.is_finite() && self.end_s.is_finite()) || self.start_s < 0.0 || self.start_s >= self.end_s {
            return Err(Error::Data(format!(
                "segment [{}, {}] must satisfy 0 <= start < end",
                self.start_s, self.end_s
            )));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn center_s(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }
}

/// A scored detection for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub video_id: String,
    pub label: ActivityClass,
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
}

impl Proposal {
    pub fn interval(&self) -> (f64, f64) {
        (self.start_s, self.end_s)
    }
}

/// Deterministic detection order: score descending, then start and end ascending.
pub fn proposal_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_s.total_cmp(&b.start_s))
        .then(a.end_s.total_cmp(&b.end_s))
}

/// Per-clip features of one video, `t` rows by `d` columns, row-major.
///
/// Columns `[0, d_global)` hold the scene-level features and `[d_global, d)`
/// the person-level ones. `feature_fps` and `duration_s` are kept at the
/// precision the file format stores (f32) so that the codec round-trips
/// bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    t: usize,
    d: usize,
    d_global: usize,
    features: Vec<f32>,
    feature_fps: f64,
    duration_s: f64,
}

impl FeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        t: usize,
        d: usize,
        d_global: usize,
        features: Vec<f32>,
        feature_fps: f64,
        duration_s: f64,
    ) -> Result<Self> {
        if t == 0 || d == 0 {
            return Err(Error::Data(format!("feature sequence must be non-empty, got {t}x{d}")));
        }
        if d_global > d {
            return Err(Error::Data(format!("global dimension {d_global} exceeds feature dimension {d}")));
        }
        if features.len() != t * d {
            return Err(Error::Data(format!(
                "expected {} feature values for {t}x{d}, got {}",
                t * d,
                features.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        let feature_fps = feature_fps as f32 as f64;
        let duration_s = duration_s as f32 as f64;
        if !(feature_fps > 0.0 && feature_fps.is_finite()) {
            return Err(Error::Data(format!("feature_fps must be positive, got {feature_fps}")));
        }
        let min_duration = (t as f64 - 1.0) / feature_fps;
        // f32 storage of the duration may shave a few ulps off the bound.
        if !(duration_s.is_finite() && duration_s >= min_duration * (1.0 - 1e-6)) {
            return Err(Error::Data(format!(
                "duration {duration_s} s is shorter than the {t} features span ({min_duration} s)"
            )));
        }
        Ok(FeatureSequence {
            video_id: video_id.into(),
            t,
            d,
            d_global,
            features,
            feature_fps,
            duration_s,
        })
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn global_dim(&self) -> usize {
        self.d_global
    }

    pub fn feature_fps(&self) -> f64 {
        self.feature_fps
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    /// Copy of the sequence restricted to columns `[lo, hi)`.
    pub fn select_columns(&self, lo: usize, hi: usize) -> Result<FeatureSequence> {
        if lo >= hi || hi > self.d {
            return Err(Error::Shape(format!("column range [{lo}, {hi}) invalid for dimension {}", self.d)));
        }
        let width = hi - lo;
        let mut out = Vec::with_capacity(self.t * width);
        for i in 0..self.t {
            out.extend_from_slice(&self.row(i)[lo..hi]);
        }
        let d_global = self.d_global.clamp(lo, hi) - lo;
        FeatureSequence::new(
            self.video_id.clone(),
            self.t,
            width,
            d_global,
            out,
            self.feature_fps,
            self.duration_s,
        )
    }
}

/// Fractional feature-grid index of time `t_s`.
pub fn seconds_to_feature_index(t_s: f64, feature_fps: f64) -> f64 {
    t_s * feature_fps
}

pub fn feature_index_to_seconds(index: f64, feature_fps: f64) -> f64 {
    index / feature_fps
}
