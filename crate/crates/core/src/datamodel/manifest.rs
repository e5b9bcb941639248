use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_feature_file, ActivityClass, FeatureSequence, Segment};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_file: String,
    pub duration_s: f64,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub videos: Vec<VideoEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitCounts {
    pub videos: usize,
    pub time_out: usize,
    pub stop: usize,
}

impl SplitCounts {
    fn add(&mut self, video: &VideoEntry) {
        self.videos += 1;
        for seg in &video.segments {
            match seg.label {
                ActivityClass::TimeOut => self.time_out += 1,
                ActivityClass::Stop => self.stop += 1,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ManifestCounts {
    pub train: SplitCounts,
    pub test: SplitCounts,
    pub total: SplitCounts,
}

impl fmt::Display for ManifestCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>10} {:>8}", "", "videos", "Time-out", "StOP?")?;
        for (name, c) in [("Train set", self.train), ("Test set", self.test), ("Total", self.total)] {
            writeln!(f, "{:<10} {:>8} {:>10} {:>8}", name, c.videos, c.time_out, c.stop)?;
        }
        Ok(())
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for v in &self.videos {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate video id `{}`", v.id)));
            }
            if !(v.duration_s.is_finite() && v.duration_s > 0.0) {
                return Err(Error::Manifest(format!("video `{}` has invalid duration {}", v.id, v.duration_s)));
            }
            for seg in &v.segments {
                seg.validate()
                    .map_err(|e| Error::Manifest(format!("video `{}`: {e}", v.id)))?;
                if seg.end_s > v.duration_s {
                    return Err(Error::Manifest(format!(
                        "video `{}`: segment [{}, {}] exceeds duration {}",
                        v.id, seg.start_s, seg.end_s, v.duration_s
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> ManifestCounts {
        let mut counts = ManifestCounts::default();
        for v in &self.videos {
            match v.split {
                Split::Train => counts.train.add(v),
                Split::Test => counts.test.add(v),
            }
            counts.total.add(v);
        }
        counts
    }

    pub fn videos_in(&self, split: Split) -> impl Iterator<Item = &VideoEntry> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.videos.iter().find(|v| v.id == id).map(|v| v.split)
    }

    pub fn feature_path(&self, video: &VideoEntry) -> PathBuf {
        let p = Path::new(&video.feature_file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads a video's features; the sequence takes the manifest id.
    pub fn load_features(&self, video: &VideoEntry) -> Result<FeatureSequence> {
        let mut seq = read_feature_file(self.feature_path(video))?;
        seq.video_id = video.id.clone();
        Ok(seq)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = manifest.to_json();
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
