//! Synthetic untrimmed feature sequences with planted activity segments.
//!
//! Every channel carries an AR(1) Gaussian background with unit stationary
//! variance. A planted segment adds its class's fixed pattern vector scaled
//! by `snr`, with linear ramps of width `boundary_blur_s` centred on each
//! boundary. Video `i` depends only on `(seed, i)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{save_manifest, write_feature_file, ActivityClass, DatasetManifest, FeatureSequence, Segment, Split, VideoEntry};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStats {
    pub mean_duration_s: f64,
    pub sd_duration_s: f64,
    pub expected_count_per_video: f64,
}

impl ClassStats {
    /// Log-normal `(mu, sigma)` with this mean and standard deviation.
    pub fn lognormal_params(&self) -> (f64, f64) {
        let var = (1.0 + (self.sd_duration_s / self.mean_duration_s).powi(2)).ln();
        (self.mean_duration_s.ln() - 0.5 * var, var.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStatsSet {
    pub time_out: ClassStats,
    pub stop: ClassStats,
}

impl ClassStatsSet {
    pub fn get(&self, class: ActivityClass) -> &ClassStats {
        match class {
            ActivityClass::TimeOut => &self.time_out,
            ActivityClass::Stop => &self.stop,
        }
    }
}

impl Default for ClassStatsSet {
    fn default() -> Self {
        ClassStatsSet {
            time_out: ClassStats {
                mean_duration_s: 89.8,
                sd_duration_s: 30.0,
                expected_count_per_video: 33.0 / 43.0,
            },
            stop: ClassStats {
                mean_duration_s: 62.9,
                sd_duration_s: 25.0,
                expected_count_per_video: 22.0 / 43.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub video_duration_range_s: (f64, f64),
    pub feature_fps: f64,
    pub d: usize,
    pub d_g: usize,
    pub class_stats: ClassStatsSet,
    /// Pattern amplitude relative to the unit background standard deviation.
    pub snr: f64,
    pub boundary_blur_s: f64,
    pub background_ar_coeff: f64,
    pub seed: u64,
    /// Pattern amplitude multiplier on the global block `[0, d_g)`.
    pub global_gain: f64,
    /// Pattern amplitude multiplier on the local block `[d_g, d)`.
    pub local_gain: f64,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_videos: 60,
            video_duration_range_s: (600.0, 1200.0),
            feature_fps: crate::datamodel::DEFAULT_FEATURE_FPS,
            d: 64,
            d_g: 48,
            class_stats: ClassStatsSet::default(),
            snr: 4.0,
            boundary_blur_s: 5.0,
            background_ar_coeff: 0.8,
            seed: 0,
            global_gain: 1.0,
            local_gain: 1.0,
            train_fraction: 2.0 / 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synth config: {msg}")));
        let (lo, hi) = self.video_duration_range_s;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return bad(format!("duration range ({lo}, {hi}) must satisfy 0 < min < max"));
        }
        if !(self.feature_fps > 0.0 && self.feature_fps.is_finite()) {
            return bad("feature_fps must be positive".into());
        }
        if self.d == 0 || self.d_g > self.d {
            return bad(format!("need d >= 1 and d_g <= d, got d={} d_g={}", self.d, self.d_g));
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return bad("snr must be non-negative".into());
        }
        if !(self.boundary_blur_s >= 0.0) {
            return bad("boundary_blur_s must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.background_ar_coeff) {
            return bad("background_ar_coeff must lie in [0, 1)".into());
        }
        if !(self.global_gain >= 0.0 && self.local_gain >= 0.0) {
            return bad("gains must be non-negative".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        for c in ActivityClass::ALL {
            let s = self.class_stats.get(c);
            if !(s.mean_duration_s > 0.0 && s.sd_duration_s > 0.0 && s.expected_count_per_video >= 0.0) {
                return bad(format!("class stats for {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Unit-variance pattern vectors, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPatterns {
    pub patterns: Vec<Vec<f64>>,
}

impl ClassPatterns {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = stream(cfg.seed, 0);
        let patterns = ActivityClass::ALL
            .iter()
            .map(|_| (0..cfg.d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        ClassPatterns { patterns }
    }

    pub fn get(&self, class: ActivityClass) -> &[f64] {
        &self.patterns[class.index()]
    }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn video_id(i: usize) -> String {
    format!("synth_{i:04}")
}

const LAYOUT_ATTEMPTS: usize = 20;

/// Draws segment counts and lengths, placing each segment uniformly over the
/// start positions that keep it clear of those already placed. `None` when a
/// segment has no room.
fn draw_layout(cfg: &SynthConfig, duration: f64, rng: &mut ChaCha8Rng) -> Result<Option<Vec<Segment>>> {
    let mut segments: Vec<Segment> = Vec::new();
    for class in ActivityClass::ALL {
        let stats = cfg.class_stats.get(class);
        let count = if stats.expected_count_per_video > 0.0 {
            Poisson::new(stats.expected_count_per_video)
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(rng) as usize
        } else {
            0
        };
        let (mu, sigma) = stats.lognormal_params();
        let lengths = LogNormal::new(mu, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..count {
            let len = loop {
                let l: f64 = lengths.sample(rng);
                if l < duration {
                    break l;
                }
            };
            segments.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
            let mut free = Vec::new();
            let mut cursor = 0.0;
            for s in segments.iter().map(|s| (s.start_s, s.end_s)).chain([(duration, duration)]) {
                if s.0 - cursor > len {
                    free.push((cursor, s.0 - len));
                }
                cursor = s.1;
            }
            let total: f64 = free.iter().map(|(a, b)| b - a).sum();
            if total <= 0.0 {
                return Ok(None);
            }
            let mut u = rng.gen_range(0.0..total);
            let (a, b) = *free
                .iter()
                .find(|(a, b)| {
                    let fits = u < b - a;
                    if !fits {
                        u -= b - a;
                    }
                    fits
                })
                .unwrap_or(free.last().expect("non-empty"));
            let start = (a + u).min(b);
            segments.push(Segment::new(class, start, start + len)?);
        }
    }
    Ok(Some(segments))
}

/// Video `i`: its features and planted segments sorted by start.
pub fn generate_video(cfg: &SynthConfig, patterns: &ClassPatterns, i: usize) -> Result<(FeatureSequence, Vec<Segment>)> {
    let mut rng = stream(cfg.seed, i as u64 + 1);
    let (lo, hi) = cfg.video_duration_range_s;
    let duration = rng.gen_range(lo..hi) as f32 as f64;
    let t = ((duration * cfg.feature_fps).floor() as usize).max(1);

    let mut segments = None;
    for _ in 0..LAYOUT_ATTEMPTS {
        if let Some(layout) = draw_layout(cfg, duration, &mut rng)? {
            segments = Some(layout);
            break;
        }
    }
    let Some(mut segments) = segments else {
        return Err(Error::Generation(format!(
            "video {}: planted segments did not fit without overlap after {LAYOUT_ATTEMPTS} layouts",
            video_id(i)
        )));
    };
    segments.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));

    let d = cfg.d;
    let a = cfg.background_ar_coeff;
    let innov = (1.0 - a * a).sqrt();
    let mut state: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut features = Vec::with_capacity(t * d);
    for row in 0..t {
        if row > 0 {
            for s in state.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *s = a * *s + innov * e;
            }
        }
        let time = row as f64 / cfg.feature_fps;
        let mut values = state.clone();
        for seg in &segments {
            let w = envelope(time, seg, cfg.boundary_blur_s);
            if w > 0.0 {
                let p = patterns.get(seg.label);
                for (c, v) in values.iter_mut().enumerate() {
                    let gain = if c < cfg.d_g { cfg.global_gain } else { cfg.local_gain };
                    *v += cfg.snr * gain * w * p[c];
                }
            }
        }
        features.extend(values.iter().map(|&v| v as f32));
    }
    let seq = FeatureSequence::new(video_id(i), t, d, cfg.d_g, features, cfg.feature_fps, duration)?;
    Ok((seq, segments))
}

/// Segment weight at `time`: 1 inside, 0 outside, with linear ramps of width
/// `blur` centred on each boundary.
pub fn envelope(time: f64, seg: &Segment, blur: f64) -> f64 {
    if blur <= 0.0 {
        return if time >= seg.start_s && time <= seg.end_s { 1.0 } else { 0.0 };
    }
    let rise = (time - seg.start_s) / blur + 0.5;
    let fall = (seg.end_s - time) / blur + 0.5;
    rise.min(fall).clamp(0.0, 1.0)
}

/// All videos in memory, in index order.
pub fn generate_videos(cfg: &SynthConfig) -> Result<Vec<(FeatureSequence, Vec<Segment>)>> {
    cfg.validate()?;
    let patterns = ClassPatterns::new(cfg);
    let gen = |i: usize| generate_video(cfg, &patterns, i);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..cfg.n_videos).into_par_iter().map(gen).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..cfg.n_videos).map(gen).collect()
    }
}

/// Writes every video's feature file under `out_dir/features/` and returns
/// the manifest, with every video in the train split.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let videos = generate_videos(cfg)?;
    let feat_dir = out_dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut entries = Vec::with_capacity(videos.len());
    for (seq, segments) in videos {
        let rel = format!("features/{}.tmf", seq.video_id);
        write_feature_file(&seq, out_dir.join(&rel))?;
        entries.push(VideoEntry {
            id: seq.video_id.clone(),
            feature_file: rel,
            duration_s: seq.duration_s(),
            split: Split::Train,
            segments,
        });
    }
    let manifest = DatasetManifest {
        videos: entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Number of training videos: `fraction * n` rounded to nearest with ties
/// up, kept within `[1, n - 1]`.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).clamp(1, n - 1)
}

/// Assigns whole videos to train/test by a seeded shuffle.
pub fn make_split(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let n = manifest.videos.len();
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 videos to split, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, u64::MAX);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_train = train_count(n, train_fraction);
    let mut out = manifest.clone();
    for (rank, &vi) in order.iter().enumerate() {
        out.videos[vi].split = if rank < n_train { Split::Train } else { Split::Test };
    }
    Ok(out)
}

/// Generates the dataset, splits it and saves `out_dir/manifest.json`.
pub fn synthesize(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let manifest = generate_dataset(cfg, out_dir)?;
    let manifest = make_split(&manifest, cfg.train_fraction, cfg.seed)?;
    save_manifest(&manifest, out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_videos: 4,
            video_duration_range_s: (300.0, 400.0),
            d: 8,
            d_g: 6,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn defaults_match_recorded_statistics() {
        let c = SynthConfig::default();
        assert_eq!(c.class_stats.time_out.mean_duration_s, 89.8);
        assert_eq!(c.class_stats.stop.mean_duration_s, 62.9);
        assert_eq!(c.feature_fps, 0.9375);
        assert_eq!((c.d, c.d_g), (64, 48));
        assert_eq!(train_count(c.n_videos, c.train_fraction), 40);
    }

    #[test]
    fn lognormal_moment_matching() {
        let s = ClassStatsSet::default().time_out;
        let (mu, sigma) = s.lognormal_params();
        let mean = (mu + 0.5 * sigma * sigma).exp();
        let sd = ((sigma * sigma).exp() - 1.0).sqrt() * mean;
        assert!((mean - 89.8).abs() < 1e-9 && (sd - 30.0).abs() < 1e-9);
    }

    #[test]
    fn planted_timeout_mean_duration() {
        let cfg = SynthConfig {
            n_videos: 700,
            d: 1,
            d_g: 1,
            video_duration_range_s: (600.0, 1200.0),
            ..SynthConfig::default()
        };
        let patterns = ClassPatterns::new(&cfg);
        let mut lens = Vec::new();
        let mut i = 0;
        while lens.len() < 500 {
            let (_, segs) = generate_video(&cfg, &patterns, i).unwrap();
            lens.extend(segs.iter().filter(|s| s.label == ActivityClass::TimeOut).map(|s| s.duration_s()));
            i += 1;
        }
        let mean = lens.iter().sum::<f64>() / lens.len() as f64;
        assert!((mean - 89.8).abs() < 5.0, "mean {mean}");
    }

    #[test]
    fn segments_disjoint_and_inside() {
        let cfg = SynthConfig {
            n_videos: 30,
            d: 2,
            d_g: 1,
            ..SynthConfig::default()
        };
        for (seq, segs) in generate_videos(&cfg).unwrap() {
            for w in segs.windows(2) {
                assert!(w[0].end_s <= w[1].start_s);
            }
            for s in &segs {
                assert!(s.start_s >= 0.0 && s.end_s <= seq.duration_s());
            }
            assert!((seq.len() as f64 - 1.0) / seq.feature_fps() <= seq.duration_s());
        }
    }

    #[test]
    fn video_depends_only_on_seed_and_index() {
        let cfg = small(9);
        let all = generate_videos(&cfg).unwrap();
        let patterns = ClassPatterns::new(&cfg);
        let (third, _) = generate_video(&cfg, &patterns, 2).unwrap();
        assert_eq!(all[2].0, third);
        let more = generate_videos(&SynthConfig { n_videos: 6, ..cfg }).unwrap();
        assert_eq!(more[..4], all[..]);
    }

    #[test]
    fn dataset_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synthesize(&small(3), a.path()).unwrap();
        synthesize(&small(3), b.path()).unwrap();
        for rel in ["manifest.json", "features/synth_0000.tmf", "features/synth_0003.tmf"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn overcrowded_video_is_a_generation_error() {
        let mut cfg = small(1);
        cfg.video_duration_range_s = (100.0, 101.0);
        cfg.class_stats.time_out.expected_count_per_video = 30.0;
        assert!(matches!(generate_videos(&cfg), Err(Error::Generation(_))));
    }

    fn entries(n: usize) -> DatasetManifest {
        DatasetManifest {
            videos: (0..n)
                .map(|i| VideoEntry {
                    id: video_id(i),
                    feature_file: String::new(),
                    duration_s: 10.0,
                    split: Split::Train,
                    segments: vec![],
                })
                .collect(),
            base_dir: Default::default(),
        }
    }

    #[test]
    fn split_examples() {
        let m = make_split(&entries(43), 0.6, 1).unwrap();
        let n_train = m.videos_in(Split::Train).count();
        assert!(n_train == 25 || n_train == 26);
        assert_eq!(n_train, 26);
        let m2 = make_split(&entries(2), 0.5, 5).unwrap();
        assert_eq!(m2.videos_in(Split::Train).count(), 1);
        assert_eq!(make_split(&entries(43), 0.6, 1).unwrap(), m);
        assert!(matches!(make_split(&entries(1), 0.5, 0), Err(Error::Split(_))));
    }

    /// Per-frame projection of the features onto the unit TimeOut pattern,
    /// split by whether the frame is inside a TimeOut segment.
    fn projections(cfg: &SynthConfig) -> (Vec<f64>, Vec<f64>) {
        let patterns = ClassPatterns::new(cfg);
        let p = patterns.get(ActivityClass::TimeOut);
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for (seq, segs) in generate_videos(cfg).unwrap() {
            for r in 0..seq.len() {
                let time = r as f64 / seq.feature_fps();
                let proj = seq.row(r).iter().zip(p).map(|(x, w)| *x as f64 * w).sum::<f64>() / norm;
                let hit = segs
                    .iter()
                    .any(|s| s.label == ActivityClass::TimeOut && time >= s.start_s && time <= s.end_s);
                if hit {
                    inside.push(proj);
                } else {
                    outside.push(proj);
                }
            }
        }
        (inside, outside)
    }

    fn stats_cfg(snr: f64) -> SynthConfig {
        SynthConfig {
            n_videos: 40,
            d: 16,
            d_g: 12,
            snr,
            seed: 21,
            class_stats: ClassStatsSet {
                stop: ClassStats {
                    expected_count_per_video: 0.0,
                    ..ClassStatsSet::default().stop
                },
                ..ClassStatsSet::default()
            },
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_snr_is_indistinguishable_from_background() {
        let cfg = stats_cfg(0.0);
        let (inside, outside) = projections(&cfg);
        assert!(inside.len() + outside.len() >= 10_000);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        // AR(1) with coefficient a inflates the variance of a sample mean by (1+a)/(1-a)
        let a = cfg.background_ar_coeff;
        let inflation = (1.0 + a) / (1.0 - a);
        let se = (inflation / inside.len() as f64 + inflation / outside.len() as f64).sqrt();
        let z = (mean(&inside) - mean(&outside)) / se;
        assert!(z.abs() < 2.576, "z = {z}");
    }

    #[test]
    fn pattern_energy_ratio_grows_with_snr() {
        let energy = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        let ratios: Vec<f64> = [0.0, 1.0, 4.0]
            .iter()
            .map(|&snr| {
                let (i, o) = projections(&stats_cfg(snr));
                energy(&i) / energy(&o)
            })
            .collect();
        assert!(ratios[0] < 1.3 && ratios[0] < ratios[1] && ratios[1] < ratios[2], "{ratios:?}");
    }
}
