//! Temporal IoU, average precision at tIoU thresholds, false-positive rate at
//! a recall target, and fixed-length clip evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use crate::datamodel::{proposal_order, ActivityClass, DatasetManifest, FeatureSequence, Proposal, Segment, Split};
use crate::network::{HeadOutputs, Real};
use crate::{Error, Result};

/// Thresholds reported by default: 0.1 to 0.5 in steps of 0.1.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Intersection over union of two intervals. Empty or reversed intervals have
/// zero length.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0).max(0.0) + (b.1 - b.0).max(0.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Ground-truth segments keyed by video id.
pub type GroundTruth = BTreeMap<String, Vec<Segment>>;

/// Ground truth of the videos in `split`.
pub fn ground_truth(manifest: &DatasetManifest, split: Split) -> GroundTruth {
    manifest
        .videos
        .iter()
        .filter(|v| v.split == split)
        .map(|v| (v.id.clone(), v.segments.clone()))
        .collect()
}

/// True-positive flags of the class-`class` proposals in ranking order, and the
/// number of ground-truth segments of that class.
fn match_ranked(proposals: &[Proposal], gt: &GroundTruth, class: ActivityClass, threshold: f64) -> (Vec<bool>, usize) {
    let mut ranked: Vec<&Proposal> = proposals.iter().filter(|p| p.label == class).collect();
    ranked.sort_by(|a, b| proposal_order(a, b).then_with(|| a.video_id.cmp(&b.video_id)));

    let mut pools: BTreeMap<&str, Vec<((f64, f64), bool)>> = BTreeMap::new();
    let mut n_gt = 0;
    for (vid, segs) in gt {
        let pool: Vec<_> = segs
            .iter()
            .filter(|s| s.label == class)
            .map(|s| ((s.start_s, s.end_s), false))
            .collect();
        n_gt += pool.len();
        pools.insert(vid.as_str(), pool);
    }

    let flags = ranked
        .iter()
        .map(|p| {
            let Some(pool) = pools.get_mut(p.video_id.as_str()) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (i, (iv, used)) in pool.iter().enumerate() {
                if *used {
                    continue;
                }
                let o = tiou(p.interval(), *iv);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((i, o));
                }
            }
            match best {
                Some((i, _)) => {
                    pool[i].1 = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, n_gt)
}

/// Average precision of one class at one tIoU threshold over all videos,
/// with greedy score-ordered matching and an all-point interpolated
/// precision envelope. NaN when the class has no ground truth.
pub fn average_precision(proposals: &[Proposal], gt: &GroundTruth, class: ActivityClass, threshold: f64) -> f64 {
    let (flags, n_gt) = match_ranked(proposals, gt, class, threshold);
    if n_gt == 0 {
        return f64::NAN;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// AP per class and threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    /// One row of APs (aligned with `thresholds`) per class.
    pub rows: Vec<(ActivityClass, Vec<f64>)>,
}

impl ApReport {
    pub fn evaluate(proposals: &[Proposal], gt: &GroundTruth, thresholds: &[f64]) -> Self {
        let rows = ActivityClass::ALL
            .iter()
            .map(|&c| (c, thresholds.iter().map(|&t| average_precision(proposals, gt, c, t)).collect()))
            .collect();
        ApReport {
            thresholds: thresholds.to_vec(),
            rows,
        }
    }

    /// Arithmetic mean over thresholds; NaN for a class without ground truth.
    pub fn class_mean(&self, class: ActivityClass) -> f64 {
        self.rows
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, aps)| mean(aps.iter().copied()))
            .unwrap_or(f64::NAN)
    }

    /// Mean of the defined class means; NaN if none is defined.
    pub fn overall_mean(&self) -> f64 {
        let defined: Vec<f64> = self.rows.iter().map(|(c, _)| self.class_mean(*c)).filter(|m| !m.is_nan()).collect();
        if defined.is_empty() {
            f64::NAN
        } else {
            mean(defined.into_iter())
        }
    }

    /// Rows `class,threshold,ap`, then per-class `mean` rows and an `all,mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,threshold,ap\n");
        for (c, aps) in &self.rows {
            for (t, ap) in self.thresholds.iter().zip(aps) {
                out.push_str(&format!("{},{t},{}\n", c.key(), fmt_csv(*ap)));
            }
        }
        for (c, _) in &self.rows {
            out.push_str(&format!("{},mean,{}\n", c.key(), fmt_csv(self.class_mean(*c))));
        }
        out.push_str(&format!("all,mean,{}\n", fmt_csv(self.overall_mean())));
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn fmt_csv(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else {
        format!("{:.2}", 100.0 * v)
    }
}

/// Table with one row per class, AP in percent per threshold and the mean.
impl fmt::Display for ApReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10}", "Class")?;
        for t in &self.thresholds {
            write!(f, "{:>8}", format!("{t:.1}"))?;
        }
        writeln!(f, "{:>8}", "Avg.")?;
        for (c, aps) in &self.rows {
            write!(f, "{:<10}", c.display_name())?;
            for ap in aps {
                write!(f, "{:>8}", fmt_cell(*ap))?;
            }
            writeln!(f, "{:>8}", fmt_cell(self.class_mean(*c)))?;
        }
        Ok(())
    }
}

/// False-positive rate at the largest score threshold whose recall reaches
/// `recall_target`. Samples with `score >= threshold` are predicted positive.
pub fn fpr_at_recall(scores: &[f64], labels: &[bool], recall_target: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::Metric("no positive samples".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let n_neg = labels.len() - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let needed = (recall_target * n_pos as f64 - 1e-12).ceil().max(0.0) as usize;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp >= needed {
            break;
        }
    }
    Ok(if n_neg == 0 { 0.0 } else { fp as f64 / n_neg as f64 })
}

/// A fixed-length window of a video.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub start_s: f64,
    pub end_s: f64,
    /// Feature rows whose timestamps fall inside the clip.
    pub rows: Range<usize>,
    /// Per class: at least half of the clip lies inside segments of that class.
    pub positive: [bool; ActivityClass::COUNT],
}

impl Clip {
    pub fn features<'a>(&self, seq: &'a FeatureSequence) -> &'a [f32] {
        &seq.features()[self.rows.start * seq.dim()..self.rows.end * seq.dim()]
    }
}

/// Splits a video into consecutive non-overlapping clips of `clip_len_s`,
/// dropping the trailing partial clip.
pub fn clip_split(seq: &FeatureSequence, segments: &[Segment], clip_len_s: f64) -> Result<Vec<Clip>> {
    if !(clip_len_s > 0.0 && clip_len_s.is_finite()) {
        return Err(Error::Config(format!("clip length must be positive, got {clip_len_s}")));
    }
    let n = (seq.duration_s() / clip_len_s + 1e-9).floor() as usize;
    let fps = seq.feature_fps();
    let row_at = |t: f64| ((t * fps - 1e-9).ceil().max(0.0) as usize).min(seq.len());
    Ok((0..n)
        .map(|k| {
            let start_s = k as f64 * clip_len_s;
            let end_s = start_s + clip_len_s;
            let mut positive = [false; ActivityClass::COUNT];
            for c in ActivityClass::ALL {
                let covered = covered_length(segments.iter().filter(|s| s.label == c), start_s, end_s);
                positive[c.index()] = covered >= 0.5 * clip_len_s - 1e-9;
            }
            Clip {
                start_s,
                end_s,
                rows: row_at(start_s)..row_at(end_s),
                positive,
            }
        })
        .collect())
}

/// Length of `[lo, hi]` covered by the union of the segments.
fn covered_length<'a>(segments: impl Iterator<Item = &'a Segment>, lo: f64, hi: f64) -> f64 {
    let mut parts: Vec<(f64, f64)> = segments
        .map(|s| (s.start_s.max(lo), s.end_s.min(hi)))
        .filter(|(a, b)| a < b)
        .collect();
    parts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in parts {
        match cur {
            Some((ca, cb)) if a <= cb => cur = Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                total += cb - ca;
                cur = Some((a, b));
            }
            None => cur = Some((a, b)),
        }
    }
    if let Some((a, b)) = cur {
        total += b - a;
    }
    total
}

/// Clip score per class: the maximum predicted probability over every
/// pyramid moment whose position falls inside the clip.
pub fn clip_scores<F: Real>(outputs: &HeadOutputs<F>, clips: &[Clip], class: ActivityClass) -> Vec<f64> {
    let mut scores = vec![0.0f64; clips.len()];
    let Some(first) = clips.first() else {
        return scores;
    };
    let len = first.end_s - first.start_s;
    for (l, lo) in outputs.levels.iter().enumerate() {
        for j in 0..lo.geometry.valid_len {
            let t = lo.geometry.moment_position(j) / outputs.feature_fps;
            let k = ((t - first.start_s) / len).floor();
            if k < 0.0 || k as usize >= clips.len() {
                continue;
            }
            let p = outputs.probability(l, j, class.index());
            let s = &mut scores[k as usize];
            *s = s.max(p);
        }
    }
    scores
}
