//! Conversion of head outputs into scored intervals, and Gaussian Soft-NMS.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{proposal_order, ActivityClass, FeatureSequence, Proposal};
use crate::metrics::tiou;
use crate::network::{forward, HeadOutputs, LevelGeometry, ModelParams, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub pre_nms_topk: usize,
    pub score_floor: f64,
    pub softnms_sigma: f64,
    pub softnms_prune: f64,
    pub max_detections_per_video: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            pre_nms_topk: 2000,
            score_floor: 0.001,
            softnms_sigma: 0.5,
            softnms_prune: 0.001,
            max_detections_per_video: 200,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pre_nms_topk == 0 || self.max_detections_per_video == 0 {
            return Err(Error::Config("decode counts must be positive".into()));
        }
        if !(self.score_floor > 0.0 && self.softnms_sigma > 0.0 && self.softnms_prune > 0.0) {
            return Err(Error::Config("decode thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Interval in seconds predicted by moment `j` of a level with offsets
/// `(d_s, d_e)` in stride units. Not clamped.
pub fn moment_interval(geometry: &LevelGeometry, j: usize, d_s: f64, d_e: f64, feature_fps: f64) -> (f64, f64) {
    let t = geometry.moment_position(j);
    let stride = geometry.stride as f64;
    ((t - d_s * stride) / feature_fps, (t + d_e * stride) / feature_fps)
}

/// Every (moment, class) pair scoring at least `score_floor`, clamped to the
/// video, keeping the `pre_nms_topk` best in deterministic order.
pub fn decode_proposals<F: Real>(outputs: &HeadOutputs<F>, cfg: &DecodeConfig) -> Vec<Proposal> {
    let mut out = Vec::new();
    for (l, lo) in outputs.levels.iter().enumerate() {
        for j in 0..lo.geometry.valid_len {
            for class in ActivityClass::ALL {
                let score = outputs.probability(l, j, class.index());
                if !(score >= cfg.score_floor) {
                    continue;
                }
                let ds = lo.offsets.get(j, 0).to_f64().unwrap();
                let de = lo.offsets.get(j, 1).to_f64().unwrap();
                let (s, e) = moment_interval(&lo.geometry, j, ds, de, outputs.feature_fps);
                let (s, e) = (s.clamp(0.0, outputs.duration_s), e.clamp(0.0, outputs.duration_s));
                if s >= e {
                    continue;
                }
                out.push(Proposal {
                    video_id: outputs.video_id.clone(),
                    label: class,
                    start_s: s,
                    end_s: e,
                    score,
                });
            }
        }
    }
    out.sort_by(proposal_order);
    out.truncate(cfg.pre_nms_topk);
    out
}

/// Gaussian Soft-NMS within each class of one video's proposals. Scores
/// below `softnms_prune` are dropped; the result is sorted and truncated to
/// `max_detections_per_video`.
pub fn soft_nms(proposals: &[Proposal], cfg: &DecodeConfig) -> Vec<Proposal> {
    let mut kept = Vec::new();
    for class in ActivityClass::ALL {
        let mut pool: Vec<Proposal> = proposals
            .iter()
            .filter(|p| p.label == class && p.score >= cfg.softnms_prune)
            .cloned()
            .collect();
        while !pool.is_empty() {
            let best = (1..pool.len()).fold(0, |b, i| {
                if proposal_order(&pool[i], &pool[b]).is_lt() {
                    i
                } else {
                    b
                }
            });
            let m = pool.swap_remove(best);
            pool.retain_mut(|p| {
                let o = tiou(m.interval(), p.interval());
                if o > 0.0 {
                    p.score *= (-o * o / cfg.softnms_sigma).exp();
                }
                p.score >= cfg.softnms_prune
            });
            kept.push(m);
        }
    }
    kept.sort_by(proposal_order);
    kept.truncate(cfg.max_detections_per_video);
    kept
}

/// Forward pass, decoding and Soft-NMS for one video.
pub fn detect<F: Real>(params: &ModelParams<F>, seq: &FeatureSequence, cfg: &DecodeConfig) -> Result<Vec<Proposal>> {
    let pass = forward(params, seq)?;
    Ok(soft_nms(&decode_proposals(&pass.outputs, cfg), cfg))
}

pub fn detections_to_json(proposals: &[Proposal]) -> String {
    serde_json::to_string_pretty(proposals).expect("proposals serialize")
}

pub fn write_detections(path: &Path, proposals: &[Proposal]) -> Result<()> {
    std::fs::write(path, detections_to_json(proposals)).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Proposal>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::network::{LevelOutputs, Mat};

    fn p(label: ActivityClass, s: f64, e: f64, score: f64) -> Proposal {
        Proposal {
            video_id: "v".into(),
            label,
            start_s: s,
            end_s: e,
            score,
        }
    }

    #[test]
    fn interval_example() {
        let g = LevelGeometry {
            stride: 1,
            padded_len: 64,
            valid_len: 64,
        };
        let (s, e) = moment_interval(&g, 30, 5.0, 5.0, 0.9375);
        assert_relative_eq!(s, 26.666666666666668, epsilon = 1e-9);
        assert_relative_eq!(e, 37.333333333333336, epsilon = 1e-9);
    }

    fn outputs(logit: f64) -> HeadOutputs<f64> {
        let g = LevelGeometry {
            stride: 1,
            padded_len: 8,
            valid_len: 8,
        };
        HeadOutputs {
            video_id: "v".into(),
            feature_fps: 1.0,
            duration_s: 8.0,
            levels: vec![LevelOutputs {
                geometry: g,
                logits: Mat::from_vec(8, 2, vec![logit; 16]),
                offsets: Mat::from_vec(8, 2, vec![1.0; 16]),
            }],
        }
    }

    #[test]
    fn low_scores_decode_to_nothing() {
        assert!(decode_proposals(&outputs(-30.0), &DecodeConfig::default()).is_empty());
    }

    #[test]
    fn decode_clamps_and_limits() {
        let cfg = DecodeConfig {
            pre_nms_topk: 5,
            ..Default::default()
        };
        let ps = decode_proposals(&outputs(2.0), &cfg);
        assert_eq!(ps.len(), 5);
        assert!(ps.iter().all(|p| p.start_s >= 0.0 && p.end_s <= 8.0 && p.start_s < p.end_s));
        // the first moment's interval [-1, 1] clamps to [0, 1]
        assert_eq!(ps[0].interval(), (0.0, 1.0));
    }

    #[test]
    fn softnms_examples() {
        let cfg = DecodeConfig::default();
        let single = vec![p(ActivityClass::Stop, 1.0, 2.0, 0.4)];
        assert_eq!(soft_nms(&single, &cfg), single);

        let out = soft_nms(&[p(ActivityClass::Stop, 0.0, 10.0, 0.8), p(ActivityClass::Stop, 0.0, 10.0, 0.9)], &cfg);
        assert_eq!(out[0].score, 0.9);
        assert_relative_eq!(out[1].score, 0.8 * (-2.0f64).exp(), epsilon = 1e-12);
        assert!((out[1].score - 0.10827).abs() < 1e-5);

        let disjoint = vec![
            p(ActivityClass::Stop, 0.0, 1.0, 0.9),
            p(ActivityClass::Stop, 2.0, 3.0, 0.5),
            p(ActivityClass::TimeOut, 0.0, 1.0, 0.3),
        ];
        assert_eq!(soft_nms(&disjoint, &cfg), disjoint);
    }

    #[test]
    fn classes_suppress_independently() {
        let cfg = DecodeConfig::default();
        let out = soft_nms(&[p(ActivityClass::Stop, 0.0, 10.0, 0.9), p(ActivityClass::TimeOut, 0.0, 10.0, 0.8)], &cfg);
        assert_eq!(out[1].score, 0.8);
    }

    fn proposals() -> impl Strategy<Value = Vec<Proposal>> {
        prop::collection::vec((any::<bool>(), 0u32..50, 1u32..20, 1u32..1000), 1..40).prop_map(|v| {
            v.into_iter()
                .map(|(c, s, l, sc)| {
                    let label = if c { ActivityClass::Stop } else { ActivityClass::TimeOut };
                    p(label, s as f64, (s + l) as f64, sc as f64 / 1000.0)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn scores_never_increase_and_top_survives(ps in proposals()) {
            let cfg = DecodeConfig::default();
            let out = soft_nms(&ps, &cfg);
            for class in ActivityClass::ALL {
                let top = ps.iter().filter(|q| q.label == class).min_by(|a, b| proposal_order(a, b));
                if let Some(top) = top {
                    prop_assert!(out.iter().any(|q| q == top));
                }
            }
            for q in &out {
                let best_input = ps
                    .iter()
                    .filter(|r| r.label == q.label && r.interval() == q.interval())
                    .map(|r| r.score)
                    .fold(0.0, f64::max);
                prop_assert!(q.score <= best_input);
            }
        }

        #[test]
        fn permutation_invariant(ps in proposals(), k in 0usize..1000) {
            let cfg = DecodeConfig::default();
            let mut shuffled = ps.clone();
            shuffled.rotate_left(k % ps.len());
            shuffled.reverse();
            prop_assert_eq!(soft_nms(&ps, &cfg), soft_nms(&shuffled, &cfg));
        }

        #[test]
        fn idempotent_without_overlap(scores in prop::collection::vec(1u32..1000, 1..20)) {
            let cfg = DecodeConfig::default();
            let ps: Vec<Proposal> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| p(ActivityClass::TimeOut, 2.0 * i as f64, 2.0 * i as f64 + 1.0, s as f64 / 1000.0))
                .collect();
            let once = soft_nms(&ps, &cfg);
            prop_assert_eq!(soft_nms(&once, &cfg), once);
        }
    }

    #[test]
    fn json_round_trip() {
        let ps = vec![p(ActivityClass::TimeOut, 1.0, 2.5, 0.75)];
        let json = detections_to_json(&ps);
        assert!(json.contains("\"label\": \"time_out\""));
        let back: Vec<Proposal> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ps);
    }
}
