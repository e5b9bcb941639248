//! Ground-truth assignment to pyramid moments and the training objective:
//! an IoU-weighted sigmoid focal loss on positives, a temporal DIoU loss on
//! positive regressions, and a plain focal loss on negatives, each sum
//! normalised by its sample count.

use serde::{Deserialize, Serialize};

use crate::datamodel::Segment;
use crate::metrics::tiou;
use crate::network::{HeadGrads, HeadOutputs, PyramidGeometry, Real};
use crate::{Error, Result};

/// Probability clamp used by the focal loss.
pub const FOCAL_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// A moment claimed by several segments regresses the shortest one.
    #[default]
    ShortestSegment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignmentConfig {
    /// Boundaries `b_0 < b_1 < ...` in level-1 grid cells; level `l` accepts
    /// maximum offsets in `(b_l, b_{l+1}]`, the last level up to infinity.
    /// `None` means `0, 4, 8, 16, ...`.
    pub range_bounds: Option<Vec<f64>>,
    /// Radius around a segment's centre, in multiples of the level stride.
    pub center_radius: f64,
    pub tie_break: TieBreak,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig {
            range_bounds: None,
            center_radius: 1.5,
            tie_break: TieBreak::ShortestSegment,
        }
    }
}

impl AssignmentConfig {
    /// Half-open `(lo, hi]` regression range per level.
    pub fn regression_ranges(&self, n_levels: usize) -> Result<Vec<(f64, f64)>> {
        let bounds: Vec<f64> = match &self.range_bounds {
            Some(b) => b.clone(),
            None => std::iter::once(0.0)
                .chain((1..n_levels).map(|l| (1u64 << (l + 1)) as f64))
                .collect(),
        };
        if bounds.len() != n_levels {
            return Err(Error::Config(format!(
                "{} range bounds given for {n_levels} pyramid levels",
                bounds.len()
            )));
        }
        if bounds[0] != 0.0 || bounds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("range bounds must start at 0 and increase strictly".into()));
        }
        Ok((0..n_levels)
            .map(|l| (bounds[l], bounds.get(l + 1).copied().unwrap_or(f64::INFINITY)))
            .collect())
    }

    pub fn validate(&self, n_levels: usize) -> Result<()> {
        if !(self.center_radius > 0.0) {
            return Err(Error::Config("center_radius must be positive".into()));
        }
        self.regression_ranges(n_levels).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentTarget {
    /// Target class index for positives.
    pub class: Option<usize>,
    /// Index into the segment list this moment regresses.
    pub segment: Option<usize>,
    /// (start, end) distances in units of the level stride.
    pub offsets: [f64; 2],
    /// tIoU of the current prediction with the ground truth; positives only.
    pub sigma_iou: f64,
}

impl MomentTarget {
    const NEGATIVE: MomentTarget = MomentTarget {
        class: None,
        segment: None,
        offsets: [0.0, 0.0],
        sigma_iou: 0.0,
    };

    pub fn is_positive(&self) -> bool {
        self.class.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentTargets {
    pub levels: Vec<Vec<MomentTarget>>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Labels every valid moment of the pyramid as positive for at most one
/// segment. A moment at time `t` is positive for `[s, e]` when it lies
/// strictly inside the segment, within `center_radius` strides of its centre,
/// and the larger of its two offsets falls in the level's regression range.
pub fn assign_targets(
    segments: &[Segment],
    geometry: &PyramidGeometry,
    feature_fps: f64,
    cfg: &AssignmentConfig,
) -> Result<MomentTargets> {
    let ranges = cfg.regression_ranges(geometry.levels.len())?;
    let mut levels = Vec::with_capacity(geometry.levels.len());
    let (mut n_pos, mut n_neg) = (0, 0);
    for (lg, &(lo, hi)) in geometry.levels.iter().zip(&ranges) {
        let stride = lg.stride as f64;
        let radius_s = cfg.center_radius * stride / feature_fps;
        let mut moments = Vec::with_capacity(lg.valid_len);
        for j in 0..lg.valid_len {
            let t = lg.moment_position(j) / feature_fps;
            let mut best: Option<(usize, f64)> = None;
            for (si, seg) in segments.iter().enumerate() {
                if !(seg.start_s < t && t < seg.end_s) {
                    continue;
                }
                if (t - seg.center_s()).abs() > radius_s {
                    continue;
                }
                let reach = (t - seg.start_s).max(seg.end_s - t) * feature_fps;
                if !(reach > lo && reach <= hi) {
                    continue;
                }
                let len = seg.duration_s();
                match cfg.tie_break {
                    TieBreak::ShortestSegment => {
                        if best.is_none_or(|(_, l)| len < l) {
                            best = Some((si, len));
                        }
                    }
                }
            }
            let target = match best {
                Some((si, _)) => {
                    let seg = &segments[si];
                    n_pos += 1;
                    MomentTarget {
                        class: Some(seg.label.index()),
                        segment: Some(si),
                        offsets: [
                            (t - seg.start_s) * feature_fps / stride,
                            (seg.end_s - t) * feature_fps / stride,
                        ],
                        sigma_iou: 0.0,
                    }
                }
                None => {
                    n_neg += 1;
                    MomentTarget::NEGATIVE
                }
            };
            moments.push(target);
        }
        levels.push(moments);
    }
    Ok(MomentTargets { levels, n_pos, n_neg })
}

/// Sigmoid focal loss of probability `p` against a binary target.
pub fn focal_loss(p: f64, positive: bool, gamma: f64) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    if positive {
        -(1.0 - p).powf(gamma) * p.ln()
    } else {
        -p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Focal loss of a logit and its derivative with respect to the logit.
pub fn focal_loss_logit(logit: f64, positive: bool, gamma: f64) -> (f64, f64) {
    let raw = 1.0 / (1.0 + (-logit).exp());
    let p = raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let loss = focal_loss(p, positive, gamma);
    if raw != p {
        return (loss, 0.0);
    }
    let q = 1.0 - p;
    let grad = if positive {
        gamma * q.powf(gamma) * p * p.ln() - q.powf(gamma + 1.0)
    } else {
        -gamma * p.powf(gamma) * q * q.ln() + p.powf(gamma + 1.0)
    };
    (loss, grad)
}

/// 1D distance-IoU loss: `1 - IoU + ρ²/c²`, `ρ` the centre distance and `c`
/// the length of the smallest enclosing interval. A reversed or empty
/// prediction is treated as a point at its midpoint.
pub fn diou_loss(pred: (f64, f64), target: (f64, f64)) -> f64 {
    diou_loss_grad(pred, target).0
}

/// DIoU loss with its partial derivatives with respect to the prediction's
/// start and end.
pub fn diou_loss_grad(pred: (f64, f64), target: (f64, f64)) -> (f64, f64, f64) {
    let (mut a1, mut a2) = pred;
    let (b1, b2) = target;
    let degenerate = a1 >= a2;
    if degenerate {
        let m = 0.5 * (a1 + a2);
        a1 = m;
        a2 = m;
    }
    let inter_raw = a2.min(b2) - a1.max(b1);
    let inter = inter_raw.max(0.0);
    let union = (a2 - a1) + (b2 - b1) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let c = a2.max(b2) - a1.min(b1);
    let rho = 0.5 * (a1 + a2) - 0.5 * (b1 + b2);
    let loss = 1.0 - iou + if c > 0.0 { rho * rho / (c * c) } else { 0.0 };
    if degenerate || c <= 0.0 {
        return (loss, 0.0, 0.0);
    }

    let overlapping = inter_raw > 0.0;
    let dinter1 = if overlapping && a1 > b1 { -1.0 } else { 0.0 };
    let dinter2 = if overlapping && a2 < b2 { 1.0 } else { 0.0 };
    let dunion1 = -1.0 - dinter1;
    let dunion2 = 1.0 - dinter2;
    let diou1 = (dinter1 * union - inter * dunion1) / (union * union);
    let diou2 = (dinter2 * union - inter * dunion2) / (union * union);
    let dc1 = if a1 < b1 { -1.0 } else { 0.0 };
    let dc2 = if a2 > b2 { 1.0 } else { 0.0 };
    let dpen = |dc: f64| rho / (c * c) - 2.0 * rho * rho * dc / (c * c * c);
    (loss, -diou1 + dpen(dc1), -diou2 + dpen(dc2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 2.0 }
    }
}

/// The objective and its parts for one video.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossComponents {
    pub total: f64,
    /// `(1/N_pos) Σ σ_IoU · L_cls` over positives.
    pub cls_pos: f64,
    /// `(1/N_neg) Σ L_cls` over negatives.
    pub cls_neg: f64,
    /// `(1/N_pos) Σ L_reg` over positives.
    pub reg: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Stores the tIoU between each positive moment's decoded prediction and its
/// ground truth in the targets. The value is a constant weight for the loss.
pub fn fill_sigma_iou<F: Real>(targets: &mut MomentTargets, outputs: &HeadOutputs<F>) {
    for (lt, lo) in targets.levels.iter_mut().zip(&outputs.levels) {
        for (j, m) in lt.iter_mut().enumerate() {
            if m.is_positive() {
                let ds = lo.offsets.get(j, 0).to_f64().unwrap();
                let de = lo.offsets.get(j, 1).to_f64().unwrap();
                m.sigma_iou = tiou((-ds, de), (-m.offsets[0], m.offsets[1]));
            }
        }
    }
}

/// Evaluates the objective with the σ_IoU weights currently stored in
/// `targets`, returning its components and the gradient with respect to the
/// head outputs. No gradient flows through σ_IoU.
pub fn loss_with_stored_sigma<F: Real>(
    outputs: &HeadOutputs<F>,
    targets: &MomentTargets,
    cfg: &LossConfig,
) -> Result<(LossComponents, HeadGrads<F>)> {
    if outputs.levels.len() != targets.levels.len()
        || outputs.levels.iter().zip(&targets.levels).any(|(o, t)| o.logits.rows != t.len())
    {
        return Err(Error::Shape("head outputs and targets disagree in shape".into()));
    }
    let mut grads = HeadGrads::zeros_like(outputs);
    let pos_w = if targets.n_pos > 0 { 1.0 / targets.n_pos as f64 } else { 0.0 };
    let neg_w = if targets.n_neg > 0 { 1.0 / targets.n_neg as f64 } else { 0.0 };
    let mut c = LossComponents {
        n_pos: targets.n_pos,
        n_neg: targets.n_neg,
        ..Default::default()
    };
    for ((lo, lt), lg) in outputs.levels.iter().zip(&targets.levels).zip(grads.levels.iter_mut()) {
        let n_classes = lo.logits.cols;
        for (j, m) in lt.iter().enumerate() {
            let (weight, is_pos) = match m.class {
                Some(_) => (pos_w * m.sigma_iou, true),
                None => (neg_w, false),
            };
            let mut cls = 0.0;
            for k in 0..n_classes {
                let (l, g) = focal_loss_logit(lo.logits.get(j, k).to_f64().unwrap(), m.class == Some(k), cfg.gamma);
                cls += l;
                lg.logits.data[j * n_classes + k] = F::lit(weight * g);
            }
            if is_pos {
                c.cls_pos += pos_w * m.sigma_iou * cls;
                let ds = lo.offsets.get(j, 0).to_f64().unwrap();
                let de = lo.offsets.get(j, 1).to_f64().unwrap();
                let (l, d1, d2) = diou_loss_grad((-ds, de), (-m.offsets[0], m.offsets[1]));
                c.reg += pos_w * l;
                lg.offsets.data[j * 2] = F::lit(-pos_w * d1);
                lg.offsets.data[j * 2 + 1] = F::lit(pos_w * d2);
            } else {
                c.cls_neg += neg_w * cls;
            }
        }
    }
    c.total = c.cls_pos + c.cls_neg + c.reg;
    Ok((c, grads))
}

/// Full objective for one video: fills σ_IoU from the current outputs, then
/// evaluates. Returns the components and the head-output gradient.
pub fn total_loss<F: Real>(
    outputs: &HeadOutputs<F>,
    targets: &mut MomentTargets,
    cfg: &LossConfig,
) -> Result<(LossComponents, HeadGrads<F>)> {
    fill_sigma_iou(targets, outputs);
    loss_with_stored_sigma(outputs, targets, cfg)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::datamodel::{ActivityClass, DEFAULT_FEATURE_FPS};
    use crate::network::{LevelGeometry, LevelOutputs, Mat};

    #[test]
    fn focal_examples() {
        assert_relative_eq!(focal_loss(0.5, true, 0.0), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(focal_loss(1.0 - 1e-9, true, 2.0) < 1e-12);
        assert_relative_eq!(focal_loss(0.9, false, 2.0), -0.81 * 0.1f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(focal_loss(0.9, false, 2.0), 1.865, epsilon = 1e-3);
    }

    #[test]
    fn focal_monotone_and_ce_reduction() {
        let mut prev_pos = f64::INFINITY;
        let mut prev_neg = -1.0;
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let lp = focal_loss(p, true, 2.0);
            let ln = focal_loss(p, false, 2.0);
            assert!(lp <= prev_pos && ln >= prev_neg);
            prev_pos = lp;
            prev_neg = ln;
            assert!((focal_loss(p, true, 0.0) + p.ln()).abs() < 1e-12);
            assert!((focal_loss(p, false, 0.0) + (1.0 - p).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_logit_gradient() {
        for &x in &[-6.0, -1.3, 0.0, 0.7, 4.0] {
            for &y in &[true, false] {
                let (_, g) = focal_loss_logit(x, y, 2.0);
                let h = 1e-6;
                let fd = (focal_loss_logit(x + h, y, 2.0).0 - focal_loss_logit(x - h, y, 2.0).0) / (2.0 * h);
                assert!((g - fd).abs() < 1e-7, "x={x} y={y} {g} vs {fd}");
            }
        }
    }

    #[test]
    fn diou_examples() {
        assert_eq!(diou_loss((0.0, 10.0), (0.0, 10.0)), 0.0);
        assert_relative_eq!(diou_loss((0.0, 10.0), (5.0, 15.0)), 7.0 / 9.0, epsilon = 1e-12);
        let far = diou_loss((0.0, 1.0), (1e6, 1e6 + 1.0));
        assert!(far < 2.0 && far > 1.99);
        // degenerate prediction still has a finite loss
        let d = diou_loss((3.0, 3.0), (0.0, 10.0));
        assert!(d.is_finite() && d >= 1.0);
    }

    #[test]
    fn diou_gradient_matches_finite_differences() {
        let cases = [((0.0, 10.0), (5.0, 15.0)), ((-3.0, 2.0), (-1.0, 4.0)), ((-0.5, 7.0), (-2.0, 3.0)), ((0.0, 1.0), (3.0, 9.0))];
        for (a, b) in cases {
            let (_, g1, g2) = diou_loss_grad(a, b);
            let h = 1e-6;
            let f1 = (diou_loss((a.0 + h, a.1), b) - diou_loss((a.0 - h, a.1), b)) / (2.0 * h);
            let f2 = (diou_loss((a.0, a.1 + h), b) - diou_loss((a.0, a.1 - h), b)) / (2.0 * h);
            assert!((g1 - f1).abs() < 1e-6 && (g2 - f2).abs() < 1e-6, "{a:?} {b:?}");
        }
    }

    fn geometry(t: usize, levels: usize) -> PyramidGeometry {
        PyramidGeometry::new(t, levels)
    }

    #[test]
    fn no_segments_all_negative() {
        let g = geometry(100, 7);
        let t = assign_targets(&[], &g, DEFAULT_FEATURE_FPS, &AssignmentConfig::default()).unwrap();
        assert_eq!(t.n_pos, 0);
        assert_eq!(t.n_neg, g.total_valid());
    }

    #[test]
    fn centered_segment_has_symmetric_offsets() {
        let g = geometry(64, 3);
        // level 1 moment 20 sits at t = 20 s with fps 1; segment 18..22 s
        let seg = Segment::new(ActivityClass::Stop, 18.0, 22.0).unwrap();
        let t = assign_targets(&[seg], &g, 1.0, &AssignmentConfig::default()).unwrap();
        let m = t.levels[0][20];
        assert_eq!(m.class, Some(1));
        assert_eq!(m.offsets, [2.0, 2.0]);
    }

    #[test]
    fn ninety_second_segment_lands_on_level_five() {
        let fps = DEFAULT_FEATURE_FPS;
        let g = geometry(1200, 7);
        let seg = Segment::new(ActivityClass::TimeOut, 400.0, 490.0).unwrap();
        assert_relative_eq!(45.0 * fps, 42.1875);
        let cfg = AssignmentConfig::default();
        let ranges = cfg.regression_ranges(7).unwrap();
        assert_eq!(ranges[4], (32.0, 64.0));
        assert_eq!(ranges[6], (64.0 * 2.0, f64::INFINITY));
        let t = assign_targets(&[seg], &g, fps, &cfg).unwrap();
        let per_level: Vec<usize> = t.levels.iter().map(|l| l.iter().filter(|m| m.is_positive()).count()).collect();
        // the moments closest to the centre have a maximum offset just above 42.2
        let nearest = t.levels[4]
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_positive())
            .map(|(j, _)| (g.levels[4].moment_position(j) / fps - seg.center_s()).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(per_level[4] > 0, "{per_level:?}");
        assert!(nearest < 16.0 / fps);
        assert_eq!(per_level[0..4].iter().sum::<usize>(), 0);
    }

    #[test]
    fn shortest_segment_wins_ties() {
        let g = geometry(64, 1);
        let cfg = AssignmentConfig {
            range_bounds: Some(vec![0.0]),
            center_radius: 100.0,
            ..Default::default()
        };
        let long = Segment::new(ActivityClass::TimeOut, 0.0, 60.0).unwrap();
        let short = Segment::new(ActivityClass::Stop, 25.0, 35.0).unwrap();
        let t = assign_targets(&[long, short], &g, 1.0, &cfg).unwrap();
        assert_eq!(t.levels[0][30].segment, Some(1));
        assert_eq!(t.levels[0][10].segment, Some(0));
    }

    fn single_level_outputs(logits: Vec<f64>, offsets: Vec<f64>, n: usize) -> HeadOutputs<f64> {
        HeadOutputs {
            video_id: "v".into(),
            feature_fps: 1.0,
            duration_s: n as f64,
            levels: vec![LevelOutputs {
                geometry: LevelGeometry {
                    stride: 1,
                    padded_len: n,
                    valid_len: n,
                },
                logits: Mat::from_vec(n, 1, logits),
                offsets: Mat::from_vec(n, 2, offsets),
            }],
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn one_positive_one_negative_example() {
        let out = single_level_outputs(vec![0.0, logit(FOCAL_EPS)], vec![3.0, 4.0, 1.0, 1.0], 2);
        let mut targets = MomentTargets {
            levels: vec![vec![
                MomentTarget {
                    class: Some(0),
                    segment: Some(0),
                    offsets: [3.0, 4.0],
                    sigma_iou: 0.0,
                },
                MomentTarget::NEGATIVE,
            ]],
            n_pos: 1,
            n_neg: 1,
        };
        let (c, _) = total_loss(&out, &mut targets, &LossConfig::default()).unwrap();
        assert_relative_eq!(targets.levels[0][0].sigma_iou, 1.0);
        assert!(c.reg.abs() < 1e-12);
        assert_relative_eq!(c.total, 0.25 * std::f64::consts::LN_2, epsilon = 1e-6);
        assert_relative_eq!(c.total, 0.1733, epsilon = 1e-4);
    }

    #[test]
    fn perfect_predictions_give_near_zero_loss() {
        let out = single_level_outputs(vec![logit(FOCAL_EPS); 3], vec![1.0; 6], 3);
        let mut targets = MomentTargets {
            levels: vec![vec![MomentTarget::NEGATIVE; 3]],
            n_pos: 0,
            n_neg: 3,
        };
        let (c, _) = total_loss(&out, &mut targets, &LossConfig::default()).unwrap();
        assert!(c.total < 1e-12);

        let out = single_level_outputs(vec![logit(1.0 - FOCAL_EPS)], vec![2.0, 5.0], 1);
        let mut targets = MomentTargets {
            levels: vec![vec![MomentTarget {
                class: Some(0),
                segment: Some(0),
                offsets: [2.0, 5.0],
                sigma_iou: 0.0,
            }]],
            n_pos: 1,
            n_neg: 0,
        };
        let (c, _) = total_loss(&out, &mut targets, &LossConfig::default()).unwrap();
        assert!(c.total < 1e-10);
    }

    #[test]
    fn total_loss_gradient_through_network() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        use crate::datamodel::FeatureSequence;
        use crate::network::{forward, gradient_check, ModelConfig, ModelParams};

        let cfg = ModelConfig {
            input_dim: 4,
            backbone_width: 8,
            head_width: 8,
            n_levels: 3,
            prior_prob: 0.3,
            ..ModelConfig::default()
        };
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = (0..16 * 4).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let seq = FeatureSequence::new("g", 16, 4, 2, v, 1.0, 16.0).unwrap();
        let segs = [
            Segment::new(ActivityClass::TimeOut, 1.3, 4.1).unwrap(),
            Segment::new(ActivityClass::Stop, 6.2, 14.7).unwrap(),
        ];
        let geometry = PyramidGeometry::new(16, 3);
        let mut targets = assign_targets(&segs, &geometry, 1.0, &AssignmentConfig::default()).unwrap();
        assert!(targets.n_pos > 0);
        fill_sigma_iou(&mut targets, &forward(&params, &seq).unwrap().outputs);
        let loss_cfg = LossConfig::default();
        let loss = |out: &HeadOutputs<f64>| {
            let (c, g) = loss_with_stored_sigma(out, &targets, &loss_cfg).unwrap();
            (c.total, g)
        };
        let report = gradient_check(&params, &seq, loss, 1e-5, 1e-4).unwrap();
        assert_eq!(report.n_checked, params.num_parameters());
    }
}
