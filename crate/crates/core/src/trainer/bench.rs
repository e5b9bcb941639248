use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datamodel::{FeatureSequence, DEFAULT_FEATURE_FPS};
use crate::decode::{decode_proposals, soft_nms, DecodeConfig};
use crate::network::{forward, FeatureMode, ModelConfig, ModelParams};
use crate::{Error, Result};

/// Wall-clock statistics of forward + decode over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub t: usize,
    pub feature_fps: f64,
    pub repetitions: usize,
    pub n_parameters: usize,
    pub median_s: f64,
    pub p95_s: f64,
    pub features_per_s_median: f64,
    pub features_per_s_p95: f64,
    /// Seconds of video processed per wall-clock second.
    pub video_speed_median: f64,
    pub video_speed_p95: f64,
}

/// Times `repetitions` forward passes plus decoding and Soft-NMS of a random
/// `t`-step input through a freshly initialised model, after one warm-up run.
/// The p95 figures describe the slow tail.
pub fn bench_throughput(model: &ModelConfig, t: usize, repetitions: usize, seed: u64) -> Result<BenchReport> {
    if t == 0 || repetitions == 0 {
        return Err(Error::Config("bench needs t >= 1 and repetitions >= 1".into()));
    }
    let params = ModelParams::<f32>::init(model, seed)?;
    let d = model.input_dim;
    let d_g = if model.feature_mode == FeatureMode::LocalOnly { 0 } else { d };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let fps = DEFAULT_FEATURE_FPS;
    let seq = FeatureSequence::new("bench", t, d, d_g, values, fps, t as f64 / fps)?;
    let cfg = DecodeConfig::default();

    let run = || -> Result<f64> {
        let start = Instant::now();
        let pass = forward(&params, &seq)?;
        let kept = soft_nms(&decode_proposals(&pass.outputs, &cfg), &cfg);
        std::hint::black_box(kept);
        Ok(start.elapsed().as_secs_f64())
    };
    run()?;
    let mut times = (0..repetitions).map(|_| run()).collect::<Result<Vec<f64>>>()?;
    times.sort_by(f64::total_cmp);
    let median_s = quantile(&times, 0.5);
    let p95_s = quantile(&times, 0.95);
    let video_s = t as f64 / fps;
    Ok(BenchReport {
        t,
        feature_fps: fps,
        repetitions,
        n_parameters: params.num_parameters(),
        median_s,
        p95_s,
        features_per_s_median: t as f64 / median_s,
        features_per_s_p95: t as f64 / p95_s,
        video_speed_median: video_s / median_s,
        video_speed_p95: video_s / p95_s,
    })
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert!((quantile(&v, 0.95) - 4.8).abs() < 1e-12);
        assert_eq!(quantile(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn report_fields() {
        let cfg = ModelConfig {
            input_dim: 8,
            backbone_width: 8,
            head_width: 8,
            ..ModelConfig::default()
        };
        let r = bench_throughput(&cfg, 256, 3, 0).unwrap();
        assert!(r.p95_s >= r.median_s && r.median_s > 0.0);
        assert!((r.video_speed_median - 256.0 / 0.9375 / r.median_s).abs() < 1e-6);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["median_s", "p95_s", "video_speed_median", "video_speed_p95"] {
            assert!(json.get(key).is_some());
        }
    }
}
