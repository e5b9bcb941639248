//! Browser bindings for three pieces of the detector: the synthetic video
//! generator, Soft-NMS rescoring and the max/avg pooling pyramid. Every
//! export returns a JSON string so the page needs no generated typings.

use gadet::datamodel::{ActivityClass, Proposal, Segment};
use gadet::decode::{soft_nms, DecodeConfig};
use gadet::network::{build_pyramid, Mat, PyramidGeometry, PyramidMode};
use gadet::synthgen::{generate_video, ClassPatterns, SynthConfig};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Longest trace sent to the page; longer videos are averaged into bins.
const MAX_TRACE_POINTS: usize = 800;

#[derive(Serialize)]
struct Trace {
    duration_s: f64,
    feature_fps: f64,
    bin_s: f64,
    segments: Vec<Segment>,
    /// Per class, the binned projection of the features onto the class
    /// pattern, in units of the pattern norm.
    response: Vec<Vec<f64>>,
}

/// One synthetic video: planted segments plus a per-class response trace.
pub fn synth_trace_json(seed: u64, snr: f64, duration_s: f64) -> Result<String, String> {
    let cfg = SynthConfig {
        n_videos: 1,
        video_duration_range_s: (duration_s, duration_s + 1.0),
        snr,
        seed,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let patterns = ClassPatterns::new(&cfg);
    let (seq, segments) = generate_video(&cfg, &patterns, 0).map_err(|e| e.to_string())?;
    let t = seq.len();
    let bin = t.div_ceil(MAX_TRACE_POINTS).max(1);
    let response = ActivityClass::ALL
        .iter()
        .map(|&c| {
            let p = patterns.get(c);
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let per_row: Vec<f64> = (0..t)
                .map(|i| seq.row(i).iter().zip(p).map(|(&x, &w)| x as f64 * w).sum::<f64>() / norm)
                .collect();
            per_row.chunks(bin).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
        })
        .collect();
    let trace = Trace {
        duration_s: seq.duration_s(),
        feature_fps: seq.feature_fps(),
        bin_s: bin as f64 / seq.feature_fps(),
        segments,
        response,
    };
    Ok(serde_json::to_string(&trace).expect("trace serializes"))
}

/// Soft-NMS over a JSON array of proposals.
pub fn rescore_json(proposals: &str, sigma: f64, prune_threshold: f64) -> Result<String, String> {
    let input: Vec<Proposal> = serde_json::from_str(proposals).map_err(|e| e.to_string())?;
    let cfg = DecodeConfig {
        softnms_sigma: sigma,
        softnms_prune: prune_threshold,
        ..DecodeConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&soft_nms(&input, &cfg)).expect("proposals serialize"))
}

/// Pyramid levels of a one-channel signal under the given pyramid mode
/// ("max_only", "avg_only" or "max_plus_avg").
pub fn pyramid_json(signal: &[f64], n_levels: usize, mode: &str) -> Result<String, String> {
    if signal.is_empty() || n_levels == 0 {
        return Err("the signal and the level count must be non-empty".into());
    }
    let mode: PyramidMode = serde_json::from_value(json!(mode)).map_err(|e| e.to_string())?;
    let geometry = PyramidGeometry::new(signal.len(), n_levels);
    let state = build_pyramid(Mat::from_vec(signal.len(), 1, signal.to_vec()), &geometry, mode);
    let levels: Vec<_> = state
        .levels
        .iter()
        .map(|l| {
            let g = &l.geometry;
            json!({
                "stride": g.stride,
                "positions": (0..g.valid_len).map(|j| g.moment_position(j)).collect::<Vec<_>>(),
                "fused": l.fused.data,
                "max": l.max_branch.as_ref().map(|m| &m.data),
                "avg": l.avg_branch.as_ref().map(|m| &m.data),
            })
        })
        .collect();
    Ok(json!({ "padded_len": geometry.levels[0].padded_len, "levels": levels }).to_string())
}

#[wasm_bindgen]
pub fn synth_trace(seed: u32, snr: f64, duration_s: f64) -> Result<String, JsValue> {
    synth_trace_json(seed as u64, snr, duration_s).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn rescore(proposals: &str, sigma: f64, prune_threshold: f64) -> Result<String, JsValue> {
    rescore_json(proposals, sigma, prune_threshold).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn pyramid(signal: &[f64], n_levels: usize, mode: &str) -> Result<String, JsValue> {
    pyramid_json(signal, n_levels, mode).map_err(|e| JsValue::from_str(&e))
}
