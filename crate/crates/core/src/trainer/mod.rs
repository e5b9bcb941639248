//! Training loop, evaluation, the ablation harness and the throughput
//! benchmark.

mod ablation;
mod bench;
mod optim;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assign_loss::{assign_targets, total_loss, AssignmentConfig, LossComponents, LossConfig, MomentTargets};
use crate::datamodel::{DatasetManifest, FeatureSequence, Proposal, Segment, Split};
use crate::decode::{detect, DecodeConfig};
use crate::metrics::{ApReport, GroundTruth, DEFAULT_THRESHOLDS};
use crate::network::{backward, forward, save_checkpoint, FeatureMode, Gradients, ModelConfig, ModelParams, PyramidGeometry, PyramidMode};
use crate::{Error, Result};

pub use ablation::{default_grid, run_ablation, run_ablation_videos, AblationRow, AblationTable};
pub use bench::{bench_throughput, BenchReport};
pub use optim::{clip_grad_norm, AdamW, LrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Videos per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub feature_mode: FeatureMode,
    pub pyramid_mode: PyramidMode,
    /// Evaluate on the validation split every this many epochs (and after
    /// the last); 0 evaluates only after the last epoch.
    pub eval_every: usize,
    pub assignment: AssignmentConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    pub thresholds: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 2,
            learning_rate: 1e-4,
            weight_decay: 0.05,
            warmup_epochs: 5,
            grad_clip_norm: 1.0,
            seed: 0,
            feature_mode: FeatureMode::Full,
            pyramid_mode: PyramidMode::MaxPlusAvg,
            eval_every: 5,
            assignment: AssignmentConfig::default(),
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip_norm > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and grad_clip_norm > 0".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("thresholds must lie in (0, 1]".into()));
        }
        self.decode.validate()
    }

    /// The model config with this run's feature and pyramid modes, and the
    /// input width those columns of `seq` provide.
    pub fn resolve_model(&self, model: &ModelConfig, seq: &FeatureSequence) -> ModelConfig {
        let (lo, hi) = self.feature_mode.columns(seq.dim(), seq.global_dim());
        ModelConfig {
            input_dim: hi - lo,
            feature_mode: self.feature_mode,
            pyramid_mode: self.pyramid_mode,
            ..model.clone()
        }
    }
}

/// A manifest video with its features in memory.
#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub seq: FeatureSequence,
    pub segments: Vec<Segment>,
    pub split: Split,
}

/// Reads every feature file of the manifest.
pub fn load_videos(manifest: &DatasetManifest) -> Result<Vec<LoadedVideo>> {
    manifest
        .videos
        .iter()
        .map(|v| {
            Ok(LoadedVideo {
                seq: manifest.load_features(v)?,
                segments: v.segments.clone(),
                split: v.split,
            })
        })
        .collect()
}

fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Detections for every video, in input order.
pub fn detect_all(params: &ModelParams<f32>, videos: &[&LoadedVideo], cfg: &DecodeConfig) -> Result<Vec<Proposal>> {
    let per_video = par_map(videos, |v| detect(params, &v.seq, cfg));
    let mut out = Vec::new();
    for r in per_video {
        out.extend(r?);
    }
    Ok(out)
}

/// AP report of `params` on the given videos.
pub fn evaluate(params: &ModelParams<f32>, videos: &[&LoadedVideo], cfg: &DecodeConfig, thresholds: &[f64]) -> Result<ApReport> {
    let proposals = detect_all(params, videos, cfg)?;
    let gt: GroundTruth = videos.iter().map(|v| (v.seq.video_id.clone(), v.segments.clone())).collect();
    Ok(ApReport::evaluate(&proposals, &gt, thresholds))
}

/// One optimizer step's log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub total_loss: f64,
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub reg: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,epoch,total_loss,cls_pos,cls_neg,reg,lr,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.8},{:.8e},{:.8}",
            self.step, self.epoch, self.total_loss, self.cls_pos, self.cls_neg, self.reg, self.lr, self.grad_norm
        )
    }
}

#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub epoch: usize,
    pub report: ApReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ModelParams<f32>,
    /// Parameters with the best validation mean AP; the final ones when
    /// nothing was evaluated.
    pub best_params: ModelParams<f32>,
    pub best_epoch: Option<usize>,
    pub best_map: f64,
    pub log: Vec<StepLog>,
    pub evals: Vec<EvalRecord>,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(StepLog::CSV_HEADER);
        s.push('\n');
        for row in &self.log {
            s.push_str(&row.csv_row());
            s.push('\n');
        }
        s
    }
}

struct Sample<'a> {
    video: &'a LoadedVideo,
    targets: MomentTargets,
}

/// Loss and parameter gradient of one video.
fn video_step(params: &ModelParams<f32>, sample: &Sample<'_>, loss_cfg: &LossConfig) -> Result<(LossComponents, Gradients<f32>)> {
    let pass = forward(params, &sample.video.seq)?;
    let mut targets = sample.targets.clone();
    let (components, head_grads) = total_loss(&pass.outputs, &mut targets, loss_cfg)?;
    let grads = backward(params, &pass, &head_grads);
    Ok((components, grads))
}

/// Trains on the manifest's train split, evaluating on its test split. With
/// `out_dir`, writes `final.ckpt`, `best.ckpt` and `metrics.csv` there.
pub fn train(manifest: &DatasetManifest, model_cfg: &ModelConfig, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let videos = load_videos(manifest)?;
    train_videos(&videos, model_cfg, cfg, out_dir)
}

/// [`train`] over videos already in memory.
pub fn train_videos(videos: &[LoadedVideo], model_cfg: &ModelConfig, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set: Vec<&LoadedVideo> = videos.iter().filter(|v| v.split == Split::Train).collect();
    let val_set: Vec<&LoadedVideo> = videos.iter().filter(|v| v.split == Split::Test).collect();
    let Some(first) = train_set.first() else {
        return Err(Error::Data("the train split is empty".into()));
    };
    let model_cfg = cfg.resolve_model(model_cfg, &first.seq);
    let mut params = ModelParams::<f32>::init(&model_cfg, cfg.seed)?;

    let samples = train_set
        .iter()
        .map(|v| {
            let geometry = PyramidGeometry::new(v.seq.len(), model_cfg.n_levels);
            let targets = assign_targets(&v.segments, &geometry, v.seq.feature_fps(), &cfg.assignment)?;
            Ok(Sample { video: v, targets })
        })
        .collect::<Result<Vec<_>>>()?;

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        base: cfg.learning_rate,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut outcome = TrainOutcome {
        final_params: params.clone(),
        best_params: params.clone(),
        best_epoch: None,
        best_map: f64::NAN,
        log: Vec::new(),
        evals: Vec::new(),
    };

    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let batch_samples: Vec<&Sample<'_>> = batch.iter().map(|&i| &samples[i]).collect();
            let results = par_map(&batch_samples, |s| video_step(&params, s, &cfg.loss));
            let mut grads = params.zero_grads();
            let mut mean = LossComponents::default();
            let n = batch.len() as f64;
            for (r, s) in results.into_iter().zip(&batch_samples) {
                let (c, g) = r?;
                if !c.total.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: format!(
                            "non-finite loss on `{}`: total={} cls_pos={} cls_neg={} reg={}",
                            s.video.seq.video_id, c.total, c.cls_pos, c.cls_neg, c.reg
                        ),
                    });
                }
                grads.add_assign(&g);
                mean.total += c.total / n;
                mean.cls_pos += c.cls_pos / n;
                mean.cls_neg += c.cls_neg / n;
                mean.reg += c.reg / n;
            }
            grads.scale(1.0 / n as f32);
            let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite gradient norm at loss {}", mean.total),
                });
            }
            let lr = schedule.at(step);
            opt.step(&mut params, &grads, lr);
            outcome.log.push(StepLog {
                step,
                epoch,
                total_loss: mean.total,
                cls_pos: mean.cls_pos,
                cls_neg: mean.cls_neg,
                reg: mean.reg,
                lr,
                grad_norm,
            });
            step += 1;
        }

        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if !val_set.is_empty() && (last || due) {
            let report = evaluate(&params, &val_set, &cfg.decode, &cfg.thresholds)?;
            let map = report.overall_mean();
            log::info!(
                "epoch {}: loss {:.4}, validation mAP {:.4}",
                epoch + 1,
                outcome.log.last().map_or(f64::NAN, |l| l.total_loss),
                map
            );
            if outcome.best_epoch.is_none() || map > outcome.best_map {
                outcome.best_map = map;
                outcome.best_epoch = Some(epoch + 1);
                outcome.best_params = params.clone();
            }
            outcome.evals.push(EvalRecord { epoch: epoch + 1, report });
        }
    }
    if outcome.best_epoch.is_none() {
        outcome.best_params = params.clone();
    }
    outcome.final_params = params;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&outcome.final_params, dir.join("final.ckpt"))?;
        save_checkpoint(&outcome.best_params, dir.join("best.ckpt"))?;
        let path: PathBuf = dir.join("metrics.csv");
        std::fs::write(&path, outcome.metrics_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(outcome)
}

/// Seeded permutation of the training videos for one epoch.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order
}
