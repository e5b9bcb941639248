//! The `gadet` command-line tool.
//!
//! Exit status: 0 on success, 2 for input errors (bad arguments, configs,
//! files or shapes), 3 when synthesis cannot place segments, 4 when training
//! diverges.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::datamodel::{load_manifest, read_feature_file, ActivityClass, Split};
use crate::decode::{detect, write_detections, DecodeConfig};
use crate::metrics::{clip_scores, clip_split, fpr_at_recall, ApReport, DEFAULT_THRESHOLDS};
use crate::network::{forward, load_checkpoint, ModelConfig, ModelParams};
use crate::synthgen::{synthesize, SynthConfig};
use crate::trainer::{bench_throughput, default_grid, detect_all, load_videos, run_ablation, train, LoadedVideo, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "gadet", version, about = "Group activity detection on temporal feature sequences")]
pub struct Cli {
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the seed of the synth, train, ablate and bench configs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (feature files and manifest).
    Synth {
        /// SynthConfig JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on the manifest's train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the train config's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// AP at tIoU thresholds on the manifest's test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
        thresholds: Vec<f64>,
        /// Where to write the CSV report; printed to stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        decode_config: Option<PathBuf>,
    },
    /// Detect activities in one feature file.
    Detect {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        decode_config: Option<PathBuf>,
    },
    /// FPR at 95% recall of per-clip scores on the test split.
    ClipEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        clip_len: f64,
    },
    /// Forward + decode throughput of a freshly initialised model.
    Bench {
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long = "T", default_value_t = 4096)]
        t: usize,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
    },
    /// Train one model per (feature mode, pyramid mode) cell and write the table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        // A pool built earlier in this process stays in effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match &cli.command {
        Command::Synth { config, out } => {
            let mut cfg: SynthConfig = read_config(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let manifest = synthesize(&cfg, out)?;
            println!("{}", manifest.counts());
            Ok(())
        }
        Command::Train {
            data,
            model_config,
            train_config,
            out,
            epochs,
        } => {
            let manifest = load_manifest(data)?;
            let model: ModelConfig = read_config(model_config.as_deref())?;
            let mut cfg: TrainConfig = read_config(train_config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            let outcome = train(&manifest, &model, &cfg, Some(out))?;
            let summary = serde_json::json!({
                "steps": outcome.log.len(),
                "final_loss": outcome.log.last().map(|l| l.total_loss),
                "best_epoch": outcome.best_epoch,
                "best_mean_ap": if outcome.best_map.is_nan() { None } else { Some(outcome.best_map) },
            });
            write_json(&out.join("summary.json"), &summary)?;
            if let Some(last) = outcome.evals.last() {
                println!("{}", last.report);
            }
            println!("{summary}");
            Ok(())
        }
        Command::Eval {
            data,
            ckpt,
            thresholds,
            csv,
            decode_config,
        } => {
            let manifest = load_manifest(data)?;
            let params: ModelParams<f32> = load_checkpoint(ckpt)?;
            let decode: DecodeConfig = read_config(decode_config.as_deref())?;
            let videos = load_videos(&manifest)?;
            let test = split_videos(&videos, Split::Test)?;
            let proposals = detect_all(&params, &test, &decode)?;
            let gt = crate::metrics::ground_truth(&manifest, Split::Test);
            let report = ApReport::evaluate(&proposals, &gt, thresholds);
            print!("{report}");
            match csv {
                Some(path) => std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?,
                None => print!("{}", report.to_csv()),
            }
            Ok(())
        }
        Command::Detect {
            features,
            ckpt,
            out,
            decode_config,
        } => {
            let seq = read_feature_file(features)?;
            let params: ModelParams<f32> = load_checkpoint(ckpt)?;
            let decode: DecodeConfig = read_config(decode_config.as_deref())?;
            let proposals = detect(&params, &seq, &decode)?;
            write_detections(out, &proposals)?;
            println!("{} detections written to {}", proposals.len(), out.display());
            Ok(())
        }
        Command::ClipEval { data, ckpt, clip_len } => {
            let manifest = load_manifest(data)?;
            let params: ModelParams<f32> = load_checkpoint(ckpt)?;
            let videos = load_videos(&manifest)?;
            let test = split_videos(&videos, Split::Test)?;
            let mut scores = vec![Vec::new(); ActivityClass::COUNT];
            let mut labels = vec![Vec::new(); ActivityClass::COUNT];
            for v in test {
                let clips = clip_split(&v.seq, &v.segments, *clip_len)?;
                let outputs = forward(&params, &v.seq)?.outputs;
                for c in ActivityClass::ALL {
                    scores[c.index()].extend(clip_scores(&outputs, &clips, c));
                    labels[c.index()].extend(clips.iter().map(|k| k.positive[c.index()]));
                }
            }
            let mut result = serde_json::Map::new();
            for c in ActivityClass::ALL {
                let fpr = fpr_at_recall(&scores[c.index()], &labels[c.index()], 0.95)
                    .map_err(|e| Error::Metric(format!("{}: {e}", c.display_name())))?;
                println!("{:<10} FPR-95 {:.4}", c.display_name(), fpr);
                result.insert(c.key().to_string(), serde_json::json!(fpr));
            }
            println!("{}", serde_json::Value::Object(result));
            Ok(())
        }
        Command::Bench {
            model_config,
            t,
            repetitions,
        } => {
            let model: ModelConfig = read_config(model_config.as_deref())?;
            let report = bench_throughput(&model, *t, *repetitions, cli.seed.unwrap_or(0))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Ablate {
            data,
            model_config,
            train_config,
            out,
        } => {
            let manifest = load_manifest(data)?;
            let model: ModelConfig = read_config(model_config.as_deref())?;
            let mut cfg: TrainConfig = read_config(train_config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let table = run_ablation(&manifest, &default_grid(), &model, &cfg)?;
            print!("{table}");
            std::fs::write(out, table.to_csv()).map_err(|e| Error::io(out, e))
        }
    }
}

fn split_videos(videos: &[LoadedVideo], split: Split) -> Result<Vec<&LoadedVideo>> {
    let out: Vec<&LoadedVideo> = videos.iter().filter(|v| v.split == split).collect();
    if out.is_empty() {
        return Err(Error::Data(format!("the {split:?} split is empty").to_lowercase()));
    }
    Ok(out)
}

/// Reads a JSON config, or its defaults when no path is given.
fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
