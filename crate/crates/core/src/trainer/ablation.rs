use std::fmt;

use super::{train_videos, LoadedVideo, TrainConfig};
use crate::datamodel::{ActivityClass, DatasetManifest};
use crate::metrics::ApReport;
use crate::network::{FeatureMode, ModelConfig, PyramidMode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub feature_mode: FeatureMode,
    pub pyramid_mode: PyramidMode,
    /// Validation report of the best checkpoint.
    pub report: ApReport,
}

impl AblationRow {
    pub fn name(&self) -> String {
        format!("{}+{}", self.feature_mode.key(), self.pyramid_mode.key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Global-only and full features, each with max-only and fused pyramids.
pub fn default_grid() -> Vec<(FeatureMode, PyramidMode)> {
    vec![
        (FeatureMode::GlobalOnly, PyramidMode::MaxOnly),
        (FeatureMode::GlobalOnly, PyramidMode::MaxPlusAvg),
        (FeatureMode::Full, PyramidMode::MaxOnly),
        (FeatureMode::Full, PyramidMode::MaxPlusAvg),
    ]
}

impl AblationTable {
    pub fn row(&self, feature_mode: FeatureMode, pyramid_mode: PyramidMode) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.feature_mode == feature_mode && r.pyramid_mode == pyramid_mode)
    }

    /// One row per configuration; per class the AP at each threshold and its
    /// mean, then the mean over classes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,feature_mode,pyramid_mode");
        let thresholds = self.rows.first().map(|r| r.report.thresholds.clone()).unwrap_or_default();
        for c in ActivityClass::ALL {
            for t in &thresholds {
                out.push_str(&format!(",{}@{t}", c.key()));
            }
            out.push_str(&format!(",{}_avg", c.key()));
        }
        out.push_str(",mean\n");
        let cell = |v: f64| if v.is_nan() { "nan".to_string() } else { format!("{v:.6}") };
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.name(), r.feature_mode.key(), r.pyramid_mode.key()));
            for (c, aps) in &r.report.rows {
                for ap in aps {
                    out.push_str(&format!(",{}", cell(*ap)));
                }
                out.push_str(&format!(",{}", cell(r.report.class_mean(*c))));
            }
            out.push_str(&format!(",{}\n", cell(r.report.overall_mean())));
        }
        out
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            write!(f, "{:<26}", r.name())?;
            for c in ActivityClass::ALL {
                write!(f, " {:>10} {:>7.2}", c.display_name(), 100.0 * r.report.class_mean(c))?;
            }
            writeln!(f, "   mean {:>6.2}", 100.0 * r.report.overall_mean())?;
        }
        Ok(())
    }
}

/// Trains one model per grid cell with the same seed and reports each
/// cell's best validation AP.
pub fn run_ablation(
    manifest: &DatasetManifest,
    grid: &[(FeatureMode, PyramidMode)],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<AblationTable> {
    let videos = super::load_videos(manifest)?;
    run_ablation_videos(&videos, grid, model, cfg)
}

/// [`run_ablation`] over videos already in memory.
pub fn run_ablation_videos(
    videos: &[LoadedVideo],
    grid: &[(FeatureMode, PyramidMode)],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &(feature_mode, pyramid_mode) in grid {
        let cell_cfg = TrainConfig {
            feature_mode,
            pyramid_mode,
            ..cfg.clone()
        };
        let outcome = train_videos(videos, model, &cell_cfg, None)?;
        let best = outcome
            .evals
            .iter()
            .find(|e| Some(e.epoch) == outcome.best_epoch)
            .ok_or_else(|| Error::Data("ablation needs a non-empty test split".into()))?;
        log::info!("ablation {}+{}: mAP {:.4}", feature_mode.key(), pyramid_mode.key(), outcome.best_map);
        rows.push(AblationRow {
            feature_mode,
            pyramid_mode,
            report: best.report.clone(),
        });
    }
    Ok(AblationTable { rows })
}
