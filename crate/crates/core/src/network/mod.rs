//! The detection network: a convolutional backbone, parameter-free max and
//! average pooling pyramids fused by addition, and classification and
//! regression heads shared across pyramid levels. Gradients are computed by
//! an explicit reverse pass over cached activations.

mod checkpoint;
mod gradcheck;
mod layers;
mod model;
mod params;
mod tensor;

use serde::{Deserialize, Serialize};

use crate::datamodel::FeatureSequence;
use crate::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use model::{backward, build_pyramid, forward, forward_padded, ForwardPass, HeadGrads, HeadOutputs, LevelGrads, LevelOutputs, PyramidLevel, PyramidState};
pub use params::{Block, Conv, Gradients, Layers, ModelParams, Norm, Tensor};
pub use tensor::{Mat, Real};

/// Which input columns feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    Full,
    GlobalOnly,
    LocalOnly,
}

impl FeatureMode {
    /// Column range of a sequence with `d` columns, `d_global` of them global.
    pub fn columns(self, d: usize, d_global: usize) -> (usize, usize) {
        match self {
            FeatureMode::Full => (0, d),
            FeatureMode::GlobalOnly => (0, d_global),
            FeatureMode::LocalOnly => (d_global, d),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            FeatureMode::Full => "full",
            FeatureMode::GlobalOnly => "global_only",
            FeatureMode::LocalOnly => "local_only",
        }
    }
}

/// Which pooling branches build the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PyramidMode {
    MaxOnly,
    AvgOnly,
    #[default]
    MaxPlusAvg,
}

impl PyramidMode {
    pub fn uses_max(self) -> bool {
        matches!(self, PyramidMode::MaxOnly | PyramidMode::MaxPlusAvg)
    }

    pub fn uses_avg(self) -> bool {
        matches!(self, PyramidMode::AvgOnly | PyramidMode::MaxPlusAvg)
    }

    pub fn key(self) -> &'static str {
        match self {
            PyramidMode::MaxOnly => "max_only",
            PyramidMode::AvgOnly => "avg_only",
            PyramidMode::MaxPlusAvg => "max_plus_avg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub backbone_width: usize,
    pub n_backbone_convs: usize,
    pub kernel_size: usize,
    pub n_levels: usize,
    pub head_width: usize,
    pub n_head_convs: usize,
    pub n_classes: usize,
    /// Initial positive probability encoded in the classification bias.
    pub prior_prob: f64,
    pub norm_eps: f64,
    pub pyramid_mode: PyramidMode,
    pub feature_mode: FeatureMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 64,
            backbone_width: 256,
            n_backbone_convs: 2,
            kernel_size: 3,
            n_levels: 7,
            head_width: 256,
            n_head_convs: 2,
            n_classes: 2,
            prior_prob: 0.01,
            norm_eps: 1e-5,
            pyramid_mode: PyramidMode::MaxPlusAvg,
            feature_mode: FeatureMode::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("model config: {msg}")));
        if self.n_levels == 0 || self.n_levels > 24 {
            return bad("n_levels must be in [1, 24]");
        }
        if self.input_dim == 0 || self.backbone_width == 0 || self.head_width == 0 || self.n_classes == 0 {
            return bad("widths and class count must be positive");
        }
        if self.n_backbone_convs == 0 {
            return bad("n_backbone_convs must be at least 1");
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad("prior_prob must lie in (0, 1)");
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive");
        }
        Ok(())
    }

    /// Checks that `seq` provides exactly `input_dim` columns under the feature mode.
    pub fn input_columns(&self, seq: &FeatureSequence) -> Result<(usize, usize)> {
        let (lo, hi) = self.feature_mode.columns(seq.dim(), seq.global_dim());
        if hi - lo != self.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} input columns ({} mode) but `{}` provides {} (D={}, d_g={})",
                self.input_dim,
                self.feature_mode.key(),
                seq.video_id,
                hi - lo,
                seq.dim(),
                seq.global_dim()
            )));
        }
        Ok((lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGeometry {
    /// In feature-grid cells.
    pub stride: usize,
    pub padded_len: usize,
    pub valid_len: usize,
}

impl LevelGeometry {
    /// Grid position of moment `j`: the centre of the grid cells it pools.
    pub fn moment_position(&self, j: usize) -> f64 {
        (j * self.stride) as f64 + (self.stride as f64 - 1.0) * 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidGeometry {
    pub levels: Vec<LevelGeometry>,
}

impl PyramidGeometry {
    /// Geometry for `t` valid steps with the input right-padded to the next
    /// multiple of `2^(n_levels-1)`.
    pub fn new(t: usize, n_levels: usize) -> Self {
        let unit = 1usize << (n_levels - 1);
        Self::with_padding(t, n_levels, t.div_ceil(unit) * unit).expect("padded length is valid")
    }

    pub fn with_padding(t: usize, n_levels: usize, padded_len: usize) -> Result<Self> {
        let unit = 1usize << (n_levels - 1);
        if t == 0 || padded_len < t || !padded_len.is_multiple_of(unit) {
            return Err(Error::Shape(format!(
                "padded length {padded_len} must be a multiple of {unit} and at least {t}"
            )));
        }
        let mut levels = Vec::with_capacity(n_levels);
        let (mut len, mut valid) = (padded_len, t);
        for l in 0..n_levels {
            levels.push(LevelGeometry {
                stride: 1 << l,
                padded_len: len,
                valid_len: valid,
            });
            len /= 2;
            valid = valid.div_ceil(2);
        }
        Ok(PyramidGeometry { levels })
    }

    pub fn total_valid(&self) -> usize {
        self.levels.iter().map(|l| l.valid_len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_t100_l7() {
        let g = PyramidGeometry::new(100, 7);
        let lens: Vec<_> = g.levels.iter().map(|l| l.padded_len).collect();
        let valid: Vec<_> = g.levels.iter().map(|l| l.valid_len).collect();
        assert_eq!(lens, vec![128, 64, 32, 16, 8, 4, 2]);
        assert_eq!(valid, vec![100, 50, 25, 13, 7, 4, 2]);
        assert_eq!(g.levels[3].stride, 8);
    }

    #[test]
    fn geometry_rejects_bad_padding() {
        assert!(PyramidGeometry::with_padding(100, 7, 100).is_err());
        assert!(PyramidGeometry::with_padding(100, 7, 64).is_err());
        assert!(PyramidGeometry::with_padding(100, 7, 192).is_ok());
    }

    #[test]
    fn moment_positions() {
        let g = PyramidGeometry::new(64, 3);
        assert_eq!(g.levels[0].moment_position(30), 30.0);
        assert_eq!(g.levels[1].moment_position(0), 0.5);
        assert_eq!(g.levels[2].moment_position(1), 5.5);
    }

    #[test]
    fn config_validation() {
        ModelConfig::default().validate().unwrap();
        let mut c = ModelConfig::default();
        c.kernel_size = 2;
        assert!(c.validate().is_err());
        c = ModelConfig::default();
        c.n_levels = 0;
        assert!(c.validate().is_err());
    }
}
