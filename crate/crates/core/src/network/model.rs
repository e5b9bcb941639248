use super::layers::{
    avg_pool_backward, avg_pool_forward, conv_backward, conv_forward, layer_norm_backward, layer_norm_forward,
    max_pool_backward, max_pool_forward, relu_backward_inplace, relu_inplace, sigmoid, softplus, NormCache,
};
use super::params::{Block, Conv, Gradients, ModelParams, Tensor};
use super::tensor::{Mat, Real};
use super::{LevelGeometry, PyramidGeometry, PyramidMode};
use crate::datamodel::FeatureSequence;
use crate::Result;

/// One pyramid level. Only the valid rows are materialised.
#[derive(Debug, Clone)]
pub struct PyramidLevel<F> {
    pub geometry: LevelGeometry,
    pub fused: Mat<F>,
    pub max_branch: Option<Mat<F>>,
    pub avg_branch: Option<Mat<F>>,
}

#[derive(Debug, Clone)]
pub struct PyramidState<F> {
    pub levels: Vec<PyramidLevel<F>>,
}

/// Head outputs at the valid moments of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutputs<F> {
    pub geometry: LevelGeometry,
    /// `valid_len × n_classes` class logits.
    pub logits: Mat<F>,
    /// `valid_len × 2` non-negative (start, end) distances in units of the stride.
    pub offsets: Mat<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<F> {
    pub video_id: String,
    pub feature_fps: f64,
    pub duration_s: f64,
    pub levels: Vec<LevelOutputs<F>>,
}

impl<F: Real> HeadOutputs<F> {
    pub fn probability(&self, level: usize, moment: usize, class: usize) -> f64 {
        sigmoid(self.levels[level].logits.get(moment, class)).to_f64().unwrap()
    }
}

/// Loss gradients with respect to [`HeadOutputs`] (logits and offsets).
#[derive(Debug, Clone)]
pub struct LevelGrads<F> {
    pub logits: Mat<F>,
    pub offsets: Mat<F>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads<F> {
    pub levels: Vec<LevelGrads<F>>,
}

impl<F: Real> HeadGrads<F> {
    pub fn zeros_like(outputs: &HeadOutputs<F>) -> Self {
        HeadGrads {
            levels: outputs
                .levels
                .iter()
                .map(|l| LevelGrads {
                    logits: Mat::zeros(l.logits.rows, l.logits.cols),
                    offsets: Mat::zeros(l.offsets.rows, 2),
                })
                .collect(),
        }
    }
}

struct BlockCache<F> {
    norm: NormCache<F>,
}

/// Activations of a stack of blocks: `acts[0]` is the stack input and
/// `acts[i + 1]` the output of block `i`.
struct StackCache<F> {
    acts: Vec<Mat<F>>,
    blocks: Vec<BlockCache<F>>,
}

struct LevelCache<F> {
    cls: StackCache<F>,
    reg: StackCache<F>,
    reg_raw: Mat<F>,
}

struct ForwardCache<F> {
    max_args: Vec<Vec<u32>>,
    backbone: StackCache<F>,
    levels: Vec<LevelCache<F>>,
}

/// Result of a forward pass, holding what the reverse pass needs.
pub struct ForwardPass<F> {
    pub geometry: PyramidGeometry,
    pub pyramid: PyramidState<F>,
    pub outputs: HeadOutputs<F>,
    cache: ForwardCache<F>,
}

fn run_stack<F: Real>(blocks: &[Block<Tensor<F>>], input: Mat<F>, k: usize, eps: F) -> StackCache<F> {
    let mut acts = vec![input];
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let x = acts.last().unwrap();
        let h = conv_forward(x, &b.conv.weight.value, &b.conv.bias.value, k);
        let (mut y, norm) = layer_norm_forward(&h, &b.norm.gain.value, &b.norm.offset.value, eps);
        relu_inplace(&mut y);
        caches.push(BlockCache { norm });
        acts.push(y);
    }
    StackCache { acts, blocks: caches }
}

fn stack_backward<F: Real>(
    blocks: &[Block<Tensor<F>>],
    grads: &mut [Block<Vec<F>>],
    cache: &StackCache<F>,
    mut dy: Mat<F>,
    k: usize,
    need_input_grad: bool,
) -> Option<Mat<F>> {
    for i in (0..blocks.len()).rev() {
        let (b, g) = (&blocks[i], &mut grads[i]);
        relu_backward_inplace(&cache.acts[i + 1], &mut dy);
        let dh = layer_norm_backward(&cache.blocks[i].norm, &b.norm.gain.value, &dy, &mut g.norm.gain, &mut g.norm.offset);
        let need = i > 0 || need_input_grad;
        {
            let dx = conv_backward(&cache.acts[i], &b.conv.weight.value, k, &dh, &mut g.conv.weight, &mut g.conv.bias, need)?;
            dy = dx
        }
    }
    Some(dy)
}

fn project<F: Real>(conv: &Conv<Tensor<F>>, x: &Mat<F>, k: usize) -> Mat<F> {
    conv_forward(x, &conv.weight.value, &conv.bias.value, k)
}

/// Forward pass with the input padded to the next multiple of `2^(L-1)`.
pub fn forward<F: Real>(params: &ModelParams<F>, seq: &FeatureSequence) -> Result<ForwardPass<F>> {
    let geometry = PyramidGeometry::new(seq.len(), params.config.n_levels);
    run(params, seq, geometry)
}

/// Forward pass with an explicit padded length. Padding never changes any
/// output at a valid moment; it only changes the recorded geometry.
pub fn forward_padded<F: Real>(params: &ModelParams<F>, seq: &FeatureSequence, padded_len: usize) -> Result<ForwardPass<F>> {
    let geometry = PyramidGeometry::with_padding(seq.len(), params.config.n_levels, padded_len)?;
    run(params, seq, geometry)
}

fn run<F: Real>(params: &ModelParams<F>, seq: &FeatureSequence, geometry: PyramidGeometry) -> Result<ForwardPass<F>> {
    let cfg = &params.config;
    let (lo, hi) = cfg.input_columns(seq)?;
    let width = hi - lo;
    let mut input = Mat::zeros(seq.len(), width);
    for t in 0..seq.len() {
        for (dst, &src) in input.row_mut(t).iter_mut().zip(&seq.row(t)[lo..hi]) {
            *dst = F::lit(src as f64);
        }
    }
    let k = cfg.kernel_size;
    let eps = F::lit(cfg.norm_eps);
    let layers = &params.layers;

    let backbone = run_stack(&layers.backbone, input, k, eps);
    let z1 = backbone.acts.last().unwrap().clone();

    let (pyramid, max_args) = pyramid_with_args(z1, &geometry, cfg.pyramid_mode);
    let levels = pyramid.levels;

    let mut level_outputs = Vec::with_capacity(levels.len());
    let mut level_caches = Vec::with_capacity(levels.len());
    for lvl in &levels {
        let cls = run_stack(&layers.cls_tower, lvl.fused.clone(), k, eps);
        let logits = project(&layers.cls_out, cls.acts.last().unwrap(), k);
        let reg = run_stack(&layers.reg_tower, lvl.fused.clone(), k, eps);
        let reg_raw = project(&layers.reg_out, reg.acts.last().unwrap(), k);
        let offsets = Mat::from_vec(reg_raw.rows, 2, reg_raw.data.iter().map(|&v| softplus(v)).collect());
        level_outputs.push(LevelOutputs {
            geometry: lvl.geometry,
            logits,
            offsets,
        });
        level_caches.push(LevelCache { cls, reg, reg_raw });
    }

    Ok(ForwardPass {
        geometry,
        pyramid: PyramidState { levels },
        outputs: HeadOutputs {
            video_id: seq.video_id.clone(),
            feature_fps: seq.feature_fps(),
            duration_s: seq.duration_s(),
            levels: level_outputs,
        },
        cache: ForwardCache {
            max_args,
            backbone,
            levels: level_caches,
        },
    })
}

/// Builds the max and average pooling pyramids from the backbone output
/// `z1` and fuses them per level by addition.
pub fn build_pyramid<F: Real>(z1: Mat<F>, geometry: &PyramidGeometry, mode: PyramidMode) -> PyramidState<F> {
    pyramid_with_args(z1, geometry, mode).0
}

fn pyramid_with_args<F: Real>(
    z1: Mat<F>,
    geometry: &PyramidGeometry,
    mode: PyramidMode,
) -> (PyramidState<F>, Vec<Vec<u32>>) {
    let (use_max, use_avg) = (mode.uses_max(), mode.uses_avg());
    let mut levels: Vec<PyramidLevel<F>> = Vec::with_capacity(geometry.levels.len());
    let mut max_args = Vec::with_capacity(geometry.levels.len());
    for (l, g) in geometry.levels.iter().enumerate() {
        let (max_branch, avg_branch) = if l == 0 {
            (use_max.then(|| z1.clone()), use_avg.then(|| z1.clone()))
        } else {
            let prev = &levels[l - 1];
            let max_branch = prev.max_branch.as_ref().map(|m| {
                let (pooled, arg) = max_pool_forward(m);
                max_args.push(arg);
                pooled
            });
            (max_branch, prev.avg_branch.as_ref().map(avg_pool_forward))
        };
        let fused = match (&max_branch, &avg_branch) {
            (Some(m), Some(a)) => {
                let mut f = m.clone();
                f.add_assign(a);
                f
            }
            (Some(m), None) => m.clone(),
            (None, Some(a)) => a.clone(),
            (None, None) => unreachable!("pyramid mode selects at least one branch"),
        };
        debug_assert_eq!(fused.rows, g.valid_len);
        levels.push(PyramidLevel {
            geometry: *g,
            fused,
            max_branch,
            avg_branch,
        });
    }
    (PyramidState { levels }, max_args)
}

/// Reverse pass: gradients of every parameter tensor given the loss
/// gradient with respect to the head outputs of `pass`.
pub fn backward<F: Real>(params: &ModelParams<F>, pass: &ForwardPass<F>, upstream: &HeadGrads<F>) -> Gradients<F> {
    let cfg = &params.config;
    let k = cfg.kernel_size;
    let layers = &params.layers;
    let mut grads = params.zero_grads();
    let cache = &pass.cache;
    let n_levels = pass.pyramid.levels.len();

    let mut dfused = Vec::with_capacity(n_levels);
    for (l, lc) in cache.levels.iter().enumerate() {
        let up = &upstream.levels[l];
        let dlogits = up.logits.clone();
        let dcls_top = conv_backward(
            lc.cls.acts.last().unwrap(),
            &layers.cls_out.weight.value,
            k,
            &dlogits,
            &mut grads.cls_out.weight,
            &mut grads.cls_out.bias,
            true,
        )
        .unwrap();
        let mut dz = stack_backward(&layers.cls_tower, &mut grads.cls_tower, &lc.cls, dcls_top, k, true).unwrap();

        // softplus'(x) = sigmoid(x)
        let draw = Mat::from_vec(
            lc.reg_raw.rows,
            2,
            up.offsets.data.iter().zip(&lc.reg_raw.data).map(|(&g, &x)| g * sigmoid(x)).collect(),
        );
        let dreg_top = conv_backward(
            lc.reg.acts.last().unwrap(),
            &layers.reg_out.weight.value,
            k,
            &draw,
            &mut grads.reg_out.weight,
            &mut grads.reg_out.bias,
            true,
        )
        .unwrap();
        let dz_reg = stack_backward(&layers.reg_tower, &mut grads.reg_tower, &lc.reg, dreg_top, k, true).unwrap();
        dz.add_assign(&dz_reg);
        dfused.push(dz);
    }

    let (use_max, use_avg) = (cfg.pyramid_mode.uses_max(), cfg.pyramid_mode.uses_avg());
    let mut dmax: Option<Mat<F>> = None;
    let mut davg: Option<Mat<F>> = None;
    for l in (0..n_levels).rev() {
        let rows = pass.pyramid.levels[l].fused.rows;
        let cols = pass.pyramid.levels[l].fused.cols;
        if use_max {
            let mut d = Mat::zeros(rows, cols);
            if let Some(upper) = dmax.take() {
                max_pool_backward(rows, &cache.max_args[l], &upper, &mut d);
            }
            d.add_assign(&dfused[l]);
            dmax = Some(d);
        }
        if use_avg {
            let mut d = Mat::zeros(rows, cols);
            if let Some(upper) = davg.take() {
                avg_pool_backward(&upper, &mut d);
            }
            d.add_assign(&dfused[l]);
            davg = Some(d);
        }
    }
    let dz1 = match (dmax, davg) {
        (Some(mut m), Some(a)) => {
            m.add_assign(&a);
            m
        }
        (Some(m), None) => m,
        (None, Some(a)) => a,
        (None, None) => unreachable!(),
    };
    stack_backward(&layers.backbone, &mut grads.backbone, &cache.backbone, dz1, k, false);
    grads
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::network::ModelConfig;

    fn tiny(mode: PyramidMode) -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            backbone_width: 8,
            head_width: 8,
            n_levels: 3,
            pyramid_mode: mode,
            ..ModelConfig::default()
        }
    }

    fn random_seq(t: usize, d: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        FeatureSequence::new("r", t, d, d / 2, v, 1.0, t as f64).unwrap()
    }

    #[test]
    fn shapes_follow_geometry() {
        let p = ModelParams::<f64>::init(&tiny(PyramidMode::MaxPlusAvg), 0).unwrap();
        let pass = forward(&p, &random_seq(13, 4, 1)).unwrap();
        let valid: Vec<_> = pass.outputs.levels.iter().map(|l| l.logits.rows).collect();
        assert_eq!(valid, vec![13, 7, 4]);
        assert!(pass.outputs.levels.iter().all(|l| l.offsets.data.iter().all(|&v| v >= 0.0)));
        assert_eq!(pass.geometry.levels[0].padded_len, 16);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let p = ModelParams::<f32>::init(&tiny(PyramidMode::MaxOnly), 0).unwrap();
        assert!(matches!(forward(&p, &random_seq(8, 5, 0)), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn fused_is_twice_branch_on_constant_input() {
        let geometry = PyramidGeometry::new(13, 4);
        let z1 = Mat::from_vec(13, 3, vec![0.7f64; 39]);
        let pyramid = build_pyramid(z1, &geometry, PyramidMode::MaxPlusAvg);
        for lvl in &pyramid.levels {
            let m = lvl.max_branch.as_ref().unwrap();
            let a = lvl.avg_branch.as_ref().unwrap();
            assert_eq!(m, a);
            assert!(lvl.fused.data.iter().zip(&m.data).all(|(f, m)| *f == 2.0 * m));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        for mode in [PyramidMode::MaxOnly, PyramidMode::AvgOnly, PyramidMode::MaxPlusAvg] {
            let p = ModelParams::<f64>::init(&tiny(mode), 0).unwrap();
            let pass = forward(&p, &random_seq(16, 4, 3)).unwrap();
            let g = backward(&p, &pass, &HeadGrads::zeros_like(&pass.outputs));
            assert!(g.all_zero());
        }
    }

    #[test]
    fn padding_leaves_valid_outputs_unchanged() {
        let p = ModelParams::<f32>::init(&tiny(PyramidMode::MaxPlusAvg), 5).unwrap();
        let seq = random_seq(13, 4, 9);
        let a = forward(&p, &seq).unwrap();
        let b = forward_padded(&p, &seq, 64).unwrap();
        assert_eq!(a.outputs.levels, {
            let mut l = b.outputs.levels.clone();
            for (x, y) in l.iter_mut().zip(&a.outputs.levels) {
                x.geometry = y.geometry;
            }
            l
        });
    }
}
