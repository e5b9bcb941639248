use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Real;
use super::ModelConfig;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub offset: T,
}

/// conv → layer norm → ReLU
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub conv: Conv<T>,
    pub norm: Norm<T>,
}

/// The model's layer structure, generic over what is stored per tensor so
/// that parameters and their gradients share one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Layers<T> {
    pub backbone: Vec<Block<T>>,
    pub cls_tower: Vec<Block<T>>,
    pub reg_tower: Vec<Block<T>>,
    pub cls_out: Conv<T>,
    pub reg_out: Conv<T>,
}

impl<T> Conv<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Conv<U> {
        Conv {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> Block<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Block<U> {
        Block {
            conv: self.conv.map(f),
            norm: Norm {
                gain: f(&self.norm.gain),
                offset: f(&self.norm.offset),
            },
        }
    }
}

impl<T> Layers<T> {
    /// Visits every tensor in a fixed order with its dotted name.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        for (prefix, tower) in [
            ("backbone", &self.backbone),
            ("cls_head", &self.cls_tower),
            ("reg_head", &self.reg_tower),
        ] {
            for (i, b) in tower.iter().enumerate() {
                f(format!("{prefix}.{i}.conv.weight"), &b.conv.weight);
                f(format!("{prefix}.{i}.conv.bias"), &b.conv.bias);
                f(format!("{prefix}.{i}.norm.gain"), &b.norm.gain);
                f(format!("{prefix}.{i}.norm.offset"), &b.norm.offset);
            }
        }
        f("cls_out.weight".into(), &self.cls_out.weight);
        f("cls_out.bias".into(), &self.cls_out.bias);
        f("reg_out.weight".into(), &self.reg_out.weight);
        f("reg_out.bias".into(), &self.reg_out.bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        for (prefix, tower) in [
            ("backbone", &mut self.backbone),
            ("cls_head", &mut self.cls_tower),
            ("reg_head", &mut self.reg_tower),
        ] {
            for (i, b) in tower.iter_mut().enumerate() {
                f(format!("{prefix}.{i}.conv.weight"), &mut b.conv.weight);
                f(format!("{prefix}.{i}.conv.bias"), &mut b.conv.bias);
                f(format!("{prefix}.{i}.norm.gain"), &mut b.norm.gain);
                f(format!("{prefix}.{i}.norm.offset"), &mut b.norm.offset);
            }
        }
        f("cls_out.weight".into(), &mut self.cls_out.weight);
        f("cls_out.bias".into(), &mut self.cls_out.bias);
        f("reg_out.weight".into(), &mut self.reg_out.weight);
        f("reg_out.bias".into(), &mut self.reg_out.bias);
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Layers<U> {
        Layers {
            backbone: self.backbone.iter().map(|b| b.map(&mut f)).collect(),
            cls_tower: self.cls_tower.iter().map(|b| b.map(&mut f)).collect(),
            reg_tower: self.reg_tower.iter().map(|b| b.map(&mut f)).collect(),
            cls_out: self.cls_out.map(&mut f),
            reg_out: self.reg_out.map(&mut f),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name));
        out
    }
}

/// A trainable tensor with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, value: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![F::zero(); value.len()];
        Tensor { shape, value, grad }
    }

    fn filled(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![v; n])
    }

    fn uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect();
        Tensor::new(shape, value)
    }
}

/// Per-tensor gradient buffers in the parameter layout.
pub type Gradients<F> = Layers<Vec<F>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub layers: Layers<Tensor<F>>,
}

fn conv_tensors<F: Real>(k: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Conv<Tensor<F>> {
    let bound = 1.0 / ((c_in * k) as f64).sqrt();
    Conv {
        weight: Tensor::uniform(vec![k, c_in, c_out], bound, rng),
        bias: Tensor::filled(vec![c_out], F::zero()),
    }
}

fn block<F: Real>(k: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Block<Tensor<F>> {
    Block {
        conv: conv_tensors(k, c_in, c_out, rng),
        norm: Norm {
            gain: Tensor::filled(vec![c_out], F::one()),
            offset: Tensor::filled(vec![c_out], F::zero()),
        },
    }
}

fn tower<F: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Block<Tensor<F>>> {
    (0..cfg.n_head_convs)
        .map(|i| {
            let c_in = if i == 0 { cfg.backbone_width } else { cfg.head_width };
            block(cfg.kernel_size, c_in, cfg.head_width, rng)
        })
        .collect()
}

impl<F: Real> ModelParams<F> {
    /// Fan-in scaled uniform conv weights, zero biases, identity layer norms,
    /// and a classification bias of `-ln((1-π)/π)` so every initial class
    /// probability equals the prior π.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;
        let backbone = (0..config.n_backbone_convs)
            .map(|i| {
                let c_in = if i == 0 { config.input_dim } else { config.backbone_width };
                block(k, c_in, config.backbone_width, &mut rng)
            })
            .collect();
        let cls_tower = tower(config, &mut rng);
        let reg_tower = tower(config, &mut rng);
        let head_in = if config.n_head_convs == 0 {
            config.backbone_width
        } else {
            config.head_width
        };
        let mut cls_out = conv_tensors(k, head_in, config.n_classes, &mut rng);
        let prior = config.prior_prob;
        cls_out.bias.value.fill(F::lit(-((1.0 - prior) / prior).ln()));
        let reg_out = conv_tensors(k, head_in, 2, &mut rng);
        Ok(ModelParams {
            config: config.clone(),
            layers: Layers {
                backbone,
                cls_tower,
                reg_tower,
                cls_out,
                reg_out,
            },
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.layers.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.layers.visit(&mut |_, t| n += t.value.len());
        n
    }

    pub fn zero_grads(&self) -> Gradients<F> {
        self.layers.map(|t| vec![F::zero(); t.value.len()])
    }

    /// Copies `grads` into the tensors' gradient slots.
    pub fn set_grads(&mut self, grads: &Gradients<F>) {
        let mut flat = Vec::new();
        grads.visit(&mut |_, g| flat.push(g));
        let mut i = 0;
        self.layers.visit_mut(&mut |_, t| {
            t.grad.copy_from_slice(flat[i]);
            i += 1;
        });
    }

    pub fn clear_grads(&mut self) {
        self.layers.visit_mut(&mut |_, t| t.grad.fill(F::zero()));
    }

    /// Converts element type (e.g. f32 training weights to f64 for checks).
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            layers: self.layers.map(|t| Tensor {
                shape: t.shape.clone(),
                value: t.value.iter().map(|v| G::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
                grad: t.grad.iter().map(|v| G::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
            }),
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.layers.visit(&mut |_, t| ok &= t.value.iter().all(|v| v.is_finite()));
        ok
    }
}

impl<F: Real> Gradients<F> {
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        let mut flat = Vec::new();
        other.visit(&mut |_, g| flat.push(g));
        let mut i = 0;
        self.visit_mut(&mut |_, g| {
            for (a, b) in g.iter_mut().zip(flat[i]) {
                *a += *b;
            }
            i += 1;
        });
    }

    pub fn scale(&mut self, s: F) {
        self.visit_mut(&mut |_, g| g.iter_mut().for_each(|v| *v *= s));
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.visit(&mut |_, g| sq += g.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>());
        sq.sqrt()
    }

    pub fn all_zero(&self) -> bool {
        let mut z = true;
        self.visit(&mut |_, g| z &= g.iter().all(|v| *v == F::zero()));
        z
    }
}
