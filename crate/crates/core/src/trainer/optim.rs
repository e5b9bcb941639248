use crate::network::{Gradients, ModelParams, Real};

/// Adam with decoupled weight decay applied to convolution weights only.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    /// First and second moments per tensor, in visit order.
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &ModelParams<F>, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.named_tensors().iter().map(|(_, t)| vec![F::zero(); t.value.len()]).collect(),
            v: params.named_tensors().iter().map(|(_, t)| vec![F::zero(); t.value.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &Gradients<F>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mut gs = Vec::new();
        grads.visit(&mut |_, g| gs.push(g));
        let mut i = 0;
        let wd = self.weight_decay;
        let eps = self.eps;
        params.layers.visit_mut(&mut |name, t| {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = gs[i];
            let shrink = if decays(&name) { 1.0 - lr * wd } else { 1.0 };
            for k in 0..t.value.len() {
                let gk = g[k].to_f64().unwrap();
                let mk = b1 * m[k].to_f64().unwrap() + (1.0 - b1) * gk;
                let vk = b2 * v[k].to_f64().unwrap() + (1.0 - b2) * gk * gk;
                m[k] = F::lit(mk);
                v[k] = F::lit(vk);
                let p = t.value[k].to_f64().unwrap() * shrink;
                t.value[k] = F::lit(p - lr * (mk / c1) / ((vk / c2).sqrt() + eps));
            }
            i += 1;
        });
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(F::lit(max_norm / norm));
    }
    norm
}

/// Linear warmup to the base rate, then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Rate for the zero-based optimizer step `step`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::network::ModelConfig;

    fn tiny() -> ModelParams<f64> {
        let cfg = ModelConfig {
            input_dim: 3,
            backbone_width: 4,
            head_width: 4,
            n_levels: 2,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 1).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            base: 1.0,
            warmup_steps: 4,
            total_steps: 14,
        };
        assert_eq!(s.at(0), 0.25);
        assert_eq!(s.at(3), 1.0);
        assert_eq!(s.at(4), 1.0);
        assert!((s.at(9) - 0.5).abs() < 1e-12);
        assert!(s.at(13) > 0.0 && s.at(13) < 0.05);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zero_grads();
        g.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x = 0.3));
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &g, 1e-3);
        let mut deltas = Vec::new();
        p.layers.visit(&mut |_, t| deltas.extend(t.value.iter().copied()));
        let mut orig = Vec::new();
        before.layers.visit(&mut |_, t| orig.extend(t.value.iter().copied()));
        for (a, b) in deltas.iter().zip(&orig) {
            assert!(((b - a) - 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn decay_touches_weights_only() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zero_grads();
        AdamW::new(&p, 0.5).step(&mut p, &g, 0.1);
        let now = p.named_tensors();
        for ((name, a), (_, b)) in now.iter().zip(before.named_tensors()) {
            if name.ends_with(".weight") {
                assert!(a.value.iter().zip(&b.value).all(|(x, y)| (x - 0.95 * y).abs() < 1e-12));
            } else {
                assert_eq!(a.value, b.value, "{name}");
            }
        }
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(scale in 1e-3f64..1e3, max in 0.1f64..5.0) {
            let p = tiny();
            let mut g = p.zero_grads();
            let mut k = 0.0;
            g.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| { k += 1.0; *x = scale * (k * 0.37f64).sin(); }));
            let before = g.global_norm();
            let reported = clip_grad_norm(&mut g, max);
            prop_assert_eq!(reported, before);
            prop_assert!(g.global_norm() <= max + 1e-6);
        }
    }
}
