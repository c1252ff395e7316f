use crate::numkit::params::ParamStore;
use crate::numkit::tensor::Tensor;

/// Adam with decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[k];
            let param = store.get_mut(id);
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((p, &gv), mv), vv) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
    }
}

/// Linear warm-up followed by cosine decay to zero.
#[derive(Clone, Copy, Debug)]
pub struct CosineWarmup {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineWarmup {
    pub fn new(base_lr: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_fraction * total_steps as f64).round() as usize;
        CosineWarmup {
            base_lr,
            warmup_steps,
            total_steps: total_steps.max(1),
        }
    }

    /// Learning rate for the 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps.min(self.total_steps)).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -1.0]));
        let mut opt = AdamW::new(&store, 0.9, 0.999, 0.0);
        opt.step(&mut store, &[Tensor::vector(vec![2.0, -3.0])], 0.1);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = CosineWarmup::new(1.0, 0.15, 100);
        assert_eq!(s.warmup_steps, 15);
        assert!(s.lr(0) < s.lr(10));
        assert!((s.lr(14) - 1.0).abs() < 1e-12);
        assert!((s.lr(15) - 1.0).abs() < 1e-12);
        assert!(s.lr(60) < 1.0 && s.lr(99) < s.lr(60));
    }
}
