//! Adaptive-moment optimizer with decoupled weight decay, plus the
//! warmup-then-cosine learning-rate schedule.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::params::ParamVisit;

/// Decoupled weight decay applies only to matrices and higher-rank weights,
/// and never to positional embeddings or codebook tokens (embedding-like
/// tables), matching common transformer practice.
pub fn decay_eligible(name: &str, ndim: usize) -> bool {
    ndim >= 2 && !name.contains("pos_embed") && !name.starts_with("codebook")
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter that has a gradient this step.
    /// Parameters absent from `grads` (frozen components) are untouched.
    pub fn step(
        &mut self,
        params: &mut dyn ParamVisit,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr: f64,
    ) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        params.visit_mut(&mut |name, mut p| {
            let Some(g) = grads.get(name) else {
                return;
            };
            assert_eq!(g.shape(), p.shape(), "gradient shape for {name}");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            if self.weight_decay != 0.0 && decay_eligible(name, p.ndim()) {
                let factor = lr * self.weight_decay;
                p.mapv_inplace(|x| x - factor * x);
            }
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        });
    }
}

/// Per-step learning rate: linear warmup over the first `warmup_steps`
/// optimizer steps, then cosine decay from `base_lr` to `min_lr` across the
/// remaining steps.
pub fn lr_at(base_lr: f64, min_lr: f64, step: u64, warmup_steps: u64, total_steps: u64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let progress = progress.min(1.0);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};

    struct Toy {
        w: Array2<f64>,        // decayed
        b: Array1<f64>,        // rank 1, no decay
        pos_embed: Array2<f64>, // excluded by name
    }

    impl ParamVisit for Toy {
        fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
            f("w", self.w.view().into_dyn());
            f("b", self.b.view().into_dyn());
            f("enc.pos_embed", self.pos_embed.view().into_dyn());
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
            f("w", self.w.view_mut().into_dyn());
            f("b", self.b.view_mut().into_dyn());
            f("enc.pos_embed", self.pos_embed.view_mut().into_dyn());
        }
    }

    fn toy() -> Toy {
        Toy {
            w: Array2::ones((2, 2)),
            b: Array1::ones(2),
            pos_embed: Array2::ones((2, 2)),
        }
    }

    fn zero_grads(t: &Toy) -> BTreeMap<String, ArrayD<f64>> {
        let mut g = BTreeMap::new();
        t.visit(&mut |name, v| {
            g.insert(name.to_string(), ArrayD::zeros(v.raw_dim()));
        });
        g
    }

    #[test]
    fn zero_lr_is_a_bitwise_noop() {
        let mut t = toy();
        let mut g = zero_grads(&t);
        for v in g.values_mut() {
            v.fill(0.37);
        }
        let before = crate::params::params_checksum(&t);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.05);
        opt.step(&mut t, &g, 0.0);
        assert_eq!(crate::params::params_checksum(&t), before);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        let mut t = toy();
        let mut g = zero_grads(&t);
        g.get_mut("w").unwrap().fill(0.5);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut t, &g, 0.1);
        // Independent single-step evaluation of the update rule.
        let m = 0.1 * 0.5_f64;
        let v = 0.001 * 0.25_f64;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let want = 1.0 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        for x in t.w.iter() {
            assert!((x - want).abs() < 1e-15, "{x} vs {want}");
        }
        // b and pos_embed had zero grads: no adaptive movement, no decay.
        assert!(t.b.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn decay_applies_only_to_eligible_weights() {
        let mut t = toy();
        let g = zero_grads(&t);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.05);
        opt.step(&mut t, &g, 0.1);
        let shrink = 1.0 - 0.1 * 0.05;
        assert!(t.w.iter().all(|&x| (x - shrink).abs() < 1e-15));
        assert!(t.b.iter().all(|&x| x == 1.0));
        assert!(t.pos_embed.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn frozen_components_are_untouched() {
        let mut t = toy();
        let mut g = zero_grads(&t);
        g.remove("b");
        g.get_mut("w").unwrap().fill(1.0);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.05);
        opt.step(&mut t, &g, 0.1);
        assert!(t.b.iter().all(|&x| x == 1.0));
        assert!(t.w.iter().all(|&x| x != 1.0));
    }

    #[test]
    fn schedule_warms_up_then_decays_to_min() {
        let base = 1.5e-4;
        let min = 1e-6;
        let warmup = 10;
        let total = 50;
        assert!((lr_at(base, min, 0, warmup, total) - base / 10.0).abs() < 1e-18);
        assert!((lr_at(base, min, 9, warmup, total) - base).abs() < 1e-18);
        // Monotone non-increasing after warmup.
        let mut prev = base;
        for s in warmup..total {
            let lr = lr_at(base, min, s, warmup, total);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
        assert!((lr_at(base, min, total, warmup, total) - min).abs() < 1e-12);
    }

    #[test]
    fn decay_eligibility_policy() {
        assert!(decay_eligible("encoder.blocks.0.wq", 2));
        assert!(decay_eligible("decoder.out_w", 2));
        assert!(!decay_eligible("encoder.blocks.0.bq", 1));
        assert!(!decay_eligible("encoder.pos_embed", 2));
        assert!(!decay_eligible("predictor.pos_embed", 2));
        assert!(!decay_eligible("codebook.tokens", 3));
    }
}
