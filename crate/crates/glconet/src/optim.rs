//! Adam with bias correction and the stepped learning-rate decay schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamVisitor, TensorArchive};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_factor: 0.1, decay_every: 60 }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// lr after `epoch` completed epochs: lr0 * factor^floor(epoch/every).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.cfg.lr * self.cfg.decay_factor.powi((epoch / self.cfg.decay_every) as i32)
    }

    /// One update over every parameter of the module. Parameters without an
    /// entry in `grads` are treated as zero-gradient.
    pub fn apply<M>(
        &mut self,
        lr: f64,
        module: &mut M,
        visit: impl Fn(&mut M, &mut dyn ParamVisitor),
        grads: &BTreeMap<String, Tensor>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        let mut update = |name: &str, p: &mut Tensor| {
            let zero = Tensor::zeros(p.shape());
            let g = grads.get(name).unwrap_or(&zero);
            debug_assert_eq!(g.shape(), p.shape(), "gradient shape for {name}");
            let m = m_map.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = v_map.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        };
        visit(module, &mut update);
    }

    /// Serializes moments and the step counter under the `optim.` prefix.
    pub fn save_state(&self, archive: &mut TensorArchive) {
        archive.insert("optim.step", Tensor::scalar(self.step as f64));
        for (name, t) in &self.m {
            archive.insert(format!("optim.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            archive.insert(format!("optim.v.{name}"), t.clone());
        }
    }

    pub fn load_state(&mut self, archive: &TensorArchive) -> Result<()> {
        let step = archive
            .get("optim.step")
            .ok_or_else(|| Error::Data("checkpoint has no optimizer state (optim.step)".into()))?;
        self.step = step.item() as u64;
        self.m.clear();
        self.v.clear();
        for name in archive.names() {
            if let Some(rest) = name.strip_prefix("optim.m.") {
                self.m.insert(rest.to_string(), archive.get(name).unwrap().clone());
            } else if let Some(rest) = name.strip_prefix("optim.v.") {
                self.v.insert(rest.to_string(), archive.get(name).unwrap().clone());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One {
        p: Tensor,
    }

    fn visit(m: &mut One, v: &mut dyn ParamVisitor) {
        v.visit("p", &mut m.p);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut m = One { p: Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap() };
        let mut adam = Adam::new(AdamConfig::default());
        let grads = BTreeMap::new();
        adam.apply(1e-4, &mut m, visit, &grads);
        assert_eq!(m.p.data(), &[1.0, -2.0, 3.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn constant_gradient_update_magnitude_approaches_lr() {
        let mut m = One { p: Tensor::scalar(0.0) };
        let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() });
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(0.37));
        let mut prev = 0.0;
        let mut delta = 0.0;
        for _ in 0..2000 {
            adam.apply(1e-3, &mut m, visit, &grads);
            delta = (m.p.item() - prev).abs();
            prev = m.p.item();
        }
        assert!((delta - 1e-3).abs() < 1e-5, "unit-step delta {delta}");
    }

    #[test]
    fn schedule_decays_by_factor_every_period() {
        let adam = Adam::new(AdamConfig::default());
        assert!((adam.lr_at(0) - 1e-4).abs() < 1e-18);
        assert!((adam.lr_at(59) - 1e-4).abs() < 1e-18);
        assert!((adam.lr_at(60) - 1e-5).abs() < 1e-19);
        assert!((adam.lr_at(120) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn state_round_trip_preserves_trajectory() {
        let grads = {
            let mut g = BTreeMap::new();
            g.insert("p".to_string(), Tensor::new(vec![2], vec![0.5, -0.25]).unwrap());
            g
        };
        let run = |resume_at: Option<usize>| {
            let mut m = One { p: Tensor::new(vec![2], vec![1.0, 1.0]).unwrap() };
            let mut adam = Adam::new(AdamConfig::default());
            let mut archive = TensorArchive::new();
            for i in 0..10 {
                if Some(i) == resume_at {
                    // Serialize and reload mid-run.
                    adam.save_state(&mut archive);
                    let mut fresh = Adam::new(AdamConfig::default());
                    fresh.load_state(&archive).unwrap();
                    adam = fresh;
                }
                adam.apply(1e-4, &mut m, visit, &grads);
            }
            m.p.data().to_vec()
        };
        assert_eq!(run(None), run(Some(5)));
    }
}
