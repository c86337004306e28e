//! Adam with decoupled weight decay, the one-cycle schedule, and the two
//! patience-driven hooks (early stopping, plateau decay).

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || -> Vec<Vec<T>> { store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect() };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`, using the
    /// gradients currently accumulated in `store`. Weight decay is applied
    /// directly to the weights, scaled by `lr`.
    pub fn adam_step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(TensorError::Usage(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps));
        let (lr_t, decay) = (T::of(lr), T::of(lr * c.weight_decay));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        for ((param, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if m.len() != param.value.numel() {
                return Err(TensorError::Usage(format!("moment shape mismatch for {}", param.name)));
            }
            let grads = param.grad.data().to_vec();
            for (((w, g), mi), vi) in param.value.data_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *w;
            }
        }
        Ok(())
    }
}

/// One-cycle schedule: cosine warm-up from `max_lr / 25` to `max_lr` over the
/// first 30% of steps, then cosine annealing to `max_lr / 1e4` at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn peak_step(&self) -> usize {
        (self.pct_start * self.total_steps as f64).floor() as usize
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(TensorError::Usage(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let start = self.max_lr / self.div_factor;
        let end = self.max_lr / self.final_div_factor;
        let peak = self.peak_step();
        let cos_interp = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        Ok(if step < peak {
            cos_interp(start, self.max_lr, step as f64 / peak as f64)
        } else if step == peak {
            self.max_lr
        } else {
            let span = (self.total_steps - 1 - peak) as f64;
            cos_interp(self.max_lr, end, (step - peak) as f64 / span)
        })
    }
}

pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    OneCycle::new(max_lr, total_steps).lr(step)
}

/// Tracks the best validation loss and signals when `patience` consecutive
/// epochs have passed without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Record an epoch; returns true when this epoch is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

/// Multiplies a learning-rate scale by `factor` after `patience` stale epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauDecay {
    pub patience: usize,
    pub factor: f64,
    pub scale: f64,
    best: f64,
    stale: usize,
}

impl PlateauDecay {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            scale: 1.0,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                self.scale *= self.factor;
                self.stale = 0;
            }
        }
        self.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn store_with(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[values.len()], values).unwrap());
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = store_with(&[0.3, -2.0]);
        let before = store.clone();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&store, cfg);
        opt.adam_step(&mut store, 1e-3).unwrap();
        assert_eq!(store.value(crate::ParamId(0)), before.value(crate::ParamId(0)));
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = store_with(&[1.0, 1.0, 1.0]);
        store.get_mut(crate::ParamId(0)).grad = Tensor::from_f64(&[3], &[0.5, -3.0, 0.01]).unwrap();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&store, cfg);
        let lr = 1e-3;
        opt.adam_step(&mut store, lr).unwrap();
        let expected_sign = [-1.0, 1.0, -1.0];
        for (w, s) in store.value(crate::ParamId(0)).data().iter().zip(expected_sign) {
            let update = w - 1.0;
            assert!(update.signum() == s);
            assert!((update.abs() - lr).abs() <= lr * 1e-6);
        }
    }

    #[test]
    fn constant_gradient_second_update_not_larger() {
        let mut store = store_with(&[0.0]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&store, cfg);
        let mut prev = 0.0;
        let mut updates = Vec::new();
        for _ in 0..2 {
            store.get_mut(crate::ParamId(0)).grad = Tensor::from_f64(&[1], &[0.7]).unwrap();
            opt.adam_step(&mut store, 1e-2).unwrap();
            let w = store.value(crate::ParamId(0)).item();
            updates.push((w - prev).abs());
            prev = w;
        }
        assert!(updates[1] <= updates[0] + 1e-15);
    }

    #[test]
    fn one_cycle_landmarks() {
        let total = 100;
        let max = 1e-3;
        assert!((one_cycle_lr(0, total, max).unwrap() - 4e-5).abs() < 1e-18);
        assert_eq!(one_cycle_lr(30, total, max).unwrap(), max);
        assert!((one_cycle_lr(99, total, max).unwrap() - 1e-7).abs() < 1e-18);
        assert!(one_cycle_lr(100, total, max).is_err());
        let lrs: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, max).unwrap()).collect();
        assert!(lrs[..=30].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[30..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn early_stopping_patience() {
        let mut es = EarlyStopping::new(2);
        assert!(es.observe(0, 1.0));
        assert!(!es.observe(1, 1.5));
        assert!(!es.should_stop());
        assert!(!es.observe(2, 1.0));
        assert!(es.should_stop());
        assert_eq!(es.best(), Some((0, 1.0)));
    }

    #[test]
    fn plateau_decay_scales() {
        let mut p = PlateauDecay::new(1, 0.5);
        p.observe(1.0);
        p.observe(2.0);
        assert_eq!(p.observe(2.0), 0.5);
    }
}
