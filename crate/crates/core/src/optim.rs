//! AdamW with per-group learning rates and a warm-up/linear-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learning rate at `step`: linear ramp to `peak` over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = (total - warmup) as f64;
    peak * (total - step) as f64 / span
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplier on the learning rate of backbone parameters.
    pub backbone_lr_factor: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            backbone_lr_factor: 0.1,
            grad_clip: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub steps: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, e)| Tensor::zeros(e.value.rows(), e.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            steps: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update with head learning rate `lr`; returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, &Tensor<T>)], lr: f64) -> Result<f64> {
        if self.first.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        let norm = grads
            .iter()
            .map(|(_, g)| g.sq_norm().to_f64_lossy())
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let eps = T::lit(c.eps);
        let clip = T::lit(clip);
        for &(id, grad) in grads {
            let entry = store.entry(id);
            let rate = match entry.group {
                ParamGroup::Frozen => continue,
                ParamGroup::Backbone => lr * c.backbone_lr_factor,
                ParamGroup::Head => lr,
            };
            let decay = if entry.decay { T::lit(1.0 - rate * c.weight_decay) } else { T::one() };
            let step_size = T::lit(rate / bias1);
            let inv_bias2 = T::lit(1.0 / bias2);
            let i = id.index();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = store.get_mut(id).data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.data()) {
                let g = g * clip;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w = *w * decay - step_size * *m / ((*v * inv_bias2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_piecewise_linear_and_peaks_at_warmup() {
        assert_eq!(lr_at(0, 1.0, 10, 110), 0.0);
        assert_eq!(lr_at(5, 1.0, 10, 110), 0.5);
        assert_eq!(lr_at(10, 1.0, 10, 110), 1.0);
        assert_eq!(lr_at(60, 1.0, 10, 110), 0.5);
        assert_eq!(lr_at(110, 1.0, 10, 110), 0.0);
        let peak = (0..110).map(|s| lr_at(s, 1.0, 10, 110)).fold(0.0, f64::max);
        assert_eq!(peak, 1.0);
        for s in 1..110 {
            let d = (lr_at(s, 1.0, 10, 110) - lr_at(s - 1, 1.0, 10, 110)).abs();
            assert!(d <= 0.1 + 1e-12);
        }
        assert_eq!(lr_at(3, 2.0, 0, 10), 2.0 * 7.0 / 10.0);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::from_f64(1, 2, &[1.0, -1.0]).unwrap(), ParamGroup::Head, false);
        let b = store.insert("b", Tensor::from_f64(1, 1, &[0.0]).unwrap(), ParamGroup::Backbone, false);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let gw = Tensor::from_f64(1, 2, &[0.3, -2.0]).unwrap();
        let gb = Tensor::from_f64(1, 1, &[5.0]).unwrap();
        opt.step(&mut store, &[(w, &gw), (b, &gb)], 0.01).unwrap();
        let got = store.get(w).data().to_vec();
        assert!((got[0] - 0.99).abs() < 1e-6 && (got[1] + 0.99).abs() < 1e-6);
        assert!((store.get(b).item() + 0.001).abs() < 1e-6);
    }

    #[test]
    fn decay_only_on_flagged_params_and_clip_rescales() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::from_f64(1, 1, &[2.0]).unwrap(), ParamGroup::Head, true);
        let n = store.insert("n", Tensor::from_f64(1, 1, &[2.0]).unwrap(), ParamGroup::Head, false);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..AdamWConfig::default()
            },
            &store,
        );
        let zero = Tensor::zeros(1, 1);
        opt.step(&mut store, &[(w, &zero), (n, &zero)], 0.1).unwrap();
        assert!((store.get(w).item() - 2.0 * 0.95).abs() < 1e-12);
        assert_eq!(store.get(n).item(), 2.0);

        let mut a = store.clone();
        let mut opt_a = AdamW::new(
            AdamWConfig {
                grad_clip: 1.0,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &a,
        );
        let g = Tensor::from_f64(1, 1, &[30.0]).unwrap();
        let norm = opt_a.step(&mut a, &[(n, &g)], 0.1).unwrap();
        assert_eq!(norm, 30.0);
        // first moment sees the clipped gradient
        assert!((opt_a.first[n.index()].item() - 0.1).abs() < 1e-12);
    }
}
