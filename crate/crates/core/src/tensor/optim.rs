use super::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn adam() -> Self {
        Self {
            weight_decay: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was NaN or infinite; parameters and moments were left untouched.
    SkippedNonFinite,
}

/// AdamW optimizer state: per-parameter first/second moments and a step counter.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
    faults: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![T::ZERO; p.value.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
            faults: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of skipped non-finite steps.
    pub fn faults(&self) -> u64 {
        self.faults
    }

    /// Applies one update using the gradients stored in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> StepOutcome {
        if !store.grads_finite() {
            self.faults += 1;
            return StepOutcome::SkippedNonFinite;
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        for ((p, m), v) in store
            .iter_mut()
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let Some(g) = p.grad.as_ref() else { continue };
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                data[i] = data[i] * decay - step_size * m[i] / denom;
            }
        }
        StepOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(p: f32, g: f32) -> (ParamStore<f32>, crate::tensor::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new(vec![1], vec![p]).unwrap());
        s.get_mut(id).grad = Some(vec![g]);
        (s, id)
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let (mut s, id) = scalar_store(0.75, 0.0);
        let mut opt = AdamW::new(&s, AdamWConfig::adam());
        opt.step(&mut s, 1e-3);
        assert_eq!(s.get(id).value.data(), &[0.75]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // hand-stepped: m = 0.1, v = 0.001, m̂ = v̂ = 1, update = lr / (1 + eps)
        let (mut s, id) = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(&s, AdamWConfig::adam());
        opt.step(&mut s, 1e-3);
        let m = 0.1f64;
        let v = 0.001f64;
        let expect = 1.0 - 1e-3 * (m / 0.1) / ((v / 0.001).sqrt() + 1e-8);
        assert!((s.get(id).value.data()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let (mut s, id) = scalar_store(2.0, 0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s, 0.1);
        assert!((s.get(id).value.data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let (mut s, id) = scalar_store(1.0, f32::NAN);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        assert_eq!(opt.step(&mut s, 1e-3), StepOutcome::SkippedNonFinite);
        assert_eq!(opt.faults(), 1);
        assert_eq!(opt.steps(), 0);
        assert_eq!(s.get(id).value.data(), &[1.0]);
    }
}
