use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// First/second moments for every parameter in a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros = || -> Vec<Tensor<T>> {
            params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
        };
        Ok(Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            config,
        })
    }

    /// One bias-corrected Adam update using the gradients held in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let cfg = self.config;
        let (b1, b2) = (c::<T>(cfg.beta1), c::<T>(cfg.beta2));
        let bc1 = c::<T>(1.0 - cfg.beta1.powi(self.step as i32));
        let bc2 = c::<T>(1.0 - cfg.beta2.powi(self.step as i32));
        let (lr, eps) = (c::<T>(cfg.lr), c::<T>(cfg.eps));
        let one = T::one();
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            for (((w, mi), vi), &gi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g)
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(value)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(1.0);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(1.0);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut st = AdamState::new(&s, cfg).unwrap();
        st.step(&mut s).unwrap();
        let w = s.iter().next().unwrap().value.item().unwrap();
        assert!((w - 0.9).abs() < 1e-6, "{w}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = single(2.5);
        let mut st = AdamState::new(&s, AdamConfig::default()).unwrap();
        st.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item().unwrap(), 2.5);
    }

    #[test]
    fn descends_quadratic() {
        // loss = w^2, grad = 2w
        let mut s = single(1.0);
        let mut st = AdamState::new(&s, AdamConfig { lr: 0.05, ..Default::default() }).unwrap();
        let mut last = 1.0f64;
        for _ in 0..2 {
            let w = s.iter().next().unwrap().value.item().unwrap();
            s.iter_mut().next().unwrap().grad = Tensor::scalar(2.0 * w);
            st.step(&mut s).unwrap();
            let w2 = s.iter().next().unwrap().value.item().unwrap();
            assert!(w2 * w2 < last * last);
            last = w2;
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let s = single(0.0);
        assert!(AdamState::new(&s, AdamConfig { lr: 0.0, ..Default::default() }).is_err());
        assert!(AdamState::new(&s, AdamConfig { beta1: 1.0, ..Default::default() }).is_err());
    }
}
