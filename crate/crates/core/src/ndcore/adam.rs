use super::array::Real;
use super::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer. Moment buffers are allocated
/// on the first update.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> Option<&[T]> {
        self.m.get(index).map(|m| m.as_slice())
    }

    pub fn second_moment(&self, index: usize) -> Option<&[T]> {
        self.v.get(index).map(|v| v.as_slice())
    }

    /// Applies one update in place and zeroes the gradients.
    pub fn update(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids() {
            if !store.grad(id).is_finite() {
                return Err(Error::Numeric(format!("gradient of `{}`", store.name(id))));
            }
        }
        if self.m.len() != store.len() {
            self.m = store.ids().map(|id| vec![T::zero(); store.value(id).len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = store.grad(id).data().to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let value = store.value_mut(id).data_mut();
            for k in 0..value.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] = value[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            store.grad_mut(id).fill(T::zero());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::DenseArray;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", DenseArray::from_vec(&[1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.7);
        let mut opt = Adam::new(AdamConfig::default());
        let id = s.id("p").unwrap();
        s.grad_mut(id).data_mut()[0] = 2.0;
        opt.update(&mut s).unwrap();
        let (m1, v1) = (opt.first_moment(0).unwrap()[0], opt.second_moment(0).unwrap()[0]);
        opt.update(&mut s).unwrap();
        assert_eq!(opt.first_moment(0).unwrap()[0], 0.9 * m1);
        assert_eq!(opt.second_moment(0).unwrap()[0], 0.999 * v1);
        // a fresh optimizer with zero gradient changes nothing
        let mut s = scalar_store(0.7);
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], 0.7);
        assert_eq!(opt.first_moment(0).unwrap()[0], 0.0);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [3.0, -0.25, 1e-3] {
            let mut s = scalar_store(1.0);
            let id = s.id("p").unwrap();
            s.grad_mut(id).data_mut()[0] = g;
            let mut opt = Adam::new(AdamConfig::default());
            opt.update(&mut s).unwrap();
            let expected = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
            assert_eq!(s.grad(id).data()[0], 0.0);
        }
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        // scalar simulation of the moment recursions
        let (b1, b2, lr, eps, g) = (0.9f64, 0.999f64, 1e-3, 1e-8, -0.4f64);
        let (mut m, mut v) = (0.0, 0.0);
        let mut s = scalar_store(0.0);
        let id = s.id("p").unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let mut last = 0.0;
        for t in 1..=2000 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let step = lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            let before = s.value(id).data()[0];
            s.grad_mut(id).data_mut()[0] = g;
            opt.update(&mut s).unwrap();
            last = s.value(id).data()[0] - before;
            assert!((last + step).abs() < 1e-15);
        }
        assert!((last - lr).abs() < 1e-9, "{last}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let id = s.id("p").unwrap();
        s.grad_mut(id).data_mut()[0] = f64::NAN;
        let err = Adam::new(AdamConfig::default()).update(&mut s).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!(s.value(id).data()[0], 1.0);
    }
}
