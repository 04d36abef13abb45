//! Bias-corrected Adam.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.dims())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Updates every parameter of `store` from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (i, (_, p)) in store.iter().enumerate() {
            if p.grad.dims() != self.m[i].dims() || p.value.dims() != self.m[i].dims() {
                return Err(Error::shape(format!("parameter {} changed shape", p.name)));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        let (lr, bc1, bc2) = (T::lit(c.lr), T::lit(bc1), T::lit(bc2));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[0.3, -2.0]);
        let before = s.clone();
        let mut st = AdamState::new(&s, AdamConfig::default());
        st.step(&mut s).unwrap();
        assert_eq!(s.get(s.id("w").unwrap()).value, before.get(before.id("w").unwrap()).value);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[1.0, 1.0, 1.0]);
        let id = s.id("w").unwrap();
        s.get_mut(id).grad = Tensor::from_vec(&[3], vec![0.5, -3.0, 100.0]).unwrap();
        let mut st = AdamState::new(&s, AdamConfig::default());
        st.step(&mut s).unwrap();
        let w = s.get(id).value.data();
        for (w, sign) in w.iter().zip([1.0, -1.0, 1.0]) {
            assert!((1.0 - w - sign * 1e-3).abs() < 1e-9, "{w}");
        }
    }

    #[test]
    fn quadratic_descends() {
        let mut s = store(&[1.0]);
        let id = s.id("w").unwrap();
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut prev = 1.0f64;
        for _ in 0..2 {
            let w = s.get(id).value.data()[0];
            s.get_mut(id).grad = Tensor::from_vec(&[1], vec![2.0 * w]).unwrap();
            st.step(&mut s).unwrap();
            let now = s.get(id).value.data()[0].abs();
            assert!(now < prev);
            prev = now;
        }
        // Scalar hand simulation of the two updates.
        assert!((prev - 0.998_000_026_213_834_3).abs() < 1e-12, "{prev}");
    }

    #[test]
    fn rejects_mismatched_store() {
        let s = store(&[1.0]);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut other = store(&[1.0]);
        other.insert("extra", Tensor::ones(&[2])).unwrap();
        assert!(st.step(&mut other).is_err());
    }
}
