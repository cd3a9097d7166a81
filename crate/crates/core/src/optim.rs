use crate::error::{Error, Result};
use crate::param::{Moments, ParamStore, Parameter};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    /// Updates every trainable parameter selected by `select` in place.
    /// Selected parameters without a gradient are an error; nothing is
    /// modified in that case.
    pub fn step_filtered(&mut self, store: &mut ParamStore, select: impl Fn(&Parameter) -> bool) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.trainable && select(p) && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in store.iter_mut().filter(|p| p.trainable) {
            if !select(p) {
                continue;
            }
            let n = p.value.len();
            let grad = p.grad.as_ref().expect("checked above").data();
            let mom = p.moments.get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let value = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g;
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step_filtered(store, |_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: &[f64], grad: Option<&[f64]>) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new([values.len()], values.to_vec()).unwrap(), true).unwrap();
        s.get_mut(id).grad = grad.map(|g| Tensor::new([g.len()], g.to_vec()).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store_with(&[1.0, 1.0, 1.0], Some(&[0.3, -2.0, 50.0]));
        let mut adam = Adam::new(0.01);
        adam.eps = 0.0;
        adam.step(&mut s).unwrap();
        let w = s.by_name("w").unwrap().value.data();
        assert!((w[0] - 0.99).abs() < 1e-12);
        assert!((w[1] - 1.01).abs() < 1e-12);
        assert!((w[2] - 0.99).abs() < 1e-12);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut s = store_with(&[0.5, -0.25], Some(&[0.0, 0.0]));
        let mut adam = Adam::new(0.1);
        for _ in 0..3 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.by_name("w").unwrap().value.data(), &[0.5, -0.25]);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = store_with(&[1.0], None);
        let err = Adam::new(0.1).step(&mut s).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
    }
}
