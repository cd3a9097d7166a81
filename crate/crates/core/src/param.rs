use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Adam first/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// A named tensor owned by a model. Non-trainable entries hold buffers such
/// as batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
    pub moments: Option<Moments>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable,
            moments: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Uniform Glorot initialization in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
    /// For `[out, in, kh, kw]` kernels the receptive field counts toward both fans.
    pub fn add_glorot(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> Result<ParamId> {
        let (fan_in, fan_out) = match shape {
            [n] => (*n, *n),
            [a, b] => (*a, *b),
            [o, i, rest @ ..] => {
                let rf: usize = rest.iter().product();
                (i * rf, o * rf)
            }
            [] => return Err(Error::Invalid("empty shape".into())),
        };
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape.to_vec()), true)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.by_name.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total trainable element count.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape`; trainable ones selected by `track`
    /// become gradient-tracking leaves, the rest constants.
    pub fn bind_with(&self, tape: &mut Tape, track: impl Fn(&Parameter) -> bool) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut tracked = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = p.trainable && track(p) && tape.grad_enabled();
            vars.push(tape.leaf(p.value.clone(), t));
            tracked.push(t);
        }
        Bound { vars, tracked }
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_| true)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of bound, tracked parameters into `grad`. Tracked
    /// parameters the loss did not reach receive an explicit zero gradient.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for ((p, &v), &tracked) in self.params.iter_mut().zip(&bound.vars).zip(&bound.tracked) {
            if !tracked {
                continue;
            }
            let g = grads.slice(v);
            let acc = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            if let Some(g) = g {
                for (a, b) in acc.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    /// Global L2 norm of all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(|g| g.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// Adds Gaussian noise to every trainable tensor, with standard deviation
    /// `frac` times that tensor's root-mean-square value.
    pub fn perturb(&mut self, frac: f64, rng: &mut impl Rng) -> Result<()> {
        if !(frac >= 0.0 && frac.is_finite()) {
            return Err(Error::Invalid(format!("noise fraction {frac} must be finite and non-negative")));
        }
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let n = p.value.len().max(1) as f64;
            let rms = (p.value.norm_sq() / n).sqrt();
            let sd = frac * rms;
            for v in p.value.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sd * z;
            }
        }
        Ok(())
    }
}

/// Tape variables for every parameter in a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    tracked: Vec<bool>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_tracked(&self, id: ParamId) -> bool {
        self.tracked[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_duplicate_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let id = store.add_glorot("w", &[10, 20], &mut rng).unwrap();
        let a = (6.0f64 / 30.0).sqrt();
        assert!(store.get(id).value.data().iter().all(|v| v.abs() <= a));
        assert!(store.add_zeros("w", &[3]).is_err());
        assert_eq!(store.id("w").unwrap(), id);
        assert!(matches!(store.id("nope"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut store = ParamStore::new();
        let id = store.add_zeros("w", &[2]).unwrap();
        store.get_mut(id).grad = Some(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let before = store.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }
}
