//! Named parameter registry and the small layers built on it.

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.values
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Record every parameter on `tape`, trainable when `trainable` is set.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of one store as recorded on a particular tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap leaves created elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Deterministic initializer.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform<F: Element>(&mut self, shape: &[usize], bound: f64) -> Tensor<F> {
        let dist = Uniform::new_inclusive(-bound, bound);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(dist.sample(self.rng))).collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }

    /// He-uniform: U(-√(6/fan_in), √(6/fan_in)).
    pub fn he_uniform<F: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<F> {
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }
}

/// `y = x·W + b` on token matrices, `W` stored `in×out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        init: &mut Init<'_>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), init.he_uniform(&[fan_in, fan_out], fan_in))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add_bias(y, p.var(self.b))
    }
}

/// Convolution weights `cout×cin×k×k` plus bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        init: &mut Init<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        Ok(Self {
            w: store.add(format!("{name}.w"), init.he_uniform(&[cout, cin, k, k], fan_in))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?,
            stride: 1,
            pad: k / 2,
        })
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

/// Layer-norm gain and bias, initialised to ones and zeros.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], F::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]))?,
        })
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), F::of(LAYER_NORM_EPS))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a.w", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.id("a.w").map(ParamId::index), Some(0));
    }

    #[test]
    fn he_uniform_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init { rng: &mut rng };
        let t: Tensor<f64> = init.he_uniform(&[64, 16], 16);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 0.05);
    }
}
