//! Named parameter storage and the small layers built on it.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var, LN_EPS};

/// Standard deviation of the truncated-normal init used for linear weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::Dimension {
                op: "set_param",
                lhs: self.tensors[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.tensors.iter().map(|t| tape.var(t.clone())).collect(), tape }
    }
}

/// Parameters of one [`ParamStore`] recorded on a tape.
pub struct Bound<'t, T: Real> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradient of every parameter, zeros where unreachable.
    pub fn grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Registers parameters under a name prefix. Each tensor draws from its own
/// RNG stream keyed by `(seed, full name)`, so a parameter's initial value
/// does not depend on which other parameters exist.
pub struct ParamBuilder<'s, T> {
    store: &'s mut ParamStore<T>,
    seed: u64,
    prefix: String,
}

impl<'s, T: Real> ParamBuilder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Self { store, seed, prefix: String::new() }
    }

    pub fn scoped<'a>(&'a mut self, name: &str) -> ParamBuilder<'a, T> {
        let prefix = self.full(name);
        ParamBuilder { store: self.store, seed: self.seed, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full(name);
        self.store.insert(full, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::ones(shape))
    }

    /// Normal(0, std) truncated to ±2 std by rejection.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let full = self.full(name);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&full));
        let value = Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        });
        self.store.insert(full, value)
    }

    /// Uniform(-scale, scale); used by tests that want non-trivial biases.
    pub fn uniform(&mut self, name: &str, shape: &[usize], scale: f64) -> Result<ParamId> {
        let full = self.full(name);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&full));
        let value = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-scale..scale)));
        self.store.insert(full, value)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let mut s = self.scoped(name);
        let weight = s.trunc_normal("weight", &[fan_in, fan_out], INIT_STD)?;
        let bias = if bias { Some(s.zeros("bias", &[fan_out])?) } else { None };
        Ok(Linear { weight, bias, fan_in, fan_out })
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> Result<Norm> {
        let mut s = self.scoped(name);
        Ok(Norm { gamma: s.ones("gamma", &[width])?, beta: s.zeros("beta", &[width])?, width })
    }
}

/// `y = x·W + b` with `W` stored as `[fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(p.get(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.get(b)),
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.bias.is_some() { self.fan_out } else { 0 }
    }
}

/// LayerNorm affine parameters over the channel axis.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

impl Norm {
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), T::lit(LN_EPS))
    }
}
