//! Named parameter storage and the small layer kit built on it.

use std::ops::Index;

use mubert_tensor::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), decay: p.decay })
                .collect(),
        }
    }

    /// Registers every parameter on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.leaf(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    /// Registers parameters whose name satisfies `trainable` as leaves and
    /// the rest as constants.
    pub fn bind_where(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable(&p.name) { g.leaf(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    /// Replaces values by name; shapes must match exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Graph variables for every parameter of one store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Weight initialization draws, in double precision.
pub struct Init {
    rng: StreamRng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: StreamRng::new(seed, 0x1417) }
    }

    pub fn xavier<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(vec![fan_in, fan_out], |_| T::lit(self.rng.real(-a, a)))
    }

    pub fn normal<T: Real>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.rng.normal() * std))
    }
}

/// `y = x·W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(in_dim, out_dim), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), false));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        Ok(match self.bias {
            Some(b) => g.add_row(y, p[b])?,
            None => y,
        })
    }

    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![d], T::one()), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![d]), false),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gain], p[self.bias], T::lit(eps))?)
    }
}
