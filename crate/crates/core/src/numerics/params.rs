use std::collections::BTreeMap;

use rand::Rng;

use super::{Graph, Scalar, Tensor2D, Var};
use crate::error::{Error, Result};

/// Named trainable tensors.
///
/// Names are dotted paths such as `gb.mob1.tower.layer0.weight`. Iteration
/// order is lexicographic, which keeps every consumer deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor2D<T>>,
    seed: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Inserts a Glorot-uniform `fan_in × fan_out` weight and a zero bias
    /// under `{prefix}.weight` / `{prefix}.bias`.
    pub fn insert_dense<R: Rng>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::of(rng.gen_range(-limit..=limit)))
            .collect();
        self.insert(
            format!("{prefix}.weight"),
            Tensor2D::from_vec(fan_in, fan_out, data)?,
        )?;
        self.insert(format!("{prefix}.bias"), Tensor2D::zeros(1, fan_out))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2D<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor2D<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor2D::len).sum()
    }

    /// Registers every parameter as a differentiable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| (name.clone(), graph.leaf(value.clone())))
            .collect();
        Binding { vars }
    }

    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.convert()))
                .collect(),
            seed: self.seed,
        }
    }
}

/// Parameter name → graph node for one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Panics on an unknown name: the model only asks for names it created.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Adjoints of every bound parameter after a backward sweep, zero-filled
    /// where no gradient arrived.
    pub fn gradients<T: Scalar>(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor2D<T>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = graph.adjoint(v).cloned().unwrap_or_else(|| {
                    let (r, c) = graph.shape(v);
                    Tensor2D::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }
}
