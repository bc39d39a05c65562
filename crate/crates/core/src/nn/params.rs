use std::collections::HashMap;

use crate::error::{Result, StivError};
use crate::tensor::{Real, RngState, Tape, Tensor, Var};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<E> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Real> Default for ParamStore<E> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<E: Real> ParamStore<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Overwrites a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| StivError::Incompatible {
            name: name.to_string(),
            detail: "no such parameter".into(),
        })?;
        let slot = self.get_mut(id);
        if slot.shape() != value.shape() {
            return Err(StivError::Incompatible {
                name: name.to_string(),
                detail: format!("shape {:?} vs {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<F: Real>(&self) -> ParamStore<F> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<E>) -> Bound<'t, E> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }
}

/// Parameters registered on a tape for one forward pass.
pub struct Bound<'t, E: Real> {
    vars: Vec<Var<'t, E>>,
}

impl<'t, E: Real> Bound<'t, E> {
    /// Wraps caller-provided vars, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var<'t, E>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> &Var<'t, E> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, E>] {
        &self.vars
    }
}

/// Parameter initialization schemes.
pub enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over the first two extents.
    Xavier,
    Normal(f64),
}

impl Init {
    pub fn build<E: Real>(&self, shape: &[usize], rng: &mut RngState) -> Tensor<E> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Xavier => {
                let fan_in = shape[0] as f64;
                let fan_out = shape.get(1).copied().unwrap_or(1) as f64;
                let a = (6.0 / (fan_in + fan_out)).sqrt();
                rng.uniform_tensor(shape, -a, a)
            }
            Init::Normal(std) => rng.gaussian::<E>(shape).scale(E::from_f64(*std)),
        }
    }
}

/// Builder that prefixes parameter names, in the style of a variable-store path.
pub struct ParamBuilder<'a, E> {
    store: &'a mut ParamStore<E>,
    rng: &'a mut RngState,
    prefix: String,
}

impl<'a, E: Real> ParamBuilder<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, rng: &'a mut RngState) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, E> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let t = init.build(shape, self.rng);
        self.store.add(full, t)
    }
}
