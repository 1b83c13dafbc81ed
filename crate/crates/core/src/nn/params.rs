use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
    Normal(f64),
}

/// Named parameter tensors in registration order.
///
/// Names are unique and double as checkpoint keys.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    shapes: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
    /// Record names and shapes without allocating storage.
    shape_only: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store that only records declared shapes; tensors are left empty.
    /// Useful for counting the parameters of models too large to allocate.
    pub fn shape_only() -> Self {
        Self {
            shape_only: true,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        t.set_requires_grad(true);
        let id = self.tensors.len();
        self.shapes.push(t.shape().to_vec());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(id))
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        if self.shape_only {
            let id = self.insert(name, Tensor::zeros(&[0]))?;
            self.shapes[id.0] = shape.to_vec();
            return Ok(id);
        }
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Uniform(b) => Tensor::uniform(shape, b, rng),
            Init::Normal(s) => Tensor::randn(shape, s, rng),
        };
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Declared shape of every parameter, in registration order.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replace a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        let cur = &mut self.tensors[id.0];
        if cur.shape() != t.shape() {
            return Err(Error::dim("param set", cur.shape(), t.shape()));
        }
        cur.data_mut().copy_from_slice(t.data());
        Ok(())
    }

    /// Record every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Record every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Add the gradients of a backward sweep into the per-parameter buffers.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    if t.grad().is_none() {
                        t.zero_grad();
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient buffers in registration order (zeros where never filled).
    pub fn grads(&self) -> Vec<Tensor> {
        self.tensors
            .iter()
            .map(|t| match t.grad() {
                Some(g) => Tensor::new(t.shape(), g.to_vec()).expect("grad shape"),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

/// Parameters recorded on one tape, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound<'t>(Vec<Var<'t>>);

impl<'t> Bound<'t> {
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.0
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;
    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.0[id.0]
    }
}
