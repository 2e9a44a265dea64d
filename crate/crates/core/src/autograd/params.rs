use indexmap::IndexMap;

use crate::ctensor::ComplexTensor;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::complex::CVar;
use super::graph::{Gradients, Graph, Var};

/// One real plane of a parameter with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> Plane<T> {
    fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Plane {
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }
}

/// A named parameter: one plane for real-valued affine terms, two for complex ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub planes: Vec<Plane<T>>,
}

impl<T: Real> Param<T> {
    pub fn is_complex(&self) -> bool {
        self.planes.len() == 2
    }

    pub fn numel(&self) -> usize {
        self.planes.iter().map(|p| p.value.len()).sum()
    }

    pub fn complex_value(&self) -> Option<ComplexTensor<T>> {
        match self.planes.as_slice() {
            [re, im] => ComplexTensor::new(re.value.clone(), im.value.clone()).ok(),
            _ => None,
        }
    }
}

/// Index of a parameter inside its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered registry of trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
    pub step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            step: 0,
        }
    }

    fn insert(&mut self, name: &str, planes: Vec<Plane<T>>) -> Result<ParamId> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (id, _) = self.params.insert_full(name.to_string(), Param { planes });
        Ok(ParamId(id))
    }

    pub fn add_complex(&mut self, name: &str, value: ComplexTensor<T>) -> Result<ParamId> {
        let (re, im) = value.into_parts();
        self.insert(name, vec![Plane::new(re), Plane::new(im)])
    }

    pub fn add_real(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, vec![Plane::new(value)])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of real scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Param::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            for pl in &mut p.planes {
                pl.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
            }
        }
    }

    /// Records every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        let vars = self
            .params
            .values()
            .map(|p| p.planes.iter().map(|pl| graph.param(pl.value.clone())).collect())
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant of `graph` (no gradients).
    pub fn bind_constants(&self, graph: &mut Graph<T>) -> Bound {
        let vars = self
            .params
            .values()
            .map(|p| p.planes.iter().map(|pl| graph.constant(pl.value.clone())).collect())
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of bound leaves into the stored gradients.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (p, vars) in self.params.values_mut().zip(&bound.vars) {
            for (pl, &v) in p.planes.iter_mut().zip(vars) {
                if let Some(g) = grads.get(v) {
                    pl.grad.add_assign(g);
                }
            }
        }
    }
}

/// Graph leaves for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Vec<Var>>,
}

impl Bound {
    pub fn real(&self, id: ParamId) -> Var {
        self.vars[id.0][0]
    }

    pub fn complex(&self, id: ParamId) -> CVar {
        let v = &self.vars[id.0];
        debug_assert_eq!(v.len(), 2, "parameter is not complex");
        CVar { re: v[0], im: v[1] }
    }
}
