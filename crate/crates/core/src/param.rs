use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, ParamRef, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub(crate) fn hash_tensor<T: Real>(h: &mut Sha256, name: &str, t: &Tensor<T>) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(Real::to_f64(*v).to_le_bytes());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<T>>,
}

/// Index of a parameter inside its set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) u32);

/// Named parameters of one model. The `tag` keeps gradients of different
/// sets apart when several models share a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    tag: u32,
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(tag: u32) -> Self {
        Self {
            tag,
            params: Vec::new(),
        }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            requires_grad,
            grad: None,
        });
        ParamId(self.params.len() as u32 - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0 as usize]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0 as usize].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(|i| ParamId(i as u32))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len() as u32).map(ParamId)
    }

    pub fn param_ref(&self, id: ParamId) -> ParamRef {
        ParamRef {
            set: self.tag,
            index: id.0,
        }
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for p in &mut self.params {
            p.requires_grad = flag;
            if !flag {
                p.grad = None;
            }
        }
    }

    /// Records the parameter on `g`: as a trainable leaf when it requires a
    /// gradient, otherwise as a frozen constant.
    pub fn var<'a>(&'a self, g: &mut Graph<'a, T>, id: ParamId) -> Var {
        let p = &self.params[id.0 as usize];
        if p.requires_grad {
            g.param(self.param_ref(id), &p.value)
        } else {
            g.constant(&p.value)
        }
    }

    /// Adds this set's gradients into `Parameter::grad`. Parameters that do
    /// not require a gradient are never touched.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (r, t) in grads.params() {
            if r.set != self.tag {
                continue;
            }
            let p = &mut self.params[r.index as usize];
            if !p.requires_grad {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.add_assign(t),
                None => p.grad = Some(t.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.name.as_str())
            .collect()
    }

    /// SHA-256 over names, shapes and values, in insertion order.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            hash_tensor(&mut h, &p.name, &p.value);
        }
        h.finalize().into()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tag: self.tag,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    requires_grad: p.requires_grad,
                    grad: None,
                })
                .collect(),
        }
    }
}

/// Models whose parameters can be perturbed by the gradient checker.
pub trait HasParams<T: Real> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
}

impl<T: Real> HasParams<T> for ParamSet<T> {
    fn params(&self) -> &ParamSet<T> {
        self
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        self
    }
}
