//! Named parameter storage and per-pass binding into graph leaves.
//!
//! Parameters live as plain arrays so they can be cloned, serialised and
//! updated by an optimiser. Each forward pass binds them into fresh leaf
//! tensors through a [`Binder`], which also hands the gradients back.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let name = name.into();
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "param {name}: shape {shape:?} vs {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Self {
            name: name.into(),
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self::filled(name, shape, T::zero())
    }

    pub fn ones(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self::filled(name, shape, T::one())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Element>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast(v.wide())).collect(),
        }
    }

    /// Constant tensor with this parameter's value.
    pub fn constant(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.data.clone()).expect("param shape checked")
    }
}

/// Anything that owns an ordered list of parameters.
pub trait ParamSet<T: Element> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Turns parameters into graph leaves for one pass and collects their
/// gradients afterwards. A parameter bound twice yields the same leaf.
pub struct Binder<T: Element> {
    requires_grad: bool,
    leaves: RefCell<Vec<(String, Tensor<T>)>>,
    index: RefCell<HashMap<String, usize>>,
}

impl<T: Element> Binder<T> {
    pub fn training() -> Self {
        Self::with_grad(true)
    }

    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(requires_grad: bool) -> Self {
        Self {
            requires_grad,
            leaves: RefCell::new(Vec::new()),
            index: RefCell::new(HashMap::new()),
        }
    }

    /// A binder that hands out the given tensors for the named parameters,
    /// e.g. leaves owned by a finite-difference check.
    pub fn preset(bindings: impl IntoIterator<Item = (String, Tensor<T>)>) -> Self {
        let b = Self::with_grad(false);
        for (name, t) in bindings {
            let mut leaves = b.leaves.borrow_mut();
            b.index.borrow_mut().insert(name.clone(), leaves.len());
            leaves.push((name, t));
        }
        b
    }

    pub fn bind(&self, p: &Param<T>) -> Tensor<T> {
        if let Some(&i) = self.index.borrow().get(&p.name) {
            return self.leaves.borrow()[i].1.clone();
        }
        let t = if self.requires_grad {
            Tensor::param(p.shape.clone(), p.data.clone())
        } else {
            Tensor::new(p.shape.clone(), p.data.clone())
        }
        .expect("param shape checked");
        let mut leaves = self.leaves.borrow_mut();
        self.index.borrow_mut().insert(p.name.clone(), leaves.len());
        leaves.push((p.name.clone(), t.clone()));
        t
    }

    /// Gradient of a bound parameter; zeros if it did not reach the loss.
    pub fn grad(&self, name: &str) -> Option<Vec<T>> {
        let i = *self.index.borrow().get(name)?;
        let leaves = self.leaves.borrow();
        let t = &leaves[i].1;
        Some(t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]))
    }

    /// Names of bound parameters, in binding order.
    pub fn names(&self) -> Vec<String> {
        self.leaves.borrow().iter().map(|(n, _)| n.clone()).collect()
    }
}

/// Seeded parameter initialiser: truncated normal weights (cut at two
/// standard deviations), zero biases.
pub struct Initializer {
    rng: ChaCha8Rng,
    std: f64,
}

impl Initializer {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn trunc_normal<T: Element>(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Param<T> {
        let normal = Normal::new(0.0, self.std).expect("finite std");
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * self.std {
                    break T::cast(v);
                }
            })
            .collect();
        Param {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_is_deterministic_and_bounded() {
        let a: Param<f32> = Initializer::new(7, 0.02).trunc_normal("w", vec![100]);
        let b: Param<f32> = Initializer::new(7, 0.02).trunc_normal("w", vec![100]);
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn binder_reuses_leaves() {
        let p = Param::<f64>::ones("w", vec![2]);
        let b = Binder::training();
        let x = b.bind(&p);
        let y = b.bind(&p);
        assert!(x.ptr_eq(&y));
        x.add(&y).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad("w").unwrap(), vec![2.0, 2.0]);
        assert!(b.grad("missing").is_none());
    }
}
