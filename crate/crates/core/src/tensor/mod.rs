//! A small dense tensor with reverse-mode differentiation.
//!
//! Each [`Tensor`] is an immutable node in a computation graph. Operations on
//! tensors that require gradients record a backward closure together with
//! their parents; [`Tensor::backward`] walks the graph once in reverse
//! topological order and accumulates gradients by summation.
//!
//! The element type is generic so the same graph code runs in `f32` (model
//! default) and `f64` (finite-difference checks). Reductions accumulate in
//! `f64` regardless of the element type.

mod conv;
mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::{maxpool_output_len, ChannelGrouping};
pub use gradcheck::{finite_diff_check, finite_diff_check_multi, GradReport, REL_FLOOR};
pub use ops::softmax;

/// Scalar element of a [`Tensor`].
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static + std::iter::Sum
{
    fn cast(v: f64) -> Self;
    fn wide(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn cast(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn wide(self) -> f64 {
        f64::from(self)
    }
}

impl Element for f64 {
    #[inline]
    fn cast(v: f64) -> Self {
        v
    }
    #[inline]
    fn wide(self) -> f64 {
        self
    }
}

/// Gradient of one op w.r.t. each parent, `None` where a parent needs none.
pub type ParentGrads<T> = Vec<Option<Vec<T>>>;
type BackwardFn<T> = Box<dyn Fn(&[T]) -> ParentGrads<T>>;

struct Op<T: Element> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<Op<T>>,
}

impl<T: Element> Drop for Node<T> {
    // Unlinks long parent chains iteratively instead of recursing through Rc drops.
    fn drop(&mut self) {
        let Some(op) = self.op.take() else { return };
        let Op {
            parents, backward, ..
        } = op;
        let mut stack = parents;
        drop(backward);
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                if let Some(op) = node.op.take() {
                    stack.extend(op.parents);
                }
            }
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Reference-counted handle to a graph node. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor<T: Element = f32>(Rc<Node<T>>);

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(|o| o.name))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn from_node(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// A constant (no gradient) tensor.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self::from_node(shape, data, false, None))
    }

    /// A leaf that will receive a gradient.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::from_node(t.0.shape.clone(), t.0.data.clone(), true, None))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_node(shape, vec![T::zero(); n], false, None)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_node(shape, vec![value; n], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_node(vec![], vec![value], false, None)
    }

    /// Records a custom op. `backward` receives the upstream gradient and
    /// returns one entry per parent. If no parent requires a gradient the op
    /// is not recorded.
    pub fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> ParentGrads<T> + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let op = requires_grad.then(|| Op {
            name,
            parents,
            backward: Box::new(backward),
        });
        Self::from_node(shape, data, requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient, populated by [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same data, gradient tracking cut.
    pub fn detach(&self) -> Self {
        Self::from_node(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients are added to the
    /// `grad` field of every node on the way, so repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // iterative post-order DFS gives a topological order
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for p in op.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.0.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.0.id, vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            if let Some(op) = &node.0.op {
                let parent_grads = (op.backward)(&g);
                debug_assert_eq!(parent_grads.len(), op.parents.len(), "op {}", op.name);
                for (parent, pg) in op.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel(), "op {}", op.name);
                    match pending.get_mut(&parent.0.id) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                        None => {
                            pending.insert(parent.0.id, pg);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
