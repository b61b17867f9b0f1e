//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Operations whose inputs
//! require gradients record a backward closure together with their parents;
//! [`Tensor::backward`] walks that graph in reverse topological order.
//!
//! Values are held in `f64` buffers. In the default [`Precision::F32`] mode
//! every forward result and every stored gradient is rounded to the nearest
//! `f32`, so the observable numbers are 32-bit floats. [`Precision::F64`]
//! keeps full precision and exists for finite-difference gradient checks.
//! The mode is per thread.

mod conv;
pub(crate) mod linear;
mod nn;
pub(crate) mod ops;
mod param;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use conv::{same_padding, Conv2dSpec};
pub use param::{init_truncated_normal, ParamStore, Parameter};

use crate::error::{Error, Result};

/// Floating point precision of forward values and stored gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F32) };
}

pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

/// Restores the previous precision when dropped.
pub struct PrecisionGuard(Precision);

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        set_precision(self.0);
    }
}

/// Switches the current thread to `p` until the guard is dropped.
#[must_use]
pub fn scoped_precision(p: Precision) -> PrecisionGuard {
    let prev = precision();
    set_precision(p);
    PrecisionGuard(prev)
}

pub(crate) fn round_in_place(v: &mut [f64]) {
    if precision() == Precision::F32 {
        for x in v.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
}

pub(crate) fn round_scalar(x: f64) -> f64 {
    match precision() {
        Precision::F32 => x as f32 as f64,
        Precision::F64 => x,
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [f64],
    /// Forward value of this node.
    pub out: &'a [f64],
    needs: &'a [bool],
}

impl BackwardCtx<'_> {
    /// Whether parent `i` needs a gradient.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    op: &'static str,
    parents: Vec<Tensor>,
    needs: Vec<bool>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.grad_fn.as_ref().map(|g| g.op))
            .field("data", &preview)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(node: Node) -> Self {
        Tensor {
            node: Rc::new(node),
        }
    }

    /// A constant tensor. Values are rounded to the current precision.
    pub fn new(mut data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {shape:?} holds {} values but {} were given",
                    numel_of(shape),
                    data.len()
                ),
            ));
        }
        round_in_place(&mut data);
        Ok(Self::constant_unchecked(data, shape.to_vec()))
    }

    pub(crate) fn constant_unchecked(data: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self::from_node(Node {
            shape,
            data: RefCell::new(data),
            requires_grad: false,
            grad: RefCell::new(None),
            grad_fn: None,
        })
    }

    /// A leaf that accumulates gradients.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        let data = t.node.data.borrow().clone();
        let n = data.len();
        Ok(Self::from_node(Node {
            shape: shape.to_vec(),
            data: RefCell::new(data),
            requires_grad: true,
            grad: RefCell::new(Some(vec![0.0; n])),
            grad_fn: None,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant_unchecked(vec![0.0; numel_of(shape)], shape.to_vec())
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::constant_unchecked(vec![round_scalar(value); numel_of(shape)], shape.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant_unchecked(vec![round_scalar(value)], Vec::new())
    }

    pub fn from_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.to_vec(), shape)
    }

    /// Records the output of an operation. When no parent requires a
    /// gradient the result is a constant and the closure is discarded.
    pub(crate) fn from_op<F>(
        op: &'static str,
        mut data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Tensor
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        debug_assert_eq!(numel_of(&shape), data.len(), "{op}");
        round_in_place(&mut data);
        #[cfg(debug_assertions)]
        {
            let inputs_finite = parents
                .iter()
                .all(|p| p.node.data.borrow().iter().all(|x| x.is_finite()));
            if inputs_finite {
                debug_assert!(
                    data.iter().all(|x| x.is_finite()),
                    "{op} produced a non-finite value from finite inputs"
                );
            }
        }
        let needs: Vec<bool> = parents.iter().map(Tensor::requires_grad).collect();
        if !needs.iter().any(|&n| n) {
            return Self::constant_unchecked(data, shape);
        }
        Self::from_node(Node {
            shape,
            data: RefCell::new(data),
            requires_grad: true,
            grad: RefCell::new(None),
            grad_fn: Some(GradFn {
                op,
                parents,
                needs,
                backward: Box::new(backward),
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.node.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.numel() / d
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.node.data.borrow().iter().map(|&x| x as f32).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape()),
            ));
        }
        Ok(self.node.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Accumulated gradient of a leaf; `None` for constants and op outputs.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn has_grad_buffer(&self) -> bool {
        self.node.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.node.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Overwrites a leaf's values in place (used by optimizers and loaders).
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::invalid("set_data", "only leaves can be overwritten"));
        }
        let mut data = self.node.data.borrow_mut();
        if data.len() != values.len() {
            return Err(Error::shape(
                "set_data",
                &self.node.shape,
                &[values.len()],
            ));
        }
        data.copy_from_slice(values);
        round_in_place(&mut data);
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut data = self.node.data.borrow_mut();
        f(&mut data);
        round_in_place(&mut data);
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::constant_unchecked(self.to_vec(), self.node.shape.clone())
    }

    /// Identity of the underlying storage, for checking parameter sharing.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.node)
    }

    /// Populates `grad` of every leaf reachable from this scalar.
    /// Gradients accumulate into existing buffers.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    if let Some(buf) = t.node.grad.borrow_mut().as_mut() {
                        for (b, x) in buf.iter_mut().zip(&g) {
                            *b += x;
                        }
                        round_in_place(buf);
                    }
                }
                Some(gf) => {
                    let out = t.node.data.borrow();
                    let ctx = BackwardCtx {
                        grad: &g,
                        out: &out,
                        needs: &gf.needs,
                    };
                    let parent_grads = (gf.backward)(&ctx);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.op);
                    for ((p, pg), &need) in gf.parents.iter().zip(parent_grads).zip(&gf.needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{} gradient size", gf.op);
                        match grads.get_mut(&p.key()) {
                            Some(acc) => {
                                for (a, x) in acc.iter_mut().zip(&pg) {
                                    *a += x;
                                }
                            }
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((t, next)) = stack.pop() {
            let parents = t.node.grad_fn.as_ref().map(|g| g.parents.as_slice());
            match parents {
                Some(ps) if next < ps.len() => {
                    let p = ps[next].clone();
                    stack.push((t, next + 1));
                    if p.requires_grad() && visited.insert(p.key()) {
                        stack.push((p, 0));
                    }
                }
                _ => order.push(t),
            }
        }
        order
    }
}
