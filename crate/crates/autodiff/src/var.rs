use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

/// Dense n-dimensional array of doubles; the value type carried by every graph node.
pub type Tensor = ArrayD<f64>;

/// Maps the upstream gradient, the node inputs and the node output to one
/// optional gradient per input. Implementations must build their results from
/// `Var` operations so that the backward pass is itself differentiable.
pub(crate) type BackwardFn = dyn Fn(&Var, &[Var], &Var) -> Vec<Option<Var>>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether newly created operations record their inputs for differentiation.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Restores the previous recording mode when dropped.
#[must_use]
pub struct GradModeGuard {
    previous: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.previous));
    }
}

fn set_grad_mode(enabled: bool) -> GradModeGuard {
    let previous = GRAD_ENABLED.with(|c| c.replace(enabled));
    GradModeGuard { previous }
}

/// Disables graph recording until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    set_grad_mode(false)
}

pub(crate) fn enable_grad() -> GradModeGuard {
    set_grad_mode(true)
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Var>,
    pub(crate) backward: Option<Box<BackwardFn>>,
}

/// A node in the computation graph.
///
/// Cloning is cheap: it shares the node. Values are immutable once created;
/// parameter updates replace the `Var` rather than mutating it.
#[derive(Clone)]
pub struct Var(pub(crate) Rc<Node>);

impl Var {
    fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A value that is never differentiated.
    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false)
    }

    /// A leaf that gradients are taken with respect to.
    pub fn param(value: Tensor) -> Var {
        Var::leaf(value, true)
    }

    pub fn scalar(value: f64) -> Var {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn zeros(shape: &[usize]) -> Var {
        Var::constant(ArrayD::zeros(IxDyn(shape)))
    }

    /// Builds a constant from row-major data.
    ///
    /// Panics if `data.len()` differs from the product of `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Var {
        Var::constant(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length mismatch"))
    }

    pub(crate) fn from_op<F>(value: Tensor, parents: Vec<Var>, backward: F) -> Var
    where
        F: Fn(&Var, &[Var], &Var) -> Vec<Option<Var>> + 'static,
    {
        let requires_grad = grad_enabled() && parents.iter().any(Var::requires_grad);
        if !requires_grad {
            return Var::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            parents,
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    /// A constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.0.value.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
