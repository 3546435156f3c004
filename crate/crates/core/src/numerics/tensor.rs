use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};

/// Backward closure: receives the gradient of the op output and a flag per
/// parent saying whether that parent needs a gradient. Returns one optional
/// gradient per parent, congruent with the parent's data.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// Dense row-major `f64` tensor with optional reverse-mode gradient tracking.
///
/// Cloning is cheap (reference counted). Leaves created with
/// [`Tensor::param`] accumulate gradients on [`Tensor::backward`]; every
/// other tensor is the immutable output of an op and remembers how to
/// propagate gradients to its inputs.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Whether ops currently record a gradient graph on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _guard = GradModeGuard(prev);
    f()
}

/// Adds to the forward floating-point operation counter of this thread.
pub fn count_flops(n: u64) {
    FLOPS.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Forward floating-point operations counted on this thread so far.
pub fn flop_count() -> u64 {
    FLOPS.with(|c| c.get())
}

pub fn reset_flop_count() {
    FLOPS.with(|c| c.set(0));
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            requires_grad: Cell::new(requires_grad),
            grad: RefCell::new(None),
            grad_fn: None,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![value; n], false)
    }

    /// Rank-0 constant.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(Vec::new(), vec![value], false)
    }

    /// Builds the output of an op. The backward closure is kept only if
    /// gradient recording is on and some parent requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let grad_fn = track.then(|| GradFn {
            parents,
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            requires_grad: Cell::new(false),
            grad: RefCell::new(None),
            grad_fn,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// Size of the last axis (1 for rank-0 tensors).
    pub fn last_dim(&self) -> usize {
        self.0.shape.last().copied().unwrap_or(1)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn requires_grad(&self) -> bool {
        match &self.0.grad_fn {
            Some(_) => true,
            None => self.0.requires_grad.get(),
        }
    }

    /// Toggles gradient tracking on a leaf (used to freeze parameters).
    pub fn set_requires_grad(&self, on: bool) {
        if self.is_leaf() {
            self.0.requires_grad.set(on);
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Constant copy of this tensor's current values.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    /// Mutates leaf values in place (optimizer updates, finite differences).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        debug_assert!(self.is_leaf(), "update_data on a non-leaf tensor");
        f(&mut self.0.data.borrow_mut());
    }

    /// Identity comparison (same underlying node).
    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of all reachable
    /// trainable leaves are accumulated (not overwritten).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.0), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&Rc::as_ptr(&node.0)) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(Tensor::requires_grad).collect();
                    let parent_grads = (gf.backward)(&g, &needs);
                    for ((parent, pg), need) in gf.parents.iter().zip(parent_grads).zip(&needs) {
                        let (Some(pg), true) = (pg, *need) else {
                            continue;
                        };
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.entry(Rc::as_ptr(&parent.0)) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                add_assign(e.get_mut(), &pg)
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => add_assign(acc, &g),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order (inputs first) over nodes that require gradients.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(shape_err!("zero-sized dimension in shape {shape:?}"));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(shape_err!("shape {shape:?} needs {n} elements, got {len}"));
    }
    Ok(())
}

pub(crate) fn add_assign(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
