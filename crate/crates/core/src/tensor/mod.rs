//! Dense tensors with tape-free reverse-mode automatic differentiation.
//!
//! Every op result keeps reference-counted handles to its inputs together
//! with a backward closure, so the computation graph is implicit in the
//! tensors themselves. [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates gradients into every node that
//! requires them.

mod conv;
mod linalg;
mod norm;
mod ops;
mod real;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use conv::Conv2dSpec;
pub(crate) use real::{gemm, MatRef};
pub use real::{DType, Real};

use crate::error::{dim_err, Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording a backward graph. Results of ops inside do not
/// require gradients, so intermediate buffers are released eagerly.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct BackwardCtx<'a, T: Real> {
    /// Gradient of the loss w.r.t. this op's output.
    pub grad: &'a [T],
    /// This op's forward output.
    pub out: &'a [T],
    pub parents: &'a [Tensor<T>],
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Real> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// N-dimensional row-major array. Cloning is cheap and shares storage.
pub struct Tensor<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn make(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn,
        }))
    }

    fn check(shape: &[usize], data: &[T]) -> Result<()> {
        if shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} has a zero dimension"));
        }
        if numel(shape) != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {} values but {} were given",
                numel(shape),
                data.len()
            ));
        }
        Ok(())
    }

    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::check(shape, &data)?;
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::check(shape, &data)?;
        Ok(Self::make(shape.to_vec(), data, true, None))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::c(x)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::make(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::make(vec![1], vec![value], false, None)
    }

    /// Builds an op result. The backward closure is only retained when some
    /// parent requires a gradient and recording is enabled.
    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<T>, parents: Vec<Tensor<T>>, backward: F) -> Self
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let grad_fn = track.then(|| GradFn {
            parents,
            backward: Box::new(backward),
        });
        Self::make(shape, data, track, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values; intended for optimizer updates and
    /// loading weights into leaf tensors.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|x| x.f64()).collect()
    }

    pub fn item(&self) -> T {
        self.data()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::make(self.0.shape.clone(), self.to_vec(), false, None)
    }

    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode accumulation from a scalar. Gradients add onto whatever
    /// is already stored, so repeated calls without [`zero_grad`](Self::zero_grad)
    /// accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(dim_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            ));
        }
        if !self.requires_grad() {
            return Err(Error::Input(
                "loss is not connected to any tensor that requires a gradient".into(),
            ));
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.key()) else {
                continue;
            };
            if let Some(gf) = &node.0.grad_fn {
                let out = node.0.data.borrow();
                let parent_grads = (gf.backward)(&BackwardCtx {
                    grad: &g,
                    out: &out,
                    parents: &gf.parents,
                });
                debug_assert_eq!(parent_grads.len(), gf.parents.len());
                for (p, pg) in gf.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                        None => {
                            pending.insert(p.key(), pg);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require gradients (root last).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::parameter(&[3], vec![1.0, -2.0, 4.0]).unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_x() {
        let x = Tensor::<f64>::parameter(&[3], vec![1.0, -2.0, 4.0]).unwrap();
        x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 8.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.scale(3.0).sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn intermediates_receive_gradients() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        y.sum_all().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.scale(2.0).backward(), Err(Error::Dim(_))));
    }

    #[test]
    fn no_grad_skips_graph() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad());
        assert!(x.scale(2.0).requires_grad());
    }

    #[test]
    fn shared_subexpression_gets_both_paths() {
        // loss = sum(x*2) + sum(x*3) → grad 5
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.scale(2.0).sum_all().add(&x.scale(3.0).sum_all()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0, 5.0]);
    }
}
