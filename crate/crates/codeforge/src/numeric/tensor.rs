//! The tensor handle and its backprop bookkeeping.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::ops::Op;
use crate::numeric::Float;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread. Forward
/// values are unchanged; no backprop records are kept, so inference
/// inside the closure allocates no graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Inner<T: Float> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    /// Persistent accumulated gradient; present once the tensor has
    /// received one.
    pub(crate) grad: Option<Vec<T>>,
    /// Leaf marker: gradients accumulate here during backward.
    pub(crate) requires_grad: bool,
    /// Whether any leaf requiring gradients is reachable from this node.
    pub(crate) needs_grad: bool,
    /// Backprop record: the producing operation and its parents.
    pub(crate) op: Option<Op<T>>,
}

impl<T: Float> Drop for Inner<T> {
    fn drop(&mut self) {
        // Long op chains (one per unrolled timestep) would otherwise drop
        // recursively and can exhaust the stack; dismantle iteratively.
        let mut stack: Vec<Op<T>> = self.op.take().into_iter().collect();
        while let Some(op) = stack.pop() {
            for parent in op.into_parents() {
                if let Some(cell) = Rc::into_inner(parent.inner) {
                    let mut inner = cell.into_inner();
                    if let Some(op) = inner.op.take() {
                        stack.push(op);
                    }
                }
            }
        }
    }
}

/// An N-dimensional row-major array participating in a reverse-mode
/// gradient graph. Cloning is cheap: clones share storage and identity.
pub struct Tensor<T: Float = f32> {
    pub(crate) inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Float> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        let head: Vec<&T> = inner.data.iter().take(8).collect();
        write!(
            f,
            "Tensor{:?} {:?}{}",
            inner.shape,
            head,
            if inner.data.len() > 8 { "…" } else { "" }
        )
    }
}

impl<T: Float> Tensor<T> {
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>, op: Option<Op<T>>, needs_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad: false,
                needs_grad,
                op,
            })),
        }
    }

    /// Builds a derived node, keeping the backprop record only while
    /// gradients are enabled and some parent needs them.
    pub(crate) fn derived(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        let track = grad_enabled() && op.parents().iter().any(|p| p.needs_grad());
        Tensor::from_parts(shape, data, track.then_some(op), track)
    }

    /// A new leaf tensor. Errors when the data length does not match the
    /// shape.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Invalid(format!(
                "tensor data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, None, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![T::ZERO; len], None, false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; len], None, false)
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_parts(vec![1], vec![value], None, false)
    }

    /// Uniform init in `[lo, hi)`, consuming the rng deterministically.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Tensor::from_parts(shape.to_vec(), data, None, false)
    }

    /// Normal init via Box-Muller, mean 0, the given standard deviation.
    pub fn rand_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random::<f64>();
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                T::from_f64(std * z)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data, None, false)
    }

    /// Marks this leaf as trainable: backward will accumulate its
    /// gradient. Panics when called on a derived node.
    pub fn trainable(self) -> Self {
        {
            let mut inner = self.inner.borrow_mut();
            assert!(inner.op.is_none(), "only leaf tensors can be marked trainable");
            inner.requires_grad = true;
            inner.needs_grad = true;
        }
        self
    }

    /// A leaf copy of this tensor's values, cut off from the graph.
    pub fn detach(&self) -> Self {
        let inner = self.inner.borrow();
        Tensor::from_parts(inner.shape.clone(), inner.data.clone(), None, false)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.borrow().needs_grad
    }

    /// Stable identity of the underlying storage.
    pub(crate) fn ptr(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> T {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor {:?}", inner.shape);
        inner.data[0]
    }

    /// Overwrites the tensor's values in place, keeping the shape.
    pub fn set_data(&self, data: &[T]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        if let Some(g) = inner.grad.as_mut() {
            g.fill(T::ZERO);
        }
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut inner = self.inner.borrow_mut();
        let len = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![T::ZERO; len]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst = T::from_f64(dst.to_f64() + src.to_f64());
        }
    }

    /// Mutates the gradient buffer, if one exists.
    pub fn grad_mut(&self, f: impl FnOnce(&mut [T])) {
        let mut inner = self.inner.borrow_mut();
        if let Some(g) = inner.grad.as_mut() {
            f(g);
        }
    }

    /// Applies an optimizer-style update reading the gradient and
    /// mutating the values in one borrow. No-op without a gradient.
    pub fn apply_update(&self, f: impl FnOnce(&mut [T], &[T])) {
        let mut inner = self.inner.borrow_mut();
        let Inner { data, grad, .. } = &mut *inner;
        if let Some(g) = grad.as_ref() {
            f(data, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rand_is_deterministic_per_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::rand_normal(&[4, 4], 0.02, &mut a);
        let y = Tensor::<f32>::rand_normal(&[4, 4], 0.02, &mut b);
        assert_eq!(x.to_vec(), y.to_vec());
    }

    #[test]
    fn deep_graph_drops_without_overflow() {
        let mut x = Tensor::<f32>::scalar(1.0).trainable();
        for _ in 0..200_000 {
            x = x.scale(1.0000001);
        }
        drop(x);
    }
}
