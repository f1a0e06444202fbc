//! Dense row-major tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tensor`] owns its values behind a shared buffer, so cloning one is a
//! shallow copy. Tensors created with `requires_grad = true` additionally carry
//! a gradient cell that clones share: registering such a tensor on a [`Tape`]
//! and calling [`Var::backward`] accumulates into the same cell the caller
//! holds.

mod element;
pub mod gradcheck;
mod kernels;
mod ops;
mod tape;

use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

pub use element::{DType, Element};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use kernels::gemm;
pub(crate) use ops::mish_scalar;
pub use ops::{BatchStats, Reduce};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

type GradCell<T> = Arc<Mutex<Option<Vec<T>>>>;

#[derive(Clone)]
pub struct Tensor<T: Element> {
    shape: Arc<[usize]>,
    data: Arc<Vec<T>>,
    grad: Option<GradCell<T>>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::EmptyShape(shape.to_vec()));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape(format!("shape {shape:?} holds {numel} values, got {len}")));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape, data, false))
    }

    /// Same as [`Tensor::new`] but with a gradient cell attached.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape, data, true))
    }

    pub fn from_slice(shape: &[usize], data: &[T]) -> Result<Self> {
        Self::new(shape, data.to_vec())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(&[1], vec![value], false)
    }

    pub(crate) fn from_parts(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape: shape.into(), data: Arc::new(data), grad: requires_grad.then(|| Arc::new(Mutex::new(None))) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Value at a multi-index, row-major.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(self.shape.iter()) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Mutable view of the values. Copies first if the buffer is shared with a
    /// tape, so recorded values never change underneath a graph.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Copy of the values with no gradient cell.
    pub fn detach(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), grad: None }
    }

    /// Clone with its own gradient cell (holding a copy of the current
    /// gradient) instead of sharing this tensor's.
    pub fn deep_clone(&self) -> Self {
        let grad = self.grad_lock().map(|g| Arc::new(Mutex::new(g.clone())));
        Tensor { shape: self.shape.clone(), data: self.data.clone(), grad }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.numel())?;
        Ok(Tensor { shape: shape.into(), data: self.data.clone(), grad: self.grad.clone() })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            &self.shape,
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            self.requires_grad(),
        )
    }

    fn grad_lock(&self) -> Option<MutexGuard<'_, Option<Vec<T>>>> {
        self.grad.as_ref().map(|g| g.lock().expect("gradient cell poisoned"))
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let guard = self.grad_lock()?;
        guard.as_ref().map(|g| Tensor::from_parts(&self.shape, g.clone(), false))
    }

    pub fn zero_grad(&self) {
        if let Some(mut g) = self.grad_lock() {
            *g = None;
        }
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        if let Some(mut g) = self.grad_lock() {
            match g.as_mut() {
                Some(buf) => buf.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
                None => *g = Some(delta.to_vec()),
            }
        }
    }

    /// Overwrite the gradient. Used by tests and by optimizers' callers that
    /// compute gradients outside a tape.
    pub fn set_grad(&self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::LengthMismatch(grad.len(), self.numel()));
        }
        match self.grad_lock() {
            Some(mut g) => {
                *g = Some(grad);
                Ok(())
            }
            None => Err(Error::Domain("tensor does not require grad".into())),
        }
    }

    /// True when both tensors hold bit-identical values of the same shape.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.to_bits64() == b.to_bits64())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape).field("dtype", &T::DTYPE);
        if self.numel() <= 16 {
            s.field("data", &self.data);
        }
        s.field("requires_grad", &self.requires_grad()).finish()
    }
}
