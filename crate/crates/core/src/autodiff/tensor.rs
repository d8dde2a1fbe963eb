use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    /// Dense row-major storage. Writable so the optimizer and the
    /// finite-difference harness can update parameters in place.
    values: RwLock<Vec<f64>>,
    /// Accumulated gradient; `None` until a backward pass reaches this tensor.
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
}

/// Dense 64-bit tensor with an optional gradient slot.
///
/// Handles are cheap to clone and share storage; a single writer contract
/// applies to value mutation (optimizer steps, finite-difference probes).
/// Values must not be mutated between a forward pass and the backward pass
/// that consumes it: backward closures re-read live values.
#[derive(Clone)]
pub struct GradTensor {
    inner: Arc<Inner>,
}

pub(crate) fn check_numel(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::dim(format!(
            "shape {:?} implies {} elements, got {}",
            shape, n, len
        )));
    }
    Ok(())
}

impl GradTensor {
    fn build(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        check_numel(&shape, values.len())?;
        Ok(GradTensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RwLock::new(values),
                grad: Mutex::new(None),
                requires_grad,
            }),
        })
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Self::build(shape.to_vec(), values, true)
    }

    /// Non-trainable tensor (inputs, targets, fixed coefficients).
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Self::build(shape.to_vec(), values, false)
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(vec![], vec![v], false).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::build(shape.to_vec(), vec![0.0; n], false).unwrap()
    }

    pub fn zeros_param(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::build(shape.to_vec(), vec![0.0; n], true).unwrap()
    }

    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self::build(shape, values, requires_grad).unwrap()
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn same_storage(a: &GradTensor, b: &GradTensor) -> bool {
        Arc::ptr_eq(&a.inner, &b.inner)
    }

    /// Read access without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        let guard = self.inner.values.read().unwrap();
        f(&guard)
    }

    /// Read access to two tensors that may alias the same storage.
    pub(crate) fn with_values2<R>(
        a: &GradTensor,
        b: &GradTensor,
        f: impl FnOnce(&[f64], &[f64]) -> R,
    ) -> R {
        if GradTensor::same_storage(a, b) {
            let guard = a.inner.values.read().unwrap();
            f(&guard, &guard)
        } else {
            let ga = a.inner.values.read().unwrap();
            let gb = b.inner.values.read().unwrap();
            f(&ga, &gb)
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.read().unwrap().clone()
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "value() requires a single-element tensor");
        self.inner.values.read().unwrap()[0]
    }

    pub fn get(&self, flat_index: usize) -> f64 {
        self.inner.values.read().unwrap()[flat_index]
    }

    pub fn set_element(&self, flat_index: usize, v: f64) {
        self.inner.values.write().unwrap()[flat_index] = v;
    }

    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::dim(format!(
                "set_values: expected {} elements, got {}",
                self.numel(),
                values.len()
            )));
        }
        self.inner.values.write().unwrap().copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Add into the persistent gradient, allocating a zero buffer on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut g = self.inner.grad.lock().unwrap();
        let buf = g.get_or_insert_with(|| vec![0.0; self.numel()]);
        debug_assert_eq!(buf.len(), delta.len());
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }
}

impl std::fmt::Debug for GradTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradTensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
