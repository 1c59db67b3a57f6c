//! Named parameter tensors with gradient accumulators.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Rank 0 (empty shape) holds a single scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product::<usize>().max(1);
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = shape.iter().product::<usize>().max(1);
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor value".into()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The single value of a rank-0 tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.shape.is_empty() && self.data.len() == 1);
        self.data[0]
    }

    pub fn fill(&mut self, v: T) {
        for x in self.data.iter_mut() {
            *x = v;
        }
    }

    /// Flat index for a 4D tensor.
    #[inline]
    pub fn idx4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d
    }

    /// Flat index for a 2D tensor.
    #[inline]
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        r * self.shape[1] + c
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Optimizers only touch trainable entries; running statistics and
    /// normalization constants are stored non-trainable.
    pub trainable: bool,
}

/// Ordered collection of named parameter tensors with gradient accumulators.
/// Entry order is the flattening order used by the optimizers, so it is part
/// of the deterministic contract.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(
            self.id_of(name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad.fill(T::zero());
        }
    }

    /// Total number of trainable scalar components.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Trainable values flattened in entry order.
    pub fn flatten_trainable(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for e in self.entries.iter().filter(|e| e.trainable) {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    /// Trainable gradients flattened in entry order.
    pub fn flatten_trainable_grads(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for e in self.entries.iter().filter(|e| e.trainable) {
            out.extend_from_slice(e.grad.data());
        }
        out
    }

    /// Writes a flat vector back into the trainable entries (entry order).
    pub fn unflatten_trainable(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.trainable_len() {
            return Err(Error::Dimension(format!(
                "expected {} trainable values, got {}",
                self.trainable_len(),
                flat.len()
            )));
        }
        let mut k = 0;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let n = e.value.numel();
            e.value.data_mut().copy_from_slice(&flat[k..k + n]);
            k += n;
        }
        Ok(())
    }

    /// Names with per-component indices for trainable entries, aligned with
    /// the flattened order (used by gradient-check reports).
    pub fn trainable_labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in self.entries.iter().filter(|e| e.trainable) {
            for i in 0..e.value.numel() {
                out.push(format!("{}[{}]", e.name, i));
            }
        }
        out
    }
}
