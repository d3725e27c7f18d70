//! Tensor value type: shape, row-major storage, and gradient bookkeeping.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Real;

/// Errors surfaced by the tensor engine.
#[derive(Debug, Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape { op: &'static str, expected: &'static str, got: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    BadAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: index {index} out of range ({limit} available)")]
    IndexOutOfRange { op: &'static str, index: usize, limit: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("normalized axis needs extent >= 2, got {extent}")]
    DegenerateChannel { extent: usize },
    #[error("non-finite value at flat index {index} ({context})")]
    NonFinite { context: String, index: usize },
    #[error("parameter {name:?} already registered")]
    DuplicateParam { name: String },
    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward function of one op: maps the output gradient to one optional
/// gradient buffer per input, aligned with the input list.
pub(crate) type BackFn<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>> + Send + Sync>;

pub(crate) struct Node<S: Real> {
    pub inputs: Vec<Tensor<S>>,
    pub back: BackFn<S>,
}

pub(crate) enum GradKind<S: Real> {
    /// Constant: never receives a gradient.
    None,
    /// Differentiation root (parameter or probed input).
    Leaf,
    /// Result of an op over at least one gradient-tracking input.
    Node(Node<S>),
}

pub(crate) struct Inner<S: Real> {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<S>>,
    pub grad: GradKind<S>,
}

/// Dense row-major tensor. Cloning is cheap (shared storage).
pub struct Tensor<S: Real> {
    pub(crate) inner: Arc<Inner<S>>,
}

impl<S: Real> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { inner: Arc::clone(&self.inner) }
    }
}

impl<S: Real> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.inner.grad {
            GradKind::None => "const",
            GradKind::Leaf => "leaf",
            GradKind::Node(_) => "node",
        };
        write!(f, "Tensor#{}({:?}, {})", self.inner.id, self.inner.shape, kind)
    }
}

impl<S: Real> Tensor<S> {
    fn with_kind(shape: Vec<usize>, data: Vec<S>, grad: GradKind<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner { id: fresh_id(), shape, data: Arc::new(data), grad }),
        }
    }

    /// Builds a constant tensor, checking that `data` fills `shape` exactly.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self, NumericError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericError::BadShape {
                op: "from_vec",
                expected: "data length matching the shape product",
                got: shape,
            });
        }
        Ok(Self::with_kind(shape, data, GradKind::None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::with_kind(shape.to_vec(), vec![S::zero(); n], GradKind::None)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self::with_kind(shape.to_vec(), vec![value; n], GradKind::None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Self::with_kind(Vec::new(), vec![value], GradKind::None)
    }

    /// Marks this tensor as a differentiation root. Results of ops keep their
    /// graph node and are returned unchanged.
    pub fn requires_grad(self) -> Self {
        match self.inner.grad {
            GradKind::None => {
                let shape = self.inner.shape.clone();
                let data = Arc::clone(&self.inner.data);
                Tensor {
                    inner: Arc::new(Inner { id: fresh_id(), shape, data, grad: GradKind::Leaf }),
                }
            }
            _ => self,
        }
    }

    /// Constant copy of this tensor's values, detached from the graph.
    pub fn detach(&self) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                grad: GradKind::None,
            }),
        }
    }

    pub(crate) fn from_node(shape: Vec<usize>, data: Vec<S>, inputs: Vec<Tensor<S>>, back: BackFn<S>) -> Self {
        if inputs.iter().any(Tensor::tracks_grad) {
            Self::with_kind(shape, data, GradKind::Node(Node { inputs, back }))
        } else {
            Self::with_kind(shape, data, GradKind::None)
        }
    }

    /// Graph node construction with shared (not copied) storage.
    pub(crate) fn from_node_shared(
        shape: Vec<usize>,
        data: Arc<Vec<S>>,
        inputs: Vec<Tensor<S>>,
        back: BackFn<S>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = if inputs.iter().any(Tensor::tracks_grad) {
            GradKind::Node(Node { inputs, back })
        } else {
            GradKind::None
        };
        Tensor { inner: Arc::new(Inner { id: fresh_id(), shape, data, grad }) }
    }

    pub(crate) fn tracks_grad(&self) -> bool {
        !matches!(self.inner.grad, GradKind::None)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.grad, GradKind::Leaf)
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.inner.data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<S, NumericError> {
        if self.numel() != 1 {
            return Err(NumericError::NotScalar { shape: self.inner.shape.to_vec() });
        }
        Ok(self.inner.data[0])
    }

    /// Validation pass for the all-finite invariant.
    pub fn check_finite(&self, context: &str) -> Result<(), NumericError> {
        for (i, v) in self.inner.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(NumericError::NonFinite { context: context.to_string(), index: i });
            }
        }
        Ok(())
    }

}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let bad = Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]);
        assert!(matches!(bad, Err(NumericError::BadShape { .. })));
        let ok = Tensor::<f32>::from_vec(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(ok.shape(), &[2, 3]);
        assert_eq!(ok.numel(), 6);
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::<f64>::scalar(4.25);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item().unwrap(), 4.25);
    }

    #[test]
    fn item_rejects_non_scalars() {
        let t = Tensor::<f32>::zeros(&[2]);
        assert!(matches!(t.item(), Err(NumericError::NotScalar { .. })));
    }

    #[test]
    fn check_finite_reports_the_offending_index() {
        let t = Tensor::<f32>::from_vec(vec![3], vec![1.0, f32::NAN, 2.0]).unwrap();
        match t.check_finite("unit") {
            Err(NumericError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        Tensor::<f32>::ones(&[4]).check_finite("unit").unwrap();
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn tensors_are_send_and_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Tensor<f32>>();
        assert_send_sync::<Tensor<f64>>();
    }
}
