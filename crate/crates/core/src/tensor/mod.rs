//! Dense tensor arithmetic with reverse-mode automatic differentiation,
//! the Adam optimizer and cosine schedule, and the checkpoint format.
//!
//! Storage is 32-bit, row-major, NCHW. Reductions accumulate in 64-bit and
//! scalar results carry a 64-bit shadow value so finite-difference oracles
//! are not limited by f32 rounding of the loss.

mod checkpoint;
mod conv;
#[cfg(test)]
pub(crate) mod gradcheck;
mod optim;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{
    absorb_grads, cosine_lr, Adam, AdamState, Parameter, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub use tape::{GradTape, Gradients, NodeId};

use crate::error::{Error, Result};
use std::sync::Arc;

/// Dense rank-1..4 real array. Cloning is cheap (shared storage).
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    node: Option<NodeId>,
    scalar_f64: Option<f64>,
}

impl Tensor {
    /// Builds a tensor, validating the shape contract.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Dimension(format!("rank must be 1..=4, got {}", shape.len())));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("all extents must be >= 1, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data), node: None, scalar_f64: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("valid shape")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: f32) -> Self {
        let mut t = Tensor::new(&[1], vec![value]).expect("valid shape");
        t.scalar_f64 = Some(value as f64);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are >= 1 by construction
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    /// Whether this tensor is tracked on a tape.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: Option<NodeId>) -> Self {
        self.node = node;
        self
    }

    pub(crate) fn with_scalar_f64(mut self, v: Option<f64>) -> Self {
        self.scalar_f64 = v;
        self
    }

    /// Mutable view of the stored values; copies only when the storage is
    /// shared (e.g. while a tape still references it).
    pub(crate) fn data_mut(&mut self) -> &mut Vec<f32> {
        self.scalar_f64 = None;
        Arc::make_mut(&mut self.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    /// 64-bit shadow of a scalar result when the producing chain kept one;
    /// falls back to the widened stored value.
    pub fn item_f64(&self) -> f64 {
        assert_eq!(self.len(), 1, "item_f64() requires a scalar tensor");
        self.scalar_f64.unwrap_or(self.data[0] as f64)
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// N extent for rank-4 tensors (leading extent otherwise).
    pub fn n(&self) -> usize {
        self.shape[0]
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "{op}: shapes differ, {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub(crate) fn require_rank4(t: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    if t.shape.len() != 4 {
        return Err(Error::Dimension(format!("{op}: expected NCHW tensor, got rank {}", t.shape.len())));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2], t.shape[3]))
}

/// Shape-equality check with a descriptive dimension error.
pub fn same_shape_pub(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    same_shape(a, b, op)
}

/// (N, C, H, W) of a rank-4 tensor, or a dimension error.
pub fn rank4_dims(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    require_rank4(t, "rank4_dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_contract_enforced() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(&[2, 3], vec![0.0; 5]), Err(Error::Dimension(_))));
        assert!(matches!(Tensor::new(&[2, 0], vec![]), Err(Error::Dimension(_))));
        assert!(matches!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn scalar_carries_f64_shadow() {
        let s = Tensor::scalar(0.125);
        assert_eq!(s.item(), 0.125);
        assert_eq!(s.item_f64(), 0.125);
    }
}
