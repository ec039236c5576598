//! Layer-level forward/backward contract shared by every trainable piece.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor5;

/// A named parameter buffer paired with its gradient buffer.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

pub trait Module<T: Scalar> {
    /// Runs the layer. With `keep_state` the inputs needed by
    /// [`Module::backward`] are retained.
    fn forward(&mut self, x: &Tensor5<T>, keep_state: bool) -> Result<Tensor5<T>>;

    /// Overwrites every parameter gradient and returns the input gradient.
    fn backward(&mut self, grad_out: &Tensor5<T>) -> Result<Tensor5<T>>;

    /// Parameters in a stable order (checkpoints and optimizers rely on it).
    fn params(&mut self) -> Vec<ParamMut<'_, T>>;

    fn clear_state(&mut self) {}
}

/// Copies of every gradient buffer, keyed by parameter name.
pub fn collect_grads<T: Scalar, M: Module<T> + ?Sized>(module: &mut M) -> Vec<(String, Vec<T>)> {
    module.params().into_iter().map(|p| (p.name, p.grad.to_vec())).collect()
}
