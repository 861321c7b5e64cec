//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Model code is written against [`Backend`]. [`Tape`] records every op for
//! a backward pass; [`Eval`] only computes values and releases them as soon
//! as they go out of scope, which keeps inference on large meshes lean.

mod eval;
pub mod kernels;
mod matrix;
mod optim;
mod tape;

use std::sync::Arc;

pub use eval::Eval;
pub use kernels::DivBlock;
pub use matrix::{gemm, Matrix};
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;

/// Shared index list for gathers and segment sums.
pub type Index = Arc<[usize]>;

pub trait Backend {
    type V: Clone;

    fn constant(&mut self, m: Matrix) -> Self::V;
    /// Registers trainable tensor `id`.
    fn param(&mut self, id: usize, m: &Matrix) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Matrix;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_n(&mut self, xs: &[&Self::V]) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, relu: bool) -> Result<Self::V> {
        self.linear_gathered(x, w, b, &[], relu)
    }
    /// Linear layer plus row-gathered addends, see [`kernels::linear_gathered`].
    fn linear_gathered(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: &Self::V,
        gathered: &[(&Self::V, &Index)],
        relu: bool,
    ) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V>;
    fn gather_rows(&mut self, x: &Self::V, idx: &Index) -> Result<Self::V>;
    fn segment_sum(&mut self, x: &Self::V, idx: &Index, n: usize) -> Result<Self::V>;
    fn slice_rows(&mut self, x: &Self::V, start: usize, end: usize) -> Result<Self::V>;
    fn concat_cols(&mut self, xs: &[&Self::V]) -> Result<Self::V>;
    fn square(&mut self, x: &Self::V) -> Self::V;
    fn sum(&mut self, x: &Self::V) -> Self::V;
    fn mean(&mut self, x: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, s: f64) -> Self::V;
    fn mul_const(&mut self, x: &Self::V, c: &Matrix) -> Result<Self::V>;
    fn affine_cols(&mut self, x: &Self::V, scale: &[f64], shift: &[f64]) -> Result<Self::V>;
    fn divergence(&mut self, x: &Self::V, blocks: &[DivBlock]) -> Result<Self::V>;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.add_n(&[a, b])
    }
}
