use std::rc::Rc;

use super::kernels as k;
use super::{Backend, DivBlock, Index, Matrix};
use crate::error::Result;

/// Value-only backend. Intermediate matrices are reference counted and freed
/// when the model code drops them.
#[derive(Debug, Default)]
pub struct Eval;

impl Eval {
    pub fn new() -> Self {
        Eval
    }
}

type V = Rc<Matrix>;

impl Backend for Eval {
    type V = V;

    fn constant(&mut self, m: Matrix) -> V {
        Rc::new(m)
    }

    fn param(&mut self, _id: usize, m: &Matrix) -> V {
        Rc::new(m.clone())
    }

    fn value<'a>(&'a self, v: &'a V) -> &'a Matrix {
        v
    }

    fn matmul(&mut self, a: &V, b: &V) -> Result<V> {
        k::matmul(a, b).map(Rc::new)
    }

    fn add_n(&mut self, xs: &[&V]) -> Result<V> {
        let ms: Vec<&Matrix> = xs.iter().map(|v| v.as_ref()).collect();
        k::add_n(&ms).map(Rc::new)
    }

    fn sub(&mut self, a: &V, b: &V) -> Result<V> {
        k::sub(a, b).map(Rc::new)
    }

    fn linear_gathered(&mut self, x: &V, w: &V, b: &V, gathered: &[(&V, &Index)], relu: bool) -> Result<V> {
        let g: Vec<(&Matrix, &[usize])> = gathered.iter().map(|(p, i)| (&***p, &***i)).collect();
        k::linear_gathered(x, w, b, &g, relu).map(Rc::new)
    }

    fn relu(&mut self, x: &V) -> V {
        Rc::new(k::relu(x))
    }

    fn layer_norm(&mut self, x: &V, gamma: &V, beta: &V) -> Result<V> {
        k::layer_norm(x, gamma, beta).map(|(y, _, _)| Rc::new(y))
    }

    fn gather_rows(&mut self, x: &V, idx: &Index) -> Result<V> {
        k::gather_rows(x, idx).map(Rc::new)
    }

    fn segment_sum(&mut self, x: &V, idx: &Index, n: usize) -> Result<V> {
        k::segment_sum(x, idx, n).map(Rc::new)
    }

    fn slice_rows(&mut self, x: &V, start: usize, end: usize) -> Result<V> {
        k::slice_rows(x, start, end).map(Rc::new)
    }

    fn concat_cols(&mut self, xs: &[&V]) -> Result<V> {
        let ms: Vec<&Matrix> = xs.iter().map(|v| v.as_ref()).collect();
        k::concat_cols(&ms).map(Rc::new)
    }

    fn square(&mut self, x: &V) -> V {
        Rc::new(k::square(x))
    }

    fn sum(&mut self, x: &V) -> V {
        Rc::new(k::sum(x))
    }

    fn mean(&mut self, x: &V) -> Result<V> {
        k::mean(x).map(Rc::new)
    }

    fn scale(&mut self, x: &V, s: f64) -> V {
        Rc::new(k::scale(x, s))
    }

    fn mul_const(&mut self, x: &V, c: &Matrix) -> Result<V> {
        k::mul_const(x, c).map(Rc::new)
    }

    fn affine_cols(&mut self, x: &V, scale: &[f64], shift: &[f64]) -> Result<V> {
        k::affine_cols(x, scale, shift).map(Rc::new)
    }

    fn divergence(&mut self, x: &V, blocks: &[DivBlock]) -> Result<V> {
        k::divergence(x, blocks).map(Rc::new)
    }
}
