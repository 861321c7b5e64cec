//! Forward kernels shared by the recording tape and the eval backend, so
//! both produce bitwise-identical values.

use std::sync::Arc;

use super::matrix::{gemm, Matrix};
use crate::divop::DivergenceOperator;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One sparse divergence operator acting on rows `offset..offset + op.n`.
#[derive(Debug, Clone)]
pub struct DivBlock {
    pub op: Arc<DivergenceOperator>,
    pub offset: usize,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_row_vector(op: &'static str, v: &Matrix, cols: usize) -> Result<()> {
    if v.rows != 1 || v.cols != cols {
        return Err(Error::shape(op, format!("expected 1x{cols}, got {:?}", v.shape())));
    }
    Ok(())
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    Ok(c)
}

pub fn add_n(xs: &[&Matrix]) -> Result<Matrix> {
    let first = xs.first().ok_or_else(|| Error::shape("add_n", "no operands"))?;
    let mut out = (*first).clone();
    for x in &xs[1..] {
        same_shape("add_n", &out, x)?;
        out.add_assign(x);
    }
    Ok(out)
}

pub fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    same_shape("sub", a, b)?;
    let mut out = a.clone();
    for (o, v) in out.data.iter_mut().zip(&b.data) {
        *o -= v;
    }
    Ok(out)
}

/// `x * w + b`, optionally followed by relu.
pub fn linear(x: &Matrix, w: &Matrix, b: &Matrix, relu: bool) -> Result<Matrix> {
    linear_gathered(x, w, b, &[], relu)
}

/// `x * w + b + sum_k p_k[idx_k]`, optionally followed by relu. Row `i` of
/// each gathered term is row `idx_k[i]` of `p_k`.
pub fn linear_gathered(x: &Matrix, w: &Matrix, b: &Matrix, gathered: &[(&Matrix, &[usize])], relu: bool) -> Result<Matrix> {
    if x.cols != w.rows {
        return Err(Error::shape("linear", format!("{:?} x {:?}", x.shape(), w.shape())));
    }
    check_row_vector("linear bias", b, w.cols)?;
    for (p, idx) in gathered {
        if p.cols != w.cols || idx.len() != x.rows {
            return Err(Error::shape(
                "linear gathered",
                format!("{:?} with {} indices for {} rows", p.shape(), idx.len(), x.rows),
            ));
        }
        if let Some(&j) = idx.iter().find(|&&j| j >= p.rows) {
            return Err(Error::Index {
                op: "linear gathered",
                index: j,
                len: p.rows,
            });
        }
    }
    let mut y = Matrix::zeros(x.rows, w.cols);
    for r in 0..y.rows {
        y.row_mut(r).copy_from_slice(&b.data);
    }
    gemm(1.0, x, false, w, false, 1.0, &mut y);
    let c = y.cols;
    if c > 0 {
        for (r, out) in y.data.chunks_exact_mut(c).enumerate() {
            for (p, idx) in gathered {
                for (o, v) in out.iter_mut().zip(p.row(idx[r])) {
                    *o += v;
                }
            }
            if relu {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }
    Ok(y)
}

/// Adds row `i` of `x` into row `idx[i]` of `out`.
pub fn segment_sum_into(out: &mut Matrix, x: &Matrix, idx: &[usize]) {
    let c = x.cols;
    for (i, &j) in idx.iter().enumerate() {
        let src = &x.data[i * c..(i + 1) * c];
        for (o, v) in out.row_mut(j).iter_mut().zip(src) {
            *o += v;
        }
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = v.max(0.0);
    }
    y
}

/// Sum of `f(a[i], b[i])` with four interleaved accumulators combined in a
/// fixed order.
#[inline]
pub fn lane_sum2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| f(*x, *y)).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += f(x[l], y[l]);
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn lane_sum(a: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    lane_sum2(a, a, |x, _| f(x))
}

/// Row-wise normalization. Returns the output, the normalized input and the
/// per-row reciprocal standard deviation.
pub fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>)> {
    check_row_vector("layer_norm gamma", gamma, x.cols)?;
    check_row_vector("layer_norm beta", beta, x.cols)?;
    let c = x.cols;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(x.rows);
    if c > 0 {
        for ((row, xh), yr) in x.data.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(y.chunks_exact_mut(c)) {
            let mean = lane_sum(row, |v| v) / c as f64;
            let var = lane_sum(row, |v| (v - mean) * (v - mean)) / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for ((h, v), (o, (g, b))) in xh
                .iter_mut()
                .zip(row)
                .zip(yr.iter_mut().zip(gamma.data.iter().zip(&beta.data)))
            {
                *h = (v - mean) * rs;
                *o = *h * g + b;
            }
        }
    }
    Ok((
        Matrix {
            rows: x.rows,
            cols: c,
            data: y,
        },
        Matrix {
            rows: x.rows,
            cols: c,
            data: xhat,
        },
        rstd,
    ))
}

pub fn gather_rows(x: &Matrix, idx: &[usize]) -> Result<Matrix> {
    let mut out = Matrix::zeros(idx.len(), x.cols);
    for (i, &j) in idx.iter().enumerate() {
        if j >= x.rows {
            return Err(Error::Index {
                op: "gather_rows",
                index: j,
                len: x.rows,
            });
        }
        out.row_mut(i).copy_from_slice(x.row(j));
    }
    Ok(out)
}

/// Row `i` of `x` is added into row `idx[i]` of an `n`-row output.
pub fn segment_sum(x: &Matrix, idx: &[usize], n: usize) -> Result<Matrix> {
    if idx.len() != x.rows {
        return Err(Error::shape(
            "segment_sum",
            format!("{} indices for {} rows", idx.len(), x.rows),
        ));
    }
    let mut out = Matrix::zeros(n, x.cols);
    for (i, &j) in idx.iter().enumerate() {
        if j >= n {
            return Err(Error::Index {
                op: "segment_sum",
                index: j,
                len: n,
            });
        }
        let src = &x.data[i * x.cols..(i + 1) * x.cols];
        for (o, v) in out.row_mut(j).iter_mut().zip(src) {
            *o += v;
        }
    }
    Ok(out)
}

pub fn slice_rows(x: &Matrix, start: usize, end: usize) -> Result<Matrix> {
    if start > end || end > x.rows {
        return Err(Error::shape("slice_rows", format!("{start}..{end} of {} rows", x.rows)));
    }
    Ok(Matrix {
        rows: end - start,
        cols: x.cols,
        data: x.data[start * x.cols..end * x.cols].to_vec(),
    })
}

pub fn concat_cols(xs: &[&Matrix]) -> Result<Matrix> {
    let first = xs.first().ok_or_else(|| Error::shape("concat_cols", "no operands"))?;
    let rows = first.rows;
    if xs.iter().any(|x| x.rows != rows) {
        return Err(Error::shape("concat_cols", "row counts differ"));
    }
    let cols: usize = xs.iter().map(|x| x.cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut c0 = 0;
        let dst = out.row_mut(r);
        for x in xs {
            dst[c0..c0 + x.cols].copy_from_slice(x.row(r));
            c0 += x.cols;
        }
    }
    Ok(out)
}

pub fn square(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in &mut y.data {
        *v *= *v;
    }
    y
}

pub fn sum(x: &Matrix) -> Matrix {
    Matrix::scalar(x.data.iter().sum())
}

pub fn mean(x: &Matrix) -> Result<Matrix> {
    if x.is_empty() {
        return Err(Error::shape("mean", "empty matrix"));
    }
    Ok(Matrix::scalar(x.data.iter().sum::<f64>() / x.len() as f64))
}

pub fn scale(x: &Matrix, s: f64) -> Matrix {
    let mut y = x.clone();
    for v in &mut y.data {
        *v *= s;
    }
    y
}

/// Element-wise product with a constant matrix of the same shape.
pub fn mul_const(x: &Matrix, c: &Matrix) -> Result<Matrix> {
    same_shape("mul_const", x, c)?;
    let mut y = x.clone();
    for (v, k) in y.data.iter_mut().zip(&c.data) {
        *v *= k;
    }
    Ok(y)
}

/// Per-column `x * scale + shift`.
pub fn affine_cols(x: &Matrix, scale: &[f64], shift: &[f64]) -> Result<Matrix> {
    if scale.len() != x.cols || shift.len() != x.cols {
        return Err(Error::shape("affine_cols", format!("{} columns", x.cols)));
    }
    let mut y = x.clone();
    for r in 0..y.rows {
        for (c, v) in y.row_mut(r).iter_mut().enumerate() {
            *v = *v * scale[c] + shift[c];
        }
    }
    Ok(y)
}

fn check_blocks(op: &'static str, rows: usize, blocks: &[DivBlock]) -> Result<()> {
    for b in blocks {
        if b.offset + b.op.n > rows {
            return Err(Error::shape(
                op,
                format!("block at {} with {} nodes exceeds {rows} rows", b.offset, b.op.n),
            ));
        }
    }
    Ok(())
}

/// Maps `N x 3` nodal stresses to `N x 2` nodal divergence, block by block.
/// Rows not covered by any block are zero.
pub fn divergence(x: &Matrix, blocks: &[DivBlock]) -> Result<Matrix> {
    if x.cols != 3 {
        return Err(Error::shape("divergence", format!("expected 3 columns, got {}", x.cols)));
    }
    check_blocks("divergence", x.rows, blocks)?;
    let mut out = Matrix::zeros(x.rows, 2);
    for b in blocks {
        let n = b.op.n;
        let mut stacked = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                stacked[c * n + i] = x.get(b.offset + i, c);
            }
        }
        let d = b.op.apply_stacked(&stacked)?;
        for i in 0..n {
            out.set(b.offset + i, 0, d[i]);
            out.set(b.offset + i, 1, d[n + i]);
        }
    }
    Ok(out)
}

/// Adjoint of [`divergence`].
pub fn divergence_adjoint(g: &Matrix, blocks: &[DivBlock]) -> Result<Matrix> {
    check_blocks("divergence_adjoint", g.rows, blocks)?;
    let mut out = Matrix::zeros(g.rows, 3);
    for b in blocks {
        let n = b.op.n;
        let mut stacked = vec![0.0; 2 * n];
        for i in 0..n {
            stacked[i] = g.get(b.offset + i, 0);
            stacked[n + i] = g.get(b.offset + i, 1);
        }
        let mut back = vec![0.0; 3 * n];
        b.op.matrix.transpose_matvec_add(&stacked, &mut back);
        for i in 0..n {
            for c in 0..3 {
                out.data[(b.offset + i) * 3 + c] += back[c * n + i];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_segment_sum_examples() {
        let x = Matrix::new(1, 3, vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data, vec![0.0, 0.0, 3.0]);
        let x = Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(segment_sum(&x, &[0, 0, 1], 2).unwrap().data, vec![3.0, 3.0]);
        assert!(matches!(segment_sum(&x, &[0, 0, 2], 2), Err(Error::Index { .. })));
        assert!(matches!(gather_rows(&x, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = Matrix::filled(1, 4, 2.5);
        let (y, _, _) = layer_norm(&x, &Matrix::filled(1, 4, 1.0), &Matrix::zeros(1, 4)).unwrap();
        assert!(y.data.iter().all(|v| *v == 0.0));
        let x = Matrix::new(1, 2, vec![1.0, 3.0]).unwrap();
        let (y, _, _) = layer_norm(&x, &Matrix::filled(1, 2, 1.0), &Matrix::zeros(1, 2)).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data[0] + expect).abs() < 1e-15 && (y.data[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
        assert!(linear(&a, &Matrix::zeros(3, 2), &Matrix::zeros(1, 3), false).is_err());
        assert!(concat_cols(&[&a, &Matrix::zeros(1, 1)]).is_err());
        assert!(slice_rows(&a, 1, 3).is_err());
        assert!(divergence(&Matrix::zeros(2, 2), &[]).is_err());
    }
}
