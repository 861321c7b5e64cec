use super::kernels as k;
use super::{gemm, Backend, DivBlock, Index, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    Linear { x: Var, w: Var, b: Var, gathered: Vec<(Var, Index)>, relu: bool },
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, rstd: Vec<f64> },
    Gather { x: Var, idx: Index },
    SegmentSum { x: Var, idx: Index },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    AffineCols { x: Var, scale: Vec<f64> },
    Divergence { x: Var, blocks: Vec<DivBlock> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of every registered parameter into `acc[id]`.
    pub fn accumulate_params(&self, acc: &mut [Matrix]) -> Result<()> {
        for &(id, v) in &self.params {
            let Some(g) = self.get(v) else { continue };
            let slot = acc.get_mut(id).ok_or(Error::Index {
                op: "accumulate_params",
                index: id,
                len: 0,
            })?;
            if slot.shape() != g.shape() {
                return Err(Error::shape("accumulate_params", format!("{:?} vs {:?}", slot.shape(), g.shape())));
            }
            slot.add_assign(g);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Adds `op(a) * op(b)` into the gradient slot of `v`.
fn accumulate_product(grads: &mut [Option<Matrix>], v: Var, a: &Matrix, ta: bool, b: &Matrix, tb: bool, shape: (usize, usize)) {
    match &mut grads[v.0] {
        Some(acc) => gemm(1.0, a, ta, b, tb, 1.0, acc),
        slot => {
            let mut out = Matrix::zeros(shape.0, shape.1);
            gemm(1.0, a, ta, b, tb, 0.0, &mut out);
            *slot = Some(out);
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked, for tests and tools.
    pub fn variable(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let root = self.val(out);
        if root.shape() != (1, 1) {
            return Err(Error::shape("backward", format!("output is {:?}, not scalar", root.shape())));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::scalar(1.0));
        let mut params = Vec::new();
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if let Op::Param(id) = node.op {
                params.push((id, Var(i)));
            }
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(node, g, &mut grads)?;
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, g: Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    accumulate_product(grads, *a, &g, false, bv, true, av.shape());
                }
                if self.wants(*b) {
                    accumulate_product(grads, *b, av, true, &g, false, bv.shape());
                }
            }
            Op::AddN(xs) => {
                let wanted: Vec<Var> = xs.iter().copied().filter(|x| self.wants(*x)).collect();
                if let Some((last, rest)) = wanted.split_last() {
                    for x in rest {
                        match &mut grads[x.0] {
                            Some(acc) => acc.add_assign(&g),
                            slot => *slot = Some(g.clone()),
                        }
                    }
                    accumulate(grads, *last, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    accumulate(grads, *b, k::scale(&g, -1.0));
                }
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Linear { x, w, b, gathered, relu } => {
                let mut g = g;
                if *relu {
                    for (gi, yi) in g.data.iter_mut().zip(&node.value.data) {
                        if *yi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                }
                let (xv, wv) = (self.val(*x), self.val(*w));
                if self.wants(*x) {
                    accumulate_product(grads, *x, &g, false, wv, true, xv.shape());
                }
                if self.wants(*w) {
                    accumulate_product(grads, *w, xv, true, &g, false, wv.shape());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, column_sums(&g));
                }
                for (p, idx) in gathered {
                    if self.wants(*p) {
                        let pv = self.val(*p);
                        let slot = grads[p.0].get_or_insert_with(|| Matrix::zeros(pv.rows, pv.cols));
                        k::segment_sum_into(slot, &g, idx);
                    }
                }
            }
            Op::Relu(x) => {
                let mut g = g;
                for (gi, yi) in g.data.iter_mut().zip(&node.value.data) {
                    if *yi <= 0.0 {
                        *gi = 0.0;
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.val(*gamma);
                let c = xhat.cols;
                if self.wants(*gamma) && c > 0 {
                    let mut dg = Matrix::zeros(1, c);
                    for (gr, xh) in g.data.chunks_exact(c).zip(xhat.data.chunks_exact(c)) {
                        for ((d, gv), h) in dg.data.iter_mut().zip(gr).zip(xh) {
                            *d += gv * h;
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, column_sums(&g));
                }
                if self.wants(*x) && c > 0 {
                    let mut dx = Matrix::zeros(g.rows, c);
                    let mut dxhat = vec![0.0; c];
                    for (((gr, xh), out), rs) in g
                        .data
                        .chunks_exact(c)
                        .zip(xhat.data.chunks_exact(c))
                        .zip(dx.data.chunks_exact_mut(c))
                        .zip(rstd)
                    {
                        for ((d, gv), gm) in dxhat.iter_mut().zip(gr).zip(&gam.data) {
                            *d = gv * gm;
                        }
                        let m1 = k::lane_sum(&dxhat, |d| d) / c as f64;
                        let m2 = k::lane_sum2(&dxhat, xh, |d, h| d * h) / c as f64;
                        for ((o, d), h) in out.iter_mut().zip(&dxhat).zip(xh) {
                            *o = rs * (d - m1 - h * m2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gather { x, idx } => {
                let rows = self.val(*x).rows;
                accumulate(grads, *x, k::segment_sum(&g, idx, rows)?);
            }
            Op::SegmentSum { x, idx } => {
                accumulate(grads, *x, k::gather_rows(&g, idx)?);
            }
            Op::SliceRows { x, start } => {
                let xv = self.val(*x);
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                dx.data[start * xv.cols..(start + g.rows) * xv.cols].copy_from_slice(&g.data);
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(xs) => {
                let mut c0 = 0;
                for x in xs {
                    let cols = self.val(*x).cols;
                    if self.wants(*x) {
                        let mut dx = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            dx.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        accumulate(grads, *x, dx);
                    }
                    c0 += cols;
                }
            }
            Op::Square(x) => {
                let mut g = g;
                for (gi, xi) in g.data.iter_mut().zip(&self.val(*x).data) {
                    *gi *= 2.0 * xi;
                }
                accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let xv = self.val(*x);
                accumulate(grads, *x, Matrix::filled(xv.rows, xv.cols, g.data[0]));
            }
            Op::Mean(x) => {
                let xv = self.val(*x);
                accumulate(grads, *x, Matrix::filled(xv.rows, xv.cols, g.data[0] / xv.len() as f64));
            }
            Op::Scale(x, s) => accumulate(grads, *x, k::scale(&g, *s)),
            Op::MulConst(x, c) => accumulate(grads, *x, k::mul_const(&g, c)?),
            Op::AffineCols { x, scale } => {
                let zeros = vec![0.0; scale.len()];
                accumulate(grads, *x, k::affine_cols(&g, scale, &zeros)?);
            }
            Op::Divergence { x, blocks } => {
                accumulate(grads, *x, k::divergence_adjoint(&g, blocks)?);
            }
        }
        Ok(())
    }
}

impl Backend for Tape {
    type V = Var;

    fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn param(&mut self, id: usize, m: &Matrix) -> Var {
        self.nodes.push(Node {
            value: m.clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Matrix {
        self.val(*v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = k::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::MatMul(*a, *b), &[*a, *b]))
    }

    fn add_n(&mut self, xs: &[&Var]) -> Result<Var> {
        let y = k::add_n(&xs.iter().map(|v| self.val(**v)).collect::<Vec<_>>())?;
        let vars: Vec<Var> = xs.iter().map(|v| **v).collect();
        Ok(self.push(y, Op::AddN(vars.clone()), &vars))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = k::sub(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Sub(*a, *b), &[*a, *b]))
    }

    fn linear_gathered(&mut self, x: &Var, w: &Var, b: &Var, gathered: &[(&Var, &Index)], relu: bool) -> Result<Var> {
        let g: Vec<(&Matrix, &[usize])> = gathered.iter().map(|(p, i)| (self.val(**p), &***i)).collect();
        let y = k::linear_gathered(self.val(*x), self.val(*w), self.val(*b), &g, relu)?;
        let mut inputs = vec![*x, *w, *b];
        inputs.extend(gathered.iter().map(|(p, _)| **p));
        Ok(self.push(
            y,
            Op::Linear {
                x: *x,
                w: *w,
                b: *b,
                gathered: gathered.iter().map(|(p, i)| (**p, (*i).clone())).collect(),
                relu,
            },
            &inputs,
        ))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = k::relu(self.val(*x));
        self.push(y, Op::Relu(*x), &[*x])
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let (y, xhat, rstd) = k::layer_norm(self.val(*x), self.val(*gamma), self.val(*beta))?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x: *x,
                gamma: *gamma,
                beta: *beta,
                xhat,
                rstd,
            },
            &[*x, *gamma, *beta],
        ))
    }

    fn gather_rows(&mut self, x: &Var, idx: &Index) -> Result<Var> {
        let y = k::gather_rows(self.val(*x), idx)?;
        Ok(self.push(y, Op::Gather { x: *x, idx: idx.clone() }, &[*x]))
    }

    fn segment_sum(&mut self, x: &Var, idx: &Index, n: usize) -> Result<Var> {
        let y = k::segment_sum(self.val(*x), idx, n)?;
        Ok(self.push(y, Op::SegmentSum { x: *x, idx: idx.clone() }, &[*x]))
    }

    fn slice_rows(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let y = k::slice_rows(self.val(*x), start, end)?;
        Ok(self.push(y, Op::SliceRows { x: *x, start }, &[*x]))
    }

    fn concat_cols(&mut self, xs: &[&Var]) -> Result<Var> {
        let y = k::concat_cols(&xs.iter().map(|v| self.val(**v)).collect::<Vec<_>>())?;
        let vars: Vec<Var> = xs.iter().map(|v| **v).collect();
        Ok(self.push(y, Op::ConcatCols(vars.clone()), &vars))
    }

    fn square(&mut self, x: &Var) -> Var {
        let y = k::square(self.val(*x));
        self.push(y, Op::Square(*x), &[*x])
    }

    fn sum(&mut self, x: &Var) -> Var {
        let y = k::sum(self.val(*x));
        self.push(y, Op::Sum(*x), &[*x])
    }

    fn mean(&mut self, x: &Var) -> Result<Var> {
        let y = k::mean(self.val(*x))?;
        Ok(self.push(y, Op::Mean(*x), &[*x]))
    }

    fn scale(&mut self, x: &Var, s: f64) -> Var {
        let y = k::scale(self.val(*x), s);
        self.push(y, Op::Scale(*x, s), &[*x])
    }

    fn mul_const(&mut self, x: &Var, c: &Matrix) -> Result<Var> {
        let y = k::mul_const(self.val(*x), c)?;
        Ok(self.push(y, Op::MulConst(*x, c.clone()), &[*x]))
    }

    fn affine_cols(&mut self, x: &Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let y = k::affine_cols(self.val(*x), scale, shift)?;
        Ok(self.push(
            y,
            Op::AffineCols {
                x: *x,
                scale: scale.to_vec(),
            },
            &[*x],
        ))
    }

    fn divergence(&mut self, x: &Var, blocks: &[DivBlock]) -> Result<Var> {
        let y = k::divergence(self.val(*x), blocks)?;
        Ok(self.push(
            y,
            Op::Divergence {
                x: *x,
                blocks: blocks.to_vec(),
            },
            &[*x],
        ))
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Eval;
    use crate::divop::build_divergence_operator;
    use crate::meshgen::{generate_mesh, HolePlateSpec};

    type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Compares reverse-mode gradients of `sum(f(inputs) * r)` against
    /// central differences, returning the worst norm-wise relative error.
    fn check(inputs: &[Matrix], f: &Build, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_shape = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|m| t.variable(m.clone())).collect();
            let y = f(&mut t, &vars).unwrap();
            t.value(&y).shape()
        };
        let r = random(&mut rng, out_shape.0, out_shape.1);
        let loss = |ins: &[Matrix]| -> (Tape, Vec<Var>, Var) {
            let mut t = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|m| t.variable(m.clone())).collect();
            let y = f(&mut t, &vars).unwrap();
            let w = t.mul_const(&y, &r).unwrap();
            let s = t.sum(&w);
            (t, vars, s)
        };
        let (tape, vars, s) = loss(inputs);
        let grads = tape.backward(s).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (i, m) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows, m.cols));
            let mut numeric = vec![0.0; m.len()];
            for j in 0..m.len() {
                let mut plus = inputs.to_vec();
                plus[i].data[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data[j] -= h;
                let (tp, _, sp) = loss(&plus);
                let (tm, _, sm) = loss(&minus);
                numeric[j] = (tp.value(&sp).data[0] - tm.value(&sm).data[0]) / (2.0 * h);
            }
            let diff: Vec<f64> = analytic.data.iter().zip(&numeric).map(|(a, b)| a - b).collect();
            let scale = norm(&analytic.data).max(norm(&numeric));
            if scale > 0.0 {
                worst = worst.max(norm(&diff) / scale);
            }
        }
        worst
    }

    fn shapes(seed: u64) -> Vec<(usize, usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5)
            .map(|_| (rng.random_range(1..7), rng.random_range(1..6), rng.random_range(1..5)))
            .collect()
    }

    fn assert_op(name: &str, make: impl Fn(&mut ChaCha8Rng, (usize, usize, usize)) -> (Vec<Matrix>, Box<Build>)) {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 31);
        for (case, dims) in shapes(name.len() as u64).into_iter().enumerate() {
            let (inputs, f) = make(&mut rng, dims);
            let err = check(&inputs, f.as_ref(), case as u64);
            assert!(err <= 1e-5, "{name} case {case} {dims:?}: relative error {err:e}");
        }
    }

    #[test]
    fn fd_matmul() {
        assert_op("matmul", |rng, (m, k, n)| {
            (vec![random(rng, m, k), random(rng, k, n)], Box::new(|t, v| t.matmul(&v[0], &v[1])))
        });
    }

    #[test]
    fn fd_add_sub() {
        assert_op("add_n", |rng, (m, k, _)| {
            (
                vec![random(rng, m, k), random(rng, m, k), random(rng, m, k)],
                Box::new(|t, v| {
                    let s = t.add_n(&[&v[0], &v[1], &v[0]])?;
                    t.sub(&s, &v[2])
                }),
            )
        });
    }

    #[test]
    fn fd_linear() {
        for relu in [false, true] {
            assert_op(if relu { "linear_relu" } else { "linear" }, move |rng, (m, k, n)| {
                (
                    vec![random(rng, m, k), random(rng, k, n), random(rng, 1, n)],
                    Box::new(move |t, v| t.linear(&v[0], &v[1], &v[2], relu)),
                )
            });
        }
    }

    #[test]
    fn fd_linear_gathered() {
        assert_op("linear_gathered", |rng, (m, k, n)| {
            let rows = m + 4;
            let ia: Index = (0..rows).map(|_| rng.random_range(0..m)).collect::<Vec<_>>().into();
            let ib: Index = (0..rows).map(|_| rng.random_range(0..m + 1)).collect::<Vec<_>>().into();
            (
                vec![
                    random(rng, rows, k),
                    random(rng, k, n),
                    random(rng, 1, n),
                    random(rng, m, n),
                    random(rng, m + 1, n),
                ],
                Box::new(move |t, v| t.linear_gathered(&v[0], &v[1], &v[2], &[(&v[3], &ia), (&v[4], &ib)], true)),
            )
        });
    }

    #[test]
    fn linear_gathered_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 7, 3);
        let w = random(&mut rng, 3, 4);
        let b = random(&mut rng, 1, 4);
        let p = random(&mut rng, 5, 4);
        let idx: Vec<usize> = vec![0, 4, 4, 2, 1, 3, 0];
        let fused = k::linear_gathered(&x, &w, &b, &[(&p, &idx)], false).unwrap();
        let plain = k::linear(&x, &w, &b, false).unwrap();
        let gathered = k::gather_rows(&p, &idx).unwrap();
        let sum = k::add_n(&[&plain, &gathered]).unwrap();
        assert!(fused.max_abs_diff(&sum) < 1e-14);
        assert!(k::linear_gathered(&x, &w, &b, &[(&p, &[0, 1])], false).is_err());
        assert!(k::linear_gathered(&x, &w, &b, &[(&p, &[9; 7])], false).is_err());
    }

    #[test]
    fn fd_relu_square_scale() {
        assert_op("relu_square", |rng, (m, k, _)| {
            (
                vec![random(rng, m, k)],
                Box::new(|t, v| {
                    let r = t.relu(&v[0]);
                    let s = t.square(&r);
                    let q = t.square(&v[0]);
                    let q = t.scale(&q, -0.5);
                    t.add(&s, &q)
                }),
            )
        });
    }

    #[test]
    fn fd_layer_norm() {
        assert_op("layer_norm", |rng, (m, k, _)| {
            let k = k + 1;
            (
                vec![random(rng, m, k), random(rng, 1, k), random(rng, 1, k)],
                Box::new(|t, v| t.layer_norm(&v[0], &v[1], &v[2])),
            )
        });
    }

    #[test]
    fn fd_gather_segment_slice() {
        assert_op("gather_segment", |rng, (m, k, n)| {
            let idx: Index = (0..m + 3).map(|_| rng.random_range(0..m)).collect::<Vec<_>>().into();
            let seg: Index = (0..m + 3).map(|_| rng.random_range(0..n)).collect::<Vec<_>>().into();
            (
                vec![random(rng, m, k)],
                Box::new(move |t, v| {
                    let g = t.gather_rows(&v[0], &idx)?;
                    let s = t.segment_sum(&g, &seg, n)?;
                    let a = t.slice_rows(&g, 1, m + 2)?;
                    let a = t.square(&a);
                    let a = t.sum(&a);
                    let b = t.mean(&s)?;
                    t.add(&a, &b)
                }),
            )
        });
    }

    #[test]
    fn fd_concat_affine_mul() {
        assert_op("concat_affine", |rng, (m, k, n)| {
            let c = random(rng, m, k + n);
            let sc: Vec<f64> = (0..k + n).map(|_| rng.random_range(0.5..2.0)).collect();
            let sh: Vec<f64> = (0..k + n).map(|_| rng.random_range(-1.0..1.0)).collect();
            (
                vec![random(rng, m, k), random(rng, m, n)],
                Box::new(move |t, v| {
                    let x = t.concat_cols(&[&v[0], &v[1]])?;
                    let x = t.affine_cols(&x, &sc, &sh)?;
                    let x = t.mul_const(&x, &c)?;
                    Ok(t.square(&x))
                }),
            )
        });
    }

    #[test]
    fn fd_divergence() {
        let mesh = generate_mesh(&HolePlateSpec::hole_free(1.0, 0.25)).unwrap();
        let op = Arc::new(build_divergence_operator(&mesh).unwrap());
        let n = op.n;
        assert_op("divergence", move |rng, _| {
            let blocks = vec![
                DivBlock {
                    op: op.clone(),
                    offset: 0,
                },
                DivBlock {
                    op: op.clone(),
                    offset: n + 1,
                },
            ];
            (
                vec![random(rng, 2 * n + 1, 3)],
                Box::new(move |t, v| {
                    let d = t.divergence(&v[0], &blocks)?;
                    Ok(t.square(&d))
                }),
            )
        });
    }

    #[test]
    fn derivative_of_square_at_three() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::scalar(3.0));
        let y = t.matmul(&x, &x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![6.0]);
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut t = Tape::new();
        let w = t.param(0, &Matrix::scalar(2.0));
        let w2 = t.param(0, &Matrix::scalar(2.0));
        let x = t.constant(Matrix::scalar(5.0));
        let a = t.matmul(&x, &w).unwrap();
        let b = t.matmul(&a, &w2).unwrap();
        let gr = t.backward(b).unwrap();
        assert!(gr.get(x).is_none());
        let mut acc = vec![Matrix::zeros(1, 1)];
        gr.accumulate_params(&mut acc).unwrap();
        assert_eq!(acc[0].data, vec![20.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::zeros(2, 1));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn eval_matches_tape_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 7, 5);
        let w = random(&mut rng, 5, 4);
        let b = random(&mut rng, 1, 4);
        let g = random(&mut rng, 1, 4);
        let idx: Index = vec![0, 3, 6, 2, 2].into();
        fn run<B: Backend>(bk: &mut B, x: &Matrix, w: &Matrix, b: &Matrix, g: &Matrix, idx: &Index) -> Matrix {
            let x = bk.constant(x.clone());
            let w = bk.param(0, w);
            let b = bk.param(1, b);
            let g = bk.param(2, g);
            let h = bk.linear(&x, &w, &b, true).unwrap();
            let h = bk.layer_norm(&h, &g, &b).unwrap();
            let e = bk.gather_rows(&h, idx).unwrap();
            let s = bk.segment_sum(&e, idx, 7).unwrap();
            bk.value(&s).clone()
        }
        let a = run(&mut Tape::new(), &x, &w, &b, &g, &idx);
        let e = run(&mut Eval::new(), &x, &w, &b, &g, &idx);
        assert_eq!(a, e);
    }
}
