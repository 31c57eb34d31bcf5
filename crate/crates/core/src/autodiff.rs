//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] owns every value computed in a forward pass. Operations append a
//! record holding the output value plus whatever the backward rule needs, and
//! return a [`Var`] handle. Because records are only ever appended, the tape
//! is already in topological order and [`Tape::backward`] is a single reverse
//! scan.
//!
//! ```
//! use manifold_gcd::{autodiff::Tape, linalg::Matrix};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Matrix::from_f64_rows(&[&[1.0, 2.0]]).unwrap());
//! let y = tape.dot_rows(x, x).unwrap();
//! let loss = tape.sum(y);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).as_slice(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Adds a 1×c row to every row of `a`.
    AddRow(Var, Var),
    Scale(Var, T),
    Hadamard(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    RowSoftmax(Var),
    /// Row-wise log-softmax; `true` entries of the mask are excluded and read 0.
    RowLogSoftmax(Var, Option<Vec<bool>>),
    L2NormalizeRows(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
    RowSelect(Var, Vec<usize>),
    DotRows(Var, Var),
    ConcatRows(Vec<Var>),
    /// Caches `U_r · V_rᵀ` for the backward pass.
    NuclearNorm(Var, Matrix<T>),
}

#[derive(Clone, Debug)]
struct Record<T> {
    value: Matrix<T>,
    op: Op<T>,
    /// False for constants and for anything computed only from constants.
    tracked: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    records: Vec<Record<T>>,
    grads: Option<Vec<Matrix<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { records: Vec::new(), grads: None }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.records[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.records[v.0].value.shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    /// Accumulated gradient, all zeros before [`Tape::backward`] or after
    /// [`Tape::reset_grads`].
    pub fn grad(&self, v: Var) -> Matrix<T> {
        match &self.grads {
            Some(g) => g[v.0].clone(),
            None => {
                let (r, c) = self.shape(v);
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Copies `v`'s value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, tracked: bool) -> Var {
        self.records.push(Record { value, op, tracked });
        Var(self.records.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.records[v.0].tracked)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), t))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMulT(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(&[a]);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), t))
    }

    /// Broadcasts the 1×c `row` over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::shape("add_row", format!("{:?} onto {r}x{c}", self.shape(row))));
        }
        let bias = self.value(row).row(0).to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            value.row_mut(i).iter_mut().zip(&bias).for_each(|(x, &b)| *x += b);
        }
        let t = self.tracked(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), t))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let t = self.tracked(&[a]);
        self.push(value, Op::Scale(a, s), t)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Hadamard(a, b), t))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.exp());
        if value.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("exp"));
        }
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::Exp(a), t))
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).as_slice().iter().find(|&&x| x <= T::zero()) {
            return Err(Error::Graph(format!("log of non-positive value {bad}")));
        }
        let value = self.value(a).map(|x| x.ln());
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::Log(a), t))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let t = self.tracked(&[a]);
        self.push(value, Op::Relu(a), t)
    }

    /// Max-subtracted softmax over each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i), None);
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::RowSoftmax(a), t)
    }

    /// Row-wise log-softmax. Entries flagged in `exclude` (row-major, same
    /// shape as `a`) are left out of the normalizer and read as 0. Every row
    /// needs at least one included entry.
    pub fn row_log_softmax(&mut self, a: Var, exclude: Option<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(mask) = &exclude {
            if mask.len() != r * c {
                return Err(Error::shape("row_log_softmax", format!("mask of {} for {r}x{c}", mask.len())));
            }
            if (0..r).any(|i| mask[i * c..(i + 1) * c].iter().all(|&m| m)) {
                return Err(Error::invalid("row_log_softmax: a row excludes every entry"));
            }
        }
        let mut value = self.value(a).clone();
        for i in 0..r {
            let row_mask = exclude.as_ref().map(|m| &m[i * c..(i + 1) * c]);
            log_softmax_in_place(value.row_mut(i), row_mask);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::RowLogSoftmax(a, exclude), t))
    }

    /// Scales each row to unit L2 norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let norms = self.value(a).row_norms();
        if let Some(i) = norms.iter().position(|&n| n <= T::min_positive_value()) {
            return Err(Error::Graph(format!("l2_normalize_rows: row {i} has zero norm")));
        }
        let mut value = self.value(a).clone();
        for (i, &n) in norms.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::L2NormalizeRows(a, norms), t))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let t = self.tracked(&[a]);
        self.push(value, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = T::from_count((m.rows() * m.cols()).max(1));
        let value = Matrix::filled(1, 1, m.sum() / n);
        let t = self.tracked(&[a]);
        self.push(value, Op::Mean(a), t)
    }

    pub fn row_select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(idx)?;
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::RowSelect(a, idx.to_vec()), t))
    }

    /// Row-wise dot products, as an r×1 column.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot_rows")?;
        let (va, vb) = (self.value(a), self.value(b));
        let dots: Vec<T> = (0..va.rows()).map(|i| crate::linalg::dot(va.row(i), vb.row(i))).collect();
        let value = Matrix::from_vec(dots.len(), 1, dots)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::DotRows(a, b), t))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of nothing"));
        }
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats)?;
        let t = self.tracked(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), t))
    }

    /// Sum of singular values. Backward contributes `U·Vᵀ`, the thin-SVD
    /// subgradient; at repeated or zero singular values this is one valid
    /// subgradient among many.
    pub fn nuclear_norm(&mut self, a: Var) -> Result<Var> {
        self.nuclear_norm_top(a, None)
    }

    /// Sum of the `keep` largest singular values (all of them for `None`).
    pub fn nuclear_norm_top(&mut self, a: Var, keep: Option<usize>) -> Result<Var> {
        let f = svd(self.value(a))?;
        let r = keep.unwrap_or(f.s.len()).min(f.s.len());
        let total: T = f.s[..r].iter().copied().sum();
        let (m, n) = (f.u.rows(), f.vt.cols());
        let factor = Matrix::from_fn(m, n, |i, j| (0..r).map(|k| f.u[(i, k)] * f.vt[(k, j)]).sum());
        let t = self.tracked(&[a]);
        Ok(self.push(Matrix::filled(1, 1, total), Op::NuclearNorm(a, factor), t))
    }

    /// Reverse sweep from a 1×1 `loss`. A second call without
    /// [`Tape::reset_grads`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Graph("backward called twice without reset_grads".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Graph(format!("backward from non-scalar node of shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Matrix<T>> =
            self.records.iter().map(|r| Matrix::zeros(r.value.rows(), r.value.cols())).collect();
        grads[loss.0][(0, 0)] = T::one();

        for idx in (0..=loss.0).rev() {
            let rec = &self.records[idx];
            if !rec.tracked {
                continue;
            }
            let g = std::mem::replace(&mut grads[idx], Matrix::zeros(0, 0));
            if g.as_slice().iter().all(|&x| x == T::zero()) {
                grads[idx] = g;
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = g;
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Matrix<T>]) -> Result<()> {
        let rec = &self.records[idx];
        let out = &rec.value;
        let val = |v: Var| &self.records[v.0].value;
        match &rec.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(val(*b))?;
                let gb = val(*a).t_matmul(g)?;
                grads[a.0].axpy(T::one(), &ga)?;
                grads[b.0].axpy(T::one(), &gb)?;
            }
            Op::MatMulT(a, b) => {
                let ga = g.matmul(val(*b))?;
                let gb = g.t_matmul(val(*a))?;
                grads[a.0].axpy(T::one(), &ga)?;
                grads[b.0].axpy(T::one(), &gb)?;
            }
            Op::Transpose(a) => grads[a.0].axpy(T::one(), &g.transpose())?,
            Op::Add(a, b) => {
                grads[a.0].axpy(T::one(), g)?;
                grads[b.0].axpy(T::one(), g)?;
            }
            Op::Sub(a, b) => {
                grads[a.0].axpy(T::one(), g)?;
                grads[b.0].axpy(-T::one(), g)?;
            }
            Op::AddRow(a, row) => {
                grads[a.0].axpy(T::one(), g)?;
                let gr = &mut grads[row.0];
                for i in 0..g.rows() {
                    gr.row_mut(0).iter_mut().zip(g.row(i)).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Scale(a, s) => grads[a.0].axpy(*s, g)?,
            Op::Hadamard(a, b) => {
                let ga = g.hadamard(val(*b))?;
                let gb = g.hadamard(val(*a))?;
                grads[a.0].axpy(T::one(), &ga)?;
                grads[b.0].axpy(T::one(), &gb)?;
            }
            Op::Exp(a) => grads[a.0].axpy(T::one(), &g.hadamard(out)?)?,
            Op::Log(a) => grads[a.0].axpy(T::one(), &g.zip_with(val(*a), "log backward", |gi, x| gi / x)?)?,
            Op::Relu(a) => {
                let ga = g.zip_with(val(*a), "relu backward", |gi, x| if x > T::zero() { gi } else { T::zero() })?;
                grads[a.0].axpy(T::one(), &ga)?;
            }
            Op::RowSoftmax(a) => {
                let ga = &mut grads[a.0];
                for i in 0..out.rows() {
                    let (y, gi) = (out.row(i), g.row(i));
                    let inner = crate::linalg::dot(y, gi);
                    for ((d, &yj), &gj) in ga.row_mut(i).iter_mut().zip(y).zip(gi) {
                        *d += yj * (gj - inner);
                    }
                }
            }
            Op::RowLogSoftmax(a, mask) => {
                let c = out.cols();
                let ga = &mut grads[a.0];
                for i in 0..out.rows() {
                    let row_mask = mask.as_ref().map(|m| &m[i * c..(i + 1) * c]);
                    let included = |j: usize| row_mask.is_none_or(|m| !m[j]);
                    let gsum: T = (0..c).filter(|&j| included(j)).map(|j| g[(i, j)]).sum();
                    for j in (0..c).filter(|&j| included(j)) {
                        ga[(i, j)] += g[(i, j)] - out[(i, j)].exp() * gsum;
                    }
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let ga = &mut grads[a.0];
                for (i, &n) in norms.iter().enumerate() {
                    let (y, gi) = (out.row(i), g.row(i));
                    let inner = crate::linalg::dot(y, gi);
                    for ((d, &yj), &gj) in ga.row_mut(i).iter_mut().zip(y).zip(gi) {
                        *d += (gj - yj * inner) / n;
                    }
                }
            }
            Op::Sum(a) => {
                let s = g[(0, 0)];
                grads[a.0].as_mut_slice().iter_mut().for_each(|x| *x += s);
            }
            Op::Mean(a) => {
                let n = T::from_count(grads[a.0].as_slice().len().max(1));
                let s = g[(0, 0)] / n;
                grads[a.0].as_mut_slice().iter_mut().for_each(|x| *x += s);
            }
            Op::RowSelect(a, idx) => {
                let ga = &mut grads[a.0];
                for (r, &src) in idx.iter().enumerate() {
                    ga.row_mut(src).iter_mut().zip(g.row(r)).for_each(|(x, &y)| *x += y);
                }
            }
            Op::DotRows(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                for i in 0..va.rows() {
                    let gi = g[(i, 0)];
                    grads[a.0].row_mut(i).iter_mut().zip(vb.row(i)).for_each(|(x, &y)| *x += gi * y);
                    grads[b.0].row_mut(i).iter_mut().zip(va.row(i)).for_each(|(x, &y)| *x += gi * y);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(*p).rows();
                    let slice = g.slice_rows(start, start + rows)?;
                    grads[p.0].axpy(T::one(), &slice)?;
                    start += rows;
                }
            }
            Op::NuclearNorm(a, factor) => grads[a.0].axpy(g[(0, 0)], factor)?,
        }
        Ok(())
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T], exclude: Option<&[bool]>) {
    let included = |j: usize| exclude.is_none_or(|m| !m[j]);
    let max = (0..row.len()).filter(|&j| included(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if included(j) {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = T::zero();
        }
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn log_softmax_in_place<T: Scalar>(row: &mut [T], exclude: Option<&[bool]>) {
    let included = |j: usize| exclude.is_none_or(|m| !m[j]);
    let max = (0..row.len()).filter(|&j| included(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
    let lse = max
        + (0..row.len())
            .filter(|&j| included(j))
            .map(|j| (row[j] - max).exp())
            .sum::<T>()
            .ln();
    for (j, x) in row.iter_mut().enumerate() {
        *x = if included(j) { *x - lse } else { T::zero() };
    }
}

/// Central finite-difference gradient of `f` at `x`.
///
/// Used by gradient-check tests; `f` rebuilds its graph from scratch for every
/// probe so the reverse-mode path is not involved.
pub fn finite_difference<T: Scalar>(
    x: &Matrix<T>,
    step: T,
    mut f: impl FnMut(&Matrix<T>) -> Result<T>,
) -> Result<Matrix<T>> {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let up = f(&probe)?;
        probe.as_mut_slice()[k] = orig - step;
        let down = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        grad.as_mut_slice()[k] = (up - down) / (T::lit(2.0) * step);
    }
    Ok(grad)
}

/// Worst relative error between an analytic and a numeric gradient, skipping
/// coordinates where both are below `floor` in magnitude.
pub fn max_relative_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>, floor: f64) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .filter(|(a, n)| a.abs() >= floor || n.abs() >= floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}
