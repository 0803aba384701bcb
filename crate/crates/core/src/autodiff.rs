//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::gradient`] walks the nodes backwards from a scalar output and
//! returns one adjoint per node. Nodes are appended through `&self`, so graph
//! construction reads like ordinary arithmetic.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddConst(Var),
    /// Matrix times a 1x1 node.
    ScaleBy(Var, Var),
    /// Matrix plus a broadcast 1xC row.
    AddRow(Var, Var),
    /// Matrix times a broadcast 1xC row.
    MulRow(Var, Var),
    /// Matrix times a broadcast Rx1 column.
    MulCol(Var, Var),
    /// Matrix divided by a broadcast 1xC row.
    DivRow(Var, Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    /// Square root whose derivative is taken at `max(x, floor)`.
    Sqrt(Var, T),
    /// `max(x, 0)`.
    ClampMin0(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    SqDist(Var, Var),
    Cholesky(Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    Tril(Var),
    AddDiag(Var),
    SumLogAbsDiag(Var),
    Hcat(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Rc<[usize]>),
    LogSumExpRows(Var),
    Gather(Var, Rc<[usize]>),
}

#[derive(Debug)]
struct Node<T> {
    value: Rc<Matrix<T>>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A value with no gradient path (identical to a leaf whose adjoint is ignored).
    pub fn constant(&self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Rc<Matrix<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn binary_same(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(what, va.shape(), vb.shape()));
        }
        va.zip_map(&vb, f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn neg(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Adds a constant to every entry.
    pub fn add_const(&self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.shape() != (1, 1) {
            return Err(shape_err("scale_by expects a 1x1 factor", vs.shape(), (1, 1)));
        }
        let v = self.value(a).scale(vs.item());
        Ok(self.push(v, Op::ScaleBy(a, s)))
    }

    fn row_broadcast(&self, a: Var, r: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        let (va, vr) = (self.value(a), self.value(r));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err(what, va.shape(), vr.shape()));
        }
        let row = vr.row(0);
        Ok(Matrix::from_fn(va.rows(), va.cols(), |i, j| f(va[(i, j)], row[j])))
    }

    pub fn add_row(&self, a: Var, r: Var) -> Result<Var> {
        let v = self.row_broadcast(a, r, "add_row", |x, y| x + y)?;
        Ok(self.push(v, Op::AddRow(a, r)))
    }

    pub fn mul_row(&self, a: Var, r: Var) -> Result<Var> {
        let v = self.row_broadcast(a, r, "mul_row", |x, y| x * y)?;
        Ok(self.push(v, Op::MulRow(a, r)))
    }

    pub fn div_row(&self, a: Var, r: Var) -> Result<Var> {
        let v = self.row_broadcast(a, r, "div_row", |x, y| x / y)?;
        Ok(self.push(v, Op::DivRow(a, r)))
    }

    pub fn mul_col(&self, a: Var, c: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(c));
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return Err(shape_err("mul_col", va.shape(), vc.shape()));
        }
        let v = Matrix::from_fn(va.rows(), va.cols(), |i, j| va[(i, j)] * vc[(i, 0)]);
        Ok(self.push(v, Op::MulCol(a, c)))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise square root; negative inputs map to 0 and the derivative
    /// is evaluated at `max(x, floor)` so it stays finite at 0.
    pub fn sqrt(&self, a: Var, floor: T) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()).sqrt());
        self.push(v, Op::Sqrt(a, floor))
    }

    pub fn clamp_min0(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::ClampMin0(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Sum of all entries, as 1x1.
    pub fn sum(&self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Sum over rows: RxC to 1xC.
    pub fn sum_cols(&self, a: Var) -> Var {
        let v = Matrix::row_vector(&self.value(a).col_sums());
        self.push(v, Op::SumCols(a))
    }

    /// Sum over columns: RxC to Rx1.
    pub fn sum_rows(&self, a: Var) -> Var {
        let v = Matrix::column_vector(&self.value(a).row_sums());
        self.push(v, Op::SumRows(a))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` and `b`.
    pub fn sq_dist(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("sq_dist", va.shape(), vb.shape()));
        }
        let v = Matrix::from_fn(va.rows(), vb.rows(), |i, j| {
            let mut s = T::zero();
            for (&x, &y) in va.row(i).iter().zip(vb.row(j)) {
                let d = x - y;
                s = s + d * d;
            }
            s
        });
        Ok(self.push(v, Op::SqDist(a, b)))
    }

    /// Lower Cholesky factor. Only the lower triangle of the input is read.
    pub fn cholesky(&self, a: Var) -> Result<Var> {
        let v = self.value(a).cholesky()?;
        Ok(self.push(v, Op::Cholesky(a)))
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, l: Var, b: Var) -> Result<Var> {
        let v = self.value(l).solve_lower(&self.value(b))?;
        Ok(self.push(v, Op::SolveLower(l, b)))
    }

    /// `L⁻ᵀ B`.
    pub fn solve_lower_t(&self, l: Var, b: Var) -> Result<Var> {
        let v = self.value(l).solve_lower_t(&self.value(b))?;
        Ok(self.push(v, Op::SolveLowerT(l, b)))
    }

    pub fn tril(&self, a: Var) -> Var {
        let v = self.value(a).tril();
        self.push(v, Op::Tril(a))
    }

    /// Adds a constant to the diagonal.
    pub fn add_diag(&self, a: Var, c: T) -> Var {
        let v = self.value(a).add_diag(c);
        self.push(v, Op::AddDiag(a))
    }

    /// `Σᵢ log |aᵢᵢ|`, as 1x1.
    pub fn sum_log_abs_diag(&self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).diag().iter().map(|d| d.abs().ln()).sum());
        self.push(v, Op::SumLogAbsDiag(a))
    }

    pub fn hcat(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Matrix<T>>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Matrix<T>> = values.iter().map(|m| m.as_ref()).collect();
        let v = Matrix::hcat(&refs)?;
        Ok(self.push(v, Op::Hcat(parts.to_vec())))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(shape_err("slice_cols", va.shape(), (start, len)));
        }
        let v = Matrix::from_fn(va.rows(), len, |i, j| va[(i, start + j)]);
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn select_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if idx.iter().any(|&i| i >= va.rows()) {
            return Err(Error::Argument("select_rows index out of range".into()));
        }
        let v = va.select_rows(idx);
        Ok(self.push(v, Op::SelectRows(a, idx.into())))
    }

    /// Row-wise `log Σⱼ exp(aᵢⱼ)`: RxC to Rx1.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let v = Matrix::column_vector(&(0..va.rows()).map(|i| logsumexp(va.row(i))).collect::<Vec<_>>());
        self.push(v, Op::LogSumExpRows(a))
    }

    /// Picks entry `(i, idx[i])` of each row: RxC to Rx1.
    pub fn gather(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if idx.len() != va.rows() || idx.iter().any(|&j| j >= va.cols()) {
            return Err(Error::Argument("gather index out of range".into()));
        }
        let v = Matrix::column_vector(&idx.iter().enumerate().map(|(i, &j)| va[(i, j)]).collect::<Vec<_>>());
        Ok(self.push(v, Op::Gather(a, idx.into())))
    }

    /// Adjoints of every node with respect to the 1x1 node `output`.
    pub fn gradient(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.shape() != (1, 1) {
            return Err(Error::Argument("gradient of a non-scalar node".into()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(T::one()));
        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| -> &Matrix<T> { &nodes[v.0].value };
            let mut acc = |v: Var, d: Matrix<T>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.hadamard(val(*b))?);
                    acc(*b, g.hadamard(val(*a))?);
                }
                Op::Neg(a) => acc(*a, g.map(|x| -x)),
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::AddConst(a) | Op::AddDiag(a) => acc(*a, g),
                Op::ScaleBy(a, s) => {
                    let ds = g.hadamard(val(*a))?.sum();
                    acc(*a, g.scale(val(*s).item()));
                    acc(*s, Matrix::scalar(ds));
                }
                Op::AddRow(a, r) => {
                    acc(*r, Matrix::row_vector(&g.col_sums()));
                    acc(*a, g);
                }
                Op::MulRow(a, r) => {
                    let (va, vr) = (val(*a), val(*r));
                    let row = vr.row(0);
                    let mut dr = vec![T::zero(); row.len()];
                    let mut da = g.clone();
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            dr[j] = dr[j] + g[(i, j)] * va[(i, j)];
                            da[(i, j)] = g[(i, j)] * row[j];
                        }
                    }
                    acc(*a, da);
                    acc(*r, Matrix::row_vector(&dr));
                }
                Op::DivRow(a, r) => {
                    let (va, vr) = (val(*a), val(*r));
                    let row = vr.row(0);
                    let mut dr = vec![T::zero(); row.len()];
                    let mut da = g.clone();
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            da[(i, j)] = g[(i, j)] / row[j];
                            dr[j] = dr[j] - g[(i, j)] * va[(i, j)] / (row[j] * row[j]);
                        }
                    }
                    acc(*a, da);
                    acc(*r, Matrix::row_vector(&dr));
                }
                Op::MulCol(a, c) => {
                    let (va, vc) = (val(*a), val(*c));
                    let mut dc = vec![T::zero(); vc.rows()];
                    let mut da = g.clone();
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            dc[i] = dc[i] + g[(i, j)] * va[(i, j)];
                            da[(i, j)] = g[(i, j)] * vc[(i, 0)];
                        }
                    }
                    acc(*a, da);
                    acc(*c, Matrix::column_vector(&dc));
                }
                Op::Exp(a) => acc(*a, g.hadamard(&node.value)?),
                Op::Log(a) => acc(*a, g.zip_map(val(*a), |gi, x| gi / x)?),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |gi, x| T::two() * gi * x)?),
                Op::Sqrt(a, floor) => {
                    let f = *floor;
                    acc(
                        *a,
                        g.zip_map(val(*a), |gi, x| gi * T::half() / x.max(f).sqrt())?,
                    )
                }
                Op::ClampMin0(a) => acc(
                    *a,
                    g.zip_map(val(*a), |gi, x| if x > T::zero() { gi } else { T::zero() })?,
                ),
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(val(*b))?);
                    acc(*b, val(*a).t_matmul(&g)?);
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Matrix::filled(r, c, g.item()));
                }
                Op::SumCols(a) => {
                    let (r, c) = val(*a).shape();
                    let row = g.row(0).to_vec();
                    acc(*a, Matrix::from_fn(r, c, |_, j| row[j]));
                }
                Op::SumRows(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
                }
                Op::SqDist(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let d = va.cols();
                    let mut da = Matrix::zeros(va.rows(), d);
                    let mut db = Matrix::zeros(vb.rows(), d);
                    for i in 0..va.rows() {
                        for j in 0..vb.rows() {
                            let gij = g[(i, j)];
                            if gij == T::zero() {
                                continue;
                            }
                            let two_g = T::two() * gij;
                            for k in 0..d {
                                let diff = two_g * (va[(i, k)] - vb[(j, k)]);
                                da[(i, k)] = da[(i, k)] + diff;
                                db[(j, k)] = db[(j, k)] - diff;
                            }
                        }
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Cholesky(a) => acc(*a, cholesky_backward(&node.value, &g)?),
                Op::SolveLower(l, b) => {
                    let vl = val(*l);
                    let db = vl.solve_lower_t(&g)?;
                    let dl = db.matmul_t(&node.value)?.map(|x| -x).tril();
                    acc(*l, dl);
                    acc(*b, db);
                }
                Op::SolveLowerT(l, b) => {
                    let vl = val(*l);
                    let db = vl.solve_lower(&g)?;
                    let dl = node.value.matmul_t(&db)?.map(|x| -x).tril();
                    acc(*l, dl);
                    acc(*b, db);
                }
                Op::Tril(a) => acc(*a, g.tril()),
                Op::SumLogAbsDiag(a) => {
                    let va = val(*a);
                    let mut d = Matrix::zeros(va.rows(), va.cols());
                    for i in 0..va.rows().min(va.cols()) {
                        d[(i, i)] = g.item() / va[(i, i)];
                    }
                    acc(*a, d);
                }
                Op::Hcat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        acc(p, Matrix::from_fn(g.rows(), c, |i, j| g[(i, start + j)]));
                        start += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            d[(i, start + j)] = g[(i, j)];
                        }
                    }
                    acc(*a, d);
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[(i, j)] = d[(i, j)] + g[(k, j)];
                        }
                    }
                    acc(*a, d);
                }
                Op::LogSumExpRows(a) => {
                    let va = val(*a);
                    let d = Matrix::from_fn(va.rows(), va.cols(), |i, j| {
                        g[(i, 0)] * (va[(i, j)] - node.value[(i, 0)]).exp()
                    });
                    acc(*a, d);
                }
                Op::Gather(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    for (i, &j) in idx.iter().enumerate() {
                        d[(i, j)] = g[(i, 0)];
                    }
                    acc(*a, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Adjoint of `A` given `L = chol(A)` and `L̄`, symmetrized.
fn cholesky_backward<T: Scalar>(l: &Matrix<T>, lbar: &Matrix<T>) -> Result<Matrix<T>> {
    // P = Φ(Lᵀ L̄): lower triangle with halved diagonal.
    let mut p = l.t_matmul(&lbar.tril())?.tril();
    for i in 0..p.rows() {
        p[(i, i)] = p[(i, i)] * T::half();
    }
    // Ā = L⁻ᵀ P L⁻¹
    let y = l.solve_lower_t(&p.transpose())?.transpose();
    let abar = l.solve_lower_t(&y)?;
    Ok(abar.add(&abar.transpose())?.scale(T::half()))
}

/// Node adjoints produced by [`Tape::gradient`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`; `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix<T> {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}
