//! Quadratic energies over assignment matrices.
//!
//! An assignment matrix `X` has one row per source point and one column per
//! target point. Every module flattens it in column-major order: entry
//! `(i, j)` of a `k x n` matrix lives at stack index `j * k + i`. Energies have
//! the form `E(x) = x' W x + c' x + d` over that stacked vector.

use std::fmt;
use std::sync::Arc;

use ndarray::linalg::general_mat_vec_mul;
use ndarray::{Array2, ArrayBase, ArrayView1, ArrayViewMut1, Data, Ix2, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// Stack index of entry `(i, j)` in a matrix with `rows` rows.
#[inline]
pub fn stack_index(i: usize, j: usize, rows: usize) -> usize {
    j * rows + i
}

/// Column stack of `m`.
pub fn stack<T: Scalar, S: Data<Elem = T>>(m: &ArrayBase<S, Ix2>) -> Vec<T> {
    m.t().iter().copied().collect()
}

/// Inverse of [`stack`].
pub fn unstack<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Result<Array2<T>> {
    if x.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            found: x.len(),
        });
    }
    Ok(Array2::from_shape_vec((rows, cols).f(), x.to_vec()).expect("shape checked"))
}

/// Symmetric linear map given only through matrix-vector products.
pub trait LinearOperator<T>: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `W x` into `y`. Both slices have length [`LinearOperator::dim`].
    fn apply(&self, x: &[T], y: &mut [T]);
}

/// Adapts a closure into a [`LinearOperator`].
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<T, F> LinearOperator<T> for FnOperator<F>
where
    F: Fn(&[T], &mut [T]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        (self.f)(x, y)
    }
}

/// The quadratic part `W` of an energy.
#[derive(Clone)]
pub enum QuadraticOperator<T: Scalar> {
    /// Explicit symmetric matrix.
    Dense(Arc<Array2<T>>),
    /// Matrix-free operator.
    Operator(Arc<dyn LinearOperator<T>>),
    /// `base` restricted to permissible entries, plus `rho * |x_forbidden|^2`.
    SparsePattern {
        base: Box<QuadraticOperator<T>>,
        forbidden: Arc<Vec<bool>>,
        rho: T,
    },
}

impl<T: Scalar> fmt::Debug for QuadraticOperator<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dense(m) => write!(f, "Dense({}x{})", m.nrows(), m.ncols()),
            Self::Operator(op) => write!(f, "Operator(dim={})", op.dim()),
            Self::SparsePattern {
                base,
                forbidden,
                rho,
            } => {
                let count = forbidden.iter().filter(|&&b| b).count();
                write!(f, "SparsePattern({base:?}, forbidden={count}, rho={rho})")
            }
        }
    }
}

impl<T: Scalar> QuadraticOperator<T> {
    /// Dense operator; the input is symmetrized as `(W + W') / 2`.
    pub fn dense(w: Array2<T>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::DimensionMismatch {
                expected: w.nrows(),
                found: w.ncols(),
            });
        }
        let half = T::of(0.5);
        let sym = (&w + &w.t()).mapv(|v| v * half);
        Ok(Self::Dense(Arc::new(sym)))
    }

    pub fn operator(op: impl LinearOperator<T> + 'static) -> Self {
        Self::Operator(Arc::new(op))
    }

    pub fn from_fn<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&[T], &mut [T]) + Send + Sync + 'static,
    {
        Self::operator(FnOperator::new(dim, f))
    }

    pub fn zero(dim: usize) -> Self {
        Self::from_fn(dim, |_: &[T], y: &mut [T]| y.fill(T::zero()))
    }

    pub fn sparse_pattern(base: QuadraticOperator<T>, forbidden: Vec<bool>, rho: T) -> Result<Self> {
        if forbidden.len() != base.dim() {
            return Err(Error::DimensionMismatch {
                expected: base.dim(),
                found: forbidden.len(),
            });
        }
        Ok(Self::SparsePattern {
            base: Box::new(base),
            forbidden: Arc::new(forbidden),
            rho,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Dense(m) => m.nrows(),
            Self::Operator(op) => op.dim(),
            Self::SparsePattern { base, .. } => base.dim(),
        }
    }

    /// `y = W x`.
    pub fn apply(&self, x: &[T], y: &mut [T]) {
        debug_assert_eq!(x.len(), self.dim());
        debug_assert_eq!(y.len(), self.dim());
        match self {
            Self::Dense(m) => {
                let xv = ArrayView1::from(x);
                let mut yv = ArrayViewMut1::from(y);
                general_mat_vec_mul(T::one(), m.as_ref(), &xv, T::zero(), &mut yv);
            }
            Self::Operator(op) => op.apply(x, y),
            Self::SparsePattern {
                base,
                forbidden,
                rho,
            } => match base.as_ref() {
                Self::Dense(m) => {
                    // only permissible rows/columns are touched
                    let allowed: Vec<usize> = (0..x.len()).filter(|&p| !forbidden[p]).collect();
                    for (p, yp) in y.iter_mut().enumerate() {
                        *yp = if forbidden[p] { *rho * x[p] } else { T::zero() };
                    }
                    for &p in &allowed {
                        let row = m.row(p);
                        y[p] = allowed.iter().fold(T::zero(), |acc, &q| acc + row[q] * x[q]);
                    }
                }
                other => {
                    let masked: Vec<T> = x
                        .iter()
                        .zip(forbidden.iter())
                        .map(|(&v, &f)| if f { T::zero() } else { v })
                        .collect();
                    other.apply(&masked, y);
                    for (p, yp) in y.iter_mut().enumerate() {
                        if forbidden[p] {
                            *yp = *rho * x[p];
                        }
                    }
                }
            },
        }
    }

    pub fn apply_vec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); x.len()];
        self.apply(x, &mut y);
        y
    }

    /// Materializes `W` column by column.
    pub fn to_dense(&self) -> Array2<T> {
        if let Self::Dense(m) = self {
            return m.as_ref().clone();
        }
        let dim = self.dim();
        let mut out = Array2::zeros((dim, dim));
        let mut e = vec![T::zero(); dim];
        let mut col = vec![T::zero(); dim];
        for q in 0..dim {
            e[q] = T::one();
            self.apply(&e, &mut col);
            for p in 0..dim {
                out[[p, q]] = col[p];
            }
            e[q] = T::zero();
        }
        out
    }
}

/// `E(x) = x' W x + c' x + d` over `k x n` assignment matrices.
#[derive(Clone, Debug)]
pub struct EnergySpec<T: Scalar> {
    pub k: usize,
    pub n: usize,
    pub quadratic: QuadraticOperator<T>,
    pub c: Vec<T>,
    pub d: T,
}

impl<T: Scalar> EnergySpec<T> {
    pub fn new(k: usize, n: usize, quadratic: QuadraticOperator<T>, c: Vec<T>, d: T) -> Result<Self> {
        if k == 0 || n == 0 {
            return Err(Error::InvalidInput("empty assignment matrix".into()));
        }
        if quadratic.dim() != k * n {
            return Err(Error::DimensionMismatch {
                expected: k * n,
                found: quadratic.dim(),
            });
        }
        if c.len() != k * n {
            return Err(Error::DimensionMismatch {
                expected: k * n,
                found: c.len(),
            });
        }
        Ok(Self {
            k,
            n,
            quadratic,
            c,
            d,
        })
    }

    /// Pure quadratic energy (`c = 0`, `d = 0`).
    pub fn quadratic_only(k: usize, n: usize, quadratic: QuadraticOperator<T>) -> Result<Self> {
        Self::new(k, n, quadratic, vec![T::zero(); k * n], T::zero())
    }

    pub fn dim(&self) -> usize {
        self.k * self.n
    }

    pub fn is_square(&self) -> bool {
        self.k == self.n
    }

    pub fn has_linear_term(&self) -> bool {
        self.c.iter().any(|v| *v != T::zero())
    }

    fn check_len(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// `x' W x + c' x + d`.
    pub fn eval(&self, x: &[T]) -> Result<T> {
        self.check_len(x)?;
        let wx = self.quadratic.apply_vec(x);
        Ok(dot(x, &wx) + dot(&self.c, x) + self.d)
    }

    /// `E(x) - a |x|^2 + a n`, which agrees with `E` on every 0/1 point of the
    /// coupling polytope (those have exactly `n` unit entries).
    pub fn eval_shifted(&self, x: &[T], a: T) -> Result<T> {
        if self.k > self.n {
            return Err(Error::InvalidInput(format!(
                "more sources ({}) than targets ({})",
                self.k, self.n
            )));
        }
        let e = self.eval(x)?;
        Ok(e - a * dot(x, x) + a * T::of_usize(self.n))
    }

    pub fn eval_assignment(&self, p: &Permutation) -> Result<T> {
        if p.k() != self.k || p.n() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                found: p.k(),
            });
        }
        self.eval(&p.to_stack())
    }

    /// Adds `extra` to the linear coefficients.
    pub fn with_added_linear(mut self, extra: &[T]) -> Result<Self> {
        self.check_len(extra)?;
        for (c, &e) in self.c.iter_mut().zip(extra) {
            *c += e;
        }
        Ok(self)
    }

    /// Largest `|<u, W v> - <v, W u>|` over random unit pairs.
    pub fn symmetry_defect(&self, samples: usize, seed: u64) -> T {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.dim();
        let mut worst = T::zero();
        for _ in 0..samples {
            let u: Vec<T> = (0..dim).map(|_| T::of(rng.random::<f64>() - 0.5)).collect();
            let v: Vec<T> = (0..dim).map(|_| T::of(rng.random::<f64>() - 0.5)).collect();
            let wu = self.quadratic.apply_vec(&u);
            let wv = self.quadratic.apply_vec(&v);
            let scale = (dot(&u, &u) * dot(&v, &v)).sqrt();
            let defect = (dot(&u, &wv) - dot(&v, &wu)).abs() / scale;
            worst = worst.max(defect);
        }
        worst
    }
}

/// Injective map from sources to targets, stored as the target of each source.
/// With `k == n` it is a permutation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation {
    assignment: Vec<usize>,
    n: usize,
}

/// Rows of an injective matching; same representation as [`Permutation`].
pub type InjectiveAssignment = Permutation;

impl Permutation {
    pub fn new(assignment: Vec<usize>, n: usize) -> Result<Self> {
        if assignment.len() > n {
            return Err(Error::InvalidInput(format!(
                "{} sources cannot map injectively into {n} targets",
                assignment.len()
            )));
        }
        let mut seen = vec![false; n];
        for &t in &assignment {
            if t >= n {
                return Err(Error::InvalidInput(format!("target {t} out of range 0..{n}")));
            }
            if std::mem::replace(&mut seen[t], true) {
                return Err(Error::InvalidInput(format!("target {t} used twice")));
            }
        }
        Ok(Self { assignment, n })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            assignment: (0..n).collect(),
            n,
        }
    }

    pub fn k(&self) -> usize {
        self.assignment.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn into_assignment(self) -> Vec<usize> {
        self.assignment
    }

    pub fn target(&self, source: usize) -> usize {
        self.assignment[source]
    }

    pub fn is_bijection(&self) -> bool {
        self.k() == self.n
    }

    pub fn to_stack<T: Scalar>(&self) -> Vec<T> {
        let k = self.k();
        let mut x = vec![T::zero(); k * self.n];
        for (i, &j) in self.assignment.iter().enumerate() {
            x[stack_index(i, j, k)] = T::one();
        }
        x
    }

    pub fn to_matrix<T: Scalar>(&self) -> Array2<T> {
        let mut m = Array2::zeros((self.k(), self.n));
        for (i, &j) in self.assignment.iter().enumerate() {
            m[[i, j]] = T::one();
        }
        m
    }
}

/// Row and column marginals of a coupling polytope.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalSpec<T: Scalar> {
    pub rows: Vec<T>,
    pub cols: Vec<T>,
}

impl<T: Scalar> MarginalSpec<T> {
    pub fn new(rows: Vec<T>, cols: Vec<T>) -> Result<Self> {
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::InvalidInput("empty marginals".into()));
        }
        if rows.iter().chain(&cols).any(|v| !(v.is_finite() && *v > T::zero())) {
            return Err(Error::InvalidInput("marginals must be positive and finite".into()));
        }
        let rm: T = rows.iter().copied().sum();
        let cm: T = cols.iter().copied().sum();
        if (rm - cm).abs() > T::of(1e-9) * rm.max(cm) {
            return Err(Error::InfeasibleMarginals {
                row_mass: rm.to_f64_lossy(),
                col_mass: cm.to_f64_lossy(),
            });
        }
        Ok(Self { rows, cols })
    }

    /// Unit row and column sums on an `n x n` matrix.
    pub fn doubly_stochastic(n: usize) -> Self {
        Self {
            rows: vec![T::one(); n],
            cols: vec![T::one(); n],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn total_mass(&self) -> T {
        self.cols.iter().copied().sum()
    }

    /// The product coupling `r c' / mass`, feasible and strictly positive.
    pub fn uniform_coupling(&self) -> Coupling<T> {
        let mass = self.total_mass();
        let (m, n) = self.shape();
        let values = Array2::from_shape_fn((m, n), |(i, j)| self.rows[i] * self.cols[j] / mass);
        Coupling {
            values,
            marginals: self.clone(),
        }
    }

    /// Largest relative deviation of the line sums of `values` from the marginals.
    pub fn deviation<S: Data<Elem = T>>(&self, values: &ArrayBase<S, Ix2>) -> T {
        let mut worst = T::zero();
        for (i, row) in values.outer_iter().enumerate() {
            let s: T = row.iter().copied().sum();
            worst = worst.max((s - self.rows[i]).abs() / self.rows[i]);
        }
        for (j, col) in values.columns().into_iter().enumerate() {
            let s: T = col.iter().copied().sum();
            worst = worst.max((s - self.cols[j]).abs() / self.cols[j]);
        }
        worst
    }
}

/// Nonnegative matrix with prescribed marginals.
#[derive(Clone, Debug)]
pub struct Coupling<T: Scalar> {
    pub values: Array2<T>,
    pub marginals: MarginalSpec<T>,
}

impl<T: Scalar> Coupling<T> {
    /// Validates nonnegativity and marginals to relative tolerance `tol`.
    pub fn new(values: Array2<T>, marginals: MarginalSpec<T>, tol: T) -> Result<Self> {
        if values.dim() != marginals.shape() {
            return Err(Error::DimensionMismatch {
                expected: marginals.rows.len() * marginals.cols.len(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= T::zero())) {
            return Err(Error::InvalidInput("coupling entries must be finite and nonnegative".into()));
        }
        let dev = marginals.deviation(&values);
        if dev > tol {
            return Err(Error::InfeasibleConstraints(format!(
                "coupling violates marginals by {dev}"
            )));
        }
        Ok(Self { values, marginals })
    }

    pub fn feasibility_error(&self) -> T {
        self.marginals.deviation(&self.values)
    }

    pub fn stack(&self) -> Vec<T> {
        stack(&self.values)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Largest distance of an entry from `{0, 1}`.
    pub fn integrality_gap(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |m, &v| m.max(v.min((T::one() - v).abs())))
    }
}

/// True when every entry is within `tol` of 0 or 1 and each row and column
/// holds exactly one unit entry.
pub fn is_permutation_matrix<T: Scalar>(x: &Array2<T>, tol: T) -> bool {
    if x.iter().any(|&v| v.abs() > tol && (v - T::one()).abs() > tol) {
        return false;
    }
    let ones = |it: &mut dyn Iterator<Item = &T>| it.filter(|v| (**v - T::one()).abs() <= tol).count();
    x.outer_iter().all(|r| ones(&mut r.iter()) == 1) && x.columns().into_iter().all(|c| ones(&mut c.iter()) == 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn stack_is_column_major() {
        let id: Array2<f64> = Array2::eye(2);
        assert_eq!(stack(&id), vec![1.0, 0.0, 0.0, 1.0]);
        let mut m = Array2::<f64>::zeros((2, 2));
        m[[1, 0]] = 1.0;
        assert_eq!(stack(&m), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn unstack_round_trip_and_length_check() {
        let m = Array2::from_shape_fn((5, 7), |(i, j)| (i * 7 + j) as f64 * 0.37 - 3.0);
        let x = stack(&m);
        assert_eq!(unstack(&x, 5, 7).unwrap(), m);
        assert!(matches!(unstack(&x, 6, 7), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn constant_energy() {
        let e = EnergySpec::new(3, 3, QuadraticOperator::<f64>::zero(9), vec![0.0; 9], 5.0).unwrap();
        assert_eq!(e.eval(&[0.3; 9]).unwrap(), 5.0);
    }

    #[test]
    fn identity_w_on_permutation_is_n() {
        let w = QuadraticOperator::dense(Array2::<f64>::eye(9)).unwrap();
        let e = EnergySpec::quadratic_only(3, 3, w).unwrap();
        let x = Permutation::identity(3).to_stack::<f64>();
        assert_eq!(e.eval(&x).unwrap(), 3.0);
        assert!(matches!(e.eval(&x[..8]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn eval_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 16;
        let raw = Array2::from_shape_fn((dim, dim), |_| rng.random::<f64>() - 0.5);
        let w = (&raw + &raw.t()) * 0.5;
        let c: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let e = EnergySpec::new(4, 4, QuadraticOperator::dense(w.clone()).unwrap(), c.clone(), 1.25).unwrap();
        let mut naive = 1.25;
        for p in 0..dim {
            for q in 0..dim {
                naive += w[[p, q]] * x[p] * x[q];
            }
            naive += c[p] * x[p];
        }
        assert!((e.eval(&x).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn dense_input_is_symmetrized() {
        let w = array![[1.0, 2.0], [0.0, 3.0]];
        let op = QuadraticOperator::<f64>::dense(w).unwrap();
        assert_eq!(op.to_dense(), array![[1.0, 1.0], [1.0, 3.0]]);
    }

    #[test]
    fn shifted_energy_on_uniform() {
        let e = EnergySpec::quadratic_only(3, 3, QuadraticOperator::<f64>::zero(9)).unwrap();
        let x = vec![1.0 / 3.0; 9];
        assert!((e.eval_shifted(&x, 1.0).unwrap() - 2.0).abs() < 1e-12);
        let p = Permutation::new(vec![2, 0, 1], 3).unwrap().to_stack::<f64>();
        assert_eq!(e.eval_shifted(&p, 7.5).unwrap(), e.eval(&p).unwrap());
    }

    #[test]
    fn operator_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Array2::from_shape_fn((9, 9), |_| rng.random::<f64>());
        let w = (&raw + &raw.t()) * 0.5;
        let dense = QuadraticOperator::dense(w.clone()).unwrap();
        let wc = w.clone();
        let op = QuadraticOperator::from_fn(9, move |x: &[f64], y: &mut [f64]| {
            for p in 0..9 {
                y[p] = (0..9).map(|q| wc[[p, q]] * x[q]).sum();
            }
        });
        let x: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
        let ed = EnergySpec::quadratic_only(3, 3, dense).unwrap();
        let eo = EnergySpec::quadratic_only(3, 3, op).unwrap();
        let (a, b) = (ed.eval(&x).unwrap(), eo.eval(&x).unwrap());
        assert!((a - b).abs() <= 1e-10 * a.abs());
        assert!(eo.symmetry_defect(10, 1) < 1e-12);
    }

    #[test]
    fn sparse_pattern_dense_and_operator_bases_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Array2::from_shape_fn((9, 9), |_| rng.random::<f64>());
        let w = (&raw + &raw.t()) * 0.5;
        let forbidden: Vec<bool> = (0..9).map(|p| p % 3 == 1).collect();
        let dense = QuadraticOperator::dense(w.clone()).unwrap();
        let wc = w.clone();
        let op = QuadraticOperator::from_fn(9, move |x: &[f64], y: &mut [f64]| {
            for p in 0..9 {
                y[p] = (0..9).map(|q| wc[[p, q]] * x[q]).sum();
            }
        });
        let a = QuadraticOperator::sparse_pattern(dense, forbidden.clone(), 4.0).unwrap();
        let b = QuadraticOperator::sparse_pattern(op, forbidden, 4.0).unwrap();
        let x: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
        let (ya, yb) = (a.apply_vec(&x), b.apply_vec(&x));
        for (u, v) in ya.iter().zip(&yb) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![0, 0], 3).is_err());
        assert!(Permutation::new(vec![3], 3).is_err());
        let p = Permutation::new(vec![1, 0], 2).unwrap();
        assert_eq!(p.to_stack::<f64>(), vec![0.0, 1.0, 1.0, 0.0]);
        let x: Vec<f64> = Permutation::new(vec![2, 0, 3], 5).unwrap().to_stack();
        assert_eq!(x.iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn marginal_checks() {
        assert!(matches!(
            MarginalSpec::new(vec![1.0, 1.0], vec![1.0, 2.0]),
            Err(Error::InfeasibleMarginals { .. })
        ));
        let m = MarginalSpec::new(vec![2.0, 1.0, 1.0], vec![1.0; 4]).unwrap();
        let u = m.uniform_coupling();
        assert!(u.feasibility_error() < 1e-15);
        assert!(Coupling::new(Array2::zeros((3, 4)), m, 1e-8).is_err());
    }
}
