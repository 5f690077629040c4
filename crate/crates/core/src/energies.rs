//! Energy builders for metric matching, graph matching and grid layouts.
//!
//! Metric energies take the form `W[(i,j),(q,l)] = p(d_S(i,q), d_T(j,l))`,
//! pairing source points `i, q` with target points `j, l`.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, ShapeBuilder};

use crate::error::{Error, Result};
use crate::problem::{stack, stack_index, EnergySpec, LinearOperator, Permutation, QuadraticOperator};
use crate::scalar::Scalar;
use crate::spectral::{lambda_bar_range_shaped, EigConfig};

/// Largest `k * n` for which builders materialize a dense `W`.
pub const DENSE_LIMIT: usize = 400;

/// Pairwise distances of `k` source points and `n` target points.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricData<T: Scalar> {
    pub d_source: Array2<T>,
    pub d_target: Array2<T>,
}

fn check_distance_matrix<T: Scalar>(d: &Array2<T>, name: &str) -> Result<()> {
    if d.nrows() != d.ncols() {
        return Err(Error::InvalidInput(format!(
            "{name} distances must be square, got {}x{}",
            d.nrows(),
            d.ncols()
        )));
    }
    if d.nrows() == 0 {
        return Err(Error::InvalidInput(format!("{name} distances are empty")));
    }
    let scale = d.iter().fold(T::one(), |m, v| m.max(v.abs()));
    let tol = T::of(1e-12) * scale;
    for ((i, j), &v) in d.indexed_iter() {
        if !v.is_finite() || v < T::zero() {
            return Err(Error::InvalidInput(format!("{name} distance ({i}, {j}) = {v} is not a finite nonnegative number")));
        }
        if (v - d[[j, i]]).abs() > tol {
            return Err(Error::InvalidInput(format!("{name} distances are not symmetric at ({i}, {j})")));
        }
        if i == j && v > tol {
            return Err(Error::InvalidInput(format!("{name} distance ({i}, {i}) = {v} is not zero")));
        }
    }
    Ok(())
}

impl<T: Scalar> MetricData<T> {
    pub fn new(d_source: Array2<T>, d_target: Array2<T>) -> Result<Self> {
        check_distance_matrix(&d_source, "source")?;
        check_distance_matrix(&d_target, "target")?;
        Ok(Self { d_source, d_target })
    }

    pub fn k(&self) -> usize {
        self.d_source.nrows()
    }

    pub fn n(&self) -> usize {
        self.d_target.nrows()
    }

    pub fn max_distance(&self) -> T {
        self.d_source
            .iter()
            .chain(self.d_target.iter())
            .fold(T::zero(), |m, &v| m.max(v))
    }

    /// Restricts both spaces to the given point subsets.
    pub fn select(&self, sources: &[usize], targets: &[usize]) -> Result<Self> {
        let pick = |d: &Array2<T>, idx: &[usize]| -> Result<Array2<T>> {
            if let Some(&bad) = idx.iter().find(|&&i| i >= d.nrows()) {
                return Err(Error::InvalidInput(format!("point index {bad} out of range")));
            }
            Ok(Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| d[[idx[a], idx[b]]]))
        };
        Ok(Self {
            d_source: pick(&self.d_source, sources)?,
            d_target: pick(&self.d_target, targets)?,
        })
    }
}

/// Penalty `p(u, v)` on a source distance `u` and a target distance `v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Penalty<T> {
    /// `(u - v)^2`
    Gw,
    /// `log(max(u, floor) / max(v, floor))^2`
    LogGw { floor: T },
    /// `-exp(-(u - v)^2 / sigma^2)`
    Gaussian { sigma: T },
    /// `|scale * u - v|`
    Fried { scale: T },
}

impl<T: Scalar> Penalty<T> {
    pub fn eval(&self, u: T, v: T) -> T {
        match *self {
            Penalty::Gw => (u - v) * (u - v),
            Penalty::LogGw { floor } => {
                let r = u.max(floor).ln() - v.max(floor).ln();
                r * r
            }
            Penalty::Gaussian { sigma } => -(-(u - v) * (u - v) / (sigma * sigma)).exp(),
            Penalty::Fried { scale } => (scale * u - v).abs(),
        }
    }
}

/// Dense `W` of a pairwise penalty.
pub fn pairwise_dense<T: Scalar>(m: &MetricData<T>, p: Penalty<T>) -> Array2<T> {
    let (k, n) = (m.k(), m.n());
    Array2::from_shape_fn((k * n, k * n), |(a, b)| {
        let (i, j) = (a % k, a / k);
        let (q, l) = (b % k, b / k);
        p.eval(m.d_source[[i, q]], m.d_target[[j, l]])
    })
}

/// `W x` evaluated entry by entry, `O(k^2 n^2)` per product.
struct PairwiseOperator<T: Scalar> {
    ds: Array2<T>,
    dt: Array2<T>,
    p: Penalty<T>,
}

impl<T: Scalar> LinearOperator<T> for PairwiseOperator<T> {
    fn dim(&self) -> usize {
        self.ds.nrows() * self.dt.nrows()
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        let (k, n) = (self.ds.nrows(), self.dt.nrows());
        let support: Vec<(usize, usize, T)> = (0..n)
            .flat_map(|l| (0..k).map(move |q| (q, l)))
            .filter_map(|(q, l)| {
                let v = x[stack_index(q, l, k)];
                (v != T::zero()).then_some((q, l, v))
            })
            .collect();
        for j in 0..n {
            for i in 0..k {
                y[stack_index(i, j, k)] = support
                    .iter()
                    .fold(T::zero(), |acc, &(q, l, v)| acc + self.p.eval(self.ds[[i, q]], self.dt[[j, l]]) * v);
            }
        }
    }
}

/// Penalties of the form `(f(u) - f(v))^2`, applied with matrix products:
/// `W x = (F_S^2 r) 1' + 1 (F_T^2 c)' - 2 F_S X F_T`, where `r`, `c` are the
/// row and column sums of `X` and the squares are entrywise.
struct SeparableOperator<T: Scalar> {
    fs: Array2<T>,
    ft: Array2<T>,
    fs2: Array2<T>,
    ft2: Array2<T>,
}

impl<T: Scalar> SeparableOperator<T> {
    fn new(fs: Array2<T>, ft: Array2<T>) -> Self {
        let fs2 = fs.mapv(|v| v * v);
        let ft2 = ft.mapv(|v| v * v);
        Self { fs, ft, fs2, ft2 }
    }
}

impl<T: Scalar> LinearOperator<T> for SeparableOperator<T> {
    fn dim(&self) -> usize {
        self.fs.nrows() * self.ft.nrows()
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        let (k, n) = (self.fs.nrows(), self.ft.nrows());
        let xm = ArrayView2::from_shape((k, n).f(), x).expect("stacked length");
        let r: Array1<T> = xm.sum_axis(ndarray::Axis(1));
        let c: Array1<T> = xm.sum_axis(ndarray::Axis(0));
        let a = self.fs2.dot(&r);
        let b = self.ft2.dot(&c);
        let cross = self.fs.dot(&xm).dot(&self.ft);
        let mut out = ArrayViewMut2::from_shape((k, n).f(), y).expect("stacked length");
        let two = T::of(2.0);
        out.indexed_iter_mut()
            .for_each(|((i, j), v)| *v = a[i] + b[j] - two * cross[[i, j]]);
    }
}

fn metric_energy<T: Scalar>(m: &MetricData<T>, p: Penalty<T>, dense: bool) -> Result<EnergySpec<T>> {
    let (k, n) = (m.k(), m.n());
    let quadratic = if dense {
        QuadraticOperator::dense(pairwise_dense(m, p))?
    } else {
        match p {
            Penalty::Gw => QuadraticOperator::operator(SeparableOperator::new(m.d_source.clone(), m.d_target.clone())),
            Penalty::LogGw { floor } => {
                let f = |d: &Array2<T>| d.mapv(|v| v.max(floor).ln());
                QuadraticOperator::operator(SeparableOperator::new(f(&m.d_source), f(&m.d_target)))
            }
            _ => QuadraticOperator::operator(PairwiseOperator {
                ds: m.d_source.clone(),
                dt: m.d_target.clone(),
                p,
            }),
        }
    };
    EnergySpec::quadratic_only(k, n, quadratic)
}

fn dense_allowed<T: Scalar>(m: &MetricData<T>) -> Result<()> {
    let dim = m.k() * m.n();
    if dim > DENSE_LIMIT {
        return Err(Error::TooLarge {
            what: "dense energy dimension",
            size: dim,
            limit: DENSE_LIMIT,
        });
    }
    Ok(())
}

/// `p(u, v) = (u - v)^2` through the matrix-product operator.
pub fn gw_energy<T: Scalar>(m: &MetricData<T>) -> Result<EnergySpec<T>> {
    metric_energy(m, Penalty::Gw, false)
}

/// [`gw_energy`] with an explicit `W`; needs `k n <= 400`.
pub fn gw_energy_dense<T: Scalar>(m: &MetricData<T>) -> Result<EnergySpec<T>> {
    dense_allowed(m)?;
    metric_energy(m, Penalty::Gw, true)
}

/// Default floor for the log distances: `1e-6` times the largest distance.
pub fn default_log_floor<T: Scalar>(m: &MetricData<T>) -> T {
    let floor = T::of(1e-6) * m.max_distance();
    if floor > T::zero() {
        floor
    } else {
        T::min_positive_value()
    }
}

/// `p(u, v) = log(u / v)^2` with both distances floored at `floor`.
pub fn log_gw_energy<T: Scalar>(m: &MetricData<T>, floor: Option<T>) -> Result<EnergySpec<T>> {
    let floor = floor.unwrap_or_else(|| default_log_floor(m));
    if !(floor > T::zero()) {
        return Err(Error::InvalidInput(format!("log floor must be positive, got {floor}")));
    }
    metric_energy(m, Penalty::LogGw { floor }, false)
}

pub fn log_gw_energy_dense<T: Scalar>(m: &MetricData<T>, floor: Option<T>) -> Result<EnergySpec<T>> {
    dense_allowed(m)?;
    let floor = floor.unwrap_or_else(|| default_log_floor(m));
    metric_energy(m, Penalty::LogGw { floor }, true)
}

/// `p(u, v) = -exp(-(u - v)^2 / sigma^2)`. Dense when `k n <= 400`.
pub fn gaussian_energy<T: Scalar>(m: &MetricData<T>, sigma: T) -> Result<EnergySpec<T>> {
    if !(sigma > T::zero() && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    metric_energy(m, Penalty::Gaussian { sigma }, m.k() * m.n() <= DENSE_LIMIT)
}

fn offdiag_mean<T: Scalar>(d: &Array2<T>) -> T {
    let m = d.nrows();
    if m < 2 {
        return T::zero();
    }
    let total: T = d.indexed_iter().filter(|((i, j), _)| i != j).map(|(_, &v)| v).sum();
    total / T::of_usize(m * (m - 1))
}

/// Scale matching the mean off-diagonal image distance to the grid's.
pub fn fried_scale<T: Scalar>(d_images: &Array2<T>, d_grid: &Array2<T>) -> Result<T> {
    let mi = offdiag_mean(d_images);
    if !(mi > T::zero()) {
        return Err(Error::InvalidInput("image distances have zero mean".into()));
    }
    Ok(offdiag_mean(d_grid) / mi)
}

/// Layout energy `sum |c* d_ik - d'_jl| X_ij X_kl` with the scale `c*` fixed
/// by [`fried_scale`]. Dense when `k n <= 400`.
pub fn fried_energy<T: Scalar>(d_images: &Array2<T>, d_grid: &Array2<T>) -> Result<EnergySpec<T>> {
    let m = MetricData::new(d_images.clone(), d_grid.clone())?;
    if m.k() > m.n() {
        return Err(Error::InvalidInput(format!("{} items do not fit {} grid cells", m.k(), m.n())));
    }
    let scale = fried_scale(d_images, d_grid)?;
    metric_energy(&m, Penalty::Fried { scale }, m.k() * m.n() <= DENSE_LIMIT)
}

/// Euclidean distances between the cells of a `rows x cols` grid, cell
/// `r * cols + c` at integer coordinates `(r, c)`.
pub fn grid_distances<T: Scalar>(rows: usize, cols: usize) -> Array2<T> {
    let cells = rows * cols;
    Array2::from_shape_fn((cells, cells), |(a, b)| {
        let dr = T::of_usize((a / cols).abs_diff(b / cols));
        let dc = T::of_usize((a % cols).abs_diff(b % cols));
        (dr * dr + dc * dc).sqrt()
    })
}

/// Tries `budget` random transpositions of targets, keeping each one that
/// strictly lowers the energy. Returns the final assignment and its energy.
pub fn random_swaps<T: Scalar, R: rand::Rng + ?Sized>(
    e: &EnergySpec<T>,
    perm: &Permutation,
    budget: usize,
    rng: &mut R,
) -> Result<(Permutation, T)> {
    let mut best = e.eval_assignment(perm)?;
    let mut current = perm.assignment().to_vec();
    let k = current.len();
    if k < 2 {
        return Ok((perm.clone(), best));
    }
    for _ in 0..budget {
        let a = rng.random_range(0..k);
        let mut b = rng.random_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        current.swap(a, b);
        let v = e.eval_assignment(&Permutation::new(current.clone(), e.n)?)?;
        if v < best {
            best = v;
        } else {
            current.swap(a, b);
        }
    }
    Ok((Permutation::new(current, e.n)?, best))
}

/// `W x = vec(A' R - R B')` with `R = A X - X B`.
struct GraphMatchingOperator<T: Scalar> {
    a: Array2<T>,
    b: Array2<T>,
}

impl<T: Scalar> LinearOperator<T> for GraphMatchingOperator<T> {
    fn dim(&self) -> usize {
        self.a.nrows() * self.a.nrows()
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        let n = self.a.nrows();
        let xm = ArrayView2::from_shape((n, n).f(), x).expect("stacked length");
        let r = self.a.dot(&xm) - xm.dot(&self.b);
        let w = self.a.t().dot(&r) - r.dot(&self.b.t());
        let mut out = ArrayViewMut2::from_shape((n, n).f(), y).expect("stacked length");
        out.assign(&w);
    }
}

fn check_graphs<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            found: b.len(),
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adjacency matrix"));
    }
    Ok(())
}

/// `E(X) = |A X - X B|_F^2`, matrix-free.
pub fn graph_matching_energy<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Result<EnergySpec<T>> {
    check_graphs(a, b)?;
    let n = a.nrows();
    let op = GraphMatchingOperator { a: a.clone(), b: b.clone() };
    EnergySpec::quadratic_only(n, n, QuadraticOperator::operator(op))
}

/// [`graph_matching_energy`] with `W = M' M`, `M = I (x) A - B' (x) I`.
pub fn graph_matching_energy_dense<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Result<EnergySpec<T>> {
    check_graphs(a, b)?;
    let n = a.nrows();
    let dim = n * n;
    let eye = |p: usize, q: usize| if p == q { T::one() } else { T::zero() };
    // row (i, j) and column (q, l) of M in stack order
    let m = Array2::from_shape_fn((dim, dim), |(row, col)| {
        let (i, j) = (row % n, row / n);
        let (q, l) = (col % n, col / n);
        eye(j, l) * a[[i, q]] - b[[l, j]] * eye(i, q)
    });
    EnergySpec::quadratic_only(n, n, QuadraticOperator::dense(m.t().dot(&m))?)
}

/// Linear term from a `k x n` descriptor dissimilarity matrix.
pub fn descriptor_linear_term<T: Scalar>(c: &Array2<T>) -> Result<Vec<T>> {
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("descriptor costs"));
    }
    Ok(stack(c))
}

/// Adds a descriptor term to an energy.
pub fn with_descriptors<T: Scalar>(base: EnergySpec<T>, c: &Array2<T>) -> Result<EnergySpec<T>> {
    if c.dim() != (base.k, base.n) {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            found: c.len(),
        });
    }
    base.with_added_linear(&descriptor_linear_term(c)?)
}

/// Known correspondences `source -> target` and the weight of their term.
#[derive(Clone, Debug, PartialEq)]
pub struct UserConstraints<T> {
    pub pairs: Vec<(usize, usize)>,
    /// Defaults to `0.01 max(|lambda_bar_min|, |lambda_bar_max|)` of the base.
    pub weight: Option<T>,
}

impl<T: Scalar> UserConstraints<T> {
    pub fn new(pairs: Vec<(usize, usize)>, weight: Option<T>) -> Self {
        Self { pairs, weight }
    }

    pub fn validate(&self, k: usize, n: usize) -> Result<()> {
        let mut src = vec![false; k];
        let mut tgt = vec![false; n];
        for &(s, t) in &self.pairs {
            if s >= k || t >= n {
                return Err(Error::InvalidInput(format!("constraint ({s}, {t}) out of range for {k}x{n}")));
            }
            if src[s] || tgt[t] {
                return Err(Error::InfeasibleConstraints(format!(
                    "constraint ({s}, {t}) reuses a source or target"
                )));
            }
            src[s] = true;
            tgt[t] = true;
        }
        if let Some(w) = self.weight {
            if !(w >= T::zero() && w.is_finite()) {
                return Err(Error::InvalidInput(format!("constraint weight must be nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Unweighted constraint term: for each pinned pair `(s, t)`, `-1` at
/// `(s, t)` plus `p(d_S(s, q), d_T(t, l))` at every `(q, l)`.
pub fn constraint_linear_term<T: Scalar>(m: &MetricData<T>, pairs: &[(usize, usize)], p: Penalty<T>) -> Vec<T> {
    let (k, n) = (m.k(), m.n());
    let mut c = vec![T::zero(); k * n];
    for &(s, t) in pairs {
        for l in 0..n {
            for q in 0..k {
                c[stack_index(q, l, k)] += p.eval(m.d_source[[s, q]], m.d_target[[t, l]]);
            }
        }
        c[stack_index(s, t, k)] -= T::one();
    }
    c
}

/// Adds the weighted constraint term (with the penalty `p` of the base
/// energy) to `base`.
pub fn coarse_to_fine_terms<T: Scalar>(
    m: &MetricData<T>,
    u: &UserConstraints<T>,
    base: EnergySpec<T>,
    p: Penalty<T>,
    eig: &EigConfig,
) -> Result<EnergySpec<T>> {
    if (base.k, base.n) != (m.k(), m.n()) {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            found: m.k() * m.n(),
        });
    }
    u.validate(m.k(), m.n())?;
    if u.pairs.is_empty() {
        return Ok(base);
    }
    let w = match u.weight {
        Some(w) => w,
        None => T::of(0.01) * lambda_bar_range_shaped(&base, base.k, base.n, eig)?.spectral_norm(),
    };
    let term: Vec<T> = constraint_linear_term(m, &u.pairs, p).into_iter().map(|v| v * w).collect();
    base.with_added_linear(&term)
}
