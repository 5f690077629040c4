//! Injective matching, restricted supports for upsampling, and greedy
//! interpolation from known correspondences.

use std::sync::Arc;

use ndarray::{s, Array2};

use crate::energies::{MetricData, Penalty};
use crate::error::{Error, Result};
use crate::homotopy::{homotopy_path, HomotopyConfig, HomotopyTrace};
use crate::problem::{stack_index, EnergySpec, LinearOperator, MarginalSpec, Permutation, QuadraticOperator};
use crate::projection::l2_project;
use crate::scalar::Scalar;
use crate::spectral::{lambda_bar_range_shaped, EigConfig};

/// Marginals of the `(k + 1) x n` problem whose first row absorbs the
/// `n - k` unmatched targets.
pub fn injective_marginals<T: Scalar>(k: usize, n: usize) -> Result<MarginalSpec<T>> {
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!("injective matching needs 0 < k < n, got k = {k}, n = {n}")));
    }
    let mut rows = vec![T::one(); k + 1];
    rows[0] = T::of_usize(n - k);
    MarginalSpec::new(rows, vec![T::one(); n])
}

/// Applies a `k x n` operator to the non-slack rows of a `(k + 1) x n` stack.
struct SlackOperator<T: Scalar> {
    base: QuadraticOperator<T>,
    k: usize,
    n: usize,
}

impl<T: Scalar> LinearOperator<T> for SlackOperator<T> {
    fn dim(&self) -> usize {
        (self.k + 1) * self.n
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        let (k, n) = (self.k, self.n);
        let inner = strip_stack(x, k, n);
        let w = self.base.apply_vec(&inner);
        y.fill(T::zero());
        for j in 0..n {
            y[stack_index(1, j, k + 1)..stack_index(0, j + 1, k + 1)].copy_from_slice(&w[j * k..(j + 1) * k]);
        }
    }
}

fn strip_stack<T: Scalar>(x: &[T], k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(k * n);
    for j in 0..n {
        out.extend_from_slice(&x[stack_index(1, j, k + 1)..stack_index(0, j + 1, k + 1)]);
    }
    out
}

/// Lifts a `k x n` energy to the `(k + 1) x n` slack problem; every
/// coefficient touching the slack row is zero.
pub fn augment_injective<T: Scalar>(e: &EnergySpec<T>) -> Result<EnergySpec<T>> {
    let (k, n) = (e.k, e.n);
    if k >= n {
        return Err(Error::InvalidInput(format!("injective matching needs k < n, got k = {k}, n = {n}")));
    }
    let mut c = vec![T::zero(); (k + 1) * n];
    for j in 0..n {
        for i in 0..k {
            c[stack_index(i + 1, j, k + 1)] = e.c[stack_index(i, j, k)];
        }
    }
    let op = SlackOperator {
        base: e.quadratic.clone(),
        k,
        n,
    };
    EnergySpec::new(k + 1, n, QuadraticOperator::operator(op), c, e.d)
}

/// Drops the slack row.
pub fn strip_slack<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.slice(s![1.., ..]).to_owned()
}

/// Injective assignment of the `k` sources of `e` into its `n > k` targets:
/// homotopy on the slack problem, then nearest-assignment rounding of the
/// source rows.
pub fn solve_injective<T: Scalar>(e: &EnergySpec<T>, cfg: &HomotopyConfig) -> Result<(Permutation, HomotopyTrace<T>)> {
    let augmented = augment_injective(e)?;
    let marginals = injective_marginals(e.k, e.n)?;
    let trace = homotopy_path(&augmented, &marginals, cfg)?;
    let p = l2_project(&strip_slack(&trace.final_coupling.values))?;
    Ok((p, trace))
}

/// Permissible entries of a `k x n` assignment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityPattern {
    pub permissible: Array2<bool>,
}

impl SparsityPattern {
    pub fn full(k: usize, n: usize) -> Self {
        Self {
            permissible: Array2::from_elem((k, n), true),
        }
    }

    pub fn new(permissible: Array2<bool>) -> Result<Self> {
        if let Some(i) = permissible.rows().into_iter().position(|r| !r.iter().any(|&b| b)) {
            return Err(Error::ZeroLine { axis: "row", index: i });
        }
        Ok(Self { permissible })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.permissible.dim()
    }

    /// Fraction of permissible entries in each row.
    pub fn row_fractions(&self) -> Vec<f64> {
        let n = self.permissible.ncols() as f64;
        self.permissible
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&b| b).count() as f64 / n)
            .collect()
    }

    pub fn permissible_fraction(&self) -> f64 {
        self.permissible.iter().filter(|&&b| b).count() as f64 / self.permissible.len() as f64
    }

    pub fn contains(&self, p: &Permutation) -> bool {
        p.assignment().iter().enumerate().all(|(i, &j)| self.permissible[[i, j]])
    }

    /// Forbidden flags in stack order.
    pub fn forbidden_stack(&self) -> Vec<bool> {
        let (k, n) = self.shape();
        let mut out = vec![false; k * n];
        for ((i, j), &b) in self.permissible.indexed_iter() {
            out[stack_index(i, j, k)] = !b;
        }
        out
    }
}

const NEAREST_ANCHORS: usize = 5;

/// For every row point of `d_own`, keeps the `keep` columns whose distances to
/// the matched anchors best agree with its own anchor distances.
fn one_sided<T: Scalar>(
    d_own: &Array2<T>,
    d_other: &Array2<T>,
    anchors: &[(usize, usize)],
    keep: usize,
) -> Array2<bool> {
    let (rows, cols) = (d_own.nrows(), d_other.nrows());
    let mut out = Array2::from_elem((rows, cols), false);
    let mut scored: Vec<(T, usize)> = Vec::with_capacity(cols);
    for i in 0..rows {
        let mut near: Vec<&(usize, usize)> = anchors.iter().collect();
        near.sort_by(|a, b| d_own[[i, a.0]].partial_cmp(&d_own[[i, b.0]]).unwrap().then(a.0.cmp(&b.0)));
        near.truncate(NEAREST_ANCHORS);
        scored.clear();
        for j in 0..cols {
            let dist: T = near
                .iter()
                .map(|&&(a, b)| {
                    let r = d_own[[i, a]] - d_other[[j, b]];
                    r * r
                })
                .sum();
            scored.push((dist, j));
        }
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in scored.iter().take(keep) {
            out[[i, j]] = true;
        }
    }
    out
}

fn kept(frac: f64, count: usize) -> usize {
    ((frac * count as f64).ceil() as usize).clamp(1, count)
}

/// Permissible set from known `(source, target)` anchor pairs: each point is
/// described by its distances to its five nearest anchors, and the closest
/// `keep_frac` of the candidates on the other side stay permissible. Done
/// from both sides and united.
pub fn sparsity_pattern<T: Scalar>(m: &MetricData<T>, anchors: &[(usize, usize)], keep_frac: f64) -> Result<SparsityPattern> {
    if anchors.is_empty() {
        return Err(Error::InvalidInput("sparsity pattern needs at least one anchor".into()));
    }
    if !(keep_frac > 0.0 && keep_frac <= 1.0) {
        return Err(Error::InvalidInput(format!("keep fraction must be in (0, 1], got {keep_frac}")));
    }
    let (k, n) = (m.k(), m.n());
    if let Some(&(s, t)) = anchors.iter().find(|&&(s, t)| s >= k || t >= n) {
        return Err(Error::InvalidInput(format!("anchor ({s}, {t}) out of range for {k}x{n}")));
    }
    let forward = one_sided(&m.d_source, &m.d_target, anchors, kept(keep_frac, n));
    let flipped: Vec<(usize, usize)> = anchors.iter().map(|&(s, t)| (t, s)).collect();
    let backward = one_sided(&m.d_target, &m.d_source, &flipped, kept(keep_frac, k));
    let permissible = Array2::from_shape_fn((k, n), |(i, j)| forward[[i, j]] || backward[[j, i]]);
    SparsityPattern::new(permissible)
}

/// `E` on the permissible entries plus `rho` times the squared forbidden
/// entries. Linear coefficients of forbidden entries are dropped.
pub fn limited_support_energy<T: Scalar>(base: &EnergySpec<T>, pattern: &SparsityPattern, rho: T) -> Result<EnergySpec<T>> {
    if pattern.shape() != (base.k, base.n) {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            found: pattern.permissible.len(),
        });
    }
    if !(rho > T::zero() && rho.is_finite()) {
        return Err(Error::InvalidInput(format!("rho must be positive, got {rho}")));
    }
    let forbidden = pattern.forbidden_stack();
    let c = base
        .c
        .iter()
        .zip(&forbidden)
        .map(|(&v, &f)| if f { T::zero() } else { v })
        .collect();
    let quadratic = QuadraticOperator::sparse_pattern(base.quadratic.clone(), forbidden, rho)?;
    EnergySpec::new(base.k, base.n, quadratic, c, base.d)
}

/// `100 max(|lambda_bar_min|, |lambda_bar_max|)` of the base energy.
pub fn default_rho<T: Scalar>(base: &EnergySpec<T>, eig: &EigConfig) -> Result<T> {
    let range = lambda_bar_range_shaped(base, base.k, base.n, eig)?;
    let rho = T::of(100.0) * range.spectral_norm();
    Ok(if rho > T::zero() { rho } else { T::one() })
}

/// Extends the `known` correspondences to each query source separately: the
/// target minimizing the energy of `known` plus the query pair, among the
/// targets `known` leaves free. Ties go to the smallest target index.
pub fn greedy_interpolate<T: Scalar>(
    m: &MetricData<T>,
    p: Penalty<T>,
    known: &[(usize, usize)],
    queries: &[usize],
) -> Result<Vec<usize>> {
    let (k, n) = (m.k(), m.n());
    let mut used = vec![false; n];
    let mut known_src = vec![false; k];
    for &(s, t) in known {
        if s >= k || t >= n {
            return Err(Error::InvalidInput(format!("correspondence ({s}, {t}) out of range for {k}x{n}")));
        }
        if used[t] || known_src[s] {
            return Err(Error::InfeasibleConstraints(format!("correspondence ({s}, {t}) reuses a point")));
        }
        used[t] = true;
        known_src[s] = true;
    }
    let free: Arc<Vec<usize>> = Arc::new((0..n).filter(|&t| !used[t]).collect());
    if free.is_empty() {
        return Err(Error::InfeasibleConstraints("no free targets left".into()));
    }
    queries
        .iter()
        .map(|&q| {
            if q >= k {
                return Err(Error::InvalidInput(format!("query {q} out of range for {k} sources")));
            }
            if known_src[q] {
                return Err(Error::InvalidInput(format!("query {q} is already matched")));
            }
            // only the cross terms between the query and the known pairs
            // depend on the candidate target
            let cost = |t: usize| -> T {
                known
                    .iter()
                    .map(|&(s, u)| p.eval(m.d_source[[q, s]], m.d_target[[t, u]]))
                    .sum::<T>()
                    * T::of(2.0)
                    + p.eval(T::zero(), m.d_target[[t, t]])
            };
            let mut best = (cost(free[0]), free[0]);
            for &t in &free[1..] {
                let v = cost(t);
                if v < best.0 {
                    best = (v, t);
                }
            }
            Ok(best.1)
        })
        .collect()
}
