//! Extreme eigenvalues of the quadratic form restricted to the directions of
//! the coupling polytope, computed matrix-free.
//!
//! The polytope `{X >= 0, X 1 = r, 1' X = c}` lies in an affine space whose
//! direction space is `{U : U 1 = 0, 1' U = 0}`. Its orthogonal projector is
//! double centering, so the restricted spectrum is read off `P W P` without
//! ever building a basis of the subspace.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::problem::EnergySpec;
use crate::scalar::{axpy, dot, norm2, Scalar};

/// Orthogonal projector onto `{U : U 1 = 0, 1' U = 0}` for `rows x cols`
/// matrices in stack order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TangentProjector {
    pub rows: usize,
    pub cols: usize,
}

impl TangentProjector {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn square(n: usize) -> Self {
        Self::new(n, n)
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    /// Dimension of the range, `(rows - 1)(cols - 1)`.
    pub fn rank(&self) -> usize {
        self.rows.saturating_sub(1) * self.cols.saturating_sub(1)
    }

    /// `out = U - r 1'/cols - 1 c'/rows + s/(rows cols)` where `r`, `c`, `s`
    /// are the row sums, column sums and total of `U`.
    pub fn apply<T: Scalar>(&self, u: &[T], out: &mut [T]) {
        let (m, n) = (self.rows, self.cols);
        debug_assert_eq!(u.len(), m * n);
        let mut row_sum = vec![T::zero(); m];
        let mut col_sum = vec![T::zero(); n];
        for j in 0..n {
            let col = &u[j * m..(j + 1) * m];
            for (i, &v) in col.iter().enumerate() {
                row_sum[i] += v;
            }
            col_sum[j] = col.iter().copied().sum();
        }
        let total: T = col_sum.iter().copied().sum();
        let (mf, nf) = (T::of_usize(m), T::of_usize(n));
        let mean = total / (mf * nf);
        for j in 0..n {
            let cj = col_sum[j] / mf;
            for i in 0..m {
                out[j * m + i] = u[j * m + i] - row_sum[i] / nf - cj + mean;
            }
        }
    }

    pub fn project<T: Scalar>(&self, u: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); u.len()];
        self.apply(u, &mut out);
        out
    }
}

/// Projects a stacked `n x n` matrix onto the doubly stochastic tangent space.
pub fn project_ds_tangent<T: Scalar>(u: &[T]) -> Result<Vec<T>> {
    let n = (u.len() as f64).sqrt().round() as usize;
    if n * n != u.len() {
        return Err(Error::InvalidInput(format!("length {} is not a perfect square", u.len())));
    }
    Ok(TangentProjector::square(n).project(u))
}

/// Settings for the block Krylov eigensolver.
#[derive(Clone, Debug, PartialEq)]
pub struct EigConfig {
    /// Relative residual `|A v - t v| / max(|t|, scale)` required to stop.
    pub tol: f64,
    /// Looser relative residual accepted once the budget is spent. Dense
    /// clusters at the end of the spectrum (GW energies) end here: the Ritz
    /// value is then far more accurate than the residual suggests.
    pub fallback_tol: f64,
    /// Defaults to `10 * dim`, clamped to `[200, 1000]`, when unset.
    pub max_iters: Option<usize>,
    pub restarts: usize,
    /// Number of vectors iterated together; `1` is plain power iteration.
    pub block: usize,
    pub seed: u64,
}

impl Default for EigConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            fallback_tol: 1e-4,
            max_iters: None,
            restarts: 5,
            block: 6,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigPair<T> {
    pub value: T,
    /// Unit eigenvector.
    pub vector: Vec<T>,
    pub residual: T,
    pub iterations: usize,
}

/// Extreme eigenvalues of `F' W F`, where the columns of `F` span the
/// tangent space of the coupling polytope.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigRange<T> {
    pub lambda_bar_min: T,
    pub lambda_bar_max: T,
    pub iterations_used: usize,
    pub residual: T,
}

impl<T: Scalar> EigRange<T> {
    /// Spectral norm of the restricted quadratic form.
    pub fn spectral_norm(&self) -> T {
        self.lambda_bar_min.abs().max(self.lambda_bar_max.abs())
    }
}

/// Largest-magnitude eigenvalue of the symmetric map `op` on `R^dim`.
pub fn max_magnitude_eig<T, F>(op: F, dim: usize, cfg: &EigConfig) -> Result<EigPair<T>>
where
    T: Scalar,
    F: Fn(&[T], &mut [T]),
{
    max_magnitude_eig_scaled(&op, dim, cfg, T::zero())
}

fn max_magnitude_eig_scaled<T: Scalar>(
    op: &dyn Fn(&[T], &mut [T]),
    dim: usize,
    cfg: &EigConfig,
    scale: T,
) -> Result<EigPair<T>> {
    if dim == 0 {
        return Err(Error::InvalidInput("eigenproblem of dimension 0".into()));
    }
    let max_iters = cfg.max_iters.unwrap_or((10 * dim).clamp(200, 1000));
    let mut last_residual = f64::INFINITY;
    for attempt in 0..=cfg.restarts {
        let seed = cfg.seed.wrapping_add(attempt as u64 * 0x9e37_79b9);
        match block_iteration(op, dim, cfg, scale, max_iters, seed) {
            Ok(pair) => return Ok(pair),
            Err(res) => last_residual = res,
        }
    }
    Err(Error::NonConvergence {
        what: "power iteration",
        iterations: max_iters,
        residual: last_residual,
    })
}

fn random_unit<T: Scalar>(rng: &mut ChaCha8Rng, dim: usize) -> Vec<T> {
    let mut v: Vec<T> = (0..dim).map(|_| T::of(rng.random::<f64>() - 0.5)).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

/// Modified Gram-Schmidt; vectors that collapse are replaced by random ones.
fn orthonormalize<T: Scalar>(block: &mut [Vec<T>], rng: &mut ChaCha8Rng) {
    let dim = block[0].len();
    for a in 0..block.len() {
        for attempt in 0..4 {
            let before = norm2(&block[a]);
            for b in 0..a {
                let (done, rest) = block.split_at_mut(a);
                let proj = dot(&done[b], &rest[0]);
                axpy(-proj, &done[b], &mut rest[0]);
            }
            let after = norm2(&block[a]);
            if after > T::of(1e-10) * before && after > T::zero() && after.is_finite() {
                block[a].iter_mut().for_each(|x| *x /= after);
                break;
            }
            if attempt == 3 {
                // dimension exhausted; leave a zero column
                block[a].fill(T::zero());
                break;
            }
            block[a] = random_unit(rng, dim);
        }
    }
}

/// Orthogonalizes `v` against `basis` twice and normalizes it. Returns
/// `false` when nothing is left.
fn extend_basis<T: Scalar>(basis: &[Vec<T>], v: &mut [T]) -> bool {
    let before = norm2(v);
    if !(before > T::zero() && before.is_finite()) {
        return false;
    }
    for _ in 0..2 {
        for q in basis {
            let proj = dot(q, v);
            axpy(-proj, q, v);
        }
    }
    let after = norm2(v);
    if after > T::of(1e-10) * before {
        v.iter_mut().for_each(|x| *x /= after);
        true
    } else {
        false
    }
}

/// Block Krylov iteration with thick restarts: grows `[V, A V, A^2 V, ...]`
/// to `8 b` vectors, extracts Ritz pairs from the whole subspace and restarts
/// from the `b` largest-magnitude ones. One iteration is one block of `b`
/// products. On failure returns the last residual.
fn block_iteration<T: Scalar>(
    op: &dyn Fn(&[T], &mut [T]),
    dim: usize,
    cfg: &EigConfig,
    scale: T,
    max_iters: usize,
    seed: u64,
) -> std::result::Result<EigPair<T>, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = cfg.block.clamp(1, dim);
    let m = (8 * b).max(20).min(dim);
    let mut start: Vec<Vec<T>> = (0..b).map(|_| random_unit(&mut rng, dim)).collect();
    orthonormalize(&mut start, &mut rng);
    let tol = T::of(cfg.tol);
    let mut residual = T::infinity();
    let mut products = 0usize;
    let budget = max_iters * b;

    while products < budget {
        let mut basis: Vec<Vec<T>> = Vec::with_capacity(m);
        let mut images: Vec<Vec<T>> = Vec::with_capacity(m);
        for mut v in start.drain(..) {
            if extend_basis(&basis, &mut v) {
                basis.push(v);
            }
        }
        let mut frontier = 0;
        while frontier < basis.len() {
            let end = basis.len();
            for q in frontier..end {
                let mut z = vec![T::zero(); dim];
                op(&basis[q], &mut z);
                products += 1;
                if z.iter().any(|x| !x.is_finite()) {
                    return Err(f64::NAN);
                }
                images.push(z);
            }
            if basis.len() >= m {
                break;
            }
            for q in frontier..end {
                if basis.len() >= m {
                    break;
                }
                let mut v = images[q].clone();
                if extend_basis(&basis, &mut v) {
                    basis.push(v);
                }
            }
            frontier = end;
        }
        // vectors without an image were never appended past the last block
        let size = images.len();
        basis.truncate(size);
        let h = DMatrix::<f64>::from_fn(size, size, |r, s| {
            0.5 * (dot(&basis[r], &images[s]) + dot(&basis[s], &images[r])).to_f64_lossy()
        });
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[y].abs().partial_cmp(&eig.eigenvalues[x].abs()).unwrap());
        let ritz = |idx: usize| -> (Vec<T>, Vec<T>) {
            let mut v = vec![T::zero(); dim];
            let mut z = vec![T::zero(); dim];
            for r in 0..size {
                let coef = T::of(eig.eigenvectors[(r, idx)]);
                axpy(coef, &basis[r], &mut v);
                axpy(coef, &images[r], &mut z);
            }
            (v, z)
        };
        let best = order[0];
        let theta = T::of(eig.eigenvalues[best]);
        let (v, mut z) = ritz(best);
        let vnorm = norm2(&v);
        if vnorm > T::zero() {
            axpy(-theta, &v, &mut z);
            residual = norm2(&z) / vnorm;
        }
        // a subspace that stopped growing is invariant, so its Ritz pairs are exact
        if residual <= tol * theta.abs().max(scale) || size < m {
            let unit = if vnorm > T::zero() { v.iter().map(|&x| x / vnorm).collect() } else { v };
            return Ok(EigPair {
                value: theta,
                vector: unit,
                residual,
                iterations: products.div_ceil(b),
            });
        }
        if products >= budget && residual <= T::of(cfg.fallback_tol) * theta.abs().max(scale) {
            let unit = v.iter().map(|&x| x / vnorm).collect();
            return Ok(EigPair {
                value: theta,
                vector: unit,
                residual,
                iterations: products.div_ceil(b),
            });
        }
        start = order.iter().take(b).map(|&idx| ritz(idx).0).collect();
        orthonormalize(&mut start, &mut rng);
    }
    Err(residual.to_f64_lossy())
}

/// Two solves: the largest-magnitude eigenvalue gives one end of the spectrum,
/// then the shifted, semidefinite operator gives the distance to the other.
fn two_phase_range<T: Scalar>(
    apply: &dyn Fn(&[T], &mut [T]),
    proj: Option<&TangentProjector>,
    dim: usize,
    cfg: &EigConfig,
) -> Result<EigRange<T>> {
    let first = max_magnitude_eig_scaled(apply, dim, cfg, T::zero())?;
    let anchor = first.value;
    let sign = if anchor >= T::zero() { T::one() } else { -T::one() };
    // sign * (anchor I - W) restricted to the subspace is positive semidefinite
    let px = std::cell::RefCell::new(vec![T::zero(); dim]);
    let shifted = |x: &[T], y: &mut [T]| {
        apply(x, y);
        let mut px = px.borrow_mut();
        match proj {
            Some(p) => p.apply(x, &mut px),
            None => px.copy_from_slice(x),
        }
        for (yi, &xi) in y.iter_mut().zip(px.iter()) {
            *yi = sign * (anchor * xi - *yi);
        }
    };
    let cfg2 = EigConfig {
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    };
    let second = max_magnitude_eig_scaled(&shifted, dim, &cfg2, anchor.abs())?;
    let spread = second.value.max(T::zero());
    let (lo, hi) = if sign > T::zero() {
        (anchor - spread, anchor)
    } else {
        (anchor, anchor + spread)
    };
    Ok(EigRange {
        lambda_bar_min: lo,
        lambda_bar_max: hi,
        iterations_used: first.iterations + second.iterations,
        residual: first.residual.max(second.residual),
    })
}

/// `lambda_bar_min` and `lambda_bar_max` for the coupling polytope of shape
/// `e.k x e.n`.
pub fn lambda_bar_range<T: Scalar>(e: &EnergySpec<T>, cfg: &EigConfig) -> Result<EigRange<T>> {
    lambda_bar_range_shaped(e, e.k, e.n, cfg)
}

pub(crate) fn lambda_bar_range_shaped<T: Scalar>(
    e: &EnergySpec<T>,
    rows: usize,
    cols: usize,
    cfg: &EigConfig,
) -> Result<EigRange<T>> {
    let proj = TangentProjector::new(rows, cols);
    if proj.dim() != e.dim() {
        return Err(Error::DimensionMismatch {
            expected: e.dim(),
            found: proj.dim(),
        });
    }
    if proj.rank() == 0 {
        return Ok(EigRange {
            lambda_bar_min: T::zero(),
            lambda_bar_max: T::zero(),
            iterations_used: 0,
            residual: T::zero(),
        });
    }
    let dim = e.dim();
    let scratch = std::cell::RefCell::new((vec![T::zero(); dim], vec![T::zero(); dim]));
    let restricted = |x: &[T], y: &mut [T]| {
        let mut s = scratch.borrow_mut();
        let (px, wpx) = &mut *s;
        proj.apply(x, px);
        e.quadratic.apply(px, wpx);
        proj.apply(wpx, y);
    };
    two_phase_range(&restricted, Some(&proj), dim, cfg)
}

/// Eigenvector of the smallest eigenvalue of `P W P` on the tangent space of
/// the `rows x cols` coupling polytope, given an upper bound `top` on its
/// spectrum.
pub(crate) fn bottom_tangent_vector<T: Scalar>(
    e: &EnergySpec<T>,
    rows: usize,
    cols: usize,
    top: T,
    cfg: &EigConfig,
) -> Result<Vec<T>> {
    let proj = TangentProjector::new(rows, cols);
    let dim = e.dim();
    let scratch = std::cell::RefCell::new((vec![T::zero(); dim], vec![T::zero(); dim]));
    // top I - W is positive semidefinite on the tangent space
    let flipped = |x: &[T], y: &mut [T]| {
        let mut s = scratch.borrow_mut();
        let (px, wpx) = &mut *s;
        proj.apply(x, px);
        e.quadratic.apply(px, wpx);
        for (w, &p) in wpx.iter_mut().zip(px.iter()) {
            *w = top * p - *w;
        }
        proj.apply(wpx, y);
    };
    let pair = max_magnitude_eig_scaled(&flipped, dim, cfg, top.abs())?;
    Ok(proj.project(&pair.vector))
}

/// Extreme eigenvalues of `W` over the full space.
pub fn full_range<T: Scalar>(e: &EnergySpec<T>, cfg: &EigConfig) -> Result<EigRange<T>> {
    let apply = |x: &[T], y: &mut [T]| e.quadratic.apply(x, y);
    two_phase_range(&apply, None, e.dim(), cfg)
}

/// Smallest eigenvalue of `W`.
pub fn lambda_min_full<T: Scalar>(e: &EnergySpec<T>, cfg: &EigConfig) -> Result<T> {
    Ok(full_range(e, cfg)?.lambda_bar_min)
}
