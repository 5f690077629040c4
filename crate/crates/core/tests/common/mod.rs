#![allow(dead_code)]

use dspp::{EnergySpec, MarginalSpec, QuadraticOperator};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_sym(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let raw = Array2::from_shape_fn((dim, dim), |_| rng.random::<f64>() * 2.0 - 1.0);
    (&raw + &raw.t()) * 0.5
}

pub fn random_psd(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = Array2::from_shape_fn((dim, dim), |_| rng.random::<f64>() * 2.0 - 1.0);
    g.t().dot(&g) / dim as f64
}

pub fn dense_energy(n: usize, w: Array2<f64>, c: Vec<f64>, d: f64) -> EnergySpec<f64> {
    EnergySpec::new(n, n, QuadraticOperator::dense(w).unwrap(), c, d).unwrap()
}

/// Orthonormal basis of the directions of the coupling polytope.
pub fn null_basis(k: usize, n: usize) -> DMatrix<f64> {
    let dim = k * n;
    let a = DMatrix::<f64>::from_fn(k + n, dim, |r, s| {
        let (i, j) = (s % k, s / k);
        if (r < k && r == i) || (r >= k && r - k == j) {
            1.0
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(a.transpose() * &a);
    let cols: Vec<usize> = (0..dim).filter(|&q| eig.eigenvalues[q].abs() < 1e-9).collect();
    DMatrix::from_fn(dim, cols.len(), |r, c| eig.eigenvectors[(r, cols[c])])
}

/// Minimum of `x' H x + c' x` over the coupling polytope by ADMM on the
/// affine parameterization `x = x0 + F y`, splitting off `x >= 0`.
/// `H` must be positive semidefinite on the directions of the polytope.
pub fn convex_qp_min(h: &Array2<f64>, c: &[f64], marg: &MarginalSpec<f64>) -> (Vec<f64>, f64) {
    let (k, n) = marg.shape();
    let dim = k * n;
    let f = null_basis(k, n);
    let hm = DMatrix::from_fn(dim, dim, |r, s| 0.5 * (h[[r, s]] + h[[s, r]]));
    let cv = DVector::from_column_slice(c);
    let mass: f64 = marg.total_mass();
    let x0 = DVector::from_fn(dim, |s, _| marg.rows[s % k] * marg.cols[s / k] / mass);
    let scale = hm.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3) * dim as f64;
    let objective = |x: &DVector<f64>| (x.transpose() * &hm * x)[(0, 0)] + cv.dot(x);
    let mut best = (x0.clone(), objective(&x0));
    for rho in [scale, scale * 0.1, scale * 10.0] {
        let reduced = f.transpose() * (&hm * 2.0) * &f + DMatrix::identity(f.ncols(), f.ncols()) * rho;
        let chol = reduced.cholesky().expect("reduced system positive definite");
        let lin = f.transpose() * (&hm * &x0 * 2.0 + &cv);
        let mut z = x0.clone();
        let mut u = DVector::zeros(dim);
        let mut x = x0.clone();
        for _ in 0..200_000 {
            let rhs = -(&lin) - f.transpose() * ((&x0 - &z + &u) * rho);
            let y = chol.solve(&rhs);
            x = &x0 + &f * y;
            let z_prev = z.clone();
            z = (&x + &u).map(|v| v.max(0.0));
            u += &x - &z;
            let primal = (&x - &z).amax();
            let dual = (&z - &z_prev).amax();
            if primal < 1e-13 && dual < 1e-13 {
                break;
            }
        }
        // z is nonnegative; x satisfies the marginals; they coincide at convergence
        let val = objective(&x);
        if (&x - &z).amax() < 1e-9 && val < best.1 {
            best = (x, val);
        }
    }
    (best.0.iter().copied().collect(), best.1)
}

/// Dense `W` from a pairwise penalty on two distance matrices.
pub fn pairwise_dense(ds: &Array2<f64>, dt: &Array2<f64>, p: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let (k, n) = (ds.nrows(), dt.nrows());
    Array2::from_shape_fn((k * n, k * n), |(a, b)| {
        let (i, j) = (a % k, a / k);
        let (q, l) = (b % k, b / k);
        p(ds[[i, q]], dt[[j, l]])
    })
}

pub fn euclidean(points: &Array2<f64>) -> Array2<f64> {
    let m = points.nrows();
    Array2::from_shape_fn((m, m), |(a, b)| {
        points
            .row(a)
            .iter()
            .zip(points.row(b).iter())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    })
}

pub fn random_points(m: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((m, dim), |_| rng.random::<f64>())
}

pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}
