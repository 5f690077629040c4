//! Exhaustive and dense reference solvers for small instances.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::problem::{EnergySpec, Permutation};
use crate::scalar::Scalar;

/// Largest `n` accepted by [`brute_force_min`].
pub const MAX_BRUTE_FORCE_N: usize = 10;
/// Largest number of injections accepted by [`brute_force_injective`], `10!`.
pub const MAX_INJECTIONS: usize = 3_628_800;
/// Largest stacked dimension accepted by [`dense_subspace_eigs`].
pub const MAX_DENSE_DIM: usize = 100;

struct DenseEnergy {
    w: Vec<f64>,
    c: Vec<f64>,
    d: f64,
    dim: usize,
}

impl DenseEnergy {
    fn new<T: Scalar>(e: &EnergySpec<T>) -> Self {
        let dim = e.dim();
        let raw = e.quadratic.to_dense();
        let mut w = vec![0.0; dim * dim];
        for a in 0..dim {
            for b in 0..dim {
                w[a * dim + b] = 0.5 * (raw[[a, b]] + raw[[b, a]]).to_f64_lossy();
            }
        }
        Self {
            w,
            c: e.c.iter().map(|v| v.to_f64_lossy()).collect(),
            d: e.d.to_f64_lossy(),
            dim,
        }
    }
}

struct Search<'a> {
    e: &'a DenseEnergy,
    k: usize,
    n: usize,
    used: Vec<bool>,
    active: Vec<usize>,
    path: Vec<usize>,
    best: Option<(Vec<usize>, f64)>,
}

impl Search<'_> {
    /// Depth-first over injections in lexicographic order; only strictly
    /// better leaves replace the incumbent, so ties resolve to the smallest.
    fn run(&mut self, row: usize, partial: f64) {
        if row == self.k {
            let better = match &self.best {
                None => true,
                Some((_, v)) => partial < *v - 1e-12 * (1.0 + v.abs()),
            };
            if better {
                self.best = Some((self.path.clone(), partial));
            }
            return;
        }
        let dim = self.e.dim;
        for j in 0..self.n {
            if self.used[j] {
                continue;
            }
            let s = j * self.k + row;
            let w_row = &self.e.w[s * dim..(s + 1) * dim];
            let cross: f64 = self.active.iter().map(|&t| w_row[t]).sum();
            let add = w_row[s] + 2.0 * cross + self.e.c[s];
            self.used[j] = true;
            self.active.push(s);
            self.path.push(j);
            self.run(row + 1, partial + add);
            self.path.pop();
            self.active.pop();
            self.used[j] = false;
        }
    }
}

fn count_injections(k: usize, n: usize) -> usize {
    (n - k + 1..=n).fold(1usize, |acc, v| acc.saturating_mul(v))
}

/// Exact minimum over injective assignments of the `e.k` rows into the
/// `e.n` columns. Ties go to the lexicographically smallest assignment.
pub fn brute_force_injective<T: Scalar>(e: &EnergySpec<T>) -> Result<(Permutation, T)> {
    let (k, n) = (e.k, e.n);
    if k > n {
        return Err(Error::InvalidInput(format!("{k} sources cannot map injectively into {n} targets")));
    }
    let count = count_injections(k, n);
    if count > MAX_INJECTIONS {
        return Err(Error::TooLarge {
            what: "injection count",
            size: count,
            limit: MAX_INJECTIONS,
        });
    }
    let dense = DenseEnergy::new(e);
    let mut search = Search {
        e: &dense,
        k,
        n,
        used: vec![false; n],
        active: Vec::with_capacity(k),
        path: Vec::with_capacity(k),
        best: None,
    };
    search.run(0, dense.d);
    let (assignment, value) = search.best.expect("at least one injection");
    Ok((Permutation::new(assignment, n)?, T::of(value)))
}

/// Exact minimum over all permutations (`n <= 10`).
pub fn brute_force_min<T: Scalar>(e: &EnergySpec<T>) -> Result<(Permutation, T)> {
    if !e.is_square() {
        return Err(Error::InvalidInput(format!("expected a square problem, got {}x{}", e.k, e.n)));
    }
    if e.n > MAX_BRUTE_FORCE_N {
        return Err(Error::TooLarge {
            what: "permutation size",
            size: e.n,
            limit: MAX_BRUTE_FORCE_N,
        });
    }
    brute_force_injective(e)
}

/// Extreme eigenvalues of `F' W F`, with `F` an orthonormal basis of the null
/// space of the marginal constraint matrix, by dense decomposition.
pub fn dense_subspace_eigs<T: Scalar>(e: &EnergySpec<T>) -> Result<(T, T)> {
    let (k, n) = (e.k, e.n);
    let dim = k * n;
    if dim > MAX_DENSE_DIM {
        return Err(Error::TooLarge {
            what: "stacked dimension",
            size: dim,
            limit: MAX_DENSE_DIM,
        });
    }
    // rows 0..k: row sums, rows k..k+n: column sums
    let a = DMatrix::<f64>::from_fn(k + n, dim, |r, s| {
        let (i, j) = (s % k, s / k);
        if (r < k && r == i) || (r >= k && r - k == j) {
            1.0
        } else {
            0.0
        }
    });
    let gram = a.transpose() * &a;
    let eig = SymmetricEigen::new(gram);
    let null: Vec<usize> = (0..dim).filter(|&idx| eig.eigenvalues[idx].abs() < 1e-9).collect();
    if null.is_empty() {
        return Ok((T::zero(), T::zero()));
    }
    let f = DMatrix::<f64>::from_fn(dim, null.len(), |r, c| eig.eigenvectors[(r, null[c])]);
    let raw = e.quadratic.to_dense();
    let w = DMatrix::<f64>::from_fn(dim, dim, |r, c| 0.5 * (raw[[r, c]] + raw[[c, r]]).to_f64_lossy());
    let reduced = f.transpose() * w * &f;
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let ev = SymmetricEigen::new(reduced).eigenvalues;
    let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((T::of(lo), T::of(hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{stack, QuadraticOperator};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_energy(k: usize, n: usize, seed: u64) -> EnergySpec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = k * n;
        let w = Array2::from_shape_fn((dim, dim), |_| rng.random::<f64>() - 0.5);
        let c = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        EnergySpec::new(k, n, QuadraticOperator::dense(w).unwrap(), c, 0.25).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn constant_energy_ties_to_identity() {
        let e = EnergySpec::new(4, 4, QuadraticOperator::<f64>::zero(16), vec![0.0; 16], 3.0).unwrap();
        let (p, v) = brute_force_min(&e).unwrap();
        assert_eq!(p, Permutation::identity(4));
        assert_eq!(v, 3.0);
    }

    #[test]
    fn linear_term_favors_swap() {
        let c = stack(&array![[1.0, 0.0], [0.0, 1.0]]);
        let e = EnergySpec::new(2, 2, QuadraticOperator::<f64>::zero(4), c, 0.0).unwrap();
        let (p, v) = brute_force_min(&e).unwrap();
        assert_eq!(p.assignment(), &[1, 0]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn matches_naive_enumeration() {
        for seed in 0..4 {
            let e = random_energy(5, 5, seed);
            let (p, v) = brute_force_min(&e).unwrap();
            let naive = permutations(5)
                .into_iter()
                .map(|a| e.eval_assignment(&Permutation::new(a, 5).unwrap()).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!((v - naive).abs() < 1e-12);
            assert!((e.eval_assignment(&p).unwrap() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn injective_single_row_and_square_agree() {
        let e = random_energy(1, 4, 7);
        let (p, v) = brute_force_injective(&e).unwrap();
        let best = (0..4)
            .map(|j| e.eval_assignment(&Permutation::new(vec![j], 4).unwrap()).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!((v - best).abs() < 1e-12);
        assert_eq!(p.k(), 1);
        let sq = random_energy(4, 4, 8);
        assert_eq!(brute_force_injective(&sq).unwrap(), brute_force_min(&sq).unwrap());
    }

    #[test]
    fn size_limits() {
        let e = EnergySpec::quadratic_only(11, 11, QuadraticOperator::<f64>::zero(121)).unwrap();
        assert!(matches!(brute_force_min(&e), Err(Error::TooLarge { .. })));
        assert!(matches!(dense_subspace_eigs(&e), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn subspace_eigs_of_scaled_identity() {
        let e = EnergySpec::quadratic_only(3, 3, QuadraticOperator::dense(Array2::<f64>::eye(9) * 2.5).unwrap()).unwrap();
        let (lo, hi) = dense_subspace_eigs(&e).unwrap();
        assert!((lo - 2.5).abs() < 1e-12 && (hi - 2.5).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_has_one_direction() {
        let e = random_energy(2, 2, 3);
        let (lo, hi) = dense_subspace_eigs(&e).unwrap();
        assert!((lo - hi).abs() < 1e-12);
        let v: Vec<f64> = stack(&array![[0.5, -0.5], [-0.5, 0.5]]);
        let wv = e.quadratic.apply_vec(&v);
        let q: f64 = v.iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>() / v.iter().map(|a| a * a).sum::<f64>();
        assert!((lo - q).abs() < 1e-12);
    }
}
