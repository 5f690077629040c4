//! KL projection of a positive kernel onto a coupling polytope by alternating
//! row and column scaling.
//!
//! The kernel is held as `exp(L + alpha 1' + 1 beta')` with the offsets chosen
//! by log-sum-exp, and the cheap multiplicative updates run on top of that.
//! Whenever a multiplier drifts out of a safe range it is folded back into the
//! offsets, so kernels spanning hundreds of orders of magnitude stay finite.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::problem::{Coupling, MarginalSpec};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornConfig {
    /// Target for the largest relative deviation of any line sum.
    pub tol: f64,
    pub max_iters: usize,
    /// Keep the marginal error of every iteration in [`ScalingState::history`].
    pub record_history: bool,
    /// Scaling sweeps before switching to Newton steps on the scalings;
    /// `None` disables them. Only used when the kernel has at most
    /// [`NEWTON_MAX_LINES`] rows plus columns.
    pub newton_after: Option<usize>,
}

/// Largest `rows + cols` handled by the dense Newton solve.
pub const NEWTON_MAX_LINES: usize = 1000;

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 10_000,
            record_history: false,
            newton_after: Some(30),
        }
    }
}

/// Scalings such that the coupling is `diag(exp(log_u)) K diag(exp(log_v))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingState<T> {
    pub log_u: Vec<T>,
    pub log_v: Vec<T>,
    pub iterations: usize,
    pub marginal_error: T,
    pub history: Vec<T>,
}

fn log_sum_exp<T: Scalar>(vals: impl Iterator<Item = T> + Clone) -> T {
    let m = vals.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<T>().ln()
}

struct Scaler<'a, T: Scalar> {
    log_kernel: &'a Array2<T>,
    marginals: &'a MarginalSpec<T>,
    alpha: Vec<T>,
    beta: Vec<T>,
    kernel: Array2<T>,
    u: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Scaler<'_, T> {
    fn refresh_kernel(&mut self) {
        let (alpha, beta) = (&self.alpha, &self.beta);
        self.kernel
            .indexed_iter_mut()
            .zip(self.log_kernel.iter())
            .for_each(|(((i, j), k), &l)| *k = (l + alpha[i] + beta[j]).exp());
    }

    /// Exact row step in the log domain: folds `v` into `beta` and resets `u`.
    fn absorb_rows(&mut self) {
        self.solve_rows();
        self.refresh_kernel();
    }

    /// [`Self::absorb_rows`] without refreshing the kernel.
    fn solve_rows(&mut self) {
        for (b, v) in self.beta.iter_mut().zip(self.v.iter_mut()) {
            *b += v.ln();
            *v = T::one();
        }
        for (i, row) in self.log_kernel.outer_iter().enumerate() {
            let lse = log_sum_exp(row.iter().zip(&self.beta).map(|(&l, &b)| l + b));
            self.alpha[i] = self.marginals.rows[i].ln() - lse;
            self.u[i] = T::one();
        }
    }

    /// Exact column step in the log domain: folds `u` into `alpha` and resets `v`.
    fn absorb_cols(&mut self) {
        for (a, u) in self.alpha.iter_mut().zip(self.u.iter_mut()) {
            *a += u.ln();
            *u = T::one();
        }
        for (j, col) in self.log_kernel.columns().into_iter().enumerate() {
            let lse = log_sum_exp(col.iter().zip(&self.alpha).map(|(&l, &a)| l + a));
            self.beta[j] = self.marginals.cols[j].ln() - lse;
            self.v[j] = T::one();
        }
        self.refresh_kernel();
    }
}

/// Largest relative line-sum deviation of `exp(L + f 1' + 1 g')`.
fn scaled_error<T: Scalar>(log_kernel: &Array2<T>, marginals: &MarginalSpec<T>, f: &[f64], g: &[f64]) -> (f64, Array2<f64>) {
    let x = Array2::from_shape_fn(log_kernel.dim(), |(i, j)| (log_kernel[[i, j]].to_f64_lossy() + f[i] + g[j]).exp());
    let rows: Vec<f64> = marginals.rows.iter().map(|v| v.to_f64_lossy()).collect();
    let cols: Vec<f64> = marginals.cols.iter().map(|v| v.to_f64_lossy()).collect();
    let mut err = 0.0f64;
    for (i, row) in x.outer_iter().enumerate() {
        err = err.max((row.sum() - rows[i]).abs() / rows[i]);
    }
    for (j, col) in x.columns().into_iter().enumerate() {
        err = err.max((col.sum() - cols[j]).abs() / cols[j]);
    }
    (if err.is_finite() { err } else { f64::INFINITY }, x)
}

/// Damped Newton iteration on the log scalings `(f, g)`, fixing the gauge by
/// holding the last column's scaling. A step is accepted only if it lowers
/// the marginal error. Returns the error reached.
fn newton_scaling<T: Scalar>(
    log_kernel: &Array2<T>,
    marginals: &MarginalSpec<T>,
    f: &mut [f64],
    g: &mut [f64],
    tol: f64,
    max_steps: usize,
    history: Option<&mut Vec<T>>,
) -> f64 {
    let (m, n) = log_kernel.dim();
    let rows: Vec<f64> = marginals.rows.iter().map(|v| v.to_f64_lossy()).collect();
    let cols: Vec<f64> = marginals.cols.iter().map(|v| v.to_f64_lossy()).collect();
    let (mut err, mut x) = scaled_error(log_kernel, marginals, f, g);
    let mut history = history;
    let size = m + n - 1;
    for _ in 0..max_steps {
        if err <= tol {
            break;
        }
        let row_sums: Vec<f64> = x.outer_iter().map(|r| r.sum()).collect();
        let col_sums: Vec<f64> = x.columns().into_iter().map(|c| c.sum()).collect();
        let mut jac = DMatrix::<f64>::zeros(size, size);
        let mut rhs = DVector::<f64>::zeros(size);
        for i in 0..m {
            jac[(i, i)] = row_sums[i];
            rhs[i] = rows[i] - row_sums[i];
            for j in 0..n - 1 {
                jac[(i, m + j)] = x[[i, j]];
                jac[(m + j, i)] = x[[i, j]];
            }
        }
        for j in 0..n - 1 {
            jac[(m + j, m + j)] = col_sums[j];
            rhs[m + j] = cols[j] - col_sums[j];
        }
        let ridge = 1e-14 * jac.diagonal().amax();
        for d in 0..size {
            jac[(d, d)] += ridge;
        }
        let Some(step) = jac.cholesky().map(|c| c.solve(&rhs)) else {
            break;
        };
        if step.iter().any(|v| !v.is_finite()) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let f_try: Vec<f64> = (0..m).map(|i| f[i] + t * step[i]).collect();
            let g_try: Vec<f64> = (0..n).map(|j| if j < n - 1 { g[j] + t * step[m + j] } else { g[j] }).collect();
            let (e_try, x_try) = scaled_error(log_kernel, marginals, &f_try, &g_try);
            if e_try < err {
                f.copy_from_slice(&f_try);
                g.copy_from_slice(&g_try);
                err = e_try;
                x = x_try;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        if let Some(h) = history.as_deref_mut() {
            h.push(T::of(err));
        }
    }
    err
}

fn in_safe_range<T: Scalar>(x: T) -> bool {
    let big = T::max_value().powf(T::of(0.25));
    x.is_finite() && x > T::one() / big && x < big
}

/// Finds `argmin KL(X | exp(log_kernel))` subject to the marginals.
///
/// Entries of `log_kernel` may be `-inf` (a structural zero) but no row or
/// column may be entirely `-inf`.
pub fn kl_project<T: Scalar>(
    log_kernel: &Array2<T>,
    marginals: &MarginalSpec<T>,
    cfg: &SinkhornConfig,
) -> Result<(Coupling<T>, ScalingState<T>)> {
    let (m, n) = marginals.shape();
    if log_kernel.dim() != (m, n) {
        return Err(Error::DimensionMismatch {
            expected: m * n,
            found: log_kernel.len(),
        });
    }
    let rm: T = marginals.rows.iter().copied().sum();
    let cm: T = marginals.cols.iter().copied().sum();
    if (rm - cm).abs() > T::of(1e-9) * rm.max(cm) {
        return Err(Error::InfeasibleMarginals {
            row_mass: rm.to_f64_lossy(),
            col_mass: cm.to_f64_lossy(),
        });
    }
    if log_kernel.iter().any(|v| v.is_nan() || *v == T::infinity()) {
        return Err(Error::NonFinite("log kernel"));
    }
    for (i, row) in log_kernel.outer_iter().enumerate() {
        if row.iter().all(|v| *v == T::neg_infinity()) {
            return Err(Error::ZeroLine { axis: "row", index: i });
        }
    }
    for (j, col) in log_kernel.columns().into_iter().enumerate() {
        if col.iter().all(|v| *v == T::neg_infinity()) {
            return Err(Error::ZeroLine { axis: "column", index: j });
        }
    }

    let mut s = Scaler {
        log_kernel,
        marginals,
        alpha: vec![T::zero(); m],
        beta: vec![T::zero(); n],
        kernel: Array2::zeros((m, n)),
        u: vec![T::one(); m],
        v: vec![T::one(); n],
    };
    s.solve_rows();
    s.absorb_cols();

    let tol = T::of(cfg.tol);
    let mut history = Vec::new();
    let mut row_sums = vec![T::zero(); m];
    let mut col_sums = vec![T::zero(); n];
    let mut err = T::infinity();
    let mut iterations = 0;
    while iterations <= cfg.max_iters {
        // columns are exact here; measure the rows
        for (i, row) in s.kernel.outer_iter().enumerate() {
            row_sums[i] = row.iter().zip(&s.v).fold(T::zero(), |acc, (&k, &v)| acc + k * v);
        }
        err = s
            .u
            .iter()
            .zip(&row_sums)
            .zip(&marginals.rows)
            .fold(T::zero(), |w, ((&u, &rs), &r)| w.max((u * rs - r).abs() / r));
        if !err.is_finite() {
            return Err(Error::NonFinite("scaling"));
        }
        if cfg.record_history {
            history.push(err);
        }
        if err <= tol || iterations == cfg.max_iters {
            break;
        }
        if cfg.newton_after == Some(iterations) && m + n <= NEWTON_MAX_LINES {
            let mut f: Vec<f64> = s.alpha.iter().zip(&s.u).map(|(&a, &u)| (a + u.ln()).to_f64_lossy()).collect();
            let mut g: Vec<f64> = s.beta.iter().zip(&s.v).map(|(&b, &v)| (b + v.ln()).to_f64_lossy()).collect();
            let reached = newton_scaling(
                log_kernel,
                marginals,
                &mut f,
                &mut g,
                cfg.tol,
                50,
                cfg.record_history.then_some(&mut history),
            );
            if reached < err.to_f64_lossy() {
                s.alpha = f.into_iter().map(T::of).collect();
                s.beta = g.into_iter().map(T::of).collect();
                s.u.fill(T::one());
                s.v.fill(T::one());
                s.refresh_kernel();
                if reached <= cfg.tol {
                    err = T::of(reached);
                    break;
                }
                // columns are no longer exact; the next sweep restores them
                s.absorb_cols();
                iterations += 1;
                continue;
            }
        }
        iterations += 1;

        let mut ok = true;
        for i in 0..m {
            s.u[i] = marginals.rows[i] / row_sums[i];
            ok &= in_safe_range(s.u[i]);
        }
        if !ok {
            for u in s.u.iter_mut() {
                if !in_safe_range(*u) {
                    *u = T::one();
                }
            }
            s.absorb_rows();
        }

        col_sums.fill(T::zero());
        for (row, &u) in s.kernel.outer_iter().zip(&s.u) {
            for (cs, &k) in col_sums.iter_mut().zip(row.iter()) {
                *cs += k * u;
            }
        }
        let mut ok = true;
        for j in 0..n {
            s.v[j] = marginals.cols[j] / col_sums[j];
            ok &= in_safe_range(s.v[j]);
        }
        if !ok {
            for v in s.v.iter_mut() {
                if !in_safe_range(*v) {
                    *v = T::one();
                }
            }
            s.absorb_cols();
        }
    }

    let mut values = s.kernel.clone();
    for ((i, j), x) in values.indexed_iter_mut() {
        *x = s.u[i] * *x * s.v[j];
    }
    let marginal_error = marginals.deviation(&values);
    if err > tol {
        return Err(Error::NonConvergence {
            what: "sinkhorn",
            iterations,
            residual: marginal_error.to_f64_lossy(),
        });
    }
    let state = ScalingState {
        log_u: s.alpha.iter().zip(&s.u).map(|(&a, &u)| a + u.ln()).collect(),
        log_v: s.beta.iter().zip(&s.v).map(|(&b, &v)| b + v.ln()).collect(),
        iterations,
        marginal_error,
        history,
    };
    Ok((
        Coupling {
            values,
            marginals: marginals.clone(),
        },
        state,
    ))
}

/// KL divergence `sum x log(x / y) - x + y` of two nonnegative matrices.
pub fn kl_divergence<T: Scalar>(x: &Array2<T>, log_y: &Array2<T>) -> T {
    x.iter()
        .zip(log_y.iter())
        .fold(T::zero(), |acc, (&xv, &ly)| {
            let y = ly.exp();
            if xv > T::zero() {
                acc + xv * (xv.ln() - ly) - xv + y
            } else {
                acc + y
            }
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_kernel_gives_uniform_coupling() {
        let marg = MarginalSpec::<f64>::doubly_stochastic(3);
        let (c, _) = kl_project(&Array2::zeros((3, 3)), &marg, &SinkhornConfig::default()).unwrap();
        assert!(c.values.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn feasible_kernel_is_a_fixed_point() {
        let x = array![[0.5, 0.25, 0.25], [0.25, 0.5, 0.25], [0.25, 0.25, 0.5]];
        let marg = MarginalSpec::<f64>::doubly_stochastic(3);
        let (c, st) = kl_project(&x.mapv(f64::ln), &marg, &SinkhornConfig::default()).unwrap();
        for (a, b) in c.values.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(st.log_u.iter().chain(&st.log_v).all(|v| v.abs() < 1e-14));
        assert_eq!(st.iterations, 0);
    }

    #[test]
    fn rectangular_marginals_and_scaling_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lk = Array2::from_shape_fn((4, 5), |_| rng.random::<f64>() * 3.0 - 1.5);
        let marg = MarginalSpec::new(vec![2.0, 1.0, 1.0, 1.0], vec![1.0; 5]).unwrap();
        let (c, st) = kl_project(&lk, &marg, &SinkhornConfig::default()).unwrap();
        assert!(c.feasibility_error() <= 1e-9);
        for ((i, j), x) in c.values.indexed_iter() {
            let rebuilt = (lk[[i, j]] + st.log_u[i] + st.log_v[j]).exp();
            assert!((x - rebuilt).abs() < 1e-12);
        }
    }

    #[test]
    fn extreme_kernels_stay_finite() {
        let lk = array![[0.0, -800.0, -1500.0], [-900.0, 0.0, -700.0], [-600.0, -650.0, 0.0]];
        let marg = MarginalSpec::<f64>::doubly_stochastic(3);
        let (c, _) = kl_project(&lk, &marg, &SinkhornConfig::default()).unwrap();
        assert!(c.feasibility_error() <= 1e-9);
        assert!(c.values.iter().all(|v| v.is_finite()));
        assert!((c.values[[0, 0]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let marg = MarginalSpec::<f64>::doubly_stochastic(2);
        let lk = array![[f64::NEG_INFINITY, f64::NEG_INFINITY], [0.0, 0.0]];
        assert!(matches!(
            kl_project(&lk, &marg, &SinkhornConfig::default()),
            Err(Error::ZeroLine { axis: "row", index: 0 })
        ));
        let bad = MarginalSpec {
            rows: vec![1.0, 1.0],
            cols: vec![1.0, 2.0],
        };
        assert!(matches!(
            kl_project(&Array2::zeros((2, 2)), &bad, &SinkhornConfig::default()),
            Err(Error::InfeasibleMarginals { .. })
        ));
        // feasible only in the limit, so plain sweeps converge sublinearly
        let stuck = array![[0.0, f64::NEG_INFINITY], [0.0, 0.0]];
        let cfg = SinkhornConfig {
            max_iters: 50,
            newton_after: None,
            ..SinkhornConfig::default()
        };
        assert!(matches!(kl_project(&stuck, &marg, &cfg), Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn works_in_single_precision() {
        let lk = Array2::<f32>::from_shape_fn((3, 3), |(i, j)| -((i + 2 * j) as f32));
        let marg = MarginalSpec::<f32>::doubly_stochastic(3);
        let cfg = SinkhornConfig {
            tol: 1e-5,
            ..SinkhornConfig::default()
        };
        let (c, _) = kl_project(&lk, &marg, &cfg).unwrap();
        assert!(c.feasibility_error() <= 1e-5);
    }

    #[test]
    fn nearly_decomposable_kernel_converges() {
        let lk = array![
            [-0.0852, -7.596, -2.476, -9.1e-6],
            [-18.96, -0.1116, -8.171, -12.29],
            [-2.693, -29.97, -0.1408, -15.79]
        ];
        let marg = MarginalSpec::new(vec![2.0, 1.0, 1.0], vec![1.0; 4]).unwrap();
        let plain = SinkhornConfig {
            newton_after: None,
            ..SinkhornConfig::default()
        };
        assert!(kl_project(&lk, &marg, &plain).is_err());
        let (c, state) = kl_project(&lk, &marg, &SinkhornConfig::default()).unwrap();
        assert!(c.feasibility_error() <= 1e-9);
        assert!(state.iterations < 1000);
    }
}
