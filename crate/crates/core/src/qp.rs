//! Local minimization of `f(x) = x' H x + c' x` over a coupling polytope by
//! entropic mirror descent.
//!
//! Each outer step solves
//! `min eta KL(x | exp(-g/alpha)) + (1 - eta) KL(x | x_k)` over the polytope,
//! where `g` is the gradient at `x_k`. The minimizer is the KL projection of
//! the kernel `exp(-(eta/alpha) g + (1 - eta) log x_k)`, computed by Sinkhorn
//! scaling. `alpha` is re-chosen every step so the exponent arguments stay in
//! `[-cap, cap]`.

use ndarray::{Array2, ShapeBuilder};

use crate::error::{Error, Result};
use crate::problem::{stack, Coupling, EnergySpec};
use crate::scalar::{dot, max_abs, Scalar};
use crate::sinkhorn::{kl_project, SinkhornConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Weight of the gradient kernel against the proximity term, in `(0, 1]`.
    pub eta: f64,
    /// Bound on `|g_i| / alpha`.
    pub exponent_cap: f64,
    pub sinkhorn: SinkhornConfig,
    /// Stop once `max |x_{k+1} - x_k| <= outer_tol`.
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    /// Largest marginal violation accepted for the initial coupling.
    pub init_tol: f64,
    /// Halve `eta` for a step whenever the regularized objective would rise.
    pub backtrack: bool,
    pub min_eta: f64,
    /// Extra passes after convergence, each with `exponent_cap` ten times
    /// larger and `eta` ten times smaller, shrinking the entropic bias.
    pub refinements: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            exponent_cap: 100.0,
            sinkhorn: SinkhornConfig::default(),
            outer_tol: 1e-7,
            max_outer_iters: 5000,
            init_tol: 1e-6,
            backtrack: true,
            min_eta: 1e-8,
            refinements: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidInput(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.exponent_cap > 0.0 && self.exponent_cap.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "exponent cap must be positive, got {}",
                self.exponent_cap
            )));
        }
        Ok(())
    }

    /// Defaults plus two refinement passes; used where the objective value
    /// itself is reported.
    pub fn precise() -> Self {
        Self {
            refinements: 2,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveTrace<T> {
    /// `f(x_k)` at the start of each outer step.
    pub objective: Vec<T>,
    /// `alpha_k` used in each outer step.
    pub alphas: Vec<T>,
    /// `eta` actually used in each outer step, after backtracking.
    pub etas: Vec<T>,
    /// Largest entry of `|g(x_k)|` in each outer step.
    pub grad_max: Vec<T>,
    /// Marginal error reported by Sinkhorn in each outer step.
    pub marginal_errors: Vec<T>,
    pub backtracks: usize,
    pub final_objective: T,
    pub final_delta: T,
    pub converged: bool,
}

impl<T: Scalar> SolveTrace<T> {
    pub fn iterations(&self) -> usize {
        self.alphas.len()
    }

    pub fn max_marginal_error(&self) -> T {
        self.marginal_errors.iter().copied().fold(T::zero(), T::max)
    }
}

fn entry_floor<T: Scalar>() -> T {
    T::of(1e-300).max(T::min_positive_value())
}

fn neg_entropy<T: Scalar>(x: &[T], log_x: &[T]) -> T {
    x.iter().zip(log_x).fold(T::zero(), |acc, (&v, &l)| acc + v * l)
}

/// Runs the mirror-descent scheme from `x_init`. `h` writes `H x`; it must be
/// symmetric. The gradient used is `2 H x + c`.
pub fn solve_quadratic<T, H>(h: H, c: &[T], x_init: &Coupling<T>, cfg: &SolverConfig) -> Result<(Coupling<T>, SolveTrace<T>)>
where
    T: Scalar,
    H: Fn(&[T], &mut [T]),
{
    cfg.validate()?;
    let (k, n) = x_init.shape();
    let dim = k * n;
    if c.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: c.len(),
        });
    }
    let init_err = x_init.feasibility_error();
    if !(init_err <= T::of(cfg.init_tol)) || x_init.values.iter().any(|v| !(*v >= T::zero())) {
        return Err(Error::InfeasibleConstraints(format!(
            "initial coupling violates marginals by {init_err}"
        )));
    }
    let marginals = &x_init.marginals;
    let floor = entry_floor::<T>();
    let mut x: Vec<T> = stack(&x_init.values).into_iter().map(|v| v.max(floor)).collect();
    let mut hx = vec![T::zero(); dim];
    let mut next_x = vec![T::zero(); dim];
    let mut next_hx = vec![T::zero(); dim];
    let mut log_x: Vec<T> = x.iter().map(|v| v.ln()).collect();
    let mut next_log_x = vec![T::zero(); dim];
    let mut g = vec![T::zero(); dim];
    let mut log_kernel = Array2::<T>::zeros((k, n).f());
    let objective_of = |x: &[T], hx: &[T]| dot(x, hx) + dot(c, x);
    let two = T::of(2.0);
    let min_eta = T::of(cfg.min_eta);

    let mut trace = SolveTrace {
        objective: Vec::new(),
        alphas: Vec::new(),
        etas: Vec::new(),
        grad_max: Vec::new(),
        marginal_errors: Vec::new(),
        backtracks: 0,
        final_objective: T::zero(),
        final_delta: T::zero(),
        converged: false,
    };

    h(&x, &mut hx);
    let mut f = objective_of(&x, &hx);
    let mut cap = T::of(cfg.exponent_cap);
    let mut base_eta = T::of(cfg.eta);
    'stages: for stage in 0..=cfg.refinements {
        if stage > 0 {
            cap *= T::of(10.0);
            base_eta /= T::of(10.0);
        }
        let mut eta = base_eta;
        trace.converged = false;
        for _ in 0..cfg.max_outer_iters {
            if !f.is_finite() {
                return Err(Error::NonFinite("objective"));
            }
            for i in 0..dim {
                g[i] = two * hx[i] + c[i];
            }
            let gmax = max_abs(&g);
            if gmax == T::zero() {
                trace.converged = true;
                break 'stages;
            }
            let alpha = gmax / cap;
            // the scheme is mirror descent on f + alpha <x, log x> with step eta / alpha
            let reg = f + alpha * neg_entropy(&x, &log_x);
            loop {
                let step = eta / alpha;
                let keep = T::one() - eta;
                let slots = log_kernel.as_slice_memory_order_mut().expect("contiguous");
                for (lk, (&gi, &lx)) in slots.iter_mut().zip(g.iter().zip(&log_x)) {
                    *lk = -step * gi + keep * lx;
                }
                let (next, state) = kl_project(&log_kernel, marginals, &cfg.sinkhorn)?;
                for ((nx, lx), &v) in next_x.iter_mut().zip(next_log_x.iter_mut()).zip(next.values.t().iter()) {
                    *nx = v.max(floor);
                    *lx = nx.ln();
                }
                h(&next_x, &mut next_hx);
                let next_f = objective_of(&next_x, &next_hx);
                let next_reg = next_f + alpha * neg_entropy(&next_x, &next_log_x);
                let slack = T::of(1e-12) * (reg.abs() + alpha);
                if !cfg.backtrack || next_reg <= reg + slack || eta <= min_eta {
                    trace.objective.push(f);
                    trace.alphas.push(alpha);
                    trace.etas.push(eta);
                    trace.grad_max.push(gmax);
                    trace.marginal_errors.push(state.marginal_error);
                    break;
                }
                eta = (eta * T::of(0.5)).max(min_eta);
                trace.backtracks += 1;
            }
            let delta = x
                .iter()
                .zip(&next_x)
                .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
            std::mem::swap(&mut x, &mut next_x);
            std::mem::swap(&mut hx, &mut next_hx);
            std::mem::swap(&mut log_x, &mut next_log_x);
            f = objective_of(&x, &hx);
            trace.final_delta = delta;
            if delta <= T::of(cfg.outer_tol) {
                trace.converged = true;
                break;
            }
        }
    }

    trace.final_objective = f;
    if !f.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    let values = crate::problem::unstack(&x, k, n)?;
    Ok((
        Coupling {
            values,
            marginals: marginals.clone(),
        },
        trace,
    ))
}

/// Minimizes the shifted energy `E(X) - a |X|^2` (up to constants) from
/// `x_init`, i.e. [`solve_quadratic`] with `H = W - a I`.
pub fn solve_shifted<T: Scalar>(
    e: &EnergySpec<T>,
    a: T,
    x_init: &Coupling<T>,
    cfg: &SolverConfig,
) -> Result<(Coupling<T>, SolveTrace<T>)> {
    if x_init.shape() != (e.k, e.n) {
        return Err(Error::DimensionMismatch {
            expected: e.dim(),
            found: x_init.values.len(),
        });
    }
    let h = |x: &[T], y: &mut [T]| {
        e.quadratic.apply(x, y);
        if a != T::zero() {
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi -= a * xi;
            }
        }
    };
    solve_quadratic(h, &e.c, x_init, cfg)
}
