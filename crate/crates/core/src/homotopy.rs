//! Convex relaxation, the concave homotopy and the bound hierarchy.
//!
//! For any `a`, `E(X, a) = E(X) - a |X|^2 + a n` takes the same values as `E`
//! on 0/1 points of the polytope. At `a = lambda_bar_min` it is convex over the
//! polytope, which gives the tightest such lower bound; at `a = lambda_bar_max`
//! it is concave, so its local minima sit on vertices. The homotopy walks `a`
//! between the two, warm-starting every stage from the previous one.

use crate::error::{Error, Result};
use crate::problem::{stack_index, Coupling, EnergySpec, MarginalSpec, Permutation};
use crate::projection::{l2_project, max_coordinate_project};
use crate::qp::{solve_shifted, SolverConfig};
use crate::scalar::Scalar;
use crate::spectral::{bottom_tangent_vector, full_range, lambda_bar_range_shaped, EigConfig, EigRange};

#[derive(Clone, Debug, PartialEq)]
pub struct HomotopyConfig {
    /// Number of shift values `N + 1`, endpoints included.
    pub num_samples: usize,
    /// Overrides `lambda_bar_min` as the first shift.
    pub a_lo: Option<f64>,
    /// Overrides `lambda_bar_max` as the last shift.
    pub a_hi: Option<f64>,
    /// Round the last stage by nearest permutation; otherwise by row argmax,
    /// which must then be injective.
    pub final_l2_projection: bool,
    /// Solver for every stage after the first.
    pub solver: SolverConfig,
    /// Solver for the convex stage and for every reported bound.
    pub bound_solver: SolverConfig,
    pub eig: EigConfig,
}

impl Default for HomotopyConfig {
    fn default() -> Self {
        Self {
            num_samples: 10,
            a_lo: None,
            a_hi: None,
            final_l2_projection: true,
            solver: SolverConfig::default(),
            bound_solver: SolverConfig::precise(),
            eig: EigConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord<T> {
    pub a: T,
    /// `E(X, a)` at the warm start.
    pub initial_objective: T,
    /// `E(X, a)` at the stage solution.
    pub final_objective: T,
    pub iterations: usize,
    pub converged: bool,
    pub integrality_gap: T,
    /// `|X|_F^2` of the stage solution.
    pub norm_sq: T,
    /// The warm start was a stationary point that is not a vertex; the stage
    /// was re-solved from a perturbed copy.
    pub perturbed: bool,
}

#[derive(Clone, Debug)]
pub struct HomotopyTrace<T: Scalar> {
    pub range: EigRange<T>,
    pub stages: Vec<StageRecord<T>>,
    /// Minimum of the convex stage, a lower bound on every assignment.
    pub lower_bound: T,
    /// Last stage solution, before rounding.
    pub final_coupling: Coupling<T>,
}

/// `count` uniform samples of `[lo, hi]` with exact endpoints.
pub fn sample_schedule<T: Scalar>(lo: T, hi: T, count: usize) -> Result<Vec<T>> {
    if lo == hi {
        return Ok(vec![lo]);
    }
    if count < 2 {
        return Err(Error::InvalidInput(format!(
            "{count} samples cannot span the interval [{lo}, {hi}]"
        )));
    }
    let steps = T::of_usize(count - 1);
    let mut out: Vec<T> = (0..count).map(|i| lo + (hi - lo) * T::of_usize(i) / steps).collect();
    out[count - 1] = hi;
    Ok(out)
}

fn ds_marginals<T: Scalar>(e: &EnergySpec<T>) -> Result<MarginalSpec<T>> {
    if !e.is_square() {
        return Err(Error::InvalidInput(format!(
            "expected a square problem, got {}x{}",
            e.k, e.n
        )));
    }
    Ok(MarginalSpec::doubly_stochastic(e.n))
}

fn check_shape<T: Scalar>(e: &EnergySpec<T>, marginals: &MarginalSpec<T>) -> Result<()> {
    if marginals.shape() != (e.k, e.n) {
        return Err(Error::DimensionMismatch {
            expected: e.dim(),
            found: marginals.rows.len() * marginals.cols.len(),
        });
    }
    Ok(())
}

/// Restricted spectrum over the polytope of `marginals`.
pub fn restricted_range<T: Scalar>(e: &EnergySpec<T>, cfg: &EigConfig) -> Result<EigRange<T>> {
    lambda_bar_range_shaped(e, e.k, e.n, cfg)
}

/// Step along the escape direction, as a fraction of the smallest entry.
const ESCAPE_STEP: f64 = 0.5;

/// Minimizes `E(X, a)` from `x_init` and records the stage.
fn run_stage<T: Scalar>(
    e: &EnergySpec<T>,
    a: T,
    x_init: &Coupling<T>,
    solver: &SolverConfig,
) -> Result<(Coupling<T>, StageRecord<T>)> {
    let initial_objective = e.eval_shifted(&x_init.stack(), a)?;
    let (x, trace) = solve_shifted(e, a, x_init, solver)?;
    record_stage(e, a, initial_objective, x, trace.iterations(), trace.converged, false)
}

/// Like [`run_stage`] for stages that need not be convex: if the solver
/// stays at a fractional warm start, that point is stationary but, away from
/// the convex end, typically not a minimum. The stage is then re-solved from
/// the warm start moved both ways along the direction of most negative
/// curvature, keeping the lower result.
fn run_nonconvex_stage<T: Scalar>(
    e: &EnergySpec<T>,
    a: T,
    x_init: &Coupling<T>,
    solver: &SolverConfig,
    range: &EigRange<T>,
    eig: &EigConfig,
) -> Result<(Coupling<T>, StageRecord<T>)> {
    let initial_objective = e.eval_shifted(&x_init.stack(), a)?;
    let (x, trace) = solve_shifted(e, a, x_init, solver)?;
    let moved = x
        .values
        .iter()
        .zip(x_init.values.iter())
        .fold(T::zero(), |m, (&p, &q)| m.max((p - q).abs()));
    let stuck = moved <= T::of(1e-9) * x.marginals.total_mass() && x.integrality_gap() > T::of(1e-6);
    if !stuck {
        return record_stage(e, a, initial_objective, x, trace.iterations(), trace.converged, false);
    }
    let (rows, cols) = x_init.shape();
    let v = bottom_tangent_vector(e, rows, cols, range.lambda_bar_max, eig)?;
    let xmin = x_init.values.iter().fold(T::infinity(), |m, &t| m.min(t));
    let vmax = v.iter().fold(T::zero(), |m, &t| m.max(t.abs()));
    let mut iterations = trace.iterations();
    let mut best: Option<(T, Coupling<T>, bool)> = None;
    if vmax > T::zero() {
        // keeps every entry above half its current value
        let step = T::of(ESCAPE_STEP) * xmin / vmax;
        for sign in [T::one(), -T::one()] {
            let mut start = x_init.clone();
            for ((i, j), val) in start.values.indexed_iter_mut() {
                *val += sign * step * v[stack_index(i, j, rows)];
            }
            let (y, retry) = solve_shifted(e, a, &start, solver)?;
            iterations += retry.iterations();
            let f = e.eval_shifted(&y.stack(), a)?;
            if best.as_ref().is_none_or(|b| f < b.0) {
                best = Some((f, y, retry.converged));
            }
        }
    }
    let Some((_, y, converged)) = best else {
        return record_stage(e, a, initial_objective, x, trace.iterations(), trace.converged, false);
    };
    record_stage(e, a, initial_objective, y, iterations, converged, true)
}

fn record_stage<T: Scalar>(
    e: &EnergySpec<T>,
    a: T,
    initial_objective: T,
    x: Coupling<T>,
    iterations: usize,
    converged: bool,
    perturbed: bool,
) -> Result<(Coupling<T>, StageRecord<T>)> {
    let final_objective = e.eval_shifted(&x.stack(), a)?;
    let record = StageRecord {
        a,
        initial_objective,
        final_objective,
        iterations,
        converged,
        integrality_gap: x.integrality_gap(),
        norm_sq: x.values.iter().map(|&v| v * v).sum(),
        perturbed,
    };
    Ok((x, record))
}

/// Convex relaxation over the polytope of `marginals`: minimizes `E(X, a0)`
/// with `a0 = lambda_bar_min` (or `cfg.a_lo`). Returns the minimizer, the
/// bound and the restricted spectrum.
pub fn relax_convex_marginals<T: Scalar>(
    e: &EnergySpec<T>,
    marginals: &MarginalSpec<T>,
    cfg: &HomotopyConfig,
) -> Result<(Coupling<T>, T, EigRange<T>)> {
    check_shape(e, marginals)?;
    let range = restricted_range(e, &cfg.eig)?;
    let a0 = cfg.a_lo.map(T::of).unwrap_or(range.lambda_bar_min);
    let (x, record) = run_stage(e, a0, &marginals.uniform_coupling(), &cfg.bound_solver)?;
    Ok((x, record.final_objective, range))
}

/// Convex relaxation over doubly stochastic matrices.
pub fn relax_convex<T: Scalar>(e: &EnergySpec<T>, cfg: &HomotopyConfig) -> Result<(Coupling<T>, T)> {
    let (x, bound, _) = relax_convex_marginals(e, &ds_marginals(e)?, cfg)?;
    Ok((x, bound))
}

fn path<T: Scalar>(
    e: &EnergySpec<T>,
    marginals: &MarginalSpec<T>,
    cfg: &HomotopyConfig,
    hi_override: Option<T>,
) -> Result<HomotopyTrace<T>> {
    check_shape(e, marginals)?;
    let range = restricted_range(e, &cfg.eig)?;
    let lo = cfg.a_lo.map(T::of).unwrap_or(range.lambda_bar_min);
    let hi = hi_override.unwrap_or_else(|| cfg.a_hi.map(T::of).unwrap_or(range.lambda_bar_max));
    if hi < lo {
        return Err(Error::InvalidInput(format!("empty shift interval [{lo}, {hi}]")));
    }
    let schedule = sample_schedule(lo, hi, cfg.num_samples)?;
    let mut x = marginals.uniform_coupling();
    let mut stages = Vec::with_capacity(schedule.len());
    for (i, &a) in schedule.iter().enumerate() {
        let (next, record) = if i == 0 {
            run_stage(e, a, &x, &cfg.bound_solver)?
        } else {
            run_nonconvex_stage(e, a, &x, &cfg.solver, &range, &cfg.eig)?
        };
        x = next;
        stages.push(record);
    }
    Ok(HomotopyTrace {
        range,
        lower_bound: stages[0].final_objective,
        stages,
        final_coupling: x,
    })
}

/// Runs the homotopy over the polytope of `marginals` without rounding.
pub fn homotopy_path<T: Scalar>(
    e: &EnergySpec<T>,
    marginals: &MarginalSpec<T>,
    cfg: &HomotopyConfig,
) -> Result<HomotopyTrace<T>> {
    path(e, marginals, cfg, None)
}

/// Rounds a coupling whose rows are sources to an injective assignment.
pub fn round_coupling<T: Scalar>(x: &Coupling<T>, l2: bool) -> Result<Permutation> {
    if l2 {
        return l2_project(&x.values);
    }
    let rows = max_coordinate_project(&x.values);
    Permutation::new(rows, x.shape().1)
        .map_err(|_| Error::InfeasibleConstraints("row argmax rounding is not injective".into()))
}

/// Full pipeline over permutations: convex stage, homotopy to the concave
/// end, rounding.
pub fn homotopy_solve<T: Scalar>(e: &EnergySpec<T>, cfg: &HomotopyConfig) -> Result<(Permutation, HomotopyTrace<T>)> {
    let trace = homotopy_path(e, &ds_marginals(e)?, cfg)?;
    let p = round_coupling(&trace.final_coupling, cfg.final_l2_projection)?;
    Ok((p, trace))
}

/// Homotopy over `[lambda_bar_min, 0]` ending at a local minimizer of the
/// unshifted energy over the polytope of `marginals`.
pub fn fuzzy_solve_marginals<T: Scalar>(
    e: &EnergySpec<T>,
    marginals: &MarginalSpec<T>,
    cfg: &HomotopyConfig,
) -> Result<(Coupling<T>, HomotopyTrace<T>)> {
    check_shape(e, marginals)?;
    let range = restricted_range(e, &cfg.eig)?;
    let lo = cfg.a_lo.map(T::of).unwrap_or(range.lambda_bar_min);
    let trace = if lo >= T::zero() {
        // already convex at a = 0
        let (x, record) = run_stage(e, T::zero(), &marginals.uniform_coupling(), &cfg.bound_solver)?;
        HomotopyTrace {
            range,
            lower_bound: record.final_objective,
            stages: vec![record],
            final_coupling: x,
        }
    } else {
        let fuzzy_cfg = HomotopyConfig {
            a_lo: Some(lo.to_f64_lossy()),
            ..cfg.clone()
        };
        let mut trace = path(e, marginals, &fuzzy_cfg, Some(T::zero()))?;
        // the last stage is the answer, so it gets the bound solver's accuracy
        let (x, mut record) = run_stage(e, T::zero(), &trace.final_coupling, &cfg.bound_solver)?;
        let last = trace.stages.last_mut().expect("at least two stages");
        record.initial_objective = last.initial_objective;
        record.iterations += last.iterations;
        record.perturbed = last.perturbed;
        *last = record;
        trace.final_coupling = x;
        trace
    };
    Ok((trace.final_coupling.clone(), trace))
}

/// Doubly stochastic local minimizer of `E`.
pub fn fuzzy_solve<T: Scalar>(e: &EnergySpec<T>, cfg: &HomotopyConfig) -> Result<(Coupling<T>, HomotopyTrace<T>)> {
    fuzzy_solve_marginals(e, &ds_marginals(e)?, cfg)
}

/// Lower bounds from the relaxation family, and the homotopy upper bound.
#[derive(Clone, Debug)]
pub struct BoundReport<T: Scalar> {
    /// `n lambda_min(W) + d`, only when `c = 0`.
    pub spectral: Option<T>,
    /// Unshifted polytope minimum, only when `W` is positive semidefinite.
    pub ds: Option<T>,
    pub ds_plus: T,
    pub ds_pp: T,
    pub upper: T,
    pub permutation: Permutation,
    pub lambda_min: T,
    pub range: EigRange<T>,
}

/// Computes every bound of the hierarchy for a square problem.
pub fn bound_hierarchy<T: Scalar>(e: &EnergySpec<T>, cfg: &HomotopyConfig) -> Result<BoundReport<T>> {
    let marginals = ds_marginals(e)?;
    let full = full_range(e, &cfg.eig)?;
    let lambda_min = full.lambda_bar_min;
    let scale = T::one().max(full.lambda_bar_max.abs()).max(lambda_min.abs());
    let spectral = (!e.has_linear_term()).then(|| T::of_usize(e.n) * lambda_min + e.d);

    let uniform = marginals.uniform_coupling();
    let ds = if lambda_min >= -T::of(1e-9) * scale {
        let (_, record) = run_stage(e, T::zero(), &uniform, &cfg.bound_solver)?;
        Some(record.final_objective)
    } else {
        None
    };
    let (_, plus) = run_stage(e, lambda_min, &uniform, &cfg.bound_solver)?;
    let (permutation, trace) = homotopy_solve(e, cfg)?;
    let upper = e.eval_assignment(&permutation)?;
    Ok(BoundReport {
        spectral,
        ds,
        ds_plus: plus.final_objective,
        ds_pp: trace.lower_bound,
        upper,
        permutation,
        lambda_min,
        range: trace.range,
    })
}
