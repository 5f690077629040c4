//! Rounding couplings to assignments.

use ndarray::{Array2, ArrayBase, Data, Ix2};

use crate::error::{Error, Result};
use crate::problem::Permutation;
use crate::scalar::Scalar;

struct Solution {
    /// column of each row
    assign: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
    value: f64,
}

/// Shortest augmenting path assignment with potentials for `rows <= cols`.
/// `cost(i, j)` is only queried for the listed rows and columns.
fn hungarian(cost: &dyn Fn(usize, usize) -> f64, rows: &[usize], cols: &[usize]) -> Solution {
    let (n, m) = (rows.len(), cols.len());
    debug_assert!(n <= m);
    // 1-based with a virtual row/column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let value = assign.iter().enumerate().map(|(i, &j)| cost(rows[i], cols[j])).sum();
    Solution {
        assign,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
        value,
    }
}

/// Minimum-cost injective assignment of the rows of `cost` to its columns
/// (`rows <= cols`). Among assignments optimal to within a relative `1e-10`,
/// the lexicographically smallest is returned.
pub fn linear_assignment<T: Scalar, S: Data<Elem = T>>(cost: &ArrayBase<S, Ix2>) -> Result<Vec<usize>> {
    let (k, n) = cost.dim();
    if k > n {
        return Err(Error::InvalidInput(format!("{k} rows cannot be assigned to {n} columns")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment cost"));
    }
    let a: Array2<f64> = cost.mapv(|v| v.to_f64_lossy());
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let value_tol = 1e-10 * scale * k as f64;
    let tight_tol = 10.0 * value_tol;
    let c = |i: usize, j: usize| a[[i, j]];

    let all_rows: Vec<usize> = (0..k).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let first = hungarian(&c, &all_rows, &all_cols);
    let optimum = first.value;

    // the current solution on rows i.. and its duals, re-indexed by absolute column
    let mut current: Vec<usize> = first.assign.clone();
    let mut u_abs: Vec<f64> = first.u.clone();
    let mut v_abs: Vec<f64> = first.v.clone();
    let mut col_used = vec![false; n];
    let mut fixed_value = 0.0;

    for i in 0..k {
        let candidates: Vec<usize> = (0..current[i])
            .filter(|&j| !col_used[j] && a[[i, j]] - u_abs[i] - v_abs[j] <= tight_tol)
            .collect();
        for j in candidates {
            let rest_rows: Vec<usize> = (i + 1..k).collect();
            let rest_cols: Vec<usize> = (0..n).filter(|&q| !col_used[q] && q != j).collect();
            let sub = hungarian(&c, &rest_rows, &rest_cols);
            if fixed_value + a[[i, j]] + sub.value <= optimum + value_tol {
                current[i] = j;
                for (r, &q) in sub.assign.iter().enumerate() {
                    current[i + 1 + r] = rest_cols[q];
                    u_abs[i + 1 + r] = sub.u[r];
                }
                for (q, &col) in rest_cols.iter().enumerate() {
                    v_abs[col] = sub.v[q];
                }
                break;
            }
        }
        col_used[current[i]] = true;
        fixed_value += a[[i, current[i]]];
    }
    Ok(current)
}

/// Nearest permutation (or injective assignment, for `k < n`) in Frobenius
/// norm, i.e. the assignment maximizing `<X, P>`.
pub fn l2_project<T: Scalar, S: Data<Elem = T>>(x: &ArrayBase<S, Ix2>) -> Result<Permutation> {
    let neg = x.mapv(|v| -v);
    let assignment = linear_assignment(&neg)?;
    Permutation::new(assignment, x.ncols())
}

/// Row-wise argmax, ties to the smallest column. Not necessarily injective.
pub fn max_coordinate_project<T: Scalar, S: Data<Elem = T>>(x: &ArrayBase<S, Ix2>) -> Vec<usize> {
    x.outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}
