mod common;

use common::*;
use dspp::energies::{gaussian_energy, gw_energy, gw_energy_dense, log_gw_energy, log_gw_energy_dense, MetricData, Penalty};
use dspp::homotopy::{homotopy_path, sample_schedule, HomotopyConfig};
use dspp::matching::{greedy_interpolate, solve_injective};
use dspp::oracle::{brute_force_min, dense_subspace_eigs};
use dspp::qp::solve_quadratic;
use dspp::sinkhorn::{kl_project, SinkhornConfig};
use dspp::spectral::{lambda_bar_range, EigConfig, TangentProjector};
use dspp::{l2_project, stack, EnergySpec, MarginalSpec, Permutation, QuadraticOperator, SolverConfig};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

fn random_permutation(n: usize, r: &mut rand_chacha::ChaCha8Rng) -> Permutation {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    Permutation::new(p, n).unwrap()
}

/// Doubly stochastic matrix from scaling a random positive kernel.
fn random_ds(n: usize, r: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    let lk = Array2::from_shape_fn((n, n), |_| r.random::<f64>() * 6.0 - 3.0);
    kl_project(&lk, &MarginalSpec::doubly_stochastic(n), &SinkhornConfig::default())
        .unwrap()
        .0
        .values
}

fn dense_eigs(w: &Array2<f64>) -> Vec<f64> {
    let m = DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[[i, j]]);
    let mut v: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn permutation_stacks_have_norm_n(n in 1usize..9, seed in any::<u64>()) {
        let p = random_permutation(n, &mut rng(seed));
        let x: Vec<f64> = p.to_stack();
        prop_assert_eq!(x.iter().map(|v| v * v).sum::<f64>(), n as f64);
    }

    #[test]
    fn shifted_energy_is_monotone_in_the_shift(n in 2usize..6, seed in any::<u64>(), a in -5.0f64..5.0, gap in 0.01f64..5.0) {
        let mut r = rng(seed);
        let e = dense_energy(n, random_sym(n * n, &mut r), (0..n * n).map(|_| r.random()).collect(), 0.3);
        let x = stack(&random_ds(n, &mut r));
        let lo = e.eval_shifted(&x, a).unwrap();
        let hi = e.eval_shifted(&x, a + gap).unwrap();
        prop_assert!(lo < hi);
        let p = random_permutation(n, &mut r).to_stack::<f64>();
        let (pl, ph) = (e.eval_shifted(&p, a).unwrap(), e.eval_shifted(&p, a + gap).unwrap());
        prop_assert!((pl - ph).abs() <= 1e-9 * pl.abs().max(1.0));
    }

    #[test]
    fn restricted_spectrum_interlaces(n in 2usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = random_sym(n * n, &mut r);
        let e = dense_energy(n, w.clone(), vec![0.0; n * n], 0.0);
        let range = lambda_bar_range(&e, &EigConfig::default()).unwrap();
        let full = dense_eigs(&w);
        let tol = 1e-8;
        prop_assert!(full[0] <= range.lambda_bar_min + tol);
        prop_assert!(range.lambda_bar_min <= range.lambda_bar_max + tol);
        prop_assert!(range.lambda_bar_max <= full[full.len() - 1] + tol);
        let (lo, hi) = dense_subspace_eigs(&e).unwrap();
        prop_assert!((lo - range.lambda_bar_min).abs() <= 1e-6 * lo.abs().max(1.0));
        prop_assert!((hi - range.lambda_bar_max).abs() <= 1e-6 * hi.abs().max(1.0));
    }

    #[test]
    fn restricted_spectrum_shifts_with_identity(n in 2usize..6, seed in any::<u64>(), t in -10.0f64..10.0) {
        let mut r = rng(seed);
        let w = random_sym(n * n, &mut r);
        let shifted = &w + &(Array2::<f64>::eye(n * n) * t);
        let a = lambda_bar_range(&dense_energy(n, w, vec![0.0; n * n], 0.0), &EigConfig::default()).unwrap();
        let b = lambda_bar_range(&dense_energy(n, shifted, vec![0.0; n * n], 0.0), &EigConfig::default()).unwrap();
        prop_assert!((b.lambda_bar_min - t - a.lambda_bar_min).abs() <= 1e-7 * (1.0 + t.abs()));
        prop_assert!((b.lambda_bar_max - t - a.lambda_bar_max).abs() <= 1e-7 * (1.0 + t.abs()));
    }

    #[test]
    fn top_shift_is_semidefinite_on_the_tangent_space(n in 2usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = random_sym(n * n, &mut r);
        let e = dense_energy(n, w.clone(), vec![0.0; n * n], 0.0);
        let top = lambda_bar_range(&e, &EigConfig::default()).unwrap().lambda_bar_max;
        let proj = TangentProjector::square(n);
        for _ in 0..20 {
            let u: Vec<f64> = (0..n * n).map(|_| r.random::<f64>() - 0.5).collect();
            let pu = proj.project(&u);
            let wpu = e.quadratic.apply_vec(&pu);
            let norm: f64 = pu.iter().map(|v| v * v).sum();
            let form: f64 = pu.iter().zip(&wpu).map(|(p, q)| p * (top * p - q)).sum();
            prop_assert!(form >= -1e-8 * norm.max(1.0));
        }
    }

    #[test]
    fn sinkhorn_meets_marginals_and_ignores_row_scaling(k in 2usize..6, n in 2usize..6, seed in any::<u64>(), row in 0usize..6, factor in -4.0f64..4.0) {
        let mut r = rng(seed);
        let rows: Vec<f64> = (0..k).map(|_| r.random::<f64>() + 0.2).collect();
        let mass: f64 = rows.iter().sum();
        let raw: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 0.2).collect();
        let rs: f64 = raw.iter().sum();
        let cols: Vec<f64> = raw.iter().map(|v| v * mass / rs).collect();
        let marg = MarginalSpec::new(rows, cols).unwrap();
        let lk = Array2::from_shape_fn((k, n), |_| r.random::<f64>() * 4.0 - 2.0);
        let cfg = SinkhornConfig { record_history: true, ..SinkhornConfig::default() };
        let (c, state) = kl_project(&lk, &marg, &cfg).unwrap();
        prop_assert!(marg.deviation(&c.values) <= 1e-9);
        for pair in state.history.windows(11) {
            prop_assert!(pair[10] <= pair[0]);
        }
        let row = row % k;
        let mut scaled = lk.clone();
        scaled.row_mut(row).mapv_inplace(|v| v + factor);
        let (c2, state2) = kl_project(&scaled, &marg, &cfg).unwrap();
        let diff = (&c.values - &c2.values).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(diff <= 1e-10 * mass);
        let shift = (state2.log_u[row] + state2.log_v[0]) - (state.log_u[row] + state.log_v[0]);
        prop_assert!((shift + factor).abs() <= 1e-8);
    }

    #[test]
    fn mirror_descent_iterates_stay_feasible_and_clamped(n in 2usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = random_psd(n * n, &mut r);
        let c: Vec<f64> = (0..n * n).map(|_| r.random::<f64>() - 0.5).collect();
        let marg = MarginalSpec::doubly_stochastic(n);
        let cfg = SolverConfig::default();
        let h = |x: &[f64], y: &mut [f64]| {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = w.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
            }
        };
        let (x, trace) = solve_quadratic(h, &c, &marg.uniform_coupling(), &cfg).unwrap();
        prop_assert!(x.feasibility_error() <= 1e-8);
        prop_assert!(trace.marginal_errors.iter().all(|&m| m <= cfg.sinkhorn.tol));
        for (&alpha, &g) in trace.alphas.iter().zip(&trace.grad_max) {
            if g > 0.0 {
                prop_assert!((alpha / g - 1.0 / cfg.exponent_cap).abs() <= 1e-15);
            }
        }
        // convex instance, small step: the objective settles into descent
        let small = SolverConfig { eta: 1e-3, ..cfg };
        let (_, slow) = solve_quadratic(h, &c, &marg.uniform_coupling(), &small).unwrap();
        for pair in slow.objective[5.min(slow.objective.len())..].windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-6);
        }
    }

    #[test]
    fn schedule_is_uniform_with_exact_endpoints(lo in -50.0f64..50.0, width in 0.0f64..100.0, count in 2usize..30) {
        let hi = lo + width;
        let s = sample_schedule(lo, hi, count).unwrap();
        prop_assert_eq!(s.len(), count);
        prop_assert_eq!(s[0], lo);
        prop_assert_eq!(s[count - 1], hi);
        let step = width / (count - 1) as f64;
        for (i, v) in s.iter().enumerate() {
            prop_assert!((v - (lo + step * i as f64)).abs() <= 1e-12 * (1.0 + lo.abs() + hi.abs()));
        }
    }

    #[test]
    fn nearest_permutation_beats_random_ones(n in 2usize..12, seed in any::<u64>(), shift in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x = Array2::from_shape_fn((n, n), |_| r.random::<f64>());
        let p = l2_project(&x).unwrap();
        let score = |q: &Permutation| q.assignment().iter().enumerate().map(|(i, &j)| x[[i, j]]).sum::<f64>();
        let best = score(&p);
        for _ in 0..200 {
            prop_assert!(best >= score(&random_permutation(n, &mut r)) - 1e-12);
        }
        prop_assert_eq!(l2_project(&(&x + shift)).unwrap(), p);
    }

    #[test]
    fn operator_energies_match_dense(k in 2usize..7, n in 2usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = MetricData::new(euclidean(&random_points(k, 2, &mut r)), euclidean(&random_points(n, 3, &mut r))).unwrap();
        let pairs = [
            (gw_energy(&m).unwrap(), gw_energy_dense(&m).unwrap()),
            (log_gw_energy(&m, None).unwrap(), log_gw_energy_dense(&m, None).unwrap()),
        ];
        for (op, dense) in pairs.iter() {
            let x: Vec<f64> = (0..k * n).map(|_| r.random::<f64>()).collect();
            let (a, b) = (op.eval(&x).unwrap(), dense.eval(&x).unwrap());
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            prop_assert!(op.symmetry_defect(4, seed) <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn metric_energies_are_target_equivariant(n in 2usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let ds = euclidean(&random_points(n, 2, &mut r));
        let dt = euclidean(&random_points(n, 2, &mut r));
        let q = random_permutation(n, &mut r);
        // target j of the relabeled space is target q(j) of the original
        let dq = Array2::from_shape_fn((n, n), |(a, b)| dt[[q.target(a), q.target(b)]]);
        let m = MetricData::new(ds.clone(), dt).unwrap();
        let mq = MetricData::new(ds, dq).unwrap();
        let qm: Array2<f64> = q.to_matrix();
        for (e, eq) in [
            (gw_energy(&m).unwrap(), gw_energy(&mq).unwrap()),
            (log_gw_energy(&m, None).unwrap(), log_gw_energy(&mq, None).unwrap()),
            (gaussian_energy(&m, 0.2).unwrap(), gaussian_energy(&mq, 0.2).unwrap()),
        ] {
            let x = Array2::from_shape_fn((n, n), |_| r.random::<f64>());
            let lhs = eq.eval(&stack(&x)).unwrap();
            let rhs = e.eval(&stack(&x.dot(&qm))).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn greedy_interpolation_ignores_query_order(n in 4usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let pts = random_points(n, 2, &mut r);
        let m = MetricData::new(euclidean(&pts), euclidean(&random_points(n, 2, &mut r))).unwrap();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        let known: Vec<(usize, usize)> = idx[..n / 2].iter().map(|&i| (i, (i * 7 + 3) % n)).collect();
        let targets: std::collections::HashSet<usize> = known.iter().map(|p| p.1).collect();
        prop_assume!(targets.len() == known.len());
        let queries: Vec<usize> = idx[n / 2..].to_vec();
        let forward = greedy_interpolate(&m, Penalty::Gw, &known, &queries).unwrap();
        let mut rev = queries.clone();
        rev.reverse();
        let mut backward = greedy_interpolate(&m, Penalty::Gw, &known, &rev).unwrap();
        backward.reverse();
        prop_assert_eq!(&forward, &backward);
        prop_assert!(forward.iter().all(|t| !targets.contains(t)));
    }
}

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn homotopy_warm_starts_are_bookkept(n in 3usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let e = dense_energy(n, random_sym(n * n, &mut r), vec![0.0; n * n], 0.0);
        let cfg = HomotopyConfig { num_samples: 5, ..HomotopyConfig::default() };
        let trace = homotopy_path(&e, &MarginalSpec::doubly_stochastic(n), &cfg).unwrap();
        for pair in trace.stages.windows(2) {
            // E(X, a) is affine in a with slope n - |X|^2
            let expected = pair[0].final_objective + (pair[1].a - pair[0].a) * (n as f64 - pair[0].norm_sq);
            prop_assert!((pair[1].initial_objective - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn injective_solves_give_distinct_targets(k in 2usize..5, extra in 1usize..3, seed in any::<u64>()) {
        let n = k + extra;
        let mut r = rng(seed);
        let m = MetricData::new(euclidean(&random_points(k, 2, &mut r)), euclidean(&random_points(n, 2, &mut r))).unwrap();
        let (p, _) = solve_injective(&gw_energy(&m).unwrap(), &HomotopyConfig::default()).unwrap();
        prop_assert_eq!(p.k(), k);
        let mut seen = vec![false; n];
        for &j in p.assignment() {
            prop_assert!(!seen[j]);
            seen[j] = true;
        }
    }

    #[test]
    fn oracle_is_invariant_under_target_relabeling(n in 2usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let ds = euclidean(&random_points(n, 2, &mut r));
        let dt = euclidean(&random_points(n, 2, &mut r));
        let q = random_permutation(n, &mut r);
        let dq = Array2::from_shape_fn((n, n), |(a, b)| dt[[q.target(a), q.target(b)]]);
        let e = EnergySpec::quadratic_only(n, n, QuadraticOperator::dense(pairwise_dense(&ds, &dt, |u, v| (u - v).powi(2))).unwrap()).unwrap();
        let eq = EnergySpec::quadratic_only(n, n, QuadraticOperator::dense(pairwise_dense(&ds, &dq, |u, v| (u - v).powi(2))).unwrap()).unwrap();
        let (_, a) = brute_force_min(&e).unwrap();
        let (_, b) = brute_force_min(&eq).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
}
