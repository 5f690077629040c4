use std::collections::HashMap;
use std::path::{Path, PathBuf};

use dspp::energies::{coarse_to_fine_terms, fried_energy, grid_distances, random_swaps, MetricData, UserConstraints};
use dspp::homotopy::fuzzy_solve_marginals;
use dspp::matching::{
    augment_injective, default_rho, greedy_interpolate, injective_marginals, limited_support_energy, solve_injective,
    sparsity_pattern, strip_slack,
};
use dspp::oracle::{brute_force_injective, brute_force_min, dense_subspace_eigs, MAX_DENSE_DIM};
use dspp::{bound_hierarchy, fuzzy_solve, homotopy_solve, EnergySpec, HomotopyConfig, Permutation};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::io::{
    feature_distances, metric_energy, num, penalty, read_coarse, read_csv, read_energy, read_pins,
    write_coupling_csv, EnergyKind,
};
use crate::{CliError, EnergySource, PathOptions};

fn config(path: &PathOptions) -> HomotopyConfig {
    let mut cfg = HomotopyConfig {
        num_samples: path.samples,
        ..HomotopyConfig::default()
    };
    cfg.eig.seed = path.seed;
    cfg
}

fn read_metrics(source: &Path, target: &Path) -> Result<MetricData<f64>, CliError> {
    Ok(MetricData::new(read_csv(source)?, read_csv(target)?)?)
}

fn load(source: &EnergySource) -> Result<(EnergySpec<f64>, Option<MetricData<f64>>), CliError> {
    if let Some(path) = &source.dense_energy {
        return Ok((read_energy(path)?, None));
    }
    match (&source.source_dist, &source.target_dist) {
        (Some(s), Some(t)) => {
            let m = read_metrics(s, t)?;
            Ok((metric_energy(source.energy, &m, source.sigma)?, Some(m)))
        }
        _ => Err(CliError::input("give --dense-energy or both --source-dist and --target-dist")),
    }
}

fn require_square(e: &EnergySpec<f64>) -> Result<(), CliError> {
    if e.is_square() {
        Ok(())
    } else {
        Err(CliError::input(format!(
            "{} sources and {} targets: use --injective for unequal sizes",
            e.k, e.n
        )))
    }
}

fn assignment_json(p: &Permutation) -> Value {
    json!(p.assignment())
}

pub fn bounds(source: &EnergySource, path: &PathOptions) -> Result<Value, CliError> {
    let (e, _) = load(source)?;
    require_square(&e)?;
    let b = bound_hierarchy(&e, &config(path))?;
    let mut gaps = Map::new();
    for (name, bound) in [
        ("spectral", b.spectral),
        ("ds", b.ds),
        ("ds_plus", Some(b.ds_plus)),
        ("ds_pp", Some(b.ds_pp)),
    ] {
        if let Some(v) = bound {
            gaps.insert(name.into(), num(b.upper - v));
        }
    }
    let mut out = Map::new();
    if let Some(v) = b.spectral {
        out.insert("spectral".into(), num(v));
    }
    if let Some(v) = b.ds {
        out.insert("ds".into(), num(v));
    }
    out.insert("ds_plus".into(), num(b.ds_plus));
    out.insert("ds_pp".into(), num(b.ds_pp));
    out.insert("upper".into(), num(b.upper));
    out.insert("assignment".into(), assignment_json(&b.permutation));
    out.insert("gaps".into(), Value::Object(gaps));
    Ok(Value::Object(out))
}

pub fn matching(
    source: &EnergySource,
    path: &PathOptions,
    injective: Option<usize>,
    fuzzy: Option<&Path>,
    pins: Option<&Path>,
) -> Result<Value, CliError> {
    let cfg = config(path);
    let (mut e, metrics) = load(source)?;
    if let Some(pins) = pins {
        let m = metrics
            .as_ref()
            .ok_or_else(|| CliError::input("--pins needs --source-dist and --target-dist"))?;
        let (pairs, weight) = read_pins(pins)?;
        let constraints = UserConstraints::new(pairs, weight);
        e = coarse_to_fine_terms(m, &constraints, e, penalty(source.energy, m, source.sigma), &cfg.eig)?;
    }
    let injective = match injective {
        Some(k) if k != e.k => {
            return Err(CliError::input(format!("--injective {k} but the source has {} points", e.k)));
        }
        Some(k) => k < e.n,
        None => {
            require_square(&e)?;
            false
        }
    };
    let (p, trace) = if injective {
        solve_injective(&e, &cfg)?
    } else {
        homotopy_solve(&e, &cfg)?
    };
    if let Some(out) = fuzzy {
        let x: Array2<f64> = if injective {
            let aug = augment_injective(&e)?;
            let (x, _) = fuzzy_solve_marginals(&aug, &injective_marginals(e.k, e.n)?, &cfg)?;
            strip_slack(&x.values)
        } else {
            fuzzy_solve(&e, &cfg)?.0.values
        };
        write_coupling_csv(out, &x)?;
    }
    Ok(json!({
        "assignment": assignment_json(&p),
        "energy": num(e.eval_assignment(&p)?),
        "lower_bound": num(trace.lower_bound),
    }))
}

fn parse_grid(spec: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::input(format!("grid must look like RxC, got {spec:?}"));
    let (r, c) = spec.to_ascii_lowercase().split_once('x').map(|(r, c)| (r.trim().to_owned(), c.trim().to_owned())).ok_or_else(bad)?;
    let (r, c): (usize, usize) = (r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?);
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

pub fn arrange(
    features: Option<&Path>,
    dist: Option<&Path>,
    grid: &str,
    swaps: usize,
    path: &PathOptions,
) -> Result<Value, CliError> {
    let d = match (features, dist) {
        (Some(f), _) => feature_distances(&read_csv(f)?),
        (None, Some(d)) => read_csv(d)?,
        (None, None) => return Err(CliError::input("give --features or --dist")),
    };
    let (rows, cols) = parse_grid(grid)?;
    if d.nrows() != rows * cols {
        return Err(CliError::input(format!("{} items do not fill a {rows}x{cols} grid", d.nrows())));
    }
    let e = fried_energy(&d, &grid_distances(rows, cols))?;
    let (p, _) = homotopy_solve(&e, &config(path))?;
    let before = e.eval_assignment(&p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(path.seed);
    let (p, after) = random_swaps(&e, &p, swaps, &mut rng)?;
    let mut layout = vec![vec![0usize; cols]; rows];
    for (item, &cell) in p.assignment().iter().enumerate() {
        layout[cell / cols][cell % cols] = item;
    }
    Ok(json!({
        "grid": layout,
        "energy": num(after),
        "energy_before_swaps": num(before),
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum UpsampleMode {
    Limited,
    Greedy,
}

pub struct UpsampleArgs {
    pub coarse: PathBuf,
    pub source_dist: PathBuf,
    pub target_dist: PathBuf,
    pub energy: EnergyKind,
    pub sigma: f64,
    pub mode: UpsampleMode,
    pub rho: Option<f64>,
    pub keep_frac: f64,
    pub queries: Option<String>,
    pub path: PathOptions,
}

fn parse_queries(list: &str) -> Result<Vec<usize>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::input(format!("bad query index {s:?}"))))
        .collect()
}

pub fn upsample(args: &UpsampleArgs) -> Result<Value, CliError> {
    let m = read_metrics(&args.source_dist, &args.target_dist)?;
    let (k, n) = (m.k(), m.n());
    let anchors = read_coarse(&args.coarse)?;
    if let Some(&(s, t)) = anchors.iter().find(|&&(s, t)| s >= k || t >= n) {
        return Err(CliError::input(format!("anchor ({s}, {t}) is not in the fine {k}x{n} index set")));
    }
    UserConstraints::<f64>::new(anchors.clone(), None).validate(k, n)?;
    let anchor_of: HashMap<usize, usize> = anchors.iter().copied().collect();
    let mut assignment: Vec<Option<usize>> = vec![None; k];
    let mut provenance: Vec<Option<&str>> = vec![None; k];
    for &(s, t) in &anchors {
        assignment[s] = Some(t);
        provenance[s] = Some("anchor");
    }
    let mut energy = None;
    match args.mode {
        UpsampleMode::Greedy => {
            let queries = match &args.queries {
                Some(list) => parse_queries(list)?,
                None => (0..k).filter(|s| !anchor_of.contains_key(s)).collect(),
            };
            let p = penalty(args.energy, &m, args.sigma);
            for (&q, t) in queries.iter().zip(greedy_interpolate(&m, p, &anchors, &queries)?) {
                assignment[q] = Some(t);
                provenance[q] = Some("greedy");
            }
        }
        UpsampleMode::Limited => {
            if k != n {
                return Err(CliError::input(format!("limited mode needs equal sizes, got {k}x{n}")));
            }
            let cfg = config(&args.path);
            let base = metric_energy(args.energy, &m, args.sigma)?;
            let pattern = sparsity_pattern(&m, &anchors, args.keep_frac)?;
            let rho = match args.rho {
                Some(r) => r,
                None => default_rho(&base, &cfg.eig)?,
            };
            let (p, _) = homotopy_solve(&limited_support_energy(&base, &pattern, rho)?, &cfg)?;
            for (s, &t) in p.assignment().iter().enumerate() {
                assignment[s] = Some(t);
                if anchor_of.get(&s) != Some(&t) {
                    provenance[s] = Some("solved");
                }
            }
            energy = Some(base.eval_assignment(&p)?);
        }
    }
    Ok(json!({
        "assignment": assignment,
        "provenance": provenance,
        "energy": energy.map_or(Value::Null, num),
    }))
}

pub fn oracle(source: &EnergySource) -> Result<Value, CliError> {
    let (e, _) = load(source)?;
    let (p, v) = if e.is_square() {
        brute_force_min(&e)?
    } else {
        brute_force_injective(&e)?
    };
    let (lo, hi) = if e.dim() <= MAX_DENSE_DIM {
        let (lo, hi) = dense_subspace_eigs(&e)?;
        (num(lo), num(hi))
    } else {
        (Value::Null, Value::Null)
    };
    Ok(json!({
        "assignment": assignment_json(&p),
        "energy": num(v),
        "lambda_bar_min": lo,
        "lambda_bar_max": hi,
    }))
}
