use std::fs;
use std::path::Path;

use dspp::energies::{
    default_log_floor, graph_matching_energy, gaussian_energy, gw_energy, log_gw_energy, MetricData, Penalty,
};
use dspp::{EnergySpec, QuadraticOperator};
use ndarray::Array2;
use serde::Deserialize;
use serde_json::Value;

use crate::CliError;

/// Reads a headerless CSV of reals into a matrix with equal-length rows.
pub fn read_csv(path: &Path) -> Result<Array2<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    CliError::input(format!("{}: line {}: not a number: {field:?}", path.display(), line + 1))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    to_matrix(rows, &path.display().to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>, what: &str) -> Result<Array2<f64>, CliError> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 {
        return Err(CliError::input(format!("{what}: empty matrix")));
    }
    if rows.iter().any(|r| r.len() != width) {
        return Err(CliError::input(format!("{what}: rows have different lengths")));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let m = Array2::from_shape_vec((flat.len() / width, width), flat).expect("rectangular rows");
    if m.iter().any(|v| !v.is_finite()) {
        return Err(CliError::input(format!("{what}: non-finite entry")));
    }
    Ok(m)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Pairwise Euclidean distances between the rows of `features`.
pub fn feature_distances(features: &Array2<f64>) -> Array2<f64> {
    let m = features.nrows();
    Array2::from_shape_fn((m, m), |(a, b)| {
        features
            .row(a)
            .iter()
            .zip(features.row(b).iter())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EnergyKind {
    Gw,
    Loggw,
    Gauss,
}

pub fn metric_energy(kind: EnergyKind, m: &MetricData<f64>, sigma: f64) -> Result<EnergySpec<f64>, CliError> {
    Ok(match kind {
        EnergyKind::Gw => gw_energy(m)?,
        EnergyKind::Loggw => log_gw_energy(m, None)?,
        EnergyKind::Gauss => gaussian_energy(m, sigma)?,
    })
}

pub fn penalty(kind: EnergyKind, m: &MetricData<f64>, sigma: f64) -> Penalty<f64> {
    match kind {
        EnergyKind::Gw => Penalty::Gw,
        EnergyKind::Loggw => Penalty::LogGw {
            floor: default_log_floor(m),
        },
        EnergyKind::Gauss => Penalty::Gaussian { sigma },
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Matrix {
    Flat(Vec<f64>),
    Nested(Vec<Vec<f64>>),
}

impl Matrix {
    fn into_square(self, dim: usize, what: &str) -> Result<Array2<f64>, CliError> {
        let flat = match self {
            Matrix::Flat(v) => v,
            Matrix::Nested(rows) => {
                if rows.iter().any(|r| r.len() != dim) {
                    return Err(CliError::input(format!("{what}: expected rows of length {dim}")));
                }
                rows.into_iter().flatten().collect()
            }
        };
        if flat.len() != dim * dim {
            return Err(CliError::input(format!("{what}: expected {} entries, found {}", dim * dim, flat.len())));
        }
        to_matrix(flat.chunks(dim).map(<[f64]>::to_vec).collect(), what)
    }

    fn into_matrix(self, what: &str) -> Result<Array2<f64>, CliError> {
        match self {
            Matrix::Nested(rows) => to_matrix(rows, what),
            Matrix::Flat(_) => Err(CliError::input(format!("{what}: expected a nested array"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Builder {
    Gw { source: Matrix, target: Matrix },
    Loggw { source: Matrix, target: Matrix, floor: Option<f64> },
    Gauss { source: Matrix, target: Matrix, sigma: f64 },
    Graph { a: Matrix, b: Matrix },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Quadratic {
    Builder(Builder),
    Dense(Matrix),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnergyFile {
    k: usize,
    n: usize,
    #[serde(rename = "W")]
    w: Quadratic,
    c: Option<Vec<f64>>,
    d: Option<f64>,
}

/// Reads an energy file `{k, n, W, c?, d?}`; `W` is a row-major dense matrix
/// (flat or nested) or a builder object with a `kind` field.
pub fn read_energy(path: &Path) -> Result<EnergySpec<f64>, CliError> {
    let file: EnergyFile = read_json(path)?;
    let (k, n) = (file.k, file.n);
    let metrics = |s: Matrix, t: Matrix| -> Result<MetricData<f64>, CliError> {
        Ok(MetricData::new(s.into_matrix("source")?, t.into_matrix("target")?)?)
    };
    let base = match file.w {
        Quadratic::Dense(w) => {
            let w = w.into_square(k * n, "W")?;
            EnergySpec::quadratic_only(k, n, QuadraticOperator::dense(w)?)?
        }
        Quadratic::Builder(Builder::Gw { source, target }) => gw_energy(&metrics(source, target)?)?,
        Quadratic::Builder(Builder::Loggw { source, target, floor }) => log_gw_energy(&metrics(source, target)?, floor)?,
        Quadratic::Builder(Builder::Gauss { source, target, sigma }) => gaussian_energy(&metrics(source, target)?, sigma)?,
        Quadratic::Builder(Builder::Graph { a, b }) => graph_matching_energy(&a.into_matrix("a")?, &b.into_matrix("b")?)?,
    };
    if (base.k, base.n) != (k, n) {
        return Err(CliError::input(format!("builder gives a {}x{} problem, file says {k}x{n}", base.k, base.n)));
    }
    let c = file.c.unwrap_or_else(|| vec![0.0; k * n]);
    Ok(EnergySpec::new(k, n, base.quadratic, c, file.d.unwrap_or(0.0))?)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PinsFile {
    Pairs(Vec<(usize, usize)>),
    Weighted { pairs: Vec<(usize, usize)>, weight: Option<f64> },
}

/// Reads pinned pairs as `[[s, t], ...]` or `{"pairs": [...], "weight": w}`.
pub fn read_pins(path: &Path) -> Result<(Vec<(usize, usize)>, Option<f64>), CliError> {
    Ok(match read_json::<PinsFile>(path)? {
        PinsFile::Pairs(pairs) => (pairs, None),
        PinsFile::Weighted { pairs, weight } => (pairs, weight),
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CoarseFile {
    Anchors {
        anchors: Vec<(usize, usize)>,
    },
    Indexed {
        assignment: Vec<usize>,
        source_index: Vec<usize>,
        target_index: Vec<usize>,
    },
}

/// Reads a coarse solution as fine-index pairs, either `{"anchors": [[s, t]]}`
/// or a coarse `assignment` with the fine indices of the coarse points.
pub fn read_coarse(path: &Path) -> Result<Vec<(usize, usize)>, CliError> {
    match read_json::<CoarseFile>(path)? {
        CoarseFile::Anchors { anchors } => Ok(anchors),
        CoarseFile::Indexed {
            assignment,
            source_index,
            target_index,
        } => {
            if assignment.len() != source_index.len() {
                return Err(CliError::input("assignment and source_index differ in length"));
            }
            assignment
                .iter()
                .zip(&source_index)
                .map(|(&t, &s)| {
                    target_index
                        .get(t)
                        .map(|&ft| (s, ft))
                        .ok_or_else(|| CliError::input(format!("coarse target {t} has no fine index")))
                })
                .collect()
        }
    }
}

/// `v` rounded to 12 significant digits; non-finite values become null.
pub fn num(v: f64) -> Value {
    if !v.is_finite() {
        return Value::Null;
    }
    let rounded: f64 = format!("{v:.11e}").parse().expect("formatted float");
    serde_json::Number::from_f64(rounded).map_or(Value::Null, Value::Number)
}

pub fn write_coupling_csv(path: &Path, x: &Array2<f64>) -> Result<(), CliError> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    for row in x.rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:.11e}")).collect();
        writer
            .write_record(&fields)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}
