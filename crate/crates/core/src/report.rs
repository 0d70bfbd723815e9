//! Parameter sweeps and their CSV/JSON serialization.
//!
//! A sweep varies one quantity of a template system over a grid and evaluates
//! any subset of: closed-form AuD and missing probability, their Monte Carlo
//! estimates, the optimal arrival law, and the optimal decision offset. Grid
//! points are independent and evaluated in parallel; rows come back in grid
//! order. Failures are recorded per cell and never abort the sweep.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dist::{ArrivalModel, Family, ServiceModel};
use crate::error::{AudError, Result};
use crate::optimize::{self, OFFSET_MAX_ITER, OFFSET_TOL};
use crate::queue::{self, DecisionProcess, SystemConfig};
use crate::sim;

pub const SCHEMA_VERSION: &str = "aud-kit/1";
/// JSON Schema for every JSON document the toolkit emits.
pub const SCHEMA: &str = include_str!("../schema/aud-kit-1.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Evaluation {
    AnalyticAud,
    AnalyticPmis,
    McAud,
    McPmis,
    OptimalArrival,
    OptimalOffset,
}

impl Evaluation {
    /// Value columns, followed implicitly by `<prefix>_status`.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Self::AnalyticAud => &["aud_analytic"],
            Self::AnalyticPmis => &["pmis_analytic"],
            Self::McAud => &["aud_mc", "aud_mc_se"],
            Self::McPmis => &["pmis_mc", "pmis_mc_se"],
            Self::OptimalArrival => &["opt_arrival_aud", "opt_arrival_lambda"],
            Self::OptimalOffset => &["opt_offset_aud", "opt_offset_delta"],
        }
    }

    pub fn status_column(self) -> &'static str {
        match self {
            Self::AnalyticAud => "aud_analytic_status",
            Self::AnalyticPmis => "pmis_analytic_status",
            Self::McAud => "aud_mc_status",
            Self::McPmis => "pmis_mc_status",
            Self::OptimalArrival => "opt_arrival_status",
            Self::OptimalOffset => "opt_offset_status",
        }
    }

    fn is_mc(self) -> bool {
        matches!(self, Self::McAud | Self::McPmis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McBudget {
    pub horizon: u64,
    pub replications: u64,
    pub base_seed: u64,
}

impl Default for McBudget {
    fn default() -> Self {
        Self {
            horizon: 1_000_000,
            replications: 5,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub arrival: ArrivalModel,
    pub mu: f64,
    pub decision: DecisionProcess,
}

/// Sweep definition; also the `--spec` file format of the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// `mu`, `lambda`, `nu`, `m0`, `delta`, or a parameter name of the
    /// template's arrival family (`rate`, `beta`, `alpha`, `sigma`, `period`).
    pub swept: String,
    pub grid: Vec<f64>,
    pub template: Template,
    pub evaluations: Vec<Evaluation>,
    #[serde(default)]
    pub mc: McBudget,
    /// Family for `optimal-arrival`; defaults to the template's family.
    #[serde(default)]
    pub family: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Axis {
    Mu,
    Lambda,
    Nu,
    M0,
    Delta,
    Param(usize),
}

impl SweepSpec {
    fn axis(&self) -> Result<Axis> {
        let decision = self.template.decision;
        let bad = |msg: &str| Err(AudError::Setup(format!("cannot sweep {}: {msg}", self.swept)));
        match self.swept.as_str() {
            "mu" => Ok(Axis::Mu),
            "lambda" => Ok(Axis::Lambda),
            "nu" => match decision {
                DecisionProcess::Poisson { .. } => Ok(Axis::Nu),
                _ => bad("the template decision process is not Poisson"),
            },
            "m0" => match decision {
                DecisionProcess::PeriodicSync { .. } => Ok(Axis::M0),
                _ => bad("the template decision process is not synchronous"),
            },
            "delta" => match decision {
                DecisionProcess::PeriodicOffset { .. } => Ok(Axis::Delta),
                _ => bad("the template decision process is not offset"),
            },
            name => match self
                .template
                .arrival
                .family()
                .param_names()
                .iter()
                .position(|p| *p == name)
            {
                Some(i) => Ok(Axis::Param(i)),
                None => bad("not a sweepable quantity for this template"),
            },
        }
    }

    fn optimal_family(&self) -> Result<Family> {
        match &self.family {
            Some(f) => f.parse().map_err(|e: AudError| AudError::Setup(e.to_string())),
            None => Ok(self.template.arrival.family()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.axis()?;
        self.optimal_family()?;
        if self.grid.is_empty() {
            return Err(AudError::Setup("grid is empty".to_string()));
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return Err(AudError::Setup("grid values must be finite".to_string()));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(AudError::Setup("grid must be strictly increasing".to_string()));
        }
        if self.evaluations.iter().any(|e| e.is_mc()) {
            if self.mc.horizon == 0 {
                return Err(AudError::Setup("mc.horizon must be at least 1".to_string()));
            }
            if self.mc.replications < 2 {
                return Err(AudError::Setup("mc.replications must be at least 2".to_string()));
            }
        }
        Ok(())
    }

    /// Evaluations in canonical column order, without duplicates.
    fn ordered_evaluations(&self) -> Vec<Evaluation> {
        [
            Evaluation::AnalyticAud,
            Evaluation::AnalyticPmis,
            Evaluation::McAud,
            Evaluation::McPmis,
            Evaluation::OptimalArrival,
            Evaluation::OptimalOffset,
        ]
        .into_iter()
        .filter(|e| self.evaluations.contains(e))
        .collect()
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols = vec![self.swept.clone()];
        for e in self.ordered_evaluations() {
            cols.extend(e.columns().iter().map(|c| c.to_string()));
            cols.push(e.status_column().to_string());
        }
        cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "String")]
pub enum CellStatus {
    Ok,
    /// The grid point is unstable (`rho >= 1`).
    Infeasible,
    /// No closed form or procedure exists for this combination.
    Unsupported,
    Error(String),
}

impl From<CellStatus> for String {
    fn from(s: CellStatus) -> String {
        s.to_string()
    }
}

impl std::fmt::Display for CellStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Ok => f.write_str("ok"),
            Self::Infeasible => f.write_str("infeasible"),
            Self::Unsupported => f.write_str("unsupported"),
            Self::Error(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl CellStatus {
    fn from_error(e: &AudError) -> Self {
        match e {
            AudError::Unstable { .. } => Self::Infeasible,
            other => Self::Error(other.to_string()),
        }
    }
}

/// One evaluation at one grid point. `values` lines up with
/// [`Evaluation::columns`]; all are `None` unless the status is `Ok`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub evaluation: Evaluation,
    pub values: Vec<Option<f64>>,
    pub status: CellStatus,
}

impl Cell {
    fn ok(evaluation: Evaluation, values: Vec<f64>) -> Self {
        Self {
            evaluation,
            values: values.into_iter().map(Some).collect(),
            status: CellStatus::Ok,
        }
    }

    fn failed(evaluation: Evaluation, status: CellStatus) -> Self {
        Self {
            evaluation,
            values: vec![None; evaluation.columns().len()],
            status,
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.values[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub cells: Vec<Cell>,
}

impl SweepRow {
    pub fn cell(&self, e: Evaluation) -> Option<&Cell> {
        self.cells.iter().find(|c| c.evaluation == e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub swept: String,
    pub columns: Vec<String>,
    pub rows: Vec<SweepRow>,
}

fn point_system(spec: &SweepSpec, axis: Axis, v: f64) -> Result<(ArrivalModel, f64, DecisionProcess)> {
    let t = spec.template;
    let (mut arrival, mut mu, mut decision) = (t.arrival, t.mu, t.decision);
    match axis {
        Axis::Mu => mu = v,
        Axis::Lambda => arrival = arrival.with_rate(v)?,
        Axis::Nu => decision = DecisionProcess::Poisson { rate: v },
        Axis::M0 => {
            if !(v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
                return Err(AudError::InvalidParameter(format!(
                    "m0 must be a positive integer, got {v}"
                )));
            }
            decision = DecisionProcess::PeriodicSync { m0: v as u32 };
        }
        Axis::Delta => decision = DecisionProcess::PeriodicOffset { delta: v },
        Axis::Param(i) => {
            let mut p = arrival.params();
            p[i] = v;
            arrival = ArrivalModel::from_params(arrival.family(), &p)?;
        }
    }
    Ok((arrival, mu, decision))
}

fn evaluate_point(spec: &SweepSpec, axis: Axis, family: Family, evals: &[Evaluation], v: f64) -> SweepRow {
    let system = point_system(spec, axis, v);
    let config = system.as_ref().map_err(|e| CellStatus::from_error(e)).and_then(|&(a, mu, d)| {
        ServiceModel::new(mu)
            .and_then(|s| SystemConfig::new(a, s, d))
            .map_err(|e| CellStatus::from_error(&e))
    });
    let analysis = config.as_ref().map_err(Clone::clone).and_then(|c| {
        queue::analyze(c).map_err(|e| CellStatus::from_error(&e))
    });
    let needs_mc = evals.iter().any(|e| e.is_mc());
    let mc = if needs_mc {
        Some(config.as_ref().map_err(Clone::clone).and_then(|c| {
            sim::run_replications(c, spec.mc.horizon, spec.mc.replications, spec.mc.base_seed)
                .map_err(|e| CellStatus::from_error(&e))
        }))
    } else {
        None
    };

    let cells = evals
        .iter()
        .map(|&e| match e {
            Evaluation::AnalyticAud => match &analysis {
                Ok(a) => Cell::ok(e, vec![a.mean_aud]),
                Err(s) => Cell::failed(e, s.clone()),
            },
            Evaluation::AnalyticPmis => match &analysis {
                Ok(a) => match a.missing_prob {
                    Some(p) => Cell::ok(e, vec![p]),
                    None => Cell::failed(e, CellStatus::Unsupported),
                },
                Err(s) => Cell::failed(e, s.clone()),
            },
            Evaluation::McAud => match mc.as_ref().expect("computed when requested") {
                Ok(r) => Cell::ok(e, vec![r.mean_aud, r.aud_std_error]),
                Err(s) => Cell::failed(e, s.clone()),
            },
            Evaluation::McPmis => match mc.as_ref().expect("computed when requested") {
                Ok(r) => Cell::ok(e, vec![r.p_mis_hat, r.p_mis_std_error]),
                Err(s) => Cell::failed(e, s.clone()),
            },
            Evaluation::OptimalArrival => {
                let mu = match &system {
                    Ok((_, mu, _)) => *mu,
                    Err(err) => return Cell::failed(e, CellStatus::from_error(err)),
                };
                match optimize::bisection_optimal_arrival(
                    family,
                    mu,
                    optimize::default_tolerance(mu),
                    None,
                    None,
                    200,
                ) {
                    Ok(r) => Cell::ok(e, vec![r.aud, r.lambda_star]),
                    Err(err) => Cell::failed(e, CellStatus::from_error(&err)),
                }
            }
            Evaluation::OptimalOffset => {
                let (arrival, mu) = match &system {
                    Ok((a, mu, _)) => (*a, *mu),
                    Err(err) => return Cell::failed(e, CellStatus::from_error(err)),
                };
                if !arrival.is_point_mass() {
                    return Cell::failed(e, CellStatus::Unsupported);
                }
                match optimize::optimize_offset(arrival.rate(), mu, OFFSET_TOL, OFFSET_MAX_ITER) {
                    Ok(r) => Cell::ok(e, vec![r.aud, r.delta]),
                    Err(err) => Cell::failed(e, CellStatus::from_error(&err)),
                }
            }
        })
        .collect();
    SweepRow { value: v, cells }
}

/// Evaluates every requested quantity at every grid point.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepTable> {
    spec.validate()?;
    let axis = spec.axis()?;
    let family = spec.optimal_family()?;
    let evals = spec.ordered_evaluations();
    let rows = if evals.is_empty() {
        Vec::new()
    } else {
        spec.grid
            .par_iter()
            .map(|&v| evaluate_point(spec, axis, family, &evals, v))
            .collect()
    };
    Ok(SweepTable {
        swept: spec.swept.clone(),
        columns: spec.columns(),
        rows,
    })
}

/// 17 significant digits, enough to round-trip any binary64 value.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl SweepTable {
    fn flat_row(row: &SweepRow) -> Vec<(String, Value)> {
        let mut out = vec![(String::new(), Value::from(row.value))];
        for cell in &row.cells {
            for (name, v) in cell.evaluation.columns().iter().zip(&cell.values) {
                out.push((name.to_string(), v.map_or(Value::Null, Value::from)));
            }
            out.push((
                cell.evaluation.status_column().to_string(),
                Value::from(cell.status.to_string()),
            ));
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let ser = |e: csv::Error| AudError::Serialize(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns).map_err(ser)?;
        for row in &self.rows {
            let fields: Vec<String> = Self::flat_row(row)
                .into_iter()
                .map(|(_, v)| match v {
                    Value::Null => String::new(),
                    Value::Number(n) => format_float(n.as_f64().expect("finite number")),
                    Value::String(s) => s,
                    other => other.to_string(),
                })
                .collect();
            w.write_record(&fields).map_err(ser)?;
        }
        w.flush().map_err(|e| AudError::Serialize(e.to_string()))
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let mut m = Map::new();
                for (name, v) in Self::flat_row(row) {
                    let key = if name.is_empty() { self.swept.clone() } else { name };
                    m.insert(key, v);
                }
                Value::Object(m)
            })
            .collect();
        serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "kind": "sweep",
            "swept": self.swept,
            "columns": self.columns,
            "rows": rows,
        })
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, &self.to_json())
            .map_err(|e| AudError::Serialize(e.to_string()))?;
        writeln!(out).map_err(|e| AudError::Serialize(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Writes `table` to `path` in the given format.
pub fn serialize(table: &SweepTable, format: Format, path: &Path) -> Result<()> {
    let io_err = |source| AudError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    match format {
        Format::Csv => table.write_csv(&mut w)?,
        Format::Json => table.write_json(&mut w)?,
    }
    w.flush().map_err(io_err)
}

/// Wraps a serializable result in the versioned JSON envelope shared by all
/// CLI outputs.
pub fn envelope<T: Serialize>(kind: &str, body: &T) -> Result<Value> {
    let mut v = serde_json::to_value(body).map_err(|e| AudError::Serialize(e.to_string()))?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| AudError::Serialize(format!("{kind} body is not an object")))?;
    obj.insert("schema_version".to_string(), Value::from(SCHEMA_VERSION));
    obj.insert("kind".to_string(), Value::from(kind));
    Ok(v)
}
