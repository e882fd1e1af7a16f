//! Monte Carlo sweeps: configuration, execution and CSV output.
//!
//! A sweep file is TOML:
//!
//! ```toml
//! trials = 20
//! axis = "n"            # none | m | n | k | bits
//! values = [8, 16]      # "continuous" is accepted on the bits axis
//! output = "out.csv"    # optional; the CLI writes to stdout otherwise
//! plot_data = "plot.csv"
//!
//! [[schemes]]
//! optimizer = "dc"      # dc | sdr | random | noris
//! ordering = "eigen"    # direct | eigen | sdr | exhaustive
//! bits = "continuous"
//!
//! [scenario]
//! m = 3
//! k = 4
//! noise_power_dbm = -80.0
//! ```
//!
//! Every key is optional. Omitted scenario keys take the defaults of
//! [`ScenarioConfig`].
//!
//! # Output schema
//!
//! One header row, then one `trial` row per (axis value, scheme, trial) and
//! one `aggregate` row per (axis value, scheme), in that order:
//!
//! `kind,axis,axis_value,optimizer,ordering,bits,trial,seed,power_mw,power_dbm,
//! iterations,termination,wall_time_s,n_trials,n_converged,n_excluded,
//! feasible_rate,mean_dbm,stderr_db`
//!
//! Aggregates average `power_dbm` over converged trials only; `n_excluded`
//! counts the rest. `wall_time_s` is empty unless timing is enabled, which
//! keeps repeated sweeps byte-identical.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ScenarioConfig;
use crate::orchestrator::{run_trial, Optimizer, Quantization, RunResult, Termination};
use crate::ordering::{OrderingScheme, MAX_EXHAUSTIVE_USERS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Axis {
    #[default]
    None,
    M,
    N,
    K,
    Bits,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::None => "none",
            Axis::M => "m",
            Axis::N => "n",
            Axis::K => "k",
            Axis::Bits => "bits",
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Some(Axis::None),
            "m" => Some(Axis::M),
            "n" => Some(Axis::N),
            "k" => Some(Axis::K),
            "b" | "bits" => Some(Axis::Bits),
            _ => None,
        }
    }
}

/// One point on the sweep axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisValue {
    None,
    Count(usize),
    Bits(Quantization),
}

impl std::fmt::Display for AxisValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisValue::None => Ok(()),
            AxisValue::Count(c) => write!(f, "{c}"),
            AxisValue::Bits(q) => write!(f, "{q}"),
        }
    }
}

/// Parses an axis value given as text (`"8"`, `"continuous"`).
pub fn parse_axis_value(axis: Axis, text: &str) -> Result<AxisValue, String> {
    match axis {
        Axis::None => Err("axis `none` takes no values".into()),
        Axis::Bits => text.parse::<Quantization>().map(AxisValue::Bits),
        _ => text.parse::<usize>().map(AxisValue::Count).map_err(|_| format!("'{text}' is not a count")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemeSpec {
    pub optimizer: Optimizer,
    pub ordering: OrderingScheme,
    pub bits: Quantization,
}

impl Default for SchemeSpec {
    fn default() -> Self {
        SchemeSpec { optimizer: Optimizer::Dc, ordering: OrderingScheme::Eigen, bits: Quantization::Continuous }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: ScenarioConfig,
    pub axis: Axis,
    pub values: Vec<AxisValue>,
    pub schemes: Vec<SchemeSpec>,
    pub n_trials: usize,
    pub output: Option<PathBuf>,
    pub plot_data: Option<PathBuf>,
    /// Record wall-clock time per trial (makes the CSV non-reproducible).
    pub timing: bool,
    /// Worker threads; `None` uses all cores.
    pub workers: Option<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            base: ScenarioConfig::default(),
            axis: Axis::None,
            values: vec![AxisValue::None],
            schemes: vec![SchemeSpec::default()],
            n_trials: 100,
            output: None,
            plot_data: None,
            timing: false,
            workers: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawValue {
    Int(i64),
    Text(String),
}

impl RawValue {
    fn text(&self) -> String {
        match self {
            RawValue::Int(i) => i.to_string(),
            RawValue::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScheme {
    optimizer: Optimizer,
    #[serde(default = "default_ordering")]
    ordering: OrderingScheme,
    bits: Option<RawValue>,
}

fn default_ordering() -> OrderingScheme {
    OrderingScheme::Eigen
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    trials: Option<i64>,
    axis: Option<String>,
    values: Option<Vec<RawValue>>,
    output: Option<PathBuf>,
    plot_data: Option<PathBuf>,
    timing: Option<bool>,
    workers: Option<usize>,
    schemes: Option<Vec<RawScheme>>,
    scenario: Option<ScenarioConfig>,
}

/// Parses and validates a sweep description.
pub fn parse_config(text: &str) -> Result<SweepSpec, ConfigError> {
    let raw: RawSpec = toml::from_str(text)?;
    let mut spec = SweepSpec { base: raw.scenario.unwrap_or_default(), ..Default::default() };
    if let Some(t) = raw.trials {
        spec.n_trials = usize::try_from(t).map_err(|_| invalid("trials", "must be at least 1"))?;
    }
    if let Some(a) = raw.axis {
        spec.axis = Axis::parse(&a).ok_or_else(|| invalid("axis", format!("unknown axis '{a}' (expected none|m|n|k|bits)")))?;
    }
    match (spec.axis, raw.values) {
        (Axis::None, Some(v)) if !v.is_empty() => return Err(invalid("values", "axis `none` takes no values")),
        (Axis::None, _) => {}
        (_, None) => return Err(invalid("values", "a sweep axis needs a value list")),
        (axis, Some(v)) => {
            spec.values = v
                .iter()
                .map(|x| parse_axis_value(axis, &x.text()).map_err(|e| invalid("values", e)))
                .collect::<Result<_, _>>()?;
        }
    }
    if let Some(schemes) = raw.schemes {
        spec.schemes = schemes
            .into_iter()
            .map(|s| {
                let bits = match s.bits {
                    None => Quantization::Continuous,
                    Some(b) => b.text().parse().map_err(|e: String| invalid("schemes.bits", e))?,
                };
                Ok(SchemeSpec { optimizer: s.optimizer, ordering: s.ordering, bits })
            })
            .collect::<Result<_, ConfigError>>()?;
    }
    spec.output = raw.output;
    spec.plot_data = raw.plot_data;
    spec.timing = raw.timing.unwrap_or(false);
    spec.workers = raw.workers;
    spec.validate()?;
    Ok(spec)
}

impl SweepSpec {
    /// Scenario and quantization for one cell.
    pub fn cell(&self, value: AxisValue, scheme: &SchemeSpec) -> (ScenarioConfig, Quantization) {
        let mut c = self.base.clone();
        let mut bits = scheme.bits;
        match (self.axis, value) {
            (Axis::M, AxisValue::Count(v)) => c.m = v,
            (Axis::N, AxisValue::Count(v)) => c.n = v,
            (Axis::K, AxisValue::Count(v)) => c.k = v,
            (Axis::Bits, AxisValue::Bits(q)) => bits = q,
            _ => {}
        }
        (c, bits)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_trials == 0 {
            return Err(invalid("trials", "must be at least 1"));
        }
        if self.values.is_empty() {
            return Err(invalid("values", "must not be empty"));
        }
        if self.schemes.is_empty() {
            return Err(invalid("schemes", "must not be empty"));
        }
        if self.workers == Some(0) {
            return Err(invalid("workers", "must be at least 1"));
        }
        for &v in &self.values {
            for s in &self.schemes {
                let (c, _) = self.cell(v, s);
                let field = if self.axis == Axis::None { "scenario".to_string() } else { format!("values ({v})") };
                c.validate().map_err(|e| invalid(&field, e.to_string()))?;
                if s.ordering == OrderingScheme::Exhaustive && c.k > MAX_EXHAUSTIVE_USERS {
                    return Err(invalid("schemes.ordering", format!("exhaustive ordering needs k <= {MAX_EXHAUSTIVE_USERS}")));
                }
            }
        }
        Ok(())
    }
}

/// Seed of trial `trial` under master seed `master`. Axis values and schemes
/// share it, so every cell sees the same channel realizations.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = master ^ (trial as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub axis_value: AxisValue,
    pub scheme: SchemeSpec,
    pub trial: usize,
    pub seed: u64,
    pub power_mw: Option<f64>,
    pub power_dbm: Option<f64>,
    pub iterations: usize,
    pub termination: String,
    pub wall_time_s: Option<f64>,
}

impl TrialRecord {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct CellAggregate {
    pub axis_value: AxisValue,
    pub scheme: SchemeSpec,
    pub n_trials: usize,
    pub n_converged: usize,
    pub feasible_rate: f64,
    pub mean_dbm: Option<f64>,
    pub stderr_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub axis: Axis,
    pub trials: Vec<TrialRecord>,
    pub aggregates: Vec<CellAggregate>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    kind: &'a str,
    axis: &'a str,
    axis_value: String,
    optimizer: String,
    ordering: String,
    bits: String,
    trial: Option<usize>,
    seed: Option<u64>,
    power_mw: Option<f64>,
    power_dbm: Option<f64>,
    iterations: Option<usize>,
    termination: Option<&'a str>,
    wall_time_s: Option<f64>,
    n_trials: Option<usize>,
    n_converged: Option<usize>,
    n_excluded: Option<usize>,
    feasible_rate: Option<f64>,
    mean_dbm: Option<f64>,
    stderr_db: Option<f64>,
}

fn run_job(spec: &SweepSpec, value: AxisValue, scheme: SchemeSpec, trial: usize) -> TrialRecord {
    let (config, bits) = spec.cell(value, &scheme);
    let seed = trial_seed(spec.base.seed, trial);
    let start = Instant::now();
    let result = run_trial(&config, seed, scheme.ordering, scheme.optimizer, bits);
    let wall = spec.timing.then(|| start.elapsed().as_secs_f64());
    let (power_mw, power_dbm, iterations, termination) = match result {
        Ok(RunResult { total_power_mw, total_power_dbm, outer_iterations, termination, .. }) => {
            (total_power_mw, total_power_dbm, outer_iterations, termination.to_string())
        }
        Err(e) => (None, None, 0, format!("error: {e}")),
    };
    TrialRecord { axis_value: value, scheme, trial, seed, power_mw, power_dbm, iterations, termination, wall_time_s: wall }
}

fn aggregate(records: &[TrialRecord]) -> CellAggregate {
    let first = &records[0];
    let conv: Vec<f64> = records.iter().filter(|r| r.converged()).filter_map(|r| r.power_dbm).collect();
    let n = conv.len();
    let mean = (n > 0).then(|| conv.iter().sum::<f64>() / n as f64);
    let stderr = mean.filter(|_| n > 1).map(|m| {
        let var = conv.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    let feasible = records.iter().filter(|r| r.power_mw.is_some()).count();
    CellAggregate {
        axis_value: first.axis_value,
        scheme: first.scheme,
        n_trials: records.len(),
        n_converged: n,
        feasible_rate: feasible as f64 / records.len() as f64,
        mean_dbm: mean,
        stderr_db: stderr,
    }
}

/// Runs every (axis value, scheme, trial) job. Results come back in job
/// order regardless of scheduling.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutput, ConfigError> {
    spec.validate()?;
    let jobs: Vec<(AxisValue, SchemeSpec, usize)> = spec
        .values
        .iter()
        .flat_map(|&v| spec.schemes.iter().flat_map(move |&s| (0..spec.n_trials).map(move |t| (v, s, t))))
        .collect();

    #[cfg(feature = "parallel")]
    let trials: Vec<TrialRecord> = {
        use rayon::prelude::*;
        let run = || jobs.par_iter().map(|&(v, s, t)| run_job(spec, v, s, t)).collect();
        match spec.workers {
            Some(w) => rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| invalid("workers", e.to_string()))?
                .install(run),
            None => run(),
        }
    };
    #[cfg(not(feature = "parallel"))]
    let trials: Vec<TrialRecord> = jobs.iter().map(|&(v, s, t)| run_job(spec, v, s, t)).collect();

    let aggregates = trials.chunks(spec.n_trials).map(aggregate).collect();
    Ok(SweepOutput { axis: spec.axis, trials, aggregates })
}

fn fmt_opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl SweepOutput {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let axis = self.axis.name();
        for r in &self.trials {
            out.serialize(CsvRow {
                kind: "trial",
                axis,
                axis_value: r.axis_value.to_string(),
                optimizer: r.scheme.optimizer.to_string(),
                ordering: r.scheme.ordering.to_string(),
                bits: r.scheme.bits.to_string(),
                trial: Some(r.trial),
                seed: Some(r.seed),
                power_mw: r.power_mw,
                power_dbm: r.power_dbm,
                iterations: Some(r.iterations),
                termination: Some(&r.termination),
                wall_time_s: r.wall_time_s,
                n_trials: None,
                n_converged: None,
                n_excluded: None,
                feasible_rate: None,
                mean_dbm: None,
                stderr_db: None,
            })?;
        }
        for a in &self.aggregates {
            out.serialize(CsvRow {
                kind: "aggregate",
                axis,
                axis_value: a.axis_value.to_string(),
                optimizer: a.scheme.optimizer.to_string(),
                ordering: a.scheme.ordering.to_string(),
                bits: a.scheme.bits.to_string(),
                trial: None,
                seed: None,
                power_mw: None,
                power_dbm: None,
                iterations: None,
                termination: None,
                wall_time_s: None,
                n_trials: Some(a.n_trials),
                n_converged: Some(a.n_converged),
                n_excluded: Some(a.n_trials - a.n_converged),
                feasible_rate: Some(a.feasible_rate),
                mean_dbm: a.mean_dbm,
                stderr_db: a.stderr_db,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    /// `x,scheme,mean_dbm,stderr_db` per cell, for external plotting.
    pub fn write_plot_data<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,scheme,mean_dbm,stderr_db")?;
        for a in &self.aggregates {
            let s = &a.scheme;
            writeln!(
                w,
                "{},{}/{}/{},{},{}",
                a.axis_value,
                s.optimizer,
                s.ordering,
                s.bits,
                fmt_opt(a.mean_dbm),
                fmt_opt(a.stderr_db)
            )?;
        }
        Ok(())
    }

    /// Fixed-width summary of the aggregates.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:>12} {:>24} {:>10} {:>8} {:>10} {:>9}\n",
            self.axis.name(),
            "scheme",
            "mean dBm",
            "stderr",
            "converged",
            "feasible"
        );
        for a in &self.aggregates {
            let scheme = format!("{}/{}/{}", a.scheme.optimizer, a.scheme.ordering, a.scheme.bits);
            let mean = a.mean_dbm.map_or("-".into(), |m| format!("{m:.3}"));
            let se = a.stderr_db.map_or("-".into(), |m| format!("{m:.3}"));
            s += &format!(
                "{:>12} {:>24} {:>10} {:>8} {:>10} {:>9.2}\n",
                a.axis_value.to_string(),
                scheme,
                mean,
                se,
                format!("{}/{}", a.n_converged, a.n_trials),
                a.feasible_rate
            );
        }
        s
    }
}
