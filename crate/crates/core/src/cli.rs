//! Experiment runner behind the `exitrisk` binary.
//!
//! Every command writes CSV artifacts whose first line is a versioned schema
//! comment, followed by a plain-text `summary.txt`. Numbers are printed in
//! shortest round-trip form, so reruns with the same seed are byte-identical.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{Method, RiskReport, TimePartition};
use crate::exit_kernel::QuadratureSpec;
use crate::monte_carlo::{derive_seed, estimate_mc, McConfig, McResult};
use crate::scenarios::{generate_batch, load_scenario, BatchTemplate, Scenario, ScenarioInstance};

pub const CSV_VERSION: u32 = 1;
pub const RISK_COLUMNS: &str = "method,t_lo,t_hi,contribution,cumulative,mass";
pub const CONVERGE_COLUMNS: &str = "method,dt,total";
pub const BATCH_COLUMNS: &str = "scenario_id,method,total,mc,mc_se";
pub const STATS_COLUMNS: &str = "method,bias,rmse,mre,conservative_rate";
/// Rollouts of the interestingness probe during batch generation.
pub const PROBE_ROLLOUTS: usize = 100;
/// Largest fraction of batch scenarios allowed to fail.
pub const MAX_FAILED_FRACTION: f64 = 0.2;
/// An estimate is conservative when it is at least `MC − 5%·MC`.
pub const CONSERVATIVE_SLACK: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Estimate,
    Converge,
    Batch,
    Mc,
}

/// A method column: one of the estimators or the Monte-Carlo oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Requested {
    Estimator(Method),
    Mc,
}

impl Requested {
    pub fn as_str(self) -> &'static str {
        match self {
            Requested::Estimator(m) => m.as_str(),
            Requested::Mc => "mc",
        }
    }

    pub fn all() -> Vec<Requested> {
        Method::ALL.into_iter().map(Requested::Estimator).chain([Requested::Mc]).collect()
    }
}

impl fmt::Display for Requested {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Requested {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mc" {
            Ok(Requested::Mc)
        } else {
            s.parse().map(Requested::Estimator)
        }
    }
}

/// Parses a comma-separated method list, dropping repeats.
pub fn parse_methods(list: &str) -> Result<Vec<Requested>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: Requested = name.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("at least one method is required"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub scenario: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub methods: Vec<Requested>,
    /// Partition step sizes in seconds; empty means the scenario's own rate.
    pub dts: Vec<f64>,
    pub rollouts: usize,
    pub substeps: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub quad_points: Option<usize>,
    pub quad_box: Option<f64>,
    /// Batch size.
    pub count: usize,
}

impl ExperimentConfig {
    pub fn new(command: Command, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            command,
            scenario: None,
            template: None,
            methods: Requested::all(),
            dts: Vec::new(),
            rollouts: 1000,
            substeps: McConfig::new(1, 0).substeps,
            seed: 0,
            out_dir: out_dir.into(),
            quad_points: None,
            quad_box: None,
            count: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("at least one method is required"));
        }
        if let Some(dt) = self.dts.iter().find(|dt| !(**dt > 0.0) || !dt.is_finite()) {
            return Err(Error::invalid(format!("step sizes must be positive, got {dt}")));
        }
        self.mc_config(self.seed).validate()?;
        let needs_scenario = matches!(self.command, Command::Estimate | Command::Converge | Command::Mc);
        if needs_scenario && self.scenario.is_none() {
            return Err(Error::invalid("--scenario is required"));
        }
        match self.command {
            Command::Estimate | Command::Mc if self.dts.len() > 1 => {
                Err(Error::invalid("at most one --dt value for this command"))
            }
            Command::Converge if self.dts.len() < 3 => Err(Error::invalid("converge needs at least 3 --dt values")),
            Command::Converge if self.dts.windows(2).any(|w| w[1] >= w[0]) => {
                Err(Error::invalid("--dt values must be strictly decreasing"))
            }
            Command::Batch if self.template.is_none() => Err(Error::invalid("--template is required")),
            Command::Batch if self.count == 0 => Err(Error::invalid("--count must be >= 1")),
            Command::Batch if self.dts.len() > 1 => Err(Error::invalid("at most one --dt value for batch")),
            _ => Ok(()),
        }
    }

    fn estimators(&self) -> Vec<Method> {
        self.methods
            .iter()
            .filter_map(|m| match m {
                Requested::Estimator(m) => Some(*m),
                Requested::Mc => None,
            })
            .collect()
    }

    fn wants_mc(&self) -> bool {
        self.methods.contains(&Requested::Mc)
    }

    fn mc_config(&self, seed: u64) -> McConfig {
        McConfig::new(self.rollouts, seed).with_substeps(self.substeps)
    }

    fn quadrature(&self, base: &QuadratureSpec) -> Result<QuadratureSpec> {
        let mut spec = base.clone();
        if let Some(n) = self.quad_points {
            spec = spec.with_points(n);
        }
        if let Some(b) = self.quad_box {
            spec = spec.with_box(b);
        }
        spec.validate()?;
        Ok(spec)
    }

    fn partition(&self, instance: &ScenarioInstance) -> Result<TimePartition> {
        match self.dts.first() {
            Some(&dt) => TimePartition::uniform(instance.partition.horizon(), dt),
            None => Ok(instance.partition.clone()),
        }
    }

    fn scenario_path(&self) -> Result<&Path> {
        self.scenario.as_deref().ok_or_else(|| Error::invalid("--scenario is required"))
    }
}

/// Runs the configured command and returns the artifacts written.
pub fn run(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;
    match config.command {
        Command::Estimate => run_estimate(config).map(|o| o.artifacts),
        Command::Converge => run_converge(config).map(|o| o.artifacts),
        Command::Batch => run_batch(config).map(|o| o.artifacts),
        Command::Mc => run_mc(config).map(|o| o.artifacts),
    }
}

fn csv_header(name: &str, columns: &str) -> String {
    format!("# exitrisk {name} v{CSV_VERSION}\n{columns}\n")
}

fn write_artifact(dir: &Path, name: &str, body: &str, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, body)?;
    artifacts.push(path);
    Ok(())
}

fn load_instance(path: &Path) -> Result<(Scenario, ScenarioInstance)> {
    let scenario = load_scenario(path)?;
    let instance = scenario.instantiate()?;
    Ok((scenario, instance))
}

fn run_mc_on(instance: &ScenarioInstance, partition: &TimePartition, config: &McConfig) -> Result<McResult> {
    estimate_mc(
        instance.system.as_ref(),
        &instance.safe_set,
        &instance.design,
        &instance.initial_mean,
        partition,
        config,
    )
    .map_err(|e| e.in_method("mc"))
}

fn push_report_rows(csv: &mut String, report: &RiskReport) {
    let cumulative = report.cumulative();
    for (i, c) in report.per_interval.iter().enumerate() {
        let (lo, hi) = report.partition.interval(i);
        let mass = report.retained_mass.as_ref().map(|m| m[i].to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{lo},{hi},{c},{},{mass}", report.method, cumulative[i]);
    }
}

fn push_mc_rows(csv: &mut String, mc: &McResult, partition: &TimePartition) {
    let n = mc.num_rollouts as f64;
    let mut exited = 0usize;
    for (i, &count) in mc.first_exit_histogram.iter().enumerate() {
        let (lo, hi) = partition.interval(i);
        let survivors = 1.0 - exited as f64 / n;
        exited += count;
        let _ = writeln!(csv, "mc,{lo},{hi},{},{},{survivors}", count as f64 / n, exited as f64 / n);
    }
}

fn mc_summary(summary: &mut String, mc: &McResult, config: &McConfig) {
    let _ = writeln!(
        summary,
        "mc: {} ± {} ({} of {} rollouts exited, {} substeps, seed {})",
        mc.estimate, mc.standard_error, mc.exits, mc.num_rollouts, config.substeps, config.seed
    );
    let _ = writeln!(summary, "mc exits per constraint: {:?}", mc.exit_constraint_counts);
}

#[derive(Clone, Debug)]
pub struct EstimateOutput {
    pub reports: Vec<RiskReport>,
    pub mc: Option<McResult>,
    pub artifacts: Vec<PathBuf>,
}

/// Runs the requested methods on one scenario and partition; writes `risk.csv`.
pub fn run_estimate(config: &ExperimentConfig) -> Result<EstimateOutput> {
    config.validate()?;
    let path = config.scenario_path()?;
    let (_, instance) = load_instance(path)?;
    let spec = config.quadrature(&instance.quadrature)?;
    let partition = config.partition(&instance)?;
    let problem = instance.problem(&spec);
    let reports = config
        .estimators()
        .into_iter()
        .map(|m| problem.estimate(m, &partition))
        .collect::<Result<Vec<_>>>()?;
    let mc_config = config.mc_config(config.seed);
    let mc = if config.wants_mc() { Some(run_mc_on(&instance, &partition, &mc_config)?) } else { None };

    let mut csv = csv_header("risk.csv", RISK_COLUMNS);
    for r in &reports {
        push_report_rows(&mut csv, r);
    }
    if let Some(mc) = &mc {
        push_mc_rows(&mut csv, mc, &partition);
    }
    let mut summary = String::new();
    let _ = writeln!(summary, "scenario: {}", path.display());
    let _ = writeln!(summary, "partition: {} intervals over {} s", partition.num_intervals(), partition.horizon());
    let _ = writeln!(summary, "quadrature: {spec:?}");
    for r in &reports {
        let _ = writeln!(
            summary,
            "{}: total {} (unclamped {}){}",
            r.method,
            r.total,
            r.raw_sum(),
            if r.saturated { ", saturated" } else { "" }
        );
    }
    if let Some(mc) = &mc {
        mc_summary(&mut summary, mc, &mc_config);
    }

    let mut artifacts = Vec::new();
    write_artifact(&config.out_dir, "risk.csv", &csv, &mut artifacts)?;
    write_artifact(&config.out_dir, "summary.txt", &summary, &mut artifacts)?;
    Ok(EstimateOutput { reports, mc, artifacts })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergeRow {
    pub method: Requested,
    pub dt: f64,
    pub total: f64,
    /// Unclamped sum of contributions; equals `total` for MC.
    pub raw: f64,
}

#[derive(Clone, Debug)]
pub struct ConvergeOutput {
    pub rows: Vec<ConvergeRow>,
    pub mc: Option<McResult>,
    pub artifacts: Vec<PathBuf>,
}

/// Evaluates each estimator at every step size; MC runs once on the finest
/// partition. Writes `converge.csv`.
pub fn run_converge(config: &ExperimentConfig) -> Result<ConvergeOutput> {
    config.validate()?;
    let path = config.scenario_path()?;
    let (_, instance) = load_instance(path)?;
    let spec = config.quadrature(&instance.quadrature)?;
    let problem = instance.problem(&spec);
    let horizon = instance.partition.horizon();
    let partitions = config.dts.iter().map(|&dt| TimePartition::uniform(horizon, dt)).collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for method in config.estimators() {
        for (&dt, partition) in config.dts.iter().zip(&partitions) {
            let report = problem.estimate(method, partition)?;
            rows.push(ConvergeRow { method: Requested::Estimator(method), dt, total: report.total, raw: report.raw_sum() });
        }
    }
    let mc_config = config.mc_config(config.seed);
    let mc = if config.wants_mc() {
        let finest = partitions.last().expect("validated: at least 3 partitions");
        let mc = run_mc_on(&instance, finest, &mc_config)?;
        let dt = *config.dts.last().expect("validated");
        rows.push(ConvergeRow { method: Requested::Mc, dt, total: mc.estimate, raw: mc.estimate });
        Some(mc)
    } else {
        None
    };

    let mut csv = csv_header("converge.csv", CONVERGE_COLUMNS);
    let mut summary = String::new();
    let _ = writeln!(summary, "scenario: {}", path.display());
    let _ = writeln!(summary, "quadrature: {spec:?}");
    for row in &rows {
        let _ = writeln!(csv, "{},{},{}", row.method, row.dt, row.total);
        let _ = writeln!(summary, "{} dt={}: total {} (unclamped {})", row.method, row.dt, row.total, row.raw);
    }
    if let Some(mc) = &mc {
        mc_summary(&mut summary, mc, &mc_config);
    }
    let mut artifacts = Vec::new();
    write_artifact(&config.out_dir, "converge.csv", &csv, &mut artifacts)?;
    write_artifact(&config.out_dir, "summary.txt", &summary, &mut artifacts)?;
    Ok(ConvergeOutput { rows, mc, artifacts })
}

/// Accuracy of one estimator against MC over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub method: Method,
    /// Mean of `estimate − mc`.
    pub bias: f64,
    pub rmse: f64,
    /// Median of `|estimate − mc| / mc` over scenarios with `mc > 0`.
    pub mre: f64,
    /// Fraction of scenarios with `estimate >= mc − 5%·mc`.
    pub conservative_rate: f64,
    pub scenarios: usize,
}

impl BatchStats {
    /// Statistics over `(estimate, mc)` pairs.
    pub fn from_pairs(method: Method, pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("batch statistics need at least one scenario"));
        }
        let n = pairs.len() as f64;
        let bias = pairs.iter().map(|(e, m)| e - m).sum::<f64>() / n;
        let rmse = (pairs.iter().map(|(e, m)| (e - m) * (e - m)).sum::<f64>() / n).sqrt();
        let mut rel: Vec<f64> = pairs.iter().filter(|(_, m)| *m > 0.0).map(|(e, m)| (e - m).abs() / m).collect();
        rel.sort_by(f64::total_cmp);
        let mre = median(&rel);
        let conservative = pairs.iter().filter(|(e, m)| *e >= m - CONSERVATIVE_SLACK * m).count();
        Ok(Self { method, bias, rmse, mre, conservative_rate: conservative as f64 / n, scenarios: pairs.len() })
    }
}

/// Median of sorted values; NaN when empty.
fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult {
    pub scenario_id: usize,
    /// Totals in the order of the requested estimators.
    pub totals: Vec<(Method, f64)>,
    pub mc: f64,
    pub mc_se: f64,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub stats: Vec<BatchStats>,
    pub results: Vec<ScenarioResult>,
    /// Scenario ids excluded after an error.
    pub failed: Vec<usize>,
    pub examined: usize,
    pub artifacts: Vec<PathBuf>,
}

/// Generates a batch from the template, runs every estimator and MC on each
/// scenario, and writes `batch.csv`, `stats.csv` and the scenario files.
pub fn run_batch(config: &ExperimentConfig) -> Result<BatchOutput> {
    config.validate()?;
    let template_path = config.template.as_deref().ok_or_else(|| Error::invalid("--template is required"))?;
    let template = BatchTemplate::load(template_path)?;
    let probe = McConfig::new(PROBE_ROLLOUTS, derive_seed(config.seed, u64::MAX)).with_substeps(config.substeps);
    let batch = generate_batch(&template, config.count, config.seed, &probe)?;
    let methods = config.estimators();
    if methods.is_empty() {
        return Err(Error::invalid("batch needs at least one estimator method"));
    }

    let outcomes: Vec<Result<ScenarioResult>> = batch
        .scenarios
        .par_iter()
        .enumerate()
        .map(|(id, scenario)| {
            let instance = scenario.instantiate()?;
            let spec = config.quadrature(&instance.quadrature)?;
            let partition = config.partition(&instance)?;
            let problem = instance.problem(&spec);
            let totals = methods
                .iter()
                .map(|&m| problem.estimate(m, &partition).map(|r| (m, r.total)))
                .collect::<Result<Vec<_>>>()?;
            let mc = run_mc_on(&instance, &partition, &config.mc_config(derive_seed(config.seed, id as u64)))?;
            Ok(ScenarioResult { scenario_id: id, totals, mc: mc.estimate, mc_se: mc.standard_error })
        })
        .collect();

    let mut results = Vec::new();
    let mut failed = Vec::new();
    let mut failures = String::new();
    for (id, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                eprintln!("scenario {id} excluded: {e}");
                let _ = writeln!(failures, "scenario {id} excluded: {e}");
                failed.push(id);
            }
        }
    }
    let total = batch.scenarios.len();
    if failed.len() as f64 > MAX_FAILED_FRACTION * total as f64 {
        return Err(Error::BatchAborted { failed: failed.len(), total });
    }

    let stats = methods
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let pairs: Vec<(f64, f64)> = results.iter().map(|r| (r.totals[k].1, r.mc)).collect();
            BatchStats::from_pairs(m, &pairs)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut batch_csv = csv_header("batch.csv", BATCH_COLUMNS);
    for r in &results {
        for (m, t) in &r.totals {
            let _ = writeln!(batch_csv, "{},{m},{t},{},{}", r.scenario_id, r.mc, r.mc_se);
        }
    }
    let mut stats_csv = csv_header("stats.csv", STATS_COLUMNS);
    let mut summary = String::new();
    let _ = writeln!(summary, "template: {}", template_path.display());
    let _ = writeln!(
        summary,
        "batch: {} scenarios from {} candidates (seed {}); rejected {} invalid, {} in collision, {} uninteresting",
        total, batch.examined, config.seed, batch.rejected_invalid, batch.rejected_collision, batch.rejected_uninteresting
    );
    let _ = writeln!(summary, "mc: {} rollouts per scenario, {} substeps", config.rollouts, config.substeps);
    let _ = writeln!(summary, "excluded: {} of {}", failed.len(), total);
    summary.push_str(&failures);
    for s in &stats {
        let _ = writeln!(stats_csv, "{},{},{},{},{}", s.method, s.bias, s.rmse, s.mre, s.conservative_rate);
        let _ = writeln!(
            summary,
            "{}: bias {:+.4}, rmse {:.4}, mre {:.4}, conservative {:.0}% over {} scenarios",
            s.method,
            s.bias,
            s.rmse,
            s.mre,
            100.0 * s.conservative_rate,
            s.scenarios
        );
    }

    let mut artifacts = Vec::new();
    write_artifact(&config.out_dir, "batch.csv", &batch_csv, &mut artifacts)?;
    write_artifact(&config.out_dir, "stats.csv", &stats_csv, &mut artifacts)?;
    write_artifact(&config.out_dir, "summary.txt", &summary, &mut artifacts)?;
    let dir = config.out_dir.join("scenarios");
    for (id, scenario) in batch.scenarios.iter().enumerate() {
        write_artifact(&dir, &format!("scenario_{id:03}.json"), &scenario.to_json()?, &mut artifacts)?;
    }
    Ok(BatchOutput { stats, results, failed, examined: batch.examined, artifacts })
}

#[derive(Clone, Debug)]
pub struct McOutput {
    pub result: McResult,
    pub artifacts: Vec<PathBuf>,
}

/// Monte-Carlo rollouts only; writes `risk.csv` with `mc` rows.
pub fn run_mc(config: &ExperimentConfig) -> Result<McOutput> {
    config.validate()?;
    let path = config.scenario_path()?;
    let (_, instance) = load_instance(path)?;
    let partition = config.partition(&instance)?;
    let mc_config = config.mc_config(config.seed);
    let result = run_mc_on(&instance, &partition, &mc_config)?;

    let mut csv = csv_header("risk.csv", RISK_COLUMNS);
    push_mc_rows(&mut csv, &result, &partition);
    let mut summary = String::new();
    let _ = writeln!(summary, "scenario: {}", path.display());
    mc_summary(&mut summary, &result, &mc_config);
    let mut artifacts = Vec::new();
    write_artifact(&config.out_dir, "risk.csv", &csv, &mut artifacts)?;
    write_artifact(&config.out_dir, "summary.txt", &summary, &mut artifacts)?;
    Ok(McOutput { result, artifacts })
}
