//! Command implementations behind the `cestrade` binary.
//!
//! Exit codes: 0 success, 1 invalid input (scenario, arguments, files),
//! 2 solver failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use cestrade_core::participation::{
    build_cost_table, expectation_metrics, run_dynamics, CostTable, DynamicsOptions, DynamicsTrace,
    ExpectationMetrics, MixedProfile, Model, ParticipationError, PtParams,
};
use cestrade_core::scenario::{baseline_solve, load_scenario, ActionProfile, Scenario, ScenarioConfig, ScenarioError};
use cestrade_core::stackelberg::{solve_stackelberg, StackelbergError, StackelbergSolution};
use cestrade_core::storage::{check_feasible, ChargeTrajectory, FeasibilityReport, FeasibilityTolerance};
use cestrade_core::synthetic;

/// Worker threads for cost-table builds; unset means one per core.
pub const WORKERS_ENV: &str = "CES_WORKERS";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Alpha grid of the `report` command.
pub const REPORT_ALPHAS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Solve(#[from] StackelbergError),
    #[error(transparent)]
    Participation(#[from] ParticipationError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Scenario(_) | CliError::Output { .. } => 1,
            CliError::Solve(StackelbergError::Profile(_)) => 1,
            CliError::Participation(
                ParticipationError::Probability(_)
                | ParticipationError::Alpha(_)
                | ParticipationError::Eta(_)
                | ParticipationError::Mixed(_)
                | ParticipationError::AlphaCount { .. }
                | ParticipationError::TooManyProfiles(_),
            ) => 1,
            CliError::Solve(_) | CliError::Participation(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cestrade", version, about = "Community battery trading simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a scenario, check its invariants and the idle battery trajectory.
    Validate {
        /// Config JSON path, or builtin:default / builtin:s1 / builtin:three_player.
        scenario: String,
    },
    /// Solve the equilibrium for one participation profile.
    Solve {
        scenario: String,
        /// Start slot per participant, comma separated; defaults to each earliest start.
        #[arg(long, value_delimiter = ',')]
        h: Option<Vec<usize>>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run fictitious play on the participation game.
    Participation {
        scenario: String,
        #[arg(long, value_enum, default_value_t = ModelKind::Eut)]
        model: ModelKind,
        /// One value for everybody or one per participant.
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        alpha: Vec<f64>,
        #[command(flatten)]
        dynamics: DynamicsArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// EUT run plus one prospect-theory run per alpha, sharing one cost table.
    SweepAlpha {
        scenario: String,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[command(flatten)]
        dynamics: DynamicsArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Full sweep over alpha = 0.1..1.0 with a robustness summary.
    Report {
        scenario: String,
        #[command(flatten)]
        dynamics: DynamicsArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Eut,
    Pt,
}

#[derive(Debug, Clone, Args)]
pub struct DynamicsArgs {
    #[arg(long, default_value_t = cestrade_core::participation::DEFAULT_ETA)]
    pub eta: f64,
    /// Initial probabilities, shared by all participants (default 0.3,0.3,0.4 for three starts, else uniform).
    #[arg(long, value_delimiter = ',')]
    pub y0: Option<Vec<f64>>,
    #[arg(long, default_value_t = cestrade_core::participation::DEFAULT_EPSILON)]
    pub eps: f64,
    #[arg(long, default_value_t = cestrade_core::participation::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
}

impl Default for DynamicsArgs {
    fn default() -> Self {
        let d = DynamicsOptions::default();
        Self { eta: d.eta, y0: None, eps: d.eps, max_iter: d.max_iter }
    }
}

impl DynamicsArgs {
    pub fn options(&self) -> DynamicsOptions {
        DynamicsOptions { eta: self.eta, max_iter: self.max_iter, eps: self.eps }
    }

    pub fn initial(&self, table: &CostTable) -> Result<MixedProfile, CliError> {
        let y0 = match &self.y0 {
            Some(y) => MixedProfile::repeated(y, table.players()),
            None if table.starts.iter().all(|s| s.len() == synthetic::DEFAULT_Y0.len()) => {
                MixedProfile::repeated(&synthetic::DEFAULT_Y0, table.players())
            }
            None => MixedProfile::uniform(table),
        };
        y0.validate(table).map_err(|e| CliError::Usage(format!("--y0: {e}")))?;
        Ok(y0)
    }
}

/// A loaded scenario with the hash of the bytes it came from.
#[derive(Debug, Clone)]
pub struct ScenarioSource {
    pub label: String,
    pub scenario: Scenario,
    pub config_sha256: String,
}

fn hash_parts(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

pub fn load_source(arg: &str) -> Result<ScenarioSource, CliError> {
    if let Some(name) = arg.strip_prefix("builtin:") {
        let (scenario, prices) = match name {
            "default" => (synthetic::default_scenario(), synthetic::default_price_config()),
            "s1" => {
                let s = synthetic::s1_scenario();
                let p = synthetic::explicit_prices(&s);
                (s, p)
            }
            "three_player" => {
                let s = synthetic::three_player_scenario();
                let p = synthetic::explicit_prices(&s);
                (s, p)
            }
            other => return Err(CliError::Usage(format!("unknown builtin scenario `{other}`"))),
        };
        let config = synthetic::scenario_config(&scenario, prices, &format!("{name}.csv"));
        let json = serde_json::to_string_pretty(&config).expect("config serialises") + "\n";
        let csv = synthetic::profiles_csv(&scenario);
        return Ok(ScenarioSource {
            label: arg.to_string(),
            config_sha256: hash_parts(&[json.as_bytes(), csv.as_bytes()]),
            scenario,
        });
    }
    let path = Path::new(arg);
    let scenario = load_scenario(path)?;
    let config_bytes = fs::read(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    let config: ScenarioConfig = serde_json::from_slice(&config_bytes)
        .map_err(|source| ScenarioError::Config { path: path.to_path_buf(), source })?;
    let csv_path = path.parent().unwrap_or(Path::new(".")).join(&config.users.profiles_csv);
    let csv_bytes = fs::read(&csv_path).map_err(|source| ScenarioError::Io { path: csv_path, source })?;
    Ok(ScenarioSource {
        label: arg.to_string(),
        config_sha256: hash_parts(&[&config_bytes, &csv_bytes]),
        scenario,
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Output { path: path.to_path_buf(), source })
}

/// CSV text with a leading `# config_sha256: ...` comment line.
fn csv_text(hash: &str, header: &[String], rows: &[Vec<String>]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(header).expect("in-memory csv");
    for row in rows {
        writer.write_record(row).expect("in-memory csv");
    }
    let body = String::from_utf8(writer.into_inner().expect("in-memory csv")).expect("utf-8 csv");
    format!("# config_sha256: {hash}\n{body}")
}

fn json_text<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serialises") + "\n"
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ValidationSummary {
    pub scenario: String,
    pub config_sha256: String,
    pub slots: usize,
    pub households: usize,
    pub participants: usize,
    pub profiles: u128,
    /// Idle battery (no trades) checked against the feasibility rules.
    pub idle: FeasibilityReport,
}

pub fn cmd_validate(scenario: &str) -> Result<ValidationSummary, CliError> {
    let source = load_source(scenario)?;
    let s = &source.scenario;
    let idle = ChargeTrajectory::from_net(&s.battery, &vec![0.0; s.slots()]);
    let idle = check_feasible(&s.battery, &idle, FeasibilityTolerance::for_battery(&s.battery));
    Ok(ValidationSummary {
        scenario: source.label.clone(),
        config_sha256: source.config_sha256.clone(),
        slots: s.slots(),
        households: s.users.len(),
        participants: s.participant_count(),
        profiles: cestrade_core::participation::profile_count(s),
        idle,
    })
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub config_sha256: String,
    pub version: &'static str,
    pub profile: Vec<usize>,
    pub revenue: f64,
    pub daily_costs: Vec<UserCost>,
    pub projected: bool,
    pub feasible: bool,
    pub continuity_gap: f64,
    pub min_charge: f64,
    pub max_charge: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct UserCost {
    pub id: usize,
    pub cost: f64,
}

pub fn solution_csv(hash: &str, sol: &StackelbergSolution) -> String {
    let mut header: Vec<String> =
        ["slot", "ces_price", "ces_grid_trade", "charge", "grid_price", "total_load"].map(String::from).to_vec();
    header.extend(sol.participant_ids.iter().map(|id| format!("x_user{id}")));
    header.extend(sol.participant_ids.iter().map(|id| format!("l_user{id}")));
    let rows: Vec<Vec<String>> = (0..sol.slots.len())
        .map(|t| {
            let mut row = vec![
                (t + 1).to_string(),
                num(sol.strategy.price[t]),
                num(sol.strategy.grid_trade[t]),
                num(sol.trajectory.q[t]),
                num(sol.slots[t].price),
                num(sol.slots[t].total_load),
            ];
            row.extend(sol.trades.iter().map(|x| num(x[t])));
            row.extend(sol.grid_loads.iter().map(|l| num(l[t])));
            row
        })
        .collect();
    csv_text(hash, &header, &rows)
}

pub fn cmd_solve(scenario: &str, h: Option<&[usize]>, out: &Path) -> Result<SolveSummary, CliError> {
    let source = load_source(scenario)?;
    let s = &source.scenario;
    let profile = match h {
        Some(h) => ActionProfile(h.to_vec()),
        None => s.earliest_profile(),
    };
    s.check_profile(&profile).map_err(|e| CliError::Usage(format!("--h: {e}")))?;
    let sol = solve_stackelberg(s, &profile)?;
    let summary = SolveSummary {
        config_sha256: source.config_sha256.clone(),
        version: VERSION,
        profile: profile.0.clone(),
        revenue: sol.revenue,
        daily_costs: sol.participant_ids.iter().zip(&sol.daily_costs).map(|(&id, &cost)| UserCost { id, cost }).collect(),
        projected: sol.projected,
        feasible: sol.feasibility.is_feasible(),
        continuity_gap: sol.feasibility.continuity_gap,
        min_charge: sol.feasibility.min_charge,
        max_charge: sol.feasibility.max_charge,
    };
    write_file(&out.join("solution.csv"), solution_csv(&source.config_sha256, &sol).as_bytes())?;
    write_file(&out.join("solution.json"), json_text(&summary).as_bytes())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// participation runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    /// `eut` or `pt`.
    pub model: String,
    /// Common alpha of a PT run; per-user values are in `alphas`.
    pub alpha: Option<f64>,
    pub alphas: Option<Vec<f64>>,
    pub converged_at: Option<usize>,
    pub epsilon: f64,
    pub probabilities: Vec<Vec<f64>>,
    pub metrics: ExpectationMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub scenario: String,
    pub config_sha256: String,
    pub version: &'static str,
    pub participants: Vec<usize>,
    pub starts: Vec<Vec<usize>>,
    pub profiles: usize,
    pub dynamics: DynamicsOptions,
    pub y0: Vec<Vec<f64>>,
}

fn metadata(source: &ScenarioSource, table: &CostTable, options: DynamicsOptions, y0: &MixedProfile) -> Metadata {
    Metadata {
        scenario: source.label.clone(),
        config_sha256: source.config_sha256.clone(),
        version: VERSION,
        participants: table.participant_ids.clone(),
        starts: table.starts.clone(),
        profiles: table.len(),
        dynamics: options,
        y0: y0.0.clone(),
    }
}

fn run_one(
    source: &ScenarioSource,
    table: &CostTable,
    model: Model,
    y0: &MixedProfile,
    options: &DynamicsOptions,
) -> Result<(RunResult, DynamicsTrace), CliError> {
    let (y, trace) = run_dynamics(table, &model, y0, options)?;
    let baseline = baseline_solve(&source.scenario);
    let metrics = expectation_metrics(&y, table, &baseline, &source.scenario);
    let (name, alpha, alphas) = match &model {
        Model::Eut => ("eut", None, None),
        Model::Pt(p) if p.alpha.iter().all(|a| *a == p.alpha[0]) => ("pt", Some(p.alpha[0]), None),
        Model::Pt(p) => ("pt", None, Some(p.alpha.clone())),
    };
    Ok((
        RunResult {
            model: name.to_string(),
            alpha,
            alphas,
            converged_at: trace.converged_at,
            epsilon: trace.epsilon_achieved,
            probabilities: y.0,
            metrics,
        },
        trace,
    ))
}

fn all_starts(table: &CostTable) -> Vec<usize> {
    let mut starts: Vec<usize> = table.starts.iter().flatten().copied().collect();
    starts.sort_unstable();
    starts.dedup();
    starts
}

/// Probabilities laid out one row per participant and run, one column per start.
pub fn probabilities_csv(hash: &str, table: &CostTable, runs: &[RunResult]) -> String {
    let starts = all_starts(table);
    let mut header: Vec<String> = ["model", "alpha", "user"].map(String::from).to_vec();
    header.extend(starts.iter().map(|h| format!("p_start{h}")));
    let mut rows = Vec::new();
    for run in runs {
        for (n, id) in table.participant_ids.iter().enumerate() {
            let alpha = run.alpha.or_else(|| run.alphas.as_ref().map(|a| a[n]));
            let mut row = vec![run.model.clone(), opt(alpha), id.to_string()];
            row.extend(starts.iter().map(|h| match table.starts[n].iter().position(|s| s == h) {
                Some(j) => num(run.probabilities[n][j]),
                None => String::new(),
            }));
            rows.push(row);
        }
    }
    csv_text(hash, &header, &rows)
}

/// One row per run: the curves of revenue, savings and peak-to-average ratio against alpha.
pub fn metrics_csv(hash: &str, table: &CostTable, runs: &[RunResult]) -> String {
    let mut header: Vec<String> = [
        "model",
        "alpha",
        "converged_at",
        "epsilon",
        "expected_revenue",
        "total_saving_percent",
        "expected_par",
        "baseline_par",
        "par_reduction_percent",
    ]
    .map(String::from)
    .to_vec();
    header.extend(table.participant_ids.iter().map(|id| format!("saving_percent_user{id}")));
    let rows = runs
        .iter()
        .map(|run| {
            let m = &run.metrics;
            let mut row = vec![
                run.model.clone(),
                opt(run.alpha),
                run.converged_at.map(|i| i.to_string()).unwrap_or_default(),
                num(run.epsilon),
                num(m.expected_revenue),
                opt(m.total_saving_percent),
                opt(m.expected_par),
                opt(m.baseline_par),
                opt(m.par_reduction_percent),
            ];
            row.extend(m.users.iter().map(|u| opt(u.saving_percent)));
            row
        })
        .collect::<Vec<_>>();
    csv_text(hash, &header, &rows)
}

pub fn trace_csv(hash: &str, table: &CostTable, trace: &DynamicsTrace) -> String {
    let starts = all_starts(table);
    let mut header: Vec<String> = ["iteration", "epsilon", "user"].map(String::from).to_vec();
    header.extend(starts.iter().map(|h| format!("p_start{h}")));
    let mut rows = Vec::new();
    for (i, (y, eps)) in trace.iterates.iter().zip(&trace.epsilons).enumerate() {
        for (n, id) in table.participant_ids.iter().enumerate() {
            let mut row = vec![i.to_string(), num(*eps), id.to_string()];
            row.extend(starts.iter().map(|h| match table.starts[n].iter().position(|s| s == h) {
                Some(j) => num(y.0[n][j]),
                None => String::new(),
            }));
            rows.push(row);
        }
    }
    csv_text(hash, &header, &rows)
}

fn check_alpha(alpha: f64) -> Result<f64, CliError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(alpha)
    } else {
        Err(CliError::Usage(format!("alpha {alpha} is outside (0, 1]")))
    }
}

fn check_dynamics(args: &DynamicsArgs) -> Result<(), CliError> {
    if !(args.eta > 0.0 && args.eta < 1.0) {
        return Err(CliError::Usage(format!("--eta {} is outside (0, 1)", args.eta)));
    }
    if !(args.eps >= 0.0) {
        return Err(CliError::Usage(format!("--eps {} must be non-negative", args.eps)));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ParticipationReport {
    pub metadata: Metadata,
    pub run: RunResult,
}

pub fn cmd_participation(
    scenario: &str,
    model: ModelKind,
    alpha: &[f64],
    dynamics: &DynamicsArgs,
    out: &Path,
) -> Result<ParticipationReport, CliError> {
    check_dynamics(dynamics)?;
    let source = load_source(scenario)?;
    let players = source.scenario.participant_count();
    let model = match model {
        ModelKind::Eut => Model::Eut,
        ModelKind::Pt => {
            let alpha = alpha.iter().map(|&a| check_alpha(a)).collect::<Result<Vec<_>, _>>()?;
            match alpha.len() {
                1 => Model::Pt(PtParams::uniform(alpha[0], players)),
                n if n == players => Model::Pt(PtParams { alpha }),
                n => return Err(CliError::Usage(format!("--alpha has {n} values for {players} participants"))),
            }
        }
    };
    let table = build_cost_table(&source.scenario)?;
    let y0 = dynamics.initial(&table)?;
    let options = dynamics.options();
    let (run, trace) = run_one(&source, &table, model, &y0, &options)?;
    let hash = &source.config_sha256;
    write_file(&out.join("probabilities.csv"), probabilities_csv(hash, &table, std::slice::from_ref(&run)).as_bytes())?;
    write_file(&out.join("trace.csv"), trace_csv(hash, &table, &trace).as_bytes())?;
    let report = ParticipationReport { metadata: metadata(&source, &table, options, &y0), run };
    write_file(&out.join("metrics.json"), json_text(&report).as_bytes())?;
    Ok(report)
}

/// How far a PT run lands from the EUT run.
#[derive(Debug, Clone, Serialize)]
pub struct Robustness {
    pub alpha: f64,
    /// PT total saving minus EUT total saving, percentage points.
    pub saving_gap_pp: Option<f64>,
    /// Relative revenue gap, percent of the EUT revenue.
    pub revenue_gap_percent: f64,
    pub par_reduction_gap_pp: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub metadata: Metadata,
    /// EUT first, then PT in grid order.
    pub runs: Vec<RunResult>,
    pub robustness: Vec<Robustness>,
}

pub fn robustness(runs: &[RunResult]) -> Vec<Robustness> {
    let Some(eut) = runs.iter().find(|r| r.model == "eut") else {
        return Vec::new();
    };
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    runs.iter()
        .filter_map(|r| {
            let alpha = r.alpha?;
            let base = eut.metrics.expected_revenue;
            Some(Robustness {
                alpha,
                saving_gap_pp: diff(r.metrics.total_saving_percent, eut.metrics.total_saving_percent),
                revenue_gap_percent: 100.0 * (r.metrics.expected_revenue - base) / base.abs(),
                par_reduction_gap_pp: diff(r.metrics.par_reduction_percent, eut.metrics.par_reduction_percent),
            })
        })
        .collect()
}

fn sweep(source: &ScenarioSource, grid: &[f64], dynamics: &DynamicsArgs) -> Result<(CostTable, SweepReport), CliError> {
    check_dynamics(dynamics)?;
    if grid.is_empty() {
        return Err(CliError::Usage("alpha grid is empty".into()));
    }
    for &a in grid {
        check_alpha(a)?;
    }
    let table = build_cost_table(&source.scenario)?;
    let y0 = dynamics.initial(&table)?;
    let options = dynamics.options();
    let players = table.players();
    let mut runs = vec![run_one(source, &table, Model::Eut, &y0, &options)?.0];
    for &alpha in grid {
        runs.push(run_one(source, &table, Model::Pt(PtParams::uniform(alpha, players)), &y0, &options)?.0);
    }
    let report = SweepReport { metadata: metadata(source, &table, options, &y0), robustness: robustness(&runs), runs };
    Ok((table, report))
}

fn write_sweep(out: &Path, stem: &str, table: &CostTable, report: &SweepReport) -> Result<(), CliError> {
    let hash = &report.metadata.config_sha256;
    write_file(&out.join(format!("{stem}_probabilities.csv")), probabilities_csv(hash, table, &report.runs).as_bytes())?;
    write_file(&out.join(format!("{stem}_metrics.csv")), metrics_csv(hash, table, &report.runs).as_bytes())?;
    write_file(&out.join(format!("{stem}.json")), json_text(report).as_bytes())
}

pub fn cmd_sweep_alpha(scenario: &str, grid: &[f64], dynamics: &DynamicsArgs, out: &Path) -> Result<SweepReport, CliError> {
    let source = load_source(scenario)?;
    let (table, report) = sweep(&source, grid, dynamics)?;
    write_sweep(out, "sweep", &table, &report)?;
    Ok(report)
}

/// Markdown summary of a sweep, including the EUT comparison.
pub fn report_markdown(report: &SweepReport) -> String {
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
    let mut md = String::new();
    md.push_str("# Participation sweep\n\n");
    md.push_str(&format!(
        "- scenario: `{}`\n- config_sha256: `{}`\n- version: {}\n- profiles: {}\n- eta: {}, eps: {}, max_iter: {}\n\n",
        report.metadata.scenario,
        report.metadata.config_sha256,
        report.metadata.version,
        report.metadata.profiles,
        report.metadata.dynamics.eta,
        report.metadata.dynamics.eps,
        report.metadata.dynamics.max_iter
    ));
    md.push_str("## Expected outcomes\n\n");
    md.push_str("| model | alpha | converged at | epsilon | W | total saving % | expected PAR | PAR reduction % |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for run in &report.runs {
        md.push_str(&format!(
            "| {} | {} | {} | {:.2e} | {:.6} | {} | {} | {} |\n",
            run.model,
            fmt(run.alpha),
            run.converged_at.map(|i| i.to_string()).unwrap_or_else(|| "-".into()),
            run.epsilon,
            run.metrics.expected_revenue,
            fmt(run.metrics.total_saving_percent),
            fmt(run.metrics.expected_par),
            fmt(run.metrics.par_reduction_percent),
        ));
    }
    md.push_str("\n## Prospect theory against expected utility\n\n");
    md.push_str("| alpha | saving gap (pp) | W gap (%) | PAR reduction gap (pp) |\n|---|---|---|---|\n");
    for r in &report.robustness {
        md.push_str(&format!(
            "| {} | {} | {:.3} | {} |\n",
            r.alpha,
            fmt(r.saving_gap_pp),
            r.revenue_gap_percent,
            fmt(r.par_reduction_gap_pp)
        ));
    }
    let stable = report
        .robustness
        .iter()
        .filter(|r| r.alpha >= 0.4)
        .all(|r| r.saving_gap_pp.is_some_and(|g| g.abs() <= 2.0) && r.revenue_gap_percent.abs() <= 2.0);
    md.push_str(&format!(
        "\nFor alpha >= 0.4 the expected saving stays within 2 percentage points and W within 2% of the EUT run: {}.\n",
        if stable { "yes" } else { "no" }
    ));
    md
}

pub fn cmd_report(scenario: &str, dynamics: &DynamicsArgs, out: &Path) -> Result<SweepReport, CliError> {
    let source = load_source(scenario)?;
    let (table, report) = sweep(&source, &REPORT_ALPHAS, dynamics)?;
    write_sweep(out, "report", &table, &report)?;
    write_file(&out.join("report.md"), report_markdown(&report).as_bytes())?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

fn configure_workers() -> Result<(), CliError> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let workers: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{WORKERS_ENV}={value} is not a positive integer")))?;
    // a second initialisation in the same process is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    Ok(())
}

fn execute(cli: Cli) -> Result<String, CliError> {
    configure_workers()?;
    match cli.command {
        Command::Validate { scenario } => {
            let v = cmd_validate(&scenario)?;
            let idle = if v.idle.is_feasible() {
                "idle battery trajectory is feasible".to_string()
            } else {
                format!(
                    "note: idle battery trajectory is infeasible ({} violation(s), |q_K - q0| = {:.6}); trades must offset leakage",
                    v.idle.violations.len(),
                    v.idle.continuity_gap
                )
            };
            Ok(format!(
                "ok: {} slots, {} households, {} participants, {} profiles\nconfig_sha256: {}\n{idle}",
                v.slots, v.households, v.participants, v.profiles, v.config_sha256
            ))
        }
        Command::Solve { scenario, h, out } => {
            let s = cmd_solve(&scenario, h.as_deref(), &out)?;
            Ok(format!(
                "profile {:?}: revenue {:.6}, feasible {}, projected {}\nwrote {}",
                s.profile,
                s.revenue,
                s.feasible,
                s.projected,
                out.display()
            ))
        }
        Command::Participation { scenario, model, alpha, dynamics, out } => {
            let r = cmd_participation(&scenario, model, &alpha, &dynamics, &out)?;
            Ok(format!(
                "{}: epsilon {:.3e}, converged at {:?}, W {:.6}\nwrote {}",
                r.run.model,
                r.run.epsilon,
                r.run.converged_at,
                r.run.metrics.expected_revenue,
                out.display()
            ))
        }
        Command::SweepAlpha { scenario, grid, dynamics, out } => {
            let r = cmd_sweep_alpha(&scenario, &grid, &dynamics, &out)?;
            Ok(format!("{} runs over {} profiles\nwrote {}", r.runs.len(), r.metadata.profiles, out.display()))
        }
        Command::Report { scenario, dynamics, out } => {
            let r = cmd_report(&scenario, &dynamics, &out)?;
            Ok(format!("{} runs over {} profiles\nwrote {}", r.runs.len(), r.metadata.profiles, out.display()))
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(message) => {
            println!("{message}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
