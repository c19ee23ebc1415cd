//! Participation-time game: every participant picks the slot at which it
//! starts trading with the battery. Payoffs come from one Stackelberg solve
//! per pure profile; mixed play is evaluated under expected utility (EUT)
//! or with Prelec-weighted opponent probabilities (PT), and solved with
//! inertia-weighted fictitious play.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{ActionProfile, Baseline, Scenario};
use crate::stackelberg::{solve_stackelberg_with, LeaderOptions, StackelbergError};

/// Largest number of pure profiles a cost table may hold.
pub const MAX_PROFILES: usize = 1_000_000;
pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_MAX_ITER: usize = 5000;
pub const DEFAULT_ETA: f64 = 0.7;

#[derive(Debug, Error)]
pub enum ParticipationError {
    #[error("{0} action profiles exceed the limit of {MAX_PROFILES}")]
    TooManyProfiles(u128),
    #[error("equilibrium solve failed for profile {profile:?}: {source}")]
    Solve {
        profile: Vec<usize>,
        #[source]
        source: StackelbergError,
    },
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("alpha {0} outside (0, 1]")]
    Alpha(f64),
    #[error("eta {0} outside (0, 1)")]
    Eta(f64),
    #[error("iteration index must be at least 1")]
    Iteration,
    #[error("mixed profile: {0}")]
    Mixed(String),
    #[error("expected {expected} alpha values, got {got}")]
    AlphaCount { expected: usize, got: usize },
}

/// Payoffs of one pure profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub profile: ActionProfile,
    /// Position of each participant's start inside its allowed-start list.
    pub choice: Vec<usize>,
    /// Daily cost per participant.
    pub costs: Vec<f64>,
    pub revenue: f64,
    /// Total grid load per slot.
    pub load: Vec<f64>,
    /// Peak-to-average ratio of `load`; `None` when the mean load is not positive.
    pub par: Option<f64>,
}

/// Payoff table over every pure profile, in mixed-radix order with the last
/// participant varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub participant_ids: Vec<usize>,
    pub starts: Vec<Vec<usize>>,
    pub entries: Vec<CostEntry>,
}

/// Peak-to-average ratio `K max_t L_t / sum_t L_t`.
pub fn peak_to_average(load: &[f64]) -> Option<f64> {
    let total: f64 = load.iter().sum();
    if load.is_empty() || total <= 0.0 {
        return None;
    }
    let peak = load.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(load.len() as f64 * peak / total)
}

fn decode(mut index: usize, radices: &[usize]) -> Vec<usize> {
    let mut choice = vec![0; radices.len()];
    for (slot, &radix) in choice.iter_mut().zip(radices).rev() {
        *slot = index % radix;
        index /= radix;
    }
    choice
}

impl CostTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn players(&self) -> usize {
        self.participant_ids.len()
    }

    pub fn radices(&self) -> Vec<usize> {
        self.starts.iter().map(Vec::len).collect()
    }

    /// Entry for a choice vector (positions in the allowed-start lists).
    pub fn entry_by_choice(&self, choice: &[usize]) -> Option<&CostEntry> {
        if choice.len() != self.players() {
            return None;
        }
        let mut index = 0;
        for (&c, starts) in choice.iter().zip(&self.starts) {
            if c >= starts.len() {
                return None;
            }
            index = index * starts.len() + c;
        }
        self.entries.get(index)
    }

    /// Entry for a profile of start slots.
    pub fn entry(&self, profile: &ActionProfile) -> Option<&CostEntry> {
        let choice: Option<Vec<usize>> = profile
            .starts()
            .iter()
            .zip(&self.starts)
            .map(|(h, starts)| starts.iter().position(|s| s == h))
            .collect();
        if profile.starts().len() != self.players() {
            return None;
        }
        self.entry_by_choice(&choice?)
    }
}

pub fn profile_count(scenario: &Scenario) -> u128 {
    scenario.participants().map(|u| u.allowed_starts.len() as u128).product()
}

pub fn build_cost_table(scenario: &Scenario) -> Result<CostTable, ParticipationError> {
    build_cost_table_with(scenario, &LeaderOptions::default())
}

/// Solves the Stackelberg game once per pure profile (in parallel).
pub fn build_cost_table_with(scenario: &Scenario, options: &LeaderOptions) -> Result<CostTable, ParticipationError> {
    let count = profile_count(scenario);
    if count > MAX_PROFILES as u128 {
        return Err(ParticipationError::TooManyProfiles(count));
    }
    let participant_ids = scenario.participant_ids();
    let starts: Vec<Vec<usize>> = scenario.participants().map(|u| u.allowed_starts.clone()).collect();
    let radices: Vec<usize> = starts.iter().map(Vec::len).collect();
    let entries = (0..count as usize)
        .into_par_iter()
        .map(|index| {
            let choice = decode(index, &radices);
            let profile = ActionProfile(choice.iter().zip(&starts).map(|(&c, s)| s[c]).collect());
            let sol = solve_stackelberg_with(scenario, &profile, options)
                .map_err(|source| ParticipationError::Solve { profile: profile.0.clone(), source })?;
            let load = sol.total_load();
            let par = peak_to_average(&load);
            Ok(CostEntry { profile, choice, costs: sol.daily_costs, revenue: sol.revenue, load, par })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CostTable { participant_ids, starts, entries })
}

/// `w(y) = exp(-(-ln y)^alpha)`.
pub fn prelec_weight(y: f64, alpha: f64) -> Result<f64, ParticipationError> {
    if !(0.0..=1.0).contains(&y) {
        return Err(ParticipationError::Probability(y));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ParticipationError::Alpha(alpha));
    }
    Ok(prelec(y, alpha))
}

fn prelec(y: f64, alpha: f64) -> f64 {
    let y = y.clamp(0.0, 1.0);
    if alpha == 1.0 {
        return y;
    }
    if y == 0.0 {
        return 0.0;
    }
    (-(-y.ln()).powf(alpha)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtParams {
    /// One value per participant, in table order.
    pub alpha: Vec<f64>,
}

impl PtParams {
    pub fn uniform(alpha: f64, players: usize) -> Self {
        Self { alpha: vec![alpha; players] }
    }

    pub fn validate(&self, players: usize) -> Result<(), ParticipationError> {
        if self.alpha.len() != players {
            return Err(ParticipationError::AlphaCount { expected: players, got: self.alpha.len() });
        }
        match self.alpha.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            Some(&a) => Err(ParticipationError::Alpha(a)),
            None => Ok(()),
        }
    }
}

/// How a participant evaluates opponents' mixed strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Eut,
    Pt(PtParams),
}

impl Model {
    fn validate(&self, players: usize) -> Result<(), ParticipationError> {
        match self {
            Model::Eut => Ok(()),
            Model::Pt(p) => p.validate(players),
        }
    }
}

/// One probability vector per participant over its allowed starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedProfile(pub Vec<Vec<f64>>);

impl MixedProfile {
    pub fn uniform(table: &CostTable) -> Self {
        Self(table.starts.iter().map(|s| vec![1.0 / s.len() as f64; s.len()]).collect())
    }

    /// Same vector for every participant.
    pub fn repeated(y: &[f64], players: usize) -> Self {
        Self(vec![y.to_vec(); players])
    }

    /// Pure profile as a degenerate mixed profile.
    pub fn pure(table: &CostTable, choice: &[usize]) -> Self {
        Self(
            table
                .starts
                .iter()
                .zip(choice)
                .map(|(s, &c)| (0..s.len()).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn validate(&self, table: &CostTable) -> Result<(), ParticipationError> {
        if self.0.len() != table.players() {
            return Err(ParticipationError::Mixed(format!(
                "{} probability vectors for {} participants",
                self.0.len(),
                table.players()
            )));
        }
        for (n, (row, starts)) in self.0.iter().zip(&table.starts).enumerate() {
            if row.len() != starts.len() {
                return Err(ParticipationError::Mixed(format!(
                    "participant {} has {} probabilities for {} starts",
                    table.participant_ids[n],
                    row.len(),
                    starts.len()
                )));
            }
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(ParticipationError::Mixed(format!(
                    "participant {} has a negative probability",
                    table.participant_ids[n]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(ParticipationError::Mixed(format!(
                    "probabilities of participant {} sum to {sum}",
                    table.participant_ids[n]
                )));
            }
        }
        Ok(())
    }
}

/// Opponent probabilities as seen by participant `n`.
fn perceived(y: &MixedProfile, n: usize, model: &Model) -> Vec<Vec<f64>> {
    match model {
        Model::Eut => y.0.clone(),
        Model::Pt(p) => y.0.iter().map(|row| row.iter().map(|&v| prelec(v, p.alpha[n])).collect()).collect(),
    }
}

/// `e_n(h_n, y_-n)` for every own action `h_n`.
fn action_costs(table: &CostTable, n: usize, weights: &[Vec<f64>]) -> Vec<f64> {
    let mut costs = vec![0.0; table.starts[n].len()];
    for entry in &table.entries {
        let mut w = 1.0;
        for (r, &c) in entry.choice.iter().enumerate() {
            if r != n {
                w *= weights[r][c];
            }
        }
        costs[entry.choice[n]] += entry.costs[n] * w;
    }
    costs
}

/// Expected daily cost of participant `n` (index in table order) when
/// opponents are evaluated according to `model`.
pub fn expected_cost(n: usize, y: &MixedProfile, table: &CostTable, model: &Model) -> f64 {
    let costs = action_costs(table, n, &perceived(y, n, model));
    costs.iter().zip(&y.0[n]).map(|(c, p)| c * p).sum()
}

pub fn eut_expected_cost(n: usize, y: &MixedProfile, table: &CostTable) -> f64 {
    expected_cost(n, y, table, &Model::Eut)
}

pub fn pt_expected_cost(n: usize, y: &MixedProfile, table: &CostTable, pt: &PtParams) -> f64 {
    expected_cost(n, y, table, &Model::Pt(pt.clone()))
}

/// Expected cost of `n` committing to its `choice`-th start against `y_-n`.
pub fn pure_response_cost(n: usize, choice: usize, y: &MixedProfile, table: &CostTable, model: &Model) -> f64 {
    action_costs(table, n, &perceived(y, n, model))[choice]
}

fn argmin_earliest(values: &[f64]) -> usize {
    // starts are sorted, so the first strict minimum is the earliest slot
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = j;
        }
    }
    best
}

pub fn best_response_indicator(n: usize, y: &MixedProfile, table: &CostTable, model: &Model) -> Vec<f64> {
    let costs = action_costs(table, n, &perceived(y, n, model));
    let best = argmin_earliest(&costs);
    (0..costs.len()).map(|j| if j == best { 1.0 } else { 0.0 }).collect()
}

/// `y <- y + (eta / i) (v - y)` for all participants at once.
pub fn fictitious_step(
    y: &MixedProfile,
    i: usize,
    eta: f64,
    table: &CostTable,
    model: &Model,
) -> Result<MixedProfile, ParticipationError> {
    if i == 0 {
        return Err(ParticipationError::Iteration);
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(ParticipationError::Eta(eta));
    }
    Ok(step_unchecked(y, i, eta, table, model))
}

fn step_unchecked(y: &MixedProfile, i: usize, eta: f64, table: &CostTable, model: &Model) -> MixedProfile {
    let rate = eta / i as f64;
    MixedProfile(
        (0..table.players())
            .map(|n| {
                let v = best_response_indicator(n, y, table, model);
                y.0[n].iter().zip(&v).map(|(p, v)| p + rate * (v - p)).collect()
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    /// `E_n(y) - min_h e_n(h, y_-n)` per participant.
    pub deviations: Vec<f64>,
    pub worst: f64,
    pub passed: bool,
}

pub fn check_epsilon_nash(y: &MixedProfile, table: &CostTable, model: &Model, eps: f64) -> EpsilonReport {
    let deviations: Vec<f64> = (0..table.players())
        .map(|n| {
            let costs = action_costs(table, n, &perceived(y, n, model));
            let expected: f64 = costs.iter().zip(&y.0[n]).map(|(c, p)| c * p).sum();
            let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
            expected - best
        })
        .collect();
    let worst = deviations.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    EpsilonReport { deviations, worst, passed: worst <= eps }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsOptions {
    pub eta: f64,
    pub max_iter: usize,
    pub eps: f64,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        Self { eta: DEFAULT_ETA, max_iter: DEFAULT_MAX_ITER, eps: DEFAULT_EPSILON }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsTrace {
    /// `y^(0)`, `y^(1)`, ... up to the returned profile's iterate or the cap.
    pub iterates: Vec<MixedProfile>,
    /// Worst deviation of each iterate.
    pub epsilons: Vec<f64>,
    pub eta: f64,
    /// Iteration index of the first iterate passing the check.
    pub converged_at: Option<usize>,
    /// Deviation of the returned profile.
    pub epsilon_achieved: f64,
}

/// Runs fictitious play from `y0` until the epsilon check passes. Without
/// convergence the iterate with the smallest deviation is returned.
pub fn run_dynamics(
    table: &CostTable,
    model: &Model,
    y0: &MixedProfile,
    options: &DynamicsOptions,
) -> Result<(MixedProfile, DynamicsTrace), ParticipationError> {
    model.validate(table.players())?;
    y0.validate(table)?;
    if !(options.eta > 0.0 && options.eta < 1.0) {
        return Err(ParticipationError::Eta(options.eta));
    }
    let mut y = y0.clone();
    let mut iterates = vec![y.clone()];
    let mut epsilons = Vec::new();
    let mut best = (f64::INFINITY, 0);
    let mut converged_at = None;
    for i in 0..=options.max_iter {
        let report = check_epsilon_nash(&y, table, model, options.eps);
        epsilons.push(report.worst);
        if report.worst < best.0 {
            best = (report.worst, i);
        }
        if report.passed {
            converged_at = Some(i);
            break;
        }
        if i == options.max_iter {
            break;
        }
        y = step_unchecked(&y, i + 1, options.eta, table, model);
        iterates.push(y.clone());
    }
    let chosen = iterates[best.1].clone();
    Ok((chosen, DynamicsTrace { iterates, epsilons, eta: options.eta, converged_at, epsilon_achieved: best.0 }))
}

/// Probability of each table entry under `y` (unweighted).
fn profile_weights<'a>(y: &MixedProfile, table: &'a CostTable) -> impl Iterator<Item = (f64, &'a CostEntry)> + 'a {
    let rows = y.0.clone();
    table.entries.iter().map(move |e| (e.choice.iter().enumerate().map(|(r, &c)| rows[r][c]).product(), e))
}

/// `W = sum_h R(h) prod_r y_r(h_r)`.
pub fn expected_revenue(y: &MixedProfile, table: &CostTable) -> f64 {
    profile_weights(y, table).map(|(w, e)| w * e.revenue).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSavings {
    pub id: usize,
    pub baseline_cost: f64,
    pub expected_cost: f64,
    /// `baseline - expected`.
    pub saving: f64,
    /// Relative saving in percent; `None` when the baseline cost is not positive.
    pub saving_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationMetrics {
    pub users: Vec<UserSavings>,
    /// Saving of all participants together, in percent of their baseline cost.
    pub total_saving_percent: Option<f64>,
    pub expected_revenue: f64,
    pub expected_par: Option<f64>,
    pub baseline_par: Option<f64>,
    pub par_reduction_percent: Option<f64>,
}

pub fn expectation_metrics(
    y: &MixedProfile,
    table: &CostTable,
    baseline: &Baseline,
    scenario: &Scenario,
) -> ExpectationMetrics {
    let users: Vec<UserSavings> = table
        .participant_ids
        .iter()
        .enumerate()
        .map(|(n, &id)| {
            let expected: f64 = profile_weights(y, table).map(|(w, e)| w * e.costs[n]).sum();
            let base = baseline.cost_of(scenario, id).unwrap_or(0.0);
            UserSavings {
                id,
                baseline_cost: base,
                expected_cost: expected,
                saving: base - expected,
                saving_percent: (base > 0.0).then(|| 100.0 * (base - expected) / base),
            }
        })
        .collect();
    let total_base: f64 = users.iter().map(|u| u.baseline_cost).sum();
    let total_expected: f64 = users.iter().map(|u| u.expected_cost).sum();
    let expected_par = profile_weights(y, table)
        .map(|(w, e)| e.par.map(|p| w * p))
        .sum::<Option<f64>>();
    let baseline_par = peak_to_average(&baseline.load);
    let par_reduction_percent = match (expected_par, baseline_par) {
        (Some(e), Some(b)) => Some(100.0 * (b - e) / b),
        _ => None,
    };
    ExpectationMetrics {
        users,
        total_saving_percent: (total_base > 0.0).then(|| 100.0 * (total_base - total_expected) / total_base),
        expected_revenue: expected_revenue(y, table),
        expected_par,
        baseline_par,
        par_reduction_percent,
    }
}
