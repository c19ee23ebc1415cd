//! Scenario data model: time grid, grid tariff, household profiles and the
//! community battery, plus the no-battery baseline.
//!
//! Slots are numbered `1..=K` wherever they cross the public API (config
//! files, start slots, reports); vectors are indexed from zero.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::storage::{BatteryError, BatteryParams};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Config { path: PathBuf, source: serde_json::Error },
    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: unrecognised column `{column}`")]
    Column { path: PathBuf, column: String },
    #[error("{path} line {line}: expected {expected} values, found {found}")]
    RaggedRow { path: PathBuf, line: u64, expected: usize, found: usize },
    #[error("{path} line {line}: cannot parse `{value}` as a number")]
    Number { path: PathBuf, line: u64, value: String },
    #[error("{path}: expected {expected} slot rows, found {found}")]
    RowCount { path: PathBuf, expected: usize, found: usize },
    #[error("{path} line {line}: slot column reads {found}, expected {expected}")]
    SlotOrder { path: PathBuf, line: u64, expected: usize, found: usize },
    #[error("user {user}: {what} must be finite and non-negative, got {value} at slot {slot}")]
    NegativeEnergy { user: usize, what: &'static str, slot: usize, value: f64 },
    #[error("time grid needs K >= 1 and slot_hours > 0 (got K={slots}, slot_hours={slot_hours})")]
    Grid { slots: usize, slot_hours: f64 },
    #[error("user {user}: profile has {found} slots, grid has {expected}")]
    ProfileLength { user: usize, expected: usize, found: usize },
    #[error("price vectors have length {found}, grid has {expected} slots")]
    PriceLength { expected: usize, found: usize },
    #[error("phi must be positive at every slot (slot {slot}: {value})")]
    Phi { slot: usize, value: f64 },
    #[error("delta must be finite and non-negative at every slot (slot {slot}: {value})")]
    Delta { slot: usize, value: f64 },
    #[error("slot {slot} is outside 1..={slots}")]
    SlotRange { slot: usize, slots: usize },
    #[error("participant {user}: allowed start {slot} is outside 1..={slots}")]
    StartRange { user: usize, slot: usize, slots: usize },
    #[error("participant {user}: allowed starts must be non-empty")]
    EmptyStarts { user: usize },
    #[error("non-participant {user} must have zero PV and no allowed starts")]
    NonParticipant { user: usize },
    #[error("scenario needs at least one participant")]
    NoParticipants,
    #[error("duplicate user id {0}")]
    DuplicateUser(usize),
    #[error("participant_ids {config:?} do not match the PV columns {csv:?}")]
    ParticipantMismatch { config: Vec<usize>, csv: Vec<usize> },
    #[error("allowed_starts lists {found} entries for {expected} participants")]
    StartsCount { expected: usize, found: usize },
    #[error("target average price must be positive, got {0}")]
    Target(f64),
    #[error("calibrated delta {0} is not positive; target price too low for this load")]
    Calibration(f64),
    #[error("invalid battery: {0}")]
    Battery(#[from] BatteryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub slots: usize,
    pub slot_hours: f64,
}

impl TimeGrid {
    pub fn new(slots: usize, slot_hours: f64) -> Result<Self, ScenarioError> {
        if slots == 0 || !(slot_hours > 0.0 && slot_hours.is_finite()) {
            return Err(ScenarioError::Grid { slots, slot_hours });
        }
        Ok(Self { slots, slot_hours })
    }

    /// Length of the control period in hours.
    pub fn period_hours(&self) -> f64 {
        self.slots as f64 * self.slot_hours
    }
}

/// Grid tariff `p_t = phi_t L_t + delta_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceParams {
    pub phi: Vec<f64>,
    pub delta: Vec<f64>,
    /// 1-based peak slots; informational once `phi` is built.
    pub peak_slots: BTreeSet<usize>,
}

impl PriceParams {
    pub fn validate(&self, slots: usize) -> Result<(), ScenarioError> {
        for len in [self.phi.len(), self.delta.len()] {
            if len != slots {
                return Err(ScenarioError::PriceLength { expected: slots, found: len });
            }
        }
        for (t, &phi) in self.phi.iter().enumerate() {
            if !(phi > 0.0 && phi.is_finite()) {
                return Err(ScenarioError::Phi { slot: t + 1, value: phi });
            }
        }
        for (t, &delta) in self.delta.iter().enumerate() {
            if !(delta >= 0.0 && delta.is_finite()) {
                return Err(ScenarioError::Delta { slot: t + 1, value: delta });
            }
        }
        for &slot in &self.peak_slots {
            if slot == 0 || slot > slots {
                return Err(ScenarioError::SlotRange { slot, slots });
            }
        }
        Ok(())
    }

    /// Grid price for total load `load` in slot `t` (0-based).
    pub fn price(&self, t: usize, load: f64) -> f64 {
        self.phi[t] * load + self.delta[t]
    }
}

/// Peak-ratio tariff whose mean baseline price hits `target_avg_price`.
///
/// Peak slots get `1.5 * phi_offpeak`; `delta` is the single constant with
/// `mean_t(phi_t L_t + delta) = target_avg_price` for the baseline load `L`.
pub fn calibrate_prices(
    phi_offpeak: f64,
    peak_slots: &BTreeSet<usize>,
    target_avg_price: f64,
    baseline_load: &[f64],
) -> Result<PriceParams, ScenarioError> {
    let slots = baseline_load.len();
    if !(target_avg_price > 0.0 && target_avg_price.is_finite()) {
        return Err(ScenarioError::Target(target_avg_price));
    }
    if !(phi_offpeak > 0.0 && phi_offpeak.is_finite()) {
        return Err(ScenarioError::Phi { slot: 0, value: phi_offpeak });
    }
    if let Some(&slot) = peak_slots.iter().find(|&&s| s == 0 || s > slots) {
        return Err(ScenarioError::SlotRange { slot, slots });
    }
    let phi: Vec<f64> = (1..=slots)
        .map(|t| if peak_slots.contains(&t) { 1.5 * phi_offpeak } else { phi_offpeak })
        .collect();
    let mean_variable =
        phi.iter().zip(baseline_load).map(|(p, l)| p * l).sum::<f64>() / slots as f64;
    let delta = target_avg_price - mean_variable;
    if delta <= 0.0 {
        return Err(ScenarioError::Calibration(delta));
    }
    Ok(PriceParams { phi, delta: vec![delta; slots], peak_slots: peak_slots.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: usize,
    pub pv: Vec<f64>,
    pub demand: Vec<f64>,
    pub participant: bool,
    /// Permitted trading start slots, ascending. Empty for non-participants.
    pub allowed_starts: Vec<usize>,
}

impl UserProfile {
    /// Net PV energy `g - e` at slot `t` (0-based).
    pub fn surplus(&self, t: usize) -> f64 {
        self.pv[t] - self.demand[t]
    }

    /// Grid load when not trading with the battery.
    pub fn net_demand(&self, t: usize) -> f64 {
        self.demand[t] - self.pv[t]
    }
}

/// `g_{n,t} - e_{n,t}`; non-negative values classify the user as a seller.
pub fn surplus(user: &UserProfile, t: usize) -> f64 {
    user.surplus(t)
}

/// Trading start slot of every participant, in participant order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionProfile(pub Vec<usize>);

impl ActionProfile {
    pub fn starts(&self) -> &[usize] {
        &self.0
    }

    /// Whether participant `index` trades in 1-based slot `slot`.
    pub fn is_active(&self, index: usize, slot: usize) -> bool {
        self.0[index] <= slot
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub grid: TimeGrid,
    pub prices: PriceParams,
    pub users: Vec<UserProfile>,
    pub battery: BatteryParams,
}

impl Scenario {
    pub fn new(
        grid: TimeGrid,
        prices: PriceParams,
        mut users: Vec<UserProfile>,
        battery: BatteryParams,
    ) -> Result<Self, ScenarioError> {
        let slots = grid.slots;
        prices.validate(slots)?;
        battery.validate()?;
        let mut ids = BTreeSet::new();
        for user in &mut users {
            if !ids.insert(user.id) {
                return Err(ScenarioError::DuplicateUser(user.id));
            }
            for found in [user.pv.len(), user.demand.len()] {
                if found != slots {
                    return Err(ScenarioError::ProfileLength { user: user.id, expected: slots, found });
                }
            }
            for (what, values) in [("pv", &user.pv), ("demand", &user.demand)] {
                if let Some((t, &value)) =
                    values.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite()))
                {
                    return Err(ScenarioError::NegativeEnergy { user: user.id, what, slot: t + 1, value });
                }
            }
            if user.participant {
                user.allowed_starts.sort_unstable();
                user.allowed_starts.dedup();
                if user.allowed_starts.is_empty() {
                    return Err(ScenarioError::EmptyStarts { user: user.id });
                }
                if let Some(&slot) = user.allowed_starts.iter().find(|&&s| s == 0 || s > slots) {
                    return Err(ScenarioError::StartRange { user: user.id, slot, slots });
                }
            } else if !user.allowed_starts.is_empty() || user.pv.iter().any(|&g| g != 0.0) {
                return Err(ScenarioError::NonParticipant { user: user.id });
            }
        }
        if !users.iter().any(|u| u.participant) {
            return Err(ScenarioError::NoParticipants);
        }
        Ok(Self { grid, prices, users, battery })
    }

    pub fn slots(&self) -> usize {
        self.grid.slots
    }

    pub fn participants(&self) -> impl Iterator<Item = &UserProfile> {
        self.users.iter().filter(|u| u.participant)
    }

    pub fn non_participants(&self) -> impl Iterator<Item = &UserProfile> {
        self.users.iter().filter(|u| !u.participant)
    }

    pub fn participant_count(&self) -> usize {
        self.participants().count()
    }

    pub fn participant_ids(&self) -> Vec<usize> {
        self.participants().map(|u| u.id).collect()
    }

    /// Aggregate grid load of the non-participating households, `l_N`.
    pub fn non_participant_load(&self) -> Vec<f64> {
        (0..self.slots())
            .map(|t| self.non_participants().map(|u| u.net_demand(t)).sum())
            .collect()
    }

    /// Whether every participant's start lies in its allowed set.
    pub fn check_profile(&self, h: &ActionProfile) -> Result<(), ProfileError> {
        let count = self.participant_count();
        if h.0.len() != count {
            return Err(ProfileError::Length { expected: count, found: h.0.len() });
        }
        for (user, &start) in self.participants().zip(&h.0) {
            if !user.allowed_starts.contains(&start) {
                return Err(ProfileError::NotAllowed {
                    user: user.id,
                    start,
                    allowed: user.allowed_starts.clone(),
                });
            }
        }
        Ok(())
    }

    /// Profile where everybody starts at their earliest allowed slot.
    pub fn earliest_profile(&self) -> ActionProfile {
        ActionProfile(self.participants().map(|u| u.allowed_starts[0]).collect())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("action profile has {found} entries for {expected} participants")]
    Length { expected: usize, found: usize },
    #[error("participant {user}: start {start} not in allowed set {allowed:?}")]
    NotAllowed { user: usize, start: usize, allowed: Vec<usize> },
}

/// Ids of participants trading in 1-based slot `slot`.
pub fn active_set(scenario: &Scenario, h: &ActionProfile, slot: usize) -> Vec<usize> {
    scenario
        .participants()
        .zip(h.starts())
        .filter(|(_, &start)| start <= slot)
        .map(|(u, _)| u.id)
        .collect()
}

/// Outcome of the world without the community battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    /// Daily cost per user, aligned with `Scenario::users`.
    pub costs: Vec<f64>,
    pub load: Vec<f64>,
    pub prices: Vec<f64>,
}

impl Baseline {
    pub fn cost_of(&self, scenario: &Scenario, id: usize) -> Option<f64> {
        scenario.users.iter().position(|u| u.id == id).map(|i| self.costs[i])
    }
}

/// Every household buys its net demand from (or sells its surplus to) the grid.
pub fn baseline_solve(scenario: &Scenario) -> Baseline {
    let slots = scenario.slots();
    let load = baseline_load(&scenario.users, slots);
    let prices: Vec<f64> = (0..slots).map(|t| scenario.prices.price(t, load[t])).collect();
    let costs = scenario
        .users
        .iter()
        .map(|u| (0..slots).map(|t| prices[t] * u.net_demand(t)).sum())
        .collect();
    Baseline { costs, load, prices }
}

pub fn baseline_load(users: &[UserProfile], slots: usize) -> Vec<f64> {
    (0..slots).map(|t| users.iter().map(|u| u.net_demand(t)).sum()).collect()
}

// ---------------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridConfig,
    pub prices: PriceConfig,
    pub battery: BatteryParams,
    pub users: UsersConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "K")]
    pub slots: usize,
    pub delta_hours: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriceConfig {
    Explicit {
        phi: Vec<f64>,
        delta: Vec<f64>,
        #[serde(default)]
        peak_slots: BTreeSet<usize>,
    },
    Calibrated {
        phi_offpeak: f64,
        peak_slots: BTreeSet<usize>,
        target_avg_price: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsersConfig {
    /// Relative paths resolve against the config file's directory.
    pub profiles_csv: PathBuf,
    pub participant_ids: Vec<usize>,
    pub allowed_starts: AllowedStarts,
}

/// One start set shared by all participants, or one per participant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AllowedStarts {
    Shared(Vec<usize>),
    PerUser(Vec<Vec<usize>>),
}

/// Per-user columns read from the profile CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    pub pv: Vec<(usize, Vec<f64>)>,
    pub demand: Vec<(usize, Vec<f64>)>,
}

enum ColumnKind {
    Pv(usize),
    Demand(usize),
}

/// Reads `slot,pv_kwh_user<id>...,demand_kwh_user<id>...` with one row per slot.
pub fn read_profiles(path: &Path, slots: usize) -> Result<ProfileTable, ScenarioError> {
    let csv_err = |source| ScenarioError::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let column_err = |column: &str| ScenarioError::Column { path: path.to_path_buf(), column: column.to_string() };
    if headers.get(0) != Some("slot") {
        return Err(column_err(headers.get(0).unwrap_or("")));
    }
    let mut kinds = Vec::with_capacity(headers.len() - 1);
    for name in headers.iter().skip(1) {
        let kind = if let Some(id) = name.strip_prefix("pv_kwh_user") {
            ColumnKind::Pv(id.parse().map_err(|_| column_err(name))?)
        } else if let Some(id) = name.strip_prefix("demand_kwh_user") {
            ColumnKind::Demand(id.parse().map_err(|_| column_err(name))?)
        } else {
            return Err(column_err(name));
        };
        kinds.push(kind);
    }
    let mut columns = vec![Vec::with_capacity(slots); kinds.len()];
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != headers.len() {
            return Err(ScenarioError::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected: headers.len(),
                found: record.len(),
            });
        }
        let parse = |value: &str| {
            value.parse::<f64>().map_err(|_| ScenarioError::Number {
                path: path.to_path_buf(),
                line,
                value: value.to_string(),
            })
        };
        rows += 1;
        let slot = parse(&record[0])?;
        if slot != rows as f64 {
            return Err(ScenarioError::SlotOrder { path: path.to_path_buf(), line, expected: rows, found: slot as usize });
        }
        for (column, value) in columns.iter_mut().zip(record.iter().skip(1)) {
            column.push(parse(value)?);
        }
    }
    if rows != slots {
        return Err(ScenarioError::RowCount { path: path.to_path_buf(), expected: slots, found: rows });
    }
    let mut table = ProfileTable { pv: Vec::new(), demand: Vec::new() };
    for (kind, values) in kinds.into_iter().zip(columns) {
        match kind {
            ColumnKind::Pv(id) => table.pv.push((id, values)),
            ColumnKind::Demand(id) => table.demand.push((id, values)),
        }
    }
    Ok(table)
}

/// Loads and validates a scenario from a JSON config and its profile CSV.
pub fn load_scenario(config_path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(config_path)
        .map_err(|source| ScenarioError::Io { path: config_path.to_path_buf(), source })?;
    let config: ScenarioConfig = serde_json::from_str(&text)
        .map_err(|source| ScenarioError::Config { path: config_path.to_path_buf(), source })?;
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    scenario_from_config(&config, base)
}

pub fn scenario_from_config(config: &ScenarioConfig, base_dir: &Path) -> Result<Scenario, ScenarioError> {
    let grid = TimeGrid::new(config.grid.slots, config.grid.delta_hours)?;
    let csv_path = base_dir.join(&config.users.profiles_csv);
    if !csv_path.exists() {
        return Err(ScenarioError::Io {
            path: csv_path,
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        });
    }
    let table = read_profiles(&csv_path, grid.slots)?;

    let mut config_ids = config.users.participant_ids.clone();
    config_ids.sort_unstable();
    let mut csv_ids: Vec<usize> = table.pv.iter().map(|(id, _)| *id).collect();
    csv_ids.sort_unstable();
    if config_ids != csv_ids {
        return Err(ScenarioError::ParticipantMismatch { config: config_ids, csv: csv_ids });
    }
    let participant_count = config.users.participant_ids.len();
    let starts_for = |index: usize| -> Result<Vec<usize>, ScenarioError> {
        match &config.users.allowed_starts {
            AllowedStarts::Shared(starts) => Ok(starts.clone()),
            AllowedStarts::PerUser(lists) if lists.len() == participant_count => Ok(lists[index].clone()),
            AllowedStarts::PerUser(lists) => {
                Err(ScenarioError::StartsCount { expected: participant_count, found: lists.len() })
            }
        }
    };

    let mut users = Vec::with_capacity(table.demand.len());
    for (id, demand) in &table.demand {
        let participant_index = config.users.participant_ids.iter().position(|p| p == id);
        let pv = table
            .pv
            .iter()
            .find(|(pid, _)| pid == id)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| vec![0.0; grid.slots]);
        let allowed_starts = match participant_index {
            Some(index) => starts_for(index)?,
            None => Vec::new(),
        };
        users.push(UserProfile {
            id: *id,
            pv,
            demand: demand.clone(),
            participant: participant_index.is_some(),
            allowed_starts,
        });
    }
    if let Some((id, _)) = table.pv.iter().find(|(id, _)| !table.demand.iter().any(|(d, _)| d == id)) {
        return Err(ScenarioError::ProfileLength { user: *id, expected: grid.slots, found: 0 });
    }
    // Participants in the order listed by the config.
    users.sort_by_key(|u| {
        config
            .users
            .participant_ids
            .iter()
            .position(|p| *p == u.id)
            .map_or((1, u.id), |i| (0, i))
    });

    let prices = match &config.prices {
        PriceConfig::Explicit { phi, delta, peak_slots } => {
            PriceParams { phi: phi.clone(), delta: delta.clone(), peak_slots: peak_slots.clone() }
        }
        PriceConfig::Calibrated { phi_offpeak, peak_slots, target_avg_price } => {
            let load = baseline_load(&users, grid.slots);
            calibrate_prices(*phi_offpeak, peak_slots, *target_avg_price, &load)?
        }
    };
    Scenario::new(grid, prices, users, config.battery)
}
