//! Bundled scenarios and writers for their config/CSV fixtures.
//!
//! The default day is synthetic: PV is a midday bell, demand has a small
//! morning bump and an evening peak. Households differ by fixed scale
//! factors so the participation game is not fully symmetric.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::scenario::{
    calibrate_prices, baseline_load, AllowedStarts, GridConfig, PriceConfig, PriceParams, Scenario, ScenarioConfig,
    ScenarioError, TimeGrid, UserProfile, UsersConfig,
};
use crate::storage::BatteryParams;

pub const DEFAULT_SLOTS: usize = 24;
pub const DEFAULT_STARTS: [usize; 3] = [1, 12, 17];
pub const DEFAULT_Y0: [f64; 3] = [0.3, 0.3, 0.4];
pub const DEFAULT_PHI_OFFPEAK: f64 = 0.02;
pub const DEFAULT_TARGET_PRICE: f64 = 0.30;

pub fn default_battery() -> BatteryParams {
    BatteryParams { capacity: 80.0, q0: 20.0, tau: 0.9f64.powf(1.0 / 48.0), beta_plus: 0.9, beta_minus: 1.1 }
}

/// Peak tariff slots 16..=23.
pub fn default_peak_slots() -> BTreeSet<usize> {
    (16..=23).collect()
}

fn bump(hour: f64, centre: f64, width: f64) -> f64 {
    (-((hour - centre) / width).powi(2)).exp()
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// PV output in kWh for the slot whose midpoint is `hour`.
pub fn pv_shape(hour: f64) -> f64 {
    1.2 * bump(hour, 12.5, 2.8)
}

pub fn demand_shape(hour: f64) -> f64 {
    0.35 + 0.25 * bump(hour, 7.5, 1.5) + 0.6 * bump(hour, 19.5, 2.0)
}

const PV_SCALE: [f64; 6] = [1.0, 1.1, 0.9, 1.2, 0.8, 1.05];
const DEMAND_SCALE: [f64; 10] = [1.0, 0.9, 1.1, 1.05, 0.95, 1.2, 1.0, 0.85, 1.15, 0.9];

fn default_users() -> Vec<UserProfile> {
    (0..10)
        .map(|i| {
            let hours = (1..=DEFAULT_SLOTS).map(|t| t as f64 - 0.5);
            let participant = i < PV_SCALE.len();
            let pv = hours
                .clone()
                .map(|h| if participant { round6(PV_SCALE[i] * pv_shape(h)) } else { 0.0 })
                .collect();
            let demand = hours.map(|h| round6(DEMAND_SCALE[i] * demand_shape(h))).collect();
            UserProfile {
                id: i + 1,
                pv,
                demand,
                participant,
                allowed_starts: if participant { DEFAULT_STARTS.to_vec() } else { Vec::new() },
            }
        })
        .collect()
}

/// Ten households, six of them with PV, over a 24-slot day.
pub fn default_scenario() -> Scenario {
    let users = default_users();
    let load = baseline_load(&users, DEFAULT_SLOTS);
    let prices = calibrate_prices(DEFAULT_PHI_OFFPEAK, &default_peak_slots(), DEFAULT_TARGET_PRICE, &load)
        .expect("default tariff calibrates");
    Scenario::new(TimeGrid::new(DEFAULT_SLOTS, 1.0).unwrap(), prices, users, default_battery())
        .expect("default scenario is valid")
}

/// Two participants over two slots with unit price slope and no offset:
/// surpluses (1, -1) and (2, 0), ideal battery half full.
pub fn s1_scenario() -> Scenario {
    let users = vec![
        UserProfile { id: 1, pv: vec![1.0, 0.0], demand: vec![0.0, 1.0], participant: true, allowed_starts: vec![1, 2] },
        UserProfile { id: 2, pv: vec![2.0, 0.0], demand: vec![0.0, 0.0], participant: true, allowed_starts: vec![1, 2] },
    ];
    let prices = PriceParams { phi: vec![1.0, 1.0], delta: vec![0.0, 0.0], peak_slots: BTreeSet::new() };
    let battery = BatteryParams { capacity: 100.0, q0: 50.0, tau: 1.0, beta_plus: 1.0, beta_minus: 1.0 };
    Scenario::new(TimeGrid::new(2, 1.0).unwrap(), prices, users, battery).expect("S1 is valid")
}

/// Three participants and one plain household over six 4-hour slots,
/// each participant choosing among starts 1, 3 and 5.
pub fn three_player_scenario() -> Scenario {
    let pv = [[0.0, 1.5, 3.0, 1.0, 0.0, 0.0], [0.0, 2.0, 2.5, 0.5, 0.0, 0.0], [0.0, 1.0, 3.5, 1.5, 0.0, 0.0]];
    let demand = [[1.0, 1.2, 1.0, 2.0, 2.5, 0.8], [0.8, 1.0, 1.2, 2.5, 2.0, 1.0], [1.2, 0.9, 0.8, 1.8, 3.0, 0.9]];
    let mut users: Vec<UserProfile> = (0..3)
        .map(|i| UserProfile {
            id: i + 1,
            pv: pv[i].to_vec(),
            demand: demand[i].to_vec(),
            participant: true,
            allowed_starts: vec![1, 3, 5],
        })
        .collect();
    users.push(UserProfile {
        id: 4,
        pv: vec![0.0; 6],
        demand: vec![1.0, 1.0, 1.5, 2.0, 2.5, 1.0],
        participant: false,
        allowed_starts: Vec::new(),
    });
    let prices = PriceParams {
        phi: vec![0.04, 0.04, 0.04, 0.06, 0.06, 0.04],
        delta: vec![0.2; 6],
        peak_slots: [4, 5].into_iter().collect(),
    };
    let battery = BatteryParams { capacity: 20.0, q0: 5.0, tau: 0.98, beta_plus: 0.9, beta_minus: 1.1 };
    Scenario::new(TimeGrid::new(6, 4.0).unwrap(), prices, users, battery).expect("three-player scenario is valid")
}

/// Profile CSV text in the layout read by `read_profiles`.
pub fn profiles_csv(scenario: &Scenario) -> String {
    let participants: Vec<&UserProfile> = scenario.participants().collect();
    let mut out = String::from("slot");
    for u in &participants {
        write!(out, ",pv_kwh_user{}", u.id).unwrap();
    }
    for u in &scenario.users {
        write!(out, ",demand_kwh_user{}", u.id).unwrap();
    }
    out.push('\n');
    for t in 0..scenario.slots() {
        write!(out, "{}", t + 1).unwrap();
        for u in &participants {
            write!(out, ",{}", u.pv[t]).unwrap();
        }
        for u in &scenario.users {
            write!(out, ",{}", u.demand[t]).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Config for `scenario` with the given price section and CSV file name.
pub fn scenario_config(scenario: &Scenario, prices: PriceConfig, csv_name: &str) -> ScenarioConfig {
    let participants: Vec<&UserProfile> = scenario.participants().collect();
    let first = &participants[0].allowed_starts;
    let allowed_starts = if participants.iter().all(|u| &u.allowed_starts == first) {
        AllowedStarts::Shared(first.clone())
    } else {
        AllowedStarts::PerUser(participants.iter().map(|u| u.allowed_starts.clone()).collect())
    };
    ScenarioConfig {
        grid: GridConfig { slots: scenario.grid.slots, delta_hours: scenario.grid.slot_hours },
        prices,
        battery: scenario.battery,
        users: UsersConfig {
            profiles_csv: csv_name.into(),
            participant_ids: participants.iter().map(|u| u.id).collect(),
            allowed_starts,
        },
    }
}

pub fn explicit_prices(scenario: &Scenario) -> PriceConfig {
    PriceConfig::Explicit {
        phi: scenario.prices.phi.clone(),
        delta: scenario.prices.delta.clone(),
        peak_slots: scenario.prices.peak_slots.clone(),
    }
}

pub fn default_price_config() -> PriceConfig {
    PriceConfig::Calibrated {
        phi_offpeak: DEFAULT_PHI_OFFPEAK,
        peak_slots: default_peak_slots(),
        target_avg_price: DEFAULT_TARGET_PRICE,
    }
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir`.
pub fn write_scenario_files(scenario: &Scenario, prices: PriceConfig, dir: &Path, stem: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let csv_name = format!("{stem}.csv");
    let config = scenario_config(scenario, prices, &csv_name);
    let json = serde_json::to_string_pretty(&config).map_err(io::Error::other)?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    fs::write(dir.join(csv_name), profiles_csv(scenario))
}

/// The bundled fixture set: `default`, `s1` and `three_player`.
pub fn write_bundled_fixtures(dir: &Path) -> io::Result<()> {
    write_scenario_files(&default_scenario(), default_price_config(), dir, "default")?;
    let s1 = s1_scenario();
    write_scenario_files(&s1, explicit_prices(&s1), dir, "s1")?;
    let three = three_player_scenario();
    write_scenario_files(&three, explicit_prices(&three), dir, "three_player")
}

/// Path of the fixtures shipped with this crate.
pub fn fixtures_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures"))
}

pub fn load_fixture(stem: &str) -> Result<Scenario, ScenarioError> {
    crate::scenario::load_scenario(&fixtures_dir().join(format!("{stem}.json")))
}
