//! Community battery model: leakage, charge/discharge efficiency and the
//! capacity / end-of-day continuity constraints.
//!
//! The charge level follows
//!
//! ```text
//! q_t = tau^t q0 + sum_{m<=t} tau^(t-m) (beta_plus L+_m - beta_minus L-_m)
//! ```
//!
//! which is the matrix product `q0 * kappa + Gamma [L+, -L-] beta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound on the charge level, as a fraction of capacity. Stands in
/// for the strict `0 < q_t`.
pub const LOWER_BOUND_FRACTION: f64 = 1e-9;

/// Allowed end-of-day mismatch `|q_K - q0|`, as a fraction of capacity.
pub const CONTINUITY_FRACTION: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum BatteryError {
    #[error("battery capacity must be positive, got {0}")]
    Capacity(f64),
    #[error("initial charge must satisfy 0 < q0 <= B, got q0={q0} B={capacity}")]
    InitialCharge { q0: f64, capacity: f64 },
    #[error("leakage retention must satisfy 0 < tau <= 1, got {0}")]
    Retention(f64),
    #[error("charging efficiency must satisfy 0 < beta_plus <= 1, got {0}")]
    ChargeEfficiency(f64),
    #[error("discharging efficiency must satisfy beta_minus >= 1, got {0}")]
    DischargeEfficiency(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryParams {
    /// Energy capacity `B` in kWh.
    pub capacity: f64,
    /// Charge level at the start of the day, kWh.
    pub q0: f64,
    /// Fraction of stored energy retained from one slot to the next.
    pub tau: f64,
    pub beta_plus: f64,
    pub beta_minus: f64,
}

impl BatteryParams {
    pub fn validate(&self) -> Result<(), BatteryError> {
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return Err(BatteryError::Capacity(self.capacity));
        }
        if !(self.q0 > 0.0 && self.q0 <= self.capacity) {
            return Err(BatteryError::InitialCharge { q0: self.q0, capacity: self.capacity });
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(BatteryError::Retention(self.tau));
        }
        if !(self.beta_plus > 0.0 && self.beta_plus <= 1.0) {
            return Err(BatteryError::ChargeEfficiency(self.beta_plus));
        }
        if !(self.beta_minus >= 1.0 && self.beta_minus.is_finite()) {
            return Err(BatteryError::DischargeEfficiency(self.beta_minus));
        }
        Ok(())
    }

    /// Energy that ends up in the battery for a net slot flow `net`
    /// (positive charges, negative discharges).
    pub fn stored_energy(&self, net: f64) -> f64 {
        if net >= 0.0 {
            self.beta_plus * net
        } else {
            self.beta_minus * net
        }
    }

    /// Inverse of [`stored_energy`](Self::stored_energy).
    pub fn net_flow_for(&self, stored: f64) -> f64 {
        if stored >= 0.0 {
            stored / self.beta_plus
        } else {
            stored / self.beta_minus
        }
    }

    pub fn lower_bound(&self) -> f64 {
        LOWER_BOUND_FRACTION * self.capacity
    }

    pub fn continuity_tolerance(&self) -> f64 {
        CONTINUITY_FRACTION * self.capacity
    }
}

/// Aggregate charge/discharge flows and the resulting charge levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeTrajectory {
    pub q: Vec<f64>,
    pub lplus: Vec<f64>,
    pub lminus: Vec<f64>,
}

impl ChargeTrajectory {
    pub fn from_net(params: &BatteryParams, net: &[f64]) -> Self {
        let (lplus, lminus) = split_flows(net);
        let q = charge_trajectory(params, &lplus, &lminus);
        Self { q, lplus, lminus }
    }
}

/// Leakage vector `kappa_l = tau^l` and lower-triangular `Gamma_{l,m} = tau^(l-m)`.
pub fn build_kappa_gamma(tau: f64, slots: usize) -> (DVector<f64>, DMatrix<f64>) {
    let kappa = DVector::from_fn(slots, |l, _| tau.powi(l as i32 + 1));
    let gamma = DMatrix::from_fn(slots, slots, |l, m| {
        if m <= l {
            tau.powi((l - m) as i32)
        } else {
            0.0
        }
    });
    (kappa, gamma)
}

/// Charge levels for given aggregate charging and discharging flows.
pub fn charge_trajectory(params: &BatteryParams, lplus: &[f64], lminus: &[f64]) -> Vec<f64> {
    assert_eq!(lplus.len(), lminus.len(), "flow vectors must have equal length");
    let slots = lplus.len();
    let (kappa, gamma) = build_kappa_gamma(params.tau, slots);
    let stored = DVector::from_fn(slots, |t, _| {
        params.beta_plus * lplus[t] - params.beta_minus * lminus[t]
    });
    let q = kappa * params.q0 + gamma * stored;
    q.iter().copied().collect()
}

/// Positive and negative parts of a net flow vector.
pub fn split_flows(net: &[f64]) -> (Vec<f64>, Vec<f64>) {
    net.iter().map(|&v| (v.max(0.0), (-v).max(0.0))).unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityTolerance {
    /// Smallest admissible charge level.
    pub lower: f64,
    /// Allowed `|q_K - q0|`.
    pub continuity: f64,
}

impl FeasibilityTolerance {
    pub fn for_battery(params: &BatteryParams) -> Self {
        Self { lower: params.lower_bound(), continuity: params.continuity_tolerance() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    /// `q_t` below the lower bound; slots are 1-based.
    Empty { slot: usize, q: f64 },
    /// `q_t` above capacity.
    Overfull { slot: usize, q: f64 },
    Continuity { q_end: f64, q0: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
    pub continuity_gap: f64,
    pub min_charge: f64,
    pub max_charge: f64,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn check_feasible(
    params: &BatteryParams,
    trajectory: &ChargeTrajectory,
    tol: FeasibilityTolerance,
) -> FeasibilityReport {
    let mut violations = Vec::new();
    for (t, &q) in trajectory.q.iter().enumerate() {
        if q < tol.lower {
            violations.push(Violation::Empty { slot: t + 1, q });
        }
        if q > params.capacity {
            violations.push(Violation::Overfull { slot: t + 1, q });
        }
    }
    let q_end = trajectory.q.last().copied().unwrap_or(params.q0);
    let continuity_gap = (q_end - params.q0).abs();
    if continuity_gap > tol.continuity {
        violations.push(Violation::Continuity { q_end, q0: params.q0 });
    }
    let min_charge = trajectory.q.iter().copied().fold(f64::INFINITY, f64::min);
    let max_charge = trajectory.q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    FeasibilityReport { violations, continuity_gap, min_charge, max_charge }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn lossless(q0: f64) -> BatteryParams {
        BatteryParams { capacity: 100.0, q0, tau: 1.0, beta_plus: 1.0, beta_minus: 1.0 }
    }

    #[test]
    fn kappa_gamma_without_leakage() {
        let (kappa, gamma) = build_kappa_gamma(1.0, 3);
        assert_eq!(kappa.as_slice(), &[1.0, 1.0, 1.0]);
        for l in 0..3 {
            for m in 0..3 {
                assert_eq!(gamma[(l, m)], if m <= l { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn kappa_gamma_half_retention() {
        let (kappa, gamma) = build_kappa_gamma(0.5, 2);
        assert_eq!(kappa.as_slice(), &[0.5, 0.25]);
        assert_eq!(gamma, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]));
    }

    #[test]
    fn kappa_gamma_single_slot() {
        let (kappa, gamma) = build_kappa_gamma(0.8, 1);
        assert_eq!(kappa.as_slice(), &[0.8]);
        assert_eq!(gamma[(0, 0)], 1.0);
    }

    #[test]
    fn trajectory_examples() {
        let q = charge_trajectory(&lossless(20.0), &[5.0, 0.0], &[0.0, 3.0]);
        assert_relative_eq!(q[0], 25.0);
        assert_relative_eq!(q[1], 22.0);

        let leaky = BatteryParams { tau: 0.5, ..lossless(20.0) };
        let q = charge_trajectory(&leaky, &[5.0, 0.0], &[0.0, 3.0]);
        assert_relative_eq!(q[0], 15.0);
        assert_relative_eq!(q[1], 4.5);

        let q = charge_trajectory(&lossless(20.0), &[0.0; 4], &[0.0; 4]);
        assert!(q.iter().all(|&v| v == 20.0));
    }

    #[test]
    fn idle_battery_is_feasible() {
        let params = lossless(30.0);
        let traj = ChargeTrajectory::from_net(&params, &[0.0; 5]);
        let report = check_feasible(&params, &traj, FeasibilityTolerance::for_battery(&params));
        assert!(report.is_feasible());
        assert_eq!(report.continuity_gap, 0.0);
    }

    #[test]
    fn capacity_breach_reported() {
        let params = BatteryParams { capacity: 80.0, ..lossless(79.0) };
        let traj = ChargeTrajectory::from_net(&params, &[2.0, -2.0]);
        let report = check_feasible(&params, &traj, FeasibilityTolerance::for_battery(&params));
        assert_eq!(report.violations, vec![Violation::Overfull { slot: 1, q: 81.0 }]);
    }

    #[test]
    fn leakage_breaks_idle_continuity() {
        let params = BatteryParams {
            capacity: 80.0,
            q0: 20.0,
            tau: 0.9f64.powf(1.0 / 48.0),
            beta_plus: 0.9,
            beta_minus: 1.1,
        };
        let traj = ChargeTrajectory::from_net(&params, &[0.0; 24]);
        // tau^24 = 0.9^0.5
        let expected_end = 20.0 * 0.9f64.sqrt();
        assert_relative_eq!(traj.q[23], expected_end, max_relative = 1e-12);
        let report = check_feasible(&params, &traj, FeasibilityTolerance::for_battery(&params));
        assert!(matches!(report.violations.as_slice(), [Violation::Continuity { .. }]));
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_flows(&[3.0, -2.0]), (vec![3.0, 0.0], vec![0.0, 2.0]));
        assert_eq!(split_flows(&[0.0]), (vec![0.0], vec![0.0]));
        assert_eq!(split_flows(&[-5.0]), (vec![0.0], vec![5.0]));
    }

    #[test]
    fn parameter_validation() {
        let ok = lossless(10.0);
        assert!(ok.validate().is_ok());
        assert_eq!(BatteryParams { tau: 1.5, ..ok }.validate(), Err(BatteryError::Retention(1.5)));
        assert!(matches!(
            BatteryParams { q0: 120.0, ..ok }.validate(),
            Err(BatteryError::InitialCharge { .. })
        ));
        assert!(BatteryParams { beta_minus: 0.9, ..ok }.validate().is_err());
        assert!(BatteryParams { beta_plus: 0.0, ..ok }.validate().is_err());
    }

    fn flows(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, len)
    }

    proptest! {
        #[test]
        fn lossless_trajectory_is_cumulative_sum(net in flows(12), q0 in 1.0f64..50.0) {
            let params = lossless(q0);
            let traj = ChargeTrajectory::from_net(&params, &net);
            let mut acc = q0;
            for (t, v) in net.iter().enumerate() {
                acc += v;
                prop_assert!((traj.q[t] - acc).abs() <= 1e-12 * (1.0 + acc.abs()));
            }
        }

        #[test]
        fn matrix_form_matches_recursion(
            net in flows(24),
            tau in 0.5f64..=1.0,
            bp in 0.5f64..=1.0,
            bm in 1.0f64..1.5,
        ) {
            let params = BatteryParams { capacity: 1e3, q0: 40.0, tau, beta_plus: bp, beta_minus: bm };
            let traj = ChargeTrajectory::from_net(&params, &net);
            let mut q = params.q0;
            for t in 0..net.len() {
                q = tau * q + bp * traj.lplus[t] - bm * traj.lminus[t];
                prop_assert!((traj.q[t] - q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
        }

        #[test]
        fn charging_more_never_lowers_charge(net in flows(8), m in 0usize..8, bump in 0.0f64..5.0) {
            let params = BatteryParams { capacity: 1e3, q0: 40.0, tau: 0.97, beta_plus: 0.9, beta_minus: 1.1 };
            let (lplus, lminus) = split_flows(&net);
            let base = charge_trajectory(&params, &lplus, &lminus);
            let mut bumped = lplus.clone();
            bumped[m] += bump;
            let more = charge_trajectory(&params, &bumped, &lminus);
            for t in m..8 {
                prop_assert!(more[t] >= base[t] - 1e-12);
            }
        }

        #[test]
        fn split_is_complementary(net in flows(16)) {
            let (lplus, lminus) = split_flows(&net);
            for t in 0..net.len() {
                prop_assert!(lplus[t] >= 0.0 && lminus[t] >= 0.0);
                prop_assert_eq!(lplus[t] * lminus[t], 0.0);
                prop_assert_eq!(lplus[t] - lminus[t], net[t]);
            }
        }
    }
}
