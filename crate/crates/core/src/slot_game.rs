//! Per-slot game between the active participants.
//!
//! Given the battery's price `a_t` and grid trade `l_Q,t`, every active
//! participant picks how much to sell to (positive) or buy from (negative)
//! the battery. Its cost `p_t l_k - a_t x_k` is a convex quadratic in its own
//! trade, and the unconstrained equilibrium has the closed form
//! `x_k = s_k + gamma_t` with
//! `gamma_t = (phi^-1 (a - delta) - b - l_Q) / (I_t + 1)`, where `b` is the
//! load the participants do not control (non-participants plus anybody who
//! has not started trading yet).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sweep cap for the cyclic best response.
pub const MAX_SWEEPS: usize = 10_000;
/// Stop once no trade moves by more than this in a sweep.
pub const SWEEP_TOLERANCE: f64 = 1e-10;
/// Slack used when deciding whether a trade lies inside its box.
pub const BOX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SlotGameError {
    #[error("slot {slot} has no active participants")]
    EmptyGame { slot: usize },
    #[error("cyclic best response did not settle in slot {slot} after {sweeps} sweeps")]
    NoConvergence { slot: usize, sweeps: usize },
}

/// Feasible trades for one participant: `[0, s]` for sellers, `[s, 0]` for buyers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeBox {
    pub lo: f64,
    pub hi: f64,
}

impl TradeBox {
    pub fn for_surplus(surplus: f64) -> Self {
        if surplus >= 0.0 {
            Self { lo: 0.0, hi: surplus }
        } else {
            Self { lo: surplus, hi: 0.0 }
        }
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, x: f64, tol: f64) -> bool {
        x >= self.lo - tol && x <= self.hi + tol
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotParticipant {
    pub id: usize,
    pub surplus: f64,
}

impl SlotParticipant {
    pub fn trade_box(&self) -> TradeBox {
        TradeBox::for_surplus(self.surplus)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotContext {
    /// 1-based slot index, for diagnostics.
    pub slot: usize,
    pub phi: f64,
    pub delta: f64,
    /// Battery price `a_t`.
    pub battery_price: f64,
    /// Battery grid trade `l_Q,t`.
    pub battery_grid_trade: f64,
    /// Grid load outside the game: non-participants plus inactive participants.
    pub background_load: f64,
    pub participants: Vec<SlotParticipant>,
}

impl SlotContext {
    pub fn active_count(&self) -> usize {
        self.participants.len()
    }

    pub fn total_surplus(&self) -> f64 {
        self.participants.iter().map(|p| p.surplus).sum()
    }

    /// Grid load of everybody except participant `k` for trades `x`.
    pub fn load_without(&self, k: usize, x: &[f64]) -> f64 {
        let traded: f64 = self
            .participants
            .iter()
            .zip(x)
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, (p, xj))| xj - p.surplus)
            .sum();
        traded + self.background_load + self.battery_grid_trade
    }

    /// Common shift `gamma_t` of the unconstrained equilibrium.
    pub fn gamma(&self) -> f64 {
        let i = self.active_count() as f64;
        ((self.battery_price - self.delta) / self.phi - self.background_load - self.battery_grid_trade)
            / (i + 1.0)
    }
}

/// Coefficients of `C_k = w1 x^2 + w2 x + w3` for participant `k`.
pub fn cost_coefficients(ctx: &SlotContext, k: usize, x: &[f64]) -> (f64, f64, f64) {
    let s = ctx.participants[k].surplus;
    let others = ctx.load_without(k, x);
    let w1 = ctx.phi;
    let w2 = ctx.phi * (others - 2.0 * s) + ctx.delta - ctx.battery_price;
    let w3 = ctx.phi * s * (s - others) - ctx.delta * s;
    (w1, w2, w3)
}

/// Cost of participant `k` trading `x_k` while the others trade as in `x`.
pub fn user_cost(ctx: &SlotContext, k: usize, x_k: f64, x: &[f64]) -> f64 {
    let grid_load = x_k - ctx.participants[k].surplus;
    let total = grid_load + ctx.load_without(k, x);
    let price = ctx.phi * total + ctx.delta;
    price * grid_load - ctx.battery_price * x_k
}

/// Equilibrium of one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotNash {
    pub slot: usize,
    /// `(participant id, trade with the battery)`.
    pub trades: Vec<(usize, f64)>,
    pub gamma: f64,
    /// Grid load of each active participant, aligned with `trades`.
    pub grid_loads: Vec<f64>,
    pub total_load: f64,
    pub price: f64,
    /// True when box constraints changed the closed-form equilibrium.
    pub projected: bool,
}

impl SlotNash {
    fn assemble(ctx: &SlotContext, x: &[f64], gamma: f64, projected: bool) -> Self {
        let grid_loads: Vec<f64> =
            ctx.participants.iter().zip(x).map(|(p, xk)| xk - p.surplus).collect();
        let total_load =
            grid_loads.iter().sum::<f64>() + ctx.background_load + ctx.battery_grid_trade;
        Self {
            slot: ctx.slot,
            trades: ctx.participants.iter().zip(x).map(|(p, &xk)| (p.id, xk)).collect(),
            gamma,
            grid_loads,
            total_load,
            price: ctx.phi * total_load + ctx.delta,
            projected,
        }
    }

    /// Slot in which nobody trades with the battery.
    pub fn followerless(ctx: &SlotContext) -> Self {
        Self::assemble(ctx, &[], 0.0, false)
    }

    pub fn trade_values(&self) -> Vec<f64> {
        self.trades.iter().map(|&(_, x)| x).collect()
    }

    pub fn total_trade(&self) -> f64 {
        self.trades.iter().map(|&(_, x)| x).sum()
    }
}

/// Unconstrained equilibrium `x_k = s_k + gamma_t`.
pub fn nash_closed_form(ctx: &SlotContext) -> Result<SlotNash, SlotGameError> {
    if ctx.participants.is_empty() {
        return Err(SlotGameError::EmptyGame { slot: ctx.slot });
    }
    let gamma = ctx.gamma();
    let x: Vec<f64> = ctx.participants.iter().map(|p| p.surplus + gamma).collect();
    Ok(SlotNash::assemble(ctx, &x, gamma, false))
}

/// Equilibrium respecting every participant's trade box.
///
/// Returns the closed form when it is already inside the boxes, otherwise
/// runs cyclic best response where each participant minimises its 1-D
/// quadratic over its box.
pub fn project_nash(ctx: &SlotContext) -> Result<SlotNash, SlotGameError> {
    let closed = nash_closed_form(ctx)?;
    let in_box = ctx
        .participants
        .iter()
        .zip(&closed.trades)
        .all(|(p, &(_, x))| p.trade_box().contains(x, BOX_TOLERANCE));
    if in_box {
        let x: Vec<f64> = ctx
            .participants
            .iter()
            .zip(&closed.trades)
            .map(|(p, &(_, x))| p.trade_box().clamp(x))
            .collect();
        return Ok(SlotNash::assemble(ctx, &x, closed.gamma, false));
    }

    let mut x: Vec<f64> = ctx.participants.iter().map(|p| p.trade_box().clamp(p.surplus)).collect();
    for _ in 0..MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for k in 0..x.len() {
            let next = best_response(ctx, k, &x);
            max_change = max_change.max((next - x[k]).abs());
            x[k] = next;
        }
        if max_change <= SWEEP_TOLERANCE {
            return Ok(SlotNash::assemble(ctx, &x, closed.gamma, true));
        }
    }
    Err(SlotGameError::NoConvergence { slot: ctx.slot, sweeps: MAX_SWEEPS })
}

/// Cost-minimising trade of participant `k` over its box, others fixed.
pub fn best_response(ctx: &SlotContext, k: usize, x: &[f64]) -> f64 {
    let p = &ctx.participants[k];
    let others = ctx.load_without(k, x);
    let unconstrained = p.surplus + (ctx.battery_price - ctx.delta - ctx.phi * others) / (2.0 * ctx.phi);
    p.trade_box().clamp(unconstrained)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    /// Largest cost decrease any participant can reach alone.
    pub max_improvement: f64,
    /// Largest improvement divided by `1 + |cost|` of that participant.
    pub max_scaled_improvement: f64,
    /// Participant id with the largest scaled improvement, if any.
    pub worst_participant: Option<usize>,
}

impl DeviationReport {
    /// Equilibrium accepted when no scaled improvement exceeds `tol`.
    pub fn accepts(&self, tol: f64) -> bool {
        self.max_scaled_improvement <= tol
    }
}

/// Scans each participant's box on `grid_points` evenly spaced trades (both
/// bounds included) and reports the best unilateral improvement.
pub fn verify_nash(solution: &SlotNash, ctx: &SlotContext, grid_points: usize) -> DeviationReport {
    assert!(grid_points >= 3, "need at least three grid points");
    let x = solution.trade_values();
    let mut report = DeviationReport { max_improvement: 0.0, max_scaled_improvement: 0.0, worst_participant: None };
    for (k, p) in ctx.participants.iter().enumerate() {
        let current = user_cost(ctx, k, x[k], &x);
        let b = p.trade_box();
        let best = (0..grid_points)
            .map(|i| b.lo + b.width() * i as f64 / (grid_points - 1) as f64)
            .chain([b.lo, b.hi])
            .map(|xk| user_cost(ctx, k, xk, &x))
            .fold(f64::INFINITY, f64::min);
        let improvement = (current - best).max(0.0);
        let scaled = improvement / (1.0 + current.abs());
        report.max_improvement = report.max_improvement.max(improvement);
        if scaled > report.max_scaled_improvement {
            report.max_scaled_improvement = scaled;
            report.worst_participant = Some(p.id);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ctx(phi: f64, delta: f64, a: f64, background: f64, lq: f64, surpluses: &[f64]) -> SlotContext {
        SlotContext {
            slot: 1,
            phi,
            delta,
            battery_price: a,
            battery_grid_trade: lq,
            background_load: background,
            participants: surpluses
                .iter()
                .enumerate()
                .map(|(i, &s)| SlotParticipant { id: i + 1, surplus: s })
                .collect(),
        }
    }

    #[test]
    fn cost_when_trading_entire_surplus() {
        let c = ctx(1.0, 0.5, 0.5, 0.0, 0.0, &[2.0, -1.0]);
        let x = [2.0, -1.0];
        assert_relative_eq!(user_cost(&c, 0, 2.0, &x), -0.5 * 2.0);
        assert_eq!(user_cost(&ctx(1.0, 0.0, 0.0, 0.0, 0.0, &[0.0]), 0, 0.0, &[0.0]), 0.0);
    }

    #[test]
    fn closed_form_examples() {
        let sol = nash_closed_form(&ctx(1.0, 0.0, 0.0, 0.0, 0.0, &[1.0, 2.0])).unwrap();
        assert_eq!(sol.gamma, 0.0);
        assert_eq!(sol.trade_values(), vec![1.0, 2.0]);

        let sol = nash_closed_form(&ctx(1.0, 0.0, 3.0, 0.0, 0.0, &[1.0, 2.0])).unwrap();
        assert_relative_eq!(sol.gamma, 1.0);
        assert_eq!(sol.trade_values(), vec![2.0, 3.0]);
        assert!(!sol.projected);

        let sol = nash_closed_form(&ctx(1.0, 0.0, 2.0, 4.0, 0.0, &[0.0])).unwrap();
        assert_relative_eq!(sol.gamma, -1.0);
        assert_relative_eq!(sol.trades[0].1, -1.0);
    }

    #[test]
    fn empty_game_is_an_error() {
        assert_eq!(
            nash_closed_form(&ctx(1.0, 0.0, 0.0, 0.0, 0.0, &[])).unwrap_err(),
            SlotGameError::EmptyGame { slot: 1 }
        );
    }

    #[test]
    fn projection_is_noop_inside_box() {
        let c = ctx(1.0, 0.2, 0.1, 1.0, 0.0, &[2.0, 3.0]);
        let closed = nash_closed_form(&c).unwrap();
        let projected = project_nash(&c).unwrap();
        assert!(!projected.projected);
        for (a, b) in closed.trades.iter().zip(&projected.trades) {
            assert_relative_eq!(a.1, b.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_pins_both_sellers_at_capacity() {
        let c = ctx(1.0, 0.0, 3.0, 0.0, 0.0, &[1.0, 2.0]);
        let sol = project_nash(&c).unwrap();
        assert!(sol.projected);
        assert_eq!(sol.trade_values(), vec![1.0, 2.0]);
        // Derivative at the upper bound is still negative: selling more would help but is blocked.
        for k in 0..2 {
            let (w1, w2, _) = cost_coefficients(&c, k, &sol.trade_values());
            assert!(2.0 * w1 * sol.trades[k].1 + w2 < 0.0);
        }
        // 2-D grid search over both boxes agrees that no unilateral move helps.
        let x = sol.trade_values();
        for i in 0..=200 {
            let x0 = i as f64 / 200.0;
            assert!(user_cost(&c, 0, x0, &x) >= user_cost(&c, 0, x[0], &x) - 1e-12);
            let x1 = 2.0 * i as f64 / 200.0;
            assert!(user_cost(&c, 1, x1, &x) >= user_cost(&c, 1, x[1], &x) - 1e-12);
        }
    }

    #[test]
    fn single_user_clipped_to_bound() {
        // seller with box [0, 1]; gamma = (0 - 4) / 2 = -2 so the closed form sits at -1
        let c = ctx(1.0, 0.0, 0.0, 4.0, 0.0, &[1.0]);
        let closed = nash_closed_form(&c).unwrap();
        assert_relative_eq!(closed.trades[0].1, -1.0);
        let sol = project_nash(&c).unwrap();
        assert_eq!(sol.trades[0].1, 0.0);
        let (w1, w2, _) = cost_coefficients(&c, 0, &[0.0]);
        assert!(2.0 * w1 * 0.0 + w2 >= 0.0, "derivative must point back into the box");
    }

    #[test]
    fn perturbed_equilibrium_is_detected() {
        let c = ctx(0.5, 0.1, 0.3, 1.0, 0.5, &[3.0, 2.0, -1.0]);
        let mut sol = project_nash(&c).unwrap();
        assert!(verify_nash(&sol, &c, 201).accepts(1e-6));
        let b = c.participants[0].trade_box();
        let moved = (sol.trades[0].1 + 0.1 * b.width()).min(b.hi);
        let moved = if (moved - sol.trades[0].1).abs() < 1e-3 { sol.trades[0].1 - 0.1 * b.width() } else { moved };
        sol.trades[0].1 = moved;
        assert!(verify_nash(&sol, &c, 201).max_improvement > 0.0);
    }

    #[test]
    fn single_agent_optimum_verifies() {
        let c = ctx(0.8, 0.2, 0.6, 0.5, 0.0, &[1.5]);
        let sol = project_nash(&c).unwrap();
        assert!(verify_nash(&sol, &c, 201).max_scaled_improvement <= 1e-9);
    }

    fn context() -> impl Strategy<Value = SlotContext> {
        (
            0.01f64..1.0,
            0.0f64..0.5,
            -1.0f64..1.0,
            -3.0f64..5.0,
            -3.0f64..3.0,
            prop::collection::vec(-4.0f64..4.0, 1..=4),
        )
            .prop_map(|(phi, delta, a, b, lq, s)| ctx(phi, delta, a, b, lq, &s))
    }

    proptest! {
        #[test]
        fn closed_form_is_stationary(c in context()) {
            let sol = nash_closed_form(&c).unwrap();
            let x = sol.trade_values();
            for k in 0..x.len() {
                let (w1, w2, _) = cost_coefficients(&c, k, &x);
                prop_assert!((2.0 * w1 * x[k] + w2).abs() <= 1e-9 * (1.0 + w2.abs()));
            }
        }

        #[test]
        fn quadratic_form_matches_direct_cost(c in context(), dx in -2.0f64..2.0) {
            let x: Vec<f64> = c.participants.iter().map(|p| p.surplus * 0.5 + dx).collect();
            for k in 0..x.len() {
                let (w1, w2, w3) = cost_coefficients(&c, k, &x);
                let direct = user_cost(&c, k, x[k], &x);
                let quad = w1 * x[k] * x[k] + w2 * x[k] + w3;
                prop_assert!((direct - quad).abs() <= 1e-9 * (1.0 + direct.abs()));
            }
        }

        #[test]
        fn equal_surplus_gets_equal_trade(c in context()) {
            let mut c = c;
            let s = c.participants[0].surplus;
            c.participants.push(SlotParticipant { id: 99, surplus: s });
            let sol = nash_closed_form(&c).unwrap();
            prop_assert_eq!(sol.trades[0].1, sol.trades.last().unwrap().1);
        }

        #[test]
        fn aggregate_identities(c in context()) {
            let sol = nash_closed_form(&c).unwrap();
            let i = c.active_count() as f64;
            prop_assert!((sol.total_trade() - (c.total_surplus() + i * sol.gamma)).abs() <= 1e-9 * (1.0 + sol.total_trade().abs()));
            let load = (i * (c.battery_price - c.delta) / c.phi + c.background_load + c.battery_grid_trade) / (i + 1.0);
            prop_assert!((sol.total_load - load).abs() <= 1e-9 * (1.0 + load.abs()));
        }

        #[test]
        fn projected_equilibrium_admits_no_deviation(c in context()) {
            let sol = project_nash(&c).unwrap();
            for (p, &(_, x)) in c.participants.iter().zip(&sol.trades) {
                prop_assert!(p.trade_box().contains(x, 1e-9));
            }
            prop_assert!(verify_nash(&sol, &c, 201).accepts(1e-6));
        }
    }
}
