//! Leader (battery operator) optimisation and full Stackelberg equilibrium
//! for a fixed participation profile.
//!
//! Substituting the followers' closed-form response into the operator's
//! revenue gives, per slot, the concave quadratic
//! `lambda1 a^2 + lambda2 a + lambda3 l_Q^2 + lambda4 l_Q`. In the
//! coordinates `(gamma_t, n_t)`, where `n_t = sum_k x_k + l_Q,t` is the net
//! flow into the battery, this separates into
//!
//! ```text
//! R_t = -phi I gamma^2 - phi S gamma  -  (phi (b - S + n) + delta) n
//! ```
//!
//! (`S` total surplus of the active participants, `b` background load).
//! Battery constraints only involve `n`, so the optimal `gamma_t` is a
//! clipped closed form and the remaining problem is a K-variable dispatch
//! with linear constraints on the stored energy `f(n_t)`. `f` is piecewise
//! linear (charging efficiency differs from discharging), so the dispatch
//! is solved exactly on one sign pattern at a time and patterns are
//! switched while that improves revenue.
//!
//! `gamma_t` is restricted to values that keep every follower's closed-form
//! trade inside its box, so the realised (box-constrained) follower
//! equilibrium coincides with the response the operator planned for.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use nalgebra::{DMatrix, DVector};

use crate::qp::{LinearConstraint, QpError, QuadraticProgram};
use crate::scenario::{ActionProfile, ProfileError, Scenario};
use crate::slot_game::{project_nash, SlotContext, SlotGameError, SlotNash, SlotParticipant};
use crate::storage::{check_feasible, BatteryParams, ChargeTrajectory, FeasibilityReport, FeasibilityTolerance};

/// Margin (fraction of capacity) kept between the planned charge levels and
/// the feasibility bounds, so that rounding never flags a bound.
pub const BOUND_MARGIN: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StackelbergError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("battery constraints cannot be met: {0}")]
    Infeasible(String),
    #[error("dispatch solver failed: {0}")]
    Solver(#[from] QpError),
    #[error("sign-pattern search did not settle after {0} switches")]
    PatternSearch(usize),
    #[error(transparent)]
    SlotGame(#[from] SlotGameError),
    #[error("unknown participant {0}")]
    UnknownParticipant(usize),
}

/// Battery price and grid trade for every slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CesStrategy {
    /// `a_t`, $/kWh.
    pub price: Vec<f64>,
    /// `l_Q,t`, kWh; positive buys from the grid.
    pub grid_trade: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaderOptions {
    /// Cap on accepted sign-pattern switches in the dispatch search.
    pub max_pattern_switches: usize,
}

impl Default for LeaderOptions {
    fn default() -> Self {
        Self { max_pattern_switches: 500 }
    }
}

/// Data of one slot for a given participation profile.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSetup {
    /// 1-based.
    pub slot: usize,
    pub phi: f64,
    pub delta: f64,
    /// Non-participant load plus the net demand of participants not yet trading.
    pub background: f64,
    pub participants: Vec<SlotParticipant>,
}

impl SlotSetup {
    pub fn active_count(&self) -> usize {
        self.participants.len()
    }

    pub fn total_surplus(&self) -> f64 {
        self.participants.iter().map(|p| p.surplus).sum()
    }

    /// `(lambda1, lambda2, lambda3, lambda4)` of the leader objective.
    pub fn lambdas(&self) -> [f64; 4] {
        let i = self.active_count() as f64;
        let share = i / (i + 1.0);
        [
            -share / self.phi,
            share * (self.background + self.delta / self.phi) - self.total_surplus(),
            -self.phi / (i + 1.0),
            -(self.phi * self.background + self.delta) / (i + 1.0),
        ]
    }

    /// Values of `gamma` that keep every closed-form trade `s_k + gamma` in its box.
    pub fn gamma_bounds(&self) -> (f64, f64) {
        self.participants.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(lo, hi), p| {
            let b = p.trade_box();
            (lo.max(b.lo - p.surplus), hi.min(b.hi - p.surplus))
        })
    }

    /// Revenue-maximising `gamma`, clipped to [`gamma_bounds`](Self::gamma_bounds).
    pub fn best_gamma(&self) -> f64 {
        if self.participants.is_empty() {
            return 0.0;
        }
        let (lo, hi) = self.gamma_bounds();
        (-self.total_surplus() / (2.0 * self.active_count() as f64)).clamp(lo, hi)
    }

    /// `c` in the flow part `-phi n^2 - c n` of the slot revenue.
    pub fn flow_slope(&self) -> f64 {
        self.phi * (self.background - self.total_surplus()) + self.delta
    }

    /// Maps `(a, l_Q)` to `(gamma, n)`.
    pub fn to_plan(&self, price: f64, grid_trade: f64) -> (f64, f64) {
        if self.participants.is_empty() {
            return (0.0, grid_trade);
        }
        let i = self.active_count() as f64;
        let gamma = ((price - self.delta) / self.phi - self.background - grid_trade) / (i + 1.0);
        (gamma, self.total_surplus() + i * gamma + grid_trade)
    }

    /// Maps `(gamma, n)` back to `(a, l_Q)`. Followerless slots get `a_t = p_t`.
    pub fn from_plan(&self, gamma: f64, net: f64) -> (f64, f64) {
        let s = self.total_surplus();
        let i = self.active_count() as f64;
        let price = self.delta + self.phi * (gamma + self.background + net - s);
        (price, net - s - i * gamma)
    }

    pub fn context(&self, price: f64, grid_trade: f64) -> SlotContext {
        SlotContext {
            slot: self.slot,
            phi: self.phi,
            delta: self.delta,
            battery_price: price,
            battery_grid_trade: grid_trade,
            background_load: self.background,
            participants: self.participants.clone(),
        }
    }
}

pub fn slot_setups(scenario: &Scenario, h: &ActionProfile) -> Vec<SlotSetup> {
    let non_participant = scenario.non_participant_load();
    (0..scenario.slots())
        .map(|t| {
            let slot = t + 1;
            let mut background = non_participant[t];
            let mut participants = Vec::new();
            for (index, user) in scenario.participants().enumerate() {
                if h.is_active(index, slot) {
                    participants.push(SlotParticipant { id: user.id, surplus: user.surplus(t) });
                } else {
                    background += user.net_demand(t);
                }
            }
            SlotSetup {
                slot,
                phi: scenario.prices.phi[t],
                delta: scenario.prices.delta[t],
                background,
                participants,
            }
        })
        .collect()
}

/// Operator revenue under the followers' closed-form response, via the
/// `lambda` coefficients.
pub fn leader_objective(strategy: &CesStrategy, scenario: &Scenario, h: &ActionProfile) -> f64 {
    slot_setups(scenario, h)
        .iter()
        .enumerate()
        .map(|(t, setup)| {
            let [l1, l2, l3, l4] = setup.lambdas();
            let a = strategy.price[t];
            let q = strategy.grid_trade[t];
            l1 * a * a + l2 * a + l3 * q * q + l4 * q
        })
        .sum()
}

/// Operator revenue `sum_t (-a_t sum_k x_k - p_t l_Q,t)` evaluated on the
/// unconstrained follower equilibrium of every slot.
pub fn induced_revenue(strategy: &CesStrategy, scenario: &Scenario, h: &ActionProfile) -> f64 {
    slot_setups(scenario, h)
        .iter()
        .enumerate()
        .map(|(t, setup)| {
            let ctx = setup.context(strategy.price[t], strategy.grid_trade[t]);
            let nash = match crate::slot_game::nash_closed_form(&ctx) {
                Ok(n) => n,
                Err(_) => SlotNash::followerless(&ctx),
            };
            -strategy.price[t] * nash.total_trade() - nash.price * strategy.grid_trade[t]
        })
        .sum()
}

/// Charge-level bounds used while planning.
fn planning_bounds(battery: &BatteryParams) -> (f64, f64) {
    let lo = battery.lower_bound() + BOUND_MARGIN * battery.capacity;
    let hi = battery.capacity * (1.0 - BOUND_MARGIN);
    (lo, hi)
}

/// Net-flow dispatch: maximise `sum_t -phi_t n_t^2 - c_t n_t` subject to the
/// battery constraints on the stored energy `f(n_t)`.
struct Dispatch<'a> {
    battery: &'a BatteryParams,
    phi: Vec<f64>,
    slope: Vec<f64>,
}

impl Dispatch<'_> {
    fn slots(&self) -> usize {
        self.phi.len()
    }

    fn value(&self, net: &[f64]) -> f64 {
        net.iter().zip(&self.phi).zip(&self.slope).map(|((n, phi), c)| -phi * n * n - c * n).sum()
    }

    fn kinked(&self) -> bool {
        self.battery.beta_plus != self.battery.beta_minus
    }

    /// Linear battery constraints on the stored-energy vector.
    fn battery_constraints(&self) -> Vec<LinearConstraint> {
        let k = self.slots();
        let tau = self.battery.tau;
        let q0 = self.battery.q0;
        let (lo, hi) = planning_bounds(self.battery);
        let mut constraints = Vec::with_capacity(2 * k);
        for t in 0..k.saturating_sub(1) {
            let row = DVector::from_fn(k, |m, _| if m <= t { tau.powi((t - m) as i32) } else { 0.0 });
            let decay = tau.powi(t as i32 + 1) * q0;
            constraints.push(LinearConstraint::at_least(row.clone(), lo - decay));
            constraints.push(LinearConstraint::at_most(row, hi - decay));
        }
        let last = DVector::from_fn(k, |m, _| tau.powi((k - 1 - m) as i32));
        constraints.push(LinearConstraint::equality(last, q0 - tau.powi(k as i32) * q0));
        constraints
    }

    /// Exact optimum with each slot's flow restricted to the sign in `pattern`
    /// (`true` = charging). Returns the net flows.
    fn solve_pattern(&self, pattern: &[bool]) -> Result<Vec<f64>, QpError> {
        let k = self.slots();
        let beta: Vec<f64> = pattern
            .iter()
            .map(|&charge| if charge { self.battery.beta_plus } else { self.battery.beta_minus })
            .collect();
        // minimise sum phi/beta^2 e^2 + c/beta e over stored energy e
        let hessian = DMatrix::from_diagonal(&DVector::from_fn(k, |t, _| 2.0 * self.phi[t] / (beta[t] * beta[t])));
        let linear = DVector::from_fn(k, |t, _| self.slope[t] / beta[t]);
        let mut qp = QuadraticProgram::new(hessian, linear);
        for c in self.battery_constraints() {
            qp = qp.with_constraint(c);
        }
        if self.kinked() {
            for (t, &charge) in pattern.iter().enumerate() {
                let unit = DVector::from_fn(k, |m, _| if m == t { 1.0 } else { 0.0 });
                qp = qp.with_constraint(if charge {
                    LinearConstraint::at_least(unit, 0.0)
                } else {
                    LinearConstraint::at_most(unit, 0.0)
                });
            }
        }
        let sol = qp.solve()?;
        Ok(sol.x.iter().zip(&beta).map(|(e, b)| e / b).collect())
    }

    /// Stored-energy vector closest to the unconstrained optimum; used only
    /// to find a sign pattern with a non-empty feasible region.
    fn feasible_stored_energy(&self, target: &[f64]) -> Result<Vec<f64>, QpError> {
        let k = self.slots();
        let mut qp = QuadraticProgram::new(
            DMatrix::identity(k, k),
            -DVector::from_column_slice(target),
        );
        for c in self.battery_constraints() {
            qp = qp.with_constraint(c);
        }
        Ok(qp.solve()?.x.iter().copied().collect())
    }

    fn solve(&self, options: &LeaderOptions) -> Result<Vec<f64>, StackelbergError> {
        let k = self.slots();
        let unconstrained: Vec<f64> = (0..k).map(|t| -self.slope[t] / (2.0 * self.phi[t])).collect();
        let mut pattern: Vec<bool> = unconstrained.iter().map(|&n| n >= 0.0).collect();
        let mut net = match self.solve_pattern(&pattern) {
            Ok(net) => net,
            Err(QpError::Infeasible { .. }) => {
                let target: Vec<f64> = unconstrained.iter().map(|&n| self.battery.stored_energy(n)).collect();
                let stored = self.feasible_stored_energy(&target).map_err(|e| match e {
                    QpError::Infeasible { .. } => StackelbergError::Infeasible(
                        "no dispatch keeps the charge within capacity and returns it to q0".into(),
                    ),
                    other => other.into(),
                })?;
                for (p, (&e, &n)) in pattern.iter_mut().zip(stored.iter().zip(&unconstrained)) {
                    *p = if e.abs() > 1e-12 { e > 0.0 } else { n >= 0.0 };
                }
                self.solve_pattern(&pattern)?
            }
            Err(e) => return Err(e.into()),
        };
        if !self.kinked() {
            return Ok(net);
        }

        let mut best = self.value(&net);
        let at_kink_tol = 1e-9 * self.battery.capacity;
        for _ in 0..options.max_pattern_switches {
            // Flips worth trying: slots sitting on the kink, and slots whose
            // kink is convex (there the other branch can win outright).
            let candidates: Vec<usize> = (0..k)
                .filter(|&t| net[t].abs() <= at_kink_tol || self.slope[t] < 0.0)
                .collect();
            let mut improved = false;
            let mut trials: Vec<Vec<usize>> = candidates.iter().map(|&t| vec![t]).collect();
            let on_kink: Vec<usize> = candidates.iter().copied().filter(|&t| net[t].abs() <= at_kink_tol).collect();
            if on_kink.len() > 1 {
                trials.push(on_kink);
            }
            for flips in trials {
                let mut trial = pattern.clone();
                for &t in &flips {
                    trial[t] = !trial[t];
                }
                let candidate = match self.solve_pattern(&trial) {
                    Ok(c) => c,
                    Err(QpError::Infeasible { .. }) => continue,
                    Err(e) => return Err(e.into()),
                };
                let value = self.value(&candidate);
                if value > best + 1e-12 * (1.0 + best.abs()) {
                    best = value;
                    net = candidate;
                    pattern = trial;
                    improved = true;
                    break;
                }
            }
            if !improved {
                return Ok(net);
            }
        }
        Err(StackelbergError::PatternSearch(options.max_pattern_switches))
    }
}

/// Revenue-maximising battery strategy for participation profile `h`.
pub fn solve_leader(
    scenario: &Scenario,
    h: &ActionProfile,
    options: &LeaderOptions,
) -> Result<CesStrategy, StackelbergError> {
    scenario.check_profile(h)?;
    let setups = slot_setups(scenario, h);
    let dispatch = Dispatch {
        battery: &scenario.battery,
        phi: setups.iter().map(|s| s.phi).collect(),
        slope: setups.iter().map(|s| s.flow_slope()).collect(),
    };
    let net = dispatch.solve(options)?;
    let (price, grid_trade) = setups
        .iter()
        .zip(&net)
        .map(|(setup, &n)| setup.from_plan(setup.best_gamma(), n))
        .unzip();
    Ok(CesStrategy { price, grid_trade })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackelbergSolution {
    pub profile: ActionProfile,
    pub participant_ids: Vec<usize>,
    pub strategy: CesStrategy,
    /// Realised follower equilibrium of every slot (empty trades when nobody is active).
    pub slots: Vec<SlotNash>,
    /// `[participant][slot]` trade with the battery; zero before the start slot.
    pub trades: Vec<Vec<f64>>,
    /// `[participant][slot]` grid load.
    pub grid_loads: Vec<Vec<f64>>,
    pub non_participant_load: Vec<f64>,
    pub trajectory: ChargeTrajectory,
    pub feasibility: FeasibilityReport,
    pub revenue: f64,
    /// Aligned with `participant_ids`.
    pub daily_costs: Vec<f64>,
    /// Leader objective value of `strategy`.
    pub objective: f64,
    /// True when some slot needed box projection of the follower response.
    pub projected: bool,
}

impl StackelbergSolution {
    pub fn total_load(&self) -> Vec<f64> {
        self.slots.iter().map(|s| s.total_load).collect()
    }

    pub fn grid_prices(&self) -> Vec<f64> {
        self.slots.iter().map(|s| s.price).collect()
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.participant_ids.iter().position(|&p| p == id)
    }
}

pub fn solve_stackelberg(scenario: &Scenario, h: &ActionProfile) -> Result<StackelbergSolution, StackelbergError> {
    solve_stackelberg_with(scenario, h, &LeaderOptions::default())
}

pub fn solve_stackelberg_with(
    scenario: &Scenario,
    h: &ActionProfile,
    options: &LeaderOptions,
) -> Result<StackelbergSolution, StackelbergError> {
    let strategy = solve_leader(scenario, h, options)?;
    assemble_solution(scenario, h, strategy)
}

/// Realises the followers' response to `strategy` and collects costs,
/// revenue and the battery trajectory.
pub fn assemble_solution(
    scenario: &Scenario,
    h: &ActionProfile,
    strategy: CesStrategy,
) -> Result<StackelbergSolution, StackelbergError> {
    scenario.check_profile(h)?;
    let setups = slot_setups(scenario, h);
    let slots_count = scenario.slots();
    let participants: Vec<_> = scenario.participants().collect();
    let participant_ids: Vec<usize> = participants.iter().map(|u| u.id).collect();
    let mut trades = vec![vec![0.0; slots_count]; participants.len()];
    let mut grid_loads: Vec<Vec<f64>> =
        participants.iter().map(|u| (0..slots_count).map(|t| u.net_demand(t)).collect()).collect();

    let mut slots = Vec::with_capacity(slots_count);
    let mut net = Vec::with_capacity(slots_count);
    for (t, setup) in setups.iter().enumerate() {
        let ctx = setup.context(strategy.price[t], strategy.grid_trade[t]);
        let nash = if setup.participants.is_empty() { SlotNash::followerless(&ctx) } else { project_nash(&ctx)? };
        for (&(id, x), &l) in nash.trades.iter().zip(&nash.grid_loads) {
            let index = participant_ids.iter().position(|&p| p == id).expect("active participant");
            trades[index][t] = x;
            grid_loads[index][t] = l;
        }
        net.push(nash.total_trade() + strategy.grid_trade[t]);
        slots.push(nash);
    }

    let trajectory = ChargeTrajectory::from_net(&scenario.battery, &net);
    let feasibility = check_feasible(&scenario.battery, &trajectory, FeasibilityTolerance::for_battery(&scenario.battery));
    let revenue = revenue_from(&strategy, &slots);
    let daily_costs = (0..participants.len()).map(|i| cost_from(&slots, &strategy, &trades[i], &grid_loads[i])).collect();
    let objective = leader_objective(&strategy, scenario, h);
    let projected = slots.iter().any(|s| s.projected);
    Ok(StackelbergSolution {
        profile: h.clone(),
        participant_ids,
        strategy,
        slots,
        trades,
        grid_loads,
        non_participant_load: scenario.non_participant_load(),
        trajectory,
        feasibility,
        revenue,
        daily_costs,
        objective,
        projected,
    })
}

fn revenue_from(strategy: &CesStrategy, slots: &[SlotNash]) -> f64 {
    slots
        .iter()
        .enumerate()
        .map(|(t, s)| -strategy.price[t] * s.total_trade() - s.price * strategy.grid_trade[t])
        .sum()
}

fn cost_from(slots: &[SlotNash], strategy: &CesStrategy, trades: &[f64], loads: &[f64]) -> f64 {
    slots
        .iter()
        .enumerate()
        .map(|(t, s)| s.price * loads[t] - strategy.price[t] * trades[t])
        .sum()
}

/// Operator revenue recomputed from the slot data of `solution`.
pub fn revenue(solution: &StackelbergSolution) -> f64 {
    revenue_from(&solution.strategy, &solution.slots)
}

/// Daily energy cost of participant `id`, recomputed from slot data.
pub fn daily_cost(solution: &StackelbergSolution, id: usize) -> Result<f64, StackelbergError> {
    let i = solution.index_of(id).ok_or(StackelbergError::UnknownParticipant(id))?;
    Ok(cost_from(&solution.slots, &solution.strategy, &solution.trades[i], &solution.grid_loads[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub samples: usize,
    pub objective: f64,
    /// Largest objective increase found among the perturbations.
    pub max_gain: f64,
    /// Gain allowed before the certificate fails.
    pub threshold: f64,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.max_gain <= self.threshold
    }
}

/// Repairs perturbed net flows so the charge stays in bounds and returns
/// to `q0`; the last slot absorbs the continuity correction.
fn repair_net_flows(battery: &BatteryParams, net: &mut [f64]) {
    let (lo, hi) = planning_bounds(battery);
    let mut q = battery.q0;
    let k = net.len();
    for (t, n) in net.iter_mut().enumerate() {
        let mut stored = battery.stored_energy(*n);
        if t + 1 == k {
            stored = battery.q0 - battery.tau * q;
        } else {
            let next = battery.tau * q + stored;
            if next < lo {
                stored += lo - next;
            } else if next > hi {
                stored -= next - hi;
            }
        }
        *n = battery.net_flow_for(stored);
        q = battery.tau * q + stored;
    }
}

/// Perturbs `strategy` by `samples` random feasible moves of size about
/// `step` and reports the largest revenue gain found. A fixed seed keeps
/// the check reproducible.
pub fn optimality_certificate(
    scenario: &Scenario,
    h: &ActionProfile,
    strategy: &CesStrategy,
    samples: usize,
    step: f64,
    seed: u64,
) -> CertificateReport {
    let setups = slot_setups(scenario, h);
    let objective = leader_objective(strategy, scenario, h);
    let tol = FeasibilityTolerance::for_battery(&scenario.battery);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_gain = f64::NEG_INFINITY;
    let mut accepted = 0;
    while accepted < samples {
        let mut gammas = Vec::with_capacity(setups.len());
        let mut net = Vec::with_capacity(setups.len());
        for (t, setup) in setups.iter().enumerate() {
            let a = strategy.price[t] + step * rng.random_range(-1.0..=1.0);
            let l = strategy.grid_trade[t] + step * rng.random_range(-1.0..=1.0);
            let (gamma, n) = setup.to_plan(a, l);
            let (lo, hi) = setup.gamma_bounds();
            gammas.push(if setup.participants.is_empty() { gamma } else { gamma.clamp(lo, hi) });
            net.push(n);
        }
        repair_net_flows(&scenario.battery, &mut net);
        let trajectory = ChargeTrajectory::from_net(&scenario.battery, &net);
        if !check_feasible(&scenario.battery, &trajectory, tol).is_feasible() {
            continue;
        }
        let (price, grid_trade) = setups
            .iter()
            .zip(gammas.iter().zip(&net))
            .enumerate()
            .map(|(t, (setup, (&g, &n)))| {
                if setup.participants.is_empty() {
                    // followerless slots: the price does not matter, keep the perturbed value
                    (strategy.price[t], n)
                } else {
                    setup.from_plan(g, n)
                }
            })
            .unzip();
        let perturbed = CesStrategy { price, grid_trade };
        let gain = leader_objective(&perturbed, scenario, h) - objective;
        max_gain = max_gain.max(gain);
        accepted += 1;
    }
    CertificateReport {
        samples: accepted,
        objective,
        max_gain,
        threshold: 1e-8 * (1.0 + objective.abs()),
    }
}
