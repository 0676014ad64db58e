//! Microgrid domain types and per-slot queue dynamics.
//!
//! Every quantity of energy is in kWh per one-hour slot. Prices are in
//! currency units per kWh; the bundled scenarios use cents.
//!
//! Per-slot dynamics for microgrid `i`:
//!
//! ```text
//! B(t+1) = B(t) - D(t) + C(t)                      battery
//! Q(t+1) = max(Q(t) - J(t), 0) + T(t)              delay-tolerant backlog
//! Z(t+1) = max(Z(t) - J(t), 0) + eps * 1{Q(t) > 0}  delay-aware virtual queue
//! X(t)   = B(t) - Theta - D_max                    shifted battery queue
//! ```

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance (kWh) used when checking action feasibility and
/// queue invariants.
pub const ENERGY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MgId(pub u32);

impl fmt::Display for MgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MG{}", self.0)
    }
}

/// Static parameters of one microgrid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgParams {
    pub id: MgId,
    pub battery_capacity_kwh: f64,
    pub charge_rate_max_kwh: f64,
    pub discharge_rate_max_kwh: f64,
    /// Largest energy that can be routed to delay-tolerant jobs in one slot.
    pub serve_rate_max_kwh: f64,
    /// Upper bound on delay-tolerant arrivals per slot.
    pub dt_load_max_kwh: f64,
    /// Growth of the delay-aware queue per slot while backlog exists.
    pub epsilon: f64,
    pub epsilon_max: f64,
    /// Lowest price the microgrid will pay for auction energy.
    pub price_floor: f64,
    /// Cost weight of the drift-plus-penalty objective.
    pub v_weight: f64,
}

impl MgParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let energies = [
            ("battery_capacity_kwh", self.battery_capacity_kwh),
            ("charge_rate_max_kwh", self.charge_rate_max_kwh),
            ("discharge_rate_max_kwh", self.discharge_rate_max_kwh),
            ("serve_rate_max_kwh", self.serve_rate_max_kwh),
            ("dt_load_max_kwh", self.dt_load_max_kwh),
            ("epsilon", self.epsilon),
            ("epsilon_max", self.epsilon_max),
            ("price_floor", self.price_floor),
        ];
        for (name, value) in energies {
            if !value.is_finite() || value < 0.0 {
                return Err(self.invalid(format!("{name} must be finite and >= 0, got {value}")));
            }
        }
        if self.charge_rate_max_kwh > self.battery_capacity_kwh {
            return Err(self.invalid(format!(
                "charge rate {} exceeds battery capacity {}",
                self.charge_rate_max_kwh, self.battery_capacity_kwh
            )));
        }
        if self.epsilon > self.epsilon_max {
            return Err(self.invalid(format!(
                "epsilon {} exceeds epsilon_max {}",
                self.epsilon, self.epsilon_max
            )));
        }
        if !(self.v_weight.is_finite() && self.v_weight > 0.0) {
            return Err(self.invalid(format!("v_weight must be > 0, got {}", self.v_weight)));
        }
        Ok(())
    }

    fn invalid(&self, reason: String) -> ModelError {
        ModelError::InvalidParams { id: self.id, reason }
    }
}

/// Range of the macrogrid price over the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBounds {
    pub p_min: f64,
    pub p_max: f64,
}

impl PriceBounds {
    pub fn new(p_min: f64, p_max: f64) -> Result<Self, ModelError> {
        let pb = Self { p_min, p_max };
        pb.validate()?;
        Ok(pb)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.p_min.is_finite() && self.p_max.is_finite()) || self.p_min < 0.0 || self.p_min > self.p_max {
            return Err(ModelError::InvalidPriceBounds { p_min: self.p_min, p_max: self.p_max });
        }
        Ok(())
    }

    pub fn contains(&self, price: f64) -> bool {
        price >= self.p_min && price <= self.p_max
    }
}

/// A delay-tolerant job waiting in the backlog.
///
/// `enqueued_slot` is the first slot in which the job can be served, i.e.
/// one after the slot it arrived in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendingJob {
    pub enqueued_slot: u64,
    pub remaining_kwh: f64,
}

/// Dynamic state of one microgrid at the start of a slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgState {
    pub battery_kwh: f64,
    pub demand_queue_kwh: f64,
    pub delay_queue_kwh: f64,
    pub virtual_battery_kwh: f64,
    pub pending_jobs: VecDeque<PendingJob>,
}

impl MgState {
    /// Empty queues with the given battery level.
    pub fn new(battery_kwh: f64, mg: &Microgrid) -> Self {
        Self {
            battery_kwh,
            demand_queue_kwh: 0.0,
            delay_queue_kwh: 0.0,
            virtual_battery_kwh: mg.virtual_battery(battery_kwh),
            pending_jobs: VecDeque::new(),
        }
    }

    /// Slots the oldest pending job has waited at the start of `slot`.
    pub fn max_job_age(&self, slot: u64) -> u64 {
        self.pending_jobs
            .front()
            .map(|job| slot.saturating_sub(job.enqueued_slot))
            .unwrap_or(0)
    }

    pub fn pending_total_kwh(&self) -> f64 {
        self.pending_jobs.iter().map(|j| j.remaining_kwh).sum()
    }
}

/// Exogenous randomness seen by one microgrid in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SlotInputs {
    pub renewable_kwh: f64,
    pub di_load_kwh: f64,
    pub dt_load_kwh: f64,
    pub grid_price: f64,
}

impl SlotInputs {
    pub fn validate(&self, params: &MgParams, pb: &PriceBounds) -> Result<(), ModelError> {
        let bad = |field: &'static str, value: f64| ModelError::InvalidInputs { id: params.id, field, value };
        for (field, value) in [
            ("renewable_kwh", self.renewable_kwh),
            ("di_load_kwh", self.di_load_kwh),
            ("dt_load_kwh", self.dt_load_kwh),
            ("grid_price", self.grid_price),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(bad(field, value));
            }
        }
        if self.dt_load_kwh > params.dt_load_max_kwh + ENERGY_TOL {
            return Err(bad("dt_load_kwh", self.dt_load_kwh));
        }
        if !pb.contains(self.grid_price) {
            return Err(bad("grid_price", self.grid_price));
        }
        Ok(())
    }
}

/// Decisions of one microgrid in one slot, including its cleared trades.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlAction {
    pub charge_kwh: f64,
    pub discharge_kwh: f64,
    pub serve_dt_kwh: f64,
    pub grid_purchase_kwh: f64,
    pub bought_kwh: f64,
    pub sold_kwh: f64,
}

impl ControlAction {
    /// Supply minus demand. Positive values are spilled renewable energy.
    pub fn balance_slack(&self, inputs: &SlotInputs) -> f64 {
        inputs.renewable_kwh + self.grid_purchase_kwh + self.discharge_kwh + self.bought_kwh
            - inputs.di_load_kwh
            - self.serve_dt_kwh
            - self.sold_kwh
            - self.charge_kwh
    }

    /// Checks every per-slot constraint against the state the action is
    /// applied to.
    pub fn check(&self, state: &MgState, params: &MgParams, inputs: &SlotInputs) -> Result<(), ModelError> {
        let reject = |constraint: ActionConstraint, value: f64, limit: f64| {
            Err(ModelError::RejectedAction { id: params.id, constraint, value, limit })
        };
        let fields = [
            self.charge_kwh,
            self.discharge_kwh,
            self.serve_dt_kwh,
            self.grid_purchase_kwh,
            self.bought_kwh,
            self.sold_kwh,
        ];
        if let Some(&v) = fields.iter().find(|v| !v.is_finite() || **v < -ENERGY_TOL) {
            return reject(ActionConstraint::NonNegative, v, 0.0);
        }
        if self.charge_kwh > ENERGY_TOL && self.discharge_kwh > ENERGY_TOL {
            return reject(ActionConstraint::Exclusivity, self.charge_kwh * self.discharge_kwh, 0.0);
        }
        let charge_limit = (params.battery_capacity_kwh - state.battery_kwh).min(params.charge_rate_max_kwh);
        if self.charge_kwh > charge_limit + ENERGY_TOL {
            return reject(ActionConstraint::ChargeLimit, self.charge_kwh, charge_limit);
        }
        let discharge_limit = state.battery_kwh.min(params.discharge_rate_max_kwh);
        if self.discharge_kwh > discharge_limit + ENERGY_TOL {
            return reject(ActionConstraint::DischargeLimit, self.discharge_kwh, discharge_limit);
        }
        let serve_limit = params.serve_rate_max_kwh.min(state.demand_queue_kwh);
        if self.serve_dt_kwh > serve_limit + ENERGY_TOL {
            return reject(ActionConstraint::ServeLimit, self.serve_dt_kwh, serve_limit);
        }
        let slack = self.balance_slack(inputs);
        if slack < -ENERGY_TOL {
            return reject(ActionConstraint::EnergyBalance, -slack, 0.0);
        }
        // auction energy may only serve load: charging and resale come from other sources
        let own_supply = inputs.renewable_kwh + self.grid_purchase_kwh + self.discharge_kwh;
        if self.charge_kwh + self.sold_kwh > own_supply + ENERGY_TOL {
            return reject(ActionConstraint::PurchasedEnergyUse, self.charge_kwh + self.sold_kwh, own_supply);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionConstraint {
    NonNegative,
    Exclusivity,
    ChargeLimit,
    DischargeLimit,
    ServeLimit,
    EnergyBalance,
    PurchasedEnergyUse,
}

impl fmt::Display for ActionConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::NonNegative => "non-negativity",
            Self::Exclusivity => "charge/discharge exclusivity",
            Self::ChargeLimit => "charge limit min(capacity - B, C_max)",
            Self::DischargeLimit => "discharge limit min(B, D_max)",
            Self::ServeLimit => "service limit min(J_max, Q)",
            Self::EnergyBalance => "energy balance",
            Self::PurchasedEnergyUse => "auction energy used for charging or resale",
        };
        f.write_str(s)
    }
}

/// Constants derived from static parameters and the price range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedBounds {
    pub a_const: f64,
    pub theta: f64,
    pub q_max: f64,
    pub z_max: f64,
    pub delta_max_slots: f64,
    pub v_max: f64,
}

impl DerivedBounds {
    pub fn x_min(&self, params: &MgParams) -> f64 {
        -self.theta - params.discharge_rate_max_kwh
    }

    pub fn x_max(&self, params: &MgParams) -> f64 {
        params.battery_capacity_kwh - self.theta - params.discharge_rate_max_kwh
    }

    /// The `A / V` optimality gap allowance.
    pub fn cost_gap(&self, params: &MgParams) -> f64 {
        self.a_const / params.v_weight
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameters for {id}: {reason}")]
    InvalidParams { id: MgId, reason: String },
    #[error("invalid price bounds [{p_min}, {p_max}]")]
    InvalidPriceBounds { p_min: f64, p_max: f64 },
    #[error("invalid input {field}={value} for {id}")]
    InvalidInputs { id: MgId, field: &'static str, value: f64 },
    #[error("degenerate price range: p_max ({p_max}) must exceed p_min ({p_min})")]
    DegeneratePriceRange { p_min: f64, p_max: f64 },
    #[error("{id}: battery capacity leaves no headroom over T_max + eps_max ({headroom})")]
    NoBatteryHeadroom { id: MgId, headroom: f64 },
    #[error("{id}: epsilon is zero, worst-case delay is unbounded")]
    ZeroEpsilon { id: MgId },
    #[error("{id}: rejected action, {constraint} violated ({value} vs limit {limit})")]
    RejectedAction { id: MgId, constraint: ActionConstraint, value: f64, limit: f64 },
}

/// `A = (eps_max^2 + J_max^2)/2 + max(C_max^2, D_max^2)/2 + (J_max^2 + T_max^2)/2`
pub fn compute_a_const(params: &MgParams) -> f64 {
    let sq = |v: f64| v * v;
    let j2 = sq(params.serve_rate_max_kwh);
    (sq(params.epsilon_max) + j2) / 2.0
        + sq(params.charge_rate_max_kwh).max(sq(params.discharge_rate_max_kwh)) / 2.0
        + (j2 + sq(params.dt_load_max_kwh)) / 2.0
}

/// Largest admissible cost weight: `(B_max - T_max - eps_max) / (P_max - P_min)`.
pub fn compute_v_max(params: &MgParams, pb: &PriceBounds) -> Result<f64, ModelError> {
    let spread = pb.p_max - pb.p_min;
    if !(spread > 0.0) {
        return Err(ModelError::DegeneratePriceRange { p_min: pb.p_min, p_max: pb.p_max });
    }
    let headroom = params.battery_capacity_kwh - params.dt_load_max_kwh - params.epsilon_max;
    if !(headroom > 0.0) {
        return Err(ModelError::NoBatteryHeadroom { id: params.id, headroom });
    }
    Ok(headroom / spread)
}

/// Backlog, delay and virtual-queue bounds implied by the controller.
///
/// Does not require `v_weight <= v_max`; the returned `v_max` lets callers
/// flag the breach.
pub fn compute_bounds(params: &MgParams, pb: &PriceBounds) -> Result<DerivedBounds, ModelError> {
    if !(params.epsilon > 0.0) {
        return Err(ModelError::ZeroEpsilon { id: params.id });
    }
    let v_max = compute_v_max(params, pb)?;
    let vp = params.v_weight * pb.p_max;
    let q_max = vp + params.dt_load_max_kwh;
    let z_max = vp + params.epsilon_max;
    Ok(DerivedBounds {
        a_const: compute_a_const(params),
        theta: vp + params.dt_load_max_kwh + params.epsilon_max,
        q_max,
        z_max,
        delta_max_slots: (q_max + z_max) / params.epsilon,
        v_max,
    })
}

/// Parameters together with their derived constants. `theta` is fixed here,
/// at construction, and never recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Microgrid {
    pub params: MgParams,
    pub bounds: DerivedBounds,
}

impl Microgrid {
    pub fn new(params: MgParams, pb: &PriceBounds) -> Result<Self, ModelError> {
        params.validate()?;
        pb.validate()?;
        let bounds = compute_bounds(&params, pb)?;
        Ok(Self { params, bounds })
    }

    pub fn id(&self) -> MgId {
        self.params.id
    }

    pub fn virtual_battery(&self, battery_kwh: f64) -> f64 {
        battery_kwh - self.bounds.theta - self.params.discharge_rate_max_kwh
    }

    /// Battery level that puts the virtual queue at zero, clipped to the
    /// physical capacity.
    pub fn neutral_battery_level(&self) -> f64 {
        (self.bounds.theta + self.params.discharge_rate_max_kwh).min(self.params.battery_capacity_kwh)
    }

    pub fn v_within_max(&self) -> bool {
        self.params.v_weight <= self.bounds.v_max
    }
}

/// `B' = B - D + C`. Rejects actions that break the storage constraints.
pub fn battery_step(state: &MgState, action: &ControlAction, mg: &Microgrid) -> Result<MgState, ModelError> {
    let p = &mg.params;
    let reject = |constraint, value, limit| Err(ModelError::RejectedAction { id: p.id, constraint, value, limit });
    if action.charge_kwh < -ENERGY_TOL || action.discharge_kwh < -ENERGY_TOL {
        return reject(ActionConstraint::NonNegative, action.charge_kwh.min(action.discharge_kwh), 0.0);
    }
    if action.charge_kwh > ENERGY_TOL && action.discharge_kwh > ENERGY_TOL {
        return reject(ActionConstraint::Exclusivity, action.charge_kwh * action.discharge_kwh, 0.0);
    }
    let charge_limit = (p.battery_capacity_kwh - state.battery_kwh).min(p.charge_rate_max_kwh);
    if action.charge_kwh > charge_limit + ENERGY_TOL {
        return reject(ActionConstraint::ChargeLimit, action.charge_kwh, charge_limit);
    }
    let discharge_limit = state.battery_kwh.min(p.discharge_rate_max_kwh);
    if action.discharge_kwh > discharge_limit + ENERGY_TOL {
        return reject(ActionConstraint::DischargeLimit, action.discharge_kwh, discharge_limit);
    }
    let battery = (state.battery_kwh - action.discharge_kwh + action.charge_kwh).clamp(0.0, p.battery_capacity_kwh);
    Ok(MgState {
        battery_kwh: battery,
        virtual_battery_kwh: mg.virtual_battery(battery),
        ..state.clone()
    })
}

/// `Q' = max(Q - J, 0) + T`, serving pending jobs first-in first-out.
/// Arrivals of `slot` become serviceable in `slot + 1`.
pub fn demand_queue_step(state: &MgState, action: &ControlAction, inputs: &SlotInputs, slot: u64) -> MgState {
    let mut jobs = state.pending_jobs.clone();
    let mut budget = action.serve_dt_kwh.max(0.0);
    while budget > 0.0 {
        let Some(front) = jobs.front_mut() else { break };
        if front.remaining_kwh <= budget + ENERGY_TOL * 1e-3 {
            budget -= front.remaining_kwh;
            jobs.pop_front();
        } else {
            front.remaining_kwh -= budget;
            budget = 0.0;
        }
    }
    let mut queue = (state.demand_queue_kwh - action.serve_dt_kwh).max(0.0);
    if jobs.is_empty() {
        queue = 0.0;
    }
    if inputs.dt_load_kwh > 0.0 {
        jobs.push_back(PendingJob { enqueued_slot: slot + 1, remaining_kwh: inputs.dt_load_kwh });
        queue += inputs.dt_load_kwh;
    }
    MgState { demand_queue_kwh: queue, pending_jobs: jobs, ..state.clone() }
}

/// `Z' = max(Z - J, 0) + eps * 1{Q > 0}` with `Q` taken from `state`, i.e.
/// before this slot's arrivals.
pub fn delay_queue_step(state: &MgState, action: &ControlAction, params: &MgParams) -> MgState {
    let backlog = if state.demand_queue_kwh > 0.0 { params.epsilon } else { 0.0 };
    MgState {
        delay_queue_kwh: (state.delay_queue_kwh - action.serve_dt_kwh).max(0.0) + backlog,
        ..state.clone()
    }
}

/// Applies all three queue updates for one slot.
pub fn advance(
    state: &MgState,
    action: &ControlAction,
    inputs: &SlotInputs,
    slot: u64,
    mg: &Microgrid,
) -> Result<MgState, ModelError> {
    let next = battery_step(state, action, mg)?;
    let next = delay_queue_step(&next, action, &mg.params);
    Ok(demand_queue_step(&next, action, inputs, slot))
}
