//! Per-microgrid drift-plus-penalty agent.
//!
//! Each slot a microgrid first prices energy from its backlog (`make_bids`),
//! then, once the auction has fixed its trades, picks charge, discharge,
//! service and grid purchase by minimising
//!
//! ```text
//! X (C - D) - J (Q + Z) + V P G
//! ```
//!
//! subject to the storage, service and energy-balance constraints. The trade
//! payments are fixed by then and drop out of the argmin.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ControlAction, MgId, MgParams, MgState, Microgrid, SlotInputs, ENERGY_TOL};

/// One microgrid's two-sided bid for a slot. A side with zero quantity is
/// absent from the market.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidPair {
    pub mg_id: MgId,
    pub sell_price: f64,
    pub buy_price: f64,
    pub sell_quantity_kwh: f64,
    pub buy_quantity_kwh: f64,
}

impl BidPair {
    pub fn is_seller(&self) -> bool {
        self.sell_quantity_kwh > 0.0
    }

    pub fn is_buyer(&self) -> bool {
        self.buy_quantity_kwh > 0.0
    }
}

/// What the auction assigned to one microgrid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeAllocation {
    pub mg_id: MgId,
    pub bought_kwh: f64,
    pub sold_kwh: f64,
    pub buy_unit_price: f64,
    pub sell_unit_price: f64,
}

impl TradeAllocation {
    pub fn none(mg_id: MgId) -> Self {
        Self { mg_id, bought_kwh: 0.0, sold_kwh: 0.0, buy_unit_price: 0.0, sell_unit_price: 0.0 }
    }

    pub fn is_empty(&self) -> bool {
        self.bought_kwh == 0.0 && self.sold_kwh == 0.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("malformed trade for {id}: {reason}")]
    MalformedTrade { id: MgId, reason: String },
}

/// Per-kWh value of serving backlog now: `(Q + Z) / V`.
pub fn marginal_value(state: &MgState, params: &MgParams) -> f64 {
    (state.demand_queue_kwh + state.delay_queue_kwh) / params.v_weight
}

/// Truthful bids. Both sides are priced at the backlog valuation (the buy
/// side floored at `price_floor`), but quantity is placed on at most one
/// side:
///
/// * a renewable surplus `R - I > 0` is offered when its ask is below the
///   grid price (an ask at or above `P` can never clear);
/// * otherwise the microgrid asks for `J_max - R`, clamped to `[0, Q]`,
///   when its valuation is strictly above its price floor.
pub fn make_bids(state: &MgState, inputs: &SlotInputs, params: &MgParams) -> BidPair {
    let value = marginal_value(state, params);
    let sell_price = value;
    let buy_price = value.max(params.price_floor);
    let surplus = inputs.renewable_kwh - inputs.di_load_kwh;

    let (sell_quantity_kwh, buy_quantity_kwh) = if surplus > 0.0 {
        let offer = if sell_price < inputs.grid_price { surplus } else { 0.0 };
        (offer, 0.0)
    } else if value > params.price_floor {
        let want = (params.serve_rate_max_kwh - inputs.renewable_kwh).clamp(0.0, state.demand_queue_kwh.max(0.0));
        (0.0, want)
    } else {
        (0.0, 0.0)
    };

    BidPair { mg_id: params.id, sell_price, buy_price, sell_quantity_kwh, buy_quantity_kwh }
}

/// `U = P G + beta_hat * bought - alpha_hat * sold`.
pub fn post_trade_settlement(action: &ControlAction, trade: &TradeAllocation, inputs: &SlotInputs) -> f64 {
    inputs.grid_price * action.grid_purchase_kwh + trade.buy_unit_price * trade.bought_kwh
        - trade.sell_unit_price * trade.sold_kwh
}

/// Drift-plus-penalty value of an action, settlement included:
/// `X (C - D) - J (Q + Z) + V U`.
pub fn slot_objective(
    state: &MgState,
    action: &ControlAction,
    trade: &TradeAllocation,
    inputs: &SlotInputs,
    params: &MgParams,
) -> f64 {
    state.virtual_battery_kwh * (action.charge_kwh - action.discharge_kwh)
        - action.serve_dt_kwh * (state.demand_queue_kwh + state.delay_queue_kwh)
        + params.v_weight * post_trade_settlement(action, trade, inputs)
}

fn validate_trade(trade: &TradeAllocation, params: &MgParams) -> Result<(), ControllerError> {
    let malformed = |reason: String| Err(ControllerError::MalformedTrade { id: params.id, reason });
    if trade.mg_id != params.id {
        return malformed(format!("allocation addressed to {}", trade.mg_id));
    }
    let fields = [trade.bought_kwh, trade.sold_kwh, trade.buy_unit_price, trade.sell_unit_price];
    if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return malformed("negative or non-finite field".into());
    }
    if trade.bought_kwh > 0.0 && trade.sold_kwh > 0.0 {
        return malformed("both bought and sold in one slot".into());
    }
    Ok(())
}

/// A three-variable LP `min c.y  s.t.  A y <= b`, solved by enumerating the
/// vertices of a bounded polytope.
struct VertexLp {
    cost: [f64; 3],
    rows: Vec<([f64; 3], f64)>,
}

impl VertexLp {
    fn solve(&self) -> Option<[f64; 3]> {
        let scale = 1.0 + self.rows.iter().map(|(_, b)| b.abs()).fold(0.0, f64::max);
        let tol = 1e-9 * scale;
        let n = self.rows.len();
        let mut best: Option<([f64; 3], f64)> = None;
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let Some(y) = solve3([self.rows[i], self.rows[j], self.rows[k]]) else { continue };
                    if !self.rows.iter().all(|(a, b)| dot(a, &y) <= b + tol) {
                        continue;
                    }
                    let value = dot(&self.cost, &y);
                    let better = match &best {
                        None => true,
                        Some((incumbent, best_value)) => {
                            value < best_value - tol
                                || (value <= best_value + tol && y.iter().sum::<f64>() < incumbent.iter().sum::<f64>() - tol)
                        }
                    };
                    if better {
                        best = Some((y, value));
                    }
                }
            }
        }
        best.map(|(y, _)| y)
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Solves the 3x3 system whose rows hold with equality, by Gaussian
/// elimination with partial pivoting.
fn solve3(rows: [([f64; 3], f64); 3]) -> Option<[f64; 3]> {
    let mut m = [[0.0; 4]; 3];
    for (r, (a, b)) in rows.iter().enumerate() {
        m[r] = [a[0], a[1], a[2], *b];
    }
    for col in 0..3 {
        let pivot = (col..3).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for r in 0..3 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..4 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    Some([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

/// Exact minimiser of the per-slot program for fixed trades.
///
/// The exclusivity constraint `C D = 0` is handled by solving the charging
/// branch (`D = 0`) and the discharging branch (`C = 0`) separately; each is
/// an LP over three variables solved by vertex enumeration.
pub fn solve_slot_program(
    state: &MgState,
    inputs: &SlotInputs,
    trade: &TradeAllocation,
    mg: &Microgrid,
) -> Result<ControlAction, ControllerError> {
    let p = &mg.params;
    validate_trade(trade, p)?;

    let x = state.virtual_battery_kwh;
    let backlog = state.demand_queue_kwh + state.delay_queue_kwh;
    let grid_cost = p.v_weight * inputs.grid_price;
    let charge_cap = (p.battery_capacity_kwh - state.battery_kwh).min(p.charge_rate_max_kwh).max(0.0);
    let discharge_cap = state.battery_kwh.min(p.discharge_rate_max_kwh).max(0.0);
    let serve_cap = p.serve_rate_max_kwh.min(state.demand_queue_kwh).max(0.0);
    let (bought, sold) = (trade.bought_kwh, trade.sold_kwh);
    // any grid purchase beyond total demand is wasted, so this bound never binds at the optimum
    let grid_cap = inputs.di_load_kwh + serve_cap + sold + charge_cap + 1.0;
    // I + J + sold + C <= R + G + D + bought, and C + sold <= R + G + D
    let balance_rhs = inputs.renewable_kwh + bought - inputs.di_load_kwh - sold;
    let own_rhs = inputs.renewable_kwh - sold;

    // y = (storage flow, J, G); storage flow is C in the charging branch, D in the other
    let branch = |storage_cap: f64, sign: f64| VertexLp {
        cost: [sign * x, -backlog, grid_cost],
        rows: vec![
            ([-1.0, 0.0, 0.0], 0.0),
            ([1.0, 0.0, 0.0], storage_cap),
            ([0.0, -1.0, 0.0], 0.0),
            ([0.0, 1.0, 0.0], serve_cap),
            ([0.0, 0.0, -1.0], 0.0),
            ([0.0, 0.0, 1.0], grid_cap),
            ([sign, 1.0, -1.0], balance_rhs),
            ([sign, 0.0, -1.0], own_rhs),
        ],
    };

    let mut candidates = Vec::with_capacity(2);
    if let Some(y) = branch(charge_cap, 1.0).solve() {
        candidates.push(finish(y[0].clamp(0.0, charge_cap), 0.0, y[1].clamp(0.0, serve_cap), inputs, trade));
    }
    if let Some(y) = branch(discharge_cap, -1.0).solve() {
        candidates.push(finish(0.0, y[0].clamp(0.0, discharge_cap), y[1].clamp(0.0, serve_cap), inputs, trade));
    }

    let value = |a: &ControlAction| slot_objective(state, a, trade, inputs, p);
    let tol = 1e-9 * (1.0 + grid_cap * (x.abs() + backlog + grid_cost));
    let action = candidates
        .into_iter()
        .reduce(|best, a| if value(&a) < value(&best) - tol { a } else { best })
        .expect("grid purchases keep both branches feasible");
    Ok(action)
}

/// Fills in the cheapest grid purchase for the chosen flows.
fn finish(charge: f64, discharge: f64, serve: f64, inputs: &SlotInputs, trade: &TradeAllocation) -> ControlAction {
    let deficit = inputs.di_load_kwh + serve + trade.sold_kwh + charge
        - inputs.renewable_kwh
        - discharge
        - trade.bought_kwh;
    let own_deficit = charge + trade.sold_kwh - inputs.renewable_kwh - discharge;
    let grid = deficit.max(own_deficit).max(0.0);
    let snap = |v: f64| if v.abs() < ENERGY_TOL * 1e-3 { 0.0 } else { v };
    ControlAction {
        charge_kwh: snap(charge),
        discharge_kwh: snap(discharge),
        serve_dt_kwh: snap(serve),
        grid_purchase_kwh: snap(grid),
        bought_kwh: trade.bought_kwh,
        sold_kwh: trade.sold_kwh,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MgState, PendingJob, PriceBounds};

    fn params(v: f64) -> MgParams {
        MgParams {
            id: MgId(1),
            battery_capacity_kwh: 100.0,
            charge_rate_max_kwh: 40.0,
            discharge_rate_max_kwh: 40.0,
            serve_rate_max_kwh: 30.0,
            dt_load_max_kwh: 20.0,
            epsilon: 5.0,
            epsilon_max: 5.0,
            price_floor: 1.0,
            v_weight: v,
        }
    }

    fn mg(v: f64) -> Microgrid {
        Microgrid::new(params(v), &PriceBounds::new(1.0, 3.0).unwrap()).unwrap()
    }

    fn state(mg: &Microgrid, battery: f64, q: f64, z: f64) -> MgState {
        let mut s = MgState::new(battery, mg);
        s.demand_queue_kwh = q;
        s.delay_queue_kwh = z;
        if q > 0.0 {
            s.pending_jobs.push_back(PendingJob { enqueued_slot: 0, remaining_kwh: q });
        }
        s
    }

    #[test]
    fn marginal_value_examples() {
        let m = mg(2.0);
        assert_eq!(marginal_value(&state(&m, 0.0, 0.0, 0.0), &m.params), 0.0);
        assert_eq!(marginal_value(&state(&m, 0.0, 10.0, 4.0), &m.params), 7.0);
        let m6 = mg(6.0);
        assert!((marginal_value(&state(&m6, 0.0, 14.0, 14.0), &m6.params) - 14.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn surplus_microgrid_sells() {
        let mut p = params(10.0);
        p.serve_rate_max_kwh = 1500.0;
        let m = Microgrid::new(p, &PriceBounds::new(1.0, 3.0).unwrap()).unwrap();
        let inputs = SlotInputs { renewable_kwh: 300.0, di_load_kwh: 100.0, dt_load_kwh: 0.0, grid_price: 2.0 };
        let bid = make_bids(&state(&m, 0.0, 0.0, 0.0), &inputs, &m.params);
        assert_eq!(bid.sell_price, 0.0);
        assert_eq!(bid.sell_quantity_kwh, 200.0);
        assert_eq!(bid.buy_quantity_kwh, 0.0);
    }

    #[test]
    fn backlogged_microgrid_buys() {
        let mut p = params(10.0);
        p.serve_rate_max_kwh = 150.0;
        p.dt_load_max_kwh = 20.0;
        let m = Microgrid::new(p, &PriceBounds::new(1.0, 3.0).unwrap()).unwrap();
        let inputs = SlotInputs { renewable_kwh: 0.0, di_load_kwh: 50.0, dt_load_kwh: 0.0, grid_price: 2.0 };
        let bid = make_bids(&state(&m, 0.0, 200.0, 100.0), &inputs, &m.params);
        assert_eq!(bid.buy_price, 30.0);
        assert_eq!(bid.buy_quantity_kwh, 150.0);
        assert_eq!(bid.sell_quantity_kwh, 0.0);
    }

    #[test]
    fn price_floor_binds_on_empty_queues() {
        let m = mg(10.0);
        let inputs = SlotInputs { renewable_kwh: 0.0, di_load_kwh: 5.0, dt_load_kwh: 0.0, grid_price: 2.0 };
        let bid = make_bids(&state(&m, 0.0, 0.0, 0.0), &inputs, &m.params);
        assert_eq!(bid.buy_price, 1.0);
        assert!(!bid.is_buyer() && !bid.is_seller());
    }

    #[test]
    fn zero_inputs_give_zero_action() {
        let m = mg(2.0);
        // every queue at zero, including the virtual battery queue X
        let s = state(&m, m.bounds.theta + m.params.discharge_rate_max_kwh, 0.0, 0.0);
        assert_eq!(s.virtual_battery_kwh, 0.0);
        for grid_price in [0.0, 1.0] {
            let inputs = SlotInputs { grid_price, ..Default::default() };
            let a = solve_slot_program(&s, &inputs, &TradeAllocation::none(MgId(1)), &m).unwrap();
            assert_eq!(a, ControlAction::default());
        }
    }

    #[test]
    fn negative_virtual_queue_charges_from_surplus() {
        let m = mg(2.0);
        let s = state(&m, 10.0, 0.0, 0.0);
        assert!(s.virtual_battery_kwh < 0.0);
        let inputs = SlotInputs { renewable_kwh: 50.0, di_load_kwh: 10.0, dt_load_kwh: 0.0, grid_price: 3.0 };
        let a = solve_slot_program(&s, &inputs, &TradeAllocation::none(MgId(1)), &m).unwrap();
        assert!(a.charge_kwh > 0.0);
        assert_eq!(a.discharge_kwh, 0.0);
        a.check(&s, &m.params, &inputs).unwrap();
    }

    #[test]
    fn grid_covers_exact_deficit_when_queues_empty() {
        let m = mg(2.0);
        // X > 0 needs B > theta + D_max = 2*3 + 20 + 5 + 40 = 71
        let s = state(&m, 90.0, 0.0, 0.0);
        assert!(s.virtual_battery_kwh > 0.0);
        let inputs = SlotInputs { renewable_kwh: 5.0, di_load_kwh: 30.0, dt_load_kwh: 0.0, grid_price: 3.0 };
        let a = solve_slot_program(&s, &inputs, &TradeAllocation::none(MgId(1)), &m).unwrap();
        assert_eq!(a.serve_dt_kwh, 0.0);
        assert_eq!(a.charge_kwh, 0.0);
        // discharge is rewarded while X > 0, and covers the load before any grid energy
        assert!(a.discharge_kwh > 0.0);
        let expected_grid = (30.0 - 5.0 - a.discharge_kwh).max(0.0);
        assert!((a.grid_purchase_kwh - expected_grid).abs() < 1e-9);
    }

    #[test]
    fn settlement_examples() {
        let id = MgId(1);
        let inputs = SlotInputs { grid_price: 0.05, ..Default::default() };
        let grid_only = ControlAction { grid_purchase_kwh: 100.0, ..Default::default() };
        assert!((post_trade_settlement(&grid_only, &TradeAllocation::none(id), &inputs) - 5.0).abs() < 1e-12);

        let buy = TradeAllocation { bought_kwh: 50.0, buy_unit_price: 2.0, ..TradeAllocation::none(id) };
        assert_eq!(post_trade_settlement(&ControlAction::default(), &buy, &inputs), 100.0);

        let sell = TradeAllocation { sold_kwh: 80.0, sell_unit_price: 1.5, ..TradeAllocation::none(id) };
        assert_eq!(post_trade_settlement(&ControlAction::default(), &sell, &inputs), -120.0);
    }

    #[test]
    fn malformed_trade_is_rejected() {
        let m = mg(2.0);
        let s = state(&m, 0.0, 0.0, 0.0);
        let inputs = SlotInputs { grid_price: 1.0, ..Default::default() };
        let both = TradeAllocation { bought_kwh: 1.0, sold_kwh: 1.0, ..TradeAllocation::none(MgId(1)) };
        assert!(solve_slot_program(&s, &inputs, &both, &m).is_err());
        assert!(solve_slot_program(&s, &inputs, &TradeAllocation::none(MgId(9)), &m).is_err());
    }

    #[test]
    fn bought_energy_never_charges_battery() {
        let m = mg(2.0);
        let s = state(&m, 0.0, 10.0, 0.0);
        let inputs = SlotInputs { renewable_kwh: 0.0, di_load_kwh: 0.0, dt_load_kwh: 0.0, grid_price: 3.0 };
        let trade = TradeAllocation { bought_kwh: 10.0, buy_unit_price: 1.5, ..TradeAllocation::none(MgId(1)) };
        let a = solve_slot_program(&s, &inputs, &trade, &m).unwrap();
        a.check(&s, &m.params, &inputs).unwrap();
        assert!(a.charge_kwh <= a.grid_purchase_kwh + 1e-9);
    }
}
