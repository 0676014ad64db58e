//! Clairvoyant full-horizon benchmark without trading.

use microlp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem, Variable};
use serde::{Deserialize, Serialize};

use crate::model::{MgId, Microgrid, SlotInputs};

use super::{RealizedInputs, RunSummary, ScenarioConfig, SimError};

pub const ORACLE_MAX_SLOTS: usize = 48;
pub const ORACLE_MAX_MICROGRIDS: usize = 3;

/// End-of-horizon state the benchmark must match or beat, so that it cannot
/// win by leaving demand unserved or draining the battery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub max_demand_queue_kwh: f64,
    pub min_battery_kwh: f64,
}

impl Terminal {
    /// Terminal targets taken from a finished online run.
    pub fn from_summary(summary: &RunSummary) -> Vec<Terminal> {
        summary
            .microgrids
            .iter()
            .map(|m| Terminal { max_demand_queue_kwh: m.final_demand_queue_kwh, min_battery_kwh: m.final_battery_kwh })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub mg_ids: Vec<MgId>,
    pub time_average_cost: Vec<f64>,
}

impl OracleResult {
    pub fn mean_time_average_cost(&self) -> f64 {
        self.time_average_cost.iter().sum::<f64>() / self.time_average_cost.len().max(1) as f64
    }
}

/// Minimum time-average grid cost of each microgrid when every input of the
/// horizon is known in advance. One linear program per microgrid over all
/// slots' `(C, D, J, G)`, with the battery and demand-queue dynamics as
/// constraints.
///
/// Simultaneous charge and discharge is allowed: only `C - D` enters the
/// dynamics and the energy balance, so any such point has a non-overlapping
/// twin with the same cost and the relaxation does not lower the optimum.
pub fn offline_oracle(
    config: &ScenarioConfig,
    inputs: &RealizedInputs,
    terminal: &[Terminal],
) -> Result<OracleResult, SimError> {
    let mgs = config.microgrids()?;
    let slots = config.horizon_slots;
    if slots > ORACLE_MAX_SLOTS || mgs.len() > ORACLE_MAX_MICROGRIDS {
        return Err(SimError::Oracle(format!(
            "{} microgrids over {slots} slots exceeds the limit of {ORACLE_MAX_MICROGRIDS} over {ORACLE_MAX_SLOTS}",
            mgs.len()
        )));
    }
    if terminal.len() != mgs.len() || inputs.per_mg.len() != mgs.len() || inputs.slot_count() < slots {
        return Err(SimError::Oracle("inputs or terminal targets do not match the scenario".into()));
    }
    let mut time_average_cost = Vec::with_capacity(mgs.len());
    for (i, mg) in mgs.iter().enumerate() {
        let cost = solve_single(mg, config.initial_battery(i, mg), &inputs.per_mg[i][..slots], &terminal[i])?;
        time_average_cost.push(cost / slots as f64);
    }
    Ok(OracleResult { mg_ids: mgs.iter().map(Microgrid::id).collect(), time_average_cost })
}

struct SlotVars {
    charge: Variable,
    discharge: Variable,
    serve: Variable,
    grid: Variable,
}

fn solve_single(mg: &Microgrid, battery0: f64, inputs: &[SlotInputs], terminal: &Terminal) -> Result<f64, SimError> {
    let p = &mg.params;
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<SlotVars> = inputs
        .iter()
        .map(|inp| SlotVars {
            charge: lp.add_var(0.0, (0.0, p.charge_rate_max_kwh)),
            discharge: lp.add_var(0.0, (0.0, p.discharge_rate_max_kwh)),
            serve: lp.add_var(0.0, (0.0, p.serve_rate_max_kwh)),
            grid: lp.add_var(inp.grid_price, (0.0, f64::INFINITY)),
        })
        .collect();

    // net battery change and cumulative service before the current slot
    let mut net = LinearExpr::empty();
    let mut served = LinearExpr::empty();
    let mut net_terms: Vec<(Variable, f64)> = Vec::new();
    let mut served_terms: Vec<(Variable, f64)> = Vec::new();
    let mut arrived = 0.0;
    for (v, inp) in vars.iter().zip(inputs) {
        // D_t <= B_t
        let mut expr: Vec<(Variable, f64)> = net_terms.iter().map(|(x, c)| (*x, -c)).collect();
        expr.push((v.discharge, 1.0));
        lp.add_constraint(expr, ComparisonOp::Le, battery0);
        // C_t <= B_max - B_t
        let mut expr = net_terms.clone();
        expr.push((v.charge, 1.0));
        lp.add_constraint(expr, ComparisonOp::Le, p.battery_capacity_kwh - battery0);
        // J_t <= Q_t
        let mut expr = served_terms.clone();
        expr.push((v.serve, 1.0));
        lp.add_constraint(expr, ComparisonOp::Le, arrived);
        // I + J + C <= R + G + D
        lp.add_constraint(
            [(v.serve, 1.0), (v.charge, 1.0), (v.discharge, -1.0), (v.grid, -1.0)],
            ComparisonOp::Le,
            inp.renewable_kwh - inp.di_load_kwh,
        );
        net_terms.push((v.charge, 1.0));
        net_terms.push((v.discharge, -1.0));
        served_terms.push((v.serve, 1.0));
        arrived += inp.dt_load_kwh;
    }
    net.extend(net_terms.iter().copied());
    served.extend(served_terms.iter().copied());
    lp.add_constraint(served, ComparisonOp::Ge, arrived - terminal.max_demand_queue_kwh);
    lp.add_constraint(net, ComparisonOp::Ge, terminal.min_battery_kwh - battery0);

    let solution = lp
        .solve()
        .map_err(|e| SimError::Oracle(format!("{}: {e}", p.id)))?
        .into_solution()
        .map_err(|e| SimError::Oracle(format!("{}: {:?}", p.id, e.termination_reason())))?;
    Ok(solution.objective())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MgParams, PriceBounds};
    use crate::sim::{materialize, run, InputsConfig, LoadSource, Mode, SeriesSource};
    use std::path::Path;

    fn config(slots: usize, renewable: f64, di: f64, dt: f64, price: f64) -> ScenarioConfig {
        ScenarioConfig {
            name: "oracle".into(),
            mg_params: vec![MgParams {
                id: MgId(1),
                battery_capacity_kwh: 100.0,
                charge_rate_max_kwh: 50.0,
                discharge_rate_max_kwh: 50.0,
                serve_rate_max_kwh: 50.0,
                dt_load_max_kwh: 20.0,
                epsilon: 10.0,
                epsilon_max: 10.0,
                price_floor: 1.0,
                v_weight: 1.0,
            }],
            price_bounds: PriceBounds { p_min: 1.0, p_max: 5.0 },
            horizon_slots: slots,
            rho1: 1.0,
            rho2: 1.0,
            mode: Mode::NoAuction,
            seed: 0,
            inputs: InputsConfig {
                price: SeriesSource::Constant { value: price },
                renewable: vec![SeriesSource::Constant { value: renewable }],
                loads: vec![LoadSource::Constant { di_kwh: di, dt_kwh: dt }],
            },
            initial_battery_kwh: vec![0.0],
            allow_v_above_max: false,
        }
    }

    fn oracle(cfg: &ScenarioConfig, terminal: Terminal) -> f64 {
        let inputs = materialize(cfg, Path::new(".")).unwrap();
        offline_oracle(cfg, &inputs, &[terminal]).unwrap().time_average_cost[0]
    }

    #[test]
    fn zero_demand_costs_nothing() {
        let cfg = config(4, 0.0, 0.0, 0.0, 3.0);
        assert_eq!(oracle(&cfg, Terminal { max_demand_queue_kwh: 0.0, min_battery_kwh: 0.0 }), 0.0);
    }

    #[test]
    fn two_slot_constant_inputs() {
        // I = 10, R = 4, T = 6 per slot at price 3, empty battery. The
        // demand arriving in slot 0 must be served in slot 1 to empty the
        // queue down to the last arrival: the minimal purchase is
        // 2 * (10 - 4) + 6 = 18 kWh, i.e. 54 over two slots.
        let cfg = config(2, 4.0, 10.0, 6.0, 3.0);
        let cost = oracle(&cfg, Terminal { max_demand_queue_kwh: 6.0, min_battery_kwh: 0.0 });
        assert!((cost - 27.0).abs() < 1e-9, "{cost}");
        // ending with 30 kWh stored costs 30 kWh more
        let cost = oracle(&cfg, Terminal { max_demand_queue_kwh: 6.0, min_battery_kwh: 30.0 });
        assert!((cost - 72.0).abs() < 1e-9, "{cost}");
    }

    #[test]
    fn two_slot_matches_exclusive_brute_force() {
        // Surplus in slot 0, deficit in slot 1, prices differ. Enumerate
        // exclusive integer schedules and compare.
        let mut cfg = config(2, 0.0, 0.0, 0.0, 3.0);
        cfg.inputs.price = SeriesSource::Values { values: vec![2.0, 5.0] };
        cfg.inputs.renewable = vec![SeriesSource::Values { values: vec![30.0, 0.0] }];
        cfg.inputs.loads = vec![LoadSource::Values { di_kwh: vec![5.0, 40.0], dt_kwh: vec![8.0, 0.0] }];
        let inputs = materialize(&cfg, Path::new(".")).unwrap();
        let terminal = Terminal { max_demand_queue_kwh: 0.0, min_battery_kwh: 0.0 };
        let lp = offline_oracle(&cfg, &inputs, &[terminal]).unwrap().time_average_cost[0] * 2.0;

        let s = &inputs.per_mg[0];
        let mut best = f64::INFINITY;
        for c0 in 0..=50 {
            for d1 in 0..=c0 {
                for j1 in 0..=8 {
                    // serve slot-0 arrivals fully by the end
                    if j1 != 8 {
                        continue;
                    }
                    let (c0, d1, j1) = (c0 as f64, d1 as f64, j1 as f64);
                    let g0 = (s[0].di_load_kwh + c0 - s[0].renewable_kwh).max(0.0);
                    let g1 = (s[1].di_load_kwh + j1 - d1 - s[1].renewable_kwh).max(0.0);
                    best = best.min(g0 * s[0].grid_price + g1 * s[1].grid_price);
                }
            }
        }
        assert!((lp - best).abs() < 1e-6, "lp {lp} brute {best}");
    }

    #[test]
    fn online_never_beats_oracle() {
        let mut cfg = config(24, 0.0, 0.0, 0.0, 3.0);
        cfg.inputs.price = SeriesSource::Values { values: (0..24).map(|t| 1.0 + (t % 5) as f64).collect() };
        cfg.inputs.renewable = vec![SeriesSource::Values { values: (0..24).map(|t| ((t * 7) % 30) as f64).collect() }];
        cfg.inputs.loads =
            vec![LoadSource::Values { di_kwh: vec![12.0; 24], dt_kwh: (0..24).map(|t| 10.0 + (t % 3) as f64).collect() }];
        cfg.mg_params[0].v_weight = 5.0;
        let inputs = materialize(&cfg, Path::new(".")).unwrap();
        let online = run(&cfg, &inputs).unwrap();
        let bound = offline_oracle(&cfg, &inputs, &Terminal::from_summary(&online.summary)).unwrap();
        assert!(online.summary.microgrids[0].time_average_cost >= bound.time_average_cost[0] - 1e-9);
    }

    #[test]
    fn scale_limits() {
        let cfg = config(49, 0.0, 0.0, 0.0, 3.0);
        let inputs = materialize(&cfg, Path::new(".")).unwrap();
        let t = Terminal { max_demand_queue_kwh: 0.0, min_battery_kwh: 0.0 };
        assert!(matches!(offline_oracle(&cfg, &inputs, &[t]), Err(SimError::Oracle(_))));
    }
}
