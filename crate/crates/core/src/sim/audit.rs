//! Post-run checks of the queue, battery, delay and cost bounds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{MgId, Microgrid, ENERGY_TOL};

use super::{
    offline_oracle, run, Mode, OracleResult, RealizedInputs, RunSummary, ScenarioConfig, SimError,
    Terminal, Violation, ViolationKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub mg_id: Option<MgId>,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AuditCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Fixed-width pass/fail table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let who = c.mg_id.map(|id| id.to_string()).unwrap_or_else(|| "all".into());
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{verdict}  {who:<5} {:<46} {}", c.name, c.detail);
        }
        let _ = writeln!(out, "{}", if self.passed() { "audit: PASS" } else { "audit: FAIL" });
        out
    }
}

fn first_violation<'a>(violations: &'a [Violation], id: MgId, kinds: &[ViolationKind]) -> Option<&'a Violation> {
    violations.iter().find(|v| v.mg_id == id && kinds.contains(&v.kind))
}

/// Checks a finished run against the bounds each microgrid is guaranteed
/// when `V <= V_max`, and the time-average cost against
/// `oracle + A / V` when an oracle result is supplied.
pub fn bound_audit(
    microgrids: &[Microgrid],
    summary: &RunSummary,
    violations: &[Violation],
    oracle: Option<&OracleResult>,
) -> AuditReport {
    let mut checks = Vec::new();
    for mg in microgrids {
        let id = mg.id();
        let p = &mg.params;
        let b = &mg.bounds;
        let Some(s) = summary.microgrids.iter().find(|s| s.mg_id == id) else {
            checks.push(AuditCheck { mg_id: Some(id), name: "present in log".into(), passed: false, detail: String::new() });
            continue;
        };
        let mut push = |name: &str, passed: bool, detail: String| {
            checks.push(AuditCheck { mg_id: Some(id), name: name.into(), passed, detail });
        };
        push(
            "precondition V <= V_max",
            mg.v_within_max(),
            format!("V = {:.6}, V_max = {:.6}", p.v_weight, b.v_max),
        );

        let located = |kinds: &[ViolationKind]| {
            first_violation(violations, id, kinds)
                .map(|v| format!(" (first breach: slot {}, {}, value {:.6})", v.slot, v.mg_id, v.value))
                .unwrap_or_default()
        };
        let q_ok = s.max_demand_queue_kwh <= b.q_max + ENERGY_TOL && first_violation(violations, id, &[ViolationKind::DemandQueue]).is_none();
        push("Q <= Q_max", q_ok, format!("max {:.6} <= {:.6}{}", s.max_demand_queue_kwh, b.q_max, located(&[ViolationKind::DemandQueue])));
        let z_ok = s.max_delay_queue_kwh <= b.z_max + ENERGY_TOL && first_violation(violations, id, &[ViolationKind::DelayQueue]).is_none();
        push("Z <= Z_max", z_ok, format!("max {:.6} <= {:.6}{}", s.max_delay_queue_kwh, b.z_max, located(&[ViolationKind::DelayQueue])));
        let battery_kinds = [ViolationKind::BatteryLow, ViolationKind::BatteryHigh];
        let b_ok = s.min_battery_kwh >= -ENERGY_TOL
            && s.max_battery_kwh <= p.battery_capacity_kwh + ENERGY_TOL
            && first_violation(violations, id, &battery_kinds).is_none();
        push(
            "0 <= B <= B_max",
            b_ok,
            format!(
                "range [{:.6}, {:.6}] within [0, {:.6}]{}",
                s.min_battery_kwh,
                s.max_battery_kwh,
                p.battery_capacity_kwh,
                located(&battery_kinds)
            ),
        );
        let (x_lo, x_hi) = (mg.virtual_battery(s.min_battery_kwh), mg.virtual_battery(s.max_battery_kwh));
        let x_ok = x_lo >= b.x_min(p) - ENERGY_TOL
            && x_hi <= b.x_max(p) + ENERGY_TOL
            && first_violation(violations, id, &[ViolationKind::VirtualBattery]).is_none();
        push(
            "X in [-theta - D_max, B_max - theta - D_max]",
            x_ok,
            format!("range [{x_lo:.6}, {x_hi:.6}] within [{:.6}, {:.6}]{}", b.x_min(p), b.x_max(p), located(&[ViolationKind::VirtualBattery])),
        );
        let age_ok = s.max_job_age as f64 <= b.delta_max_slots && first_violation(violations, id, &[ViolationKind::JobAge]).is_none();
        push(
            "job age <= delta_max",
            age_ok,
            format!("max {} <= {:.6}{}", s.max_job_age, b.delta_max_slots, located(&[ViolationKind::JobAge])),
        );
        push(
            "energy balance",
            first_violation(violations, id, &[ViolationKind::EnergyBalance]).is_none(),
            located(&[ViolationKind::EnergyBalance]),
        );
        if let Some(o) = oracle {
            if let Some(pos) = o.mg_ids.iter().position(|m| *m == id) {
                let gap = b.cost_gap(p);
                let limit = o.time_average_cost[pos] + gap;
                push(
                    "cost <= oracle + A/V",
                    s.time_average_cost <= limit + 1e-9 * limit.abs().max(1.0),
                    format!("{:.6} <= {:.6} + {:.6}", s.time_average_cost, o.time_average_cost[pos], gap),
                );
            }
        }
    }
    AuditReport { checks }
}

/// One point of a `V` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub v_weight: Vec<f64>,
    pub online_cost: Vec<f64>,
    pub oracle_cost: Vec<f64>,
    /// `A / V` per microgrid.
    pub cost_gap: Vec<f64>,
}

impl SweepPoint {
    /// Mean of online minus oracle time-average cost over microgrids.
    pub fn measured_gap(&self) -> f64 {
        let n = self.online_cost.len().max(1) as f64;
        self.online_cost.iter().zip(&self.oracle_cost).map(|(a, b)| a - b).sum::<f64>() / n
    }

    pub fn within_bound(&self) -> bool {
        self.online_cost
            .iter()
            .zip(&self.oracle_cost)
            .zip(&self.cost_gap)
            .all(|((on, off), gap)| *on <= off + gap + 1e-9 * (off + gap).abs().max(1.0))
    }
}

/// Runs the scenario without trading at each `V = fraction * V_max` and
/// compares every run with the clairvoyant benchmark.
pub fn gap_sweep(config: &ScenarioConfig, inputs: &RealizedInputs, fractions: &[f64]) -> Result<Vec<SweepPoint>, SimError> {
    fractions
        .iter()
        .map(|&fraction| {
            let cfg = config.with_v_fraction(fraction)?.with_mode(Mode::NoAuction);
            let online = run(&cfg, inputs)?;
            let oracle = offline_oracle(&cfg, inputs, &Terminal::from_summary(&online.summary))?;
            let mgs = cfg.microgrids()?;
            Ok(SweepPoint {
                fraction,
                v_weight: mgs.iter().map(|m| m.params.v_weight).collect(),
                online_cost: online.summary.microgrids.iter().map(|m| m.time_average_cost).collect(),
                oracle_cost: oracle.time_average_cost,
                cost_gap: mgs.iter().map(|m| m.bounds.cost_gap(&m.params)).collect(),
            })
        })
        .collect()
}
