//! CSV run logs and their reverse, for auditing a run after the fact.

use std::fs::{self, File};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::auction::Side;
use crate::model::MgId;

use super::{
    check_sample, AuditReport, MgSummary, OracleResult, RunOutput, RunSummary, ScenarioConfig, SimError, StateSample,
    Violation, ViolationKind,
};

pub const SLOTS_FILE: &str = "slots.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const AUCTION_FILE: &str = "auction.csv";
pub const AUDIT_FILE: &str = "audit.txt";
pub const CONFIG_FILE: &str = "config.json";
pub const ORACLE_FILE: &str = "oracle.json";

/// Values in the logs carry six decimals; reading them back loses up to
/// half a unit in the last place per value.
pub const LOG_TOL: f64 = 1e-5;

/// One row of `slots.csv`: one microgrid in one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub slot: u64,
    pub mg_id: u32,
    pub battery_kwh: f64,
    pub demand_queue_kwh: f64,
    pub delay_queue_kwh: f64,
    pub virtual_battery_kwh: f64,
    pub job_age: u64,
    pub renewable_kwh: f64,
    pub di_load_kwh: f64,
    pub dt_load_kwh: f64,
    pub grid_price: f64,
    pub sell_price: f64,
    pub sell_quantity_kwh: f64,
    pub buy_price: f64,
    pub buy_quantity_kwh: f64,
    pub bought_kwh: f64,
    pub sold_kwh: f64,
    pub buy_unit_price: f64,
    pub sell_unit_price: f64,
    pub charge_kwh: f64,
    pub discharge_kwh: f64,
    pub serve_dt_kwh: f64,
    pub grid_purchase_kwh: f64,
    pub spill_kwh: f64,
    pub cost: f64,
    pub next_battery_kwh: f64,
    pub next_demand_queue_kwh: f64,
    pub next_delay_queue_kwh: f64,
    pub next_virtual_battery_kwh: f64,
    pub next_job_age: u64,
    pub market_buy_price: f64,
    pub market_sell_price: f64,
    pub market_volume_kwh: f64,
    pub auctioneer_surplus: f64,
}

const SLOT_HEADER: [&str; 34] = [
    "slot",
    "mg_id",
    "battery_kwh",
    "demand_queue_kwh",
    "delay_queue_kwh",
    "virtual_battery_kwh",
    "job_age",
    "renewable_kwh",
    "di_load_kwh",
    "dt_load_kwh",
    "grid_price",
    "sell_price",
    "sell_quantity_kwh",
    "buy_price",
    "buy_quantity_kwh",
    "bought_kwh",
    "sold_kwh",
    "buy_unit_price",
    "sell_unit_price",
    "charge_kwh",
    "discharge_kwh",
    "serve_dt_kwh",
    "grid_purchase_kwh",
    "spill_kwh",
    "cost",
    "next_battery_kwh",
    "next_demand_queue_kwh",
    "next_delay_queue_kwh",
    "next_virtual_battery_kwh",
    "next_job_age",
    "market_buy_price",
    "market_sell_price",
    "market_volume_kwh",
    "auctioneer_surplus",
];

fn fixed(v: f64) -> String {
    // avoid "-0.000000"
    let s = format!("{v:.6}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_owned()
    } else {
        s
    }
}

fn out_err(path: &Path, e: impl std::fmt::Display) -> SimError {
    SimError::Output { path: path.display().to_string(), message: e.to_string() }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, SimError> {
    let file = File::create(path).map_err(|e| out_err(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_slots(path: &Path, output: &RunOutput) -> Result<(), SimError> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| out_err(path, e);
    w.write_record(SLOT_HEADER).map_err(err)?;
    for r in &output.records {
        for m in &r.microgrids {
            let nums = [
                m.state.battery_kwh,
                m.state.demand_queue_kwh,
                m.state.delay_queue_kwh,
                m.state.virtual_battery_kwh,
            ];
            let mut row = vec![r.slot.to_string(), m.mg_id.0.to_string()];
            row.extend(nums.iter().map(|v| fixed(*v)));
            row.push(m.state.max_job_age(r.slot).to_string());
            let nums = [
                m.inputs.renewable_kwh,
                m.inputs.di_load_kwh,
                m.inputs.dt_load_kwh,
                m.inputs.grid_price,
                m.bids.sell_price,
                m.bids.sell_quantity_kwh,
                m.bids.buy_price,
                m.bids.buy_quantity_kwh,
                m.trade.bought_kwh,
                m.trade.sold_kwh,
                m.trade.buy_unit_price,
                m.trade.sell_unit_price,
                m.action.charge_kwh,
                m.action.discharge_kwh,
                m.action.serve_dt_kwh,
                m.action.grid_purchase_kwh,
                m.spill_kwh,
                m.cost,
                m.next_state.battery_kwh,
                m.next_state.demand_queue_kwh,
                m.next_state.delay_queue_kwh,
                m.next_state.virtual_battery_kwh,
            ];
            row.extend(nums.iter().map(|v| fixed(*v)));
            row.push(m.next_state.max_job_age(r.slot + 1).to_string());
            let market = [
                r.market.buy_clearing_price,
                r.market.sell_clearing_price,
                r.market.volume_kwh,
                r.market.auctioneer_surplus,
            ];
            row.extend(market.iter().map(|v| fixed(*v)));
            w.write_record(&row).map_err(err)?;
        }
    }
    w.flush().map_err(|e| out_err(path, e))
}

pub fn write_summary(path: &Path, config: &ScenarioConfig, summary: &RunSummary) -> Result<(), SimError> {
    let mgs = config.microgrids()?;
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| out_err(path, e);
    w.write_record([
        "mg_id",
        "mode",
        "slots",
        "time_average_cost",
        "grid_purchase_kwh",
        "bought_kwh",
        "sold_kwh",
        "spill_kwh",
        "max_demand_queue_kwh",
        "max_delay_queue_kwh",
        "min_battery_kwh",
        "max_battery_kwh",
        "max_job_age",
        "violations",
        "v_weight",
        "v_max",
        "a_const",
        "cost_gap",
    ])
    .map_err(err)?;
    for (s, mg) in summary.microgrids.iter().zip(&mgs) {
        let mut row = vec![s.mg_id.0.to_string(), summary.mode.label().to_owned(), summary.slots.to_string()];
        row.extend(
            [
                s.time_average_cost,
                s.grid_purchase_kwh,
                s.bought_kwh,
                s.sold_kwh,
                s.spill_kwh,
                s.max_demand_queue_kwh,
                s.max_delay_queue_kwh,
                s.min_battery_kwh,
                s.max_battery_kwh,
            ]
            .iter()
            .map(|v| fixed(*v)),
        );
        row.push(s.max_job_age.to_string());
        row.push(s.violations.to_string());
        row.extend(
            [mg.params.v_weight, mg.bounds.v_max, mg.bounds.a_const, mg.bounds.cost_gap(&mg.params)]
                .iter()
                .map(|v| fixed(*v)),
        );
        w.write_record(&row).map_err(err)?;
    }
    let mut row = vec!["all".to_owned(), summary.mode.label().to_owned(), summary.slots.to_string()];
    row.push(fixed(summary.mean_time_average_cost));
    row.push(fixed(summary.total_grid_purchase_kwh));
    row.push(fixed(summary.total_traded_kwh));
    row.push(fixed(summary.total_traded_kwh));
    row.extend(std::iter::repeat_n(String::new(), 5));
    row.push(summary.max_job_age.to_string());
    row.push(summary.violation_count.to_string());
    row.extend(std::iter::repeat_n(String::new(), 4));
    w.write_record(&row).map_err(err)?;
    w.flush().map_err(|e| out_err(path, e))
}

pub fn write_auction(path: &Path, output: &RunOutput) -> Result<(), SimError> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| out_err(path, e);
    w.write_record(["slot", "mg_id", "side", "price", "quantity_kwh", "accepted", "cleared_price", "cleared_quantity_kwh"])
        .map_err(err)?;
    for row in output.records.iter().flat_map(|r| &r.auction_rows) {
        let side = match row.side {
            Side::Buy => "buy",
            Side::Sell => "sell",
        };
        w.write_record([
            row.slot.to_string(),
            row.mg_id.0.to_string(),
            side.to_owned(),
            fixed(row.price),
            fixed(row.quantity),
            row.accepted.to_string(),
            fixed(row.cleared_price),
            fixed(row.cleared_quantity),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| out_err(path, e))
}

/// Writes every artifact of a run into `dir`, creating it if needed.
pub fn write_run(dir: &Path, config: &ScenarioConfig, output: &RunOutput, audit: &AuditReport) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    write_slots(&dir.join(SLOTS_FILE), output)?;
    write_summary(&dir.join(SUMMARY_FILE), config, &output.summary)?;
    write_auction(&dir.join(AUCTION_FILE), output)?;
    let audit_path = dir.join(AUDIT_FILE);
    fs::write(&audit_path, audit.render()).map_err(|e| out_err(&audit_path, e))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, config.to_json()).map_err(|e| out_err(&config_path, e))
}

pub fn write_oracle(dir: &Path, oracle: &OracleResult) -> Result<(), SimError> {
    let path = dir.join(ORACLE_FILE);
    let text = serde_json::to_string_pretty(oracle).expect("oracle result serializes");
    fs::write(&path, text).map_err(|e| out_err(&path, e))
}

pub fn read_oracle(dir: &Path) -> Result<Option<OracleResult>, SimError> {
    let path = dir.join(ORACLE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| out_err(&path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| out_err(&path, e))
}

pub fn read_slot_log(path: &Path) -> Result<Vec<LogRow>, SimError> {
    let file = File::open(path).map_err(|e| out_err(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<LogRow>, _>>()
        .map_err(|e| out_err(path, e))?;
    if rows.is_empty() {
        return Err(out_err(path, "no rows"));
    }
    Ok(rows)
}

/// Rebuilds the run summary and every bound breach from a slot log.
pub fn summarize_log(config: &ScenarioConfig, rows: &[LogRow]) -> Result<(RunSummary, Vec<Violation>), SimError> {
    let mgs = config.microgrids()?;
    let mut summaries: Vec<MgSummary> = mgs
        .iter()
        .map(|mg| MgSummary {
            mg_id: mg.id(),
            min_battery_kwh: f64::INFINITY,
            max_battery_kwh: f64::NEG_INFINITY,
            ..Default::default()
        })
        .collect();
    let mut counts = vec![0usize; mgs.len()];
    let mut violations = Vec::new();
    let mut slots = std::collections::BTreeSet::new();
    let mut traded = 0.0;
    for row in rows {
        let id = MgId(row.mg_id);
        let idx = mgs
            .iter()
            .position(|m| m.id() == id)
            .ok_or_else(|| SimError::Config(format!("log row for unknown {id} at slot {}", row.slot)))?;
        let mg = &mgs[idx];
        if slots.insert(row.slot) {
            traded += row.market_volume_kwh;
        }
        let before = StateSample {
            battery_kwh: row.battery_kwh,
            demand_queue_kwh: row.demand_queue_kwh,
            delay_queue_kwh: row.delay_queue_kwh,
            virtual_battery_kwh: row.virtual_battery_kwh,
            max_job_age: row.job_age,
        };
        let after = StateSample {
            battery_kwh: row.next_battery_kwh,
            demand_queue_kwh: row.next_demand_queue_kwh,
            delay_queue_kwh: row.next_delay_queue_kwh,
            virtual_battery_kwh: row.next_virtual_battery_kwh,
            max_job_age: row.next_job_age,
        };
        violations.extend(check_sample(mg, &before, row.slot, LOG_TOL));
        violations.extend(check_sample(mg, &after, row.slot + 1, LOG_TOL));
        let slack = row.renewable_kwh + row.grid_purchase_kwh + row.discharge_kwh + row.bought_kwh
            - row.di_load_kwh
            - row.serve_dt_kwh
            - row.sold_kwh
            - row.charge_kwh;
        if slack < -LOG_TOL {
            violations.push(Violation { slot: row.slot, mg_id: id, kind: ViolationKind::EnergyBalance, value: slack, limit: 0.0 });
        }
        let s = &mut summaries[idx];
        counts[idx] += 1;
        s.time_average_cost += row.cost;
        s.grid_purchase_kwh += row.grid_purchase_kwh;
        s.bought_kwh += row.bought_kwh;
        s.sold_kwh += row.sold_kwh;
        s.spill_kwh += row.spill_kwh;
        for st in [&before, &after] {
            s.max_demand_queue_kwh = s.max_demand_queue_kwh.max(st.demand_queue_kwh);
            s.max_delay_queue_kwh = s.max_delay_queue_kwh.max(st.delay_queue_kwh);
            s.min_battery_kwh = s.min_battery_kwh.min(st.battery_kwh);
            s.max_battery_kwh = s.max_battery_kwh.max(st.battery_kwh);
            s.max_job_age = s.max_job_age.max(st.max_job_age);
        }
        s.final_battery_kwh = row.next_battery_kwh;
        s.final_demand_queue_kwh = row.next_demand_queue_kwh;
    }
    for (s, n) in summaries.iter_mut().zip(&counts) {
        s.time_average_cost /= (*n).max(1) as f64;
        s.violations = violations.iter().filter(|v| v.mg_id == s.mg_id).count();
    }
    let summary = RunSummary {
        mode: config.mode,
        slots: slots.len(),
        mean_time_average_cost: summaries.iter().map(|s| s.time_average_cost).sum::<f64>() / summaries.len() as f64,
        total_grid_purchase_kwh: summaries.iter().map(|s| s.grid_purchase_kwh).sum(),
        total_traded_kwh: traded,
        violation_count: violations.len(),
        max_job_age: summaries.iter().map(|s| s.max_job_age).max().unwrap_or(0),
        microgrids: summaries,
    };
    Ok((summary, violations))
}
