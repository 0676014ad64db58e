//! Slot-by-slot simulation of interconnected microgrids.

mod audit;
mod config;
mod oracle;
mod output;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{self, AuctionError, OrderBook};
use crate::controller::{self, BidPair, ControllerError, TradeAllocation};
use crate::ingest::IngestError;
use crate::model::{self, ControlAction, MgId, MgState, Microgrid, ModelError, SlotInputs, ENERGY_TOL};

pub use audit::{bound_audit, gap_sweep, AuditCheck, AuditReport, SweepPoint};
pub use config::{materialize, InputsConfig, LoadSource, Mode, RealizedInputs, ScenarioConfig, SeriesSource};
pub use oracle::{offline_oracle, OracleResult, Terminal, ORACLE_MAX_MICROGRIDS, ORACLE_MAX_SLOTS};
pub use output::{
    read_oracle, read_slot_log, summarize_log, write_oracle, write_run, LogRow, AUCTION_FILE, AUDIT_FILE, CONFIG_FILE,
    LOG_TOL, ORACLE_FILE, SLOTS_FILE, SUMMARY_FILE,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{what} covers {len} slots, horizon is {horizon}")]
    TraceTooShort { what: String, len: usize, horizon: usize },
    #[error("slot {slot}, {id}: {source}")]
    Controller { slot: u64, id: MgId, source: ControllerError },
    #[error("slot {slot}: {source}")]
    Auction { slot: u64, source: AuctionError },
    #[error("slot {slot}, {id}: {source}")]
    Action { slot: u64, id: MgId, source: ModelError },
    #[error("offline oracle: {0}")]
    Oracle(String),
    #[error("{path}: {message}")]
    Output { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DemandQueue,
    DelayQueue,
    BatteryLow,
    BatteryHigh,
    VirtualBattery,
    JobAge,
    EnergyBalance,
}

impl ViolationKind {
    pub fn label(self) -> &'static str {
        match self {
            ViolationKind::DemandQueue => "Q <= Q_max",
            ViolationKind::DelayQueue => "Z <= Z_max",
            ViolationKind::BatteryLow => "B >= 0",
            ViolationKind::BatteryHigh => "B <= B_max",
            ViolationKind::VirtualBattery => "X in [-theta - D_max, B_max - theta - D_max]",
            ViolationKind::JobAge => "job age <= delta_max",
            ViolationKind::EnergyBalance => "energy balance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub slot: u64,
    pub mg_id: MgId,
    pub kind: ViolationKind,
    pub value: f64,
    pub limit: f64,
}

/// Observed quantities of one microgrid at the start of a slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateSample {
    pub battery_kwh: f64,
    pub demand_queue_kwh: f64,
    pub delay_queue_kwh: f64,
    pub virtual_battery_kwh: f64,
    pub max_job_age: u64,
}

impl StateSample {
    pub fn of(state: &MgState, slot: u64) -> Self {
        Self {
            battery_kwh: state.battery_kwh,
            demand_queue_kwh: state.demand_queue_kwh,
            delay_queue_kwh: state.delay_queue_kwh,
            virtual_battery_kwh: state.virtual_battery_kwh,
            max_job_age: state.max_job_age(slot),
        }
    }
}

/// Queue, battery and delay bounds on a state entering `slot`.
/// `tol` absorbs rounding in the observed values.
pub fn check_sample(mg: &Microgrid, s: &StateSample, slot: u64, tol: f64) -> Vec<Violation> {
    let p = &mg.params;
    let b = &mg.bounds;
    let mut out = Vec::new();
    let mut check = |ok: bool, kind, value: f64, limit: f64| {
        if !ok {
            out.push(Violation { slot, mg_id: p.id, kind, value, limit });
        }
    };
    check(s.demand_queue_kwh <= b.q_max + tol, ViolationKind::DemandQueue, s.demand_queue_kwh, b.q_max);
    check(s.delay_queue_kwh <= b.z_max + tol, ViolationKind::DelayQueue, s.delay_queue_kwh, b.z_max);
    check(s.battery_kwh >= -tol, ViolationKind::BatteryLow, s.battery_kwh, 0.0);
    check(
        s.battery_kwh <= p.battery_capacity_kwh + tol,
        ViolationKind::BatteryHigh,
        s.battery_kwh,
        p.battery_capacity_kwh,
    );
    let x = s.virtual_battery_kwh;
    let (x_min, x_max) = (b.x_min(p), b.x_max(p));
    check(
        x >= x_min - tol && x <= x_max + tol,
        ViolationKind::VirtualBattery,
        x,
        if x < x_min { x_min } else { x_max },
    );
    let age = s.max_job_age as f64;
    check(age <= b.delta_max_slots, ViolationKind::JobAge, age, b.delta_max_slots);
    out
}

pub fn check_state(mg: &Microgrid, state: &MgState, slot: u64) -> Vec<Violation> {
    check_sample(mg, &StateSample::of(state, slot), slot, ENERGY_TOL)
}

/// What one microgrid saw and did in one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgSlotRecord {
    pub mg_id: MgId,
    /// State at the start of the slot.
    pub state: MgState,
    pub inputs: SlotInputs,
    pub bids: BidPair,
    pub trade: TradeAllocation,
    pub action: ControlAction,
    /// Settlement `P G + beta_hat bought - alpha_hat sold`.
    pub cost: f64,
    /// Renewable energy left unused by the energy balance.
    pub spill_kwh: f64,
    /// State at the start of the next slot.
    pub next_state: MgState,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MarketRecord {
    pub buy_clearing_price: f64,
    pub sell_clearing_price: f64,
    pub volume_kwh: f64,
    pub auctioneer_surplus: f64,
    pub welfare: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: u64,
    pub microgrids: Vec<MgSlotRecord>,
    pub market: MarketRecord,
    /// Per-bid auction outcome; empty when the market is off.
    pub auction_rows: Vec<auction::AuditRow>,
    pub violations: Vec<Violation>,
}

/// Microgrids and their current states.
#[derive(Debug, Clone)]
pub struct World {
    pub microgrids: Vec<Microgrid>,
    pub states: Vec<MgState>,
    pub slot: u64,
    pub mode: Mode,
    pub rho1: f64,
    pub rho2: f64,
}

impl World {
    pub fn new(config: &ScenarioConfig) -> Result<Self, SimError> {
        let microgrids = config.microgrids()?;
        let states = microgrids
            .iter()
            .enumerate()
            .map(|(i, mg)| MgState::new(config.initial_battery(i, mg), mg))
            .collect();
        Ok(Self { microgrids, states, slot: 0, mode: config.mode, rho1: config.rho1, rho2: config.rho2 })
    }

    /// Runs one slot: bids, clearing, per-microgrid control, queue updates.
    pub fn step(&mut self, inputs: &[SlotInputs]) -> Result<SlotRecord, SimError> {
        let slot = self.slot;
        assert_eq!(inputs.len(), self.microgrids.len(), "one input per microgrid");

        let bids: Vec<BidPair> = self
            .microgrids
            .iter()
            .zip(&self.states)
            .zip(inputs)
            .map(|((mg, state), inp)| controller::make_bids(state, inp, &mg.params))
            .collect();

        let (trades, market, auction_rows) = match self.mode {
            Mode::NoAuction => {
                let trades: Vec<_> = self.microgrids.iter().map(|mg| TradeAllocation::none(mg.id())).collect();
                (trades, MarketRecord::default(), Vec::new())
            }
            Mode::WithAuction => {
                let auction_err = |source| SimError::Auction { slot, source };
                let book = OrderBook::from_bid_pairs(&bids, self.rho1, self.rho2).map_err(auction_err)?;
                // every microgrid faces the same grid price
                let outcome = auction::clear(&book, inputs[0].grid_price);
                let surplus = auction::budget_check(&outcome).map_err(auction_err)?;
                let trades: Vec<_> = self.microgrids.iter().map(|mg| outcome.allocation_for(mg.id())).collect();
                let market = MarketRecord {
                    buy_clearing_price: outcome.buy_clearing_price,
                    sell_clearing_price: outcome.sell_clearing_price,
                    volume_kwh: outcome.volume_kwh(),
                    auctioneer_surplus: surplus,
                    welfare: outcome.welfare,
                };
                (trades, market, auction::audit_rows(slot, &book, &outcome))
            }
        };

        let mut records = Vec::with_capacity(self.microgrids.len());
        let mut violations = Vec::new();
        for (((mg, state), inp), (bid, trade)) in
            self.microgrids.iter().zip(&mut self.states).zip(inputs).zip(bids.into_iter().zip(trades))
        {
            let id = mg.id();
            let action = controller::solve_slot_program(state, inp, &trade, mg)
                .map_err(|source| SimError::Controller { slot, id, source })?;
            action.check(state, &mg.params, inp).map_err(|source| SimError::Action { slot, id, source })?;
            let spill_kwh = action.balance_slack(inp);
            if spill_kwh < -ENERGY_TOL {
                violations.push(Violation { slot, mg_id: id, kind: ViolationKind::EnergyBalance, value: spill_kwh, limit: 0.0 });
            }
            let next = model::advance(state, &action, inp, slot, mg).map_err(|source| SimError::Action { slot, id, source })?;
            violations.extend(check_state(mg, &next, slot + 1));
            records.push(MgSlotRecord {
                mg_id: id,
                state: std::mem::replace(state, next.clone()),
                inputs: *inp,
                bids: bid,
                cost: controller::post_trade_settlement(&action, &trade, inp),
                trade,
                action,
                spill_kwh: spill_kwh.max(0.0),
                next_state: next,
            });
        }
        self.slot += 1;
        Ok(SlotRecord { slot, microgrids: records, market, auction_rows, violations })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MgSummary {
    pub mg_id: MgId,
    pub time_average_cost: f64,
    pub grid_purchase_kwh: f64,
    pub bought_kwh: f64,
    pub sold_kwh: f64,
    pub spill_kwh: f64,
    pub max_demand_queue_kwh: f64,
    pub max_delay_queue_kwh: f64,
    pub min_battery_kwh: f64,
    pub max_battery_kwh: f64,
    pub max_job_age: u64,
    pub final_demand_queue_kwh: f64,
    pub final_battery_kwh: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub slots: usize,
    pub microgrids: Vec<MgSummary>,
    /// Mean over microgrids of the per-microgrid time-average cost.
    pub mean_time_average_cost: f64,
    pub total_grid_purchase_kwh: f64,
    pub total_traded_kwh: f64,
    pub violation_count: usize,
    pub max_job_age: u64,
}

impl RunSummary {
    pub fn from_records(mode: Mode, records: &[SlotRecord]) -> Self {
        let n = records.first().map_or(0, |r| r.microgrids.len());
        let slots = records.len();
        let mut per_mg: Vec<MgSummary> = records
            .first()
            .map(|r| {
                r.microgrids
                    .iter()
                    .map(|m| MgSummary {
                        mg_id: m.mg_id,
                        min_battery_kwh: m.state.battery_kwh,
                        max_battery_kwh: m.state.battery_kwh,
                        ..Default::default()
                    })
                    .collect()
            })
            .unwrap_or_default();
        for record in records {
            for (s, m) in per_mg.iter_mut().zip(&record.microgrids) {
                s.time_average_cost += m.cost;
                s.grid_purchase_kwh += m.action.grid_purchase_kwh;
                s.bought_kwh += m.trade.bought_kwh;
                s.sold_kwh += m.trade.sold_kwh;
                s.spill_kwh += m.spill_kwh;
                for st in [&m.state, &m.next_state] {
                    s.max_demand_queue_kwh = s.max_demand_queue_kwh.max(st.demand_queue_kwh);
                    s.max_delay_queue_kwh = s.max_delay_queue_kwh.max(st.delay_queue_kwh);
                    s.min_battery_kwh = s.min_battery_kwh.min(st.battery_kwh);
                    s.max_battery_kwh = s.max_battery_kwh.max(st.battery_kwh);
                }
                s.max_job_age = s.max_job_age.max(m.next_state.max_job_age(record.slot + 1));
                s.final_demand_queue_kwh = m.next_state.demand_queue_kwh;
                s.final_battery_kwh = m.next_state.battery_kwh;
            }
            for v in &record.violations {
                if let Some(s) = per_mg.iter_mut().find(|s| s.mg_id == v.mg_id) {
                    s.violations += 1;
                }
            }
        }
        for s in &mut per_mg {
            s.time_average_cost /= slots.max(1) as f64;
        }
        Self {
            mode,
            slots,
            mean_time_average_cost: per_mg.iter().map(|s| s.time_average_cost).sum::<f64>() / n.max(1) as f64,
            total_grid_purchase_kwh: per_mg.iter().map(|s| s.grid_purchase_kwh).sum(),
            total_traded_kwh: records.iter().map(|r| r.market.volume_kwh).sum(),
            violation_count: records.iter().map(|r| r.violations.len()).sum(),
            max_job_age: per_mg.iter().map(|s| s.max_job_age).max().unwrap_or(0),
            microgrids: per_mg,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<SlotRecord>,
    pub summary: RunSummary,
}

/// Simulates the configured horizon on realized inputs.
pub fn run(config: &ScenarioConfig, inputs: &RealizedInputs) -> Result<RunOutput, SimError> {
    let mut world = World::new(config)?;
    if inputs.per_mg.len() != world.microgrids.len() {
        return Err(SimError::Config(format!(
            "inputs for {} microgrids, scenario has {}",
            inputs.per_mg.len(),
            world.microgrids.len()
        )));
    }
    if inputs.slot_count() < config.horizon_slots {
        return Err(SimError::TraceTooShort {
            what: "realized inputs".into(),
            len: inputs.slot_count(),
            horizon: config.horizon_slots,
        });
    }
    let mut records = Vec::with_capacity(config.horizon_slots);
    for t in 0..config.horizon_slots {
        records.push(world.step(&inputs.slot(t))?);
    }
    let summary = RunSummary::from_records(config.mode, &records);
    Ok(RunOutput { records, summary })
}

/// Percentage by which `with` undercuts `without`.
pub fn cost_reduction_percent(without: f64, with: f64) -> f64 {
    if without.abs() < f64::EPSILON {
        0.0
    } else {
        100.0 * (without - with) / without.abs()
    }
}
