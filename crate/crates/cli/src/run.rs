use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mgtrade_core::sim::{bound_audit, cost_reduction_percent, run as simulate, write_run, Mode, RunSummary, ScenarioConfig};

use crate::{Failure, ModeArg, Scenario};

pub const COMPARISON_FILE: &str = "comparison.csv";

pub fn run(scenario: Scenario, mode: Option<ModeArg>) -> Result<(), Failure> {
    let Scenario { config, inputs, out } = scenario;
    let mode = mode.unwrap_or(match config.mode {
        Mode::WithAuction => ModeArg::Auction,
        Mode::NoAuction => ModeArg::Solo,
    });
    let plan: Vec<(Mode, PathBuf)> = match mode {
        ModeArg::Auction => vec![(Mode::WithAuction, out.clone())],
        ModeArg::Solo => vec![(Mode::NoAuction, out.clone())],
        ModeArg::Both => vec![
            (Mode::WithAuction, out.join(Mode::WithAuction.label())),
            (Mode::NoAuction, out.join(Mode::NoAuction.label())),
        ],
    };

    let mut summaries = Vec::new();
    let mut breaches = Vec::new();
    for (mode, dir) in plan {
        let cfg = config.with_mode(mode);
        let output = simulate(&cfg, &inputs)?;
        let violations: Vec<_> = output.records.iter().flat_map(|r| r.violations.iter().cloned()).collect();
        let report = bound_audit(&cfg.microgrids()?, &output.summary, &violations, None);
        write_run(&dir, &cfg, &output, &report)?;
        print_summary(&output.summary, &dir);
        if !report.passed() {
            breaches.extend(report.failures().map(|c| format!("{}: {} {}", mode.label(), c.name, c.detail)));
        }
        summaries.push(output.summary);
    }
    if let [with, without] = summaries.as_slice() {
        write_comparison(&out, &config, with, without)?;
    }
    if breaches.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(breaches.join("; ")))
    }
}

fn print_summary(s: &RunSummary, dir: &Path) {
    println!(
        "{}: mean time-average cost {:.6}, grid purchase {:.3} kWh, traded {:.3} kWh, violations {}, max job age {} -> {}",
        s.mode.label(),
        s.mean_time_average_cost,
        s.total_grid_purchase_kwh,
        s.total_traded_kwh,
        s.violation_count,
        s.max_job_age,
        dir.display()
    );
}

fn write_comparison(out: &Path, config: &ScenarioConfig, with: &RunSummary, without: &RunSummary) -> anyhow::Result<()> {
    let cost = cost_reduction_percent(without.mean_time_average_cost, with.mean_time_average_cost);
    let grid = cost_reduction_percent(without.total_grid_purchase_kwh, with.total_grid_purchase_kwh);
    println!("{}: cost reduction {cost:.2}%, grid purchase reduction {grid:.2}%", config.name);
    let text = format!(
        "metric,with_auction,no_auction,reduction_percent\n\
         mean_time_average_cost,{:.6},{:.6},{cost:.6}\n\
         total_grid_purchase_kwh,{:.6},{:.6},{grid:.6}\n",
        with.mean_time_average_cost,
        without.mean_time_average_cost,
        with.total_grid_purchase_kwh,
        without.total_grid_purchase_kwh,
    );
    let path = out.join(COMPARISON_FILE);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
