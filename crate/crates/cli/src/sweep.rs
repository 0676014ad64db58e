use std::fmt::Write as _;
use std::fs;

use anyhow::Context;
use mgtrade_core::sim::{bound_audit, offline_oracle, run, write_oracle, write_run, Mode, Terminal};

use crate::audit::{gap_rows, report_gaps, SWEEP_PREFIX};
use crate::{Failure, Scenario};

pub const SWEEP_FILE: &str = "sweep.csv";

/// Runs the scenario without trading at each `V = fraction * V_max`, writes
/// each run with its benchmark result, and tabulates the cost gaps.
pub fn sweep(scenario: Scenario, fractions: &[f64]) -> Result<(), Failure> {
    let Scenario { config, inputs, out } = scenario;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &fraction in fractions {
        let name = format!("{SWEEP_PREFIX}{fraction:.2}");
        let cfg = config.with_v_fraction(fraction)?.with_mode(Mode::NoAuction);
        let output = run(&cfg, &inputs)?;
        let oracle = offline_oracle(&cfg, &inputs, &Terminal::from_summary(&output.summary))?;
        let violations: Vec<_> = output.records.iter().flat_map(|r| r.violations.iter().cloned()).collect();
        let report = bound_audit(&cfg.microgrids()?, &output.summary, &violations, Some(&oracle));
        let dir = out.join(&name);
        write_run(&dir, &cfg, &output, &report)?;
        write_oracle(&dir, &oracle)?;
        failures.extend(report.failures().map(|c| format!("{name}: {} {}", c.name, c.detail)));
        rows.extend(gap_rows(&name, &cfg, &output.summary, &oracle)?);
    }
    failures.extend(report_gaps(&rows));

    let mut csv = String::from("run,mg_id,v_weight,online_cost,oracle_cost,measured_gap,cost_gap,within_bound\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.run,
            r.mg_id.0,
            r.v_weight,
            r.online_cost,
            r.oracle_cost,
            r.measured_gap(),
            r.cost_gap,
            r.within_bound()
        );
    }
    let path = out.join(SWEEP_FILE);
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("sweep written to {}", out.display());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(failures.join("; ")))
    }
}
