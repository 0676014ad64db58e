use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mgtrade_core::model::MgId;
use mgtrade_core::sim::{
    bound_audit, read_oracle, read_slot_log, summarize_log, AuditReport, OracleResult, RunSummary, ScenarioConfig,
    CONFIG_FILE, SLOTS_FILE,
};

use crate::Failure;

/// Prefix of the per-V run directories written by `sweep`.
pub const SWEEP_PREFIX: &str = "v_";

/// One microgrid at one swept `V`.
pub struct GapRow {
    pub run: String,
    pub mg_id: MgId,
    pub v_weight: f64,
    pub online_cost: f64,
    pub oracle_cost: f64,
    pub cost_gap: f64,
}

impl GapRow {
    pub fn measured_gap(&self) -> f64 {
        self.online_cost - self.oracle_cost
    }

    pub fn within_bound(&self) -> bool {
        let limit = self.oracle_cost + self.cost_gap;
        self.online_cost <= limit + 1e-9 * limit.abs().max(1.0)
    }
}

pub fn gap_rows(run: &str, config: &ScenarioConfig, summary: &RunSummary, oracle: &OracleResult) -> Result<Vec<GapRow>, Failure> {
    let mut rows = Vec::new();
    for mg in config.microgrids()? {
        let id = mg.id();
        let online = summary.microgrids.iter().find(|m| m.mg_id == id).ok_or_else(|| anyhow!("{run}: no log rows for {id}"))?;
        let pos = oracle.mg_ids.iter().position(|m| *m == id).ok_or_else(|| anyhow!("{run}: no oracle cost for {id}"))?;
        rows.push(GapRow {
            run: run.to_owned(),
            mg_id: id,
            v_weight: mg.params.v_weight,
            online_cost: online.time_average_cost,
            oracle_cost: oracle.time_average_cost[pos],
            cost_gap: mg.bounds.cost_gap(&mg.params),
        });
    }
    Ok(rows)
}

/// Prints the per-V gap table and returns the checks that failed: the bound
/// at every point, and `A/V` falling as `V` grows for each microgrid.
pub fn report_gaps(rows: &[GapRow]) -> Vec<String> {
    println!(
        "{:<10} {:<5} {:>14} {:>14} {:>14} {:>14} {:>14}  bound",
        "run", "mg", "V", "online", "oracle", "gap", "A/V"
    );
    for r in rows {
        println!(
            "{:<10} {:<5} {:>14.6} {:>14.6} {:>14.6} {:>14.6} {:>14.6}  {}",
            r.run,
            r.mg_id.to_string(),
            r.v_weight,
            r.online_cost,
            r.oracle_cost,
            r.measured_gap(),
            r.cost_gap,
            if r.within_bound() { "PASS" } else { "FAIL" }
        );
    }
    let mut failures: Vec<String> = rows
        .iter()
        .filter(|r| !r.within_bound())
        .map(|r| format!("{} {}: online {:.6} > oracle {:.6} + A/V {:.6}", r.run, r.mg_id, r.online_cost, r.oracle_cost, r.cost_gap))
        .collect();
    let mut ids: Vec<MgId> = rows.iter().map(|r| r.mg_id).collect();
    ids.sort();
    ids.dedup();
    for id in ids {
        let mut mine: Vec<&GapRow> = rows.iter().filter(|r| r.mg_id == id).collect();
        mine.sort_by(|a, b| a.v_weight.total_cmp(&b.v_weight));
        let gaps: Vec<f64> = mine.iter().map(|r| r.measured_gap()).collect();
        let falling = gaps.windows(2).filter(|w| w[1] <= w[0]).count();
        println!("{id}: measured gap nonincreasing on {falling}/{} consecutive V pairs", gaps.len().saturating_sub(1));
        if mine.windows(2).any(|w| w[1].cost_gap >= w[0].cost_gap) {
            failures.push(format!("{id}: A/V does not fall as V grows"));
        }
    }
    // runs are in sweep order, and every microgrid's V scales with the fraction
    let mut runs: Vec<&str> = rows.iter().map(|r| r.run.as_str()).collect();
    runs.dedup();
    let mean_gaps: Vec<f64> = runs
        .iter()
        .map(|run| {
            let mine: Vec<f64> = rows.iter().filter(|r| r.run == *run).map(GapRow::measured_gap).collect();
            mine.iter().sum::<f64>() / mine.len() as f64
        })
        .collect();
    let falling = mean_gaps.windows(2).filter(|w| w[1] <= w[0]).count();
    println!(
        "mean over microgrids: measured gap nonincreasing on {falling}/{} consecutive V pairs",
        mean_gaps.len().saturating_sub(1)
    );
    failures
}

pub fn audit(dir: &Path, config: Option<&Path>) -> Result<(), Failure> {
    if !dir.is_dir() {
        return Err(Failure::Usage(anyhow!("{} is not a directory", dir.display())));
    }
    let override_config = config.map(load_config).transpose()?;
    if dir.join(SLOTS_FILE).is_file() {
        let report = audit_run(dir, override_config.as_ref())?.0;
        print!("{}", report.render());
        return verdict(report.failures().map(|c| format!("{} {} {}", who(c.mg_id), c.name, c.detail)).collect());
    }

    let runs = run_dirs(dir)?;
    if runs.is_empty() {
        return Err(Failure::Data(anyhow!("no {SLOTS_FILE} in {} or its subdirectories", dir.display())));
    }
    let is_sweep = runs.iter().all(|(name, _)| name.starts_with(SWEEP_PREFIX));
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for (name, path) in &runs {
        let (report, config, summary, oracle) = audit_run(path, override_config.as_ref())?;
        if is_sweep {
            let oracle = oracle.ok_or_else(|| anyhow!("{name}: missing oracle result"))?;
            rows.extend(gap_rows(name, &config, &summary, &oracle)?);
            failures.extend(report.failures().map(|c| format!("{name}: {} {} {}", who(c.mg_id), c.name, c.detail)));
        } else {
            println!("== {name}");
            print!("{}", report.render());
            failures.extend(report.failures().map(|c| format!("{name}: {} {} {}", who(c.mg_id), c.name, c.detail)));
        }
    }
    if is_sweep {
        failures.extend(report_gaps(&rows));
        println!("{}", if failures.is_empty() { "sweep: PASS" } else { "sweep: FAIL" });
    }
    verdict(failures)
}

fn who(id: Option<MgId>) -> String {
    id.map(|id| id.to_string()).unwrap_or_else(|| "all".into())
}

fn verdict(failures: Vec<String>) -> Result<(), Failure> {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(failures.join("; ")))
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig, Failure> {
    if !path.is_file() {
        return Err(Failure::Data(anyhow!("config {} not found", path.display())));
    }
    Ok(ScenarioConfig::load(path)?)
}

/// Subdirectories holding a slot log, by name.
fn run_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    let mut runs = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry.with_context(|| format!("listing {}", dir.display()))?.path();
        if path.join(SLOTS_FILE).is_file() {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            runs.push((name, path));
        }
    }
    runs.sort();
    Ok(runs)
}

type Audited = (AuditReport, ScenarioConfig, RunSummary, Option<OracleResult>);

/// Rebuilds a run's summary from its slot log alone and audits it.
fn audit_run(dir: &Path, config: Option<&ScenarioConfig>) -> Result<Audited, Failure> {
    let config = match config {
        Some(c) => c.clone(),
        None => load_config(&dir.join(CONFIG_FILE))?,
    };
    let rows = read_slot_log(&dir.join(SLOTS_FILE))?;
    let (summary, violations) = summarize_log(&config, &rows)?;
    let oracle = read_oracle(dir)?;
    let report = bound_audit(&config.microgrids()?, &summary, &violations, oracle.as_ref());
    Ok((report, config, summary, oracle))
}
