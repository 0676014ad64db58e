//! Scenario configuration and input materialization.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ingest::{self, ColumnSpec, IngestError, LoadModel, MgType, Trace, WindShape};
use crate::model::{compute_v_max, MgId, MgParams, Microgrid, ModelError, PriceBounds, SlotInputs};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    WithAuction,
    NoAuction,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::WithAuction => "with_auction",
            Mode::NoAuction => "no_auction",
        }
    }
}

/// A per-slot series: renewable production or the grid price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SeriesSource {
    /// Seeded log-normal wind proxy with the given mean.
    SyntheticWind {
        mean_kwh: f64,
        #[serde(default)]
        shape: WindShape,
    },
    /// Seeded daily price curve inside the scenario's price bounds.
    SyntheticPrice,
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        columns: ColumnSpec,
        /// Rescale the column to this mean.
        #[serde(default)]
        target_mean: Option<f64>,
    },
    Constant {
        value: f64,
    },
    Values {
        values: Vec<f64>,
    },
}

/// Per-slot delay-intolerant and delay-tolerant demand of one microgrid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum LoadSource {
    /// Uniform draws, seeded from the scenario seed. Without `dt_share`
    /// both components are drawn independently from `[low, high]`; with it
    /// one total is drawn and split.
    Uniform {
        low_kwh: f64,
        high_kwh: f64,
        #[serde(default)]
        dt_share: Option<f64>,
    },
    Constant {
        di_kwh: f64,
        dt_kwh: f64,
    },
    Values {
        di_kwh: Vec<f64>,
        dt_kwh: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputsConfig {
    pub price: SeriesSource,
    /// One entry per microgrid, in `mg_params` order.
    pub renewable: Vec<SeriesSource>,
    /// One entry per microgrid, in `mg_params` order.
    pub loads: Vec<LoadSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub mg_params: Vec<MgParams>,
    pub price_bounds: PriceBounds,
    pub horizon_slots: usize,
    pub rho1: f64,
    pub rho2: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub inputs: InputsConfig,
    /// Starting battery level per microgrid. Missing entries start where the
    /// virtual battery queue is zero, clipped to capacity.
    #[serde(default)]
    pub initial_battery_kwh: Vec<f64>,
    /// Permit `V > V_max`. The queue and battery bounds are then no longer
    /// guaranteed and the audit reports the breach.
    #[serde(default)]
    pub allow_v_above_max: bool,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Builds the microgrids and checks every structural precondition.
    pub fn microgrids(&self) -> Result<Vec<Microgrid>, SimError> {
        if self.horizon_slots == 0 {
            return Err(SimError::Config("horizon_slots must be at least 1".into()));
        }
        if self.mg_params.is_empty() {
            return Err(SimError::Config("no microgrids configured".into()));
        }
        if !(self.rho1 > 0.0 && self.rho2 > 0.0 && self.rho1.is_finite() && self.rho2.is_finite()) {
            return Err(SimError::Config(format!("auction weights must be positive, got {} and {}", self.rho1, self.rho2)));
        }
        let n = self.mg_params.len();
        if self.inputs.renewable.len() != n || self.inputs.loads.len() != n {
            return Err(SimError::Config(format!(
                "{n} microgrids but {} renewable and {} load sources",
                self.inputs.renewable.len(),
                self.inputs.loads.len()
            )));
        }
        if !self.initial_battery_kwh.is_empty() && self.initial_battery_kwh.len() != n {
            return Err(SimError::Config(format!(
                "initial_battery_kwh has {} entries for {n} microgrids",
                self.initial_battery_kwh.len()
            )));
        }
        let ids: BTreeSet<MgId> = self.mg_params.iter().map(|p| p.id).collect();
        if ids.len() != n {
            return Err(SimError::Config("microgrid ids must be unique".into()));
        }
        let mgs = self
            .mg_params
            .iter()
            .map(|p| Microgrid::new(p.clone(), &self.price_bounds))
            .collect::<Result<Vec<_>, ModelError>>()?;
        if !self.allow_v_above_max {
            if let Some(mg) = mgs.iter().find(|mg| !mg.v_within_max()) {
                return Err(SimError::Config(format!(
                    "{}: V = {} exceeds V_max = {}",
                    mg.id(),
                    mg.params.v_weight,
                    mg.bounds.v_max
                )));
            }
        }
        for (i, (mg, b)) in mgs.iter().zip(&self.initial_battery_kwh).enumerate() {
            if !(0.0..=mg.params.battery_capacity_kwh).contains(b) {
                return Err(SimError::Config(format!("initial battery {b} of microgrid #{i} outside capacity")));
            }
        }
        Ok(mgs)
    }

    pub fn initial_battery(&self, index: usize, mg: &Microgrid) -> f64 {
        self.initial_battery_kwh.get(index).copied().unwrap_or_else(|| mg.neutral_battery_level())
    }

    /// The same scenario with a different operating mode.
    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// The same scenario with every `V` set to `fraction * V_max`.
    pub fn with_v_fraction(&self, fraction: f64) -> Result<Self, SimError> {
        let mut out = self.clone();
        for p in &mut out.mg_params {
            p.v_weight = fraction * compute_v_max(p, &self.price_bounds)?;
        }
        Ok(out)
    }

    /// The six-microgrid reference scenario: three light microgrids (loads
    /// in `[100, 200]` kWh, 200 kWh mean wind) and three heavy ones (loads
    /// in `[200, 400]` kWh, 600 kWh mean wind), 3000 kWh batteries, 1500 kWh
    /// rate limits, prices in cents per kWh, `V = V_max`.
    pub fn reference(seed: u64) -> Self {
        let price_bounds = PriceBounds { p_min: 2.0, p_max: 10.0 };
        let types = [MgType::Type1, MgType::Type1, MgType::Type1, MgType::Type2, MgType::Type2, MgType::Type2];
        let mut mg_params = Vec::new();
        let mut renewable = Vec::new();
        let mut loads = Vec::new();
        for (i, ty) in types.into_iter().enumerate() {
            let (low, high) = ty.load_bounds();
            let model = LoadModel::new(ty, 0);
            let epsilon = model.dt_min();
            let mut p = MgParams {
                id: MgId(i as u32 + 1),
                battery_capacity_kwh: 3000.0,
                charge_rate_max_kwh: 1500.0,
                discharge_rate_max_kwh: 1500.0,
                serve_rate_max_kwh: 1500.0,
                dt_load_max_kwh: model.dt_max(),
                epsilon,
                epsilon_max: epsilon,
                price_floor: 1.0,
                v_weight: 1.0,
            };
            p.v_weight = compute_v_max(&p, &price_bounds).expect("reference parameters are valid");
            mg_params.push(p);
            renewable.push(SeriesSource::SyntheticWind { mean_kwh: ty.renewable_mean(), shape: WindShape::default() });
            loads.push(LoadSource::Uniform { low_kwh: low, high_kwh: high, dt_share: None });
        }
        Self {
            name: "reference".into(),
            mg_params,
            price_bounds,
            horizon_slots: 120,
            rho1: 1000.0,
            rho2: 0.0001,
            mode: Mode::WithAuction,
            seed,
            inputs: InputsConfig { price: SeriesSource::SyntheticPrice, renewable, loads },
            initial_battery_kwh: Vec::new(),
            allow_v_above_max: false,
        }
    }

    /// Two microgrids over 24 slots with fixed daily profiles and no
    /// randomness: a light one that runs short in the evening and a heavy
    /// one with a large midday renewable surplus.
    pub fn deterministic_pair() -> Self {
        let mut cfg = Self::reference(0);
        cfg.name = "deterministic-pair".into();
        cfg.mg_params = vec![cfg.mg_params[0].clone(), cfg.mg_params[3].clone()];
        cfg.mg_params[1].id = MgId(2);
        cfg.horizon_slots = 24;
        let wave = |amp: f64, shift: f64| -> Vec<f64> {
            (0..24).map(|t| amp * (2.0 * std::f64::consts::PI * (t as f64 - shift) / 24.0).sin()).collect()
        };
        let around = |base: f64, w: Vec<f64>| -> Vec<f64> { w.into_iter().map(|v| base + v).collect() };
        cfg.inputs = InputsConfig {
            price: SeriesSource::Values { values: around(6.0, wave(3.0, 12.0)) },
            renewable: vec![
                SeriesSource::Values { values: around(200.0, wave(150.0, 0.0)) },
                SeriesSource::Values { values: around(600.0, wave(300.0, 6.0)) },
            ],
            loads: vec![
                LoadSource::Values { di_kwh: around(150.0, wave(40.0, 12.0)), dt_kwh: around(150.0, wave(50.0, 9.0)) },
                LoadSource::Values { di_kwh: around(300.0, wave(80.0, 12.0)), dt_kwh: around(300.0, wave(100.0, 3.0)) },
            ],
        };
        cfg
    }
}

/// Realized exogenous inputs: `per_mg[i][t]` for microgrid `i` in slot `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedInputs {
    pub per_mg: Vec<Vec<SlotInputs>>,
}

impl RealizedInputs {
    pub fn slot_count(&self) -> usize {
        self.per_mg.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn slot(&self, t: usize) -> Vec<SlotInputs> {
        self.per_mg.iter().map(|series| series[t]).collect()
    }
}

/// Independent seed for one input stream.
fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const PRICE_STREAM: u64 = 1;
const WIND_STREAM: u64 = 2;
const LOAD_STREAM: u64 = 3;

fn resolve(base_dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_owned()
    } else {
        base_dir.join(path)
    }
}

fn series(
    source: &SeriesSource,
    slots: usize,
    seed: u64,
    base_dir: &Path,
    price_bounds: &PriceBounds,
) -> Result<Trace, IngestError> {
    match source {
        SeriesSource::SyntheticWind { mean_kwh, shape } => ingest::synthetic_wind(slots, seed, *mean_kwh, *shape),
        SeriesSource::SyntheticPrice => ingest::synthetic_price(slots, seed, price_bounds),
        SeriesSource::Csv { path, columns, target_mean } => {
            let trace = ingest::load_trace(&resolve(base_dir, path), columns)?;
            match target_mean {
                Some(mean) => ingest::scale_wind(&trace, *mean),
                None => Ok(trace),
            }
        }
        SeriesSource::Constant { value } => Trace::new("constant", "", vec![*value; slots]),
        SeriesSource::Values { values } => Trace::new("values", "", values.clone()),
    }
}

fn loads(source: &LoadSource, slots: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>), IngestError> {
    match source {
        LoadSource::Uniform { low_kwh, high_kwh, dt_share } => {
            let model = LoadModel {
                mg_type: MgType::Type1,
                low_kwh: *low_kwh,
                high_kwh: *high_kwh,
                rng_seed: seed,
                dt_share: *dt_share,
            };
            model.validate()?;
            Ok((0..slots as u64).map(|t| ingest::draw_loads(&model, t)).unzip())
        }
        LoadSource::Constant { di_kwh, dt_kwh } => Ok((vec![*di_kwh; slots], vec![*dt_kwh; slots])),
        LoadSource::Values { di_kwh, dt_kwh } => Ok((di_kwh.clone(), dt_kwh.clone())),
    }
}

/// Draws or loads every input series for the horizon. Relative CSV paths are
/// resolved against `base_dir`.
pub fn materialize(config: &ScenarioConfig, base_dir: &Path) -> Result<RealizedInputs, SimError> {
    let mgs = config.microgrids()?;
    let slots = config.horizon_slots;
    let short = |what: String, len: usize| SimError::TraceTooShort { what, len, horizon: slots };

    let price = series(&config.inputs.price, slots, stream_seed(config.seed, PRICE_STREAM, 0), base_dir, &config.price_bounds)?;
    if price.slot_count() < slots {
        return Err(short("price".into(), price.slot_count()));
    }

    let mut per_mg = Vec::with_capacity(mgs.len());
    for (i, mg) in mgs.iter().enumerate() {
        let wind_seed = stream_seed(config.seed, WIND_STREAM, i as u64);
        let renewable = series(&config.inputs.renewable[i], slots, wind_seed, base_dir, &config.price_bounds)?;
        if renewable.slot_count() < slots {
            return Err(short(format!("renewable of {}", mg.id()), renewable.slot_count()));
        }
        let (di, dt) = loads(&config.inputs.loads[i], slots, stream_seed(config.seed, LOAD_STREAM, i as u64))?;
        if di.len().min(dt.len()) < slots {
            return Err(short(format!("loads of {}", mg.id()), di.len().min(dt.len())));
        }
        let series: Vec<SlotInputs> = (0..slots)
            .map(|t| SlotInputs {
                renewable_kwh: renewable.values()[t],
                di_load_kwh: di[t],
                dt_load_kwh: dt[t],
                grid_price: price.values()[t],
            })
            .collect();
        for inputs in &series {
            inputs.validate(&mg.params, &config.price_bounds)?;
        }
        per_mg.push(series);
    }
    Ok(RealizedInputs { per_mg })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_parameters() {
        let cfg = ScenarioConfig::reference(1);
        let mgs = cfg.microgrids().unwrap();
        assert_eq!(mgs.len(), 6);
        assert_eq!(mgs[0].params.dt_load_max_kwh, 200.0);
        assert_eq!(mgs[0].params.epsilon, 100.0);
        assert_eq!(mgs[5].params.dt_load_max_kwh, 400.0);
        assert_eq!(mgs[5].params.epsilon, 200.0);
        // (3000 - 200 - 100) / (10 - 2)
        assert_eq!(mgs[0].bounds.v_max, 337.5);
        assert!(mgs.iter().all(|m| m.params.v_weight == m.bounds.v_max));
    }

    #[test]
    fn json_round_trip() {
        let cfg = ScenarioConfig::reference(3);
        assert_eq!(ScenarioConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn rejects_v_above_max() {
        let mut cfg = ScenarioConfig::reference(1);
        cfg.mg_params[2].v_weight *= 1.5;
        assert!(matches!(cfg.microgrids(), Err(SimError::Config(_))));
        cfg.allow_v_above_max = true;
        assert!(cfg.microgrids().is_ok());
    }

    #[test]
    fn rejects_zero_horizon_and_mismatched_sources() {
        let mut cfg = ScenarioConfig::reference(1);
        cfg.horizon_slots = 0;
        assert!(cfg.microgrids().is_err());
        let mut cfg = ScenarioConfig::reference(1);
        cfg.inputs.loads.pop();
        assert!(cfg.microgrids().is_err());
    }

    #[test]
    fn materialized_inputs_replay() {
        let cfg = ScenarioConfig::reference(11);
        let a = materialize(&cfg, Path::new(".")).unwrap();
        let b = materialize(&cfg, Path::new(".")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.slot_count(), 120);
        let other = materialize(&ScenarioConfig::reference(12), Path::new(".")).unwrap();
        assert_ne!(a, other);
        // all microgrids see the same grid price
        assert!((0..120).all(|t| a.per_mg.iter().all(|s| s[t].grid_price == a.per_mg[0][t].grid_price)));
    }

    #[test]
    fn short_trace_is_an_error() {
        let mut cfg = ScenarioConfig::reference(1);
        cfg.inputs.price = SeriesSource::Values { values: vec![5.0; 10] };
        assert!(matches!(materialize(&cfg, Path::new(".")), Err(SimError::TraceTooShort { len: 10, .. })));
    }
}
