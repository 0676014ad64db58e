//! Exogenous inputs: CSV traces, wind scaling, seeded synthetic traces and
//! uniform load draws.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::PriceBounds;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: line {line}: cannot parse `{value}` in column `{column}`")]
    Parse { path: PathBuf, line: u64, column: String, value: String },
    #[error("{path}: line {line}: negative value {value}")]
    Negative { path: PathBuf, line: u64, value: f64 },
    #[error("trace `{0}` is empty")]
    Empty(String),
    #[error("trace `{name}` has invalid value {value} at slot {slot}")]
    InvalidValue { name: String, slot: usize, value: f64 },
    #[error("trace `{0}` has zero mean and cannot be rescaled")]
    ZeroMean(String),
    #[error("invalid load bounds [{low}, {high}]")]
    InvalidLoadBounds { low: f64, high: f64 },
}

/// Per-slot scalar series. Row `n` of a source file is slot `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    name: String,
    unit: String,
    values: Vec<f64>,
}

impl Trace {
    pub fn new(name: impl Into<String>, unit: impl Into<String>, values: Vec<f64>) -> Result<Self, IngestError> {
        let name = name.into();
        if values.is_empty() {
            return Err(IngestError::Empty(name));
        }
        if let Some((slot, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(IngestError::InvalidValue { name, slot, value });
        }
        Ok(Self { name, unit: unit.into(), values })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn unit(&self) -> &str {
        &self.unit
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slot_count(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, slot: usize) -> Option<f64> {
        self.values.get(slot).copied()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Which CSV columns hold the slot index and the value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    #[serde(default = "default_slot_column")]
    pub slot_column: String,
    #[serde(default = "default_value_column")]
    pub value_column: String,
}

fn default_slot_column() -> String {
    "slot".into()
}

fn default_value_column() -> String {
    "value".into()
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self { slot_column: default_slot_column(), value_column: default_value_column() }
    }
}

impl ColumnSpec {
    pub fn value(column: impl Into<String>) -> Self {
        Self { value_column: column.into(), ..Self::default() }
    }
}

/// Reads one column of a headed CSV file. Line numbers in errors count the
/// header as line 1.
pub fn load_trace(path: &Path, columns: &ColumnSpec) -> Result<Trace, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io { path: path.to_owned(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let csv_err = |source| IngestError::Csv { path: path.to_owned(), source };
    let headers = reader.headers().map_err(csv_err)?.clone();
    let index_of = |column: &str| {
        headers
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| IngestError::MissingColumn { path: path.to_owned(), column: column.to_owned() })
    };
    let slot_idx = index_of(&columns.slot_column)?;
    let value_idx = index_of(&columns.value_column)?;

    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let cell = |idx: usize, column: &str| {
            let raw = record.get(idx).unwrap_or("");
            raw.parse::<f64>().map_err(|_| IngestError::Parse {
                path: path.to_owned(),
                line,
                column: column.to_owned(),
                value: raw.to_owned(),
            })
        };
        cell(slot_idx, &columns.slot_column)?;
        let value = cell(value_idx, &columns.value_column)?;
        if value < 0.0 {
            return Err(IngestError::Negative { path: path.to_owned(), line, value });
        }
        values.push(value);
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Trace::new(format!("{name}:{}", columns.value_column), "", values)
}

/// Writes traces side by side as `slot,<name>...` columns.
pub fn write_traces(path: &Path, traces: &[(&str, &Trace)]) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|source| IngestError::Io { path: path.to_owned(), source })?;
    let mut writer = csv::Writer::from_writer(file);
    let csv_err = |source| IngestError::Csv { path: path.to_owned(), source };
    let mut header = vec!["slot".to_owned()];
    header.extend(traces.iter().map(|(n, _)| (*n).to_owned()));
    writer.write_record(&header).map_err(csv_err)?;
    let slots = traces.iter().map(|(_, t)| t.slot_count()).min().unwrap_or(0);
    for slot in 0..slots {
        let mut row = vec![slot.to_string()];
        row.extend(traces.iter().map(|(_, t)| format!("{:.6}", t.values[slot])));
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| IngestError::Io { path: path.to_owned(), source })
}

/// Rescales a trace linearly so its mean equals `target_mean`.
pub fn scale_wind(trace: &Trace, target_mean: f64) -> Result<Trace, IngestError> {
    let mean = trace.mean();
    if !(mean > 0.0) {
        return Err(IngestError::ZeroMean(trace.name.clone()));
    }
    let factor = target_mean / mean;
    Trace::new(trace.name.clone(), "kWh", trace.values.iter().map(|v| v * factor).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MgType {
    Type1,
    Type2,
}

impl MgType {
    /// Load range (kWh per slot) of each component.
    pub fn load_bounds(self) -> (f64, f64) {
        match self {
            MgType::Type1 => (100.0, 200.0),
            MgType::Type2 => (200.0, 400.0),
        }
    }

    /// Mean renewable production (kWh per slot).
    pub fn renewable_mean(self) -> f64 {
        match self {
            MgType::Type1 => 200.0,
            MgType::Type2 => 600.0,
        }
    }
}

/// i.i.d. uniform load generator for one microgrid.
///
/// By default the delay-intolerant and delay-tolerant components are drawn
/// independently from `[low, high]`. With `dt_share = Some(s)` a single total
/// is drawn and split `(1 - s, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadModel {
    pub mg_type: MgType,
    pub low_kwh: f64,
    pub high_kwh: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub dt_share: Option<f64>,
}

impl LoadModel {
    pub fn new(mg_type: MgType, rng_seed: u64) -> Self {
        let (low_kwh, high_kwh) = mg_type.load_bounds();
        Self { mg_type, low_kwh, high_kwh, rng_seed, dt_share: None }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let share_ok = self.dt_share.is_none_or(|s| (0.0..=1.0).contains(&s));
        if !(self.low_kwh >= 0.0 && self.low_kwh <= self.high_kwh && self.high_kwh.is_finite() && share_ok) {
            return Err(IngestError::InvalidLoadBounds { low: self.low_kwh, high: self.high_kwh });
        }
        Ok(())
    }

    /// Largest delay-tolerant draw this model can produce.
    pub fn dt_max(&self) -> f64 {
        self.high_kwh * self.dt_share.unwrap_or(1.0)
    }

    /// Smallest delay-tolerant draw this model can produce.
    pub fn dt_min(&self) -> f64 {
        self.low_kwh * self.dt_share.unwrap_or(1.0)
    }
}

fn uniform(rng: &mut ChaCha8Rng, low: f64, high: f64) -> f64 {
    if high > low {
        rng.random_range(low..=high)
    } else {
        low
    }
}

/// Draws `(di_kwh, dt_kwh)` for one slot. The draw depends only on the seed
/// and the slot, so any slot can be replayed on its own.
pub fn draw_loads(model: &LoadModel, slot: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(model.rng_seed);
    rng.set_stream(slot);
    match model.dt_share {
        None => {
            let di = uniform(&mut rng, model.low_kwh, model.high_kwh);
            let dt = uniform(&mut rng, model.low_kwh, model.high_kwh);
            (di, dt)
        }
        Some(share) => {
            let total = uniform(&mut rng, model.low_kwh, model.high_kwh);
            (total * (1.0 - share), total * share)
        }
    }
}

/// Shape parameters of the synthetic wind proxy: a log-normal AR(1) process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindShape {
    pub persistence: f64,
    pub volatility: f64,
}

impl Default for WindShape {
    fn default() -> Self {
        Self { persistence: 0.8, volatility: 0.6 }
    }
}

/// Seeded wind-energy proxy scaled to `target_mean` kWh per slot.
pub fn synthetic_wind(slots: usize, seed: u64, target_mean: f64, shape: WindShape) -> Result<Trace, IngestError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let innovation = shape.volatility * (1.0 - shape.persistence * shape.persistence).max(0.0).sqrt();
    let mut log_level = shape.volatility * noise.sample(&mut rng);
    let mut values = Vec::with_capacity(slots);
    for _ in 0..slots {
        values.push(log_level.exp());
        log_level = shape.persistence * log_level + innovation * noise.sample(&mut rng);
    }
    scale_wind(&Trace::new("synthetic-wind", "kWh", values)?, target_mean)
}

/// Seeded grid-price proxy: a daily sinusoid plus Gaussian noise, clipped to
/// the price bounds.
pub fn synthetic_price(slots: usize, seed: u64, pb: &PriceBounds) -> Result<Trace, IngestError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = pb.p_max - pb.p_min;
    let mid = (pb.p_min + pb.p_max) / 2.0;
    let noise = Normal::new(0.0, 0.12 * span.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let values = (0..slots)
        .map(|t| {
            // peak in the early evening
            let phase = 2.0 * std::f64::consts::PI * (t as f64 - 12.0) / 24.0;
            (mid + 0.35 * span * phase.sin() + noise.sample(&mut rng)).clamp(pb.p_min, pb.p_max)
        })
        .collect();
    Trace::new("synthetic-price", "price/kWh", values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_120_rows() {
        let mut body = String::from("slot,value\n");
        for t in 0..120 {
            body.push_str(&format!("{t},{}\n", 2.0 + (t % 7) as f64));
        }
        let f = csv_file(&body);
        let trace = load_trace(f.path(), &ColumnSpec::default()).unwrap();
        assert_eq!(trace.slot_count(), 120);
        assert_eq!(trace.get(3), Some(5.0));
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = csv_file("");
        assert!(load_trace(f.path(), &ColumnSpec::default()).is_err());
        let f = csv_file("slot,value\n");
        assert!(matches!(load_trace(f.path(), &ColumnSpec::default()), Err(IngestError::Empty(_))));
    }

    #[test]
    fn malformed_cell_reports_line() {
        let f = csv_file("slot,value\n12,abc\n");
        match load_trace(f.path(), &ColumnSpec::default()) {
            Err(IngestError::Parse { line, value, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(value, "abc");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn selects_named_column() {
        let f = csv_file("slot,mg1,mg2\n0,1.5,3\n1,2.5,4\n");
        let trace = load_trace(f.path(), &ColumnSpec::value("mg2")).unwrap();
        assert_eq!(trace.values(), &[3.0, 4.0]);
        assert!(matches!(load_trace(f.path(), &ColumnSpec::value("mg9")), Err(IngestError::MissingColumn { .. })));
    }

    #[test]
    fn negative_value_rejected() {
        let f = csv_file("slot,value\n0,1\n1,-2\n");
        assert!(matches!(load_trace(f.path(), &ColumnSpec::default()), Err(IngestError::Negative { line: 3, .. })));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_trace(Path::new("/nonexistent/trace.csv"), &ColumnSpec::default()),
            Err(IngestError::Io { .. })
        ));
    }

    #[test]
    fn scale_examples() {
        let t = Trace::new("w", "", vec![25.0, 75.0, 50.0]).unwrap();
        let scaled = scale_wind(&t, 200.0).unwrap();
        assert_eq!(scaled.values(), &[100.0, 300.0, 200.0]);
        assert_eq!(scale_wind(&t, 50.0).unwrap().values(), t.values());
        let zero = Trace::new("z", "", vec![0.0, 0.0]).unwrap();
        assert!(matches!(scale_wind(&zero, 10.0), Err(IngestError::ZeroMean(_))));
    }

    #[test]
    fn loads_stay_in_bounds() {
        for (ty, (lo, hi)) in [(MgType::Type1, (100.0, 200.0)), (MgType::Type2, (200.0, 400.0))] {
            let model = LoadModel::new(ty, 7);
            for slot in 0..2000 {
                let (di, dt) = draw_loads(&model, slot);
                assert!((lo..=hi).contains(&di) && (lo..=hi).contains(&dt));
            }
        }
    }

    #[test]
    fn loads_replay_under_seed() {
        let model = LoadModel::new(MgType::Type1, 42);
        let a: Vec<_> = (0..50).map(|s| draw_loads(&model, s)).collect();
        let b: Vec<_> = (0..50).map(|s| draw_loads(&model, s)).collect();
        assert_eq!(a, b);
        let other = LoadModel::new(MgType::Type1, 43);
        assert_ne!(draw_loads(&model, 0), draw_loads(&other, 0));
    }

    #[test]
    fn load_mean_matches_midpoint() {
        let model = LoadModel::new(MgType::Type2, 5);
        let n = 10_000;
        let (mut di_sum, mut dt_sum) = (0.0, 0.0);
        for slot in 0..n {
            let (di, dt) = draw_loads(&model, slot);
            di_sum += di;
            dt_sum += dt;
        }
        for mean in [di_sum / n as f64, dt_sum / n as f64] {
            assert!((mean - 300.0).abs() / 300.0 < 0.02, "{mean}");
        }
    }

    #[test]
    fn split_mode_shares_total() {
        let model = LoadModel { dt_share: Some(0.5), ..LoadModel::new(MgType::Type1, 1) };
        let (di, dt) = draw_loads(&model, 3);
        assert_eq!(di, dt);
        assert!((100.0..=200.0).contains(&(di + dt)));
    }

    #[test]
    fn synthetic_traces_respect_targets() {
        let wind = synthetic_wind(120, 9, 600.0, WindShape::default()).unwrap();
        assert!((wind.mean() - 600.0).abs() < 1e-9);
        let pb = PriceBounds::new(2.0, 10.0).unwrap();
        let price = synthetic_price(120, 9, &pb).unwrap();
        assert!(price.values().iter().all(|p| pb.contains(*p)));
        assert_eq!(price, synthetic_price(120, 9, &pb).unwrap());
    }
}
