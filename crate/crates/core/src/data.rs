//! Flow series ingestion, synthetic traffic, feature construction and windowing.
//!
//! A [`RawSeries`] holds `S x N` flow readings at 5-minute spacing. Windowing
//! attaches two calendar channels (time of day as a fraction of the day, day of
//! week divided by 7) to the z-scored flow, giving three input features per
//! node and step.

use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PastnError, Result};
use crate::graph::{random_geometric_graph, Edge, GraphBundle};
use crate::rng::derive_rng;
use crate::tensor::Tensor;
use crate::train::{chronological_split, SplitRanges};

pub const INTERVAL_MINUTES: i64 = 5;
pub const STEPS_PER_DAY: usize = 288;
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
/// Number of input channels: flow, time of day, day of week.
pub const NUM_FEATURES: usize = 3;
/// Edge radius of the synthetic sensor layout.
pub const SYNTHETIC_RADIUS: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    /// `S x N`, vehicles per interval.
    pub values: Tensor,
    pub start: NaiveDateTime,
    pub node_ids: Vec<String>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn timestamp(&self, step: usize) -> NaiveDateTime {
        self.start + Duration::minutes(INTERVAL_MINUTES * step as i64)
    }

    pub fn value(&self, step: usize, node: usize) -> f64 {
        self.values.data()[step * self.num_nodes() + node]
    }
}

/// Fraction of the day elapsed, in `[0, 1)`.
pub fn time_of_day(ts: NaiveDateTime) -> f64 {
    (ts.num_seconds_from_midnight() as f64) / 86_400.0
}

/// Monday = 0.
pub fn day_of_week(ts: NaiveDateTime) -> usize {
    ts.weekday().num_days_from_monday() as usize
}

/// Start of every synthetic series (a Monday).
pub fn synthetic_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

/// Knobs of the synthetic generator. Per-node values are drawn uniformly from the ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticParams {
    pub base: (f64, f64),
    pub amplitude: (f64, f64),
    pub noise_sd: (f64, f64),
    pub weekday_boost: f64,
    pub spillover: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            base: (40.0, 120.0),
            amplitude: (30.0, 60.0),
            noise_sd: (3.0, 8.0),
            weekday_boost: 15.0,
            spillover: 0.3,
        }
    }
}

fn draw(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Synthetic flow with the default parameters.
pub fn generate_synthetic(n: usize, days: usize, bundle: &GraphBundle, seed: u64) -> Result<RawSeries> {
    generate_synthetic_with(n, days, bundle, seed, &SyntheticParams::default())
}

/// `flow(t, n) = base + amp·sin(2π(tod − phase)) + boost·[weekday] + spill·Σ_m P_f[n][m]·flow(t−1, m) + ε`,
/// clamped at zero.
pub fn generate_synthetic_with(
    n: usize,
    days: usize,
    bundle: &GraphBundle,
    seed: u64,
    p: &SyntheticParams,
) -> Result<RawSeries> {
    if n < 2 || days < 2 {
        return Err(PastnError::Value(format!("need at least 2 nodes and 2 days, got {n} nodes, {days} days")));
    }
    if bundle.num_nodes() != n {
        return Err(PastnError::Dimension(format!("graph has {} nodes, series asks for {n}", bundle.num_nodes())));
    }
    let mut node_rng = derive_rng(seed, "synthetic.nodes");
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let base = draw(&mut node_rng, p.base);
        let amp = draw(&mut node_rng, p.amplitude);
        let phase: f64 = node_rng.gen();
        let sd = draw(&mut node_rng, p.noise_sd);
        nodes.push((base, amp, phase, sd));
    }
    let mut noise_rng = derive_rng(seed, "synthetic.noise");
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let start = synthetic_start();
    let steps = days * STEPS_PER_DAY;
    let pf = bundle.forward.data();
    let mut values = vec![0.0; steps * n];
    for t in 0..steps {
        let ts = start + Duration::minutes(INTERVAL_MINUTES * t as i64);
        let tod = time_of_day(ts);
        let weekday = if day_of_week(ts) < 5 { 1.0 } else { 0.0 };
        for (i, &(base, amp, phase, sd)) in nodes.iter().enumerate() {
            let mut v = base + amp * (2.0 * std::f64::consts::PI * (tod - phase)).sin() + p.weekday_boost * weekday;
            if t > 0 && p.spillover != 0.0 {
                let prev = &values[(t - 1) * n..t * n];
                let spill: f64 = (0..n).map(|m| pf[i * n + m] * prev[m]).sum();
                v += p.spillover * spill;
            }
            let eps: f64 = std_normal.sample(&mut noise_rng);
            values[t * n + i] = (v + sd * eps).max(0.0);
        }
    }
    Ok(RawSeries {
        values: Tensor::new(vec![steps, n], values)?,
        start,
        node_ids: (0..n).map(|i| format!("node_{i}")).collect(),
    })
}

/// Sensor layout, graph and flow series for one synthetic dataset.
pub fn synthetic_dataset(n: usize, days: usize, seed: u64) -> Result<(Vec<Edge>, GraphBundle, RawSeries)> {
    let mut geo = derive_rng(seed, "synthetic.graph");
    let (_, edges) = random_geometric_graph(n, SYNTHETIC_RADIUS, &mut geo);
    let bundle = GraphBundle::from_edges(&edges, n)?;
    let raw = generate_synthetic(n, days, &bundle, seed)?;
    Ok((edges, bundle, raw))
}

fn parse_timestamp(s: &str, row: usize) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%dT%H:%M:%S"))
        .map_err(|e| PastnError::Format { row, message: format!("bad timestamp {s:?}: {e}") })
}

/// Reads `timestamp,node_0,...`. Empty cells repeat the node's previous reading.
///
/// Row numbers in errors count the header as row 1.
pub fn load_flow_csv(path: impl AsRef<Path>) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("timestamp") {
        return Err(PastnError::Format { row: 1, message: "first column must be `timestamp`".into() });
    }
    let mut columns = Vec::new();
    let mut node_ids = Vec::new();
    for (i, h) in headers.iter().enumerate().skip(1) {
        if h.starts_with("node_") {
            columns.push(i);
            node_ids.push(h.to_string());
        } else {
            log::warn!("ignoring column {h:?}");
        }
    }
    if columns.is_empty() {
        return Err(PastnError::Format { row: 1, message: "no node_* columns".into() });
    }
    let n = columns.len();
    let mut values: Vec<f64> = Vec::new();
    let mut start = None;
    let mut prev_ts: Option<NaiveDateTime> = None;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| PastnError::Format { row, message: e.to_string() })?;
        let ts = parse_timestamp(rec.get(0).unwrap_or(""), row)?;
        match prev_ts {
            None => start = Some(ts),
            Some(p) => {
                let step = ts - p;
                if step != Duration::minutes(INTERVAL_MINUTES) {
                    let why = if ts <= p { "timestamps out of order" } else { "irregular spacing" };
                    return Err(PastnError::Format {
                        row,
                        message: format!("{why}: {p} then {ts}, expected {INTERVAL_MINUTES}-minute steps"),
                    });
                }
            }
        }
        prev_ts = Some(ts);
        for (j, &c) in columns.iter().enumerate() {
            let cell = rec.get(c).unwrap_or("").trim();
            let v = if cell.is_empty() {
                if i == 0 {
                    return Err(PastnError::Format {
                        row,
                        message: format!("first reading of {} is missing", node_ids[j]),
                    });
                }
                values[(i - 1) * n + j]
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| PastnError::Format { row, message: format!("bad value {cell:?}") })?;
                if !v.is_finite() {
                    return Err(PastnError::Format { row, message: format!("non-finite value {cell:?}") });
                }
                v
            };
            values.push(v);
        }
    }
    let s = values.len() / n;
    let start = start.ok_or_else(|| PastnError::Format { row: 2, message: "no data rows".into() })?;
    Ok(RawSeries { values: Tensor::new(vec![s, n], values)?, start, node_ids })
}

pub fn write_flow_csv(path: impl AsRef<Path>, raw: &RawSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(raw.node_ids.iter().cloned());
    w.write_record(&header)?;
    let n = raw.num_nodes();
    for t in 0..raw.len() {
        let mut rec = Vec::with_capacity(n + 1);
        rec.push(raw.timestamp(t).format(TIMESTAMP_FORMAT).to_string());
        rec.extend(raw.values.data()[t * n..(t + 1) * n].iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// z-score of the flow channel. One mean and one deviation shared by all nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
    pub num_nodes: usize,
}

impl Scaler {
    /// Population statistics of `values`; a zero deviation becomes 1 with a warning.
    pub fn fit(values: &[f64], num_nodes: usize) -> Scaler {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut std = var.sqrt();
        if !(std > 1e-12) {
            log::warn!("flow series is constant on the training split; using std = 1");
            std = 1.0;
        }
        Scaler { mean, std, num_nodes }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn denormalize_tensor(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        out.data_mut().iter_mut().for_each(|v| *v = self.denormalize(*v));
        out
    }
}

/// Sliding windows over a featurised series.
///
/// Window `w` reads raw steps `[w, w + T)` and predicts `[w + T, w + T + T')`.
/// Features are stored once per raw step and gathered into batches on demand.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    /// `S x N x 3`: normalised flow, time of day, day of week / 7.
    pub features: Tensor,
    /// `S x N`, original units.
    pub flow: Tensor,
    pub scaler: Scaler,
    pub splits: SplitRanges,
    pub input_len: usize,
    pub output_len: usize,
}

/// Which split of the window index space to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = PastnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(PastnError::Config(format!("unknown split {other:?}, expected train, val or test"))),
        }
    }
}

/// `S − T − T' + 1`, or 0 when the series is too short.
pub fn window_count(steps: usize, input_len: usize, output_len: usize) -> usize {
    (steps + 1).saturating_sub(input_len + output_len)
}

/// Default 6:2:2 ratios.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// Windows the series, fitting the scaler on the raw steps covered by training windows.
pub fn featurize_and_window(raw: &RawSeries, input_len: usize, output_len: usize) -> Result<WindowedDataset> {
    featurize_with_ratios(raw, input_len, output_len, SPLIT_RATIOS)
}

pub fn featurize_with_ratios(
    raw: &RawSeries,
    input_len: usize,
    output_len: usize,
    ratios: (f64, f64, f64),
) -> Result<WindowedDataset> {
    let s = raw.len();
    let n = raw.num_nodes();
    let span = input_len + output_len;
    if input_len == 0 || output_len == 0 {
        return Err(PastnError::Config("input and output lengths must be positive".into()));
    }
    if s < span {
        return Err(PastnError::Data(format!("series has {s} steps, one window needs {span}")));
    }
    let windows = window_count(s, input_len, output_len);
    let splits = chronological_split(windows, span, ratios)?;
    let covered = splits.train.end - 1 + span;
    let scaler = Scaler::fit(&raw.values.data()[..covered * n], n);
    let mut features = Vec::with_capacity(s * n * NUM_FEATURES);
    for t in 0..s {
        let ts = raw.timestamp(t);
        let tod = time_of_day(ts);
        let dow = day_of_week(ts) as f64 / 7.0;
        for i in 0..n {
            features.extend([scaler.normalize(raw.value(t, i)), tod, dow]);
        }
    }
    Ok(WindowedDataset {
        features: Tensor::new(vec![s, n, NUM_FEATURES], features)?,
        flow: raw.values.clone(),
        scaler,
        splits,
        input_len,
        output_len,
    })
}

impl WindowedDataset {
    /// Re-normalises the flow channel with another scaler, e.g. one stored in a checkpoint.
    pub fn rescale(&mut self, scaler: Scaler) -> Result<()> {
        if scaler.num_nodes != self.num_nodes() {
            return Err(PastnError::Config(format!(
                "scaler was fitted on {} nodes, data has {}",
                scaler.num_nodes,
                self.num_nodes()
            )));
        }
        let flow = self.flow.data();
        for (cell, &v) in self.features.data_mut().chunks_exact_mut(NUM_FEATURES).zip(flow) {
            cell[0] = scaler.normalize(v);
        }
        self.scaler = scaler;
        Ok(())
    }

    pub fn num_windows(&self) -> usize {
        self.steps() - self.input_len - self.output_len + 1
    }

    pub fn steps(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.splits.train.clone(),
            Split::Val => self.splits.val.clone(),
            Split::Test => self.splits.test.clone(),
        }
    }

    /// `B x T x N x 3` inputs and `B x T' x N x 1` normalised targets.
    pub fn batch(&self, windows: &[usize]) -> (Tensor, Tensor) {
        let n = self.num_nodes();
        let row = n * NUM_FEATURES;
        let f = self.features.data();
        let mut x = Vec::with_capacity(windows.len() * self.input_len * row);
        let mut y = Vec::with_capacity(windows.len() * self.output_len * n);
        for &w in windows {
            x.extend_from_slice(&f[w * row..(w + self.input_len) * row]);
            let t0 = w + self.input_len;
            for t in t0..t0 + self.output_len {
                y.extend((0..n).map(|i| f[t * row + i * NUM_FEATURES]));
            }
        }
        let b = windows.len();
        (
            Tensor::new(vec![b, self.input_len, n, NUM_FEATURES], x).expect("window shape"),
            Tensor::new(vec![b, self.output_len, n, 1], y).expect("window shape"),
        )
    }

    /// Targets in original units, `B x T' x N`.
    pub fn raw_targets(&self, windows: &[usize]) -> Tensor {
        let n = self.num_nodes();
        let f = self.flow.data();
        let mut y = Vec::with_capacity(windows.len() * self.output_len * n);
        for &w in windows {
            let t0 = w + self.input_len;
            y.extend_from_slice(&f[t0 * n..(t0 + self.output_len) * n]);
        }
        Tensor::new(vec![windows.len(), self.output_len, n], y).expect("window shape")
    }

    /// Input flow of one window in original units, `T x N`.
    pub fn raw_history(&self, w: usize) -> Tensor {
        let n = self.num_nodes();
        let f = self.flow.data();
        Tensor::new(vec![self.input_len, n], f[w * n..(w + self.input_len) * n].to_vec()).expect("window shape")
    }
}

/// Repeats the last row of `history: T x N` for `horizon` steps.
pub fn persistence_baseline(history: &Tensor, horizon: usize) -> Result<Tensor> {
    if history.rank() != 2 {
        return Err(PastnError::Dimension(format!("history must be T x N, got {:?}", history.shape())));
    }
    let (t, n) = (history.shape()[0], history.shape()[1]);
    let last = &history.data()[(t - 1) * n..];
    Ok(Tensor::from_fn(vec![horizon, n], |ix| last[ix[1]]))
}

/// Persistence forecasts for a list of windows, `B x T' x N`.
pub fn persistence_forecasts(ds: &WindowedDataset, windows: &[usize]) -> Tensor {
    let n = ds.num_nodes();
    let mut out = Vec::with_capacity(windows.len() * ds.output_len * n);
    for &w in windows {
        let p = persistence_baseline(&ds.raw_history(w), ds.output_len).expect("history is 2-d");
        out.extend_from_slice(p.data());
    }
    Tensor::new(vec![windows.len(), ds.output_len, n], out).expect("window shape")
}
