//! Forecast error metrics in original units, overall and per horizon step.

use std::path::Path;

use crate::error::{PastnError, Result};
use crate::tensor::Tensor;

/// Default MAPE threshold: targets below one vehicle are left out.
pub const MAPE_MASK_EPS: f64 = 1.0;
/// Written in place of a MAPE with no eligible entries.
pub const UNDEFINED: &str = "undefined";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub mae: f64,
    pub rmse: f64,
    /// Percent. `None` when every target was masked.
    pub mape: Option<f64>,
    /// Entries excluded from the MAPE mean.
    pub masked_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub overall: MetricRow,
    /// Index `j` holds horizon step `j + 1`.
    pub steps: Vec<MetricRow>,
    pub samples: usize,
}

#[derive(Default)]
struct Acc {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    kept: usize,
}

impl Acc {
    fn add(&mut self, p: f64, y: f64, eps: f64) {
        let e = p - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if y.abs() >= eps {
            self.ape += e.abs() / y.abs();
            self.kept += 1;
        }
    }

    fn row(&self) -> MetricRow {
        let n = self.count.max(1) as f64;
        MetricRow {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: (self.kept > 0).then(|| 100.0 * self.ape / self.kept as f64),
            masked_count: self.count - self.kept,
        }
    }
}

/// Compares `pred` and `target` of equal shape. Axis 1 is the horizon step when
/// the rank is at least 2; a vector counts as a single step.
pub fn compute_metrics(pred: &Tensor, target: &Tensor, mask_eps: f64) -> Result<MetricsReport> {
    if pred.shape() != target.shape() {
        return Err(PastnError::Dimension(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let shape = pred.shape();
    let (outer, steps, inner) = if shape.len() >= 2 {
        (shape[0], shape[1], shape[2..].iter().product::<usize>())
    } else {
        (1, 1, shape[0])
    };
    let mut per_step: Vec<Acc> = (0..steps).map(|_| Acc::default()).collect();
    let mut all = Acc::default();
    let (p, y) = (pred.data(), target.data());
    for b in 0..outer {
        for (j, acc) in per_step.iter_mut().enumerate() {
            let base = (b * steps + j) * inner;
            for i in base..base + inner {
                acc.add(p[i], y[i], mask_eps);
                all.add(p[i], y[i], mask_eps);
            }
        }
    }
    Ok(MetricsReport { overall: all.row(), steps: per_step.iter().map(Acc::row).collect(), samples: outer })
}

/// Named rows at 15 min, 30 min and 1 h (steps 3, 6, 12).
pub fn horizon_table(report: &MetricsReport) -> Vec<(&'static str, MetricRow)> {
    let mut rows = Vec::new();
    for (label, step) in [("h15min", 3), ("h30min", 6), ("h1h", 12)] {
        match report.steps.get(step - 1) {
            Some(r) => rows.push((label, *r)),
            None => log::warn!("horizon {label} needs {step} output steps, only {} available", report.steps.len()),
        }
    }
    rows
}

/// All rows of `metrics.csv` in file order.
pub fn metrics_rows(report: &MetricsReport) -> Vec<(String, MetricRow)> {
    let mut rows: Vec<(String, MetricRow)> =
        report.steps.iter().enumerate().map(|(j, r)| (format!("step_{}", j + 1), *r)).collect();
    rows.extend(horizon_table(report).into_iter().map(|(l, r)| (l.to_string(), r)));
    rows.push(("overall".to_string(), report.overall));
    rows
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(String, MetricRow)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["horizon", "mae", "rmse", "mape", "masked_count"])?;
    for (label, r) in rows {
        let mape = r.mape.map_or_else(|| UNDEFINED.to_string(), |m| m.to_string());
        w.write_record([label.clone(), r.mae.to_string(), r.rmse.to_string(), mape, r.masked_count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<(String, MetricRow)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let bad = |what: &str| PastnError::Format { row, message: format!("bad {what}") };
        let num = |k: usize, what: &str| rec.get(k).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad(what));
        let mape = match rec.get(3) {
            Some(UNDEFINED) => None,
            _ => Some(num(3, "mape")?),
        };
        let masked_count = rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(|| bad("masked_count"))?;
        rows.push((
            rec.get(0).ok_or_else(|| bad("horizon"))?.to_string(),
            MetricRow { mae: num(1, "mae")?, rmse: num(2, "rmse")?, mape, masked_count },
        ));
    }
    Ok(rows)
}
