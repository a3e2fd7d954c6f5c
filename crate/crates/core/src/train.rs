//! MAE objective, Adam, chronological splitting and the epoch loop.

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Split, WindowedDataset};
use crate::error::{PastnError, Result};
use crate::graph::GraphBundle;
use crate::metrics::{compute_metrics, MetricsReport, MAPE_MASK_EPS};
use crate::model::{Checkpoint, ModelConfig, ModelParams, Mode, ParamStore};
use crate::rng::derive_rng;
use crate::tensor::{Tape, Tensor, Var};

/// `mean |pred − target|`.
pub fn mae_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(PastnError::Dimension(format!(
            "prediction {:?} and target {:?} differ",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Window index ranges of the three splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Floor boundaries over `windows` window indices. With `span > 1`, the first
/// `span − 1` windows of validation and test are dropped so that no raw step
/// is read by windows of two different splits.
pub fn chronological_split(windows: usize, span: usize, ratios: (f64, f64, f64)) -> Result<SplitRanges> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(PastnError::Config(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let train_end = (windows as f64 * a).floor() as usize;
    let val_end = ((windows as f64 * (a + b)).floor() as usize).max(train_end);
    let purge = span.saturating_sub(1);
    let splits = SplitRanges {
        train: 0..train_end,
        val: (train_end + purge).min(val_end)..val_end,
        test: (val_end + purge).min(windows)..windows,
    };
    for (name, r) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if r.is_empty() {
            return Err(PastnError::Data(format!(
                "{windows} windows of span {span} leave the {name} split empty"
            )));
        }
    }
    Ok(splits)
}

/// Adam with global-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Adam {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 5.0, step: 0, m: zeros(), v: zeros() }
    }

    /// First and second moments, shaped like the parameters.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Clips all trainable gradients to a joint norm of `clip`, then updates in place.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let mut sq = 0.0;
        for p in store.iter().filter(|p| p.trainable()) {
            let g = p
                .value
                .grad()
                .ok_or_else(|| PastnError::Contract(format!("trainable parameter {} has no gradient", p.name)))?;
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable() {
                continue;
            }
            let g: Vec<f64> = p.value.grad().expect("checked above").iter().map(|x| x * scale).collect();
            let data = p.value.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Optimizer and bookkeeping carried across epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub adam: Adam,
    pub best_val_mae: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Eval-mode worker threads; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 20, patience: 15, batch_size: 16, lr: 1e-3, seed: 1, threads: 1 }
    }
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MAE.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    /// Parameters after the last epoch run.
    pub last: ModelParams,
}

/// Minibatch Adam on the training split with validation-based model selection.
pub fn train_loop(
    ds: &WindowedDataset,
    bundle: &GraphBundle,
    config: &ModelConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let params = ModelParams::init(config, ds.num_nodes(), opts.seed)?;
    train_from(ds, bundle, params, opts)
}

/// [`train_loop`] starting from given parameters.
pub fn train_from(
    ds: &WindowedDataset,
    bundle: &GraphBundle,
    mut params: ModelParams,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if opts.batch_size == 0 {
        return Err(PastnError::Config("batch size must be positive".into()));
    }
    if params.config.input_len != ds.input_len || params.config.output_len != ds.output_len {
        return Err(PastnError::Config(format!(
            "model maps {} -> {} steps, dataset windows are {} -> {}",
            params.config.input_len, params.config.output_len, ds.input_len, ds.output_len
        )));
    }
    let mut state = TrainState {
        epoch: 0,
        adam: Adam::new(&params.store, opts.lr),
        best_val_mae: f64::INFINITY,
        seed: opts.seed,
    };
    let mut dropout_rng = derive_rng(opts.seed, "dropout");
    let mut best = Checkpoint { params: params.clone(), scaler: ds.scaler };
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut since_best = 0;
    while state.epoch < opts.epochs {
        state.epoch += 1;
        let epoch = state.epoch;
        let clock = Instant::now();
        let mut order: Vec<usize> = ds.range(Split::Train).collect();
        order.shuffle(&mut derive_rng(opts.seed, &format!("shuffle.{epoch}")));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(opts.batch_size).enumerate() {
            let (x, y) = ds.batch(chunk);
            let mut tape = Tape::new();
            let (bound, out) = params.forward(&mut tape, &x, bundle, Mode::Train(&mut dropout_rng))?;
            let target = tape.constant(y);
            let loss = mae_loss(&mut tape, out.prediction, target)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(PastnError::Divergence { epoch, batch: bi });
            }
            tape.backward(loss)?;
            params.store.absorb_grads(&tape, &bound);
            state.adam.step(&mut params.store)?;
            loss_sum += lv;
            batches += 1;
        }
        let (report, _) = evaluate(&params, ds, bundle, Split::Val, opts.threads)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_mae: report.overall.mae,
            val_rmse: report.overall.rmse,
            val_mape: report.overall.mape,
            seconds: clock.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_mae {:.4} ({:.1}s)",
            rec.train_loss,
            rec.val_mae,
            rec.seconds
        );
        if rec.val_mae < state.best_val_mae {
            state.best_val_mae = rec.val_mae;
            best = Checkpoint { params: params.clone(), scaler: ds.scaler };
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        log.push(rec);
        if since_best >= opts.patience {
            log::info!("no improvement for {since_best} epochs, stopping");
            break;
        }
    }
    best.params.store.zero_grads();
    params.store.zero_grads();
    Ok(TrainOutcome { best, best_epoch, log, last: params })
}

/// Windows per eval-mode tape.
const EVAL_BATCH: usize = 64;

fn predict_windows(params: &ModelParams, ds: &WindowedDataset, bundle: &GraphBundle, windows: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(windows.len() * ds.output_len * ds.num_nodes());
    for chunk in windows.chunks(EVAL_BATCH) {
        let (x, _) = ds.batch(chunk);
        let mut tape = Tape::new();
        let (_, fo) = params.forward(&mut tape, &x, bundle, Mode::Eval)?;
        out.extend(tape.value(fo.prediction).data().iter().map(|&z| ds.scaler.denormalize(z)));
    }
    Ok(out)
}

/// Eval-mode forecasts for one split, in original units, `W x T' x N`, with their metrics.
pub fn evaluate(
    params: &ModelParams,
    ds: &WindowedDataset,
    bundle: &GraphBundle,
    split: Split,
    threads: usize,
) -> Result<(MetricsReport, Tensor)> {
    let windows: Vec<usize> = ds.range(split).collect();
    let threads = threads.max(1);
    let pred = if threads == 1 {
        predict_windows(params, ds, bundle, &windows)?
    } else {
        let per = windows.len().div_ceil(threads).div_ceil(EVAL_BATCH) * EVAL_BATCH;
        let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
            let handles: Vec<_> = windows
                .chunks(per.max(1))
                .map(|chunk| s.spawn(move || predict_windows(params, ds, bundle, chunk)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        });
        let mut all = Vec::new();
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let pred = Tensor::new(vec![windows.len(), ds.output_len, ds.num_nodes()], pred)?;
    let target = ds.raw_targets(&windows);
    Ok((compute_metrics(&pred, &target, MAPE_MASK_EPS)?, pred))
}

/// Worker count from `PASTN_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("PASTN_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

pub const EPOCH_LOG_HEADER: [&str; 6] = ["epoch", "train_loss", "val_mae", "val_rmse", "val_mape", "seconds"];

pub fn write_epoch_log(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EPOCH_LOG_HEADER)?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_mae.to_string(),
            r.val_rmse.to_string(),
            r.val_mape.map_or_else(|| crate::metrics::UNDEFINED.to_string(), |m| m.to_string()),
            format!("{:.3}", r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_epoch_log(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || PastnError::Format { row: i + 2, message: "malformed epoch log row".into() };
        let f = |k: usize| rec.get(k).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad);
        out.push(EpochRecord {
            epoch: rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            train_loss: f(1)?,
            val_mae: f(2)?,
            val_rmse: f(3)?,
            val_mape: if rec.get(4) == Some(crate::metrics::UNDEFINED) { None } else { Some(f(4)?) },
            seconds: f(5)?,
        });
    }
    Ok(out)
}
