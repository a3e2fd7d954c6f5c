//! Command-line surface: `generate-data`, `train`, `evaluate`, `ablate`, `diagnose`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    featurize_and_window, load_flow_csv, persistence_forecasts, synthetic_dataset, write_flow_csv, Split,
    WindowedDataset,
};
use crate::error::{PastnError, Result};
use crate::graph::{read_edges_csv, write_edges_csv, GraphBundle};
use crate::metrics::{compute_metrics, metrics_rows, write_metrics_csv, MAPE_MASK_EPS};
use crate::model::{
    ablation_variant, load_checkpoint, save_checkpoint, AblationFlags, Checkpoint, ModelConfig, ModelParams, Mode,
    Variant,
};
use crate::spae::dispersion_score;
use crate::tensor::{Tape, Tensor};
use crate::train::{evaluate, threads_from_env, train_loop, write_epoch_log, TrainOptions, TrainOutcome};

pub const FLOW_FILE: &str = "flow.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

/// Everything a run needs. Keys serialise in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Directory holding `flow.csv` and `adjacency.csv`.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub split: Split,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        RunConfig {
            model: ModelConfig::default(),
            data: None,
            out: None,
            seeds: vec![t.seed],
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            patience: t.patience,
            split: Split::Val,
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| PastnError::Config(format!("config file: {e}")))
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            threads: threads_from_env(),
        }
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| PastnError::Config("no data directory given (--data)".into()))
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| PastnError::Config("no output directory given (--out)".into()))
    }
}

#[derive(Parser, Debug)]
#[command(name = "pastn", version, about = "Position-aware spatio-temporal traffic forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic flow series and its sensor graph.
    GenerateData {
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        #[arg(long, default_value_t = 30)]
        days: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed and keep the best validation checkpoint.
    Train(RunArgs),
    /// Score a checkpoint on a split, next to the persistence baseline.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score all six variants for every seed.
    Ablate(RunArgs),
    /// Node-embedding dispersion with and without the positional table.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Number of windows averaged into the node embeddings.
        #[arg(long, default_value_t = 64)]
        windows: usize,
        /// Also dump the attention maps of the first window.
        #[arg(long)]
        attention: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Default,
    PaperBest,
    Tiny,
}

/// Flags shared by `train` and `ablate`; each overrides the config file.
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated list, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub diffusion_depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub no_spae: bool,
    #[arg(long)]
    pub no_tpam: bool,
    #[arg(long)]
    pub st_only: bool,
    #[arg(long)]
    pub spae_random_init: bool,
    #[arg(long)]
    pub spae_frozen: bool,
}

impl RunArgs {
    /// Config file (if any), then preset, then individual flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::from_json(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.preset {
            rc.model = match p {
                Preset::Default => ModelConfig::default(),
                Preset::PaperBest => ModelConfig::paper_best(),
                Preset::Tiny => ModelConfig::tiny(),
            };
        }
        let m = &mut rc.model;
        if let Some(v) = self.layers {
            m.layers = v;
        }
        if let Some(v) = self.channels {
            m.channels = v;
            m.skip_channels = 2 * v;
            m.head_channels = 4 * v;
        }
        if let Some(v) = self.diffusion_depth {
            m.diffusion_depth = v;
        }
        if let Some(v) = self.heads {
            m.heads = v;
        }
        if let Some(v) = self.dropout {
            m.dropout = v;
        }
        if let Some(v) = &self.data {
            rc.data = Some(v.clone());
        }
        if let Some(v) = &self.out {
            rc.out = Some(v.clone());
        }
        if let Some(v) = &self.seeds {
            rc.seeds = v.clone();
        }
        if let Some(v) = self.seed {
            rc.seeds = vec![v];
        }
        if let Some(v) = self.epochs {
            rc.epochs = v;
        }
        if let Some(v) = self.batch_size {
            rc.batch_size = v;
        }
        if let Some(v) = self.lr {
            rc.lr = v;
        }
        if let Some(v) = self.patience {
            rc.patience = v;
        }
        if let Some(v) = self.split {
            rc.split = v;
        }
        let a = &mut rc.ablation;
        a.no_spae |= self.no_spae;
        a.no_tpam |= self.no_tpam;
        a.st_only |= self.st_only;
        a.spae_random_init |= self.spae_random_init;
        a.spae_frozen |= self.spae_frozen;
        if rc.seeds.is_empty() {
            return Err(PastnError::Config("at least one seed is required".into()));
        }
        Ok(rc)
    }
}

/// Loaded data directory.
pub struct DataBundle {
    pub dataset: WindowedDataset,
    pub graph: GraphBundle,
}

pub fn load_data_dir(dir: &Path, input_len: usize, output_len: usize) -> Result<DataBundle> {
    let raw = load_flow_csv(dir.join(FLOW_FILE))?;
    let edges = read_edges_csv(dir.join(ADJACENCY_FILE))?;
    let graph = GraphBundle::from_edges(&edges, raw.num_nodes())?;
    let dataset = featurize_and_window(&raw, input_len, output_len)?;
    Ok(DataBundle { dataset, graph })
}

pub fn generate_data(nodes: usize, days: usize, seed: u64, out: &Path) -> Result<()> {
    let (edges, _, raw) = synthetic_dataset(nodes, days, seed)?;
    fs::create_dir_all(out)?;
    write_flow_csv(out.join(FLOW_FILE), &raw)?;
    write_edges_csv(out.join(ADJACENCY_FILE), &edges)?;
    log::info!("wrote {} steps for {nodes} nodes ({} edges) to {}", raw.len(), edges.len(), out.display());
    Ok(())
}

fn write_json(path: &Path, rc: &RunConfig) -> Result<()> {
    fs::write(path, rc.to_json())?;
    Ok(())
}

/// Trains one model, writing checkpoint, epoch log and effective config into `out`.
pub fn train_one(rc: &RunConfig, model: &ModelConfig, data: &DataBundle, seed: u64, out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out)?;
    let mut eff = rc.clone();
    eff.model = model.clone();
    eff.seeds = vec![seed];
    eff.out = Some(out.to_path_buf());
    write_json(&out.join(EFFECTIVE_CONFIG_FILE), &eff)?;
    let outcome = train_loop(&data.dataset, &data.graph, model, &rc.train_options(seed))?;
    save_checkpoint(out.join(CHECKPOINT_FILE), &outcome.best)?;
    write_epoch_log(out.join(EPOCH_LOG_FILE), &outcome.log)?;
    Ok(outcome)
}

fn seed_dir(out: &Path, seeds: &[u64], seed: u64) -> PathBuf {
    if seeds.len() == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("seed_{seed}"))
    }
}

pub fn train_command(rc: &RunConfig) -> Result<()> {
    let model = ablation_variant(&rc.model, rc.ablation)?;
    model.validate()?;
    let out = rc.out_dir()?;
    let data = load_data_dir(rc.data_dir()?, model.input_len, model.output_len)?;
    for &seed in &rc.seeds {
        let dir = seed_dir(out, &rc.seeds, seed);
        let o = train_one(rc, &model, &data, seed, &dir)?;
        let best = &o.log[o.best_epoch.max(1) - 1];
        println!("seed {seed}: best val MAE {} at epoch {} -> {}", best.val_mae, o.best_epoch, dir.display());
    }
    Ok(())
}

/// Model rows plus a `persistence` row for the same windows.
pub fn evaluation_rows(
    ck: &Checkpoint,
    data: &DataBundle,
    split: Split,
) -> Result<Vec<(String, crate::metrics::MetricRow)>> {
    let (report, _) = evaluate(&ck.params, &data.dataset, &data.graph, split, threads_from_env())?;
    let windows: Vec<usize> = data.dataset.range(split).collect();
    let base = persistence_forecasts(&data.dataset, &windows);
    let base = compute_metrics(&base, &data.dataset.raw_targets(&windows), MAPE_MASK_EPS)?;
    let mut rows = metrics_rows(&report);
    rows.push(("persistence".to_string(), base.overall));
    Ok(rows)
}

fn load_for_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<DataBundle> {
    let mut data = load_data_dir(dir, ck.params.config.input_len, ck.params.config.output_len)?;
    if data.dataset.scaler != ck.scaler {
        log::warn!("data scaler differs from the checkpoint's; using the checkpoint scaler");
        data.dataset.rescale(ck.scaler)?;
    }
    Ok(data)
}

pub fn evaluate_command(checkpoint: &Path, data_dir: &Path, split: Split, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_for_checkpoint(&ck, data_dir)?;
    let rows = evaluation_rows(&ck, &data, split)?;
    fs::create_dir_all(out)?;
    write_metrics_csv(out.join(METRICS_FILE), &rows)?;
    for (label, r) in rows.iter().filter(|(l, _)| !l.starts_with("step_")) {
        let mape = r.mape.map_or_else(|| crate::metrics::UNDEFINED.to_string(), |m| format!("{m:.3}"));
        println!("{label:>12}  MAE {:.4}  RMSE {:.4}  MAPE {mape}", r.mae, r.rmse);
    }
    Ok(())
}

pub fn ablate_command(rc: &RunConfig) -> Result<()> {
    if rc.ablation != AblationFlags::default() {
        return Err(PastnError::Config("ablate runs every variant; drop the ablation flags".into()));
    }
    let out = rc.out_dir()?;
    let data = load_data_dir(rc.data_dir()?, rc.model.input_len, rc.model.output_len)?;
    let mut table: Vec<(Variant, Vec<crate::metrics::MetricRow>)> = Vec::new();
    let variants: Vec<(Variant, ModelConfig)> = Variant::ALL
        .iter()
        .map(|&v| ablation_variant(&rc.model, v.flags()).map(|m| (v, m)))
        .collect::<Result<_>>()?;
    for (v, _) in &variants {
        table.push((*v, Vec::new()));
    }
    for &seed in &rc.seeds {
        for (i, (v, model)) in variants.iter().enumerate() {
            let dir = out.join(format!("seed_{seed}")).join(v.name());
            log::info!("seed {seed}, variant {}", v.name());
            let o = train_one(rc, model, &data, seed, &dir)?;
            let rows = evaluation_rows(&o.best, &data, rc.split)?;
            write_metrics_csv(dir.join(METRICS_FILE), &rows)?;
            let overall = rows.iter().find(|(l, _)| l == "overall").map(|r| r.1).expect("overall row");
            table[i].1.push(overall);
        }
    }
    write_summary(&out.join("summary.csv"), &rc.seeds, &table)?;
    Ok(())
}

fn write_summary(path: &Path, seeds: &[u64], table: &[(Variant, Vec<crate::metrics::MetricRow>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["variant".to_string(), "mae_mean".into(), "rmse_mean".into(), "mape_mean".into()];
    header.extend(seeds.iter().map(|s| format!("mae_seed_{s}")));
    w.write_record(&header)?;
    for (v, rows) in table {
        let k = rows.len().max(1) as f64;
        let mae = rows.iter().map(|r| r.mae).sum::<f64>() / k;
        let rmse = rows.iter().map(|r| r.rmse).sum::<f64>() / k;
        let mape = rows.iter().map(|r| r.mape).sum::<Option<f64>>().map(|m| m / k);
        let mut rec = vec![
            v.name().to_string(),
            mae.to_string(),
            rmse.to_string(),
            mape.map_or_else(|| crate::metrics::UNDEFINED.to_string(), |m| m.to_string()),
        ];
        rec.extend(rows.iter().map(|r| r.mae.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Last-layer representation at the final step, averaged over `windows`: `N x C`.
pub fn node_embeddings(params: &ModelParams, data: &DataBundle, windows: &[usize]) -> Result<Tensor> {
    let (x, _) = data.dataset.batch(windows);
    let mut tape = Tape::new();
    let (_, out) = params.forward(&mut tape, &x, &data.graph, Mode::Eval)?;
    let h = tape.value(*out.hidden.last().expect("at least one layer"));
    let (b, n, t, c) = (h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]);
    Ok(Tensor::from_fn(vec![n, c], |ix| {
        (0..b).map(|bi| h.get(&[bi, ix[0], t - 1, ix[1]])).sum::<f64>() / b as f64
    }))
}

/// Resultant lengths with the table added and with it zeroed.
pub fn diagnose_dispersion(ck: &Checkpoint, data: &DataBundle, windows: &[usize]) -> Result<[crate::spae::Dispersion; 2]> {
    let with = dispersion_score(&node_embeddings(&ck.params, data, windows)?)?;
    let mut zeroed = ck.params.clone();
    match zeroed.spae_table_mut() {
        Some(t) => t.data_mut().iter_mut().for_each(|v| *v = 0.0),
        None => log::warn!("model has no positional table; both dispersions coincide"),
    }
    let without = dispersion_score(&node_embeddings(&zeroed, data, windows)?)?;
    Ok([with, without])
}

pub fn diagnose_command(
    checkpoint: &Path,
    data_dir: &Path,
    split: Split,
    windows: usize,
    attention: bool,
    out: &Path,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_for_checkpoint(&ck, data_dir)?;
    let pick: Vec<usize> = data.dataset.range(split).take(windows.max(1)).collect();
    let [with, without] = diagnose_dispersion(&ck, &data, &pick)?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("dispersion.csv"))?;
    w.write_record(["table", "node", "theta"])?;
    for (label, d) in [("added", &with), ("zeroed", &without)] {
        for &(node, theta) in &d.angles {
            w.write_record([label.to_string(), node.to_string(), theta.to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("dispersion_summary.csv"))?;
    w.write_record(["table", "resultant_length", "nodes", "collapsed"])?;
    for (label, d) in [("added", &with), ("zeroed", &without)] {
        w.write_record([
            label.to_string(),
            d.resultant_length.to_string(),
            d.angles.len().to_string(),
            d.collapsed.to_string(),
        ])?;
    }
    w.flush()?;
    println!("resultant length with table {}, zeroed {}", with.resultant_length, without.resultant_length);
    if attention {
        write_attention(&ck, &data, pick[0], &out.join("attention.csv"))?;
    }
    Ok(())
}

fn write_attention(ck: &Checkpoint, data: &DataBundle, window: usize, path: &Path) -> Result<()> {
    let (x, _) = data.dataset.batch(&[window]);
    let mut tape = Tape::new();
    let (_, out) = ck.params.forward(&mut tape, &x, &data.graph, Mode::Eval)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "head", "node", "query", "key", "weight"])?;
    for (l, maps) in out.attention.iter().enumerate() {
        for (h, &m) in maps.iter().enumerate() {
            let a = tape.value(m);
            let (n, t) = (a.shape()[1], a.shape()[2]);
            for node in 0..n {
                for q in 0..t {
                    for k in 0..t {
                        w.write_record([
                            l.to_string(),
                            h.to_string(),
                            node.to_string(),
                            q.to_string(),
                            k.to_string(),
                            a.get(&[0, node, q, k]).to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { nodes, days, seed, out } => generate_data(nodes, days, seed, &out),
        Command::Train(args) => train_command(&args.resolve()?),
        Command::Evaluate { checkpoint, data, split, out } => {
            let out = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            evaluate_command(&checkpoint, &data, split, &out)
        }
        Command::Ablate(args) => ablate_command(&args.resolve()?),
        Command::Diagnose { checkpoint, data, split, windows, attention, out } => {
            let out = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            diagnose_command(&checkpoint, &data, split, windows, attention, &out)
        }
    }
}
