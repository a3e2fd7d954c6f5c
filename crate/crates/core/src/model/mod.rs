//! Full network assembly: input projection, positional table, stacked
//! spatio-temporal layers with skip connections, and the two-layer output head.
//!
//! Activations are kept channels-last, `[B, N, T, C]`, so every 1x1
//! convolution is a plain matrix product over the last axis.

mod checkpoint;
mod params;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use params::{Bound, Param, ParamId, ParamStore};

use crate::data::Scaler;
use crate::error::{PastnError, Result};
use crate::graph::{adaptive_adjacency, GraphBundle, Supports};
use crate::spae::{apply_spae, SpaeInit, SpaeTable};
use crate::stlm::{stlm_forward, DiffusionWeights, GatedTcn};
use crate::tensor::{Tape, Tensor, Var};
use crate::tpam::{tpam_forward, TpamParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub channels: usize,
    pub diffusion_depth: usize,
    pub heads: usize,
    pub input_len: usize,
    pub output_len: usize,
    pub input_features: usize,
    pub skip_channels: usize,
    pub head_channels: usize,
    pub kernel_size: usize,
    /// Width of the factor tables behind the learned adjacency.
    pub embedding_dim: usize,
    pub dropout: f64,
    pub use_spae: bool,
    pub use_tpam: bool,
    pub spae_init: SpaeInit,
    pub spae_frozen: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_size(4, 16, 2, 4)
    }
}

impl ModelConfig {
    /// Everything except the four searched sizes takes its default.
    pub fn with_size(layers: usize, channels: usize, diffusion_depth: usize, heads: usize) -> Self {
        ModelConfig {
            layers,
            channels,
            diffusion_depth,
            heads,
            input_len: 12,
            output_len: 12,
            input_features: crate::data::NUM_FEATURES,
            skip_channels: 2 * channels,
            head_channels: 4 * channels,
            kernel_size: 2,
            embedding_dim: 10,
            dropout: 0.3,
            use_spae: true,
            use_tpam: true,
            spae_init: SpaeInit::Sinusoidal,
            spae_frozen: false,
        }
    }

    /// Largest point of the search grid.
    pub fn paper_best() -> Self {
        ModelConfig::with_size(8, 32, 3, 8)
    }

    /// Small network used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig::with_size(4, 8, 1, 2)
    }

    /// Alternating 1, 2, 1, 2, ...
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.layers).map(|i| if i % 2 == 0 { 1 } else { 2 }).collect()
    }

    /// `1 + Σ d·(k − 1)`.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations().iter().map(|d| d * (self.kernel_size - 1)).sum::<usize>()
    }

    /// Input length after zero left-padding.
    pub fn padded_len(&self) -> usize {
        self.input_len.max(self.receptive_field())
    }

    /// Time steps left after the last layer.
    pub fn final_len(&self) -> usize {
        self.padded_len() + 1 - self.receptive_field()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PastnError::Config(m));
        for (name, v) in [
            ("layers", self.layers),
            ("channels", self.channels),
            ("input_len", self.input_len),
            ("output_len", self.output_len),
            ("input_features", self.input_features),
            ("skip_channels", self.skip_channels),
            ("head_channels", self.head_channels),
            ("kernel_size", self.kernel_size),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.use_tpam && (self.heads == 0 || self.channels % self.heads != 0) {
            return bad(format!("channels {} are not divisible by {} heads", self.channels, self.heads));
        }
        if !self.use_spae && (self.spae_frozen || self.spae_init != SpaeInit::Sinusoidal) {
            return bad("positional table options set while the table is disabled".into());
        }
        Ok(())
    }

    /// Closed-form parameter count for `n` nodes.
    pub fn parameter_count(&self, n: usize) -> usize {
        let c = self.channels;
        let mut total = self.input_features * c + c + 2 * n * self.embedding_dim;
        if self.use_spae {
            total += n * c;
        }
        total += self.layers * self.layer_parameter_count();
        total + self.skip_channels * self.head_channels + self.head_channels + self.head_channels * self.output_len + self.output_len
    }

    fn layer_parameter_count(&self) -> usize {
        let c = self.channels;
        let tcn = 2 * c * c * self.kernel_size + 2 * c;
        let diffusion = 3 * (self.diffusion_depth + 1) * c * c;
        let skip = c * self.skip_channels + self.skip_channels;
        tcn + diffusion + skip + if self.use_tpam { self.tpam_parameter_count() } else { 0 }
    }

    /// Attention projections and layer-norm affine of one layer.
    pub fn tpam_parameter_count(&self) -> usize {
        4 * self.channels * self.channels + 2 * self.channels
    }
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_spae: bool,
    pub no_tpam: bool,
    pub st_only: bool,
    pub spae_random_init: bool,
    pub spae_frozen: bool,
}

/// Applies ablation flags. `st_only` is shorthand for `no_spae + no_tpam`.
pub fn ablation_variant(config: &ModelConfig, flags: AblationFlags) -> Result<ModelConfig> {
    let no_spae = flags.no_spae || flags.st_only;
    let no_tpam = flags.no_tpam || flags.st_only;
    if no_spae && (flags.spae_random_init || flags.spae_frozen) {
        return Err(PastnError::Config(
            "positional table variants cannot be combined with removing the table".into(),
        ));
    }
    let mut out = config.clone();
    if no_spae {
        out.use_spae = false;
        out.spae_init = SpaeInit::Sinusoidal;
        out.spae_frozen = false;
    }
    if no_tpam {
        out.use_tpam = false;
    }
    if flags.spae_random_init {
        out.spae_init = SpaeInit::Random;
    }
    if flags.spae_frozen {
        out.spae_frozen = true;
    }
    Ok(out)
}

/// The six compared variants in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSpae,
    NoTpam,
    StOnly,
    SpaeRandomInit,
    SpaeFrozen,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoSpae,
        Variant::NoTpam,
        Variant::StOnly,
        Variant::SpaeRandomInit,
        Variant::SpaeFrozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpae => "no_spae",
            Variant::NoTpam => "no_tpam",
            Variant::StOnly => "st_only",
            Variant::SpaeRandomInit => "spae_random_init",
            Variant::SpaeFrozen => "spae_frozen",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Variant::Full => {}
            Variant::NoSpae => f.no_spae = true,
            Variant::NoTpam => f.no_tpam = true,
            Variant::StOnly => f.st_only = true,
            Variant::SpaeRandomInit => f.spae_random_init = true,
            Variant::SpaeFrozen => f.spae_frozen = true,
        }
        f
    }
}

#[derive(Clone, Copy, Debug)]
struct TpamIds {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    filter: ParamId,
    gate: ParamId,
    filter_bias: ParamId,
    gate_bias: ParamId,
    diffusion: Vec<ParamId>,
    tpam: Option<TpamIds>,
    skip_weight: ParamId,
    skip_bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    input_weight: ParamId,
    input_bias: ParamId,
    spae: Option<ParamId>,
    e1: ParamId,
    e2: ParamId,
    layers: Vec<LayerIds>,
    head1_weight: ParamId,
    head1_bias: ParamId,
    head2_weight: ParamId,
    head2_bias: ParamId,
}

/// Every learnable of the network plus the configuration that shaped it.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub num_nodes: usize,
    pub store: ParamStore,
    layout: Layout,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.num_nodes == other.num_nodes && self.store == other.store
    }
}

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl ModelParams {
    /// Each parameter draws from its own stream named after it, so variants
    /// that drop a component keep every other initial value unchanged.
    pub fn init(config: &ModelConfig, num_nodes: usize, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        if num_nodes == 0 {
            return Err(PastnError::Config("graph has no nodes".into()));
        }
        let c = config.channels;
        let k = config.kernel_size;
        let mut s = ParamStore::new();
        let input_weight = s.push_uniform(seed, "input.weight", vec![config.input_features, c], bound(config.input_features));
        let input_bias = s.push("input.bias", Tensor::zeros(vec![c]), true);
        let spae = config.use_spae.then(|| {
            let t = SpaeTable::init(num_nodes, c, config.spae_init, seed);
            s.push("spae.table", t.table, !config.spae_frozen)
        });
        let e1 = s.push_uniform(seed, "graph.e1", vec![num_nodes, config.embedding_dim], 1.0);
        let e2 = s.push_uniform(seed, "graph.e2", vec![num_nodes, config.embedding_dim], 1.0);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |part: &str| format!("layer{l}.{part}");
            let filter = s.push_uniform(seed, &p("tcn.filter"), vec![c, c, k], bound(c * k));
            let gate = s.push_uniform(seed, &p("tcn.gate"), vec![c, c, k], bound(c * k));
            let filter_bias = s.push(p("tcn.filter_bias"), Tensor::zeros(vec![c]), true);
            let gate_bias = s.push(p("tcn.gate_bias"), Tensor::zeros(vec![c]), true);
            let diffusion = (0..3 * (config.diffusion_depth + 1))
                .map(|i| s.push_uniform(seed, &p(&format!("diffusion.w{}_{}", i / 3, i % 3)), vec![c, c], bound(c)))
                .collect();
            let tpam = config.use_tpam.then(|| TpamIds {
                query: s.push_uniform(seed, &p("tpam.query"), vec![c, c], bound(c)),
                key: s.push_uniform(seed, &p("tpam.key"), vec![c, c], bound(c)),
                value: s.push_uniform(seed, &p("tpam.value"), vec![c, c], bound(c)),
                output: s.push_uniform(seed, &p("tpam.output"), vec![c, c], bound(c)),
                gamma: s.push(p("tpam.gamma"), Tensor::ones(vec![c]), true),
                beta: s.push(p("tpam.beta"), Tensor::zeros(vec![c]), true),
            });
            let skip_weight = s.push_uniform(seed, &p("skip.weight"), vec![c, config.skip_channels], bound(c));
            let skip_bias = s.push(p("skip.bias"), Tensor::zeros(vec![config.skip_channels]), true);
            layers.push(LayerIds { filter, gate, filter_bias, gate_bias, diffusion, tpam, skip_weight, skip_bias });
        }
        let (cs, ch) = (config.skip_channels, config.head_channels);
        let head1_weight = s.push_uniform(seed, "head1.weight", vec![cs, ch], bound(cs));
        let head1_bias = s.push("head1.bias", Tensor::zeros(vec![ch]), true);
        let head2_weight = s.push_uniform(seed, "head2.weight", vec![ch, config.output_len], bound(ch));
        let head2_bias = s.push("head2.bias", Tensor::zeros(vec![config.output_len]), true);
        Ok(ModelParams {
            config: config.clone(),
            num_nodes,
            store: s,
            layout: Layout {
                input_weight,
                input_bias,
                spae,
                e1,
                e2,
                layers,
                head1_weight,
                head1_bias,
                head2_weight,
                head2_bias,
            },
        })
    }

    pub fn num_values(&self) -> usize {
        self.store.num_values()
    }

    pub fn spae_table(&self) -> Option<&Tensor> {
        self.layout.spae.map(|id| &self.store.get(id).value)
    }

    pub fn spae_table_mut(&mut self) -> Option<&mut Tensor> {
        self.layout.spae.map(|id| &mut self.store.get_mut(id).value)
    }

    /// Bias of the last head projection.
    pub fn output_bias_mut(&mut self) -> &mut Tensor {
        &mut self.store.get_mut(self.layout.head2_bias).value
    }

    /// Sets every value to zero.
    pub fn zero_all(&mut self) {
        for p in self.store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Binds the parameters to `tape` and runs [`forward`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        bundle: &GraphBundle,
        mode: Mode<'_>,
    ) -> Result<(Bound, ForwardOutput)> {
        let bound = self.store.bind(tape);
        let xv = tape.constant(x.clone());
        let out = forward(tape, self, &bound, xv, bundle, mode)?;
        Ok((bound, out))
    }
}

/// Training draws dropout masks from the given stream; evaluation is deterministic.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B x T' x N x 1`, normalised units.
    pub prediction: Var,
    /// Output of every layer, `B x N x T_l x C`.
    pub hidden: Vec<Var>,
    /// Per-layer attention maps, one `B x N x T_l x T_l` map per head.
    pub attention: Vec<Vec<Var>>,
}

/// Runs the network on `x: B x T x N x D_feat`.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    x: Var,
    bundle: &GraphBundle,
    mut mode: Mode<'_>,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let lay = &params.layout;
    let n = params.num_nodes;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != cfg.input_len || shape[2] != n || shape[3] != cfg.input_features {
        return Err(PastnError::Dimension(format!(
            "model expects [B, {}, {n}, {}] input, got {shape:?}",
            cfg.input_len, cfg.input_features
        )));
    }
    if bundle.num_nodes() != n {
        return Err(PastnError::Config(format!("graph has {} nodes, model was built for {n}", bundle.num_nodes())));
    }
    let b = shape[0];
    let mut h = tape.permute(x, &[0, 2, 1, 3])?;
    let pad = cfg.padded_len() - cfg.input_len;
    if pad > 0 {
        let zeros = tape.constant(Tensor::zeros(vec![b, n, pad, cfg.input_features]));
        h = tape.concat(&[zeros, h], 2)?;
    }
    h = tape.linear(h, bound[lay.input_weight])?;
    h = tape.add(h, bound[lay.input_bias])?;
    if let Some(id) = lay.spae {
        h = apply_spae(tape, h, bound[id])?;
    }
    let adaptive = adaptive_adjacency(tape, bound[lay.e1], bound[lay.e2])?;
    let supports = Supports::bind(tape, bundle, adaptive);

    let dilations = cfg.dilations();
    let mut hidden = Vec::with_capacity(cfg.layers);
    let mut attention = Vec::with_capacity(cfg.layers);
    let mut skip: Option<Var> = None;
    for (l, ids) in lay.layers.iter().enumerate() {
        let tcn = GatedTcn {
            filter: bound[ids.filter],
            gate: bound[ids.gate],
            filter_bias: bound[ids.filter_bias],
            gate_bias: bound[ids.gate_bias],
            dilation: dilations[l],
            layer: l,
        };
        let diffusion = DiffusionWeights {
            weights: ids.diffusion.iter().map(|&id| bound[id]).collect(),
            depth: cfg.diffusion_depth,
        };
        let rng = match &mut mode {
            Mode::Train(r) => Some(&mut **r),
            Mode::Eval => None,
        };
        let z = stlm_forward(tape, h, &tcn, &diffusion, &supports, cfg.dropout, rng)?;
        let z = match ids.tpam {
            Some(t) => {
                let p = TpamParams {
                    query: bound[t.query],
                    key: bound[t.key],
                    value: bound[t.value],
                    output: bound[t.output],
                    gamma: bound[t.gamma],
                    beta: bound[t.beta],
                    heads: cfg.heads,
                };
                let att = tpam_forward(tape, z, &p)?;
                attention.push(att.maps);
                att.output
            }
            None => {
                attention.push(Vec::new());
                z
            }
        };
        let t_in = tape.shape(h)[2];
        let t_out = tape.shape(z)[2];
        let last = tape.slice(z, 2, t_out - 1, 1)?;
        let s = tape.linear(last, bound[ids.skip_weight])?;
        let s = tape.add(s, bound[ids.skip_bias])?;
        skip = Some(match skip {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        let residual = tape.slice(h, 2, t_in - t_out, t_out)?;
        h = tape.add(z, residual)?;
        hidden.push(h);
    }
    let skip = skip.ok_or_else(|| PastnError::Config("network has no layers".into()))?;
    let y = tape.relu(skip);
    let y = tape.linear(y, bound[lay.head1_weight])?;
    let y = tape.add(y, bound[lay.head1_bias])?;
    let y = tape.relu(y);
    let y = tape.linear(y, bound[lay.head2_weight])?;
    let y = tape.add(y, bound[lay.head2_bias])?;
    // [B, N, 1, T'] -> [B, T', N, 1]
    let y = tape.reshape(y, &[b, n, cfg.output_len])?;
    let y = tape.permute(y, &[0, 2, 1])?;
    let prediction = tape.reshape(y, &[b, cfg.output_len, n, 1])?;
    Ok(ForwardOutput { prediction, hidden, attention })
}

/// Forecast `T' x N` in original units from a normalised `T x N x D_feat` history.
pub fn predict(history: &Tensor, params: &ModelParams, bundle: &GraphBundle, scaler: &Scaler) -> Result<Tensor> {
    if scaler.num_nodes != params.num_nodes {
        return Err(PastnError::Config(format!(
            "scaler was fitted on {} nodes, model has {}",
            scaler.num_nodes, params.num_nodes
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(history.shape());
    let x = history.clone().reshape(shape)?;
    let mut tape = Tape::new();
    let (_, out) = params.forward(&mut tape, &x, bundle, Mode::Eval)?;
    let cfg = &params.config;
    let y = tape.value(out.prediction).clone().reshape(vec![cfg.output_len, params.num_nodes])?;
    Ok(scaler.denormalize_tensor(&y))
}
