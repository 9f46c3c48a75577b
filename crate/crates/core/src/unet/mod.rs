//! Four-level encoder-decoder whose blocks are second-order ODE blocks (DB),
//! first-order ODE blocks (FO) or plain convolution pairs (PLN).
//!
//! Every level starts with a 1×1 convolution that sets the channel count, so
//! the block itself can be shape-preserving:
//!
//! ```text
//! enc l:   adapt(c_{l-1} → c_l) → block(c_l) → [skip] → downsample
//! bottom:  block(c_L)
//! dec l:   upsample → concat skip → adapt(· → c_l) → block(c_l)
//! head:    1×1 conv(c_0 → out) → sigmoid
//! ```

mod train;

pub use train::{
    convergence_compare, epochs_to_tau, evaluate, train, train_split, CompareResult, EpochLog,
    TrainConfig, TrainLog,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::node::{container, ConvField, ConvMap, Field};
use crate::solvers::{IntegrationConfig, SolverKind};
use crate::tensor::{Activation, Graph, Tensor, Var};
use crate::{DynamicBlock, FirstOrderBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    DB,
    FO,
    PLN,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::DB, BlockKind::FO, BlockKind::PLN];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::DB => "DB",
            BlockKind::FO => "FO",
            BlockKind::PLN => "PLN",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DB" => Ok(BlockKind::DB),
            "FO" => Ok(BlockKind::FO),
            "PLN" => Ok(BlockKind::PLN),
            _ => Err(Error::Config(format!("unknown block kind `{s}` (expected DB, FO or PLN)"))),
        }
    }
}

/// Initialisation of PLN blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlainInit {
    #[default]
    He,
    /// `conv1: x ↦ [x; −x]`, `conv2: [p; q] ↦ p − q`, so `relu` between them
    /// reconstructs `x` and the block is the identity.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub levels: usize,
    pub filters: Vec<usize>,
    pub block_kind: BlockKind,
    pub solver: SolverKind,
    pub steps_per_block: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub plain_init: PlainInit,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 4,
            filters: vec![3, 6, 12, 24],
            block_kind: BlockKind::DB,
            solver: SolverKind::RK4,
            steps_per_block: 8,
            in_channels: 1,
            out_channels: 1,
            plain_init: PlainInit::He,
        }
    }
}

impl UNetConfig {
    pub fn with_kind(kind: BlockKind) -> Self {
        UNetConfig {
            block_kind: kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.filters.len() != self.levels {
            return Err(Error::Config(format!(
                "{} filter counts for {} levels",
                self.filters.len(),
                self.levels
            )));
        }
        if self.filters[0] == 0 || self.filters.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "filters must be positive and strictly increasing, got {:?}",
                self.filters
            )));
        }
        if self.steps_per_block == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(
                "steps_per_block, in_channels and out_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    fn span(&self) -> Result<IntegrationConfig> {
        IntegrationConfig::unit(self.steps_per_block)
    }
}

#[derive(Clone, Debug)]
enum BlockImpl {
    Dynamic {
        accel: Arc<dyn Field>,
        init: Arc<dyn Field>,
    },
    FirstOrder {
        field: Arc<dyn Field>,
    },
    Plain,
}

#[derive(Clone, Debug)]
struct BlockSlot {
    imp: BlockImpl,
    /// Index of the first parameter; parameters are contiguous.
    start: usize,
    len: usize,
}

#[derive(Clone, Debug)]
struct Level {
    /// Index of the 1×1 adapt conv weight; the bias follows it.
    adapt: usize,
    block: BlockSlot,
}

#[derive(Clone, Debug)]
pub struct ContinuousUNet {
    config: UNetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    encoder: Vec<Level>,
    bottleneck: BlockSlot,
    /// Deepest level first.
    decoder: Vec<Level>,
    head: usize,
}

fn he_normal(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn identity_plain(c: usize) -> Vec<Tensor> {
    let mut w1 = Tensor::zeros([2 * c, c, 3, 3]);
    let mut w2 = Tensor::zeros([c, 2 * c, 3, 3]);
    for i in 0..c {
        // centre tap of the 3×3 kernel
        w1.data_mut()[(i * c + i) * 9 + 4] = 1.0;
        w1.data_mut()[((c + i) * c + i) * 9 + 4] = -1.0;
        w2.data_mut()[(i * 2 * c + i) * 9 + 4] = 1.0;
        w2.data_mut()[(i * 2 * c + c + i) * 9 + 4] = -1.0;
    }
    vec![w1, Tensor::zeros([2 * c]), w2, Tensor::zeros([c])]
}

struct Builder<'a> {
    config: &'a UNetConfig,
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn conv1x1(&mut self, prefix: &str, cin: usize, cout: usize, zero: bool) -> usize {
        let w = if zero {
            Tensor::zeros([cout, cin, 1, 1])
        } else {
            he_normal([cout, cin, 1, 1], &mut self.rng)
        };
        let i = self.push(format!("{prefix}.weight"), w);
        self.push(format!("{prefix}.bias"), Tensor::zeros([cout]));
        i
    }

    fn named(&mut self, prefix: &str, field: &dyn Field, values: Vec<Tensor>) -> usize {
        let start = self.params.len();
        for ((name, _), t) in field.param_shapes().into_iter().zip(values) {
            self.push(format!("{prefix}.{name}"), t);
        }
        start
    }

    fn block(&mut self, prefix: &str, c: usize) -> BlockSlot {
        let start = self.params.len();
        let imp = match self.config.block_kind {
            BlockKind::DB => {
                let accel: Arc<dyn Field> = Arc::new(ConvField::acceleration(c));
                let init: Arc<dyn Field> = Arc::new(ConvMap { channels: c });
                let a = accel.init_params(&mut self.rng);
                self.named(&format!("{prefix}.accel"), accel.as_ref(), a);
                let g = init.init_params(&mut self.rng);
                self.named(&format!("{prefix}.init"), init.as_ref(), g);
                BlockImpl::Dynamic { accel, init }
            }
            BlockKind::FO => {
                let field: Arc<dyn Field> = Arc::new(ConvField::velocity(c));
                let p = field.init_params(&mut self.rng);
                self.named(&format!("{prefix}.field"), field.as_ref(), p);
                BlockImpl::FirstOrder { field }
            }
            BlockKind::PLN => {
                let values = match self.config.plain_init {
                    PlainInit::He => vec![
                        he_normal([2 * c, c, 3, 3], &mut self.rng),
                        Tensor::zeros([2 * c]),
                        he_normal([c, 2 * c, 3, 3], &mut self.rng),
                        Tensor::zeros([c]),
                    ],
                    PlainInit::Identity => identity_plain(c),
                };
                let names = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"];
                for (n, t) in names.iter().zip(values) {
                    self.push(format!("{prefix}.{n}"), t);
                }
                BlockImpl::Plain
            }
        };
        BlockSlot {
            imp,
            start,
            len: self.params.len() - start,
        }
    }
}

impl ContinuousUNet {
    /// Deterministic initialisation from `seed`. ODE blocks start as the
    /// identity and the head starts at zero, so a fresh net outputs 0.5
    /// everywhere.
    pub fn build(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            params: Vec::new(),
        };
        let f = &config.filters;
        let mut encoder = Vec::with_capacity(config.levels);
        let mut cin = config.in_channels;
        for (l, &c) in f.iter().enumerate() {
            let adapt = b.conv1x1(&format!("enc{l}.adapt"), cin, c, false);
            let block = b.block(&format!("enc{l}.block"), c);
            encoder.push(Level { adapt, block });
            cin = c;
        }
        let bottleneck = b.block("bottleneck.block", cin);
        let mut decoder = Vec::with_capacity(config.levels);
        for l in (0..config.levels).rev() {
            let c = f[l];
            let adapt = b.conv1x1(&format!("dec{l}.adapt"), cin + c, c, false);
            let block = b.block(&format!("dec{l}.block"), c);
            decoder.push(Level { adapt, block });
            cin = c;
        }
        let head = b.conv1x1("head", cin, config.out_channels, true);
        Ok(ContinuousUNet {
            config: config.clone(),
            names: b.names,
            params: b.params,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    /// Overwrite one parameter; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))?;
        self.params[i].same_shape(&value, "set_param")?;
        self.params[i] = value;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Add the parameters to `graph` as leaves.
    pub fn param_vars(&self, graph: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.clone(), trainable))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let d = self.config.divisor();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape(
                "unet forward",
                format!(
                    "expected [N,{},H,W], got {shape:?}",
                    self.config.in_channels
                ),
            ));
        }
        if shape[2] % d != 0 || shape[3] % d != 0 {
            return Err(Error::shape(
                "unet forward",
                format!("spatial size {}×{} not divisible by {d}", shape[2], shape[3]),
            ));
        }
        Ok(())
    }

    fn conv(&self, graph: &mut Graph, x: Var, vars: &[Var], w: usize, padding: usize) -> Result<Var> {
        graph.conv2d(x, vars[w], vars[w + 1], padding)
    }

    fn block(&self, graph: &mut Graph, x: Var, vars: &[Var], slot: &BlockSlot) -> Result<Var> {
        let pv = &vars[slot.start..slot.start + slot.len];
        let values = || pv.iter().map(|v| graph.value(*v).clone()).collect::<Vec<_>>();
        let span = self.config.span()?;
        match &slot.imp {
            BlockImpl::Dynamic { accel, init } => {
                let all = values();
                let n_accel = accel.param_shapes().len();
                let block = DynamicBlock::new(
                    accel.clone(),
                    all[..n_accel].to_vec(),
                    Some(init.clone()),
                    all[n_accel..].to_vec(),
                    span,
                    self.config.solver,
                )?;
                block.record(graph, x, pv)
            }
            BlockImpl::FirstOrder { field } => {
                let block = FirstOrderBlock::new(field.clone(), values(), span, self.config.solver)?;
                block.record(graph, x, pv)
            }
            BlockImpl::Plain => {
                let h = graph.conv2d(x, pv[0], pv[1], 1)?;
                let h = graph.activation(h, Activation::Relu);
                graph.conv2d(h, pv[2], pv[3], 1)
            }
        }
    }

    /// Record the network on `graph`; `vars` come from [`Self::param_vars`].
    /// Returns the sigmoid output `[N,out,H,W]`.
    pub fn record(&self, graph: &mut Graph, input: Var, vars: &[Var]) -> Result<Var> {
        self.check_input(graph.value(input).shape())?;
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "unet record",
                format!("{} vars for {} parameters", vars.len(), self.params.len()),
            ));
        }
        let mut x = input;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            x = self.conv(graph, x, vars, level.adapt, 0)?;
            x = self.block(graph, x, vars, &level.block)?;
            skips.push(x);
            x = graph.downsample(x)?;
        }
        x = self.block(graph, x, vars, &self.bottleneck)?;
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            x = graph.upsample(x)?;
            x = graph.concat_channels(x, skip)?;
            x = self.conv(graph, x, vars, level.adapt, 0)?;
            x = self.block(graph, x, vars, &level.block)?;
        }
        let logits = self.conv(graph, x, vars, self.head, 0)?;
        Ok(graph.activation(logits, Activation::Sigmoid))
    }

    /// Mask probabilities for `[N,C,H,W]` or `[C,H,W]` images, same rank out.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let rank = images.ndim();
        let batch = images.clone().as_batch()?;
        let mut g = Graph::new();
        let x = g.constant(batch);
        let vars = self.param_vars(&mut g, false);
        let out = self.record(&mut g, x, &vars)?;
        let out = g.value(out).clone();
        if rank == 3 {
            let s = out.shape()[1..].to_vec();
            out.reshape(s)
        } else {
            Ok(out)
        }
    }

    /// Mean BCE of one sample and its gradient w.r.t. every parameter.
    pub fn loss_and_grads(&self, image: &Tensor, mask: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let x = g.constant(image.clone().as_batch()?);
        let target = g.constant(mask.clone().as_batch()?);
        let vars = self.param_vars(&mut g, true);
        let pred = self.record(&mut g, x, &vars)?;
        let loss = g.bce_loss(pred, target)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(&self.params)
            .map(|(v, p)| grads.get_or_zeros(*v, p))
            .collect();
        Ok((value, out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, &Tensor)> = self.names.iter().cloned().zip(&self.params).collect();
        let meta = serde_json::json!({ "unet": self.config });
        container::save(path, &named, meta)
    }

    /// Load a checkpoint written by [`Self::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = container::load(path)?;
        let config: UNetConfig = serde_json::from_value(header.meta["unet"].clone())
            .map_err(|e| Error::Container(format!("checkpoint config: {e}")))?;
        let mut net = Self::build(&config, 0)?;
        if tensors.len() != net.params.len() {
            return Err(Error::Container(format!(
                "checkpoint holds {} tensors, config needs {}",
                tensors.len(),
                net.params.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != net.names[i] || t.shape() != net.params[i].shape() {
                return Err(Error::Container(format!(
                    "tensor {i}: checkpoint has `{name}` {:?}, config expects `{}` {:?}",
                    t.shape(),
                    net.names[i],
                    net.params[i].shape()
                )));
            }
            net.params[i] = t;
        }
        Ok(net)
    }

    /// As [`Self::load`], failing unless the stored config equals `expected`.
    pub fn load_checked(path: &Path, expected: &UNetConfig) -> Result<Self> {
        let net = Self::load(path)?;
        if &net.config != expected {
            return Err(Error::Config(format!(
                "checkpoint {} was built with a different network config",
                path.display()
            )));
        }
        Ok(net)
    }
}
