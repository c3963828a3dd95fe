//! Model factory for the channel-attention temporal CNN family.
//!
//! A model is described by a [`ModelConfig`]: which weight-sharing layout the
//! convolution stages use ([`Extraction`]), which stage geometry they follow
//! ([`Strategy`]), and how attention feeds the classifier heads
//! ([`AttentionMode`]). The factory turns a config plus a seed into a
//! deterministic set of named parameter tensors, and `forward` wires those
//! parameters into a computation graph for a batch.
//!
//! Parameter names are stable and sorted (`BTreeMap`), which checkpointing
//! and the optimizer rely on:
//!
//! ```text
//! conv{stage}.bank{k}.weight / .bias
//! attention.w / .b / .u
//! head.main.{layer}.weight / .bias
//! head.aux.{layer}.weight / .bias
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId, Padding};
use crate::layers::{
    channel_attention, conv_temporal, dense, Activation, AttentionNodes, ConvBlockSpec,
    LayerError,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Layer(#[from] LayerError),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which channels share convolution weight banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Extraction {
    /// One bank per channel at every stage.
    #[serde(rename = "A")]
    PerChannel,
    /// One bank per correlated channel group at every stage.
    #[serde(rename = "B")]
    PerGroup,
    /// Group banks for all stages except the last, which uses a single bank
    /// shared by every channel (channels are still convolved separately).
    #[serde(rename = "C")]
    GroupedThenShared,
}

/// Stage geometry of the convolutional extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Two stages, kernel 7, stride 2, valid padding: the series shrinks.
    #[serde(rename = "i")]
    StridedValid,
    /// Three stages, kernel 9, stride 1, same padding: length is preserved.
    #[serde(rename = "ii")]
    SamePadded,
}

impl Strategy {
    pub fn stage_count(self) -> usize {
        match self {
            Strategy::StridedValid => 2,
            Strategy::SamePadded => 3,
        }
    }

    pub fn default_kernel(self) -> usize {
        match self {
            Strategy::StridedValid => 7,
            Strategy::SamePadded => 9,
        }
    }

    pub fn stride(self) -> usize {
        match self {
            Strategy::StridedValid => 2,
            Strategy::SamePadded => 1,
        }
    }

    pub fn padding(self) -> Padding {
        match self {
            Strategy::StridedValid => Padding::Valid,
            Strategy::SamePadded => Padding::Same,
        }
    }
}

/// How attention output reaches the classifier heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// One head on the concatenation of attention-weighted channel features.
    Single,
    /// Main head on the unweighted concatenation plus an auxiliary head on
    /// the attention-pooled vector; both contribute to the loss.
    Multi,
    /// No attention parameters at all; one head on the plain concatenation.
    None,
}

/// Full architectural description of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub extraction: Extraction,
    pub strategy: Strategy,
    pub attention_mode: AttentionMode,
    pub num_channels: usize,
    pub num_timesteps: usize,
    pub num_classes: usize,
    /// Partition of channel indices into correlated groups. Empty means
    /// every channel is its own group.
    #[serde(default)]
    pub channel_groups: Vec<Vec<usize>>,
    /// Output feature count per stage; length must equal the strategy's
    /// stage count.
    pub conv_widths: Vec<usize>,
    /// Kernel length per stage; empty means the strategy default for every
    /// stage.
    #[serde(default)]
    pub kernel_lens: Vec<usize>,
    /// Hidden size of the attention scorer.
    #[serde(default = "default_d_a")]
    pub d_a: usize,
    /// Hidden layer widths of the classifier heads.
    #[serde(default = "default_head_widths")]
    pub head_widths: Vec<usize>,
    /// Dropout rate on head hidden activations during training.
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

fn default_d_a() -> usize {
    64
}

fn default_head_widths() -> Vec<usize> {
    vec![256]
}

fn default_dropout() -> f64 {
    0.2
}

impl ModelConfig {
    /// Kernel lengths resolved against the strategy default.
    pub fn resolved_kernels(&self) -> Vec<usize> {
        if self.kernel_lens.is_empty() {
            vec![self.strategy.default_kernel(); self.strategy.stage_count()]
        } else {
            self.kernel_lens.clone()
        }
    }

    /// Channel groups resolved to singletons when none are given.
    pub fn resolved_groups(&self) -> Vec<Vec<usize>> {
        if self.channel_groups.is_empty() {
            (0..self.num_channels).map(|c| vec![c]).collect()
        } else {
            self.channel_groups.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_channels == 0 || self.num_timesteps == 0 {
            return invalid("channel and timestep counts must be positive".into());
        }
        if self.num_classes < 2 {
            return invalid(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            ));
        }
        let stages = self.strategy.stage_count();
        if self.conv_widths.len() != stages {
            return invalid(format!(
                "strategy has {stages} stages but {} widths given",
                self.conv_widths.len()
            ));
        }
        if self.conv_widths.iter().any(|&w| w == 0) {
            return invalid("conv widths must be positive".into());
        }
        let kernels = self.resolved_kernels();
        if kernels.len() != stages {
            return invalid(format!(
                "strategy has {stages} stages but {} kernel lengths given",
                kernels.len()
            ));
        }
        if kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return invalid(format!("kernel lengths must be odd, got {kernels:?}"));
        }
        if self.d_a == 0 {
            return invalid("attention hidden size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return invalid(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        // groups must partition the channel indices
        let groups = self.resolved_groups();
        let mut seen = vec![false; self.num_channels];
        for group in &groups {
            if group.is_empty() {
                return invalid("empty channel group".into());
            }
            for &c in group {
                if c >= self.num_channels {
                    return invalid(format!(
                        "group channel {c} out of range for {} channels",
                        self.num_channels
                    ));
                }
                if seen[c] {
                    return invalid(format!("channel {c} appears in more than one group"));
                }
                seen[c] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return invalid(format!("channel {missing} belongs to no group"));
        }
        // temporal geometry must stay representable through all stages
        self.final_timesteps()?;
        Ok(())
    }

    /// Series length after the last convolution stage.
    pub fn final_timesteps(&self) -> Result<usize, ModelError> {
        let mut t = self.num_timesteps;
        for spec in self.stage_specs()? {
            t = spec.output_len(t)?;
        }
        Ok(t)
    }

    /// Flattened per-channel feature length fed to attention and the heads.
    pub fn feature_len(&self) -> Result<usize, ModelError> {
        Ok(self.conv_widths[self.strategy.stage_count() - 1] * self.final_timesteps()?)
    }

    /// Bank count of stage `s` under this extraction layout.
    fn stage_bank_count(&self, stage: usize) -> usize {
        let last = self.strategy.stage_count() - 1;
        match self.extraction {
            Extraction::PerChannel => self.num_channels,
            Extraction::PerGroup => self.resolved_groups().len(),
            Extraction::GroupedThenShared => {
                if stage == last {
                    1
                } else {
                    self.resolved_groups().len()
                }
            }
        }
    }

    /// Channel-to-bank map of stage `s`.
    fn stage_sharing_map(&self, stage: usize) -> Vec<usize> {
        let last = self.strategy.stage_count() - 1;
        match self.extraction {
            Extraction::PerChannel => (0..self.num_channels).collect(),
            Extraction::PerGroup => self.group_membership(),
            Extraction::GroupedThenShared => {
                if stage == last {
                    vec![0; self.num_channels]
                } else {
                    self.group_membership()
                }
            }
        }
    }

    /// `membership[c]` = index of the group channel `c` belongs to.
    fn group_membership(&self) -> Vec<usize> {
        let groups = self.resolved_groups();
        let mut membership = vec![0; self.num_channels];
        for (gi, group) in groups.iter().enumerate() {
            for &c in group {
                membership[c] = gi;
            }
        }
        membership
    }

    /// Per-stage conv block specs (kernel, features, stride, padding, map).
    pub fn stage_specs(&self) -> Result<Vec<ConvBlockSpec>, ModelError> {
        let kernels = self.resolved_kernels();
        let stages = self.strategy.stage_count();
        if self.conv_widths.len() != stages || kernels.len() != stages {
            return Err(ModelError::InvalidConfig(format!(
                "strategy has {stages} stages but {} widths / {} kernels given",
                self.conv_widths.len(),
                kernels.len()
            )));
        }
        let mut specs = Vec::with_capacity(stages);
        let mut f_in = 1;
        for s in 0..stages {
            specs.push(ConvBlockSpec {
                kernel_len: kernels[s],
                in_features: f_in,
                out_features: self.conv_widths[s],
                stride: self.strategy.stride(),
                padding: self.strategy.padding(),
                sharing_map: self.stage_sharing_map(s),
            });
            f_in = self.conv_widths[s];
        }
        Ok(specs)
    }

    /// Layer dimensions of the main head: input, hidden widths, classes.
    fn main_head_dims(&self) -> Result<Vec<usize>, ModelError> {
        let mut dims = vec![self.num_channels * self.feature_len()?];
        dims.extend_from_slice(&self.head_widths);
        dims.push(self.num_classes);
        Ok(dims)
    }

    /// Layer dimensions of the auxiliary head (multi mode only).
    fn aux_head_dims(&self) -> Result<Vec<usize>, ModelError> {
        let mut dims = vec![self.feature_len()?];
        dims.extend_from_slice(&self.head_widths);
        dims.push(self.num_classes);
        Ok(dims)
    }
}

/// Parameter totals split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub conv: usize,
    pub attention: usize,
    pub heads: usize,
    pub total: usize,
}

/// Scalar parameters of one convolution stage: `banks * (f_out*f_in*k + f_out)`.
pub(crate) fn conv_stage_params(banks: usize, f_in: usize, f_out: usize, k: usize) -> usize {
    banks * (f_out * f_in * k + f_out)
}

fn head_params(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// A built model: its config plus named parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

/// Graph outputs of one forward pass.
pub struct ForwardOutput {
    /// `(n, classes)` softmax probabilities of the main head.
    pub main_probs: NodeId,
    /// Auxiliary head probabilities, present in multi mode.
    pub aux_probs: Option<NodeId>,
    /// `(n, channels)` attention gates, absent when attention is off.
    pub alphas: Option<NodeId>,
}

/// Supplies dropout masks during training. Entries are 0 with probability
/// `rate` and `1/(1-rate)` otherwise, so activations keep their expectation.
pub struct DropoutMasks<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha20Rng,
}

impl DropoutMasks<'_> {
    fn mask(&mut self, shape: &[usize]) -> Tensor {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let data = (0..crate::tensor::numel_of(shape))
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(data, shape).expect("mask shape")
    }
}

impl Model {
    /// Builds a model with Glorot-uniform weights and zero biases, drawn
    /// deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();

        let glorot = |rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..crate::tensor::numel_of(shape))
                .map(|_| rng.gen_range(-bound..bound))
                .collect::<Vec<f64>>();
            Tensor::new(data, shape).expect("init shape")
        };

        for (s, spec) in config.stage_specs()?.iter().enumerate() {
            for bank in 0..config.stage_bank_count(s) {
                let w = glorot(
                    &mut rng,
                    &[spec.out_features, spec.in_features, spec.kernel_len],
                    spec.in_features * spec.kernel_len,
                    spec.out_features * spec.kernel_len,
                );
                params.insert(format!("conv{s}.bank{bank}.weight"), w);
                params.insert(
                    format!("conv{s}.bank{bank}.bias"),
                    Tensor::zeros(&[spec.out_features]),
                );
            }
        }

        if config.attention_mode != AttentionMode::None {
            let n_feat = config.feature_len()?;
            let d_a = config.d_a;
            params.insert(
                "attention.w".into(),
                glorot(&mut rng, &[n_feat, d_a], n_feat, d_a),
            );
            params.insert("attention.b".into(), Tensor::zeros(&[d_a]));
            params.insert("attention.u".into(), glorot(&mut rng, &[d_a], d_a, 1));
        }

        let add_head = |rng: &mut ChaCha20Rng,
                            params: &mut BTreeMap<String, Tensor>,
                            name: &str,
                            dims: &[usize]| {
            for (j, w) in dims.windows(2).enumerate() {
                let (d_in, d_out) = (w[0], w[1]);
                params.insert(
                    format!("head.{name}.{j}.weight"),
                    glorot(rng, &[d_in, d_out], d_in, d_out),
                );
                params.insert(format!("head.{name}.{j}.bias"), Tensor::zeros(&[d_out]));
            }
        };
        add_head(&mut rng, &mut params, "main", &config.main_head_dims()?);
        if config.attention_mode == AttentionMode::Multi {
            add_head(&mut rng, &mut params, "aux", &config.aux_head_dims()?);
        }

        Ok(Model { config, params })
    }

    /// Reassembles a model from a config and previously saved parameters,
    /// verifying that the parameter set matches what the config implies.
    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self, ModelError> {
        let reference = Model::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, tensor) in &reference.params {
            match params.get(name) {
                None => {
                    return Err(ModelError::InvalidConfig(format!(
                        "missing parameter {name}"
                    )))
                }
                Some(t) if t.shape() != tensor.shape() => {
                    return Err(ModelError::InvalidConfig(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        tensor.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    /// Closed-form parameter totals; always equals the sum of tensor sizes.
    pub fn count_params(config: &ModelConfig) -> Result<ParamCount, ModelError> {
        config.validate()?;
        let mut conv = 0;
        let mut f_in = 1;
        let kernels = config.resolved_kernels();
        for s in 0..config.strategy.stage_count() {
            conv += conv_stage_params(
                config.stage_bank_count(s),
                f_in,
                config.conv_widths[s],
                kernels[s],
            );
            f_in = config.conv_widths[s];
        }
        let attention = if config.attention_mode == AttentionMode::None {
            0
        } else {
            let n_feat = config.feature_len()?;
            n_feat * config.d_a + config.d_a + config.d_a
        };
        let mut heads = head_params(&config.main_head_dims()?);
        if config.attention_mode == AttentionMode::Multi {
            heads += head_params(&config.aux_head_dims()?);
        }
        Ok(ParamCount {
            conv,
            attention,
            heads,
            total: conv + attention + heads,
        })
    }

    /// Inserts every parameter into `g` as a gradient-tracked leaf and
    /// returns the name-to-node map used by [`Model::forward`].
    pub fn attach(&self, g: &mut Graph) -> BTreeMap<String, NodeId> {
        self.params
            .iter()
            .map(|(name, tensor)| {
                let leaf = g.leaf(tensor.clone().with_requires_grad());
                (name.clone(), leaf)
            })
            .collect()
    }

    /// Runs the network on a batch.
    ///
    /// `x` must be `(n, channels, timesteps)`. When `dropout` is given, head
    /// hidden activations are masked; masks are drawn main-head-first, layer
    /// by layer, then aux head — callers that replay RNG streams rely on
    /// that order.
    pub fn forward(
        &self,
        g: &mut Graph,
        nodes: &BTreeMap<String, NodeId>,
        x: NodeId,
        mut dropout: Option<&mut DropoutMasks>,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.config;
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != cfg.num_channels || shape[2] != cfg.num_timesteps {
            return Err(ModelError::InvalidConfig(format!(
                "input {shape:?} does not match {} channels x {} timesteps",
                cfg.num_channels, cfg.num_timesteps
            )));
        }
        let n = shape[0];
        let node = |name: &str| -> Result<NodeId, ModelError> {
            nodes
                .get(name)
                .copied()
                .ok_or_else(|| ModelError::InvalidConfig(format!("missing node for {name}")))
        };

        // convolutional extractor
        let mut feat = g.reshape(x, &[n, cfg.num_channels, 1, cfg.num_timesteps])?;
        for (s, spec) in cfg.stage_specs()?.iter().enumerate() {
            let banks = (0..cfg.stage_bank_count(s))
                .map(|bank| {
                    Ok((
                        node(&format!("conv{s}.bank{bank}.weight"))?,
                        node(&format!("conv{s}.bank{bank}.bias"))?,
                    ))
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            feat = conv_temporal(g, feat, spec, &banks)?;
            feat = g.relu(feat)?;
        }

        // flatten per channel: (n, B, f_last, t_final) -> (n, B, n_feat)
        let n_feat = cfg.feature_len()?;
        let h = g.reshape(feat, &[n, cfg.num_channels, n_feat])?;

        let run_head = |g: &mut Graph,
                            input: NodeId,
                            name: &str,
                            dims: &[usize],
                            dropout: &mut Option<&mut DropoutMasks>|
         -> Result<NodeId, ModelError> {
            let mut out = input;
            let layer_count = dims.len() - 1;
            for j in 0..layer_count {
                let w = node(&format!("head.{name}.{j}.weight"))?;
                let b = node(&format!("head.{name}.{j}.bias"))?;
                let last = j == layer_count - 1;
                let act = if last { Activation::Linear } else { Activation::Relu };
                out = dense(g, out, w, b, act)?;
                if !last {
                    if let Some(masks) = dropout.as_deref_mut() {
                        let mask = g.leaf(masks.mask(&[n, dims[j + 1]]));
                        out = g.mul(out, mask)?;
                    }
                }
            }
            Ok(g.softmax(out)?)
        };

        match cfg.attention_mode {
            AttentionMode::None => {
                let flat = g.reshape(h, &[n, cfg.num_channels * n_feat])?;
                let main = run_head(g, flat, "main", &cfg.main_head_dims()?, &mut dropout)?;
                Ok(ForwardOutput {
                    main_probs: main,
                    aux_probs: None,
                    alphas: None,
                })
            }
            AttentionMode::Single => {
                let att = channel_attention(
                    g,
                    h,
                    AttentionNodes {
                        w: node("attention.w")?,
                        b: node("attention.b")?,
                        u: node("attention.u")?,
                    },
                )?;
                let gated = g.concat(&att.weighted, 1)?;
                let main = run_head(g, gated, "main", &cfg.main_head_dims()?, &mut dropout)?;
                Ok(ForwardOutput {
                    main_probs: main,
                    aux_probs: None,
                    alphas: Some(att.alphas),
                })
            }
            AttentionMode::Multi => {
                let att = channel_attention(
                    g,
                    h,
                    AttentionNodes {
                        w: node("attention.w")?,
                        b: node("attention.b")?,
                        u: node("attention.u")?,
                    },
                )?;
                let flat = g.reshape(h, &[n, cfg.num_channels * n_feat])?;
                let main = run_head(g, flat, "main", &cfg.main_head_dims()?, &mut dropout)?;
                let aux = run_head(g, att.pooled, "aux", &cfg.aux_head_dims()?, &mut dropout)?;
                Ok(ForwardOutput {
                    main_probs: main,
                    aux_probs: Some(aux),
                    alphas: Some(att.alphas),
                })
            }
        }
    }
}

/// The named architecture presets this crate ships, in report order.
///
/// All presets assume 6 channels in two correlated groups, 21 timesteps and
/// 11 classes; [`grid_config`] adapts a preset to other dataset dimensions.
pub fn default_grid() -> Vec<(String, ModelConfig)> {
    let groups = vec![vec![0, 1, 2], vec![3, 4, 5]];
    let make = |extraction, strategy, attention_mode, conv_widths: &[usize]| ModelConfig {
        extraction,
        strategy,
        attention_mode,
        num_channels: 6,
        num_timesteps: 21,
        num_classes: 11,
        channel_groups: groups.clone(),
        conv_widths: conv_widths.to_vec(),
        kernel_lens: vec![],
        d_a: default_d_a(),
        head_widths: default_head_widths(),
        dropout_rate: default_dropout(),
    };
    vec![
        (
            "Sdeep-B-Multi-ii".into(),
            make(
                Extraction::PerGroup,
                Strategy::SamePadded,
                AttentionMode::Multi,
                &[32, 16, 8],
            ),
        ),
        (
            "Sdeep-C-Multi-ii".into(),
            make(
                Extraction::GroupedThenShared,
                Strategy::SamePadded,
                AttentionMode::Multi,
                &[48, 24, 12],
            ),
        ),
        (
            "Sdeep-A-Multi-i".into(),
            make(
                Extraction::PerChannel,
                Strategy::StridedValid,
                AttentionMode::Multi,
                &[64, 128],
            ),
        ),
        (
            "Sdeep-A-Single-i".into(),
            make(
                Extraction::PerChannel,
                Strategy::StridedValid,
                AttentionMode::Single,
                &[64, 128],
            ),
        ),
        (
            "Baseline-A-None-ii".into(),
            make(
                Extraction::PerChannel,
                Strategy::SamePadded,
                AttentionMode::None,
                &[32, 16, 8],
            ),
        ),
    ]
}

/// Looks up a preset by name and adapts it to a dataset's dimensions.
pub fn grid_config(
    name: &str,
    num_channels: usize,
    num_timesteps: usize,
    num_classes: usize,
    channel_groups: Vec<Vec<usize>>,
) -> Option<ModelConfig> {
    default_grid().into_iter().find_map(|(n, mut cfg)| {
        if n == name {
            cfg.num_channels = num_channels;
            cfg.num_timesteps = num_timesteps;
            cfg.num_classes = num_classes;
            cfg.channel_groups = channel_groups.clone();
            Some(cfg)
        } else {
            None
        }
    })
}
