//! The three sequence networks: generator, discriminator (critic + style
//! classifier heads) and viseme classifier.
//!
//! All share one skeleton: a per-frame encoder (input projection plus
//! residual feed-forward blocks), a multi-layer bi-directional GRU whose
//! direction outputs are concatenated and projected back to the hidden
//! width, a decoder (residual blocks plus output projection), and dropout
//! after every projection and residual block (never inside the GRU). The
//! generator additionally receives the target style code broadcast along
//! time and concatenated per frame, and adds its first hidden activation
//! to its last one before the output projection so content has a direct
//! path through the network.

use ndarray::{Array1, Array2, Array3, ArrayD, Ix2, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{linear, seq_linear, Graph, Tensor};

/// Negative-side slope of the leaky rectifier used in residual blocks.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid block config: {0}")]
    InvalidConfig(String),
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("input has {got} channels, model expects {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("style code width {got} does not match model width {expected}")]
    StyleWidthMismatch { got: usize, expected: usize },
    #[error("invalid style code: {0}")]
    InvalidStyle(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Shared architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub input_width: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Residual feed-forward blocks in the encoder and again in the decoder.
    #[serde(default = "default_residual_layers")]
    pub residual_layers: usize,
    #[serde(default = "default_gru_layers")]
    pub gru_layers: usize,
    #[serde(default = "default_true")]
    pub bidirectional: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub output_width: usize,
}

fn default_hidden() -> usize {
    256
}
fn default_residual_layers() -> usize {
    2
}
fn default_gru_layers() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_dropout() -> f64 {
    0.4
}

impl BlockConfig {
    pub fn new(input_width: usize, output_width: usize) -> Self {
        BlockConfig {
            input_width,
            hidden: default_hidden(),
            residual_layers: default_residual_layers(),
            gru_layers: default_gru_layers(),
            bidirectional: true,
            dropout: default_dropout(),
            output_width,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden < 1 {
            return Err(ModelError::InvalidConfig("hidden width must be >= 1".into()));
        }
        if self.input_width < 1 || self.output_width < 1 {
            return Err(ModelError::InvalidConfig("widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.gru_layers < 1 {
            return Err(ModelError::InvalidConfig("need at least one GRU layer".into()));
        }
        if !self.bidirectional {
            return Err(ModelError::InvalidConfig(
                "the recurrent core is always bidirectional".into(),
            ));
        }
        Ok(())
    }
}

/// Train enables dropout (consuming the provided RNG); Eval is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ----- parameter containers -------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    /// `[in x out]`
    pub weight: Array2<f64>,
    /// `[out]`
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlockParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

/// One direction of one GRU layer, PyTorch gate layout `(r, z, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruDirectionParams {
    /// `[in x 3H]`
    pub w_ih: Array2<f64>,
    /// `[H x 3H]`
    pub w_hh: Array2<f64>,
    /// `[3H]`
    pub b_ih: Array1<f64>,
    /// `[3H]`
    pub b_hh: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruLayerParams {
    pub forward: GruDirectionParams,
    pub backward: GruDirectionParams,
}

/// Encoder / bi-GRU / decoder parameter set shared by all three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub in_proj: LinearParams,
    pub encoder_blocks: Vec<ResidualBlockParams>,
    pub gru_layers: Vec<GruLayerParams>,
    pub gru_proj: LinearParams,
    pub decoder_blocks: Vec<ResidualBlockParams>,
    pub out_proj: LinearParams,
}

/// Generator: input `[B,T,N]` plus style bits `[B,C]`, output `[B,T,N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub config: BlockConfig,
    pub style_width: usize,
    pub backbone: BackboneParams,
}

/// Discriminator: input `[B,T,N]`, output per-frame critic score and style
/// logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub config: BlockConfig,
    pub style_width: usize,
    pub backbone: BackboneParams,
}

/// Viseme classifier: input `[B,T,N]`, output per-frame logits over V classes.
#[derive(Clone, Debug, PartialEq)]
pub struct VisemeClassifierParams {
    pub config: BlockConfig,
    pub backbone: BackboneParams,
}

// ----- initialization --------------------------------------------------------

fn uniform_fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Orthogonal `[n x n]` matrix via modified Gram-Schmidt on a Gaussian draw.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    use rand_distr::StandardNormal;
    loop {
        let mut m = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let prev = m.column(k).to_owned();
                let dot = m.column(j).dot(&prev);
                let mut col = m.column_mut(j);
                col.scaled_add(-dot, &prev);
            }
            let norm = m.column(j).dot(&m.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            m.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return m;
        }
    }
}

fn init_linear(rng: &mut ChaCha8Rng, input: usize, output: usize) -> LinearParams {
    LinearParams {
        weight: uniform_fan_in(rng, input, output, input),
        bias: Array1::zeros(output),
    }
}

fn init_residual(rng: &mut ChaCha8Rng, width: usize) -> ResidualBlockParams {
    ResidualBlockParams {
        fc1: init_linear(rng, width, width),
        fc2: init_linear(rng, width, width),
    }
}

fn init_gru_direction(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> GruDirectionParams {
    // Recurrent weights are orthogonal per gate for stable state dynamics.
    let mut w_hh = Array2::zeros((hidden, 3 * hidden));
    for gate in 0..3 {
        let q = orthogonal(rng, hidden);
        w_hh
            .slice_mut(ndarray::s![.., gate * hidden..(gate + 1) * hidden])
            .assign(&q);
    }
    GruDirectionParams {
        w_ih: uniform_fan_in(rng, input, 3 * hidden, input),
        w_hh,
        b_ih: Array1::zeros(3 * hidden),
        b_hh: Array1::zeros(3 * hidden),
    }
}

fn init_backbone(config: &BlockConfig, seed: u64) -> BackboneParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    let in_proj = init_linear(&mut rng, config.input_width, h);
    let encoder_blocks = (0..config.residual_layers)
        .map(|_| init_residual(&mut rng, h))
        .collect();
    let gru_layers = (0..config.gru_layers)
        .map(|layer| {
            let input = if layer == 0 { h } else { 2 * h };
            GruLayerParams {
                forward: init_gru_direction(&mut rng, input, h),
                backward: init_gru_direction(&mut rng, input, h),
            }
        })
        .collect();
    let gru_proj = init_linear(&mut rng, 2 * h, h);
    let decoder_blocks = (0..config.residual_layers)
        .map(|_| init_residual(&mut rng, h))
        .collect();
    let out_proj = init_linear(&mut rng, h, config.output_width);
    BackboneParams {
        in_proj,
        encoder_blocks,
        gru_layers,
        gru_proj,
        decoder_blocks,
        out_proj,
    }
}

impl GeneratorParams {
    /// `config.input_width` must already include the style width.
    pub fn init(config: BlockConfig, style_width: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if style_width < 2 {
            return Err(ModelError::InvalidConfig("style width must be >= 2".into()));
        }
        if config.input_width <= style_width {
            return Err(ModelError::InvalidConfig(
                "generator input width must exceed the style width".into(),
            ));
        }
        Ok(GeneratorParams {
            backbone: init_backbone(&config, seed),
            config,
            style_width,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.input_width - self.style_width
    }
}

impl DiscriminatorParams {
    /// `config.output_width` must equal `1 + style_width`.
    pub fn init(config: BlockConfig, style_width: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if config.output_width != 1 + style_width {
            return Err(ModelError::InvalidConfig(format!(
                "discriminator output width {} should be 1 + C = {}",
                config.output_width,
                1 + style_width
            )));
        }
        Ok(DiscriminatorParams {
            backbone: init_backbone(&config, seed),
            config,
            style_width,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.input_width
    }
}

impl VisemeClassifierParams {
    pub fn init(config: BlockConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(VisemeClassifierParams {
            backbone: init_backbone(&config, seed),
            config,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.input_width
    }

    pub fn class_count(&self) -> usize {
        self.config.output_width
    }
}

// ----- flat parameter enumeration --------------------------------------------

/// Named view over every parameter array, in a stable declaration order.
/// Optimizers, checkpoints and graph leaves all rely on this ordering.
pub trait ParamContainer {
    fn param_list(&self) -> Vec<(String, ArrayD<f64>)>;
    fn assign_params(&mut self, values: &[(String, ArrayD<f64>)]) -> Result<(), ModelError>;
}

fn push_linear(out: &mut Vec<(String, ArrayD<f64>)>, prefix: &str, p: &LinearParams) {
    out.push((format!("{prefix}.weight"), p.weight.clone().into_dyn()));
    out.push((format!("{prefix}.bias"), p.bias.clone().into_dyn()));
}

fn push_backbone(out: &mut Vec<(String, ArrayD<f64>)>, b: &BackboneParams) {
    push_linear(out, "in_proj", &b.in_proj);
    for (i, block) in b.encoder_blocks.iter().enumerate() {
        push_linear(out, &format!("encoder.{i}.fc1"), &block.fc1);
        push_linear(out, &format!("encoder.{i}.fc2"), &block.fc2);
    }
    for (i, layer) in b.gru_layers.iter().enumerate() {
        for (dir, d) in [("fwd", &layer.forward), ("bwd", &layer.backward)] {
            out.push((format!("gru.{i}.{dir}.w_ih"), d.w_ih.clone().into_dyn()));
            out.push((format!("gru.{i}.{dir}.w_hh"), d.w_hh.clone().into_dyn()));
            out.push((format!("gru.{i}.{dir}.b_ih"), d.b_ih.clone().into_dyn()));
            out.push((format!("gru.{i}.{dir}.b_hh"), d.b_hh.clone().into_dyn()));
        }
    }
    push_linear(out, "gru_proj", &b.gru_proj);
    for (i, block) in b.decoder_blocks.iter().enumerate() {
        push_linear(out, &format!("decoder.{i}.fc1"), &block.fc1);
        push_linear(out, &format!("decoder.{i}.fc2"), &block.fc2);
    }
    push_linear(out, "out_proj", &b.out_proj);
}

fn take_array<D: ndarray::Dimension>(
    values: &[(String, ArrayD<f64>)],
    name: &str,
) -> Result<ndarray::Array<f64, D>, ModelError> {
    let found = values
        .iter()
        .find(|(n, _)| n == name)
        .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter `{name}`")))?;
    found
        .1
        .clone()
        .into_dimensionality::<D>()
        .map_err(|_| ModelError::Checkpoint(format!("parameter `{name}` has wrong rank")))
}

fn assign_linear(
    values: &[(String, ArrayD<f64>)],
    prefix: &str,
    p: &mut LinearParams,
) -> Result<(), ModelError> {
    let weight: Array2<f64> = take_array(values, &format!("{prefix}.weight"))?;
    let bias: Array1<f64> = take_array(values, &format!("{prefix}.bias"))?;
    if weight.dim() != p.weight.dim() || bias.dim() != p.bias.dim() {
        return Err(ModelError::Checkpoint(format!(
            "parameter `{prefix}` has unexpected shape"
        )));
    }
    p.weight = weight;
    p.bias = bias;
    Ok(())
}

fn assign_backbone(
    values: &[(String, ArrayD<f64>)],
    b: &mut BackboneParams,
) -> Result<(), ModelError> {
    assign_linear(values, "in_proj", &mut b.in_proj)?;
    for (i, block) in b.encoder_blocks.iter_mut().enumerate() {
        assign_linear(values, &format!("encoder.{i}.fc1"), &mut block.fc1)?;
        assign_linear(values, &format!("encoder.{i}.fc2"), &mut block.fc2)?;
    }
    for (i, layer) in b.gru_layers.iter_mut().enumerate() {
        for (dir, d) in [
            ("fwd", &mut layer.forward),
            ("bwd", &mut layer.backward),
        ] {
            let prefix = format!("gru.{i}.{dir}");
            let w_ih: Array2<f64> = take_array(values, &format!("{prefix}.w_ih"))?;
            let w_hh: Array2<f64> = take_array(values, &format!("{prefix}.w_hh"))?;
            let b_ih: Array1<f64> = take_array(values, &format!("{prefix}.b_ih"))?;
            let b_hh: Array1<f64> = take_array(values, &format!("{prefix}.b_hh"))?;
            if w_ih.dim() != d.w_ih.dim()
                || w_hh.dim() != d.w_hh.dim()
                || b_ih.dim() != d.b_ih.dim()
                || b_hh.dim() != d.b_hh.dim()
            {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{prefix}` has unexpected shape"
                )));
            }
            d.w_ih = w_ih;
            d.w_hh = w_hh;
            d.b_ih = b_ih;
            d.b_hh = b_hh;
        }
    }
    assign_linear(values, "gru_proj", &mut b.gru_proj)?;
    for (i, block) in b.decoder_blocks.iter_mut().enumerate() {
        assign_linear(values, &format!("decoder.{i}.fc1"), &mut block.fc1)?;
        assign_linear(values, &format!("decoder.{i}.fc2"), &mut block.fc2)?;
    }
    assign_linear(values, "out_proj", &mut b.out_proj)
}

impl ParamContainer for GeneratorParams {
    fn param_list(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        push_backbone(&mut out, &self.backbone);
        out
    }
    fn assign_params(&mut self, values: &[(String, ArrayD<f64>)]) -> Result<(), ModelError> {
        assign_backbone(values, &mut self.backbone)
    }
}

impl ParamContainer for DiscriminatorParams {
    fn param_list(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        push_backbone(&mut out, &self.backbone);
        out
    }
    fn assign_params(&mut self, values: &[(String, ArrayD<f64>)]) -> Result<(), ModelError> {
        assign_backbone(values, &mut self.backbone)
    }
}

impl ParamContainer for VisemeClassifierParams {
    fn param_list(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        push_backbone(&mut out, &self.backbone);
        out
    }
    fn assign_params(&mut self, values: &[(String, ArrayD<f64>)]) -> Result<(), ModelError> {
        assign_backbone(values, &mut self.backbone)
    }
}

// ----- graph leaves -----------------------------------------------------------

struct LinearLeaves {
    weight: Tensor,
    bias: Tensor,
}

struct ResidualLeaves {
    fc1: LinearLeaves,
    fc2: LinearLeaves,
}

struct GruDirectionLeaves {
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
}

struct GruLayerLeaves {
    forward: GruDirectionLeaves,
    backward: GruDirectionLeaves,
}

/// Tape leaves mirroring [`BackboneParams`]; `flat` follows the
/// [`ParamContainer::param_list`] order exactly.
pub struct BackboneLeaves {
    in_proj: LinearLeaves,
    encoder_blocks: Vec<ResidualLeaves>,
    gru_layers: Vec<GruLayerLeaves>,
    gru_proj: LinearLeaves,
    decoder_blocks: Vec<ResidualLeaves>,
    out_proj: LinearLeaves,
    pub flat: Vec<Tensor>,
}

fn leaf_linear(g: &mut Graph, p: &LinearParams, flat: &mut Vec<Tensor>) -> LinearLeaves {
    let weight = g.leaf(p.weight.clone().into_dyn());
    let bias = g.leaf(p.bias.clone().into_dyn());
    flat.push(weight);
    flat.push(bias);
    LinearLeaves { weight, bias }
}

pub fn backbone_leaves(g: &mut Graph, b: &BackboneParams) -> BackboneLeaves {
    let mut flat = Vec::new();
    let in_proj = leaf_linear(g, &b.in_proj, &mut flat);
    let encoder_blocks = b
        .encoder_blocks
        .iter()
        .map(|blk| ResidualLeaves {
            fc1: leaf_linear(g, &blk.fc1, &mut flat),
            fc2: leaf_linear(g, &blk.fc2, &mut flat),
        })
        .collect();
    let gru_layers = b
        .gru_layers
        .iter()
        .map(|layer| {
            let mut dir = |d: &GruDirectionParams, flat: &mut Vec<Tensor>| {
                let w_ih = g.leaf(d.w_ih.clone().into_dyn());
                let w_hh = g.leaf(d.w_hh.clone().into_dyn());
                let b_ih = g.leaf(d.b_ih.clone().into_dyn());
                let b_hh = g.leaf(d.b_hh.clone().into_dyn());
                flat.extend([w_ih, w_hh, b_ih, b_hh]);
                GruDirectionLeaves { w_ih, w_hh, b_ih, b_hh }
            };
            GruLayerLeaves {
                forward: dir(&layer.forward, &mut flat),
                backward: dir(&layer.backward, &mut flat),
            }
        })
        .collect();
    let gru_proj = leaf_linear(g, &b.gru_proj, &mut flat);
    let decoder_blocks = b
        .decoder_blocks
        .iter()
        .map(|blk| ResidualLeaves {
            fc1: leaf_linear(g, &blk.fc1, &mut flat),
            fc2: leaf_linear(g, &blk.fc2, &mut flat),
        })
        .collect();
    let out_proj = leaf_linear(g, &b.out_proj, &mut flat);
    BackboneLeaves {
        in_proj,
        encoder_blocks,
        gru_layers,
        gru_proj,
        decoder_blocks,
        out_proj,
        flat,
    }
}

// ----- forward passes -----------------------------------------------------------

fn dropout(g: &mut Graph, x: Tensor, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Tensor {
    if mode == Mode::Eval || p == 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let shape = g.shape(x).to_vec();
    let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// `x + fc2(leaky(fc1(x)))` on `[M, H]`.
fn residual_block(g: &mut Graph, x: Tensor, leaves: &ResidualLeaves) -> Tensor {
    let h = linear(g, x, leaves.fc1.weight, leaves.fc1.bias);
    let a = g.leaky_relu(h, LEAKY_SLOPE);
    let out = linear(g, a, leaves.fc2.weight, leaves.fc2.bias);
    g.add(x, out)
}

/// One GRU direction over `[B,T,I]` producing `[B,T,H]`.
fn gru_direction(
    g: &mut Graph,
    x: Tensor,
    leaves: &GruDirectionLeaves,
    hidden: usize,
    reverse: bool,
) -> Tensor {
    let (b, t, _i) = {
        let s = g.shape(x);
        (s[0], s[1], s[2])
    };
    let h3 = 3 * hidden;
    // Input contributions for every step in one matmul.
    let pre_all = seq_linear(g, x, leaves.w_ih, leaves.b_ih);
    let b_hh_row = g.reshape(leaves.b_hh, &[1, h3]);
    let b_hh_full = g.broadcast_to(b_hh_row, &[b, h3]);

    let mut h = g.zeros(&[b, hidden]);
    let mut outputs: Vec<Option<Tensor>> = vec![None; t];
    let order: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    for step in order {
        let pre_t = g.narrow(pre_all, 1, step, 1);
        let pre = g.reshape(pre_t, &[b, h3]);
        let hh_w = g.matmul(h, leaves.w_hh);
        let hh = g.add(hh_w, b_hh_full);

        let pre_r = g.narrow(pre, 1, 0, hidden);
        let pre_z = g.narrow(pre, 1, hidden, hidden);
        let pre_n = g.narrow(pre, 1, 2 * hidden, hidden);
        let hh_r = g.narrow(hh, 1, 0, hidden);
        let hh_z = g.narrow(hh, 1, hidden, hidden);
        let hh_n = g.narrow(hh, 1, 2 * hidden, hidden);

        let r_in = g.add(pre_r, hh_r);
        let r = g.sigmoid(r_in);
        let z_in = g.add(pre_z, hh_z);
        let z = g.sigmoid(z_in);
        let gated = g.mul(r, hh_n);
        let n_in = g.add(pre_n, gated);
        let n = g.tanh(n_in);

        // h' = (1 - z) * n + z * h
        let zn = g.mul(z, h);
        let neg_z = g.neg(z);
        let one_minus_z = g.add_scalar(neg_z, 1.0);
        let new_part = g.mul(one_minus_z, n);
        h = g.add(new_part, zn);
        outputs[step] = Some(g.reshape(h, &[b, 1, hidden]));
    }
    let parts: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("all steps set")).collect();
    g.concat(&parts, 1)
}

/// Full backbone over `[B,T,in]` with optional first-to-last skip connection.
pub fn backbone_forward(
    g: &mut Graph,
    leaves: &BackboneLeaves,
    x: Tensor,
    config: &BlockConfig,
    skip_connection: bool,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let h = config.hidden;
    let p = config.dropout;

    let projected = seq_linear(g, x, leaves.in_proj.weight, leaves.in_proj.bias);
    let first_hidden = dropout(g, projected, p, mode, rng);

    let (b, t, _) = {
        let s = g.shape(first_hidden);
        (s[0], s[1], s[2])
    };
    let mut acts = g.reshape(first_hidden, &[b * t, h]);
    let skip = acts;
    for block in &leaves.encoder_blocks {
        let out = residual_block(g, acts, block);
        acts = dropout(g, out, p, mode, rng);
    }

    let seq = g.reshape(acts, &[b, t, h]);
    let mut gru_in = seq;
    for layer in &leaves.gru_layers {
        let fwd = gru_direction(g, gru_in, &layer.forward, h, false);
        let bwd = gru_direction(g, gru_in, &layer.backward, h, true);
        gru_in = g.concat(&[fwd, bwd], 2);
    }
    let proj = seq_linear(g, gru_in, leaves.gru_proj.weight, leaves.gru_proj.bias);
    let proj = dropout(g, proj, p, mode, rng);

    let mut dec = g.reshape(proj, &[b * t, h]);
    for block in &leaves.decoder_blocks {
        let out = residual_block(g, dec, block);
        dec = dropout(g, out, p, mode, rng);
    }
    if skip_connection {
        dec = g.add(dec, skip);
    }
    let out = linear(g, dec, leaves.out_proj.weight, leaves.out_proj.bias);
    g.reshape(out, &[b, t, config.output_width])
}

fn check_finite3(x: &Array3<f64>) -> Result<(), ModelError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFiniteInput)
    }
}

/// Broadcast style bits `[B,C]` along time and concatenate to `[B,T,N]`.
fn concat_style(g: &mut Graph, x: Tensor, styles: Tensor) -> Tensor {
    let (b, t, _n) = {
        let s = g.shape(x);
        (s[0], s[1], s[2])
    };
    let c = g.shape(styles)[1];
    let styles_btc = g.reshape(styles, &[b, 1, c]);
    let styles_full = g.broadcast_to(styles_btc, &[b, t, c]);
    g.concat(&[x, styles_full], 2)
}

/// Graph-level generator forward. `x: [B,T,N]`, `styles: [B,C]` (already
/// tape tensors); output `[B,T,N]`.
pub fn generator_forward_graph(
    g: &mut Graph,
    leaves: &BackboneLeaves,
    config: &BlockConfig,
    x: Tensor,
    styles: Tensor,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let with_style = concat_style(g, x, styles);
    backbone_forward(g, leaves, with_style, config, true, mode, rng)
}

/// Graph-level discriminator forward: per-frame critic scores `[B,T]` and
/// style logits `[B,T,C]`.
pub fn discriminator_forward_graph(
    g: &mut Graph,
    leaves: &BackboneLeaves,
    config: &BlockConfig,
    style_width: usize,
    x: Tensor,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    let out = backbone_forward(g, leaves, x, config, false, mode, rng);
    let (b, t, _) = {
        let s = g.shape(out);
        (s[0], s[1], s[2])
    };
    let critic3 = g.narrow(out, 2, 0, 1);
    let critic = g.reshape(critic3, &[b, t]);
    let logits = g.narrow(out, 2, 1, style_width);
    (critic, logits)
}

/// Graph-level viseme classifier forward: logits `[B,T,V]`.
pub fn viseme_forward_graph(
    g: &mut Graph,
    leaves: &BackboneLeaves,
    config: &BlockConfig,
    x: Tensor,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    backbone_forward(g, leaves, x, config, false, mode, rng)
}

// ----- array-level entry points ----------------------------------------------

impl GeneratorParams {
    /// Run the generator on raw arrays. `styles` is `[B,C]` bits.
    pub fn forward(
        &self,
        x: &Array3<f64>,
        styles: &Array2<f64>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array3<f64>, ModelError> {
        check_finite3(x)?;
        let n = self.channels();
        if x.dim().2 != n {
            return Err(ModelError::ChannelMismatch { got: x.dim().2, expected: n });
        }
        if styles.dim().1 != self.style_width {
            return Err(ModelError::StyleWidthMismatch {
                got: styles.dim().1,
                expected: self.style_width,
            });
        }
        if styles.dim().0 != x.dim().0 {
            return Err(ModelError::InvalidStyle(format!(
                "{} style rows for batch of {}",
                styles.dim().0,
                x.dim().0
            )));
        }
        let mut g = Graph::new();
        let leaves = backbone_leaves(&mut g, &self.backbone);
        let xt = g.leaf(x.clone().into_dyn());
        let st = g.leaf(styles.clone().into_dyn());
        let out = generator_forward_graph(&mut g, &leaves, &self.config, xt, st, mode, rng);
        Ok(g
            .value(out)
            .clone()
            .into_dimensionality()
            .expect("generator output is 3-d"))
    }
}

impl DiscriminatorParams {
    pub fn forward(
        &self,
        x: &Array3<f64>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<f64>, Array3<f64>), ModelError> {
        check_finite3(x)?;
        if x.dim().2 != self.channels() {
            return Err(ModelError::ChannelMismatch {
                got: x.dim().2,
                expected: self.channels(),
            });
        }
        let mut g = Graph::new();
        let leaves = backbone_leaves(&mut g, &self.backbone);
        let xt = g.leaf(x.clone().into_dyn());
        let (critic, logits) = discriminator_forward_graph(
            &mut g,
            &leaves,
            &self.config,
            self.style_width,
            xt,
            mode,
            rng,
        );
        Ok((
            g.value(critic).clone().into_dimensionality::<Ix2>().expect("2-d"),
            g.value(logits).clone().into_dimensionality().expect("3-d"),
        ))
    }
}

impl VisemeClassifierParams {
    pub fn forward(
        &self,
        x: &Array3<f64>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array3<f64>, ModelError> {
        check_finite3(x)?;
        if x.dim().2 != self.channels() {
            return Err(ModelError::ChannelMismatch {
                got: x.dim().2,
                expected: self.channels(),
            });
        }
        let mut g = Graph::new();
        let leaves = backbone_leaves(&mut g, &self.backbone);
        let xt = g.leaf(x.clone().into_dyn());
        let out = viseme_forward_graph(&mut g, &leaves, &self.config, xt, mode, rng);
        Ok(g.value(out).clone().into_dimensionality().expect("3-d"))
    }
}

// ----- checkpoint format -------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Self-describing single-model checkpoint.
#[derive(Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub kind: String,
    pub config: BlockConfig,
    #[serde(default)]
    pub style_width: usize,
    params: Vec<NamedArray>,
}

impl ModelCheckpoint {
    fn from_list(kind: &str, config: &BlockConfig, style_width: usize, list: Vec<(String, ArrayD<f64>)>) -> Self {
        let params = list
            .into_iter()
            .map(|(name, a)| NamedArray {
                name,
                shape: a.shape().to_vec(),
                data: a.into_raw_vec_and_offset().0,
            })
            .collect();
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            config: config.clone(),
            style_width,
            params,
        }
    }

    fn to_list(&self) -> Result<Vec<(String, ArrayD<f64>)>, ModelError> {
        self.params
            .iter()
            .map(|p| {
                let arr = ArrayD::from_shape_vec(IxDyn(&p.shape), p.data.clone())
                    .map_err(|e| ModelError::Checkpoint(format!("bad shape for `{}`: {e}", p.name)))?;
                Ok((p.name.clone(), arr))
            })
            .collect()
    }

    fn check_version_kind(&self, kind: &str) -> Result<(), ModelError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.kind != kind {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint holds a `{}` model, expected `{kind}`",
                self.kind
            )));
        }
        Ok(())
    }
}

impl GeneratorParams {
    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::from_list("generator", &self.config, self.style_width, self.param_list())
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self, ModelError> {
        ckpt.check_version_kind("generator")?;
        let mut params = GeneratorParams::init(ckpt.config.clone(), ckpt.style_width, 0)?;
        params.assign_params(&ckpt.to_list()?)?;
        Ok(params)
    }
}

impl DiscriminatorParams {
    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::from_list(
            "discriminator",
            &self.config,
            self.style_width,
            self.param_list(),
        )
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self, ModelError> {
        ckpt.check_version_kind("discriminator")?;
        let mut params = DiscriminatorParams::init(ckpt.config.clone(), ckpt.style_width, 0)?;
        params.assign_params(&ckpt.to_list()?)?;
        Ok(params)
    }
}

impl VisemeClassifierParams {
    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::from_list("viseme_classifier", &self.config, 0, self.param_list())
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self, ModelError> {
        ckpt.check_version_kind("viseme_classifier")?;
        let mut params = VisemeClassifierParams::init(ckpt.config.clone(), 0)?;
        params.assign_params(&ckpt.to_list()?)?;
        Ok(params)
    }
}

/// Tiny configuration used throughout the gradient-checking suite.
pub fn tiny_config(input_width: usize, output_width: usize) -> BlockConfig {
    BlockConfig {
        input_width,
        hidden: 8,
        residual_layers: 1,
        gru_layers: 1,
        bidirectional: true,
        dropout: 0.0,
        output_width,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_generator(seed: u64) -> GeneratorParams {
        // N = 3 channels, C = 2 style bits.
        GeneratorParams::init(tiny_config(5, 3), 2, seed).unwrap()
    }

    fn unit_input(b: usize, t: usize, n: usize) -> Array3<f64> {
        Array3::from_elem((b, t, n), 1.0)
    }

    fn styles(b: usize) -> Array2<f64> {
        let mut s = Array2::zeros((b, 2));
        for i in 0..b {
            s[[i, i % 2]] = 1.0;
        }
        s
    }

    #[test]
    fn orthogonal_matrices_are_orthonormal() {
        let mut r = rng(1);
        let q = orthogonal(&mut r, 8);
        let qtq = q.t().dot(&q);
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[[i, j]] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = tiny_generator(7);
        let b = tiny_generator(7);
        let c = tiny_generator(8);
        assert_eq!(a.param_list(), b.param_list());
        assert_ne!(a.param_list(), c.param_list());
    }

    #[test]
    fn generator_preserves_shape_for_various_lengths() {
        let gen = tiny_generator(3);
        for t in [1usize, 7, 30, 301] {
            let x = unit_input(2, t, 3);
            let y = gen.forward(&x, &styles(2), Mode::Eval, &mut rng(0)).unwrap();
            assert_eq!(y.dim(), (2, t, 3));
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fresh_params_produce_bounded_outputs_on_unit_input() {
        let gen = tiny_generator(5);
        let y = gen
            .forward(&unit_input(1, 30, 3), &styles(1), Mode::Eval, &mut rng(0))
            .unwrap();
        assert!(y.iter().all(|v| v.abs() < 100.0));

        // Also at the default width.
        let full = GeneratorParams::init(BlockConfig::new(20, 16), 4, 11).unwrap();
        let x = Array3::from_elem((1, 30, 16), 1.0);
        let mut s = Array2::zeros((1, 4));
        s[[0, 0]] = 1.0;
        s[[0, 2]] = 1.0;
        let y = full.forward(&x, &s, Mode::Eval, &mut rng(0)).unwrap();
        assert!(y.iter().all(|v| v.abs() < 100.0));
    }

    #[test]
    fn eval_mode_is_deterministic_train_mode_is_not_identity() {
        let gen = tiny_generator(9);
        let x = unit_input(2, 12, 3);
        let a = gen.forward(&x, &styles(2), Mode::Eval, &mut rng(1)).unwrap();
        let b = gen.forward(&x, &styles(2), Mode::Eval, &mut rng(2)).unwrap();
        assert_eq!(a, b, "eval ignores the rng");

        let mut cfg = tiny_config(5, 3);
        cfg.dropout = 0.4;
        let gen_dropout = GeneratorParams::init(cfg, 2, 9).unwrap();
        let c = gen_dropout
            .forward(&x, &styles(2), Mode::Train, &mut rng(1))
            .unwrap();
        let d = gen_dropout
            .forward(&x, &styles(2), Mode::Train, &mut rng(1))
            .unwrap();
        assert_eq!(c, d, "same rng stream repeats");
        let e = gen_dropout
            .forward(&x, &styles(2), Mode::Train, &mut rng(2))
            .unwrap();
        assert_ne!(c, e, "different rng stream differs under dropout");
    }

    #[test]
    fn discriminator_outputs_split_critic_and_logits() {
        let disc = DiscriminatorParams::init(tiny_config(3, 3), 2, 4).unwrap();
        let x = unit_input(4, 30, 3);
        let (critic, logits) = disc.forward(&x, Mode::Eval, &mut rng(0)).unwrap();
        assert_eq!(critic.dim(), (4, 30));
        assert_eq!(logits.dim(), (4, 30, 2));
    }

    #[test]
    fn zeroed_output_head_gives_zero_critic() {
        let mut disc = DiscriminatorParams::init(tiny_config(3, 3), 2, 4).unwrap();
        disc.backbone.out_proj.weight.fill(0.0);
        disc.backbone.out_proj.bias.fill(0.0);
        let (critic, _) = disc
            .forward(&unit_input(2, 5, 3), Mode::Eval, &mut rng(0))
            .unwrap();
        assert!(critic.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn viseme_classifier_shapes_and_softmax_rows() {
        let v = VisemeClassifierParams::init(tiny_config(3, 3), 6).unwrap();
        let x = unit_input(2, 30, 3);
        let logits = v.forward(&x, Mode::Eval, &mut rng(0)).unwrap();
        assert_eq!(logits.dim(), (2, 30, 3));
        for b in 0..2 {
            for t in 0..30 {
                let row = logits.slice(ndarray::s![b, t, ..]);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let total: f64 = row.iter().map(|v| (v - max).exp() / sum).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_mismatched_inputs() {
        let gen = tiny_generator(2);
        let mut x = unit_input(1, 4, 3);
        x[[0, 0, 0]] = f64::NAN;
        assert!(matches!(
            gen.forward(&x, &styles(1), Mode::Eval, &mut rng(0)),
            Err(ModelError::NonFiniteInput)
        ));
        let wrong = unit_input(1, 4, 5);
        assert!(matches!(
            gen.forward(&wrong, &styles(1), Mode::Eval, &mut rng(0)),
            Err(ModelError::ChannelMismatch { .. })
        ));
        let bad_style = Array2::zeros((1, 3));
        assert!(matches!(
            gen.forward(&unit_input(1, 4, 3), &bad_style, Mode::Eval, &mut rng(0)),
            Err(ModelError::StyleWidthMismatch { .. })
        ));
    }

    #[test]
    fn final_frame_influences_first_output_frame() {
        // Information must flow backwards in time through the reverse GRU.
        let gen = tiny_generator(13);
        let t = 9;
        let mut x = Array3::from_shape_fn((1, t, 3), |(_, i, j)| {
            0.1 + 0.05 * (i as f64) / (t as f64) + 0.02 * j as f64
        });
        let base = gen.forward(&x, &styles(1), Mode::Eval, &mut rng(0)).unwrap();
        x[[0, t - 1, 1]] += 0.25;
        let bumped = gen.forward(&x, &styles(1), Mode::Eval, &mut rng(0)).unwrap();
        let first_frame_delta: f64 = (0..3)
            .map(|c| (base[[0, 0, c]] - bumped[[0, 0, c]]).abs())
            .sum();
        assert!(
            first_frame_delta > 1e-10,
            "no temporal backflow: delta = {first_frame_delta}"
        );
    }

    #[test]
    fn distinct_style_codes_change_the_output() {
        let gen = tiny_generator(17);
        let x = Array3::from_shape_fn((1, 10, 3), |(_, i, j)| 0.3 + 0.01 * (i + j) as f64);
        let mut s0 = Array2::zeros((1, 2));
        s0[[0, 0]] = 1.0;
        let mut s1 = Array2::zeros((1, 2));
        s1[[0, 1]] = 1.0;
        let y0 = gen.forward(&x, &s0, Mode::Eval, &mut rng(0)).unwrap();
        let y1 = gen.forward(&x, &s1, Mode::Eval, &mut rng(0)).unwrap();
        let max_diff = (&y0 - &y1).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(max_diff > 1e-8, "style code had no effect: {max_diff}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let gen = tiny_generator(23);
        let json = serde_json::to_string(&gen.to_checkpoint()).unwrap();
        let back: ModelCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = GeneratorParams::from_checkpoint(&back).unwrap();
        assert_eq!(gen, restored);

        let disc = DiscriminatorParams::init(tiny_config(3, 3), 2, 29).unwrap();
        let json = serde_json::to_string(&disc.to_checkpoint()).unwrap();
        let restored =
            DiscriminatorParams::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(disc, restored);

        // Kind mismatch is refused.
        let v_ckpt = VisemeClassifierParams::init(tiny_config(3, 4), 31)
            .unwrap()
            .to_checkpoint();
        assert!(GeneratorParams::from_checkpoint(&v_ckpt).is_err());
    }

    #[test]
    fn param_list_and_leaves_agree_in_order() {
        let gen = tiny_generator(37);
        let list = gen.param_list();
        let mut g = Graph::new();
        let leaves = backbone_leaves(&mut g, &gen.backbone);
        assert_eq!(list.len(), leaves.flat.len());
        for ((name, arr), leaf) in list.iter().zip(&leaves.flat) {
            assert_eq!(
                arr.shape(),
                g.shape(*leaf),
                "order mismatch at parameter `{name}`"
            );
            assert_eq!(arr, g.value(*leaf), "value mismatch at `{name}`");
        }
    }
}
