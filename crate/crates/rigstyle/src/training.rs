//! Training orchestration: viseme-classifier pretraining, the adversarial
//! loop (critic steps then a generator step, repeating), deterministic
//! checkpointing and resume.
//!
//! Determinism contract: given a config, a seed, and single-threaded
//! execution, every checkpoint is bitwise reproducible. All randomness
//! flows through two channels: per-epoch shuffle generators derived from
//! `(seed, epoch)`, and one sequential step generator whose state is
//! saved in checkpoints.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anim::{assemble_batch, extract_windows, time_stretch, add_noise, Batch, RigClip, StyleCode, Window};
use crate::losses::{
    adv_loss, cls_loss, cycle_loss, gradient_penalty, mouth_penalty_by_name,
    total_discriminator_loss, total_generator_loss, viseme_pretrain_loss, ClsMode,
    DiscriminatorLossParts, GeneratorLossParts, LossError, LossWeights, MouthContext,
    VisemeTargetMode,
};
use crate::models::{
    backbone_leaves, discriminator_forward_graph, generator_forward_graph, viseme_forward_graph,
    BlockConfig, DiscriminatorParams, GeneratorParams, Mode, ModelCheckpoint, ModelError,
    ParamContainer, VisemeClassifierParams,
};
use crate::autodiff::Graph;

pub const ADAM_EPS: f64 = 1e-8;
pub const TRAIN_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corpus yields no training windows")]
    NoWindows,
    #[error("window at clip `{0}` lacks viseme labels required for pretraining")]
    MissingLabels(String),
    #[error("mouth penalty `{0}` requires a pretrained viseme classifier")]
    MissingVisemeClassifier(String),
    #[error("numerical abort: non-finite {quantity} during {phase} at epoch {epoch}, step {step}")]
    NumericalAbort {
        quantity: &'static str,
        phase: &'static str,
        epoch: usize,
        step: u64,
    },
    #[error("checkpoint config hash {found} does not match current config {expected}")]
    ConfigHashMismatch { found: String, expected: String },
    #[error("checkpoint error: {0}")]
    BadCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Anim(#[from] crate::anim::AnimError),
}

// ----- configuration ----------------------------------------------------------

/// Network sizing shared by the three models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSize {
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_res")]
    pub residual_layers: usize,
    #[serde(default = "d_gru")]
    pub gru_layers: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
}

fn d_hidden() -> usize {
    256
}
fn d_res() -> usize {
    2
}
fn d_gru() -> usize {
    2
}
fn d_dropout() -> f64 {
    0.4
}

impl Default for ModelSize {
    fn default() -> Self {
        ModelSize {
            hidden: d_hidden(),
            residual_layers: d_res(),
            gru_layers: d_gru(),
            dropout: d_dropout(),
        }
    }
}

impl ModelSize {
    pub fn block_config(&self, input_width: usize, output_width: usize) -> BlockConfig {
        BlockConfig {
            input_width,
            hidden: self.hidden,
            residual_layers: self.residual_layers,
            gru_layers: self.gru_layers,
            bidirectional: true,
            dropout: self.dropout,
            output_width,
        }
    }
}

/// Viseme-classifier pretraining settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    #[serde(default = "d_pre_epochs")]
    pub epochs: usize,
    #[serde(default = "d_pre_lr")]
    pub learning_rate: f64,
}

fn d_pre_epochs() -> usize {
    20
}
fn d_pre_lr() -> f64 {
    1e-3
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: d_pre_epochs(), learning_rate: d_pre_lr() }
    }
}

/// Full training configuration; serializes as the config file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_window")]
    pub window_len: usize,
    /// Defaults to half the window length when absent.
    #[serde(default)]
    pub window_stride: Option<usize>,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_n_critic")]
    pub n_critic: usize,
    #[serde(default)]
    pub seed: u64,
    /// Time-stretch factor range for augmentation; (1, 1) disables it.
    #[serde(default = "d_stretch")]
    pub stretch_range: (f64, f64),
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    /// Checkpoint every this many optimizer steps; 0 = only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Mouth-penalty strategy name: `none`, `cosine` or `viseme`.
    #[serde(default = "d_mouth")]
    pub mouth_loss: String,
    #[serde(default)]
    pub cls_mode: ClsMode,
    #[serde(default)]
    pub viseme_target_mode: VisemeTargetMode,
    /// Mouth control indices, used by the cosine penalty and evaluation.
    #[serde(default)]
    pub mouth_channels: Vec<usize>,
    #[serde(default)]
    pub model: ModelSize,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

fn d_lr() -> f64 {
    1e-4
}
fn d_beta1() -> f64 {
    0.5
}
fn d_beta2() -> f64 {
    0.999
}
fn d_batch() -> usize {
    32
}
fn d_window() -> usize {
    30
}
fn d_epochs() -> usize {
    100
}
fn d_n_critic() -> usize {
    5
}
fn d_stretch() -> (f64, f64) {
    (0.9, 1.1)
}
fn d_noise() -> f64 {
    0.01
}
fn d_mouth() -> String {
    "viseme".into()
}

impl Default for TrainingConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainingConfig {
    pub fn stride(&self) -> usize {
        self.window_stride.unwrap_or_else(|| (self.window_len / 2).max(1))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        if self.learning_rate <= 0.0 || self.pretrain.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size < 1 || self.n_critic < 1 || self.window_len < 2 {
            return Err(TrainError::InvalidConfig(
                "batch size and critic ratio must be >= 1, window >= 2".into(),
            ));
        }
        let (lo, hi) = self.stretch_range;
        if !(0.5..=2.0).contains(&lo) || !(0.5..=2.0).contains(&hi) || lo > hi {
            return Err(TrainError::InvalidConfig(
                "stretch range must satisfy 0.5 <= lo <= hi <= 2.0".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(TrainError::InvalidConfig("noise sigma must be >= 0".into()));
        }
        mouth_penalty_by_name(&self.mouth_loss)?;
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON form, hex encoded. Stored in
    /// checkpoints to guard resumes against config drift.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hash: u64 = 0xcbf29ce484222325;
        for byte in json.as_bytes() {
            hash ^= *byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        format!("{hash:016x}")
    }
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 over seed ^ tag keeps the derived streams well separated.
    let mut z = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const TAG_GENERATOR: u64 = 1;
const TAG_DISCRIMINATOR: u64 = 2;
const TAG_VISEME: u64 = 3;
const TAG_STEP: u64 = 4;
const TAG_EPOCH_BASE: u64 = 1000;
const TAG_PRETRAIN_SPLIT: u64 = 90;
const TAG_PRETRAIN_EPOCH_BASE: u64 = 5000;

// ----- Adam -----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl StateArray {
    fn zeros_like(a: &ArrayD<f64>) -> Self {
        StateArray { shape: a.shape().to_vec(), data: vec![0.0; a.len()] }
    }
}

/// Adam first/second moments, positionally aligned with the model's
/// parameter list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    m: Vec<StateArray>,
    v: Vec<StateArray>,
}

impl AdamState {
    pub fn new<P: ParamContainer>(params: &P) -> Self {
        let list = params.param_list();
        AdamState {
            step: 0,
            m: list.iter().map(|(_, a)| StateArray::zeros_like(a)).collect(),
            v: list.iter().map(|(_, a)| StateArray::zeros_like(a)).collect(),
        }
    }

    /// One Adam update over the container's full parameter list.
    pub fn apply<P: ParamContainer>(
        &mut self,
        params: &mut P,
        grads: &[ArrayD<f64>],
        lr: f64,
        beta1: f64,
        beta2: f64,
    ) -> Result<(), ModelError> {
        let mut list = params.param_list();
        assert_eq!(list.len(), grads.len(), "gradient count mismatch");
        assert_eq!(list.len(), self.m.len(), "optimizer state mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((entry, grad), (m, v)) in list
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let flat = grad.as_slice().expect("contiguous gradient");
            let p = entry.1.as_slice_mut().expect("contiguous parameter");
            for i in 0..p.len() {
                let g = flat[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        params.assign_params(&list)
    }
}

// ----- history --------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Discriminator,
    Generator,
}

/// One optimizer step's recorded loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub total: f64,
    pub adv: f64,
    pub cls: f64,
    pub cycle: Option<f64>,
    pub mouth: Option<f64>,
    pub gp: Option<f64>,
}

impl HistoryRecord {
    /// Recombine the recorded components under the given weights; equals
    /// `total` up to float noise.
    pub fn recombined_total(&self, w: &LossWeights) -> f64 {
        match self.phase {
            Phase::Discriminator => w.lambda_cls * self.cls + w.lambda_adv * self.adv,
            Phase::Generator => {
                w.lambda_cc * self.cycle.unwrap_or(0.0)
                    + w.lambda_cls * self.cls
                    + w.lambda_v * self.mouth.unwrap_or(0.0)
                    - w.lambda_adv * self.adv
            }
        }
    }
}

/// Render history as CSV (stable column order, blank for absent parts).
pub fn history_to_csv(history: &[HistoryRecord]) -> String {
    let mut out = String::from("step,epoch,phase,total,adv,cls,cycle,mouth,gp\n");
    for r in history {
        let phase = match r.phase {
            Phase::Discriminator => "discriminator",
            Phase::Generator => "generator",
        };
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.epoch,
            phase,
            r.total,
            r.adv,
            r.cls,
            opt(r.cycle),
            opt(r.mouth),
            opt(r.gp)
        ));
    }
    out
}

// ----- train state ------------------------------------------------------------------

/// Mutable state of an adversarial training run.
pub struct TrainState {
    pub config: TrainingConfig,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub global_step: u64,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub viseme: Option<VisemeClassifierParams>,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub rng: ChaCha8Rng,
    pub group_sizes: Vec<usize>,
    pub history: Vec<HistoryRecord>,
}

impl TrainState {
    /// Fresh state for a corpus with `channels` controls and the given
    /// style group layout.
    pub fn new(
        config: TrainingConfig,
        channels: usize,
        group_sizes: &[usize],
        viseme: Option<VisemeClassifierParams>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let style_width: usize = group_sizes.iter().sum();
        let g_cfg = config.model.block_config(channels + style_width, channels);
        let d_cfg = config.model.block_config(channels, 1 + style_width);
        let generator =
            GeneratorParams::init(g_cfg, style_width, derive_seed(config.seed, TAG_GENERATOR))?;
        let discriminator = DiscriminatorParams::init(
            d_cfg,
            style_width,
            derive_seed(config.seed, TAG_DISCRIMINATOR),
        )?;
        if config.mouth_loss == "viseme" && viseme.is_none() {
            return Err(TrainError::MissingVisemeClassifier(config.mouth_loss.clone()));
        }
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_STEP));
        let adam_g = AdamState::new(&generator);
        let adam_d = AdamState::new(&discriminator);
        Ok(TrainState {
            config,
            epoch: 0,
            batch_in_epoch: 0,
            global_step: 0,
            generator,
            discriminator,
            viseme,
            adam_g,
            adam_d,
            rng,
            group_sizes: group_sizes.to_vec(),
            history: Vec::new(),
        })
    }
}

// ----- checkpoints --------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub version: u32,
    pub config: TrainingConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub global_step: u64,
    pub group_sizes: Vec<usize>,
    pub generator: ModelCheckpoint,
    pub discriminator: ModelCheckpoint,
    pub viseme: Option<ModelCheckpoint>,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn to_checkpoint(&self) -> TrainCheckpoint {
        TrainCheckpoint {
            version: TRAIN_CHECKPOINT_VERSION,
            config: self.config.clone(),
            config_hash: self.config.fingerprint(),
            epoch: self.epoch,
            batch_in_epoch: self.batch_in_epoch,
            global_step: self.global_step,
            group_sizes: self.group_sizes.clone(),
            generator: self.generator.to_checkpoint(),
            discriminator: self.discriminator.to_checkpoint(),
            viseme: self.viseme.as_ref().map(|v| v.to_checkpoint()),
            adam_g: self.adam_g.clone(),
            adam_d: self.adam_d.clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: TrainCheckpoint) -> Result<Self, TrainError> {
        if ckpt.version != TRAIN_CHECKPOINT_VERSION {
            return Err(TrainError::BadCheckpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        let expected = ckpt.config.fingerprint();
        if ckpt.config_hash != expected {
            return Err(TrainError::ConfigHashMismatch {
                found: ckpt.config_hash,
                expected,
            });
        }
        Ok(TrainState {
            generator: GeneratorParams::from_checkpoint(&ckpt.generator)?,
            discriminator: DiscriminatorParams::from_checkpoint(&ckpt.discriminator)?,
            viseme: ckpt
                .viseme
                .as_ref()
                .map(VisemeClassifierParams::from_checkpoint)
                .transpose()?,
            config: ckpt.config,
            epoch: ckpt.epoch,
            batch_in_epoch: ckpt.batch_in_epoch,
            global_step: ckpt.global_step,
            group_sizes: ckpt.group_sizes,
            adam_g: ckpt.adam_g,
            adam_d: ckpt.adam_d,
            rng: ckpt.rng,
            history: Vec::new(),
        })
    }
}

pub fn save_checkpoint(ckpt: &TrainCheckpoint, path: &Path) -> Result<(), TrainError> {
    let json = serde_json::to_string(ckpt).expect("checkpoint serializes");
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json).map_err(|source| TrainError::Io { path: tmp.clone(), source })?;
    std::fs::rename(&tmp, path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainCheckpoint, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| TrainError::BadCheckpoint(e.to_string()))
}

// ----- style sampling -----------------------------------------------------------------

/// Uniformly sample, per batch row, a target code different from the source.
fn sample_target_styles(
    styles: &Array2<f64>,
    group_sizes: &[usize],
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let all = StyleCode::enumerate_all(group_sizes);
    let b = styles.nrows();
    let c = styles.ncols();
    let mut out = Array2::zeros((b, c));
    for i in 0..b {
        let source: Vec<u8> = (0..c).map(|j| styles[[i, j]] as u8).collect();
        let candidates: Vec<&StyleCode> = all.iter().filter(|s| s.bits != source).collect();
        let pick = candidates[rng.random_range(0..candidates.len())];
        for (j, &bit) in pick.bits.iter().enumerate() {
            out[[i, j]] = bit as f64;
        }
    }
    out
}

// ----- single optimizer steps ------------------------------------------------------------

fn finite_or_abort(
    value: f64,
    quantity: &'static str,
    phase: &'static str,
    state: &TrainState,
) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NumericalAbort {
            quantity,
            phase,
            epoch: state.epoch,
            step: state.global_step,
        })
    }
}

fn grads_finite(
    grads: &[ArrayD<f64>],
    phase: &'static str,
    state: &TrainState,
) -> Result<(), TrainError> {
    for g in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NumericalAbort {
                quantity: "gradient",
                phase,
                epoch: state.epoch,
                step: state.global_step,
            });
        }
    }
    Ok(())
}

/// One discriminator update on `batch`. Generator and viseme parameters are
/// read but never written.
pub fn train_step_discriminator(
    state: &mut TrainState,
    batch: &Batch,
) -> Result<HistoryRecord, TrainError> {
    let cfg = state.config.clone();
    let w = cfg.weights;
    let mut rng = state.rng.clone();

    let targets = sample_target_styles(&batch.styles, &state.group_sizes, &mut rng);

    let mut g = Graph::new();
    let g_leaves = backbone_leaves(&mut g, &state.generator.backbone);
    let d_leaves = backbone_leaves(&mut g, &state.discriminator.backbone);

    let x = g.leaf(batch.data.clone().into_dyn());
    let s_target = g.constant(targets.into_dyn());
    let fake_raw = generator_forward_graph(
        &mut g,
        &g_leaves,
        &state.generator.config,
        x,
        s_target,
        Mode::Train,
        &mut rng,
    );
    // Fakes are constants for the discriminator update.
    let fake = g.detach(fake_raw);
    let fake_value: ndarray::Array3<f64> = g
        .value(fake)
        .clone()
        .into_dimensionality()
        .expect("generator output is 3-d");

    let (critic_real, logits_real) = discriminator_forward_graph(
        &mut g,
        &d_leaves,
        &state.discriminator.config,
        state.discriminator.style_width,
        x,
        Mode::Train,
        &mut rng,
    );
    let (critic_fake, _) = discriminator_forward_graph(
        &mut g,
        &d_leaves,
        &state.discriminator.config,
        state.discriminator.style_width,
        fake,
        Mode::Train,
        &mut rng,
    );

    // Style classification on real sequences only.
    let cls = cls_loss(&mut g, logits_real, &batch.styles, &state.group_sizes, cfg.cls_mode)?;

    let d_cfg = state.discriminator.config.clone();
    let d_width = state.discriminator.style_width;
    // The penalty pass needs its own dropout stream so the interpolation
    // draws and the closure cannot alias one generator.
    let mut gp_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let gp = {
        let d_leaves_ref = &d_leaves;
        gradient_penalty(
            &mut g,
            |g, x_hat| {
                let (scores, _) = discriminator_forward_graph(
                    g,
                    d_leaves_ref,
                    &d_cfg,
                    d_width,
                    x_hat,
                    Mode::Train,
                    &mut gp_rng,
                );
                Ok(scores)
            },
            &batch.data,
            &fake_value,
            &mut rng,
        )?
    };

    let adv = adv_loss(&mut g, critic_real, critic_fake, Some(gp), w.lambda_gp);
    let total = total_discriminator_loss(
        &mut g,
        &DiscriminatorLossParts { cls, adv },
        &w,
    )?;

    let total_value = g.scalar_value(total);
    finite_or_abort(total_value, "loss", "discriminator step", state)?;
    let grad_tensors = g.grad(total, &d_leaves.flat);
    let grads: Vec<ArrayD<f64>> = grad_tensors.iter().map(|t| g.value(*t).clone()).collect();
    grads_finite(&grads, "discriminator step", state)?;

    let record = HistoryRecord {
        step: state.global_step,
        epoch: state.epoch,
        phase: Phase::Discriminator,
        total: total_value,
        adv: g.scalar_value(adv),
        cls: g.scalar_value(cls),
        cycle: None,
        mouth: None,
        gp: Some(g.scalar_value(gp)),
    };
    drop(g);

    state
        .adam_d
        .apply(&mut state.discriminator, &grads, cfg.learning_rate, cfg.beta1, cfg.beta2)?;
    state.rng = rng;
    Ok(record)
}

/// One generator update on `batch`. Discriminator and viseme parameters are
/// read but never written.
pub fn train_step_generator(
    state: &mut TrainState,
    batch: &Batch,
) -> Result<HistoryRecord, TrainError> {
    let cfg = state.config.clone();
    let w = cfg.weights;
    let strategy = mouth_penalty_by_name(&cfg.mouth_loss)?;
    if strategy.name() == "viseme" && state.viseme.is_none() {
        return Err(TrainError::MissingVisemeClassifier(cfg.mouth_loss.clone()));
    }
    let mut rng = state.rng.clone();

    let targets = sample_target_styles(&batch.styles, &state.group_sizes, &mut rng);

    let mut g = Graph::new();
    let g_leaves = backbone_leaves(&mut g, &state.generator.backbone);
    let d_leaves = backbone_leaves(&mut g, &state.discriminator.backbone);
    let v_leaves = state
        .viseme
        .as_ref()
        .map(|v| backbone_leaves(&mut g, &v.backbone));

    let x = g.leaf(batch.data.clone().into_dyn());
    let s_source = g.constant(batch.styles.clone().into_dyn());
    let s_target = g.constant(targets.into_dyn());

    let fake = generator_forward_graph(
        &mut g,
        &g_leaves,
        &state.generator.config,
        x,
        s_target,
        Mode::Train,
        &mut rng,
    );
    let cycled = generator_forward_graph(
        &mut g,
        &g_leaves,
        &state.generator.config,
        fake,
        s_source,
        Mode::Train,
        &mut rng,
    );
    let cycle = cycle_loss(&mut g, x, cycled)?;

    let (critic_real, _) = discriminator_forward_graph(
        &mut g,
        &d_leaves,
        &state.discriminator.config,
        state.discriminator.style_width,
        x,
        Mode::Train,
        &mut rng,
    );
    let (critic_fake, logits_fake) = discriminator_forward_graph(
        &mut g,
        &d_leaves,
        &state.discriminator.config,
        state.discriminator.style_width,
        fake,
        Mode::Train,
        &mut rng,
    );
    let targets_bits: Array2<f64> = g
        .value(s_target)
        .clone()
        .into_dimensionality()
        .expect("style bits are 2-d");
    let cls = cls_loss(&mut g, logits_fake, &targets_bits, &state.group_sizes, cfg.cls_mode)?;

    let mut ctx = MouthContext {
        x,
        generated: fake,
        viseme_leaves: v_leaves.as_ref(),
        viseme_config: state.viseme.as_ref().map(|v| &v.config),
        viseme_target_mode: cfg.viseme_target_mode,
        mouth_indices: &cfg.mouth_channels,
        mode: Mode::Train,
    };
    let mouth = strategy.build(&mut g, &mut ctx, &mut rng)?;

    let adv = adv_loss(&mut g, critic_real, critic_fake, None, w.lambda_gp);
    let total = total_generator_loss(
        &mut g,
        &GeneratorLossParts { cycle, cls, mouth, adv },
        &w,
    )?;

    let total_value = g.scalar_value(total);
    finite_or_abort(total_value, "loss", "generator step", state)?;
    let grad_tensors = g.grad(total, &g_leaves.flat);
    let grads: Vec<ArrayD<f64>> = grad_tensors.iter().map(|t| g.value(*t).clone()).collect();
    grads_finite(&grads, "generator step", state)?;

    let record = HistoryRecord {
        step: state.global_step,
        epoch: state.epoch,
        phase: Phase::Generator,
        total: total_value,
        adv: g.scalar_value(adv),
        cls: g.scalar_value(cls),
        cycle: Some(g.scalar_value(cycle)),
        mouth: mouth.map(|m| g.scalar_value(m)),
        gp: None,
    };
    drop(g);

    state
        .adam_g
        .apply(&mut state.generator, &grads, cfg.learning_rate, cfg.beta1, cfg.beta2)?;
    state.rng = rng;
    Ok(record)
}

// ----- data plumbing ------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct WindowSlot {
    clip: usize,
    start: usize,
}

fn window_slots(clips: &[RigClip], window_len: usize, stride: usize) -> Vec<WindowSlot> {
    let mut slots = Vec::new();
    for (ci, clip) in clips.iter().enumerate() {
        let l = clip.len();
        if l < window_len {
            continue;
        }
        let count = (l - window_len) / stride + 1;
        for k in 0..count {
            slots.push(WindowSlot { clip: ci, start: k * stride });
        }
    }
    slots
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Materialize one training window, applying time-stretch and noise
/// augmentation with draws from the step generator.
fn materialize(
    clips: &[RigClip],
    slot: WindowSlot,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Window, TrainError> {
    let clip = &clips[slot.clip];
    let t = cfg.window_len;
    let (lo, hi) = cfg.stretch_range;
    let augment_stretch = hi > lo || lo != 1.0;

    let data = if augment_stretch {
        let factor = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let span = (((t as f64) * factor).round() as usize)
            .clamp(2, clip.len() - slot.start);
        let source = clip
            .frames
            .slice_axis(Axis(0), ndarray::Slice::from(slot.start..slot.start + span))
            .to_owned();
        if span == t {
            source
        } else {
            time_stretch(&source, t as f64 / span as f64)?
        }
    } else {
        clip.frames
            .slice_axis(Axis(0), ndarray::Slice::from(slot.start..slot.start + t))
            .to_owned()
    };
    let data = if cfg.noise_sigma > 0.0 {
        add_noise(&data, cfg.noise_sigma, rng)
    } else {
        data
    };
    Ok(Window {
        data,
        style: clip.style.clone(),
        source_clip: clip.clip_id.clone(),
        start_frame: slot.start,
        viseme_labels: None,
    })
}

// ----- fit -----------------------------------------------------------------------------------

/// Where checkpoints and history land during [`fit`].
pub struct RunSink<'a> {
    pub dir: &'a Path,
}

impl RunSink<'_> {
    pub fn latest_path(&self) -> PathBuf {
        self.dir.join("checkpoint_latest.json")
    }
    pub fn final_path(&self) -> PathBuf {
        self.dir.join("checkpoint_final.json")
    }
    pub fn history_path(&self) -> PathBuf {
        self.dir.join("history.csv")
    }
}

/// Run the adversarial loop: `n_critic` discriminator batches then one
/// generator batch, repeating over seeded epoch shuffles with on-the-fly
/// augmentation. Checkpoints land in `sink` at the configured cadence.
pub fn fit(
    clips: &[RigClip],
    viseme: Option<VisemeClassifierParams>,
    config: &TrainingConfig,
    sink: Option<&RunSink<'_>>,
    resume: Option<TrainCheckpoint>,
) -> Result<TrainState, TrainError> {
    config.validate()?;
    let channels = clips
        .first()
        .map(|c| c.controls())
        .ok_or(TrainError::NoWindows)?;
    let group_sizes = clips[0].style.group_sizes.clone();

    let mut state = match resume {
        Some(ckpt) => {
            if &ckpt.config != config {
                return Err(TrainError::BadCheckpoint(
                    "resume config differs from requested config".into(),
                ));
            }
            TrainState::from_checkpoint(ckpt)?
        }
        None => TrainState::new(config.clone(), channels, &group_sizes, viseme)?,
    };

    let slots = window_slots(clips, config.window_len, config.stride());
    if slots.is_empty() {
        return Err(TrainError::NoWindows);
    }

    let write_latest = |state: &TrainState| -> Result<(), TrainError> {
        if let Some(sink) = sink {
            save_checkpoint(&state.to_checkpoint(), &sink.latest_path())?;
        }
        Ok(())
    };

    while state.epoch < config.epochs {
        let mut order: Vec<WindowSlot> = slots.clone();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            TAG_EPOCH_BASE + state.epoch as u64,
        ));
        shuffle(&mut order, &mut epoch_rng);

        let batches: Vec<&[WindowSlot]> = order.chunks(config.batch_size).collect();
        for (bi, chunk) in batches.iter().enumerate() {
            if bi < state.batch_in_epoch {
                continue; // already consumed before the resume point
            }
            let mut windows = Vec::with_capacity(chunk.len());
            {
                let mut rng = state.rng.clone();
                for slot in *chunk {
                    windows.push(materialize(clips, *slot, config, &mut rng)?);
                }
                state.rng = rng;
            }
            let batch = assemble_batch(&windows)?;
            let period = config.n_critic as u64 + 1;
            let record = if state.global_step % period < config.n_critic as u64 {
                train_step_discriminator(&mut state, &batch)?
            } else {
                train_step_generator(&mut state, &batch)?
            };
            state.history.push(record);
            state.global_step += 1;
            state.batch_in_epoch += 1;

            if config.checkpoint_every > 0 && state.global_step % config.checkpoint_every as u64 == 0
            {
                write_latest(&state)?;
            }
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;
    }

    if let Some(sink) = sink {
        save_checkpoint(&state.to_checkpoint(), &sink.final_path())?;
        std::fs::write(sink.history_path(), history_to_csv(&state.history)).map_err(|source| {
            TrainError::Io { path: sink.history_path(), source }
        })?;
    }
    Ok(state)
}

// ----- viseme pretraining -----------------------------------------------------------------------

/// Outcome of viseme-classifier pretraining.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub final_val_accuracy: f64,
}

/// Frame-level argmax accuracy of the classifier on labelled windows.
pub fn viseme_frame_accuracy(
    params: &VisemeClassifierParams,
    windows: &[Window],
) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in windows.chunks(64) {
        let batch = assemble_batch(chunk)?;
        let labels = batch
            .viseme_labels
            .as_ref()
            .ok_or_else(|| TrainError::MissingLabels(chunk[0].source_clip.clone()))?;
        let logits = params.forward(&batch.data, Mode::Eval, &mut rng)?;
        let (b, t, v) = logits.dim();
        for bi in 0..b {
            for ti in 0..t {
                let pred = argmax_lane(&logits, bi, ti, v);
                let truth = argmax_lane(labels, bi, ti, v);
                if pred == truth {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

fn argmax_lane(a: &ndarray::Array3<f64>, b: usize, t: usize, v: usize) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..v {
        let x = a[[b, t, i]];
        if x > best_v {
            best_v = x;
            best = i;
        }
    }
    best
}

/// Train the viseme classifier on labelled windows with a 90/10 split by
/// clip; returns the trained parameters and the validation accuracy.
pub fn pretrain_viseme_classifier(
    clips: &[RigClip],
    config: &TrainingConfig,
) -> Result<(VisemeClassifierParams, PretrainReport), TrainError> {
    config.validate()?;
    let labelled: Vec<&RigClip> = clips.iter().collect();
    if labelled.is_empty() {
        return Err(TrainError::NoWindows);
    }
    for clip in &labelled {
        if clip.viseme_track.is_none() {
            return Err(TrainError::MissingLabels(clip.clip_id.clone()));
        }
    }
    let channels = labelled[0].controls();
    let v = labelled[0].viseme_track.as_ref().unwrap().class_count();

    // Deterministic 90/10 split by clip.
    let mut indices: Vec<usize> = (0..labelled.len()).collect();
    let mut split_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_PRETRAIN_SPLIT));
    shuffle(&mut indices, &mut split_rng);
    let val_count = (labelled.len() / 10).max(1).min(labelled.len() - 1);
    let (val_idx, train_idx) = indices.split_at(val_count);

    let collect_windows = |idx: &[usize]| -> Vec<Window> {
        let mut out = Vec::new();
        for &i in idx {
            out.extend(extract_windows(labelled[i], config.window_len, config.stride()));
        }
        out
    };
    let train_windows = collect_windows(train_idx);
    let val_windows = collect_windows(val_idx);
    if train_windows.is_empty() {
        return Err(TrainError::NoWindows);
    }

    let mut params = VisemeClassifierParams::init(
        config.model.block_config(channels, v),
        derive_seed(config.seed, TAG_VISEME),
    )?;
    let mut adam = AdamState::new(&params);

    for epoch in 0..config.pretrain.epochs {
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            TAG_PRETRAIN_EPOCH_BASE + epoch as u64,
        ));
        shuffle(&mut order, &mut epoch_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            TAG_PRETRAIN_EPOCH_BASE + 100_000 + epoch as u64,
        ));
        for chunk in order.chunks(config.batch_size) {
            let windows: Vec<Window> = chunk.iter().map(|&i| train_windows[i].clone()).collect();
            let batch = assemble_batch(&windows)?;
            let labels = batch.viseme_labels.as_ref().expect("labelled corpus");

            let mut g = Graph::new();
            let leaves = backbone_leaves(&mut g, &params.backbone);
            let x = g.leaf(batch.data.clone().into_dyn());
            let logits = viseme_forward_graph(&mut g, &leaves, &params.config, x, Mode::Train, &mut dropout_rng);
            let loss = viseme_pretrain_loss(&mut g, logits, labels)?;
            let loss_value = g.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(TrainError::NumericalAbort {
                    quantity: "loss",
                    phase: "viseme pretraining",
                    epoch,
                    step: 0,
                });
            }
            let grad_tensors = g.grad(loss, &leaves.flat);
            let grads: Vec<ArrayD<f64>> =
                grad_tensors.iter().map(|t| g.value(*t).clone()).collect();
            drop(g);
            for ga in &grads {
                if ga.iter().any(|x| !x.is_finite()) {
                    return Err(TrainError::NumericalAbort {
                        quantity: "gradient",
                        phase: "viseme pretraining",
                        epoch,
                        step: 0,
                    });
                }
            }
            adam.apply(&mut params, &grads, config.pretrain.learning_rate, 0.9, 0.999)?;
        }
    }

    let final_val_accuracy = viseme_frame_accuracy(&params, &val_windows)?;
    Ok((
        params,
        PretrainReport {
            epochs_run: config.pretrain.epochs,
            train_windows: train_windows.len(),
            val_windows: val_windows.len(),
            final_val_accuracy,
        },
    ))
}
