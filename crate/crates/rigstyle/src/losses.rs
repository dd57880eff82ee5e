//! Training objectives: cycle consistency, grouped style classification,
//! Wasserstein adversarial loss with gradient penalty, the viseme-preserving
//! loss, its cosine-mouth ablation baseline, and the weighted totals.
//!
//! Every loss is built on the autodiff tape so the training loop can take
//! gradients through it; the gradient penalty relies on the tape's support
//! for differentiating gradients.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{log_softmax_last, softmax_last, Graph, Tensor};
use crate::models::{viseme_forward_graph, BackboneLeaves, BlockConfig, Mode};

/// Stabilizer added under the square root of the gradient-penalty norm and
/// the window norm of the cycle loss; well below every stated tolerance.
const NORM_EPS: f64 = 1e-24;

/// Stabilizer in the cosine-similarity denominator.
const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("group sizes sum to {got}, logits carry {expected} classes")]
    GroupSizeMismatch { got: usize, expected: usize },
    #[error("mouth index set is empty")]
    EmptyMouthIndices,
    #[error("mouth index {index} out of range for {channels} channels")]
    MouthIndexOutOfRange { index: usize, channels: usize },
    #[error("target row {row} sums to {sum}, expected 1")]
    InvalidTargetRow { row: usize, sum: f64 },
    #[error("non-finite gradient inside the gradient penalty")]
    NonFiniteGradient,
    #[error("non-finite loss component `{0}`")]
    NonFiniteComponent(&'static str),
    #[error("unknown mouth penalty `{0}` (expected one of {1})")]
    UnknownMouthPenalty(String, String),
    #[error("mouth penalty `{0}` needs {1}")]
    MissingMouthContext(&'static str, &'static str),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

/// Weights of the combined objectives. `lambda_gp` scales the gradient
/// penalty inside the discriminator's adversarial term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "default_lambda_cc")]
    pub lambda_cc: f64,
    #[serde(default = "default_one")]
    pub lambda_cls: f64,
    #[serde(default = "default_one")]
    pub lambda_v: f64,
    #[serde(default = "default_one")]
    pub lambda_adv: f64,
    #[serde(default = "default_lambda_gp")]
    pub lambda_gp: f64,
}

fn default_lambda_cc() -> f64 {
    10.0
}
fn default_one() -> f64 {
    1.0
}
fn default_lambda_gp() -> f64 {
    10.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cc: default_lambda_cc(),
            lambda_cls: 1.0,
            lambda_v: 1.0,
            lambda_adv: 1.0,
            lambda_gp: default_lambda_gp(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            self.lambda_cc,
            self.lambda_cls,
            self.lambda_v,
            self.lambda_adv,
            self.lambda_gp,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LossError::NonFiniteComponent("loss weight"));
        }
        Ok(())
    }
}

fn check_same_shape(g: &Graph, a: Tensor, b: Tensor) -> Result<(), LossError> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

// ----- cycle consistency ------------------------------------------------------

/// Mean over the batch of the per-window L2 (Frobenius) norm
/// `|| x - cycled ||_2`, both `[B,T,N]`.
pub fn cycle_loss(g: &mut Graph, x: Tensor, cycled: Tensor) -> Result<Tensor, LossError> {
    check_same_shape(g, x, cycled)?;
    let shape = g.shape(x).to_vec();
    let (b, rest) = (shape[0], shape[1..].iter().product::<usize>());
    let diff = g.sub(x, cycled);
    let flat = g.reshape(diff, &[b, rest]);
    let sq = g.mul(flat, flat);
    let ssq = g.sum_to(sq, &[b, 1]);
    let norms = g.sqrt_eps(ssq, NORM_EPS);
    Ok(g.mean_all(norms))
}

// ----- grouped style classification --------------------------------------------

/// How style logits are scored against the grouped multi-hot code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsMode {
    /// One softmax cross-entropy per style group (default).
    #[default]
    GroupedSoftmax,
    /// Independent per-bit sigmoid cross-entropy.
    IndependentSigmoid,
}

/// Cross-entropy of per-frame style logits `[B,T,C]` against target bits
/// `[B,C]`, averaged over frames, groups and batch. The same functional
/// form scores real data against true codes and generated data against the
/// requested codes.
pub fn cls_loss(
    g: &mut Graph,
    logits: Tensor,
    target_bits: &Array2<f64>,
    group_sizes: &[usize],
    mode: ClsMode,
) -> Result<Tensor, LossError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 {
        return Err(LossError::ShapeMismatch(format!(
            "style logits must be [B,T,C], got {shape:?}"
        )));
    }
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let total: usize = group_sizes.iter().sum();
    if total != c {
        return Err(LossError::GroupSizeMismatch { got: total, expected: c });
    }
    if target_bits.dim() != (b, c) {
        return Err(LossError::ShapeMismatch(format!(
            "target bits {:?} vs batch ({b}, {c})",
            target_bits.dim()
        )));
    }

    match mode {
        ClsMode::GroupedSoftmax => {
            let mut group_losses = Vec::with_capacity(group_sizes.len());
            let mut offset = 0;
            for &size in group_sizes {
                let group_logits = g.narrow(logits, 2, offset, size);
                let logp = log_softmax_last(g, group_logits);
                let target = target_bits
                    .slice(ndarray::s![.., offset..offset + size])
                    .to_owned();
                let target_btc = g.constant(target.insert_axis(Axis(1)).into_dyn());
                let target_full = g.broadcast_to(target_btc, &[b, t, size]);
                let picked = g.mul(logp, target_full);
                let sum = g.sum_all(picked);
                // One target class per frame: mean over B*T frames.
                let per_frame = g.mul_scalar(sum, -1.0 / (b * t) as f64);
                group_losses.push(per_frame);
                offset += size;
            }
            let mut acc = group_losses[0];
            for &l in &group_losses[1..] {
                acc = g.add(acc, l);
            }
            Ok(g.mul_scalar(acc, 1.0 / group_sizes.len() as f64))
        }
        ClsMode::IndependentSigmoid => {
            // -mean over B,T,C of s*log(sig(l)) + (1-s)*log(1-sig(l)),
            // written as softplus terms for stability:
            // loss = softplus(l) - s*l  with softplus(l) = log(1 + e^l).
            // log_softmax over [l, 0] pairs gives the same expression; keep
            // it simple with a stable composite here.
            let target = g.constant(
                target_bits
                    .clone()
                    .insert_axis(Axis(1))
                    .into_dyn(),
            );
            let target_full = g.broadcast_to(target, &[b, t, c]);
            // softplus(l) = max(l, 0) + ln(1 + exp(-|l|)) ; the max/abs parts
            // are piecewise linear so we build them from a constant mask.
            let pos_part = {
                let mask = g
                    .value(logits)
                    .mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = g.constant(mask);
                g.mul(logits, m)
            };
            let neg_abs = {
                let sign = g.value(logits).mapv(|v| if v > 0.0 { -1.0 } else { 1.0 });
                let s = g.constant(sign);
                g.mul(logits, s)
            };
            let e = g.exp(neg_abs);
            let one_p = g.add_scalar(e, 1.0);
            let softplus_tail = g.ln(one_p);
            let softplus = g.add(pos_part, softplus_tail);
            let sl = g.mul(target_full, logits);
            let per_bit = g.sub(softplus, sl);
            Ok(g.mean_all(per_bit))
        }
    }
}

// ----- Wasserstein adversarial loss -------------------------------------------

/// Gradient penalty: with `eps ~ U(0,1)` per batch element and
/// `x_hat = eps*x_real + (1-eps)*x_fake`, returns
/// `mean_b (|| grad_{x_hat} mean_t critic(x_hat) ||_2 - 1)^2`.
///
/// The critic closure must return per-frame scores `[B,T]` for a `[B,T,N]`
/// input. Both sample tensors are treated as constants.
pub fn gradient_penalty<F>(
    g: &mut Graph,
    mut critic: F,
    x_real: &Array3<f64>,
    x_fake: &Array3<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, LossError>
where
    F: FnMut(&mut Graph, Tensor) -> Result<Tensor, LossError>,
{
    if x_real.dim() != x_fake.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x_real.dim(),
            x_fake.dim()
        )));
    }
    let (b, t, n) = x_real.dim();
    let mut interp = Array3::zeros((b, t, n));
    for i in 0..b {
        let eps: f64 = rng.random();
        let real = x_real.index_axis(Axis(0), i);
        let fake = x_fake.index_axis(Axis(0), i);
        let mut row = interp.index_axis_mut(Axis(0), i);
        row.assign(&(&real * eps + &fake * (1.0 - eps)));
    }

    let x_hat = g.leaf(interp.into_dyn());
    let scores = critic(g, x_hat)?;
    if g.shape(scores) != [b, t] {
        return Err(LossError::ShapeMismatch(format!(
            "critic returned {:?}, expected [{b}, {t}]",
            g.shape(scores)
        )));
    }
    // Sum over the batch of per-sample time means; per-sample gradients are
    // independent, so one backward pass recovers all of them.
    let sums = g.sum_all(scores);
    let objective = g.mul_scalar(sums, 1.0 / t as f64);
    let grad_x = g.grad(objective, &[x_hat])[0];
    if g.value(grad_x).iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFiniteGradient);
    }
    let flat = g.reshape(grad_x, &[b, t * n]);
    let sq = g.mul(flat, flat);
    let ssq = g.sum_to(sq, &[b, 1]);
    let norms = g.sqrt_eps(ssq, NORM_EPS);
    let shifted = g.add_scalar(norms, -1.0);
    let penalty = g.mul(shifted, shifted);
    Ok(g.mean_all(penalty))
}

/// Wasserstein adversarial term
/// `mean(fake scores) - mean(real scores) + lambda_gp * gp`.
///
/// The discriminator minimizes `+lambda_adv * L_adv` (with the penalty);
/// the generator minimizes `-lambda_adv * L_adv` (pass `gp = None`).
pub fn adv_loss(
    g: &mut Graph,
    real_scores: Tensor,
    fake_scores: Tensor,
    gp: Option<Tensor>,
    lambda_gp: f64,
) -> Tensor {
    let mean_fake = g.mean_all(fake_scores);
    let mean_real = g.mean_all(real_scores);
    let mut out = g.sub(mean_fake, mean_real);
    if let Some(gp) = gp {
        let scaled = g.mul_scalar(gp, lambda_gp);
        out = g.add(out, scaled);
    }
    out
}

// ----- viseme-preserving loss ---------------------------------------------------

/// How the target distribution is formed from the classifier's output on
/// the source animation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisemeTargetMode {
    /// Full softmax distribution from the classifier (default).
    #[default]
    Soft,
    /// One-hot argmax of the classifier output.
    HardArgmax,
}

/// Cross-entropy between the frozen classifier's distribution on the real
/// sequence (held constant) and its log-distribution on the generated one;
/// gradients flow only through the generated branch.
pub fn viseme_loss(
    g: &mut Graph,
    logits_real: Tensor,
    logits_generated: Tensor,
    target_mode: VisemeTargetMode,
) -> Result<Tensor, LossError> {
    check_same_shape(g, logits_real, logits_generated)?;
    let shape = g.shape(logits_real).to_vec();
    if shape.len() != 3 {
        return Err(LossError::ShapeMismatch(format!(
            "viseme logits must be [B,T,V], got {shape:?}"
        )));
    }
    let (b, t, v) = (shape[0], shape[1], shape[2]);
    let frozen = g.detach(logits_real);
    let target = match target_mode {
        VisemeTargetMode::Soft => softmax_last(g, frozen),
        VisemeTargetMode::HardArgmax => {
            let one_hot = {
                let vals = g.value(frozen);
                let mut out = ArrayD::zeros(IxDyn(&shape));
                for bi in 0..b {
                    for ti in 0..t {
                        let mut best = 0usize;
                        let mut best_v = f64::NEG_INFINITY;
                        for vi in 0..v {
                            let x = vals[[bi, ti, vi]];
                            if x > best_v {
                                best_v = x;
                                best = vi;
                            }
                        }
                        out[[bi, ti, best]] = 1.0;
                    }
                }
                out
            };
            g.constant(one_hot)
        }
    };
    let target = g.detach(target);
    let logp = log_softmax_last(g, logits_generated);
    let prod = g.mul(target, logp);
    let sum = g.sum_all(prod);
    Ok(g.mul_scalar(sum, -1.0 / (b * t) as f64))
}

/// Soft-target cross-entropy against externally supplied per-frame viseme
/// probabilities, mean over frames and batch. Used to pretrain the
/// classifier.
pub fn viseme_pretrain_loss(
    g: &mut Graph,
    logits: Tensor,
    targets: &Array3<f64>,
) -> Result<Tensor, LossError> {
    let shape = g.shape(logits).to_vec();
    if shape != [targets.dim().0, targets.dim().1, targets.dim().2] {
        return Err(LossError::ShapeMismatch(format!(
            "logits {shape:?} vs targets {:?}",
            targets.dim()
        )));
    }
    let (b, t, _) = targets.dim();
    for (row, r) in targets
        .view()
        .into_shape_with_order((b * t, targets.dim().2))
        .expect("contiguous targets")
        .rows()
        .into_iter()
        .enumerate()
    {
        let sum = r.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LossError::InvalidTargetRow { row, sum });
        }
    }
    let target = g.constant(targets.clone().into_dyn());
    let logp = log_softmax_last(g, logits);
    let prod = g.mul(target, logp);
    let sum = g.sum_all(prod);
    Ok(g.mul_scalar(sum, -1.0 / (b * t) as f64))
}

// ----- cosine mouth baseline -----------------------------------------------------

/// Ablation baseline: mean over frames and batch of `1 - cos(m_x, m_y)` on
/// the mouth sub-vectors of `x` and `y` (`[B,T,N]`).
pub fn cosine_mouth_loss(
    g: &mut Graph,
    x: Tensor,
    y: Tensor,
    mouth_indices: &[usize],
) -> Result<Tensor, LossError> {
    check_same_shape(g, x, y)?;
    if mouth_indices.is_empty() {
        return Err(LossError::EmptyMouthIndices);
    }
    let shape = g.shape(x).to_vec();
    let channels = *shape.last().unwrap();
    for &i in mouth_indices {
        if i >= channels {
            return Err(LossError::MouthIndexOutOfRange { index: i, channels });
        }
    }
    let (b, t) = (shape[0], shape[1]);
    let mx = g.select_cols(x, mouth_indices);
    let my = g.select_cols(y, mouth_indices);
    let dot = {
        let p = g.mul(mx, my);
        g.sum_to(p, &[b, t, 1])
    };
    let nx = {
        let p = g.mul(mx, mx);
        let s = g.sum_to(p, &[b, t, 1]);
        g.sqrt_eps(s, 0.0)
    };
    let ny = {
        let p = g.mul(my, my);
        let s = g.sum_to(p, &[b, t, 1]);
        g.sqrt_eps(s, 0.0)
    };
    let denom_raw = g.mul(nx, ny);
    let denom = g.add_scalar(denom_raw, COSINE_EPS);
    let cos = g.div(dot, denom);
    let neg = g.neg(cos);
    let one_minus = g.add_scalar(neg, 1.0);
    Ok(g.mean_all(one_minus))
}

// ----- totals ---------------------------------------------------------------------

/// Scalar components entering the generator total.
pub struct GeneratorLossParts {
    pub cycle: Tensor,
    pub cls: Tensor,
    /// Mouth-preservation penalty, absent for the bare ablation variant.
    pub mouth: Option<Tensor>,
    /// Adversarial term evaluated without the gradient penalty.
    pub adv: Tensor,
}

/// `L_G = l_cc*cc + l_cls*cls + l_v*mouth - l_adv*adv`.
pub fn total_generator_loss(
    g: &mut Graph,
    parts: &GeneratorLossParts,
    w: &LossWeights,
) -> Result<Tensor, LossError> {
    for (name, t) in [
        ("cycle", Some(parts.cycle)),
        ("cls", Some(parts.cls)),
        ("mouth", parts.mouth),
        ("adv", Some(parts.adv)),
    ] {
        if let Some(t) = t {
            if !g.scalar_value(t).is_finite() {
                return Err(LossError::NonFiniteComponent(name));
            }
        }
    }
    let cc = g.mul_scalar(parts.cycle, w.lambda_cc);
    let cls = g.mul_scalar(parts.cls, w.lambda_cls);
    let mut total = g.add(cc, cls);
    if let Some(mouth) = parts.mouth {
        let m = g.mul_scalar(mouth, w.lambda_v);
        total = g.add(total, m);
    }
    let adv = g.mul_scalar(parts.adv, w.lambda_adv);
    Ok(g.sub(total, adv))
}

/// Scalar components entering the discriminator total.
pub struct DiscriminatorLossParts {
    pub cls: Tensor,
    /// Adversarial term (already includes the weighted gradient penalty).
    pub adv: Tensor,
}

/// `L_D = l_cls*cls + l_adv*adv`.
pub fn total_discriminator_loss(
    g: &mut Graph,
    parts: &DiscriminatorLossParts,
    w: &LossWeights,
) -> Result<Tensor, LossError> {
    for (name, t) in [("cls", parts.cls), ("adv", parts.adv)] {
        if !g.scalar_value(t).is_finite() {
            return Err(LossError::NonFiniteComponent(name));
        }
    }
    let cls = g.mul_scalar(parts.cls, w.lambda_cls);
    let adv = g.mul_scalar(parts.adv, w.lambda_adv);
    Ok(g.add(cls, adv))
}

// ----- mouth-penalty strategy registry ---------------------------------------------

/// Everything a mouth-preservation strategy may consult when building its
/// penalty term for a generator update.
pub struct MouthContext<'a> {
    /// Real input windows `[B,T,N]` on the tape.
    pub x: Tensor,
    /// Generated windows `[B,T,N]` on the tape.
    pub generated: Tensor,
    /// Frozen viseme classifier, when one is loaded.
    pub viseme_leaves: Option<&'a BackboneLeaves>,
    pub viseme_config: Option<&'a BlockConfig>,
    pub viseme_target_mode: VisemeTargetMode,
    /// Indices of the mouth controls, for geometry-based penalties.
    pub mouth_indices: &'a [usize],
    pub mode: Mode,
}

/// A named, interchangeable mouth-preservation penalty. The training loop
/// selects one by name from the registry; each ablation row corresponds to
/// one strategy.
pub trait MouthPenalty: Send + Sync {
    fn name(&self) -> &'static str;
    /// Build the penalty term, or `None` when the strategy adds nothing.
    fn build(
        &self,
        g: &mut Graph,
        ctx: &mut MouthContext<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Tensor>, LossError>;
}

/// No mouth penalty at all.
pub struct NoMouthPenalty;

impl MouthPenalty for NoMouthPenalty {
    fn name(&self) -> &'static str {
        "none"
    }
    fn build(
        &self,
        _g: &mut Graph,
        _ctx: &mut MouthContext<'_>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Option<Tensor>, LossError> {
        Ok(None)
    }
}

/// Viseme-preserving cross-entropy through the frozen classifier.
pub struct VisemePenalty;

impl MouthPenalty for VisemePenalty {
    fn name(&self) -> &'static str {
        "viseme"
    }
    fn build(
        &self,
        g: &mut Graph,
        ctx: &mut MouthContext<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Tensor>, LossError> {
        let leaves = ctx
            .viseme_leaves
            .ok_or(LossError::MissingMouthContext("viseme", "a frozen viseme classifier"))?;
        let config = ctx
            .viseme_config
            .ok_or(LossError::MissingMouthContext("viseme", "a frozen viseme classifier"))?;
        let logits_real = viseme_forward_graph(g, leaves, config, ctx.x, ctx.mode, rng);
        let logits_gen = viseme_forward_graph(g, leaves, config, ctx.generated, ctx.mode, rng);
        Ok(Some(viseme_loss(
            g,
            logits_real,
            logits_gen,
            ctx.viseme_target_mode,
        )?))
    }
}

/// Per-frame cosine constraint on the mouth sub-vector (ablation baseline).
pub struct CosineMouthPenalty;

impl MouthPenalty for CosineMouthPenalty {
    fn name(&self) -> &'static str {
        "cosine"
    }
    fn build(
        &self,
        g: &mut Graph,
        ctx: &mut MouthContext<'_>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Option<Tensor>, LossError> {
        if ctx.mouth_indices.is_empty() {
            return Err(LossError::MissingMouthContext("cosine", "mouth channel indices"));
        }
        Ok(Some(cosine_mouth_loss(
            g,
            ctx.x,
            ctx.generated,
            ctx.mouth_indices,
        )?))
    }
}

/// Names of every registered mouth penalty.
pub fn mouth_penalty_names() -> Vec<&'static str> {
    vec!["none", "cosine", "viseme"]
}

/// Look a strategy up by name.
pub fn mouth_penalty_by_name(name: &str) -> Result<Box<dyn MouthPenalty>, LossError> {
    match name {
        "none" => Ok(Box::new(NoMouthPenalty)),
        "cosine" => Ok(Box::new(CosineMouthPenalty)),
        "viseme" => Ok(Box::new(VisemePenalty)),
        other => Err(LossError::UnknownMouthPenalty(
            other.to_string(),
            mouth_penalty_names().join(", "),
        )),
    }
}
