//! Many-to-many style transfer for facial-rig control animation.
//!
//! Animations are sequences of per-frame rig-control vectors in `[0, 1]`.
//! A single generator maps an animation plus a target style code to a new
//! animation in that style; a Wasserstein critic with per-frame style
//! classification drives adversarial training, and a frozen viseme
//! classifier preserves lip shapes through a cross-entropy penalty.
//!
//! Crate layout:
//! - [`anim`]: clip/window data types, curve-file IO, augmentation
//! - [`synth`]: procedural styled corpus with oracle labels
//! - [`viseme`]: phoneme-posterior ingestion and viseme reduction
//! - [`autodiff`]: reverse-mode tape over `ndarray` (supports gradients
//!   of gradients, needed by the gradient penalty)
//! - [`models`]: generator / critic / viseme-classifier networks
//! - [`losses`]: training objectives and the mouth-penalty registry
//! - [`training`]: pretraining, adversarial loop, checkpointing
//! - [`eval`]: inference, desk-scale metrics, ablation harness

pub mod anim;
pub mod autodiff;
pub mod eval;
pub mod losses;
pub mod models;
pub mod synth;
pub mod training;
pub mod viseme;
