//! Procedural generator of styled rig-control animation with known ground
//! truth, used for desk-scale training and oracle-based evaluation.
//!
//! Each content id yields one clip per style. Content channels carry a
//! band-limited noise signal shared across that id's clips; mouth channels
//! are driven by a shared random viseme sequence through a fixed pose
//! table; style transforms (per-channel scale/offset plus optional
//! smoothing) touch everything except the mouth channels, so paired clips
//! differ exactly by an invertible transform and lip content is identical
//! across styles. The oracle record lists those pairings.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anim::{RigClip, StyleCode};
use crate::viseme::VisemeTrack;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("style `{style}` drives channel {channel} out of [0,1] (range [{lo:.3}, {hi:.3}])")]
    StyleOutOfRange {
        style: usize,
        channel: usize,
        lo: f64,
        hi: f64,
    },
    #[error("content index set is empty")]
    EmptyContentIndices,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Anim(#[from] crate::anim::AnimError),
}

/// Per-style transform applied to every non-mouth channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStyleSpec {
    pub style: StyleCode,
    /// Per-channel amplitude scale, length N.
    pub scale: Vec<f64>,
    /// Per-channel offset, length N.
    pub offset: Vec<f64>,
    /// Moving-average radius in frames; 0 disables smoothing.
    pub smoothing: usize,
}

/// Corpus geometry plus the style roster.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub styles: Vec<SyntheticStyleSpec>,
    /// Content signals; each is emitted once per style.
    pub clips_per_style: usize,
    /// Frames per clip.
    pub clip_len: usize,
    pub fps: f64,
    pub channels: usize,
    pub content_channels: Vec<usize>,
    pub mouth_channels: Vec<usize>,
    pub viseme_count: usize,
    pub seed: u64,
}

/// Bounds of the raw content signal before style transforms.
pub const CONTENT_BAND: (f64, f64) = (0.3, 0.7);
/// Bounds of the raw auxiliary style-channel signal.
pub const STYLE_BAND: (f64, f64) = (0.4, 0.6);
/// Mouth poses live inside this band.
pub const MOUTH_BAND: (f64, f64) = (0.1, 0.9);
/// Minimum pairwise L2 distance between the per-viseme mouth poses.
pub const MIN_POSE_DISTANCE: f64 = 0.3;
/// Viseme dwell time range, in frames (inclusive).
pub const DWELL_RANGE: (usize, usize) = (5, 15);
/// Moving-average radius applied to the raw mouth pose steps.
pub const MOUTH_SMOOTHING_RADIUS: usize = 1;

impl SyntheticCorpusConfig {
    /// Desk-scale default: 16 channels (4 content, 6 mouth, 6 style), two
    /// style groups of two options each, 13 content ids at 600 frames.
    pub fn default_desk(seed: u64) -> Self {
        let group_sizes = [2usize, 2usize];
        let content: Vec<usize> = (0..4).collect();
        let mouth: Vec<usize> = (4..10).collect();
        let channels = 16;

        let styles = StyleCode::enumerate_all(&group_sizes)
            .into_iter()
            .map(|style| {
                let idx = style.group_indices();
                let (actor, emotion) = (idx[0], idx[1]);
                let mut scale = vec![1.0; channels];
                let mut offset = vec![0.0; channels];
                // Actor signature: content amplitude and the first style bank.
                let content_scale = if actor == 0 { 0.92 } else { 1.1 };
                for &c in &content {
                    scale[c] = content_scale;
                }
                for c in 10..13 {
                    offset[c] = if actor == 0 { -0.12 } else { 0.12 };
                }
                // Emotion signature: content offset and the second style bank.
                let content_offset = if emotion == 0 { -0.04 } else { 0.06 };
                for &c in &content {
                    offset[c] = content_offset;
                }
                for c in 13..16 {
                    scale[c] = if emotion == 0 { 0.7 } else { 1.3 };
                    offset[c] = if emotion == 0 { -0.10 } else { 0.10 };
                }
                SyntheticStyleSpec { style, scale, offset, smoothing: 0 }
            })
            .collect();

        SyntheticCorpusConfig {
            styles,
            clips_per_style: 13,
            clip_len: 600,
            fps: 60.0,
            channels,
            content_channels: content,
            mouth_channels: mouth,
            viseme_count: 16,
            seed,
        }
    }

    pub fn style_channels(&self) -> Vec<usize> {
        (0..self.channels)
            .filter(|c| !self.content_channels.contains(c) && !self.mouth_channels.contains(c))
            .collect()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.styles[0].style.group_sizes
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.styles.is_empty() {
            return Err(SynthError::InvalidConfig("no styles".into()));
        }
        if self.clips_per_style == 0 || self.clip_len < 2 {
            return Err(SynthError::InvalidConfig(
                "need at least one clip per style and two frames".into(),
            ));
        }
        if self.fps <= 0.0 {
            return Err(SynthError::InvalidConfig("fps must be positive".into()));
        }
        for set in [&self.content_channels, &self.mouth_channels] {
            for &c in set {
                if c >= self.channels {
                    return Err(SynthError::InvalidConfig(format!(
                        "channel index {c} out of range"
                    )));
                }
            }
        }
        if self
            .content_channels
            .iter()
            .any(|c| self.mouth_channels.contains(c))
        {
            return Err(SynthError::InvalidConfig(
                "content and mouth channel sets overlap".into(),
            ));
        }
        let group_sizes = self.group_sizes().to_vec();
        let mut combos: Vec<Vec<usize>> = Vec::new();
        for spec in &self.styles {
            spec.style
                .validate()
                .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
            if spec.style.group_sizes != group_sizes {
                return Err(SynthError::InvalidConfig(
                    "styles disagree on group sizes".into(),
                ));
            }
            if spec.scale.len() != self.channels || spec.offset.len() != self.channels {
                return Err(SynthError::InvalidConfig(
                    "style transform length != channel count".into(),
                ));
            }
            let idx = spec.style.group_indices();
            if combos.contains(&idx) {
                return Err(SynthError::InvalidConfig(format!(
                    "style combination {idx:?} appears twice"
                )));
            }
            combos.push(idx);
        }
        let expected: usize = group_sizes.iter().product();
        if combos.len() != expected {
            return Err(SynthError::InvalidConfig(format!(
                "{} styles configured, {expected} group combinations exist",
                combos.len()
            )));
        }

        // Every transformed signal band must stay inside [0,1].
        for (si, spec) in self.styles.iter().enumerate() {
            for c in 0..self.channels {
                if self.mouth_channels.contains(&c) {
                    continue;
                }
                let band = if self.content_channels.contains(&c) {
                    CONTENT_BAND
                } else {
                    STYLE_BAND
                };
                let a = band.0 * spec.scale[c] + spec.offset[c];
                let b = band.1 * spec.scale[c] + spec.offset[c];
                let (lo, hi) = (a.min(b), a.max(b));
                if lo < 0.0 || hi > 1.0 {
                    return Err(SynthError::StyleOutOfRange { style: si, channel: c, lo, hi });
                }
            }
        }
        Ok(())
    }
}

/// Which clip came from which content id and style.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleEntry {
    pub clip_id: String,
    pub content_id: usize,
    pub style_index: usize,
}

/// Ground-truth provenance of a generated corpus: content ids, the style
/// roster, and every cross-style clip pairing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleRecord {
    pub entries: Vec<OracleEntry>,
    pub styles: Vec<SyntheticStyleSpec>,
    /// `(clip a, clip b)` pairs sharing a content id, a < b in style index.
    pub pairs: Vec<(String, String)>,
}

impl OracleRecord {
    pub fn entry_for(&self, clip_id: &str) -> Option<&OracleEntry> {
        self.entries.iter().find(|e| e.clip_id == clip_id)
    }

    /// The clip of the same content id in the given style.
    pub fn paired_clip(&self, clip_id: &str, style_index: usize) -> Option<&str> {
        let entry = self.entry_for(clip_id)?;
        self.entries
            .iter()
            .find(|e| e.content_id == entry.content_id && e.style_index == style_index)
            .map(|e| e.clip_id.as_str())
    }
}

fn moving_average_rows(data: &mut Array2<f64>, radius: usize) {
    if radius == 0 {
        return;
    }
    let l = data.nrows();
    let n = data.ncols();
    let src = data.clone();
    for i in 0..l {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(l - 1);
        let count = (hi - lo + 1) as f64;
        for c in 0..n {
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += src[[j, c]];
            }
            data[[i, c]] = acc / count;
        }
    }
}

/// Band-limited noise in `band`: white noise smoothed twice, then affinely
/// rescaled so its min/max land exactly on the band edges.
fn band_limited_signal(rng: &mut ChaCha8Rng, len: usize, band: (f64, f64)) -> Array1<f64> {
    let mut raw = Array2::from_shape_fn((len, 1), |_| rng.random::<f64>());
    moving_average_rows(&mut raw, 6);
    moving_average_rows(&mut raw, 3);
    let col = raw.column(0);
    let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    raw.column(0)
        .mapv(|v| band.0 + (v - min) / span * (band.1 - band.0))
}

/// The fixed per-viseme mouth-pose table: deterministic rejection sampling
/// until all pairwise distances reach [`MIN_POSE_DISTANCE`].
pub fn mouth_pose_table(viseme_count: usize, mouth_channels: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x706f7365); // fixed, config-independent
    let mut table = Array2::<f64>::zeros((viseme_count, mouth_channels));
    let mut placed = 0usize;
    while placed < viseme_count {
        let candidate: Vec<f64> = (0..mouth_channels)
            .map(|_| rng.random_range(MOUTH_BAND.0..MOUTH_BAND.1))
            .collect();
        let ok = (0..placed).all(|p| {
            let d2: f64 = (0..mouth_channels)
                .map(|c| (table[[p, c]] - candidate[c]).powi(2))
                .sum();
            d2.sqrt() >= MIN_POSE_DISTANCE
        });
        if ok {
            for (c, &v) in candidate.iter().enumerate() {
                table[[placed, c]] = v;
            }
            placed += 1;
        }
    }
    table
}

/// Piecewise-constant viseme ids with dwell times drawn from [`DWELL_RANGE`].
fn viseme_sequence(rng: &mut ChaCha8Rng, len: usize, viseme_count: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(len);
    while ids.len() < len {
        let id = rng.random_range(0..viseme_count);
        let dwell = rng.random_range(DWELL_RANGE.0..=DWELL_RANGE.1);
        for _ in 0..dwell {
            if ids.len() == len {
                break;
            }
            ids.push(id);
        }
    }
    ids
}

/// Generate the corpus: one clip per (content id, style), plus the oracle
/// record describing shared content and pairings.
pub fn generate_corpus(
    config: &SyntheticCorpusConfig,
) -> Result<(Vec<RigClip>, OracleRecord), SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let l = config.clip_len;
    let n = config.channels;
    let v = config.viseme_count;
    let poses = mouth_pose_table(v, config.mouth_channels.len());

    let mut clips = Vec::new();
    let mut entries = Vec::new();
    let mut pairs = Vec::new();

    for content_id in 0..config.clips_per_style {
        // Shared content: one signal per non-mouth channel plus the viseme
        // sequence, drawn once and reused for every style.
        let mut base = Array2::zeros((l, n));
        for c in 0..n {
            if config.mouth_channels.contains(&c) {
                continue;
            }
            let band = if config.content_channels.contains(&c) {
                CONTENT_BAND
            } else {
                STYLE_BAND
            };
            let signal = band_limited_signal(&mut rng, l, band);
            for i in 0..l {
                base[[i, c]] = signal[i];
            }
        }
        let ids = viseme_sequence(&mut rng, l, v);
        let mut mouth = Array2::zeros((l, config.mouth_channels.len()));
        for i in 0..l {
            for (k, _) in config.mouth_channels.iter().enumerate() {
                mouth[[i, k]] = poses[[ids[i], k]];
            }
        }
        moving_average_rows(&mut mouth, MOUTH_SMOOTHING_RADIUS);

        let mut labels = Array2::zeros((l, v));
        for (i, &id) in ids.iter().enumerate() {
            labels[[i, id]] = 1.0;
        }

        for (style_index, spec) in config.styles.iter().enumerate() {
            let mut frames = base.clone();
            for c in 0..n {
                if config.mouth_channels.contains(&c) {
                    continue;
                }
                for i in 0..l {
                    frames[[i, c]] = frames[[i, c]] * spec.scale[c] + spec.offset[c];
                }
            }
            if spec.smoothing > 0 {
                // Smooth the styled channels only; mouth columns are written
                // after this so they stay untouched.
                moving_average_rows(&mut frames, spec.smoothing);
            }
            for (k, &c) in config.mouth_channels.iter().enumerate() {
                for i in 0..l {
                    frames[[i, c]] = mouth[[i, k]];
                }
            }

            for ((frame, channel), &val) in frames.indexed_iter() {
                if !(0.0..=1.0).contains(&val) {
                    let _ = frame;
                    return Err(SynthError::StyleOutOfRange {
                        style: style_index,
                        channel,
                        lo: val,
                        hi: val,
                    });
                }
            }

            let clip_id = format!("content{content_id:03}_style{style_index}");
            let clip = RigClip {
                clip_id: clip_id.clone(),
                control_names: (0..n).map(|c| format!("ctl{c:02}")).collect(),
                frames,
                fps: config.fps,
                style: spec.style.clone(),
                viseme_track: Some(
                    VisemeTrack::new(labels.clone(), config.fps)
                        .expect("one-hot labels are normalized"),
                ),
            };
            clip.validate()?;
            clips.push(clip);
            entries.push(OracleEntry { clip_id, content_id, style_index });
        }

        for a in 0..config.styles.len() {
            for b in (a + 1)..config.styles.len() {
                pairs.push((
                    format!("content{content_id:03}_style{a}"),
                    format!("content{content_id:03}_style{b}"),
                ));
            }
        }
    }

    Ok((
        clips,
        OracleRecord { entries, styles: config.styles.clone(), pairs },
    ))
}

/// Mean squared error restricted to the content channels.
pub fn oracle_content_error(
    x: &Array2<f64>,
    y: &Array2<f64>,
    content_channels: &[usize],
) -> Result<f64, SynthError> {
    if x.dim() != y.dim() {
        return Err(SynthError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    if content_channels.is_empty() {
        return Err(SynthError::EmptyContentIndices);
    }
    for &c in content_channels {
        if c >= x.ncols() {
            return Err(SynthError::ShapeMismatch(format!(
                "content channel {c} out of range for {} columns",
                x.ncols()
            )));
        }
    }
    let mut acc = 0.0;
    for &c in content_channels {
        for i in 0..x.nrows() {
            let d = x[[i, c]] - y[[i, c]];
            acc += d * d;
        }
    }
    Ok(acc / (x.nrows() * content_channels.len()) as f64)
}
