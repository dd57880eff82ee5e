//! Phoneme-posterior ingestion and reduction to per-frame viseme targets.
//!
//! External speech models emit unnormalized log-probabilities over a
//! phoneme token set at a fixed hop (0.02 s by default). The pipeline here
//! resamples those tracks to the animation frame rate with linear
//! interpolation and collapses them to viseme-class probabilities through
//! a token-to-class map. Resampling can run on raw log-probabilities (the
//! default) or on softmax probabilities.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

use crate::anim::RigClip;

/// Default emission hop of the upstream phoneme model, in seconds.
pub const DEFAULT_HOP_SECONDS: f64 = 0.02;

/// Default viseme class count.
pub const DEFAULT_VISEME_COUNT: usize = 16;

/// A viseme track may exceed the clip by at most this many frames before
/// truncation is refused.
pub const MAX_EXTRA_FRAMES: usize = 2;

#[derive(Debug, Error)]
pub enum VisemeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed phoneme file {path}: {reason}")]
    MalformedPhonemeFile { path: PathBuf, reason: String },
    #[error("malformed viseme map {path}: {reason}")]
    MalformedMap { path: PathBuf, reason: String },
    #[error("malformed viseme track {path}: {reason}")]
    MalformedTrack { path: PathBuf, reason: String },
    #[error("hop must be positive, got {0}")]
    NonPositiveHop(f64),
    #[error("target fps must be positive, got {0}")]
    NonPositiveFps(f64),
    #[error("phoneme track has no samples")]
    EmptyTrack,
    #[error("non-finite log-probability at sample {sample}, token {token}")]
    NonFiniteValue { sample: usize, token: usize },
    #[error("track tokens do not match map tokens: {0}")]
    TokenMismatch(String),
    #[error("viseme row {row} sums to {sum}, expected 1")]
    UnnormalizedRow { row: usize, sum: f64 },
    #[error("negative probability at row {row}")]
    NegativeProbability { row: usize },
    #[error("viseme track fps {track} does not match clip fps {clip}")]
    FpsMismatch { track: f64, clip: f64 },
    #[error("viseme track has {track} frames, clip needs {clip} (deficit > {MAX_EXTRA_FRAMES} surplus allowed)")]
    LengthMismatch { track: usize, clip: usize },
}

/// Time-stamped phoneme posterior matrix: `[K x P]` unnormalized
/// log-probabilities sampled every `hop` seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeTrack {
    pub hop: f64,
    pub token_names: Vec<String>,
    /// `[K x P]`
    pub values: Array2<f64>,
}

impl PhonemeTrack {
    pub fn new(hop: f64, token_names: Vec<String>, values: Array2<f64>) -> Result<Self, VisemeError> {
        if hop <= 0.0 {
            return Err(VisemeError::NonPositiveHop(hop));
        }
        if values.nrows() == 0 {
            return Err(VisemeError::EmptyTrack);
        }
        assert_eq!(
            token_names.len(),
            values.ncols(),
            "token names must match matrix width"
        );
        for ((sample, token), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(VisemeError::NonFiniteValue { sample, token });
            }
        }
        Ok(PhonemeTrack { hop, token_names, values })
    }

    pub fn samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn tokens(&self) -> usize {
        self.values.ncols()
    }

    /// Duration covered by the samples: `(K - 1) * hop` seconds.
    pub fn duration(&self) -> f64 {
        (self.samples() - 1) as f64 * self.hop
    }

    /// Parse the text format: line 1 = hop seconds, line 2 = token names,
    /// then K rows of P comma-separated log-probabilities.
    pub fn read_file(path: &Path) -> Result<Self, VisemeError> {
        let text = std::fs::read_to_string(path).map_err(|source| VisemeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |reason: String| VisemeError::MalformedPhonemeFile {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        let hop: f64 = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .trim()
            .parse()
            .map_err(|_| bad("unparseable hop".into()))?;
        let token_names: Vec<String> = lines
            .next()
            .ok_or_else(|| bad("missing token names".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let p = token_names.len();
        let mut values = Vec::new();
        let mut rows = 0usize;
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != p {
                return Err(bad(format!(
                    "row {} has {} values, expected {p}",
                    i + 1,
                    fields.len()
                )));
            }
            for f in fields {
                values.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(format!("unparseable number on row {}", i + 1)))?,
                );
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(VisemeError::EmptyTrack);
        }
        let matrix = Array2::from_shape_vec((rows, p), values).expect("consistent rows");
        PhonemeTrack::new(hop, token_names, matrix)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), VisemeError> {
        let mut text = String::new();
        let _ = writeln!(text, "{}", self.hop);
        text.push_str(&self.token_names.join(","));
        text.push('\n');
        for row in self.values.rows() {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    text.push(',');
                }
                let _ = write!(text, "{v}");
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|source| VisemeError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Total map from phoneme tokens to viseme classes.
#[derive(Clone, Debug)]
pub struct VisemeMap {
    /// token name -> class index; must cover every track token.
    pub mapping: BTreeMap<String, usize>,
    pub class_count: usize,
    pub class_names: Vec<String>,
}

impl VisemeMap {
    pub fn new(
        mapping: BTreeMap<String, usize>,
        class_count: usize,
        class_names: Vec<String>,
    ) -> Self {
        assert_eq!(class_names.len(), class_count);
        assert!(
            mapping.values().all(|&c| c < class_count),
            "class index out of range"
        );
        VisemeMap { mapping, class_count, class_names }
    }

    /// Parse lines of `token,class_index`. Blank lines and `#` comments are
    /// skipped. Class names default to `v0..v{V-1}`.
    pub fn read_file(path: &Path, class_count: usize) -> Result<Self, VisemeError> {
        let text = std::fs::read_to_string(path).map_err(|source| VisemeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |reason: String| VisemeError::MalformedMap {
            path: path.to_path_buf(),
            reason,
        };
        let mut mapping = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (token, class) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("line {}: expected `token,class`", i + 1)))?;
            let class: usize = class
                .trim()
                .parse()
                .map_err(|_| bad(format!("line {}: unparseable class index", i + 1)))?;
            if class >= class_count {
                return Err(bad(format!(
                    "line {}: class {class} out of range (V = {class_count})",
                    i + 1
                )));
            }
            if mapping.insert(token.trim().to_string(), class).is_some() {
                return Err(bad(format!("line {}: duplicate token `{}`", i + 1, token.trim())));
            }
        }
        if mapping.is_empty() {
            return Err(bad("no mappings".into()));
        }
        let class_names = (0..class_count).map(|i| format!("v{i}")).collect();
        Ok(VisemeMap::new(mapping, class_count, class_names))
    }
}

/// Per-frame viseme probabilities: `[L x V]`, rows summing to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct VisemeTrack {
    /// `[L x V]`
    pub values: Array2<f64>,
    pub fps: f64,
}

impl VisemeTrack {
    pub fn new(values: Array2<f64>, fps: f64) -> Result<Self, VisemeError> {
        if fps <= 0.0 {
            return Err(VisemeError::NonPositiveFps(fps));
        }
        for (row, r) in values.rows().into_iter().enumerate() {
            if r.iter().any(|&v| v < 0.0) {
                return Err(VisemeError::NegativeProbability { row });
            }
            let sum: f64 = r.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(VisemeError::UnnormalizedRow { row, sum });
            }
        }
        Ok(VisemeTrack { values, fps })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn class_count(&self) -> usize {
        self.values.ncols()
    }

    /// Parse L lines of V comma-separated probabilities.
    pub fn read_file(path: &Path, fps: f64) -> Result<Self, VisemeError> {
        let text = std::fs::read_to_string(path).map_err(|source| VisemeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |reason: String| VisemeError::MalformedTrack {
            path: path.to_path_buf(),
            reason,
        };
        let mut values = Vec::new();
        let mut rows = 0usize;
        let mut width = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            match width {
                None => width = Some(fields.len()),
                Some(w) if w != fields.len() => {
                    return Err(bad(format!("row {} has {} values, expected {w}", i + 1, fields.len())))
                }
                _ => {}
            }
            for f in fields {
                values.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(format!("unparseable number on row {}", i + 1)))?,
                );
            }
            rows += 1;
        }
        let width = width.ok_or_else(|| bad("empty file".into()))?;
        let matrix = Array2::from_shape_vec((rows, width), values).expect("consistent rows");
        VisemeTrack::new(matrix, fps)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), VisemeError> {
        let mut text = String::new();
        for row in self.values.rows() {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    text.push(',');
                }
                let _ = write!(text, "{v}");
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|source| VisemeError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Which domain linear resampling runs in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleDomain {
    /// Interpolate the raw log-probabilities, softmax afterwards.
    #[default]
    LogProb,
    /// Softmax each input row first, interpolate probabilities.
    Probability,
}

/// Resample a phoneme track to `target_fps` with per-token linear
/// interpolation. Output sample `k` sits at `t = k / target_fps`; times past
/// the final input sample clamp to it, and the output spans the same
/// duration `(K - 1) * hop`.
pub fn resample_track(track: &PhonemeTrack, target_fps: f64) -> Result<PhonemeTrack, VisemeError> {
    if target_fps <= 0.0 {
        return Err(VisemeError::NonPositiveFps(target_fps));
    }
    let k_in = track.samples();
    let p = track.tokens();
    let duration = track.duration();
    let k_out = (duration * target_fps).floor() as usize + 1;
    let mut out = Array2::zeros((k_out, p));
    for k in 0..k_out {
        let t = k as f64 / target_fps;
        let pos = t / track.hop;
        let j0 = (pos.floor() as usize).min(k_in - 1);
        let j1 = (j0 + 1).min(k_in - 1);
        let w = (pos - j0 as f64).clamp(0.0, 1.0);
        for c in 0..p {
            out[[k, c]] = (1.0 - w) * track.values[[j0, c]] + w * track.values[[j1, c]];
        }
    }
    PhonemeTrack::new(1.0 / target_fps, track.token_names.clone(), out)
}

fn softmax_rows(values: &Array2<f64>) -> Array2<f64> {
    let mut out = values.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Collapse a phoneme track to viseme probabilities: softmax each row over
/// the P tokens, then sum probabilities within each viseme class.
pub fn phonemes_to_visemes(track: &PhonemeTrack, map: &VisemeMap) -> Result<VisemeTrack, VisemeError> {
    let classes = class_indices(track, map)?;
    let probs = softmax_rows(&track.values);
    Ok(collapse_probs(&probs, &classes, map.class_count, 1.0 / track.hop))
}

fn class_indices(track: &PhonemeTrack, map: &VisemeMap) -> Result<Vec<usize>, VisemeError> {
    track
        .token_names
        .iter()
        .map(|name| {
            map.mapping
                .get(name)
                .copied()
                .ok_or_else(|| VisemeError::TokenMismatch(format!("token `{name}` not in map")))
        })
        .collect()
}

fn collapse_probs(probs: &Array2<f64>, classes: &[usize], v: usize, fps: f64) -> VisemeTrack {
    let k = probs.nrows();
    let mut out = Array2::zeros((k, v));
    for (row, r) in probs.rows().into_iter().enumerate() {
        for (tok, &p) in r.iter().enumerate() {
            out[[row, classes[tok]]] += p;
        }
    }
    VisemeTrack { values: out, fps }
}

/// Full ingestion pipeline: resample to the animation rate and collapse to
/// viseme classes, in the configured domain.
pub fn phoneme_pipeline(
    track: &PhonemeTrack,
    map: &VisemeMap,
    target_fps: f64,
    domain: ResampleDomain,
) -> Result<VisemeTrack, VisemeError> {
    match domain {
        ResampleDomain::LogProb => {
            let resampled = resample_track(track, target_fps)?;
            phonemes_to_visemes(&resampled, map)
        }
        ResampleDomain::Probability => {
            let classes = class_indices(track, map)?;
            let probs = PhonemeTrack::new(
                track.hop,
                track.token_names.clone(),
                softmax_rows(&track.values),
            )?;
            let resampled = resample_track(&probs, target_fps)?;
            Ok(collapse_probs(
                &resampled.values,
                &classes,
                map.class_count,
                target_fps,
            ))
        }
    }
}

/// Attach a viseme track to a clip for classifier training. The track must
/// match the clip's frame rate and may be at most [`MAX_EXTRA_FRAMES`]
/// longer (it is truncated); a shorter track is an error.
pub fn attach_viseme_track(clip: &RigClip, visemes: &VisemeTrack) -> Result<RigClip, VisemeError> {
    if (visemes.fps - clip.fps).abs() > 1e-9 {
        return Err(VisemeError::FpsMismatch { track: visemes.fps, clip: clip.fps });
    }
    let l = clip.len();
    if visemes.len() < l || visemes.len() > l + MAX_EXTRA_FRAMES {
        return Err(VisemeError::LengthMismatch { track: visemes.len(), clip: l });
    }
    let values = visemes
        .values
        .slice_axis(ndarray::Axis(0), ndarray::Slice::from(0..l))
        .to_owned();
    let mut out = clip.clone();
    out.viseme_track = Some(VisemeTrack { values, fps: visemes.fps });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    fn uniform_map(p: usize, v: usize) -> VisemeMap {
        let mapping = (0..p).map(|i| (format!("p{i}"), i % v)).collect();
        VisemeMap::new(mapping, v, (0..v).map(|i| format!("v{i}")).collect())
    }

    #[test]
    fn resample_hand_case_two_samples() {
        let track = PhonemeTrack::new(0.02, names(1), arr2(&[[0.0], [1.0]])).unwrap();
        let out = resample_track(&track, 60.0).unwrap();
        // duration 0.02 s at 60 Hz -> samples at t = 0 and t = 1/60
        assert_eq!(out.samples(), 2);
        assert!((out.values[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((out.values[[1, 0]] - 5.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn resample_constant_track_is_constant() {
        let track = PhonemeTrack::new(0.02, names(3), Array2::from_elem((7, 3), 1.25)).unwrap();
        for fps in [10.0, 50.0, 60.0, 240.0] {
            let out = resample_track(&track, fps).unwrap();
            assert!(out.values.iter().all(|&v| (v - 1.25).abs() < 1e-12));
        }
    }

    #[test]
    fn resample_at_native_rate_is_identity() {
        let values = arr2(&[[0.1, 2.0], [03.0, -1.0], [0.7, 0.2], [-2.0, 5.5]]);
        let track = PhonemeTrack::new(0.02, names(2), values.clone()).unwrap();
        let out = resample_track(&track, 50.0).unwrap();
        assert_eq!(out.samples(), 4);
        for (a, b) in out.values.iter().zip(values.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_is_exact_on_affine_signals() {
        let k = 11;
        let values = Array2::from_shape_fn((k, 3), |(i, c)| {
            (c as f64 + 1.0) * 0.3 * (i as f64 * 0.02) - 0.1 * c as f64
        });
        let track = PhonemeTrack::new(0.02, names(3), values).unwrap();
        for fps in [13.0, 60.0, 97.0] {
            let out = resample_track(&track, fps).unwrap();
            for k_out in 0..out.samples() {
                let t = k_out as f64 / fps;
                for c in 0..3 {
                    let expect = (c as f64 + 1.0) * 0.3 * t - 0.1 * c as f64;
                    assert!(
                        (out.values[[k_out, c]] - expect).abs() < 1e-12,
                        "fps {fps} sample {k_out} token {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn resample_clamps_past_final_sample() {
        // Duration 0.03 s at 100 Hz -> samples at 0, 0.01, 0.02, 0.03;
        // 0.03 lands exactly on the final input sample, later times clamp.
        let track = PhonemeTrack::new(0.03, names(1), arr2(&[[0.0], [3.0]])).unwrap();
        let out = resample_track(&track, 100.0).unwrap();
        assert_eq!(out.samples(), 4);
        assert!((out.values[[3, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn visemes_delta_distribution_maps_to_one_hot() {
        let p = 8;
        let mut values = Array2::from_elem((2, p), -1e4);
        values[[0, 3]] = 1e4;
        values[[1, 5]] = 1e4;
        let track = PhonemeTrack::new(0.02, names(p), values).unwrap();
        let map = uniform_map(p, 4);
        let out = phonemes_to_visemes(&track, &map).unwrap();
        assert!((out.values[[0, 3 % 4]] - 1.0).abs() < 1e-12);
        assert!((out.values[[1, 5 % 4]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn visemes_uniform_logits_split_by_class_size() {
        // 8 tokens with uniform logits; 4 of them map to class 0.
        let p = 8;
        let mapping: BTreeMap<String, usize> = (0..p)
            .map(|i| (format!("p{i}"), if i < 4 { 0 } else { 1 + (i - 4) % 3 }))
            .collect();
        let map = VisemeMap::new(mapping, 4, (0..4).map(|i| format!("v{i}")).collect());
        let track = PhonemeTrack::new(0.02, names(p), Array2::zeros((3, p))).unwrap();
        let out = phonemes_to_visemes(&track, &map).unwrap();
        for row in 0..3 {
            assert!((out.values[[row, 0]] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn viseme_rows_conserve_mass() {
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state as f64 / u64::MAX as f64) * 6.0 - 3.0
        };
        let p = 17;
        let values = Array2::from_shape_fn((9, p), |_| next());
        let track = PhonemeTrack::new(0.02, names(p), values).unwrap();
        let out = phonemes_to_visemes(&track, &uniform_map(p, 5)).unwrap();
        for row in out.values.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn token_mismatch_is_an_error() {
        let track = PhonemeTrack::new(0.02, vec!["zz".into()], arr2(&[[0.0]])).unwrap();
        let map = uniform_map(4, 2);
        assert!(matches!(
            phonemes_to_visemes(&track, &map),
            Err(VisemeError::TokenMismatch(_))
        ));
    }

    #[test]
    fn resample_then_collapse_commutes_in_probability_domain() {
        // Both orders are linear maps on probabilities, so the composite
        // must agree at every output frame.
        let p = 6;
        let values = Array2::from_shape_fn((8, p), |(i, c)| ((i * 7 + c * 3) % 5) as f64 * 0.37 - 1.0);
        let track = PhonemeTrack::new(0.02, names(p), values).unwrap();
        let map = uniform_map(p, 3);

        let probs = PhonemeTrack::new(0.02, names(p), softmax_rows(&track.values)).unwrap();

        // Order A: resample probabilities, then collapse.
        let a = phoneme_pipeline(&track, &map, 60.0, ResampleDomain::Probability).unwrap();
        // Order B: collapse first, then resample the collapsed track.
        let collapsed = phonemes_to_visemes(&probs, &map).unwrap();
        let collapsed_track = PhonemeTrack::new(
            0.02,
            (0..3).map(|i| format!("v{i}")).collect(),
            collapsed.values,
        )
        .unwrap();
        let b = resample_track(&collapsed_track, 60.0).unwrap();

        assert_eq!(a.values.dim(), b.values.dim());
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn attach_accepts_equal_or_slightly_longer_tracks() {
        let clip = crate::anim::RigClip {
            clip_id: "c".into(),
            control_names: vec!["a".into()],
            frames: Array2::from_elem((10, 1), 0.5),
            fps: 60.0,
            style: crate::anim::StyleCode::from_group_indices(&[2], &[0]).unwrap_or_else(|_| {
                crate::anim::StyleCode::from_group_indices(&[2, 2], &[0, 0]).unwrap()
            }),
            viseme_track: None,
        };
        let track = |l: usize| VisemeTrack::new(one_hot_rows(l, 4), 60.0).unwrap();

        let same = attach_viseme_track(&clip, &track(10)).unwrap();
        assert_eq!(same.viseme_track.as_ref().unwrap().len(), 10);

        let longer = attach_viseme_track(&clip, &track(11)).unwrap();
        assert_eq!(longer.viseme_track.as_ref().unwrap().len(), 10);

        assert!(matches!(
            attach_viseme_track(&clip, &track(5)),
            Err(VisemeError::LengthMismatch { .. })
        ));
        let wrong_fps = VisemeTrack::new(one_hot_rows(10, 4), 30.0).unwrap();
        assert!(matches!(
            attach_viseme_track(&clip, &wrong_fps),
            Err(VisemeError::FpsMismatch { .. })
        ));
    }

    fn one_hot_rows(l: usize, v: usize) -> Array2<f64> {
        let mut m = Array2::zeros((l, v));
        for i in 0..l {
            m[[i, i % v]] = 1.0;
        }
        m
    }

    #[test]
    fn track_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.visemes.txt");
        let track = VisemeTrack::new(one_hot_rows(6, 3), 60.0).unwrap();
        track.write_file(&p).unwrap();
        let back = VisemeTrack::read_file(&p, 60.0).unwrap();
        assert_eq!(track, back);
    }

    #[test]
    fn map_file_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.txt");
        std::fs::write(&p, "# comment\nAA,10\nB,1\n\nCH,6\n").unwrap();
        let map = VisemeMap::read_file(&p, 16).unwrap();
        assert_eq!(map.mapping["AA"], 10);
        assert_eq!(map.mapping.len(), 3);

        std::fs::write(&p, "AA,99\n").unwrap();
        assert!(VisemeMap::read_file(&p, 16).is_err());
        std::fs::write(&p, "AA,1\nAA,2\n").unwrap();
        assert!(VisemeMap::read_file(&p, 16).is_err());
    }
}
