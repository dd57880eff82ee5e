//! Rig-control animation clips: data types, curve-file IO, windowing and
//! training-time augmentation.
//!
//! A clip is an `[L x N]` matrix of per-frame control values, nominally in
//! `[0, 1]` (a `[-0.25, 1.25]` band is tolerated on load). Files are plain
//! text: a header line of control names followed by one comma-separated
//! row per frame, with a JSON sidecar manifest carrying clip id, frame
//! rate, style code and an optional viseme-track file reference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::viseme::VisemeTrack;

/// Validation band around the nominal `[0, 1]` control range.
pub const RANGE_TOLERANCE: f64 = 0.25;

/// Allowed time-stretch factors unless overridden.
pub const DEFAULT_STRETCH_BOUNDS: (f64, f64) = (0.5, 2.0);

#[derive(Debug, Error)]
pub enum AnimError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("row {row} in {path} has {got} values, expected {expected}")]
    RowLengthMismatch {
        path: PathBuf,
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite value at frame {frame}, control {control}")]
    NonFiniteValue { frame: usize, control: usize },
    #[error("value {value} at frame {frame}, control {control} is outside [{lo}, {hi}]")]
    OutOfBandValue {
        frame: usize,
        control: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("fps must be positive, got {0}")]
    NonPositiveFps(f64),
    #[error("invalid style manifest: {0}")]
    InvalidStyle(String),
    #[error("manifest error in {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },
    #[error("clip has no frames")]
    EmptyClip,
    #[error("duplicate control name `{0}`")]
    DuplicateControl(String),
    #[error("viseme track length {track} does not match clip length {clip}")]
    VisemeLengthMismatch { track: usize, clip: usize },
    #[error("stretch factor {factor} outside [{lo}, {hi}]")]
    StretchOutOfBounds { factor: f64, lo: f64, hi: f64 },
    #[error("cannot stretch a window with fewer than 2 frames")]
    StretchTooShort,
    #[error("cannot assemble an empty batch")]
    EmptyBatch,
    #[error("batch windows disagree in shape: {0}")]
    HeterogeneousBatch(String),
    #[error("viseme error: {0}")]
    Viseme(#[from] crate::viseme::VisemeError),
}

/// Grouped multi-hot style label: one active bit per group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleCode {
    pub group_sizes: Vec<usize>,
    pub bits: Vec<u8>,
}

impl StyleCode {
    /// Build from one selected option index per group.
    pub fn from_group_indices(group_sizes: &[usize], indices: &[usize]) -> Result<Self, AnimError> {
        if group_sizes.len() != indices.len() {
            return Err(AnimError::InvalidStyle(format!(
                "{} groups but {} indices",
                group_sizes.len(),
                indices.len()
            )));
        }
        let mut bits = vec![0u8; group_sizes.iter().sum()];
        let mut offset = 0;
        for (&size, &idx) in group_sizes.iter().zip(indices) {
            if idx >= size {
                return Err(AnimError::InvalidStyle(format!(
                    "index {idx} out of range for group of size {size}"
                )));
            }
            bits[offset + idx] = 1;
            offset += size;
        }
        let code = StyleCode { group_sizes: group_sizes.to_vec(), bits };
        code.validate()?;
        Ok(code)
    }

    pub fn validate(&self) -> Result<(), AnimError> {
        let c: usize = self.group_sizes.iter().sum();
        if c < 2 {
            return Err(AnimError::InvalidStyle(format!(
                "total style width {c} < 2"
            )));
        }
        if self.group_sizes.is_empty() {
            return Err(AnimError::InvalidStyle("no style groups".into()));
        }
        if self.group_sizes.iter().any(|&s| s == 0) {
            return Err(AnimError::InvalidStyle("empty style group".into()));
        }
        if self.bits.len() != c {
            return Err(AnimError::InvalidStyle(format!(
                "bit vector length {} != sum of group sizes {c}",
                self.bits.len()
            )));
        }
        let mut offset = 0;
        for (gi, &size) in self.group_sizes.iter().enumerate() {
            let ones: usize = self.bits[offset..offset + size]
                .iter()
                .map(|&b| b as usize)
                .sum();
            if self.bits[offset..offset + size].iter().any(|&b| b > 1) {
                return Err(AnimError::InvalidStyle(format!(
                    "non-binary bit in group {gi}"
                )));
            }
            if ones != 1 {
                return Err(AnimError::InvalidStyle(format!(
                    "group {gi} has {ones} active bits, expected exactly 1"
                )));
            }
            offset += size;
        }
        Ok(())
    }

    /// Total width C of the bit vector.
    pub fn width(&self) -> usize {
        self.bits.len()
    }

    /// Selected option index within each group.
    pub fn group_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.group_sizes.len());
        let mut offset = 0;
        for &size in &self.group_sizes {
            let idx = self.bits[offset..offset + size]
                .iter()
                .position(|&b| b == 1)
                .expect("validated style code");
            out.push(idx);
            offset += size;
        }
        out
    }

    /// Every valid code for the given group sizes, in lexicographic order.
    pub fn enumerate_all(group_sizes: &[usize]) -> Vec<StyleCode> {
        let mut combos = vec![vec![]];
        for &size in group_sizes {
            let mut next = Vec::with_capacity(combos.len() * size);
            for combo in &combos {
                for i in 0..size {
                    let mut c = combo.clone();
                    c.push(i);
                    next.push(c);
                }
            }
            combos = next;
        }
        combos
            .iter()
            .map(|idx| StyleCode::from_group_indices(group_sizes, idx).expect("valid by construction"))
            .collect()
    }

    pub fn bits_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// A named, fixed-rate rig-control clip with style label and an optional
/// aligned viseme track.
#[derive(Clone, Debug, PartialEq)]
pub struct RigClip {
    pub clip_id: String,
    pub control_names: Vec<String>,
    /// `[L x N]` frame matrix.
    pub frames: Array2<f64>,
    pub fps: f64,
    pub style: StyleCode,
    pub viseme_track: Option<VisemeTrack>,
}

impl RigClip {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn controls(&self) -> usize {
        self.frames.ncols()
    }

    pub fn validate(&self) -> Result<(), AnimError> {
        if self.frames.nrows() == 0 || self.frames.ncols() == 0 {
            return Err(AnimError::EmptyClip);
        }
        if self.control_names.len() != self.frames.ncols() {
            return Err(AnimError::MalformedHeader {
                path: PathBuf::new(),
                reason: format!(
                    "{} control names but {} columns",
                    self.control_names.len(),
                    self.frames.ncols()
                ),
            });
        }
        for (i, name) in self.control_names.iter().enumerate() {
            if self.control_names[..i].contains(name) {
                return Err(AnimError::DuplicateControl(name.clone()));
            }
        }
        if self.fps <= 0.0 {
            return Err(AnimError::NonPositiveFps(self.fps));
        }
        let (lo, hi) = (-RANGE_TOLERANCE, 1.0 + RANGE_TOLERANCE);
        for ((frame, control), &v) in self.frames.indexed_iter() {
            if !v.is_finite() {
                return Err(AnimError::NonFiniteValue { frame, control });
            }
            if v < lo || v > hi {
                return Err(AnimError::OutOfBandValue { frame, control, value: v, lo, hi });
            }
        }
        self.style.validate()?;
        if let Some(track) = &self.viseme_track {
            if track.len() != self.len() {
                return Err(AnimError::VisemeLengthMismatch {
                    track: track.len(),
                    clip: self.len(),
                });
            }
        }
        Ok(())
    }
}

/// A fixed-length training slice of a clip.
#[derive(Clone, Debug)]
pub struct Window {
    /// `[T x N]` frame matrix.
    pub data: Array2<f64>,
    pub style: StyleCode,
    pub source_clip: String,
    pub start_frame: usize,
    /// `[T x V]` per-frame viseme probabilities.
    pub viseme_labels: Option<Array2<f64>>,
}

/// Stacked windows ready for a forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B x T x N]`
    pub data: Array3<f64>,
    /// `[B x C]` style bits.
    pub styles: Array2<f64>,
    /// `[B x T x V]` viseme targets when every window carries them.
    pub viseme_labels: Option<Array3<f64>>,
    pub group_sizes: Vec<usize>,
}

// ----- manifest (sidecar) ---------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    clip_id: String,
    fps: f64,
    style: StyleCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    viseme_file: Option<String>,
}

/// Path of the sidecar manifest for a curve file: the final extension is
/// replaced by `manifest.json`.
pub fn manifest_path(curve_path: &Path) -> PathBuf {
    curve_path.with_extension("manifest.json")
}

/// Path of the viseme-track file for a curve file.
pub fn viseme_track_path(curve_path: &Path) -> PathBuf {
    curve_path.with_extension("visemes.txt")
}

// ----- load / save ----------------------------------------------------------

/// Parse a curve file plus its sidecar manifest into a validated clip.
pub fn load_clip(path: &Path) -> Result<RigClip, AnimError> {
    let text = std::fs::read_to_string(path).map_err(|source| AnimError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| AnimError::MalformedHeader {
        path: path.to_path_buf(),
        reason: "empty file".into(),
    })?;
    let control_names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if control_names.iter().any(|n| n.is_empty()) {
        return Err(AnimError::MalformedHeader {
            path: path.to_path_buf(),
            reason: "empty control name".into(),
        });
    }
    let n = control_names.len();

    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0usize;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| AnimError::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("unparseable number `{}` on data row {}", field.trim(), i + 1),
            })?;
            values.push(v);
            count += 1;
        }
        if count != n {
            return Err(AnimError::RowLengthMismatch {
                path: path.to_path_buf(),
                row: i + 1,
                got: count,
                expected: n,
            });
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(AnimError::EmptyClip);
    }
    let frames = Array2::from_shape_vec((rows, n), values).expect("consistent row lengths");

    let mpath = manifest_path(path);
    let mtext = std::fs::read_to_string(&mpath).map_err(|source| AnimError::Io {
        path: mpath.clone(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&mtext).map_err(|e| AnimError::BadManifest {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    if manifest.fps <= 0.0 {
        return Err(AnimError::NonPositiveFps(manifest.fps));
    }
    manifest.style.validate()?;

    let viseme_track = match &manifest.viseme_file {
        None => None,
        Some(rel) => {
            let vp = path
                .parent()
                .unwrap_or_else(|| Path::new(""))
                .join(rel);
            Some(crate::viseme::VisemeTrack::read_file(&vp, manifest.fps)?)
        }
    };

    let clip = RigClip {
        clip_id: manifest.clip_id,
        control_names,
        frames,
        fps: manifest.fps,
        style: manifest.style,
        viseme_track,
    };
    clip.validate()?;
    Ok(clip)
}

fn format_row(row: ndarray::ArrayView1<f64>) -> String {
    let mut s = String::new();
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        // Shortest round-trip formatting: re-parsing recovers the exact bits.
        let _ = write!(s, "{v}");
    }
    s
}

/// Write a clip as curve file + manifest (+ viseme-track file when present).
pub fn save_clip(clip: &RigClip, path: &Path) -> Result<(), AnimError> {
    clip.validate()?;
    let mut text = String::new();
    text.push_str(&clip.control_names.join(","));
    text.push('\n');
    for row in clip.frames.rows() {
        text.push_str(&format_row(row));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| AnimError::Io {
        path: path.to_path_buf(),
        source,
    })?;

    let viseme_file = match &clip.viseme_track {
        None => None,
        Some(track) => {
            let vp = viseme_track_path(path);
            track.write_file(&vp)?;
            Some(
                vp.file_name()
                    .expect("viseme path has a file name")
                    .to_string_lossy()
                    .into_owned(),
            )
        }
    };

    let manifest = Manifest {
        clip_id: clip.clip_id.clone(),
        fps: clip.fps,
        style: clip.style.clone(),
        viseme_file,
    };
    let mpath = manifest_path(path);
    let mtext = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, mtext).map_err(|source| AnimError::Io { path: mpath, source })
}

// ----- windowing ------------------------------------------------------------

/// Slice a clip into windows of length `window_len` starting every `stride`
/// frames. Returns an empty list when the clip is shorter than a window.
pub fn extract_windows(clip: &RigClip, window_len: usize, stride: usize) -> Vec<Window> {
    assert!(window_len >= 1, "window length must be >= 1");
    assert!(stride >= 1, "stride must be >= 1");
    let l = clip.len();
    if l < window_len {
        return Vec::new();
    }
    let count = (l - window_len) / stride + 1;
    (0..count)
        .map(|k| {
            let start = k * stride;
            let data = clip
                .frames
                .slice_axis(Axis(0), ndarray::Slice::from(start..start + window_len))
                .to_owned();
            let viseme_labels = clip.viseme_track.as_ref().map(|track| {
                track
                    .values
                    .slice_axis(Axis(0), ndarray::Slice::from(start..start + window_len))
                    .to_owned()
            });
            Window {
                data,
                style: clip.style.clone(),
                source_clip: clip.clip_id.clone(),
                start_frame: start,
                viseme_labels,
            }
        })
        .collect()
}

// ----- augmentation ---------------------------------------------------------

/// Resample window data in time by `factor` using linear interpolation.
/// The output has `max(2, round(T * factor))` frames; endpoints map exactly.
pub fn time_stretch(data: &Array2<f64>, factor: f64) -> Result<Array2<f64>, AnimError> {
    time_stretch_bounded(data, factor, DEFAULT_STRETCH_BOUNDS)
}

pub fn time_stretch_bounded(
    data: &Array2<f64>,
    factor: f64,
    bounds: (f64, f64),
) -> Result<Array2<f64>, AnimError> {
    let (lo, hi) = bounds;
    if !(factor >= lo && factor <= hi) {
        return Err(AnimError::StretchOutOfBounds { factor, lo, hi });
    }
    let t = data.nrows();
    if t < 2 {
        return Err(AnimError::StretchTooShort);
    }
    let n = data.ncols();
    let t_out = ((t as f64) * factor).round().max(2.0) as usize;
    let mut out = Array2::zeros((t_out, n));
    for i in 0..t_out {
        // Normalized time in [0, 1]; endpoints land exactly on 0 and 1.
        let tau = i as f64 / (t_out - 1) as f64;
        let pos = tau * (t - 1) as f64;
        let j0 = pos.floor() as usize;
        let j1 = (j0 + 1).min(t - 1);
        let w = pos - j0 as f64;
        for c in 0..n {
            out[[i, c]] = if i == 0 {
                data[[0, c]]
            } else if i == t_out - 1 {
                data[[t - 1, c]]
            } else {
                (1.0 - w) * data[[j0, c]] + w * data[[j1, c]]
            };
        }
    }
    Ok(out)
}

/// Add i.i.d. Gaussian noise with standard deviation `sigma`, then clamp
/// to `[0, 1]`. `sigma == 0` returns the input unchanged.
pub fn add_noise<R: Rng>(data: &Array2<f64>, sigma: f64, rng: &mut R) -> Array2<f64> {
    assert!(sigma >= 0.0, "noise sigma must be non-negative");
    if sigma == 0.0 {
        return data.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    data.mapv(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
}

// ----- batching -------------------------------------------------------------

/// Stack windows into `[B x T x N]` (order preserving). Viseme labels are
/// stacked only when every window carries them.
pub fn assemble_batch(windows: &[Window]) -> Result<Batch, AnimError> {
    let first = windows.first().ok_or(AnimError::EmptyBatch)?;
    let (t, n) = first.data.dim();
    let c = first.style.width();
    let group_sizes = first.style.group_sizes.clone();
    let v = first.viseme_labels.as_ref().map(|l| l.ncols());

    for (i, w) in windows.iter().enumerate() {
        if w.data.dim() != (t, n) {
            return Err(AnimError::HeterogeneousBatch(format!(
                "window {i} has shape {:?}, expected {:?}",
                w.data.dim(),
                (t, n)
            )));
        }
        if w.style.group_sizes != group_sizes {
            return Err(AnimError::HeterogeneousBatch(format!(
                "window {i} has different style groups"
            )));
        }
        match (&w.viseme_labels, v) {
            (Some(l), Some(vc)) if l.ncols() == vc && l.nrows() == t => {}
            (None, None) => {}
            _ => {
                return Err(AnimError::HeterogeneousBatch(format!(
                    "window {i} disagrees on viseme labels"
                )))
            }
        }
    }

    let b = windows.len();
    let mut data = Array3::zeros((b, t, n));
    let mut styles = Array2::zeros((b, c));
    for (i, w) in windows.iter().enumerate() {
        data.index_axis_mut(Axis(0), i).assign(&w.data);
        for (j, bit) in w.style.bits_f64().iter().enumerate() {
            styles[[i, j]] = *bit;
        }
    }
    let viseme_labels = v.map(|vc| {
        let mut labels = Array3::zeros((b, t, vc));
        for (i, w) in windows.iter().enumerate() {
            labels
                .index_axis_mut(Axis(0), i)
                .assign(w.viseme_labels.as_ref().expect("checked above"));
        }
        labels
    });

    Ok(Batch { data, styles, viseme_labels, group_sizes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn style_ab() -> StyleCode {
        StyleCode::from_group_indices(&[2, 2], &[0, 1]).unwrap()
    }

    fn clip_with(frames: Array2<f64>) -> RigClip {
        let n = frames.ncols();
        RigClip {
            clip_id: "test".into(),
            control_names: (0..n).map(|i| format!("ctl{i}")).collect(),
            frames,
            fps: 60.0,
            style: style_ab(),
            viseme_track: None,
        }
    }

    #[test]
    fn style_code_rejects_bad_bit_patterns() {
        assert!(StyleCode { group_sizes: vec![2], bits: vec![1, 1] }
            .validate()
            .is_err());
        assert!(StyleCode { group_sizes: vec![2], bits: vec![0, 0] }
            .validate()
            .is_err());
        assert!(StyleCode { group_sizes: vec![2, 2], bits: vec![1, 0, 0, 1] }
            .validate()
            .is_ok());
        // C must be at least 2.
        assert!(StyleCode { group_sizes: vec![1], bits: vec![1] }
            .validate()
            .is_err());
    }

    #[test]
    fn style_code_enumeration_covers_all_combinations() {
        let all = StyleCode::enumerate_all(&[2, 3]);
        assert_eq!(all.len(), 6);
        for code in &all {
            code.validate().unwrap();
        }
        // Lexicographic by group indices.
        assert_eq!(all[0].group_indices(), vec![0, 0]);
        assert_eq!(all[5].group_indices(), vec![1, 2]);
    }

    #[test]
    fn load_parses_simple_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "x,y\n0,1\n1,0\n").unwrap();
        std::fs::write(
            manifest_path(&p),
            r#"{"clip_id":"a","fps":60.0,"style":{"group_sizes":[2,2],"bits":[1,0,0,1]}}"#,
        )
        .unwrap();
        let clip = load_clip(&p).unwrap();
        assert_eq!(clip.frames, arr2(&[[0.0, 1.0], [1.0, 0.0]]));
        assert_eq!(clip.fps, 60.0);
        assert_eq!(clip.clip_id, "a");
    }

    #[test]
    fn load_rejects_row_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "x,y\n0,1\n1,0\n0.5\n").unwrap();
        std::fs::write(
            manifest_path(&p),
            r#"{"clip_id":"a","fps":60.0,"style":{"group_sizes":[2,2],"bits":[1,0,0,1]}}"#,
        )
        .unwrap();
        match load_clip(&p) {
            Err(AnimError::RowLengthMismatch { row, got, expected, .. }) => {
                assert_eq!((row, got, expected), (3, 1, 2));
            }
            other => panic!("expected row-length mismatch, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_out_of_band_and_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(
            manifest_path(&p),
            r#"{"clip_id":"a","fps":60.0,"style":{"group_sizes":[2,2],"bits":[1,0,0,1]}}"#,
        )
        .unwrap();
        std::fs::write(&p, "x\n2.0\n").unwrap();
        assert!(matches!(load_clip(&p), Err(AnimError::OutOfBandValue { .. })));
        std::fs::write(&p, "x\nNaN\n").unwrap();
        assert!(matches!(load_clip(&p), Err(AnimError::NonFiniteValue { .. })));
    }

    #[test]
    fn load_rejects_bad_fps_and_style() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "x\n0.5\n").unwrap();
        std::fs::write(
            manifest_path(&p),
            r#"{"clip_id":"a","fps":0.0,"style":{"group_sizes":[2,2],"bits":[1,0,0,1]}}"#,
        )
        .unwrap();
        assert!(matches!(load_clip(&p), Err(AnimError::NonPositiveFps(_))));
        std::fs::write(
            manifest_path(&p),
            r#"{"clip_id":"a","fps":60.0,"style":{"group_sizes":[2,2],"bits":[1,1,0,1]}}"#,
        )
        .unwrap();
        assert!(matches!(load_clip(&p), Err(AnimError::InvalidStyle(_))));
    }

    #[test]
    fn save_writes_plain_decimal_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.csv");
        let clip = clip_with(arr2(&[[0.5]]));
        save_clip(&clip, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "ctl0\n0.5\n");
    }

    #[test]
    fn save_refuses_invalid_clip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        let clip = clip_with(arr2(&[[f64::NAN]]));
        assert!(matches!(
            save_clip(&clip, &p),
            Err(AnimError::NonFiniteValue { .. })
        ));
        assert!(!p.exists());
    }

    #[test]
    fn round_trip_is_exact_for_random_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames = Array2::from_shape_fn((100, 10), |_| rng.random::<f64>());
        let clip = clip_with(frames);
        save_clip(&clip, &p).unwrap();
        let loaded = load_clip(&p).unwrap();
        let max_diff = (&clip.frames - &loaded.frames)
            .iter()
            .fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(max_diff <= 1e-9, "round-trip error {max_diff}");
        assert_eq!(clip.frames, loaded.frames, "round-trip should be bit exact");
        assert_eq!(clip, loaded);
    }

    #[test]
    fn windowing_matches_start_formula() {
        let clip = clip_with(Array2::zeros((75, 2)));
        let windows = extract_windows(&clip, 30, 15);
        let starts: Vec<_> = windows.iter().map(|w| w.start_frame).collect();
        assert_eq!(starts, vec![0, 15, 30, 45]);

        assert_eq!(extract_windows(&clip_with(Array2::zeros((30, 2))), 30, 1).len(), 1);
        assert_eq!(extract_windows(&clip_with(Array2::zeros((29, 2))), 30, 1).len(), 0);
    }

    #[test]
    fn windowing_count_formula_exhaustive() {
        for l in 1..=200usize {
            let clip = clip_with(Array2::zeros((l, 1)));
            for t in 1..=l {
                for stride in 1..=8usize {
                    let expected = (l - t) / stride + 1;
                    let windows = extract_windows(&clip, t, stride);
                    assert_eq!(windows.len(), expected, "L={l} T={t} stride={stride}");
                    for (k, w) in windows.iter().enumerate() {
                        assert_eq!(w.start_frame, k * stride);
                        assert_eq!(w.data.nrows(), t);
                    }
                }
            }
        }
    }

    #[test]
    fn time_stretch_identity_and_hand_case() {
        let ramp = arr2(&[[0.0], [1.0], [2.0], [3.0]]);
        let same = time_stretch(&ramp, 1.0).unwrap();
        assert_eq!(same, ramp);

        let out = time_stretch(&ramp, 0.75).unwrap();
        assert_eq!(out.nrows(), 3);
        let expect = arr2(&[[0.0], [1.5], [3.0]]);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn time_stretch_constant_stays_constant() {
        let c = Array2::from_elem((10, 3), 0.42);
        for factor in [0.5, 0.77, 1.3, 2.0] {
            let out = time_stretch(&c, factor).unwrap();
            assert!(out.iter().all(|&v| (v - 0.42).abs() < 1e-12));
        }
    }

    #[test]
    fn time_stretch_rejects_out_of_bounds_factor() {
        let ramp = arr2(&[[0.0], [1.0]]);
        assert!(matches!(
            time_stretch(&ramp, 2.5),
            Err(AnimError::StretchOutOfBounds { .. })
        ));
        assert!(time_stretch_bounded(&ramp, 2.5, (0.1, 3.0)).is_ok());
    }

    #[test]
    fn time_stretch_is_exact_on_affine_signals() {
        // Linear interpolation reproduces per-control affine functions of
        // normalized time exactly.
        let t = 13;
        let data = Array2::from_shape_fn((t, 4), |(i, c)| {
            0.05 + 0.01 * (c as f64) + 0.02 * (c as f64 + 1.0) * i as f64 / (t - 1) as f64
        });
        for factor in [0.5, 0.65, 1.0, 1.37, 2.0] {
            let out = time_stretch(&data, factor).unwrap();
            let t_out = out.nrows();
            for i in 0..t_out {
                let tau = i as f64 / (t_out - 1) as f64;
                for c in 0..4 {
                    let expect = 0.05 + 0.01 * (c as f64) + 0.02 * (c as f64 + 1.0) * tau;
                    assert!(
                        (out[[i, c]] - expect).abs() < 1e-12,
                        "factor {factor} frame {i} control {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn stretch_then_inverse_preserves_endpoints_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = Array2::from_shape_fn((17, 3), |_| rng.random::<f64>());
        for factor in [0.5, 0.8, 1.25, 2.0] {
            let fwd = time_stretch(&data, factor).unwrap();
            let back = time_stretch(&fwd, 1.0 / factor).unwrap();
            for c in 0..3 {
                assert_eq!(back[[0, c]], data[[0, c]]);
                assert_eq!(back[[back.nrows() - 1, c]], data[[data.nrows() - 1, c]]);
            }
        }
    }

    #[test]
    fn add_noise_zero_sigma_is_identity_and_seeded_runs_repeat() {
        let data = Array2::from_elem((5, 5), 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(add_noise(&data, 0.0, &mut rng), data);

        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let a = add_noise(&data, 0.01, &mut r1);
        let b = add_noise(&data, 0.01, &mut r2);
        assert_eq!(a, b);
        assert_ne!(a, data);
    }

    #[test]
    fn add_noise_clamps_to_unit_interval() {
        let data = Array2::from_elem((10, 10), 0.999);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy = add_noise(&data, 5.0, &mut rng);
        assert!(noisy.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(noisy.iter().any(|&v| v == 1.0), "some draw should clamp high");
        assert!(noisy.iter().any(|&v| v == 0.0), "some draw should clamp low");
    }

    #[test]
    fn assemble_batch_stacks_and_validates() {
        let w = |t: usize| Window {
            data: Array2::zeros((t, 71)),
            style: style_ab(),
            source_clip: "c".into(),
            start_frame: 0,
            viseme_labels: None,
        };
        let batch = assemble_batch(&[w(30), w(30)]).unwrap();
        assert_eq!(batch.data.dim(), (2, 30, 71));
        assert_eq!(batch.styles.dim(), (2, 4));

        assert!(matches!(assemble_batch(&[]), Err(AnimError::EmptyBatch)));
        assert!(matches!(
            assemble_batch(&[w(30), w(29)]),
            Err(AnimError::HeterogeneousBatch(_))
        ));
    }
}
