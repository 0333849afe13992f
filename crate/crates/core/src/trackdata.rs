//! Trajectory data model: track sets, feature augmentation with frequency
//! positional encoding, ground-truth label assignment, and track file I/O.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::MaskVideo;
use crate::tensor::Tensor;
use crate::util::pixel_index;

pub const DEFAULT_C_MIN: f32 = 0.5;
pub const DEFAULT_IN_MASK_FRAC: f64 = 0.5;
pub const DEFAULT_FREQ_COUNT: usize = 4;

pub const TRACKS_MAGIC: &[u8; 4] = b"TRKS";
pub const TRACKS_VERSION: u32 = 1;

/// N long-range point trajectories over T frames.
///
/// Coordinates are normalized image units: [0,1] inside the frame, unclamped
/// when a point leaves it (such points carry ρ=false). Validity is derived:
/// `M[i][t] = ρ[i][t] ∧ c[i][t] ≥ c_min`; every track keeps ≥ 1 valid point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    coords: Vec<f32>,      // N×T×2 (u, v)
    depth: Vec<f32>,       // N×T
    visibility: Vec<bool>, // N×T
    confidence: Vec<f32>,  // N×T
    validity: Vec<bool>,   // N×T, derived
    width: u32,
    height: u32,
    track_count: usize,
    frame_count: usize,
    c_min: f32,
}

impl TrackSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        track_count: usize,
        frame_count: usize,
        width: u32,
        height: u32,
        coords: Vec<f32>,
        depth: Vec<f32>,
        visibility: Vec<bool>,
        confidence: Vec<f32>,
        c_min: f32,
    ) -> Result<Self> {
        let (n, t) = (track_count, frame_count);
        if n < 1 {
            return Err(Error::MalformedInput("track set needs N >= 1".into()));
        }
        if t < 2 {
            return Err(Error::MalformedInput("track set needs T >= 2".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::MalformedInput("zero frame resolution".into()));
        }
        if coords.len() != n * t * 2
            || depth.len() != n * t
            || visibility.len() != n * t
            || confidence.len() != n * t
        {
            return Err(Error::ShapeMismatch(format!(
                "track arrays inconsistent with N={n}, T={t}"
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedInput("non-finite coordinate".into()));
        }
        if depth.iter().any(|&d| !d.is_finite() || d < 0.0) {
            return Err(Error::MalformedInput("depth must be finite and >= 0".into()));
        }
        if confidence.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::MalformedInput("confidence outside [0,1]".into()));
        }
        let validity: Vec<bool> = (0..n * t)
            .map(|i| visibility[i] && confidence[i] >= c_min)
            .collect();
        for i in 0..n {
            if !validity[i * t..(i + 1) * t].iter().any(|&v| v) {
                return Err(Error::MalformedInput(format!(
                    "track {i} has no valid points at c_min={c_min}"
                )));
            }
        }
        Ok(TrackSet {
            coords,
            depth,
            visibility,
            confidence,
            validity,
            width,
            height,
            track_count: n,
            frame_count: t,
            c_min,
        })
    }

    pub fn track_count(&self) -> usize {
        self.track_count
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn c_min(&self) -> f32 {
        self.c_min
    }

    #[inline]
    pub fn u(&self, i: usize, t: usize) -> f32 {
        self.coords[(i * self.frame_count + t) * 2]
    }

    #[inline]
    pub fn v(&self, i: usize, t: usize) -> f32 {
        self.coords[(i * self.frame_count + t) * 2 + 1]
    }

    #[inline]
    pub fn depth(&self, i: usize, t: usize) -> f32 {
        self.depth[i * self.frame_count + t]
    }

    #[inline]
    pub fn visible(&self, i: usize, t: usize) -> bool {
        self.visibility[i * self.frame_count + t]
    }

    #[inline]
    pub fn confidence(&self, i: usize, t: usize) -> f32 {
        self.confidence[i * self.frame_count + t]
    }

    #[inline]
    pub fn valid(&self, i: usize, t: usize) -> bool {
        self.validity[i * self.frame_count + t]
    }

    /// Pixel position of point (i, t) under the shared grid convention.
    pub fn pixel(&self, i: usize, t: usize) -> (usize, usize) {
        (
            pixel_index(self.u(i, t) as f64, self.width as usize),
            pixel_index(self.v(i, t) as f64, self.height as usize),
        )
    }

    /// Validity as an N×T tensor of 0.0/1.0 for attention masking.
    pub fn validity_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.track_count, self.frame_count],
            self.validity.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("consistent dims")
    }

    pub fn valid_count(&self, i: usize) -> usize {
        (0..self.frame_count).filter(|&t| self.valid(i, t)).count()
    }

    /// Subset of tracks, preserving order of `indices`.
    pub fn select_tracks(&self, indices: &[usize]) -> Result<TrackSet> {
        let t = self.frame_count;
        let mut coords = Vec::with_capacity(indices.len() * t * 2);
        let mut depth = Vec::with_capacity(indices.len() * t);
        let mut vis = Vec::with_capacity(indices.len() * t);
        let mut conf = Vec::with_capacity(indices.len() * t);
        for &i in indices {
            if i >= self.track_count {
                return Err(Error::MalformedInput(format!("track index {i} out of range")));
            }
            coords.extend_from_slice(&self.coords[i * t * 2..(i + 1) * t * 2]);
            depth.extend_from_slice(&self.depth[i * t..(i + 1) * t]);
            vis.extend_from_slice(&self.visibility[i * t..(i + 1) * t]);
            conf.extend_from_slice(&self.confidence[i * t..(i + 1) * t]);
        }
        TrackSet::new(
            indices.len(),
            t,
            self.width,
            self.height,
            coords,
            depth,
            vis,
            conf,
            self.c_min,
        )
    }

    /// Keep only the listed frames (temporal subsampling). Tracks left with
    /// zero valid points are dropped; the second return value lists the
    /// surviving original track indices.
    pub fn select_frames(&self, frames: &[usize]) -> Result<(TrackSet, Vec<usize>)> {
        if frames.len() < 2 {
            return Err(Error::MalformedInput("frame subset needs T >= 2".into()));
        }
        for &f in frames {
            if f >= self.frame_count {
                return Err(Error::MalformedInput(format!("frame index {f} out of range")));
            }
        }
        let kept: Vec<usize> = (0..self.track_count)
            .filter(|&i| frames.iter().any(|&f| self.valid(i, f)))
            .collect();
        if kept.is_empty() {
            return Err(Error::MalformedInput(
                "no track remains valid on the frame subset".into(),
            ));
        }
        let nt = frames.len();
        let mut coords = Vec::with_capacity(kept.len() * nt * 2);
        let mut depth = Vec::with_capacity(kept.len() * nt);
        let mut vis = Vec::with_capacity(kept.len() * nt);
        let mut conf = Vec::with_capacity(kept.len() * nt);
        for &i in &kept {
            for &f in frames {
                coords.push(self.u(i, f));
                coords.push(self.v(i, f));
                depth.push(self.depth(i, f));
                vis.push(self.visible(i, f));
                conf.push(self.confidence(i, f));
            }
        }
        let sub = TrackSet::new(
            kept.len(),
            nt,
            self.width,
            self.height,
            coords,
            depth,
            vis,
            conf,
            self.c_min,
        )?;
        Ok((sub, kept))
    }
}

/// Per-track binary labels (true = dynamic), optionally with the model's
/// probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackLabels {
    pub labels: Vec<bool>,
    pub probabilities: Option<Vec<f64>>,
}

impl TrackLabels {
    pub fn from_labels(labels: Vec<bool>) -> Self {
        TrackLabels {
            labels,
            probabilities: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-point (Δu, Δv, Δd) as an N×T×3 tensor. Δ at t=0 is zero, and any diff
/// touching an invalid endpoint is zero.
pub fn temporal_diffs(tracks: &TrackSet) -> Result<Tensor> {
    let (n, t) = (tracks.track_count(), tracks.frame_count());
    if t < 2 {
        return Err(Error::MalformedInput("temporal diffs need T >= 2".into()));
    }
    let mut data = vec![0.0f64; n * t * 3];
    for i in 0..n {
        for k in 1..t {
            if tracks.valid(i, k) && tracks.valid(i, k - 1) {
                let base = (i * t + k) * 3;
                data[base] = tracks.u(i, k) as f64 - tracks.u(i, k - 1) as f64;
                data[base + 1] = tracks.v(i, k) as f64 - tracks.v(i, k - 1) as f64;
                data[base + 2] = tracks.depth(i, k) as f64 - tracks.depth(i, k - 1) as f64;
            }
        }
    }
    Tensor::new(vec![n, t, 3], data)
}

/// NeRF-style frequency encoding:
/// (sin 2⁰πx, cos 2⁰πx, …, sin 2^{L−1}πx, cos 2^{L−1}πx).
pub fn positional_encode(x: f64, l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * l);
    for k in 0..l {
        let arg = (1u64 << k) as f64 * std::f64::consts::PI * x;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Per-point feature vectors in the layout
/// (γ(u), γ(v), γ(Δu), γ(Δv), d, Δd, ρ, c), zero-filled at invalid points.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFeatures {
    features: Tensor, // N×T×F
    freq_count: usize,
}

impl AugmentedFeatures {
    pub fn tensor(&self) -> &Tensor {
        &self.features
    }

    pub fn into_tensor(self) -> Tensor {
        self.features
    }

    pub fn freq_count(&self) -> usize {
        self.freq_count
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.freq_count)
    }
}

/// F = 4·(2L) + 4.
pub fn feature_dim(l: usize) -> usize {
    8 * l + 4
}

pub fn assemble_features(tracks: &TrackSet, l: usize) -> Result<AugmentedFeatures> {
    if l < 1 {
        return Err(Error::Config("frequency count L must be >= 1".into()));
    }
    let (n, t) = (tracks.track_count(), tracks.frame_count());
    let f = feature_dim(l);
    let diffs = temporal_diffs(tracks)?;
    let mut data = vec![0.0f64; n * t * f];
    for i in 0..n {
        for k in 0..t {
            if !tracks.valid(i, k) {
                continue;
            }
            let d = &diffs.data()[(i * t + k) * 3..(i * t + k) * 3 + 3];
            let row = &mut data[(i * t + k) * f..(i * t + k + 1) * f];
            let mut at = 0usize;
            for x in [
                tracks.u(i, k) as f64,
                tracks.v(i, k) as f64,
                d[0],
                d[1],
            ] {
                for enc in positional_encode(x, l) {
                    row[at] = enc;
                    at += 1;
                }
            }
            row[at] = tracks.depth(i, k) as f64;
            row[at + 1] = d[2];
            row[at + 2] = 1.0; // ρ: valid points are visible by construction
            row[at + 3] = tracks.confidence(i, k) as f64;
        }
    }
    Ok(AugmentedFeatures {
        features: Tensor::new(vec![n, t, f], data)?,
        freq_count: l,
    })
}

/// Per-point features without frequency encoding: (u, v, Δu, Δv, d, Δd, ρ, c).
/// Invalid points stay all-zero, like in [`assemble_features`].
pub fn assemble_raw_features(tracks: &TrackSet) -> Result<Tensor> {
    let (n, t) = (tracks.track_count(), tracks.frame_count());
    let diffs = temporal_diffs(tracks)?;
    let mut data = vec![0.0f64; n * t * 8];
    for i in 0..n {
        for k in 0..t {
            if !tracks.valid(i, k) {
                continue;
            }
            let d = &diffs.data()[(i * t + k) * 3..(i * t + k) * 3 + 3];
            let row = &mut data[(i * t + k) * 8..(i * t + k + 1) * 8];
            row[0] = tracks.u(i, k) as f64;
            row[1] = tracks.v(i, k) as f64;
            row[2] = d[0];
            row[3] = d[1];
            row[4] = tracks.depth(i, k) as f64;
            row[5] = d[2];
            row[6] = 1.0;
            row[7] = tracks.confidence(i, k) as f64;
        }
    }
    Tensor::new(vec![n, t, 8], data)
}

/// Label each track dynamic iff the fraction of its valid points lying inside
/// any ground-truth dynamic mask exceeds `in_mask_frac`.
pub fn assign_labels(tracks: &TrackSet, gt: &MaskVideo, in_mask_frac: f64) -> Result<TrackLabels> {
    if gt.frame_count() != tracks.frame_count() {
        return Err(Error::MalformedInput(format!(
            "ground truth has {} frames, tracks have {}",
            gt.frame_count(),
            tracks.frame_count()
        )));
    }
    if gt.width() != tracks.width() as usize || gt.height() != tracks.height() as usize {
        return Err(Error::MalformedInput(format!(
            "ground truth {}x{} vs tracks {}x{}",
            gt.width(),
            gt.height(),
            tracks.width(),
            tracks.height()
        )));
    }
    let unions: Vec<crate::mask::Mask> = (0..gt.frame_count()).map(|f| gt.frame_union(f)).collect();
    let mut labels = Vec::with_capacity(tracks.track_count());
    for i in 0..tracks.track_count() {
        let mut valid = 0usize;
        let mut inside = 0usize;
        for t in 0..tracks.frame_count() {
            if !tracks.valid(i, t) {
                continue;
            }
            valid += 1;
            let (x, y) = tracks.pixel(i, t);
            if unions[t].get(x, y) {
                inside += 1;
            }
        }
        labels.push(inside as f64 > in_mask_frac * valid as f64);
    }
    Ok(TrackLabels::from_labels(labels))
}

// ---- track file I/O ----
//
// Little-endian binary: magic "TRKS", version u32, N, T, W, H (u32 each),
// then coords f32 (N×T×2), depth f32, visibility u8, confidence f32, each
// row-major over N×T.

pub fn write_tracks_to<W: Write>(w: &mut W, tracks: &TrackSet) -> Result<()> {
    w.write_all(TRACKS_MAGIC)?;
    for v in [
        TRACKS_VERSION,
        tracks.track_count as u32,
        tracks.frame_count as u32,
        tracks.width,
        tracks.height,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &c in &tracks.coords {
        w.write_all(&c.to_le_bytes())?;
    }
    for &d in &tracks.depth {
        w.write_all(&d.to_le_bytes())?;
    }
    let vis: Vec<u8> = tracks.visibility.iter().map(|&b| b as u8).collect();
    w.write_all(&vis)?;
    for &c in &tracks.confidence {
        w.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tracks(tracks: &TrackSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_tracks_to(&mut buf, tracks)?;
    crate::util::write_atomic(path, &buf)
}

pub fn read_tracks_from<R: Read>(r: &mut R, c_min: f32) -> Result<TrackSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated track file header".into()))?;
    if &magic != TRACKS_MAGIC {
        return Err(Error::Format(format!("bad track file magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != TRACKS_VERSION {
        return Err(Error::Format(format!("unsupported track file version {version}")));
    }
    let n = read_u32(r)? as usize;
    let t = read_u32(r)? as usize;
    let width = read_u32(r)?;
    let height = read_u32(r)?;
    if n == 0 || t < 2 {
        return Err(Error::MalformedInput(format!(
            "track file declares N={n}, T={t}"
        )));
    }
    let total = n
        .checked_mul(t)
        .filter(|&x| x <= (1 << 28))
        .ok_or_else(|| Error::Format("track file too large".into()))?;
    let coords = read_f32s(r, total * 2)?;
    let depth = read_f32s(r, total)?;
    let mut vis_bytes = vec![0u8; total];
    r.read_exact(&mut vis_bytes)
        .map_err(|_| Error::Format("truncated visibility payload".into()))?;
    let mut visibility = Vec::with_capacity(total);
    for b in vis_bytes {
        match b {
            0 => visibility.push(false),
            1 => visibility.push(true),
            other => {
                return Err(Error::Format(format!("visibility byte {other} not 0/1")))
            }
        }
    }
    let confidence = read_f32s(r, total)?;
    TrackSet::new(n, t, width, height, coords, depth, visibility, confidence, c_min)
}

pub fn read_tracks(path: &Path, c_min: f32) -> Result<TrackSet> {
    let mut f = std::fs::File::open(path)?;
    read_tracks_from(&mut f, c_min)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated track file field".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated track file payload".into()))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

// ---- labels file: one "0"/"1" line per track ----

pub fn write_labels(labels: &TrackLabels, path: &Path) -> Result<()> {
    let mut buf = String::with_capacity(labels.len() * 2);
    for &l in &labels.labels {
        buf.push(if l { '1' } else { '0' });
        buf.push('\n');
    }
    crate::util::write_atomic(path, buf.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<TrackLabels> {
    let text = std::fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        match line.trim() {
            "0" => labels.push(false),
            "1" => labels.push(true),
            other => {
                return Err(Error::Format(format!(
                    "labels file line {}: expected 0/1, got {other:?}",
                    ln + 1
                )))
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::MalformedInput("labels file is empty".into()));
    }
    Ok(TrackLabels::from_labels(labels))
}
