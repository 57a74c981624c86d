//! 68-point facial keypoint frames and sequences.
//!
//! Points follow the standard 68-point annotation order: chin 0-16, right
//! brow 17-21, left brow 22-26, nose 27-35, right eye 36-41, left eye 42-47,
//! outer lips 48-59, inner lips 60-67.

mod io;
mod raster;

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{decode_keypoints, encode_keypoints, read_keypoints, write_keypoints, KEYPOINT_MAGIC};
pub use raster::{rasterize_frame, render_frames, render_sequence, Canvas, FacePart, Palette};

pub const NUM_POINTS: usize = 68;
pub const FLAT_DIM: usize = 2 * NUM_POINTS;
/// First nose keypoint (top of the nose bridge); the anchor for base-point
/// normalization.
pub const BASE_POINT: usize = 27;
pub const DEFAULT_FPS: f64 = 25.0;
pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_STATS_LIMIT: usize = 10_000;

/// Coordinate space a sequence lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    RawPixel,
    BaseNormalized,
    Standardized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFrame {
    points: [[f64; 2]; NUM_POINTS],
}

impl KeypointFrame {
    pub fn new(points: &[[f64; 2]]) -> Result<Self> {
        if points.len() != NUM_POINTS {
            return Err(Error::Shape {
                axis: "keypoints",
                expected: NUM_POINTS,
                actual: points.len(),
            });
        }
        let mut out = [[0.0; 2]; NUM_POINTS];
        out.copy_from_slice(points);
        Self::checked(out)
    }

    /// Rebuilds a frame from its `(x0, y0, x1, y1, ...)` layout.
    pub fn unflatten(flat: &[f64]) -> Result<Self> {
        if flat.len() != FLAT_DIM {
            return Err(Error::Shape {
                axis: "flattened keypoints",
                expected: FLAT_DIM,
                actual: flat.len(),
            });
        }
        let mut out = [[0.0; 2]; NUM_POINTS];
        for (p, xy) in out.iter_mut().zip(flat.chunks_exact(2)) {
            *p = [xy[0], xy[1]];
        }
        Self::checked(out)
    }

    fn checked(points: [[f64; 2]; NUM_POINTS]) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("keypoint frame".into()));
        }
        Ok(Self { points })
    }

    pub fn zeros() -> Self {
        Self {
            points: [[0.0; 2]; NUM_POINTS],
        }
    }

    pub fn points(&self) -> &[[f64; 2]; NUM_POINTS] {
        &self.points
    }

    pub fn point(&self, index: usize) -> [f64; 2] {
        self.points[index]
    }

    pub fn flatten(&self) -> [f64; FLAT_DIM] {
        let mut out = [0.0; FLAT_DIM];
        for (xy, p) in out.chunks_exact_mut(2).zip(&self.points) {
            xy.copy_from_slice(p);
        }
        out
    }

    pub fn translated(&self, offset: [f64; 2]) -> Self {
        let mut points = self.points;
        for p in &mut points {
            p[0] += offset[0];
            p[1] += offset[1];
        }
        Self { points }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence {
    frames: Vec<KeypointFrame>,
    fps: f64,
    space: Space,
}

impl KeypointSequence {
    pub fn new(frames: Vec<KeypointFrame>, fps: f64, space: Space) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Empty("keypoint sequence has no frames"));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, fps, space })
    }

    /// Builds a sequence from a row-major `[T x 136]` buffer.
    pub fn from_flat(data: &[f64], fps: f64, space: Space) -> Result<Self> {
        if data.is_empty() || !data.len().is_multiple_of(FLAT_DIM) {
            return Err(Error::Invalid(format!(
                "flat keypoint buffer of length {} is not a positive multiple of {FLAT_DIM}",
                data.len()
            )));
        }
        let frames = data
            .chunks_exact(FLAT_DIM)
            .map(KeypointFrame::unflatten)
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, fps, space)
    }

    pub fn frames(&self) -> &[KeypointFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn space(&self) -> Space {
        self.space
    }

    /// Row-major `[T x 136]` copy of the coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.flatten()).collect()
    }

    /// Contiguous sub-sequence `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames.len() {
            return Err(Error::Invalid(format!(
                "window [{start}, {}) outside sequence of {} frames",
                start + len,
                self.frames.len()
            )));
        }
        Self::new(self.frames[start..start + len].to_vec(), self.fps, self.space)
    }

    pub fn translated(&self, offset: [f64; 2]) -> Self {
        Self {
            frames: self.frames.iter().map(|f| f.translated(offset)).collect(),
            fps: self.fps,
            space: self.space,
        }
    }

    fn expect_space(&self, expected: Space) -> Result<()> {
        if self.space == expected {
            Ok(())
        } else {
            Err(Error::Space {
                expected,
                actual: self.space,
            })
        }
    }
}

/// Subtracts each frame's base point from all of its points.
///
/// Base-normalized input passes through unchanged since its base point is
/// already the origin. Standardized input is rejected.
pub fn normalize_base_point(seq: &KeypointSequence) -> Result<KeypointSequence> {
    if seq.space == Space::Standardized {
        return Err(Error::Space {
            expected: Space::RawPixel,
            actual: seq.space,
        });
    }
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let [bx, by] = f.points[BASE_POINT];
            let mut points = f.points;
            for p in &mut points {
                p[0] -= bx;
                p[1] -= by;
            }
            KeypointFrame { points }
        })
        .collect();
    Ok(KeypointSequence {
        frames,
        fps: seq.fps,
        space: Space::BaseNormalized,
    })
}

/// Per-dimension mean and population standard deviation of flattened frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    #[serde(rename = "count")]
    pub n_sequences_used: usize,
}

impl NormStats {
    /// Mean 0 and std 1: standardization becomes the identity.
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; FLAT_DIM],
            std: vec![1.0; FLAT_DIM],
            n_sequences_used: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != FLAT_DIM || self.std.len() != FLAT_DIM {
            return Err(Error::Shape {
                axis: "norm stats",
                expected: FLAT_DIM,
                actual: self.mean.len().min(self.std.len()),
            });
        }
        if self.mean.iter().chain(&self.std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("norm stats".into()));
        }
        if self.std.iter().any(|&s| s < STD_FLOOR) {
            return Err(Error::Invalid(format!("norm stats std below floor {STD_FLOOR}")));
        }
        Ok(())
    }

    pub fn standardize_flat(&self, flat: &mut [f64]) {
        for (i, v) in flat.iter_mut().enumerate() {
            let d = i % FLAT_DIM;
            *v = (*v - self.mean[d]) / self.std[d];
        }
    }

    pub fn destandardize_flat(&self, flat: &mut [f64]) {
        for (i, v) in flat.iter_mut().enumerate() {
            let d = i % FLAT_DIM;
            *v = *v * self.std[d] + self.mean[d];
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        stats.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(stats)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Streaming mean/variance over every frame of the first `limit` sequences.
pub fn compute_norm_stats<I>(sequences: I, limit: usize) -> Result<NormStats>
where
    I: IntoIterator,
    I::Item: Borrow<KeypointSequence>,
{
    let mut count = 0usize;
    let mut n_frames = 0u64;
    let mut mean = vec![0.0; FLAT_DIM];
    let mut m2 = vec![0.0; FLAT_DIM];
    for seq in sequences.into_iter().take(limit) {
        let seq = seq.borrow();
        seq.expect_space(Space::BaseNormalized)?;
        for frame in &seq.frames {
            n_frames += 1;
            let n = n_frames as f64;
            for (d, v) in frame.flatten().into_iter().enumerate() {
                let delta = v - mean[d];
                mean[d] += delta / n;
                m2[d] += delta * (v - mean[d]);
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("no sequences"));
    }
    let std = m2
        .iter()
        .map(|&s| (s / n_frames as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats {
        mean,
        std,
        n_sequences_used: count,
    })
}

pub fn standardize(seq: &KeypointSequence, stats: &NormStats) -> Result<KeypointSequence> {
    seq.expect_space(Space::BaseNormalized)?;
    let mut flat = seq.to_flat();
    stats.standardize_flat(&mut flat);
    KeypointSequence::from_flat(&flat, seq.fps, Space::Standardized)
}

pub fn destandardize(seq: &KeypointSequence, stats: &NormStats) -> Result<KeypointSequence> {
    seq.expect_space(Space::Standardized)?;
    let mut flat = seq.to_flat();
    stats.destandardize_flat(&mut flat);
    KeypointSequence::from_flat(&flat, seq.fps, Space::BaseNormalized)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub h: f64,
    pub w: f64,
}

impl BoundingBox {
    pub fn max_extent(&self) -> f64 {
        self.h.max(self.w)
    }
}

/// Extent of all points over the whole sequence (one box per sequence).
pub fn bounding_box(seq: &KeypointSequence) -> BoundingBox {
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for [x, y] in seq.frames.iter().flat_map(|f| f.points.iter().copied()) {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    BoundingBox {
        h: max_y - min_y,
        w: max_x - min_x,
    }
}
