//! Screen-aligned keypoint traces and their temporal increments.
//!
//! A [`ScreenTrace`] holds `K` keypoints over `L + 1` frames, each frame a
//! `(x px, y px, z m)` triple. [`TraceIncrements`] holds the `K x L x 3`
//! per-step differences that the generative model works with.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default keypoint grid side (20 x 20 = 400 keypoints).
pub const DEFAULT_GRID_SIDE: usize = 20;
/// Default number of increments per trace.
pub const DEFAULT_HORIZON: usize = 32;

/// Uniform keypoint grid laid over an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, image_width: usize, image_height: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidGrid(format!("{rows}x{cols} grid is empty")));
        }
        if image_width == 0 || image_height == 0 {
            return Err(Error::InvalidGrid("image has zero size".into()));
        }
        Ok(Self {
            rows,
            cols,
            image_width,
            image_height,
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.rows * self.cols
    }

    /// Pixel position of grid cell `(row, col)`: the cell center, with pixel
    /// centers at integer coordinates.
    pub fn position(&self, row: usize, col: usize) -> [f64; 2] {
        let x = (col as f64 + 0.5) * self.image_width as f64 / self.cols as f64 - 0.5;
        let y = (row as f64 + 0.5) * self.image_height as f64 / self.rows as f64 - 0.5;
        [x, y]
    }

    /// Positions of all keypoints in row-major order.
    pub fn positions(&self) -> Vec<[f64; 2]> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.position(r, c))
            .collect()
    }
}

/// Per-channel statistics used to standardize increments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl NormStats {
    /// Channels whose spread is below this are left unscaled.
    pub const MIN_STD: f64 = 1e-8;

    /// Statistics over every valid entry of a corpus of increments.
    /// Masked `z` entries do not contribute to the `z` channel.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a TraceIncrements>) -> Self {
        let mut n = [0usize; 3];
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let items: Vec<&TraceIncrements> = corpus.into_iter().collect();
        for inc in &items {
            for (i, d) in inc.deltas.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    if c == 2 && !inc.z_valid_at(i) {
                        continue;
                    }
                    n[c] += 1;
                    sum[c] += d[c];
                }
            }
        }
        let mean: [f64; 3] = std::array::from_fn(|c| if n[c] > 0 { sum[c] / n[c] as f64 } else { 0.0 });
        for inc in &items {
            for (i, d) in inc.deltas.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    if c == 2 && !inc.z_valid_at(i) {
                        continue;
                    }
                    sq[c] += (d[c] - mean[c]).powi(2);
                }
            }
        }
        let std = std::array::from_fn(|c| {
            let s = if n[c] > 0 { (sq[c] / n[c] as f64).sqrt() } else { 0.0 };
            if s < Self::MIN_STD {
                1.0
            } else {
                s
            }
        });
        Self { mean, std }
    }

    pub fn standardize(&self, value: f64, channel: usize) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn destandardize(&self, value: f64, channel: usize) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }
}

/// `K x (L + 1) x 3` screen-aligned trace in the reference camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenTrace {
    grid: GridSpec,
    frames: usize,
    points: Vec<f64>,
    /// Per `(keypoint, frame)` depth validity; `None` means all valid.
    z_valid: Option<Vec<bool>>,
}

impl ScreenTrace {
    /// `points` is laid out keypoint-major: `((k * frames) + t) * 3 + channel`.
    pub fn new(grid: GridSpec, frames: usize, points: Vec<f64>, z_valid: Option<Vec<bool>>) -> Result<Self> {
        let k = grid.num_keypoints();
        if frames == 0 {
            return Err(Error::EmptyTrace);
        }
        if points.len() != k * frames * 3 {
            return Err(Error::ShapeMismatch(format!(
                "trace buffer has {} values, expected {k} x {frames} x 3",
                points.len()
            )));
        }
        if let Some(mask) = &z_valid {
            if mask.len() != k * frames {
                return Err(Error::ShapeMismatch(format!(
                    "validity mask has {} entries, expected {}",
                    mask.len(),
                    k * frames
                )));
            }
        }
        let z_valid = z_valid.filter(|m| m.iter().any(|v| !v));
        Ok(Self {
            grid,
            frames,
            points,
            z_valid,
        })
    }

    /// Trace that stays at `initial` for every frame.
    pub fn constant(grid: GridSpec, frames: usize, initial: &[[f64; 3]]) -> Result<Self> {
        if initial.len() != grid.num_keypoints() {
            return Err(Error::ShapeMismatch(format!(
                "{} initial points for a {}-keypoint grid",
                initial.len(),
                grid.num_keypoints()
            )));
        }
        let points = initial
            .iter()
            .flat_map(|p| std::iter::repeat_n(*p, frames))
            .flatten()
            .collect();
        Self::new(grid, frames, points, None)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn num_keypoints(&self) -> usize {
        self.grid.num_keypoints()
    }

    /// Number of stored frames (`L + 1`).
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Number of increments `L`.
    pub fn horizon(&self) -> usize {
        self.frames - 1
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn z_valid(&self) -> Option<&[bool]> {
        self.z_valid.as_deref()
    }

    pub fn point(&self, k: usize, t: usize) -> [f64; 3] {
        let i = (k * self.frames + t) * 3;
        [self.points[i], self.points[i + 1], self.points[i + 2]]
    }

    pub fn set_point(&mut self, k: usize, t: usize, p: [f64; 3]) {
        let i = (k * self.frames + t) * 3;
        self.points[i..i + 3].copy_from_slice(&p);
    }

    pub fn is_valid(&self, k: usize, t: usize) -> bool {
        self.z_valid.as_ref().is_none_or(|m| m[k * self.frames + t])
    }

    /// Positions of keypoint `k` over time.
    pub fn path(&self, k: usize) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..self.frames).map(move |t| self.point(k, t))
    }

    pub fn first_frame(&self) -> Vec<[f64; 3]> {
        (0..self.num_keypoints()).map(|k| self.point(k, 0)).collect()
    }

    pub fn last_frame(&self) -> Vec<[f64; 3]> {
        (0..self.num_keypoints()).map(|k| self.point(k, self.frames - 1)).collect()
    }

    pub(crate) fn into_parts(self) -> (GridSpec, usize, Vec<f64>, Option<Vec<bool>>) {
        (self.grid, self.frames, self.points, self.z_valid)
    }
}

/// `K x L x 3` per-step differences of a [`ScreenTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceIncrements {
    num_keypoints: usize,
    horizon: usize,
    deltas: Vec<f64>,
    z_valid: Option<Vec<bool>>,
    normalization: Option<NormStats>,
}

impl TraceIncrements {
    /// `deltas` is laid out keypoint-major: `((k * horizon) + t) * 3 + channel`.
    pub fn new(num_keypoints: usize, horizon: usize, deltas: Vec<f64>, z_valid: Option<Vec<bool>>) -> Result<Self> {
        if deltas.len() != num_keypoints * horizon * 3 {
            return Err(Error::ShapeMismatch(format!(
                "increment buffer has {} values, expected {num_keypoints} x {horizon} x 3",
                deltas.len()
            )));
        }
        if let Some(mask) = &z_valid {
            if mask.len() != num_keypoints * horizon {
                return Err(Error::ShapeMismatch("increment mask has the wrong length".into()));
            }
        }
        Ok(Self {
            num_keypoints,
            horizon,
            deltas,
            z_valid: z_valid.filter(|m| m.iter().any(|v| !v)),
            normalization: None,
        })
    }

    pub fn zeros(num_keypoints: usize, horizon: usize) -> Self {
        Self {
            num_keypoints,
            horizon,
            deltas: vec![0.0; num_keypoints * horizon * 3],
            z_valid: None,
            normalization: None,
        }
    }

    pub fn with_normalization(mut self, stats: NormStats) -> Self {
        self.normalization = Some(stats);
        self
    }

    pub fn normalization(&self) -> Option<&NormStats> {
        self.normalization.as_ref()
    }

    pub fn num_keypoints(&self) -> usize {
        self.num_keypoints
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn delta(&self, k: usize, t: usize) -> [f64; 3] {
        let i = (k * self.horizon + t) * 3;
        [self.deltas[i], self.deltas[i + 1], self.deltas[i + 2]]
    }

    pub fn z_valid(&self) -> Option<&[bool]> {
        self.z_valid.as_deref()
    }

    /// Validity of the `z` channel of flat entry `i = k * horizon + t`.
    pub fn z_valid_at(&self, i: usize) -> bool {
        self.z_valid.as_ref().is_none_or(|m| m[i])
    }

    /// Deltas mapped through `stats` into standardized units.
    pub fn standardized(&self, stats: &NormStats) -> Vec<f64> {
        self.deltas
            .iter()
            .enumerate()
            .map(|(i, v)| stats.standardize(*v, i % 3))
            .collect()
    }

    /// Inverse of [`Self::standardized`].
    pub fn from_standardized(
        num_keypoints: usize,
        horizon: usize,
        values: &[f64],
        stats: &NormStats,
    ) -> Result<Self> {
        let deltas = values
            .iter()
            .enumerate()
            .map(|(i, v)| stats.destandardize(*v, i % 3))
            .collect();
        Ok(Self::new(num_keypoints, horizon, deltas, None)?.with_normalization(*stats))
    }
}

/// Differences between consecutive frames: `delta[k][t] = p[k][t+1] - p[k][t]`.
/// An increment's depth is valid only when both endpoints are.
pub fn increments_from_trace(trace: &ScreenTrace) -> Result<TraceIncrements> {
    let frames = trace.frames();
    if frames < 2 {
        return Err(Error::HorizonMismatch { frames });
    }
    let k_count = trace.num_keypoints();
    let horizon = frames - 1;
    let mut deltas = Vec::with_capacity(k_count * horizon * 3);
    for k in 0..k_count {
        for t in 0..horizon {
            let a = trace.point(k, t);
            let b = trace.point(k, t + 1);
            deltas.extend((0..3).map(|c| b[c] - a[c]));
        }
    }
    let z_valid = trace.z_valid().map(|_| {
        (0..k_count)
            .flat_map(|k| (0..horizon).map(move |t| (k, t)))
            .map(|(k, t)| trace.is_valid(k, t) && trace.is_valid(k, t + 1))
            .collect()
    });
    TraceIncrements::new(k_count, horizon, deltas, z_valid)
}

/// Cumulative sum of `increments` starting from `initial_frame`.
pub fn trace_from_increments(
    increments: &TraceIncrements,
    initial_frame: &[[f64; 3]],
    grid: GridSpec,
) -> Result<ScreenTrace> {
    let k_count = increments.num_keypoints();
    if initial_frame.len() != k_count || grid.num_keypoints() != k_count {
        return Err(Error::ShapeMismatch(format!(
            "{} increment keypoints, {} initial points, {} grid keypoints",
            k_count,
            initial_frame.len(),
            grid.num_keypoints()
        )));
    }
    let horizon = increments.horizon();
    let frames = horizon + 1;
    let mut points = Vec::with_capacity(k_count * frames * 3);
    for (k, start) in initial_frame.iter().enumerate() {
        let mut cur = *start;
        points.extend_from_slice(&cur);
        for t in 0..horizon {
            let d = increments.delta(k, t);
            for c in 0..3 {
                cur[c] += d[c];
            }
            points.extend_from_slice(&cur);
        }
    }
    let z_valid = increments.z_valid().map(|mask| {
        let mut out = Vec::with_capacity(k_count * frames);
        for k in 0..k_count {
            // Depth stays valid until the first masked increment.
            let mut ok = true;
            out.push(ok);
            for t in 0..horizon {
                ok = ok && mask[k * horizon + t];
                out.push(ok);
            }
        }
        out
    });
    ScreenTrace::new(grid, frames, points, z_valid)
}
