use crate::error::{Error, Result};
use crate::trace::TraceIncrements;

pub const PATCH: usize = 2;
/// Values per token: a 2 x 2 keypoint cell times (x, y, z).
pub const TOKEN_DIM: usize = PATCH * PATCH * 3;

/// `L x S` tokens of [`TOKEN_DIM`] values, `S = rows/2 * cols/2`. Token
/// `(t, s)` starts at `(t * S + s) * TOKEN_DIM`; inside a token values run
/// row-major over the 2 x 2 cell, then over (x, y, z).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub horizon: usize,
    pub tokens: Vec<f64>,
}

pub fn check_even(rows: usize, cols: usize) -> Result<()> {
    if rows % PATCH != 0 || cols % PATCH != 0 || rows == 0 || cols == 0 {
        return Err(Error::OddGrid { rows, cols, patch: PATCH });
    }
    Ok(())
}

/// Flat index of value `channel` of keypoint `(row, col)` at step `t`.
pub fn token_index(rows: usize, cols: usize, row: usize, col: usize, t: usize, channel: usize) -> usize {
    let s = (row / PATCH) * (cols / PATCH) + col / PATCH;
    let within = (row % PATCH) * PATCH + col % PATCH;
    (t * (rows / PATCH) * (cols / PATCH) + s) * TOKEN_DIM + within * 3 + channel
}

impl PatchGrid {
    pub fn spatial_tokens(&self) -> usize {
        (self.rows / PATCH) * (self.cols / PATCH)
    }

    pub fn token(&self, t: usize, s: usize) -> &[f64] {
        let i = (t * self.spatial_tokens() + s) * TOKEN_DIM;
        &self.tokens[i..i + TOKEN_DIM]
    }
}

/// Reorders keypoint-major `K x L x 3` values into patch tokens.
pub fn patchify_values(values: &[f64], rows: usize, cols: usize, horizon: usize) -> Result<Vec<f64>> {
    check_even(rows, cols)?;
    if values.len() != rows * cols * horizon * 3 {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {rows}x{cols} grid over {horizon} steps",
            values.len()
        )));
    }
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            for t in 0..horizon {
                for ch in 0..3 {
                    out[token_index(rows, cols, r, c, t, ch)] = values[(k * horizon + t) * 3 + ch];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify_values`].
pub fn unpatchify_values(tokens: &[f64], rows: usize, cols: usize, horizon: usize) -> Result<Vec<f64>> {
    check_even(rows, cols)?;
    if tokens.len() != rows * cols * horizon * 3 {
        return Err(Error::ShapeMismatch(format!(
            "{} token values for a {rows}x{cols} grid over {horizon} steps",
            tokens.len()
        )));
    }
    let mut out = vec![0.0; tokens.len()];
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            for t in 0..horizon {
                for ch in 0..3 {
                    out[(k * horizon + t) * 3 + ch] = tokens[token_index(rows, cols, r, c, t, ch)];
                }
            }
        }
    }
    Ok(out)
}

pub fn patchify(deltas: &TraceIncrements, rows: usize, cols: usize) -> Result<PatchGrid> {
    if rows * cols != deltas.num_keypoints() {
        return Err(Error::ShapeMismatch(format!(
            "{rows}x{cols} grid for {} keypoints",
            deltas.num_keypoints()
        )));
    }
    let horizon = deltas.horizon();
    Ok(PatchGrid {
        rows,
        cols,
        horizon,
        tokens: patchify_values(deltas.deltas(), rows, cols, horizon)?,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Result<TraceIncrements> {
    let values = unpatchify_values(&grid.tokens, grid.rows, grid.cols, grid.horizon)?;
    TraceIncrements::new(grid.rows * grid.cols, grid.horizon, values, None)
}
