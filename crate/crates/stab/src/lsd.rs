//! Local spatial downsampling: per-window cross-attention with a learnable
//! query per output position, halving each spatial side. Also hosts the
//! substitute strategies used by the downsampling ablations.

use crate::attention::{attend, AttentionParams};
use crate::error::{Result, StabError};
use crate::params::Bound;
use crate::patch::PatchGrid;
use crate::tensor::Tape;

/// How the spatial 2× reduction is performed. `HalfResolution` is handled
/// before patch embedding (pixel decimation) and skips this stage entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DownsampleMode {
    #[default]
    Lsd,
    /// Plain mean over each 2×2 window (no parameters involved).
    AvgPool,
    /// One latent query per frame attending over all frame tokens,
    /// collapsing each frame to a single token.
    Resampler,
}

fn window_rows(h: usize, w: usize, ti: usize, i: usize, j: usize) -> [usize; 4] {
    let base = ti * h * w;
    [
        base + (2 * i) * w + 2 * j,
        base + (2 * i) * w + 2 * j + 1,
        base + (2 * i + 1) * w + 2 * j,
        base + (2 * i + 1) * w + 2 * j + 1,
    ]
}

fn window_mask(grid: &PatchGrid, i: usize, j: usize) -> [bool; 4] {
    [
        grid.site_valid(2 * i, 2 * j),
        grid.site_valid(2 * i, 2 * j + 1),
        grid.site_valid(2 * i + 1, 2 * j),
        grid.site_valid(2 * i + 1, 2 * j + 1),
    ]
}

/// Attention downsampling over non-overlapping 2×2 windows. `query_cols` is
/// the column count of the max-size query grid that `lsd.queries` was
/// allocated for; queries are indexed by absolute output position.
pub fn lsd_forward(
    tape: &Tape,
    grid: &PatchGrid,
    bound: &Bound,
    query_cols: usize,
) -> Result<PatchGrid> {
    let (t, h, w) = (grid.t, grid.h, grid.w);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(StabError::shape(format!(
            "downsampling needs even grid sides, got ({h}, {w})"
        )));
    }
    let d = tape.shape(grid.tokens)[3];
    let queries = bound.var("lsd.queries");
    let qshape = tape.shape(queries);
    let query_rows = qshape[0] / query_cols;
    let (oh, ow) = (h / 2, w / 2);
    if oh > query_rows || ow > query_cols {
        return Err(StabError::shape(format!(
            "output grid ({oh}, {ow}) exceeds query grid ({query_rows}, {query_cols})"
        )));
    }
    let params = AttentionParams::bound(bound, "lsd.attn");
    let flat = tape.reshape(grid.tokens, &[t * h * w, d]);
    let zero_row = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, d])));

    let mut rows = Vec::with_capacity(t * oh * ow);
    for ti in 0..t {
        for i in 0..oh {
            for j in 0..ow {
                let mask = window_mask(grid, i, j);
                if !mask.iter().any(|&m| m) {
                    rows.push(zero_row);
                    continue;
                }
                let win = tape.gather_rows(flat, &window_rows(h, w, ti, i, j));
                let q = tape.gather_rows(queries, &[i * query_cols + j]);
                rows.push(attend(tape, q, win, win, params, &mask)?);
            }
        }
    }
    let stacked = tape.concat(0, &rows);
    let tokens = tape.reshape(stacked, &[t, oh, ow, d]);
    Ok(PatchGrid {
        tokens,
        t,
        h: oh,
        w: ow,
        valid_hw: (grid.valid_hw.0.div_ceil(2), grid.valid_hw.1.div_ceil(2)),
    })
}

/// Mean over the valid tokens of each 2×2 window.
pub fn avg_pool_forward(tape: &Tape, grid: &PatchGrid) -> Result<PatchGrid> {
    let (t, h, w) = (grid.t, grid.h, grid.w);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(StabError::shape(format!(
            "downsampling needs even grid sides, got ({h}, {w})"
        )));
    }
    let d = tape.shape(grid.tokens)[3];
    let flat = tape.reshape(grid.tokens, &[t * h * w, d]);
    let zero_row = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, d])));
    let (oh, ow) = (h / 2, w / 2);

    let mut rows = Vec::with_capacity(t * oh * ow);
    for ti in 0..t {
        for i in 0..oh {
            for j in 0..ow {
                let mask = window_mask(grid, i, j);
                let idx: Vec<usize> = window_rows(h, w, ti, i, j)
                    .iter()
                    .zip(mask.iter())
                    .filter(|(_, &m)| m)
                    .map(|(&r, _)| r)
                    .collect();
                if idx.is_empty() {
                    rows.push(zero_row);
                    continue;
                }
                let win = tape.gather_rows(flat, &idx);
                let avg = tape.constant(ndarray::ArrayD::from_elem(
                    ndarray::IxDyn(&[1, idx.len()]),
                    1.0 / idx.len() as f64,
                ));
                rows.push(tape.matmul(avg, win));
            }
        }
    }
    let stacked = tape.concat(0, &rows);
    let tokens = tape.reshape(stacked, &[t, oh, ow, d]);
    Ok(PatchGrid {
        tokens,
        t,
        h: oh,
        w: ow,
        valid_hw: (grid.valid_hw.0.div_ceil(2), grid.valid_hw.1.div_ceil(2)),
    })
}

/// One latent query (row 0 of the query grid) attending over every valid
/// token of a frame; each frame collapses to a single token.
pub fn resampler_forward(tape: &Tape, grid: &PatchGrid, bound: &Bound) -> Result<PatchGrid> {
    let (t, h, w) = (grid.t, grid.h, grid.w);
    let d = tape.shape(grid.tokens)[3];
    let queries = bound.var("lsd.queries");
    let params = AttentionParams::bound(bound, "lsd.attn");
    let flat = tape.reshape(grid.tokens, &[t * h * w, d]);
    let mask = grid.frame_mask();
    if !mask.iter().any(|&m| m) {
        return Err(StabError::AllMasked);
    }

    let mut rows = Vec::with_capacity(t);
    for ti in 0..t {
        let idx: Vec<usize> = (0..h * w).map(|k| ti * h * w + k).collect();
        let frame = tape.gather_rows(flat, &idx);
        let q = tape.gather_rows(queries, &[0]);
        rows.push(attend(tape, q, frame, frame, params, &mask)?);
    }
    let stacked = tape.concat(0, &rows);
    let tokens = tape.reshape(stacked, &[t, 1, 1, d]);
    Ok(PatchGrid {
        tokens,
        t,
        h: 1,
        w: 1,
        valid_hw: (1, 1),
    })
}
