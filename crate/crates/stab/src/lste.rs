//! Local spatio-temporal encoding: a channel-bottlenecked conv stack with a
//! (3,1,1) temporal kernel and residual, followed by a depthwise 3×3×3
//! positional conv with its own residual. No normalization or activations —
//! the stack is purely linear in its input.

use crate::error::{Result, StabError};
use crate::params::Bound;
use crate::patch::PatchGrid;
use crate::tensor::{Tape, Var};

/// All convolutions use zero "same" padding, so boundary frames and edge
/// sites see zero neighbors and the grid shape is preserved.
pub fn lste_forward(tape: &Tape, grid: &PatchGrid, bound: &Bound) -> Result<PatchGrid> {
    let (t, h, w) = (grid.t, grid.h, grid.w);
    let d = tape.shape(grid.tokens)[3];
    let w1 = bound.var("lste.conv1.weight");
    let dr = tape.shape(w1)[1];
    if tape.shape(w1)[0] != d {
        return Err(StabError::shape(format!(
            "lste: grid channels {d} vs conv1 rows {}",
            tape.shape(w1)[0]
        )));
    }
    let n = t * h * w;

    let x = grid.tokens;
    let flat = tape.reshape(x, &[n, d]);
    let y1 = tape.add_bias(tape.matmul(flat, w1), bound.var("lste.conv1.bias"));
    let y1g = tape.reshape(y1, &[t, h, w, dr]);

    // temporal (3,1,1) conv: out[t] = sum_k W_k · in[t + k - 1]
    let w2 = bound.var("lste.conv2.weight");
    let w2flat = tape.reshape(w2, &[3 * dr, dr]);
    let mut acc: Option<Var> = None;
    for k in 0..3isize {
        let tap_rows: Vec<usize> = (k as usize * dr..(k as usize + 1) * dr).collect();
        let tap = tape.gather_rows(w2flat, &tap_rows);
        let shifted = tape.reshape(tape.shift3(y1g, k - 1, 0, 0), &[n, dr]);
        let term = tape.matmul(shifted, tap);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    let y2 = tape.add_bias(acc.unwrap(), bound.var("lste.conv2.bias"));

    let y3 = tape.add_bias(
        tape.matmul(y2, bound.var("lste.conv3.weight")),
        bound.var("lste.conv3.bias"),
    );
    let lst1 = tape.add(tape.reshape(y3, &[t, h, w, d]), x);

    // depthwise 3x3x3 positional conv + residual
    let dpe_w = bound.var("lste.dpe.weight");
    let mut dpe_acc: Option<Var> = None;
    for a in 0..3isize {
        for b in 0..3isize {
            for c in 0..3isize {
                let idx = ((a * 3 + b) * 3 + c) as usize;
                let tap = tape.reshape(tape.gather_rows(dpe_w, &[idx]), &[d]);
                let shifted = tape.shift3(lst1, a - 1, b - 1, c - 1);
                let term = tape.mul_lastdim(shifted, tap);
                dpe_acc = Some(match dpe_acc {
                    None => term,
                    Some(s) => tape.add(s, term),
                });
            }
        }
    }
    let dpe_out = tape.add_bias(dpe_acc.unwrap(), bound.var("lste.dpe.bias"));
    let out = tape.add(lst1, dpe_out);

    Ok(PatchGrid {
        tokens: out,
        ..*grid
    })
}
