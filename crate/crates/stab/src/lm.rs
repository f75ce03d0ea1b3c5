//! Tiny decoder-only language model and the deterministic teacher stub.
//!
//! The LM is a standard pre-LN transformer with causal multi-head attention
//! and no positional embeddings: temporal information must arrive through
//! the visual tokens, which is exactly what the temporal-module ablations
//! probe. Visual tokens are prepended to embedded text tokens; the logit for
//! text token j is produced from the hidden state one position earlier.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::ModelConfig;
use crate::error::{Result, StabError};
use crate::params::Bound;
use crate::sequencer::{Role, TokenInfo};
use crate::tensor::{Tape, Var};
use crate::video::VideoClip;

pub struct LmOutput {
    /// Final hidden states at the M visual positions.
    pub v_pred: Var,
    /// Next-token logits for each text position; absent when no text given.
    pub logits: Option<Var>,
}

/// Run the decoder over `[visual tokens; embedded text]`.
pub fn lm_forward(
    tape: &Tape,
    bound: &Bound,
    visual: Var,
    text_ids: &[usize],
    cfg: &ModelConfig,
) -> Result<LmOutput> {
    let vs = tape.shape(visual);
    if vs.len() != 2 || vs[1] != cfg.d_lm {
        return Err(StabError::shape(format!(
            "visual tokens {vs:?} vs LM width {}",
            cfg.d_lm
        )));
    }
    let m = vs[0];
    let n = text_ids.len();
    if m + n > cfg.context {
        return Err(StabError::shape(format!(
            "sequence of {} exceeds context {}",
            m + n,
            cfg.context
        )));
    }
    if let Some(&bad) = text_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(StabError::data(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }

    let mut x = if n > 0 {
        let emb = tape.gather_rows(bound.var("lm.embed"), text_ids);
        tape.concat(0, &[visual, emb])
    } else {
        visual
    };

    let heads = cfg.lm_heads;
    let dh = cfg.d_lm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for li in 0..cfg.lm_layers {
        let pre = format!("lm.l{li}");
        let a = tape.layer_norm(
            x,
            bound.var(&format!("{pre}.ln1.gamma")),
            bound.var(&format!("{pre}.ln1.beta")),
            1e-5,
        );
        let q = tape.matmul(a, bound.var(&format!("{pre}.attn.wq")));
        let k = tape.matmul(a, bound.var(&format!("{pre}.attn.wk")));
        let v = tape.matmul(a, bound.var(&format!("{pre}.attn.wv")));
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.scale(tape.matmul(qh, tape.transpose2(kh)), scale);
            let weights = tape.causal_softmax(scores);
            head_outs.push(tape.matmul(weights, vh));
        }
        let cat = tape.concat(1, &head_outs);
        let attn_out = tape.matmul(cat, bound.var(&format!("{pre}.attn.wo")));
        x = tape.add(x, attn_out);

        let f = tape.layer_norm(
            x,
            bound.var(&format!("{pre}.ln2.gamma")),
            bound.var(&format!("{pre}.ln2.beta")),
            1e-5,
        );
        let h1 = tape.silu(tape.add_bias(
            tape.matmul(f, bound.var(&format!("{pre}.ffn.w1"))),
            bound.var(&format!("{pre}.ffn.b1")),
        ));
        let ffn = tape.add_bias(
            tape.matmul(h1, bound.var(&format!("{pre}.ffn.w2"))),
            bound.var(&format!("{pre}.ffn.b2")),
        );
        x = tape.add(x, ffn);
    }
    let hf = tape.layer_norm(x, bound.var("lm.lnf.gamma"), bound.var("lm.lnf.beta"), 1e-5);

    let visual_rows: Vec<usize> = (0..m).collect();
    let v_pred = tape.gather_rows(hf, &visual_rows);
    let logits = if n > 0 {
        // logit j comes from position m + j - 1 (the token just before
        // text token j)
        let rows: Vec<usize> = (0..n).map(|j| m + j - 1).collect();
        let picked = tape.gather_rows(hf, &rows);
        Some(tape.add_bias(
            tape.matmul(picked, bound.var("lm.head.weight")),
            bound.var("lm.head.bias"),
        ))
    } else {
        None
    };
    Ok(LmOutput { v_pred, logits })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TeacherMode {
    /// Mean source pixels through a frozen random linear map; targets carry
    /// real spatial structure, so distillation is learnable.
    #[default]
    LinearProbe,
    /// Input-independent frozen random tokens.
    FrozenRandom,
}

/// Deterministic stand-in teacher emitting one target per visual position.
///
/// Spatial tokens read the mean pixel (per channel) of the source rectangle
/// their grid site covers; context tokens read the frame mean; row-split
/// tokens read the whole-clip mean. All means are over the valid (unpadded)
/// region only, keeping the targets padding-invariant.
pub fn teacher_tokens(
    clip: &VideoClip,
    layout: &[TokenInfo],
    dims: (usize, usize, usize),
    mode: TeacherMode,
    map: &ArrayD<f64>,
    seed: u64,
) -> Result<Array2<f64>> {
    let d_lm = map.shape()[1];
    if map.shape() != [3, d_lm] {
        return Err(StabError::shape(format!(
            "teacher map must be [3, d_lm], got {:?}",
            map.shape()
        )));
    }
    let m = layout.len();
    if mode == TeacherMode::FrozenRandom {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7EAC_4E12_0000_0002);
        return Ok(Array2::from_shape_fn((m, d_lm), |_| rng.gen_range(-1.0..1.0)));
    }

    let (_t, hp, wp) = dims;
    let (vh, vw) = clip.valid_hw;
    let mean_rect = |f: usize, y0: usize, y1: usize, x0: usize, x1: usize| -> [f64; 3] {
        let mut acc = [0.0; 3];
        let count = ((y1 - y0) * (x1 - x0)) as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    acc[c] += clip.data[[f, y, x, c]];
                }
            }
        }
        for a in &mut acc {
            *a /= count;
        }
        acc
    };
    let video_mean = {
        let mut acc = [0.0; 3];
        for f in 0..clip.t() {
            let fm = mean_rect(f, 0, vh, 0, vw);
            for c in 0..3 {
                acc[c] += fm[c] / clip.t() as f64;
            }
        }
        acc
    };

    let mut out = Array2::<f64>::zeros((m, d_lm));
    for (k, info) in layout.iter().enumerate() {
        let src = match info.role {
            Role::Context => mean_rect(info.frame, 0, vh, 0, vw),
            Role::RowSplit => video_mean,
            Role::Spatial => {
                let (i, j) = (info.row.unwrap(), info.col.unwrap());
                // proportional split of the valid extent across grid sites
                let y0 = i * vh / hp;
                let y1 = ((i + 1) * vh / hp).max(y0 + 1).min(vh);
                let x0 = j * vw / wp;
                let x1 = ((j + 1) * vw / wp).max(x0 + 1).min(vw);
                mean_rect(info.frame, y0, y1, x0, x1)
            }
        };
        for o in 0..d_lm {
            out[[k, o]] = (0..3).map(|c| src[c] * map[[c, o]]).sum();
        }
    }
    Ok(out)
}
