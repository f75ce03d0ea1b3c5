//! Final token sequence: per frame a context token, then each spatial row
//! followed by a learnable row-split delimiter; everything projected to LM
//! width by one shared two-layer MLP.

use crate::error::{Result, StabError};
use crate::params::Bound;
use crate::patch::PatchGrid;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Context,
    Spatial,
    RowSplit,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Context => "context",
            Role::Spatial => "spatial",
            Role::RowSplit => "row_split",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenInfo {
    pub role: Role,
    pub frame: usize,
    /// Spatial row for spatial/row-split tokens; absent for context.
    pub row: Option<usize>,
    /// Spatial column; only spatial tokens have one.
    pub col: Option<usize>,
}

/// Ordered visual tokens at LM width plus their role layout.
pub struct VisualTokenSequence {
    pub tokens: Var,
    pub layout: Vec<TokenInfo>,
    /// Content grid extent the layout was built from: (T, h', w').
    pub dims: (usize, usize, usize),
}

impl VisualTokenSequence {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    /// One line per token: `index<TAB>role<TAB>frame<TAB>row<TAB>col`, with
    /// `-` for absent coordinates. Used by the golden layout tests.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for (k, info) in self.layout.iter().enumerate() {
            let row = info.row.map_or("-".to_string(), |r| r.to_string());
            let col = info.col.map_or("-".to_string(), |c| c.to_string());
            s.push_str(&format!(
                "{k}\t{}\t{}\t{row}\t{col}\n",
                info.role.as_str(),
                info.frame
            ));
        }
        s
    }
}

/// The shared projection: `d -> d_mlp -> d_lm` with SiLU between.
pub fn project_mlp(tape: &Tape, x: Var, bound: &Bound) -> Var {
    let h = tape.silu(tape.add_bias(
        tape.matmul(x, bound.var("seq.mlp.w1")),
        bound.var("seq.mlp.b1"),
    ));
    tape.add_bias(tape.matmul(h, bound.var("seq.mlp.w2")), bound.var("seq.mlp.b2"))
}

/// Expected token count: `T·(1 + h'·(w'+1))`, or `T·(1 + h'·w')` without
/// row-split tokens.
pub fn sequence_len(t: usize, h: usize, w: usize, no_row: bool) -> usize {
    if no_row {
        t * (1 + h * w)
    } else {
        t * (1 + h * (w + 1))
    }
}

/// Assemble the sequence from the downsampled grid's valid region and the
/// per-frame context rows, then project every token with the shared MLP.
pub fn build_sequence(
    tape: &Tape,
    down: &PatchGrid,
    ctx: Var,
    bound: &Bound,
    no_row: bool,
) -> Result<VisualTokenSequence> {
    let (t, gh, gw) = (down.t, down.h, down.w);
    let (hv, wv) = down.valid_hw;
    let d = tape.shape(down.tokens)[3];
    let cs = tape.shape(ctx);
    if cs != [t, d] {
        return Err(StabError::shape(format!(
            "context rows {cs:?} do not match {t} frames of width {d}"
        )));
    }
    if hv == 0 || wv == 0 {
        return Err(StabError::shape("empty valid region".to_string()));
    }
    let flat = tape.reshape(down.tokens, &[t * gh * gw, d]);
    let row_token = bound.var("seq.row_token");

    let mut parts = Vec::new();
    let mut layout = Vec::with_capacity(sequence_len(t, hv, wv, no_row));
    for ti in 0..t {
        parts.push(tape.gather_rows(ctx, &[ti]));
        layout.push(TokenInfo {
            role: Role::Context,
            frame: ti,
            row: None,
            col: None,
        });
        for i in 0..hv {
            let idx: Vec<usize> = (0..wv).map(|j| (ti * gh + i) * gw + j).collect();
            parts.push(tape.gather_rows(flat, &idx));
            for j in 0..wv {
                layout.push(TokenInfo {
                    role: Role::Spatial,
                    frame: ti,
                    row: Some(i),
                    col: Some(j),
                });
            }
            if !no_row {
                parts.push(row_token);
                layout.push(TokenInfo {
                    role: Role::RowSplit,
                    frame: ti,
                    row: Some(i),
                    col: None,
                });
            }
        }
    }
    let stacked = tape.concat(0, &parts);
    let tokens = project_mlp(tape, stacked, bound);
    Ok(VisualTokenSequence {
        tokens,
        layout,
        dims: (t, hv, wv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamRole, ParamStore};
    use ndarray::{ArrayD, IxDyn};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn eye(n: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[n, n]), |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 })
    }

    fn store_with(d: usize, mut fill: impl FnMut(&str, &[usize]) -> ArrayD<f64>) -> ParamStore {
        let mut s = ParamStore::default();
        for (name, shape) in [
            ("seq.row_token", vec![1, d]),
            ("seq.mlp.w1", vec![d, d]),
            ("seq.mlp.b1", vec![d]),
            ("seq.mlp.w2", vec![d, d]),
            ("seq.mlp.b2", vec![d]),
        ] {
            s.push(name, fill(name, &shape), ParamRole::Vision, false);
        }
        s
    }

    fn grid_from(tape: &Tape, data: ArrayD<f64>, valid: (usize, usize)) -> PatchGrid {
        let s = data.shape().to_vec();
        PatchGrid {
            tokens: tape.constant(data),
            t: s[0],
            h: s[1],
            w: s[2],
            valid_hw: valid,
        }
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    #[test]
    fn token_counts_match_the_layout_formula() {
        // 8 frames, 4x4 grid: 8 * (1 + 4*5) = 168; without rows 8*17 = 136
        assert_eq!(sequence_len(8, 4, 4, false), 168);
        assert_eq!(sequence_len(8, 4, 4, true), 136);
        assert_eq!(sequence_len(1, 1, 1, false), 3);
    }

    #[test]
    fn one_by_one_layout() {
        let d = 2;
        let store = store_with(d, |name, s| {
            if name.ends_with("w1") || name.ends_with("w2") {
                eye(d)
            } else {
                ArrayD::zeros(IxDyn(s))
            }
        });
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let grid = grid_from(&tape, ArrayD::zeros(IxDyn(&[1, 1, 1, d])), (1, 1));
        let ctx = tape.constant(ArrayD::zeros(IxDyn(&[1, d])));
        let seq = build_sequence(&tape, &grid, ctx, &bound, false).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.layout[0].role, Role::Context);
        assert_eq!(seq.layout[1].role, Role::Spatial);
        assert_eq!(seq.layout[2].role, Role::RowSplit);
    }

    #[test]
    fn sentinel_values_land_at_oracle_positions() {
        // identity weight MLP, zero bias: output = silu(sentinel); identify
        // each role by value and compare against independent index formulas
        let d = 2;
        let store = store_with(d, |name, s| match name {
            "seq.mlp.w1" | "seq.mlp.w2" => eye(d),
            "seq.row_token" => ArrayD::from_elem(IxDyn(s), 3.0),
            _ => ArrayD::zeros(IxDyn(s)),
        });
        let (t, h, w) = (2, 2, 3);
        let grid_data = ArrayD::from_elem(IxDyn(&[t, h, w, d]), 2.0);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let grid = grid_from(&tape, grid_data, (h, w));
        let ctx = tape.constant(ArrayD::from_elem(IxDyn(&[t, d]), 1.0));
        let seq = build_sequence(&tape, &grid, ctx, &bound, false).unwrap();
        let per_frame = 1 + h * (w + 1);
        assert_eq!(seq.len(), t * per_frame);
        let vals = tape.value(seq.tokens);

        for f in 0..t {
            let base = f * per_frame;
            assert!((vals[[base, 0]] - silu(1.0)).abs() < 1e-12, "context slot");
            for i in 0..h {
                for j in 0..w {
                    let at = base + 1 + i * (w + 1) + j;
                    assert!((vals[[at, 0]] - silu(2.0)).abs() < 1e-12, "spatial ({i},{j})");
                    assert_eq!(
                        seq.layout[at],
                        TokenInfo {
                            role: Role::Spatial,
                            frame: f,
                            row: Some(i),
                            col: Some(j)
                        }
                    );
                }
                let at = base + 1 + i * (w + 1) + w;
                assert!((vals[[at, 0]] - silu(3.0)).abs() < 1e-12, "row split {i}");
                assert_eq!(
                    seq.layout[at],
                    TokenInfo {
                        role: Role::RowSplit,
                        frame: f,
                        row: Some(i),
                        col: None
                    }
                );
            }
        }
    }

    #[test]
    fn no_row_drops_only_delimiters() {
        let mut rng = StdRng::seed_from_u64(20);
        let d = 3;
        let store = store_with(d, |_, s| {
            ArrayD::from_shape_fn(IxDyn(s), |_| rng.gen_range(-1.0..1.0))
        });
        let grid_data = ArrayD::from_shape_fn(IxDyn(&[2, 2, 2, d]), |_| rng.gen_range(-1.0..1.0));
        let ctx_data = ArrayD::from_shape_fn(IxDyn(&[2, d]), |_| rng.gen_range(-1.0..1.0));

        let run = |no_row: bool| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let grid = grid_from(&tape, grid_data.clone(), (2, 2));
            let ctx = tape.constant(ctx_data.clone());
            let seq = build_sequence(&tape, &grid, ctx, &bound, no_row).unwrap();
            let vals = (*tape.value(seq.tokens)).clone();
            (seq.layout, vals)
        };
        let (full_layout, full_vals) = run(false);
        let (bare_layout, bare_vals) = run(true);
        assert_eq!(bare_layout.len(), sequence_len(2, 2, 2, true));

        // every non-delimiter token survives with identical value and order
        let kept: Vec<usize> = full_layout
            .iter()
            .enumerate()
            .filter(|(_, info)| info.role != Role::RowSplit)
            .map(|(k, _)| k)
            .collect();
        assert_eq!(kept.len(), bare_layout.len());
        for (b, &f) in kept.iter().enumerate() {
            assert_eq!(full_layout[f].role, bare_layout[b].role);
            assert_eq!(full_layout[f].frame, bare_layout[b].frame);
            for c in 0..d {
                assert_eq!(full_vals[[f, c]], bare_vals[[b, c]]);
            }
        }
    }

    #[test]
    fn mlp_is_pointwise_under_permutation() {
        let mut rng = StdRng::seed_from_u64(21);
        let d = 3;
        let store = store_with(d, |_, s| {
            ArrayD::from_shape_fn(IxDyn(s), |_| rng.gen_range(-1.0..1.0))
        });
        let x = ArrayD::from_shape_fn(IxDyn(&[5, d]), |_| rng.gen_range(-1.0..1.0));
        let perm = [3usize, 0, 4, 1, 2];

        let tape = Tape::new();
        let bound = store.bind(&tape);
        let base = tape.value(project_mlp(&tape, tape.constant(x.clone()), &bound));
        let xp = tape.gather_rows(tape.constant(x), &perm);
        let permuted = tape.value(project_mlp(&tape, xp, &bound));
        for (k, &src) in perm.iter().enumerate() {
            for c in 0..d {
                assert_eq!(permuted[[k, c]], base[[src, c]]);
            }
        }
    }

    #[test]
    fn manifest_format() {
        let d = 2;
        let store = store_with(d, |_, s| ArrayD::zeros(IxDyn(s)));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let grid = grid_from(&tape, ArrayD::zeros(IxDyn(&[1, 1, 1, d])), (1, 1));
        let ctx = tape.constant(ArrayD::zeros(IxDyn(&[1, d])));
        let seq = build_sequence(&tape, &grid, ctx, &bound, false).unwrap();
        assert_eq!(
            seq.manifest(),
            "0\tcontext\t0\t-\t-\n1\tspatial\t0\t0\t0\n2\trow_split\t0\t0\t-\n"
        );
    }
}
