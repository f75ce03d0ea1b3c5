//! Frame-wise and global context aggregation plus their learned fusion.
//!
//! Each frame gets a summary token (its own learnable query attending over
//! that frame's tokens), the whole clip gets one global context token, and
//! the two are mixed elementwise by a learned gate followed by a shared
//! projection.

use ndarray::{ArrayD, IxDyn};

use crate::attention::{attend, AttentionParams};
use crate::error::{Result, StabError};
use crate::params::Bound;
use crate::patch::PatchGrid;
use crate::tensor::{Tape, Var};

/// Per-frame summaries `[T, d]`: row t attends over frame t's valid tokens
/// with the frame-t query.
pub fn fsra_forward(tape: &Tape, grid: &PatchGrid, bound: &Bound) -> Result<Var> {
    let (t, h, w) = (grid.t, grid.h, grid.w);
    let d = tape.shape(grid.tokens)[3];
    let queries = bound.var("fsra.queries");
    if tape.shape(queries)[0] < t {
        return Err(StabError::shape(format!(
            "{t} frames exceed the {} frame queries",
            tape.shape(queries)[0]
        )));
    }
    let params = AttentionParams::bound(bound, "fsra.attn");
    let mask = grid.frame_mask();
    if !mask.iter().any(|&m| m) {
        return Err(StabError::AllMasked);
    }
    let flat = tape.reshape(grid.tokens, &[t * h * w, d]);
    let mut rows = Vec::with_capacity(t);
    for ti in 0..t {
        let idx: Vec<usize> = (0..h * w).map(|k| ti * h * w + k).collect();
        let frame = tape.gather_rows(flat, &idx);
        let q = tape.gather_rows(queries, &[ti]);
        rows.push(attend(tape, q, frame, frame, params, &mask)?);
    }
    Ok(tape.concat(0, &rows))
}

/// Global context `[1, d]`: the single learnable query attending over every
/// valid token of every frame.
pub fn gstra_forward(tape: &Tape, grid: &PatchGrid, bound: &Bound) -> Result<Var> {
    let (t, h, w) = (grid.t, grid.h, grid.w);
    let d = tape.shape(grid.tokens)[3];
    let flat = tape.reshape(grid.tokens, &[t * h * w, d]);
    let mask = grid.flat_mask();
    if !mask.iter().any(|&m| m) {
        return Err(StabError::AllMasked);
    }
    let params = AttentionParams::bound(bound, "gstra.attn");
    attend(tape, bound.var("gstra.query"), flat, flat, params, &mask)
}

/// `F_r[t] = proj(alpha ⊙ F_s[t] + (1 − alpha) ⊙ G)` with a shared
/// projection across frames. `global` is broadcast to every row.
pub fn fuse(tape: &Tape, frame_summaries: Var, global: Var, bound: &Bound) -> Result<Var> {
    let fs = tape.shape(frame_summaries);
    let gs = tape.shape(global);
    if fs.len() != 2 || gs != [1, fs[1]] {
        return Err(StabError::shape(format!(
            "fuse: frame summaries {fs:?} vs global {gs:?}"
        )));
    }
    let (t, d) = (fs[0], fs[1]);
    let alpha = bound.var("fusion.alpha");
    let ones = tape.constant(ArrayD::from_elem(IxDyn(&[d]), 1.0));
    let inv_alpha = tape.sub(ones, alpha);
    let g_rows = tape.gather_rows(global, &vec![0; t]);
    let mixed = tape.add(
        tape.mul_lastdim(frame_summaries, alpha),
        tape.mul_lastdim(g_rows, inv_alpha),
    );
    Ok(tape.add_bias(
        tape.matmul(mixed, bound.var("fusion.proj.weight")),
        bound.var("fusion.proj.bias"),
    ))
}

/// Frame summaries when both aggregators are ablated away: the plain mean
/// over each frame's valid tokens.
pub fn frame_mean(tape: &Tape, grid: &PatchGrid) -> Result<Var> {
    let (t, h, w) = (grid.t, grid.h, grid.w);
    let d = tape.shape(grid.tokens)[3];
    let mask = grid.frame_mask();
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(k, _)| k)
        .collect();
    if idx.is_empty() {
        return Err(StabError::AllMasked);
    }
    let flat = tape.reshape(grid.tokens, &[t * h * w, d]);
    let avg = tape.constant(ArrayD::from_elem(
        IxDyn(&[1, idx.len()]),
        1.0 / idx.len() as f64,
    ));
    let mut rows = Vec::with_capacity(t);
    for ti in 0..t {
        let frame_idx: Vec<usize> = idx.iter().map(|&k| ti * h * w + k).collect();
        rows.push(tape.matmul(avg, tape.gather_rows(flat, &frame_idx)));
    }
    Ok(tape.concat(0, &rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::tests::oracle as attend_oracle;
    use crate::params::{ParamRole, ParamStore};
    use ndarray::Array2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn eye(n: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[n, n]), |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 })
    }

    fn store_with(t_max: usize, d: usize, mut fill: impl FnMut(&str, &[usize]) -> ArrayD<f64>) -> ParamStore {
        let mut s = ParamStore::default();
        let mut add = |name: &str, shape: Vec<usize>, fill: &mut dyn FnMut(&str, &[usize]) -> ArrayD<f64>| {
            let v = fill(name, &shape);
            s.push(name, v, ParamRole::Vision, false);
        };
        for (name, shape) in [
            ("fsra.queries", vec![t_max, d]),
            ("fsra.attn.wq", vec![d, d]),
            ("fsra.attn.wk", vec![d, d]),
            ("fsra.attn.wv", vec![d, d]),
            ("gstra.query", vec![1, d]),
            ("gstra.attn.wq", vec![d, d]),
            ("gstra.attn.wk", vec![d, d]),
            ("gstra.attn.wv", vec![d, d]),
            ("fusion.alpha", vec![d]),
            ("fusion.proj.weight", vec![d, d]),
            ("fusion.proj.bias", vec![d]),
        ] {
            add(name, shape, &mut fill);
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

    #[test]
    fn uniform_frame_collapses_to_its_token() {
        let d = 2;
        let store = store_with(2, d, |name, s| {
            if name.contains("attn") {
                eye(d)
            } else {
                ArrayD::from_elem(IxDyn(s), 0.3)
            }
        });
        let mut x = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2, d]));
        for i in 0..2 {
            for j in 0..2 {
                x[[0, i, j, 0]] = 1.5;
                x[[0, i, j, 1]] = -0.25;
            }
        }
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let grid = grid_from(&tape, x, (2, 2));
        let out = fsra_forward(&tape, &grid, &bound).unwrap();
        let v = tape.value(out);
        assert!((v[[0, 0]] - 1.5).abs() < 1e-12);
        assert!((v[[0, 1]] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn fsra_rows_match_dense_oracle_and_stay_frame_local() {
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..20 {
            let d = 3;
            let store = store_with(2, d, |_, s| {
                ArrayD::from_shape_fn(IxDyn(s), |_| rng.gen_range(-1.0..1.0))
            });
            let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 2, d]), |_| rng.gen_range(-1.0..1.0));
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let grid = grid_from(&tape, x.clone(), (2, 2));
            let out = fsra_forward(&tape, &grid, &bound).unwrap();
            let got = tape.value(out);

            let as2 = |n: &str| {
                store
                    .get(n)
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned()
            };
            let (wq, wk, wv) = (as2("fsra.attn.wq"), as2("fsra.attn.wk"), as2("fsra.attn.wv"));
            let queries = as2("fsra.queries");
            for ti in 0..2 {
                let mut frame = Array2::<f64>::zeros((4, d));
                for i in 0..2 {
                    for j in 0..2 {
                        for c in 0..d {
                            frame[[i * 2 + j, c]] = x[[ti, i, j, c]];
                        }
                    }
                }
                let q = queries.row(ti).insert_axis(ndarray::Axis(0)).to_owned();
                let want = attend_oracle(&q, &frame, &frame, &wq, &wk, &wv, &[true; 4]);
                for c in 0..d {
                    assert!((got[[ti, c]] - want[[0, c]]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn fsra_row_invariant_to_other_frames() {
        let mut rng = StdRng::seed_from_u64(11);
        let d = 2;
        let store = store_with(3, d, |_, s| {
            ArrayD::from_shape_fn(IxDyn(s), |_| rng.gen_range(-1.0..1.0))
        });
        let mut x = ArrayD::from_shape_fn(IxDyn(&[3, 2, 2, d]), |_| rng.gen_range(-1.0..1.0));
        let run = |x: &ArrayD<f64>| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let grid = grid_from(&tape, x.clone(), (2, 2));
            let out = fsra_forward(&tape, &grid, &bound).unwrap();
            (*tape.value(out)).clone()
        };
        let base = run(&x);
        x[[2, 0, 0, 0]] += 1.0;
        let moved = run(&x);
        for ti in 0..3 {
            let changed = (0..d).any(|c| (base[[ti, c]] - moved[[ti, c]]).abs() > 1e-12);
            assert_eq!(changed, ti == 2, "frame {ti}");
        }
    }

    #[test]
    fn gstra_single_valid_token_returns_its_projection() {
        let mut rng = StdRng::seed_from_u64(12);
        let d = 2;
        let store = store_with(1, d, |name, s| {
            if name == "gstra.attn.wv" {
                eye(d)
            } else {
                ArrayD::from_shape_fn(IxDyn(s), |_| rng.gen_range(-1.0..1.0))
            }
        });
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 2, 2, d]), |_| rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let grid = grid_from(&tape, x.clone(), (1, 1)); // only site (0,0) valid
        let out = gstra_forward(&tape, &grid, &bound).unwrap();
        let v = tape.value(out);
        for c in 0..d {
            assert!((v[[0, c]] - x[[0, 0, 0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn gstra_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..20 {
            let d = 3;
            let store = store_with(1, d, |_, s| {
                ArrayD::from_shape_fn(IxDyn(s), |_| rng.gen_range(-1.0..1.0))
            });
            let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 2, d]), |_| rng.gen_range(-1.0..1.0));
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let grid = grid_from(&tape, x.clone(), (2, 2));
            let out = gstra_forward(&tape, &grid, &bound).unwrap();
            let got = tape.value(out);

            let as2 = |n: &str| {
                store
                    .get(n)
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned()
            };
            // keys in row-major [T*h*w, d] order
            let mut all = Array2::<f64>::zeros((8, d));
            let mut r = 0;
            for ti in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        for c in 0..d {
                            all[[r, c]] = x[[ti, i, j, c]];
                        }
                        r += 1;
                    }
                }
            }
            let want = attend_oracle(
                &as2("gstra.query"),
                &all,
                &all,
                &as2("gstra.attn.wq"),
                &as2("gstra.attn.wk"),
                &as2("gstra.attn.wv"),
                &[true; 8],
            );
            for c in 0..d {
                assert!((got[[0, c]] - want[[0, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fuse_gate_extremes() {
        let d = 2;
        let make = |alpha: f64| {
            store_with(1, d, |name, s| match name {
                "fusion.alpha" => ArrayD::from_elem(IxDyn(s), alpha),
                "fusion.proj.weight" => eye(d),
                _ => ArrayD::zeros(IxDyn(s)),
            })
        };
        let fs_data =
            ArrayD::from_shape_vec(IxDyn(&[2, d]), vec![2.0, 0.0, -1.0, 3.0]).unwrap();
        let g_data = ArrayD::from_shape_vec(IxDyn(&[1, d]), vec![0.0, 2.0]).unwrap();

        // alpha = 1: global ignored
        let tape = Tape::new();
        let bound = make(1.0).bind(&tape);
        let out = fuse(
            &tape,
            tape.constant(fs_data.clone()),
            tape.constant(g_data.clone()),
            &bound,
        )
        .unwrap();
        assert_eq!(&*tape.value(out), &fs_data);

        // alpha = 0: all rows identical = proj(G)
        let tape = Tape::new();
        let bound = make(0.0).bind(&tape);
        let out = fuse(
            &tape,
            tape.constant(fs_data.clone()),
            tape.constant(g_data.clone()),
            &bound,
        )
        .unwrap();
        let v = tape.value(out);
        for t in 0..2 {
            assert_eq!(v[[t, 0]], 0.0);
            assert_eq!(v[[t, 1]], 2.0);
        }

        // alpha = 0.5 with F_s row [2,0], G [0,2] -> [1,1]
        let tape = Tape::new();
        let bound = make(0.5).bind(&tape);
        let out = fuse(
            &tape,
            tape.constant(fs_data),
            tape.constant(g_data),
            &bound,
        )
        .unwrap();
        let v = tape.value(out);
        assert!((v[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((v[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_gate_blocks_gradient_to_global_query() {
        let mut rng = StdRng::seed_from_u64(14);
        let d = 2;
        let store = store_with(2, d, |name, s| match name {
            "fusion.alpha" => ArrayD::from_elem(IxDyn(s), 1.0),
            _ => ArrayD::from_shape_fn(IxDyn(s), |_| rng.gen_range(-1.0..1.0)),
        });
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 2, d]), |_| rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let grid = grid_from(&tape, x, (2, 2));
        let fs = fsra_forward(&tape, &grid, &bound).unwrap();
        let g = gstra_forward(&tape, &grid, &bound).unwrap();
        let fused = fuse(&tape, fs, g, &bound).unwrap();
        let loss = tape.sum_all(tape.mul(fused, fused));
        let grads = tape.backward(loss);
        let gq = grads.get(bound.var("gstra.query"));
        let total: f64 = gq.map(|g| g.iter().map(|v| v.abs()).sum()).unwrap_or(0.0);
        assert_eq!(total, 0.0);
        // frame queries still train
        let fq: f64 = grads
            .get(bound.var("fsra.queries"))
            .unwrap()
            .iter()
            .map(|v| v.abs())
            .sum();
        assert!(fq > 1e-12);
    }

    #[test]
    fn frame_mean_ignores_masked_sites() {
        let d = 2;
        let mut x = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2, d]));
        x[[0, 0, 0, 0]] = 2.0;
        x[[0, 0, 1, 0]] = 4.0;
        x[[0, 1, 0, 0]] = 99.0; // invalid row
        x[[0, 1, 1, 0]] = 99.0;
        let tape = Tape::new();
        let grid = grid_from(&tape, x, (1, 2));
        let out = frame_mean(&tape, &grid).unwrap();
        let v = tape.value(out);
        assert!((v[[0, 0]] - 3.0).abs() < 1e-12);
    }
}
