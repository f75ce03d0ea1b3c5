//! Patch embedding: non-overlapping p×p patches, flattened and linearly
//! mapped to the visual width, with padded grid sites gated to zero.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Result, StabError};
use crate::tensor::{Tape, Var};
use crate::video::VideoClip;

/// Token grid `[T, h, w, d]` living on a tape, with the count of grid
/// rows/cols that carry real (non-padded) content.
#[derive(Clone, Copy)]
pub struct PatchGrid {
    pub tokens: Var,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub valid_hw: (usize, usize),
}

impl PatchGrid {
    /// True for sites inside the valid region.
    pub fn site_valid(&self, i: usize, j: usize) -> bool {
        i < self.valid_hw.0 && j < self.valid_hw.1
    }

    /// Flat mask over `[T, h, w]` sites in row-major order, identical for
    /// every frame.
    pub fn flat_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.t * self.h * self.w);
        for _ in 0..self.t {
            for i in 0..self.h {
                for j in 0..self.w {
                    m.push(self.site_valid(i, j));
                }
            }
        }
        m
    }

    /// Mask over one frame's `h·w` sites.
    pub fn frame_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.h * self.w);
        for i in 0..self.h {
            for j in 0..self.w {
                m.push(self.site_valid(i, j));
            }
        }
        m
    }
}

/// Gather each p×p patch into a row of `[T·h·w, 3p²]` in row-major
/// (y, x, channel) order.
pub fn patch_matrix(clip: &VideoClip, p: usize) -> Result<Array2<f64>> {
    let (t, hh, ww) = (clip.t(), clip.h(), clip.w());
    if hh % p != 0 || ww % p != 0 {
        return Err(StabError::shape(format!(
            "frame ({hh}, {ww}) not divisible by patch size {p}"
        )));
    }
    let (h, w) = (hh / p, ww / p);
    let mut m = Array2::<f64>::zeros((t * h * w, 3 * p * p));
    for ti in 0..t {
        for i in 0..h {
            for j in 0..w {
                let row = (ti * h + i) * w + j;
                let mut col = 0;
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..3 {
                            m[[row, col]] = clip.data[[ti, i * p + y, j * p + x, c]];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Embed a clip into a token grid. Sites whose patch lies fully or partly in
/// the padded region are forced to exactly zero, so downstream stages see the
/// same values whether the padding held zeros or garbage.
pub fn patchify(
    tape: &Tape,
    clip: &VideoClip,
    weight: Var,
    bias: Var,
) -> Result<PatchGrid> {
    let pin = tape.shape(weight);
    if pin.len() != 2 || pin[0] % 3 != 0 {
        return Err(StabError::shape(format!(
            "patch weight must be [3p², d], got {pin:?}"
        )));
    }
    let p2 = pin[0] / 3;
    let p = (p2 as f64).sqrt().round() as usize;
    if p * p != p2 {
        return Err(StabError::shape(format!(
            "patch weight rows {} are not 3·p² for integer p",
            pin[0]
        )));
    }
    let d = pin[1];
    let m = patch_matrix(clip, p)?;
    let (t, h, w) = (clip.t(), clip.h() / p, clip.w() / p);
    let valid = (clip.valid_hw.0.div_ceil(p), clip.valid_hw.1.div_ceil(p));

    let flat = tape.constant(m.into_dyn());
    let emb = tape.add_bias(tape.matmul(flat, weight), bias);

    // gate: 1 on valid sites, 0 elsewhere (kills padded-region content)
    let mut gate = ArrayD::<f64>::zeros(IxDyn(&[t * h * w, d]));
    for ti in 0..t {
        for i in 0..valid.0.min(h) {
            for j in 0..valid.1.min(w) {
                let row = (ti * h + i) * w + j;
                for c in 0..d {
                    gate[[row, c]] = 1.0;
                }
            }
        }
    }
    let gated = tape.mul(emb, tape.constant(gate));
    let tokens = tape.reshape(gated, &[t, h, w, d]);
    Ok(PatchGrid {
        tokens,
        t,
        h,
        w,
        valid_hw: (valid.0.min(h), valid.1.min(w)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn eye(n: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[n, n]), |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 })
    }

    #[test]
    fn shape_contract() {
        let clip = VideoClip::full(ArrayD::zeros(IxDyn(&[2, 4, 4, 3]))).unwrap();
        let tape = Tape::new();
        let w = tape.constant(ArrayD::zeros(IxDyn(&[12, 5])));
        let b = tape.constant(ArrayD::zeros(IxDyn(&[5])));
        let grid = patchify(&tape, &clip, w, b).unwrap();
        assert_eq!(tape.shape(grid.tokens), vec![2, 2, 2, 5]);
        assert_eq!(grid.valid_hw, (2, 2));
    }

    #[test]
    fn identity_embedding_reproduces_pixels() {
        // p=2, d=12, identity map, zero bias: each token equals the raw
        // pixels of its patch in (y, x, channel) order
        let mut rng = StdRng::seed_from_u64(2);
        let data = ArrayD::from_shape_fn(IxDyn(&[2, 4, 6, 3]), |_| rng.gen_range(0.0..1.0));
        let clip = VideoClip::full(data.clone()).unwrap();
        let tape = Tape::new();
        let w = tape.constant(eye(12));
        let b = tape.constant(ArrayD::zeros(IxDyn(&[12])));
        let grid = patchify(&tape, &clip, w, b).unwrap();
        let tok = tape.value(grid.tokens);
        for ti in 0..2 {
            for i in 0..2 {
                for j in 0..3 {
                    let mut col = 0;
                    for y in 0..2 {
                        for x in 0..2 {
                            for c in 0..3 {
                                let want = data[[ti, 2 * i + y, 2 * j + x, c]];
                                assert_eq!(tok[[ti, i, j, col]], want);
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn linear_in_pixels_with_zero_bias() {
        let mut rng = StdRng::seed_from_u64(3);
        let data = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4, 3]), |_| rng.gen_range(0.0..1.0));
        let weight = ArrayD::from_shape_fn(IxDyn(&[12, 7]), |_| rng.gen_range(-1.0..1.0));
        let run = |arr: ArrayD<f64>| {
            let clip = VideoClip::full(arr).unwrap();
            let tape = Tape::new();
            let w = tape.constant(weight.clone());
            let b = tape.constant(ArrayD::zeros(IxDyn(&[7])));
            let grid = patchify(&tape, &clip, w, b).unwrap();
            (*tape.value(grid.tokens)).clone()
        };
        let base = run(data.clone());
        let scaled = run(&data * 0.37);
        for (s, bse) in scaled.iter().zip(base.iter()) {
            assert!((s - 0.37 * bse).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_sites_forced_to_zero() {
        let mut rng = StdRng::seed_from_u64(4);
        let content = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4, 3]), |_| rng.gen_range(0.0..1.0));
        let clip = VideoClip::full(content).unwrap();
        let mut padded = clip.pad_to(8, 8).unwrap();
        // fill padding with garbage; gating must erase it
        for i in 0..8 {
            for j in 0..8 {
                if i >= 4 || j >= 4 {
                    for c in 0..3 {
                        padded.data[[0, i, j, c]] = rng.gen_range(-100.0..100.0);
                    }
                }
            }
        }
        let tape = Tape::new();
        let weight = tape.constant(ArrayD::from_shape_fn(IxDyn(&[12, 5]), |_| rng.gen_range(-1.0..1.0)));
        let bias = tape.constant(ArrayD::from_shape_fn(IxDyn(&[5]), |_| rng.gen_range(-1.0..1.0)));
        let grid = patchify(&tape, &padded, weight, bias).unwrap();
        assert_eq!(grid.valid_hw, (2, 2));
        let tok = tape.value(grid.tokens);
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..5 {
                    let v = tok[[0, i, j, c]];
                    if i >= 2 || j >= 2 {
                        assert_eq!(v, 0.0, "padded site ({i},{j}) not zeroed");
                    }
                }
            }
        }
    }

    #[test]
    fn indivisible_frame_is_an_error() {
        let clip = VideoClip::full(ArrayD::zeros(IxDyn(&[1, 5, 4, 3]))).unwrap();
        let tape = Tape::new();
        let w = tape.constant(ArrayD::zeros(IxDyn(&[12, 4])));
        let b = tape.constant(ArrayD::zeros(IxDyn(&[4])));
        assert!(patchify(&tape, &clip, w, b).is_err());
    }
}
