//! Raw clip container, bottom/right padding, and pixel decimation.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Result, StabError};

/// A video tensor `[T, H, W, 3]` plus the extent of real content.
///
/// Frames may be padded on the bottom/right up to a configured maximum;
/// `valid_hw` records the pre-padding extent so downstream stages can mask
/// the padded region out.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub data: ArrayD<f64>,
    /// (rows, cols) of actual content; everything beyond is padding.
    pub valid_hw: (usize, usize),
}

impl VideoClip {
    pub fn new(data: ArrayD<f64>, valid_hw: (usize, usize)) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(StabError::shape(format!(
                "clip must be [T, H, W, 3], got {s:?}"
            )));
        }
        if s[0] == 0 || s[1] == 0 || s[2] == 0 {
            return Err(StabError::shape("clip has an empty axis".to_string()));
        }
        if valid_hw.0 > s[1] || valid_hw.1 > s[2] || valid_hw.0 == 0 || valid_hw.1 == 0 {
            return Err(StabError::shape(format!(
                "valid_hw {valid_hw:?} outside clip extent ({}, {})",
                s[1], s[2]
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(StabError::data("clip contains non-finite values".to_string()));
        }
        Ok(VideoClip { data, valid_hw })
    }

    /// Full-content clip (no padding).
    pub fn full(data: ArrayD<f64>) -> Result<Self> {
        let s = data.shape().to_vec();
        if s.len() != 4 {
            return Err(StabError::shape(format!("clip must be rank 4, got {s:?}")));
        }
        Self::new(data, (s[1], s[2]))
    }

    pub fn t(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn h(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn w(&self) -> usize {
        self.data.shape()[2]
    }

    /// Zero-pad frames on the bottom/right to `(h, w)`; `valid_hw` keeps the
    /// original extent.
    pub fn pad_to(&self, h: usize, w: usize) -> Result<VideoClip> {
        if h < self.h() || w < self.w() {
            return Err(StabError::shape(format!(
                "pad target ({h}, {w}) smaller than clip ({}, {})",
                self.h(),
                self.w()
            )));
        }
        let t = self.t();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[t, h, w, 3]));
        for ti in 0..t {
            for i in 0..self.h() {
                for j in 0..self.w() {
                    for c in 0..3 {
                        out[[ti, i, j, c]] = self.data[[ti, i, j, c]];
                    }
                }
            }
        }
        VideoClip::new(out, self.valid_hw)
    }

    /// Halve spatial resolution by averaging 2×2 pixel blocks (the
    /// `half_resolution` downsampling substitute). Odd trailing rows/cols are
    /// averaged over the pixels that exist.
    pub fn decimate2(&self) -> Result<VideoClip> {
        let (t, h, w) = (self.t(), self.h(), self.w());
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[t, oh, ow, 3]));
        for ti in 0..t {
            for i in 0..oh {
                for j in 0..ow {
                    for c in 0..3 {
                        let mut sum = 0.0;
                        let mut cnt = 0.0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let (y, x) = (2 * i + di, 2 * j + dj);
                                if y < h && x < w {
                                    sum += self.data[[ti, y, x, c]];
                                    cnt += 1.0;
                                }
                            }
                        }
                        out[[ti, i, j, c]] = sum / cnt;
                    }
                }
            }
        }
        let valid = (self.valid_hw.0.div_ceil(2), self.valid_hw.1.div_ceil(2));
        VideoClip::new(out, valid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn ramp(t: usize, h: usize, w: usize) -> ArrayD<f64> {
        let mut k = 0.0;
        ArrayD::from_shape_fn(IxDyn(&[t, h, w, 3]), |_| {
            k += 1.0;
            (k % 97.0) / 97.0
        })
    }

    #[test]
    fn pad_preserves_content_and_extent() {
        let clip = VideoClip::full(ramp(2, 3, 5)).unwrap();
        let padded = clip.pad_to(8, 8).unwrap();
        assert_eq!(padded.data.shape(), &[2, 8, 8, 3]);
        assert_eq!(padded.valid_hw, (3, 5));
        for ti in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    for c in 0..3 {
                        assert_eq!(padded.data[[ti, i, j, c]], clip.data[[ti, i, j, c]]);
                    }
                }
            }
        }
        assert_eq!(padded.data[[1, 7, 7, 2]], 0.0);
    }

    #[test]
    fn decimate_averages_blocks() {
        let mut data = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2, 3]));
        for (k, v) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            data[[0, k / 2, k % 2, 0]] = *v;
        }
        let clip = VideoClip::full(data).unwrap();
        let dec = clip.decimate2().unwrap();
        assert_eq!(dec.data.shape(), &[1, 1, 1, 3]);
        assert!((dec.data[[0, 0, 0, 0]] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(VideoClip::full(ArrayD::zeros(IxDyn(&[2, 4, 4, 2]))).is_err());
        assert!(VideoClip::new(ramp(1, 4, 4), (5, 4)).is_err());
    }
}
