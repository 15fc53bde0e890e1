//! Reshapes between video and planar layouts, and the clip splitter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `(3, T, h, w) -> (3T, h, w)`; output channel `color·T + t`. Batched
/// `(n, 3, T, h, w)` input maps to `(n, 3T, h, w)`.
pub fn squeeze_time<S: Scalar>(video: Tensor<S>) -> Result<Tensor<S>> {
    match *video.shape() {
        [3, t, h, w] => video.reshape(vec![3 * t, h, w]),
        [n, 3, t, h, w] => video.reshape(vec![n, 3 * t, h, w]),
        ref s => Err(Error::shape("squeeze_time", format!("expected (3,T,h,w) or (n,3,T,h,w), got {s:?}"))),
    }
}

/// Inverse of [`squeeze_time`] for a known frame count.
pub fn unsqueeze_time<S: Scalar>(planar: Tensor<S>, frames: usize) -> Result<Tensor<S>> {
    let bad = |s: &[usize]| Error::shape("unsqueeze_time", format!("{s:?} does not hold 3x{frames} channels"));
    match *planar.shape() {
        [c, h, w] if frames > 0 && c == 3 * frames => planar.reshape(vec![3, frames, h, w]),
        [n, c, h, w] if frames > 0 && c == 3 * frames => planar.reshape(vec![n, 3, frames, h, w]),
        ref s => Err(bad(s)),
    }
}

/// `(C, F_h, F_w) -> (C/T, T, F_h, F_w)`; channel `c` lands at `(c / T, c mod T)`.
pub fn detection_reshape<S: Scalar>(feature: Tensor<S>, frames: usize) -> Result<Tensor<S>> {
    match *feature.shape() {
        [c, h, w] if frames > 0 && c % frames == 0 => feature.reshape(vec![c / frames, frames, h, w]),
        ref s => Err(Error::shape(
            "detection_reshape",
            format!("{s:?}: channel count must be divisible by T = {frames}"),
        )),
    }
}

/// Inverse of [`detection_reshape`].
pub fn detection_unreshape<S: Scalar>(feature: Tensor<S>) -> Result<Tensor<S>> {
    match *feature.shape() {
        [g, t, h, w] => feature.reshape(vec![g * t, h, w]),
        ref s => Err(Error::shape("detection_unreshape", format!("expected rank 4, got {s:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Starts `0, s, 2s, ...` with the window inside the video.
    Exact,
    /// As `Exact`, plus a tail window ending at the last frame when frames
    /// would otherwise be left uncovered.
    Cover,
}

pub fn sliding_window_clips(n_frames: usize, window: usize, stride: usize, mode: WindowMode) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return Err(Error::Invalid("window and stride must be >= 1".into()));
    }
    if window > n_frames {
        return Err(Error::Invalid(format!("window {window} exceeds {n_frames} frames")));
    }
    let mut starts: Vec<usize> = (0..=n_frames - window).step_by(stride).collect();
    let last_end = starts.last().map_or(0, |s| s + window);
    if mode == WindowMode::Cover && last_end < n_frames {
        starts.push(n_frames - window);
    }
    Ok(starts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_major_order() {
        // color 0 frames valued 1 and 2, other colors zero.
        let v = Tensor::<f32>::new(vec![3, 2, 1, 1], vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let s = squeeze_time(v).unwrap();
        assert_eq!(s.shape(), &[6, 1, 1]);
        assert_eq!(s.data(), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(squeeze_time(Tensor::<f32>::zeros(vec![4, 2, 1, 1]).unwrap()).is_err());
    }

    #[test]
    fn window_examples() {
        use WindowMode::*;
        assert_eq!(sliding_window_clips(24, 16, 8, Exact).unwrap(), vec![0, 8]);
        assert_eq!(sliding_window_clips(16, 16, 8, Exact).unwrap(), vec![0]);
        assert_eq!(sliding_window_clips(256, 16, 8, Exact).unwrap().len(), 31);
        assert_eq!(sliding_window_clips(256, 16, 8, Cover).unwrap().len(), 31);
        assert_eq!(sliding_window_clips(20, 16, 8, Cover).unwrap(), vec![0, 4]);
        assert!(sliding_window_clips(8, 16, 8, Exact).is_err());
    }

    #[test]
    fn detection_layout() {
        let f = Tensor::<f32>::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = detection_reshape(f.clone(), 2).unwrap();
        assert_eq!(d.shape(), &[2, 2, 1, 1]);
        assert_eq!(d.get(&[1, 0, 0, 0]), 3.0);
        assert_eq!(detection_unreshape(d).unwrap(), f);
        assert!(detection_reshape(Tensor::<f32>::zeros(vec![5, 1, 1]).unwrap(), 2).is_err());
    }
}
