//! Separable bicubic resampling shared by frames and event voxels.
//!
//! Keys cubic kernel with `a = -0.5` (Catmull-Rom). Sample centers follow the
//! half-pixel convention `src = (dst + 0.5) * s - 0.5`, where `s` is the
//! input/output ratio. When shrinking (`s > 1`) the kernel is stretched by `s`
//! so that it integrates over the covered input footprint, and weights are
//! renormalized to sum to one. Out-of-range taps mirror about the border,
//! repeating the edge sample (`cba|abcd|dcb`).

use crate::error::{Error, Result};
use crate::frame::Frame;

const A: f64 = -0.5;

pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Mirror an arbitrary integer index into `[0, n)`.
pub fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Per output sample, the (input index, weight) taps for a 1-D resize.
pub fn taps(n_in: usize, n_out: usize, ratio: f64) -> Vec<Vec<(usize, f64)>> {
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut acc: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let w = cubic((center - i as f64) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = mirror(i, n_in);
                match acc.iter_mut().find(|(j, _)| *j == idx) {
                    Some((_, acc_w)) => *acc_w += w,
                    None => acc.push((idx, w)),
                }
            }
            let total: f64 = acc.iter().map(|(_, w)| w).sum();
            acc.iter_mut().for_each(|(_, w)| *w /= total);
            acc
        })
        .collect()
}

/// Resize a row-major `h x w` plane to `oh x ow` with ratio `s` on both axes.
pub fn resize_plane(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize, s: f64) -> Vec<f64> {
    debug_assert_eq!(plane.len(), h * w);
    let tx = taps(w, ow, s);
    let ty = taps(h, oh, s);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for (ox, t) in tx.iter().enumerate() {
            rows[y * ow + ox] = t.iter().map(|&(i, wt)| wt * src[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (oy, t) in ty.iter().enumerate() {
        for ox in 0..ow {
            out[oy * ow + ox] = t.iter().map(|&(i, wt)| wt * rows[i * ow + ox]).sum();
        }
    }
    out
}

/// Output size for downscaling by `s`: `floor(n / s)`.
pub fn downscaled_size(n: usize, s: f64) -> Result<usize> {
    if !(s >= 1.0) || !s.is_finite() {
        return Err(Error::InvalidConfig(format!("spatial scale must be >= 1, got {s}")));
    }
    let m = (n as f64 / s + 1e-9).floor() as usize;
    if m == 0 {
        return Err(Error::Range(format!("scale {s} reduces size {n} to zero")));
    }
    Ok(m)
}

/// Bicubic `s:1` downsampling of an RGB frame.
pub fn downsample_frame(frame: &Frame, s: f64) -> Result<Frame> {
    let oh = downscaled_size(frame.height(), s)?;
    let ow = downscaled_size(frame.width(), s)?;
    if s == 1.0 {
        return Ok(frame.clone());
    }
    let planes = frame.planes();
    let out = [0, 1, 2].map(|c| resize_plane(&planes[c], frame.height(), frame.width(), oh, ow, s));
    Ok(Frame::from_planes(oh, ow, &out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_interpolates_and_partitions_unity() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        for k in 0..10 {
            let f = k as f64 / 10.0;
            let s: f64 = (-2..=2).map(|i| cubic(f - i as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mirror_repeats_edge() {
        let got: Vec<usize> = (-3..7).map(|i| mirror(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(mirror(-5, 1), 0);
    }

    #[test]
    fn unit_ratio_is_identity() {
        let plane: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let out = resize_plane(&plane, 4, 5, 4, 5, 1.0);
        for (a, b) in out.iter().zip(&plane) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_survive_any_ratio() {
        for s in [1.5, 2.0, 3.0, 4.0] {
            let plane = vec![0.3; 12 * 12];
            let (oh, ow) = (downscaled_size(12, s).unwrap(), downscaled_size(12, s).unwrap());
            let out = resize_plane(&plane, 12, 12, oh, ow, s);
            assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-12), "s={s}");
        }
    }

    #[test]
    fn degenerate_sizes_are_rejected() {
        assert!(downscaled_size(3, 4.0).is_err());
        assert!(downscaled_size(3, 0.5).is_err());
        assert_eq!(downscaled_size(9, 1.5).unwrap(), 6);
    }
}
