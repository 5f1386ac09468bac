//! Y-channel PSNR/SSIM, temporal profiles and difference maps.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Reported PSNR for identical frames.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_size(a: &Frame, b: &Frame) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!("frames differ: {}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` on BT.601 luma, capped at [`PSNR_CAP`].
pub fn psnr_y(pred: &Frame, gt: &Frame) -> Result<f64> {
    same_size(pred, gt)?;
    let (a, b) = (pred.luma(), gt.luma());
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM on luma with an 11x11 Gaussian window (sigma 1.5)
/// over the valid region.
pub fn ssim_y(pred: &Frame, gt: &Frame) -> Result<f64> {
    same_size(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Range(format!("SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (a, b) = (pred.luma(), gt.luma());
    let k = gaussian_window();
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let aa = filter_valid(&prod(&a, &a), h, w, &k);
    let bb = filter_valid(&prod(&b, &b), h, w, &k);
    let ab = filter_valid(&prod(&a, &b), h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

/// Row (or column) `index` of every frame stacked top to bottom in time order.
pub fn temporal_profile(frames: &[Frame], axis: Axis, index: usize) -> Result<Frame> {
    if frames.len() < 2 {
        return Err(Error::Range(format!("a temporal profile needs at least 2 frames, got {}", frames.len())));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    if let Some(f) = frames.iter().find(|f| (f.height(), f.width()) != (h, w)) {
        return Err(Error::Shape(format!("frame {}x{} differs from {h}x{w}", f.height(), f.width())));
    }
    let len = match axis {
        Axis::Row => w,
        Axis::Column => h,
    };
    let limit = if axis == Axis::Row { h } else { w };
    if index >= limit {
        return Err(Error::Range(format!("profile index {index} out of bounds for {limit}")));
    }
    Ok(Frame::from_fn(frames.len(), len, |t, i| match axis {
        Axis::Row => frames[t].pixel(index, i),
        Axis::Column => frames[t].pixel(i, index),
    }))
}

/// `|pred - gt|` per pixel, averaged over channels and divided by the frame
/// maximum; an all-zero map for identical frames. Returned as gray RGB.
pub fn difference_map(pred: &Frame, gt: &Frame) -> Result<Frame> {
    same_size(pred, gt)?;
    let d: Vec<f64> =
        pred.data().chunks(3).zip(gt.data().chunks(3)).map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0).collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    let norm = if max > 0.0 { max } else { 1.0 };
    Ok(Frame::from_fn(pred.height(), pred.width(), |y, x| [d[y * pred.width() + x] / norm; 3]))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetric {
    pub index: usize,
    pub psnr_db: f64,
    pub ssim: Option<f64>,
}

/// Per-frame scores plus the Center (first, middle, last) and Average (all
/// frames) protocol means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetric>,
    pub center_psnr: f64,
    pub center_ssim: Option<f64>,
    pub average_psnr: f64,
    pub average_ssim: Option<f64>,
}

/// Indices of the Center protocol.
pub fn center_indices(n: usize) -> Vec<usize> {
    let mut v = vec![0, n / 2, n - 1];
    v.dedup();
    v
}

impl MetricReport {
    /// SSIM is omitted when frames are smaller than its window.
    pub fn compute(pred: &[Frame], gt: &[Frame]) -> Result<Self> {
        if pred.len() != gt.len() || pred.is_empty() {
            return Err(Error::Shape(format!("{} predicted frames for {} ground-truth frames", pred.len(), gt.len())));
        }
        let frames = pred
            .iter()
            .zip(gt)
            .enumerate()
            .map(|(index, (p, g))| {
                let ssim = match ssim_y(p, g) {
                    Ok(v) => Some(v),
                    Err(Error::Range(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(FrameMetric { index, psnr_db: psnr_y(p, g)?, ssim })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = |idx: &[usize], f: &dyn Fn(&FrameMetric) -> Option<f64>| -> Option<f64> {
            idx.iter().map(|&i| f(&frames[i])).sum::<Option<f64>>().map(|s| s / idx.len() as f64)
        };
        let center = center_indices(frames.len());
        let all: Vec<usize> = (0..frames.len()).collect();
        Ok(Self {
            center_psnr: mean(&center, &|m| Some(m.psnr_db)).unwrap_or_default(),
            center_ssim: mean(&center, &|m| m.ssim),
            average_psnr: mean(&all, &|m| Some(m.psnr_db)).unwrap_or_default(),
            average_ssim: mean(&all, &|m| m.ssim),
            frames,
        })
    }

    /// One JSON object per frame, then one summary object.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for f in &self.frames {
            out.push_str(&serde_json::to_string(f).expect("metrics serialize"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "center_psnr": self.center_psnr,
            "center_ssim": self.center_ssim,
            "average_psnr": self.average_psnr,
            "average_ssim": self.average_ssim,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    pub fn table(&self) -> String {
        let ssim = |v: Option<f64>| v.map_or("-".to_string(), |s| format!("{s:.4}"));
        let mut out = String::from("frame    PSNR(dB)  SSIM\n");
        for f in &self.frames {
            out.push_str(&format!("{:>5}  {:>10.3}  {}\n", f.index, f.psnr_db, ssim(f.ssim)));
        }
        out.push_str(&format!("center   {:>9.3}  {}\n", self.center_psnr, ssim(self.center_ssim)));
        out.push_str(&format!("average  {:>9.3}  {}\n", self.average_psnr, ssim(self.average_ssim)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(h: usize, w: usize, seed: u64) -> Frame {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Frame::from_fn(h, w, |_, _| [r.gen(), r.gen(), r.gen()])
    }

    #[test]
    fn psnr_closed_forms() {
        let a = noise(8, 8, 1);
        assert_eq!(psnr_y(&a, &a).unwrap(), PSNR_CAP);
        let g = Frame::filled(4, 4, [0.5; 3]);
        let p = Frame::filled(4, 4, [0.6; 3]);
        assert!((psnr_y(&p, &g).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr_y(&p, &Frame::filled(4, 5, [0.5; 3])).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let (a, b) = (noise(9, 7, 2), noise(9, 7, 3));
        let mut se = 0.0;
        for y in 0..9 {
            for x in 0..7 {
                let (p, q) = (a.pixel(y, x), b.pixel(y, x));
                let ya = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                let yb = 0.299 * q[0] + 0.587 * q[1] + 0.114 * q[2];
                se += (ya - yb).powi(2);
            }
        }
        let want = 10.0 * (63.0 / se).log10();
        assert!((psnr_y(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let gt = Frame::filled(16, 16, [0.5; 3]);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n: Vec<f64> = (0..16 * 16 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let scores: Vec<f64> = [0.01, 0.02, 0.05, 0.1, 0.2]
            .iter()
            .map(|&amp| {
                let d = gt.data().iter().zip(&n).map(|(g, e)| g + amp * e).collect();
                psnr_y(&Frame::new(16, 16, d).unwrap(), &gt).unwrap()
            })
            .collect();
        assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
    }

    #[test]
    fn ssim_identity_symmetry_and_constants() {
        let (a, b) = (noise(16, 14, 5), noise(16, 14, 6));
        assert!((ssim_y(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim_y(&a, &b).unwrap(), ssim_y(&b, &a).unwrap());
        let z = Frame::filled(12, 12, [0.0; 3]);
        let o = Frame::filled(12, 12, [1.0; 3]);
        // Constant images: zero variance, so SSIM = C1 / (1 + C1).
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim_y(&z, &o).unwrap() - want).abs() < 1e-12);
        assert!(ssim_y(&Frame::filled(10, 12, [0.0; 3]), &Frame::filled(10, 12, [0.0; 3])).is_err());
        let s = ssim_y(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn profiles_stack_rows_over_time() {
        let still = vec![noise(6, 5, 7); 4];
        let p = temporal_profile(&still, Axis::Row, 2).unwrap();
        assert_eq!((p.height(), p.width()), (4, 5));
        for t in 1..4 {
            for x in 0..5 {
                assert_eq!(p.pixel(t, x), p.pixel(0, x));
            }
        }
        // A bright column moving right one pixel per frame draws a diagonal.
        let moving: Vec<Frame> = (0..5).map(|k| Frame::from_fn(3, 8, |_, x| [(x == k + 1) as u8 as f64; 3])).collect();
        let p = temporal_profile(&moving, Axis::Row, 1).unwrap();
        for t in 0..5 {
            for x in 0..8 {
                assert_eq!(p.pixel(t, x)[0], (x == t + 1) as u8 as f64);
            }
        }
        let c = temporal_profile(&moving, Axis::Column, 3).unwrap();
        assert_eq!((c.height(), c.width()), (5, 3));
        assert!(temporal_profile(&moving, Axis::Row, 3).is_err());
        assert!(temporal_profile(&moving[..1], Axis::Row, 0).is_err());
    }

    #[test]
    fn difference_maps_are_max_normalized() {
        let a = noise(5, 6, 8);
        assert!(difference_map(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let mut b = a.clone();
        let mut px = b.pixel(3, 4);
        px[1] = 1.0 - px[1];
        px[0] = 1.0 - px[0];
        b.set_pixel(3, 4, px);
        let d = difference_map(&a, &b).unwrap();
        let max = d.data().iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert_eq!(d.pixel(3, 4)[0], 1.0);
    }

    #[test]
    fn center_and_average_agree_for_three_frames() {
        let gt: Vec<Frame> = (0..3).map(|k| noise(12, 12, 10 + k)).collect();
        let pred: Vec<Frame> = (0..3).map(|k| noise(12, 12, 20 + k)).collect();
        let r = MetricReport::compute(&pred, &gt).unwrap();
        assert_eq!(r.center_psnr, r.average_psnr);
        assert_eq!(r.center_ssim, r.average_ssim);
        assert_eq!(center_indices(9), vec![0, 4, 8]);
        assert!(r.to_json_lines().lines().count() == 4);
        let small = MetricReport::compute(&[noise(4, 4, 1)], &[noise(4, 4, 2)]).unwrap();
        assert_eq!(small.average_ssim, None);
    }
}
