//! Threshold-crossing event simulator.
//!
//! Every pixel tracks `L = ln(Y + LOG_EPS)` of its luma. Between consecutive
//! frames `L` is interpolated linearly in time; each time it moves a full
//! `threshold` away from the last emission level an event is emitted at the
//! interpolated crossing time with the sign of the change, and the emission
//! level steps by `threshold`.

use super::{EventRecord, EventStream};
use crate::error::{Error, Result};
use crate::frame::Frame;

pub const DEFAULT_THRESHOLD: f64 = 0.15;
pub const LOG_EPS: f64 = 1e-3;

/// Slack on level comparisons so that changes of exactly `k * threshold`
/// produce `k` events despite rounding in the logarithm.
const LEVEL_TOL: f64 = 1e-9;

/// Simulate events over `frames`, which are taken to be uniformly spaced on `[0, 1]`.
pub fn simulate_events(frames: &[Frame], threshold: f64) -> Result<EventStream> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::InvalidConfig(format!("contrast threshold must be > 0, got {threshold}")));
    }
    if frames.len() < 2 {
        return Err(Error::Range(format!("simulation needs at least 2 frames, got {}", frames.len())));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    if let Some(f) = frames.iter().find(|f| f.height() != h || f.width() != w) {
        return Err(Error::Shape(format!("frame {}x{} differs from {h}x{w}", f.height(), f.width())));
    }
    let logs: Vec<Vec<f64>> = frames.iter().map(|f| f.luma().iter().map(|&y| (y + LOG_EPS).ln()).collect()).collect();
    let dt = 1.0 / (frames.len() - 1) as f64;
    let mut records = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let px = y * w + x;
            let mut level = logs[0][px];
            for k in 0..frames.len() - 1 {
                let (la, lb) = (logs[k][px], logs[k + 1][px]);
                let t0 = k as f64 * dt;
                let delta = lb - la;
                if delta == 0.0 {
                    continue;
                }
                let sign = delta.signum();
                // Step the emission level while the segment end is at least one threshold beyond it.
                while sign * (lb - level) >= threshold - LEVEL_TOL {
                    level += sign * threshold;
                    let frac = ((level - la) / delta).clamp(0.0, 1.0);
                    records.push(EventRecord { t: (t0 + frac * dt).min(1.0), x: x as u32, y: y as u32, p: sign as i8 });
                }
            }
        }
    }
    // Stable sort: ties in time keep row-major pixel order.
    EventStream::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: f64) -> Frame {
        Frame::filled(h, w, [v, v, v])
    }

    #[test]
    fn identical_frames_are_silent() {
        let f = gray(4, 4, 0.4);
        assert!(simulate_events(&[f.clone(), f], 0.15).unwrap().is_empty());
    }

    #[test]
    fn two_thresholds_of_brightening_give_two_events() {
        let th = 0.15;
        let i0 = 0.2;
        let i1 = ((i0 + LOG_EPS).ln() + 2.0 * th).exp() - LOG_EPS;
        let s = simulate_events(&[gray(3, 2, i0), gray(3, 2, i1)], th).unwrap();
        assert_eq!(s.len(), 12);
        for px in 0..6u32 {
            let mine: Vec<_> = s.records().iter().filter(|r| r.y * 2 + r.x == px).collect();
            assert_eq!(mine.len(), 2);
            assert!(mine.iter().all(|r| r.p == 1));
            assert!((mine[0].t - 0.5).abs() < 1e-9 && (mine[1].t - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_inputs() {
        let f = gray(2, 2, 0.5);
        assert!(matches!(simulate_events(&[f.clone(), f.clone()], 0.0), Err(Error::InvalidConfig(_))));
        assert!(simulate_events(std::slice::from_ref(&f), 0.1).is_err());
        assert!(simulate_events(&[f, gray(3, 2, 0.5)], 0.1).is_err());
    }
}
