use super::EventStream;
use crate::error::{Error, Result};
use crate::resample::{downscaled_size, resize_plane};
use crate::tensor::Tensor;

/// Fractional bits of the temporal binning weights.
///
/// Each event's position `t * M` is rounded to a multiple of `2^-WEIGHT_BITS`,
/// so every deposited weight is a dyadic rational and all accumulations are
/// exact in `f64`: the grid's total mass equals the polarity sum bit-for-bit.
pub const WEIGHT_BITS: u32 = 20;

/// Signed event mass over `M + 1` temporal bins, stored bin-major
/// (`bins x height x width`, row-major within a bin).
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    bins: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, height: usize, width: usize) -> Self {
        Self { bins, height, width, data: vec![0.0; bins * height * width] }
    }

    /// Wrap a `bins x H x W` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[bins, height, width] = t.shape() else {
            return Err(Error::Shape(format!("voxel grid must be 3-D, got {:?}", t.shape())));
        };
        if bins < 2 {
            return Err(Error::InvalidConfig(format!("voxel grid needs at least 2 bins, got {bins}")));
        }
        if !t.all_finite() {
            return Err(Error::Range("voxel grid contains non-finite values".into()));
        }
        Ok(Self { bins, height, width, data: t.data().to_vec() })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.bins, self.height, self.width], self.data.clone())
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Number of event segments `M` (one fewer than the bins).
    pub fn segments(&self) -> usize {
        self.bins - 1
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, bin: usize, y: usize, x: usize) -> f64 {
        self.data[(bin * self.height + y) * self.width + x]
    }

    pub fn bin(&self, b: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn total_mass(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Voxel-level time reversal: bin order flipped, sign negated.
    pub fn reversed(&self) -> Self {
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(self.data.len());
        for b in (0..self.bins).rev() {
            data.extend(self.data[b * n..(b + 1) * n].iter().map(|v| -v));
        }
        Self { data, ..*self }
    }
}

/// Bin-pair slices of a voxel grid with their center timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSegmentStack {
    /// `M` tensors, each `2 x H x W`: bins `(m - 1, m)` for `m = 1..=M`.
    pub segments: Vec<Tensor>,
    /// `m / (M + 1)` for `m = 1..=M`.
    pub centers: Vec<f64>,
}

/// Deposit each event's polarity linearly across the two bins adjacent to `t * M`.
pub fn voxelize(events: &EventStream, height: usize, width: usize, m: usize) -> Result<VoxelGrid> {
    if m < 1 {
        return Err(Error::InvalidConfig(format!("segment count M must be >= 1, got {m}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig(format!("empty sensor {height}x{width}")));
    }
    let mut grid = VoxelGrid::zeros(m + 1, height, width);
    let plane = height * width;
    let one = 1u64 << WEIGHT_BITS;
    for (i, r) in events.records().iter().enumerate() {
        if r.x as usize >= width || r.y as usize >= height {
            return Err(Error::InvalidEvent { index: i, reason: format!("pixel ({}, {}) outside {width}x{height}", r.x, r.y) });
        }
        let q = quantize(r.t, m);
        let (bin, frac) = ((q >> WEIGHT_BITS) as usize, q & (one - 1));
        let p = r.p as f64;
        let at = r.y as usize * width + r.x as usize;
        if bin >= m {
            grid.data[m * plane + at] += p;
        } else if frac == 0 {
            grid.data[bin * plane + at] += p;
        } else {
            let w1 = frac as f64 / one as f64;
            let w0 = (one - frac) as f64 / one as f64;
            grid.data[bin * plane + at] += p * w0;
            grid.data[(bin + 1) * plane + at] += p * w1;
        }
    }
    Ok(grid)
}

/// `round(t * M * 2^WEIGHT_BITS)` computed exactly in integers, ties to even.
///
/// `t` sits on the `2^-53` lattice, so `t * 2^53` is an integer. With ties to
/// even and an even `M * 2^WEIGHT_BITS`, `quantize(1 - t) == M * 2^WEIGHT_BITS - quantize(t)`,
/// which makes voxelization commute with time reversal.
fn quantize(t: f64, m: usize) -> u64 {
    let k = (t * (1u64 << 53) as f64) as u128;
    let num = k * m as u128;
    let shift = 53 - WEIGHT_BITS;
    let (q, rem) = (num >> shift, num & ((1u128 << shift) - 1));
    let half = 1u128 << (shift - 1);
    let up = rem > half || (rem == half && q & 1 == 1);
    (q + up as u128) as u64
}

/// Split an `(M + 1)`-bin grid into `M` adjacent-bin-pair segments.
pub fn slice_segments(voxel: &VoxelGrid) -> EventSegmentStack {
    let m = voxel.segments();
    let n = voxel.height * voxel.width;
    let segments = (1..=m)
        .map(|k| {
            let data = voxel.data[(k - 1) * n..(k + 1) * n].to_vec();
            Tensor::from_parts(vec![2, voxel.height, voxel.width], data)
        })
        .collect();
    let centers = (1..=m).map(|k| k as f64 / (m + 1) as f64).collect();
    EventSegmentStack { segments, centers }
}

/// Bicubic `s:1` downsampling of every temporal bin; bin count unchanged.
pub fn downsample_voxel(voxel: &VoxelGrid, s: f64) -> Result<VoxelGrid> {
    let oh = downscaled_size(voxel.height, s)?;
    let ow = downscaled_size(voxel.width, s)?;
    if s == 1.0 {
        return Ok(voxel.clone());
    }
    let mut data = Vec::with_capacity(voxel.bins * oh * ow);
    for b in 0..voxel.bins {
        data.extend(resize_plane(voxel.bin(b), voxel.height, voxel.width, oh, ow, s));
    }
    Ok(VoxelGrid { bins: voxel.bins, height: oh, width: ow, data })
}

#[cfg(test)]
mod tests {
    use super::super::EventRecord;
    use super::*;
    use proptest::prelude::*;

    fn stream(v: Vec<(f64, u32, u32, i8)>) -> EventStream {
        EventStream::new(v.into_iter().map(|(t, x, y, p)| EventRecord::new(t, x, y, p)).collect()).unwrap()
    }

    #[test]
    fn empty_stream_gives_zero_grid() {
        let g = voxelize(&EventStream::default(), 4, 4, 5).unwrap();
        assert_eq!(g.bins(), 6);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integral_position_lands_in_one_bin() {
        let g = voxelize(&stream(vec![(0.5, 1, 2, 1)]), 4, 4, 4).unwrap();
        for b in 0..5 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = if (b, y, x) == (2, 2, 1) { 1.0 } else { 0.0 };
                    assert_eq!(g.get(b, y, x), want);
                }
            }
        }
    }

    #[test]
    fn endpoint_times_use_first_and_last_bins() {
        let g = voxelize(&stream(vec![(0.0, 0, 0, 1), (1.0, 0, 0, -1)]), 1, 1, 3).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn split_weights_follow_the_fraction() {
        // t*M = 1.25 -> bins 1 and 2 with 0.75 / 0.25.
        let g = voxelize(&stream(vec![(0.3125, 0, 0, -1)]), 1, 1, 4).unwrap();
        assert_eq!(g.data(), &[0.0, -0.75, -0.25, 0.0, 0.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(voxelize(&stream(vec![(0.1, 0, 0, 1), (0.2, 4, 0, 1)]), 4, 4, 3), Err(Error::InvalidEvent { index: 1, .. })));
        assert!(matches!(voxelize(&EventStream::default(), 4, 4, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn segments_pair_adjacent_bins() {
        let mut t = Tensor::zeros(&[4, 2, 2]);
        for b in 0..4 {
            for i in 0..4 {
                t.data_mut()[b * 4 + i] = b as f64;
            }
        }
        let v = VoxelGrid::from_tensor(&t).unwrap();
        let s = slice_segments(&v);
        assert_eq!(s.segments.len(), 3);
        assert_eq!(s.centers, vec![0.25, 0.5, 0.75]);
        assert_eq!(s.segments[1].data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let s7 = slice_segments(&VoxelGrid::zeros(8, 1, 1));
        assert_eq!(s7.centers, (1..=7).map(|m| m as f64 / 8.0).collect::<Vec<_>>());
    }

    #[test]
    fn downsample_identity_and_constants() {
        let g = voxelize(&stream(vec![(0.3, 1, 1, 1), (0.6, 2, 3, -1)]), 6, 6, 3).unwrap();
        assert_eq!(downsample_voxel(&g, 1.0).unwrap(), g);
        let c = VoxelGrid::from_tensor(&Tensor::full(&[3, 8, 8], 0.5)).unwrap();
        let d = downsample_voxel(&c, 2.0).unwrap();
        assert_eq!((d.bins(), d.height(), d.width()), (3, 4, 4));
        assert!(d.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(downsample_voxel(&c, 9.0).is_err());
    }

    proptest! {
        #[test]
        fn mass_is_conserved_exactly(
            evs in prop::collection::vec((0.0f64..=1.0, 0u32..8, 0u32..8, prop::bool::ANY), 0..300),
            m in 1usize..10,
        ) {
            let s = stream(evs.into_iter().map(|(t, x, y, p)| (t, x, y, if p { 1 } else { -1 })).collect());
            let g = voxelize(&s, 8, 8, m).unwrap();
            prop_assert_eq!(g.total_mass(), s.polarity_sum() as f64);
        }

        #[test]
        fn voxelization_commutes_with_reversal(
            evs in prop::collection::vec((0.0f64..=1.0, 0u32..4, 0u32..4, prop::bool::ANY), 0..100),
            m in 1usize..10,
        ) {
            let s = stream(evs.into_iter().map(|(t, x, y, p)| (t, x, y, if p { 1 } else { -1 })).collect());
            let a = voxelize(&s.reversed(), 4, 4, m).unwrap();
            let b = voxelize(&s, 4, 4, m).unwrap().reversed();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn each_event_touches_at_most_two_adjacent_bins(t in 0.0f64..=1.0, m in 1usize..10) {
            let s = stream(vec![(t, 0, 0, 1)]);
            let g = voxelize(&s, 1, 1, m).unwrap();
            let nz: Vec<usize> = (0..=m).filter(|&b| g.get(b, 0, 0) != 0.0).collect();
            prop_assert!(nz.len() == 1 || (nz.len() == 2 && nz[1] == nz[0] + 1));
            prop_assert_eq!(g.total_mass(), 1.0);
        }
    }
}
