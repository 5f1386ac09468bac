//! Event streams: records, reversal, voxelization, simulation and file formats.

mod io;
mod simulate;
mod voxel;

pub use io::{read_events_csv, read_tensor_file, write_events_csv, write_tensor_file};
pub use simulate::{simulate_events, DEFAULT_THRESHOLD, LOG_EPS};
pub use voxel::{downsample_voxel, slice_segments, voxelize, EventSegmentStack, VoxelGrid, WEIGHT_BITS};

use crate::error::{Error, Result};

/// One brightness change: normalized time in `[0, 1]`, pixel column/row, polarity `±1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventRecord {
    pub t: f64,
    pub x: u32,
    pub y: u32,
    pub p: i8,
}

impl EventRecord {
    pub fn new(t: f64, x: u32, y: u32, p: i8) -> Self {
        Self { t, x, y, p }
    }

    fn check(&self, index: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::InvalidEvent { index, reason: format!("timestamp {} outside [0, 1]", self.t) });
        }
        if self.p != 1 && self.p != -1 {
            return Err(Error::InvalidEvent { index, reason: format!("polarity {} not in {{-1, 1}}", self.p) });
        }
        Ok(())
    }
}

/// Events ordered by timestamp.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventStream {
    records: Vec<EventRecord>,
}

impl EventStream {
    /// Validate and sort (stable, by timestamp) a set of records.
    ///
    /// Timestamps are snapped to the `2^-53` lattice (a shift of at most
    /// `2^-54`), on which `1 - t` is exact.
    pub fn new(mut records: Vec<EventRecord>) -> Result<Self> {
        for (i, r) in records.iter_mut().enumerate() {
            r.check(i)?;
            r.t = snap_time(r.t);
        }
        records.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Self { records })
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn polarity_sum(&self) -> i64 {
        self.records.iter().map(|r| r.p as i64).sum()
    }

    /// Time-reverse the stream: `(t, x, y, p) -> (1 - t, x, y, -p)`, re-sorted by time.
    ///
    /// Records sharing a timestamp keep their relative order, so reversing twice
    /// restores the original stream exactly.
    pub fn reversed(&self) -> Self {
        let mut out: Vec<EventRecord> = Vec::with_capacity(self.records.len());
        // Walk groups of equal timestamps from the end; each group keeps its internal order.
        let mut end = self.records.len();
        while end > 0 {
            let t = self.records[end - 1].t;
            let mut start = end - 1;
            while start > 0 && self.records[start - 1].t == t {
                start -= 1;
            }
            out.extend(self.records[start..end].iter().map(|r| EventRecord { t: reverse_time(r.t), p: -r.p, ..*r }));
            end = start;
        }
        Self { records: out }
    }
}

const TIME_LATTICE: f64 = (1u64 << 53) as f64;

fn snap_time(t: f64) -> f64 {
    (t * TIME_LATTICE).round() / TIME_LATTICE
}

/// `1 - t`; exact for lattice timestamps.
fn reverse_time(t: f64) -> f64 {
    1.0 - t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_event_reversal() {
        let s = EventStream::new(vec![EventRecord::new(0.25, 3, 3, 1)]).unwrap();
        assert_eq!(s.reversed().records(), &[EventRecord::new(0.75, 3, 3, -1)]);
    }

    #[test]
    fn invalid_records_report_their_index() {
        let bad = vec![EventRecord::new(0.1, 0, 0, 1), EventRecord::new(1.5, 0, 0, 1)];
        match EventStream::new(bad) {
            Err(Error::InvalidEvent { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        assert!(EventStream::new(vec![EventRecord::new(0.1, 0, 0, 0)]).is_err());
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        prop::collection::vec((0.0f64..=1.0, 0u32..16, 0u32..16, prop::bool::ANY), 0..200).prop_map(|v| {
            let recs = v.into_iter().map(|(t, x, y, p)| EventRecord::new(t, x, y, if p { 1 } else { -1 })).collect();
            EventStream::new(recs).unwrap()
        })
    }

    #[test]
    fn lattice_reversal_is_exact_for_decimal_inputs() {
        let s = EventStream::new(vec![EventRecord::new(0.1, 0, 0, 1), EventRecord::new(0.3, 1, 0, -1)]).unwrap();
        assert_eq!(s.reversed().reversed(), s);
        assert!((s.records()[0].t - 0.1).abs() <= 2f64.powi(-54));
    }

    proptest! {
        #[test]
        fn reversal_is_an_involution(s in arb_stream()) {
            let rr = s.reversed().reversed();
            prop_assert_eq!(rr.records().len(), s.records().len());
            for (a, b) in rr.records().iter().zip(s.records()) {
                prop_assert_eq!(a.t.to_bits(), b.t.to_bits());
                prop_assert_eq!((a.x, a.y, a.p), (b.x, b.y, b.p));
            }
        }

        #[test]
        fn reversal_keeps_order_and_negates_mass(s in arb_stream()) {
            let r = s.reversed();
            prop_assert!(r.records().windows(2).all(|w| w[0].t <= w[1].t));
            prop_assert_eq!(r.polarity_sum(), -s.polarity_sum());
        }
    }
}
