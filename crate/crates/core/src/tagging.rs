//! Reconstruction of absolute receiver time from rolled-over counter values.

use serde::Serialize;

use crate::model::Picos;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnwrapResult {
    /// Receiver-clock times in picoseconds; the first tag of each segment
    /// is taken to lie in the first counter period.
    pub times_ps: Vec<Picos>,
    /// Start indices of segments; a new segment begins after an ambiguous gap.
    pub segment_starts: Vec<usize>,
}

impl UnwrapResult {
    pub fn segments(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let n = self.times_ps.len();
        self.segment_starts.iter().enumerate().map(move |(i, &s)| {
            let e = self.segment_starts.get(i + 1).copied().unwrap_or(n);
            s..e
        })
    }

    pub fn ambiguous_gaps(&self) -> usize {
        self.segment_starts.len().saturating_sub(1)
    }
}

/// Unwraps tags given in arrival order. Each decrease of the raw counter
/// adds one period. A step longer than `ambiguity_ps` cannot be told apart
/// from the same step plus whole periods, so it is flagged and starts a
/// new segment.
pub fn unwrap_tags(tags: &[u32], tick_ps: Picos, bits: u32, ambiguity_ps: Picos) -> UnwrapResult {
    let modulus = 1i64 << bits;
    let mut times = Vec::with_capacity(tags.len());
    let mut segment_starts = Vec::new();
    let Some(&first) = tags.first() else {
        return UnwrapResult {
            times_ps: times,
            segment_starts,
        };
    };
    segment_starts.push(0);
    let mut ticks = first as i64;
    times.push(ticks * tick_ps);
    let mut prev = first as i64;
    for (i, &tag) in tags.iter().enumerate().skip(1) {
        let delta = (tag as i64 - prev).rem_euclid(modulus);
        if delta * tick_ps > ambiguity_ps {
            segment_starts.push(i);
        }
        ticks += delta;
        times.push(ticks * tick_ps);
        prev = tag as i64;
    }
    UnwrapResult {
        times_ps: times,
        segment_starts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::receiver::time_tag;
    use proptest::prelude::*;

    const TICK: Picos = 10_000;
    const HALF: Picos = (TICK << 30) / 2;

    #[test]
    fn simple_sequence() {
        let r = unwrap_tags(&[100, 200, 300], TICK, 30, HALF);
        assert_eq!(r.times_ps, vec![1_000_000, 2_000_000, 3_000_000]);
        assert_eq!(r.ambiguous_gaps(), 0);
    }

    #[test]
    fn single_rollover() {
        let r = unwrap_tags(&[(1 << 30) - 1, 5], TICK, 30, HALF);
        assert_eq!(r.times_ps[1], ((1i64 << 30) + 5) * TICK);
    }

    #[test]
    fn long_gap_is_flagged() {
        // 0.6 periods between two events
        let t2 = ((1u64 << 30) as f64 * 0.6) as u32;
        let r = unwrap_tags(&[0, 10, t2], TICK, 30, HALF);
        assert_eq!(r.segment_starts, vec![0, 2]);
        assert_eq!(r.segments().collect::<Vec<_>>(), vec![0..2, 2..3]);
    }

    #[test]
    fn empty_input() {
        let r = unwrap_tags(&[], TICK, 30, HALF);
        assert!(r.times_ps.is_empty());
        assert_eq!(r.segments().count(), 0);
    }

    proptest! {
        #[test]
        fn unwrap_inverts_tagging(
            start in 0i64..(TICK << 30),
            gaps in proptest::collection::vec(0i64..(HALF - TICK), 1..200),
        ) {
            let mut truth = vec![start];
            for g in gaps {
                truth.push(truth.last().unwrap() + g);
            }
            let tags: Vec<u32> = truth.iter().map(|&t| time_tag(t, TICK, 30)).collect();
            let r = unwrap_tags(&tags, TICK, 30, HALF);
            prop_assert_eq!(r.ambiguous_gaps(), 0);
            for (u, t) in r.times_ps.iter().zip(&truth) {
                // one tick of quantization, anchored on the first event
                let expect = t - start + (start / TICK) * TICK;
                prop_assert!((u - expect).abs() < TICK);
            }
            for w in r.times_ps.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }
}
