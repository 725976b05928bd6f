//! Sync-write building blocks: page-boundary segmentation and the
//! active-sync predictor.

use crate::layout::MAX_IP_PAYLOAD;
use crate::PAGE_SIZE;

const PS: u64 = PAGE_SIZE as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Ip,
    Oop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub file_offset: u64,
    pub len: u64,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn page(&self) -> u64 {
        self.file_offset / PS
    }
}

/// Splits `[offset, offset+len)` at page boundaries. Aligned full pages
/// become OOP segments, everything else IP.
pub fn segment(offset: u64, len: u64) -> Vec<Segment> {
    let mut out = Vec::new();
    let end = offset + len;
    let mut pos = offset;
    while pos < end {
        let n = (PS - pos % PS).min(end - pos);
        let kind = if pos % PS == 0 && n == PS { SegmentKind::Oop } else { SegmentKind::Ip };
        out.push(Segment { file_offset: pos, len: n, kind });
        pos += n;
    }
    out
}

/// Like [`segment`], but IP segments longer than one entry can carry are
/// split in two with consecutive offsets.
pub fn log_segments(offset: u64, len: u64) -> Vec<Segment> {
    let mut out = Vec::new();
    for s in segment(offset, len) {
        if s.kind == SegmentKind::Ip && s.len as usize > MAX_IP_PAYLOAD {
            let first = MAX_IP_PAYLOAD as u64;
            out.push(Segment { len: first, ..s });
            out.push(Segment { file_offset: s.file_offset + first, len: s.len - first, kind: SegmentKind::Ip });
        } else {
            out.push(s);
        }
    }
    out
}

/// Payload bytes a single O_SYNC write of `len` at `offset` logs:
/// unaligned parts byte-exact, aligned full pages as whole pages.
pub fn expected_payload(offset: u64, len: u64) -> u64 {
    segment(offset, len).iter().map(|s| s.len).sum()
}

/// The two counters of the active-sync predictor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActiveSyncState {
    pub should_active_cnt: u32,
    pub should_deact_cnt: u32,
}

impl ActiveSyncState {
    /// Called on each sync with the counters accumulated since the previous
    /// one. May set `o_sync`.
    pub fn mark_sync(&mut self, o_sync: &mut bool, written_bytes: u64, dirty_pages: u64, sensitivity: u32) {
        if written_bytes < dirty_pages * PS {
            self.should_active_cnt += 1;
            if self.should_active_cnt >= sensitivity {
                *o_sync = true;
                self.should_deact_cnt = 0;
            }
        }
    }

    /// Called on each write. May clear `o_sync`.
    pub fn clear_sync(&mut self, o_sync: &mut bool, written_bytes: u64, dirty_pages: u64, sensitivity: u32) {
        if written_bytes >= dirty_pages * PS {
            self.should_deact_cnt += 1;
            if self.should_deact_cnt >= sensitivity {
                *o_sync = false;
                self.should_active_cnt = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(file_offset: u64, len: u64, kind: SegmentKind) -> Segment {
        Segment { file_offset, len, kind }
    }

    #[test]
    fn aligned_page() {
        assert_eq!(segment(0, 4096), vec![seg(0, 4096, SegmentKind::Oop)]);
    }

    #[test]
    fn straddling_write() {
        assert_eq!(
            segment(100, 8192),
            vec![seg(100, 3996, SegmentKind::Ip), seg(4096, 4096, SegmentKind::Oop), seg(8192, 100, SegmentKind::Ip)]
        );
    }

    #[test]
    fn n_minus_one_boundaries_give_n_segments() {
        for n in 1..6u64 {
            assert_eq!(segment(10, (n - 1) * 4096 + 1).len() as u64, n);
        }
    }

    #[test]
    fn oversized_ip_is_split() {
        let s = log_segments(50, 4046);
        assert_eq!(s, vec![seg(50, 4000, SegmentKind::Ip), seg(4050, 46, SegmentKind::Ip)]);
        assert_eq!(log_segments(0, 4001).len(), 2);
        assert_eq!(log_segments(0, 4000).len(), 1);
    }

    #[test]
    fn small_write_over_two_pages_flips_at_sensitivity_one() {
        // 110 bytes dirtying 2 pages flips O_SYNC at sensitivity 1
        let mut st = ActiveSyncState::default();
        let mut flag = false;
        st.mark_sync(&mut flag, 110, 2, 1);
        assert!(flag);
    }

    #[test]
    fn full_page_sync_is_not_qualifying() {
        let mut st = ActiveSyncState::default();
        let mut flag = false;
        st.mark_sync(&mut flag, 8192, 2, 1);
        assert!(!flag);
        assert_eq!(st, ActiveSyncState::default());
    }

    #[test]
    fn sensitivity_two_needs_two_syncs() {
        let mut st = ActiveSyncState::default();
        let mut flag = false;
        st.mark_sync(&mut flag, 110, 2, 2);
        assert!(!flag);
        st.mark_sync(&mut flag, 110, 2, 2);
        assert!(flag);
    }

    #[test]
    fn clear_is_the_mirror() {
        let mut st = ActiveSyncState { should_active_cnt: 5, should_deact_cnt: 0 };
        let mut flag = true;
        st.clear_sync(&mut flag, 4096, 1, 2);
        assert!(flag);
        st.clear_sync(&mut flag, 4096, 1, 2);
        assert!(!flag);
        assert_eq!(st.should_active_cnt, 0);
    }

    proptest! {
        #[test]
        fn segments_tile_the_range(offset in 0u64..1 << 20, len in 1u64..40_000) {
            let segs = log_segments(offset, len);
            let mut pos = offset;
            for s in &segs {
                prop_assert_eq!(s.file_offset, pos);
                prop_assert!(s.len > 0);
                prop_assert_eq!(s.file_offset / PS, (s.file_offset + s.len - 1) / PS);
                prop_assert_eq!(s.kind == SegmentKind::Oop, s.file_offset % PS == 0 && s.len == PS);
                if s.kind == SegmentKind::Ip { prop_assert!(s.len as usize <= MAX_IP_PAYLOAD); }
                pos += s.len;
            }
            prop_assert_eq!(pos, offset + len);
        }

        #[test]
        fn sensitivity_consecutive_syncs_force_on(a in 0u32..10, d in 0u32..10, sens in 1u32..6, start: bool) {
            let mut st = ActiveSyncState { should_active_cnt: a, should_deact_cnt: d };
            let mut flag = start;
            for _ in 0..sens { st.mark_sync(&mut flag, 1, 1, sens); }
            prop_assert!(flag);
            for _ in 0..sens { st.clear_sync(&mut flag, 4096, 1, sens); }
            prop_assert!(!flag);
        }
    }
}
