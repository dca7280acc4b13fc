//! Receiver-side pipeline: unwrap tags, recover the clock per segment, pair,
//! sift, and compute QBER, decoy statistics and the raw key.

use serde::Serialize;

use crate::config::SessionConfig;
use crate::error::{Error, Result};
use crate::model::{Announcement, IntensityClass, PolarizationState, SlotClass};
use crate::sifting::{
    compute_qber, decoy_statistics, key_bits, pair_detections, sift, DecoyStatistics,
    PairedDetection, PairingSummary, QberReport,
};
use crate::sync::{recover_clock_offset, SyncDetection, SyncParams, SyncResult};
use crate::tagging::unwrap_tags;
use crate::timeline::SessionTimeline;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentReport {
    pub first_detection: usize,
    pub detections: usize,
    pub sync: SyncResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SiftCounts {
    pub key_records: u64,
    pub parameter_estimation_records: u64,
    pub background_records: u64,
    pub discarded: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KeySummary {
    pub key_bits: u64,
    /// Signal LR slots with clicks on both L and R; no bit is kept.
    pub double_clicks: u64,
    /// Key bits per active second.
    pub raw_key_rate_bps: f64,
    /// All basis-matched records (key and parameter estimation).
    pub sifted_events: u64,
    pub sifted_rate_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PostprocessReport {
    pub accepted: bool,
    pub segments: Vec<SegmentReport>,
    pub ambiguous_gaps: usize,
    pub total_slots: u64,
    pub active_time_s: f64,
    pub pairing: PairingSummary,
    pub sifting: Option<SiftCounts>,
    /// All non-vacuum intensities.
    pub qber: Option<QberReport>,
    pub qber_signal: Option<QberReport>,
    pub decoy: Option<DecoyStatistics>,
    pub key: Option<KeySummary>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOutput {
    pub report: PostprocessReport,
    pub key: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOptions {
    pub sync: SyncParams,
    pub tick_ps: i64,
    pub tagger_bits: u32,
    pub mean_arrival_ps: f64,
    /// Half-width of the arrival gate around the expected arrival time.
    pub gate_ps: f64,
    pub photon_statistics: crate::config::PhotonStatistics,
}

impl PostprocessOptions {
    pub fn from_config(config: &SessionConfig, mean_arrival_ps: f64) -> Self {
        Self {
            sync: SyncParams::from_config(config, mean_arrival_ps),
            tick_ps: config.tagger_tick_ps(),
            tagger_bits: config.tagger_bits,
            mean_arrival_ps,
            gate_ps: config.optical_pulse_width_s * 1e12,
            photon_statistics: config.photon_statistics,
        }
    }
}

/// `classes` is the transmitter's private preparation log, `announcements`
/// the public basis/intensity list, both indexed by slot. `detections` are
/// `(detector, raw_tag)` in arrival order.
pub fn postprocess(
    classes: &[SlotClass],
    announcements: &[Announcement],
    detections: &[(PolarizationState, u32)],
    timeline: &SessionTimeline,
    opts: &PostprocessOptions,
) -> Result<PostprocessOutput> {
    let slots = timeline.total_slots();
    if classes.len() as u64 != slots || announcements.len() as u64 != slots {
        return Err(Error::InsufficientData(format!(
            "session has {slots} slots but {} preparations and {} announcements",
            classes.len(),
            announcements.len()
        )));
    }
    let tags: Vec<u32> = detections.iter().map(|d| d.1).collect();
    let unwrapped = unwrap_tags(
        &tags,
        opts.tick_ps,
        opts.tagger_bits,
        opts.sync.rollover_ps / 2,
    );
    // A tag truncates the click time; the tick centre is the unbiased estimate.
    let half_tick = opts.tick_ps / 2;
    let all: Vec<SyncDetection> = unwrapped
        .times_ps
        .iter()
        .zip(detections)
        .map(|(&t, d)| SyncDetection {
            time_ps: t + half_tick,
            detector: d.0,
        })
        .collect();

    let mut segments = Vec::new();
    let mut paired: Vec<PairedDetection> = Vec::new();
    let mut pairing = PairingSummary::default();
    let mut notes = Vec::new();
    for range in unwrapped.segments() {
        let dets = &all[range.clone()];
        let sync = recover_clock_offset(announcements, timeline, dets, &opts.sync);
        if sync.accepted {
            let (p, s) = pair_detections(&sync, timeline, dets, opts.mean_arrival_ps, opts.gate_ps);
            paired.extend(p);
            pairing.paired += s.paired;
            pairing.unpaired += s.unpaired;
        } else {
            pairing.unpaired += dets.len() as u64;
            notes.push(format!(
                "segment starting at detection {} discarded: {}",
                range.start,
                sync.reason.clone().unwrap_or_default()
            ));
        }
        segments.push(SegmentReport {
            first_detection: range.start,
            detections: range.len(),
            sync,
        });
    }
    if segments.is_empty() {
        notes.push("no detections".into());
    }
    pairing.detections = detections.len() as u64;
    let accepted = segments.iter().any(|s| s.sync.accepted);
    let active_time_s = timeline.active_time_ps() as f64 / 1e12;

    let mut report = PostprocessReport {
        accepted,
        segments,
        ambiguous_gaps: unwrapped.ambiguous_gaps(),
        total_slots: slots,
        active_time_s,
        pairing,
        sifting: None,
        qber: None,
        qber_signal: None,
        decoy: None,
        key: None,
        notes,
    };
    if !accepted {
        return Ok(PostprocessOutput {
            report,
            key: Vec::new(),
        });
    }

    paired.sort_by_key(|p| p.slot_index);
    let sifted = sift(&paired, classes)?;
    let matched = || sifted.key.iter().chain(&sifted.parameter_estimation);
    report.sifting = Some(SiftCounts {
        key_records: sifted.key.len() as u64,
        parameter_estimation_records: sifted.parameter_estimation.len() as u64,
        background_records: sifted.background.len() as u64,
        discarded: sifted.discarded,
    });
    report.qber = Some(compute_qber(matched()));
    report.qber_signal = Some(compute_qber(
        matched().filter(|r| r.intensity == IntensityClass::Signal),
    ));
    let sifted_slots: Vec<u64> = matched().map(|r| r.slot_index).collect();
    match decoy_statistics(
        &paired,
        &sifted_slots,
        announcements,
        &opts.sync.levels,
        opts.photon_statistics,
    ) {
        Ok(d) => report.decoy = Some(d),
        Err(e) => report
            .notes
            .push(format!("decoy statistics unavailable: {e}")),
    }
    let (bits, doubles) = key_bits(&sifted.key);
    let sifted_events = sifted_slots.len() as u64;
    let rate = |n: u64| {
        if active_time_s > 0.0 {
            n as f64 / active_time_s
        } else {
            0.0
        }
    };
    report.key = Some(KeySummary {
        key_bits: bits.len() as u64,
        double_clicks: doubles,
        raw_key_rate_bps: rate(bits.len() as u64),
        sifted_events,
        sifted_rate_bps: rate(sifted_events),
    });
    Ok(PostprocessOutput { report, key: bits })
}
