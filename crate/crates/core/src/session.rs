//! Event-level session simulation. Slots are generated in order and every
//! output is streamed to a [`SessionObserver`], so sessions of any length
//! run in constant memory. Detections reach the observer in arrival order.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::channel::{transmit_in_place, ChannelParams, EveObservation, EveSampler};
use crate::config::SessionConfig;
use crate::error::Result;
use crate::model::{AlicePreparation, Picos, PolarizationState, SlotClass};
use crate::profile::ProfileSet;
use crate::receiver::{
    detect_photon, jitter_distribution, sort_photon, time_tag, Detector, DetectorParams,
    ReceiverClock,
};
use crate::timeline::SessionTimeline;
use crate::transmitter::{TimingAdjustment, Transmitter, Wavepacket};

/// One click as the receiver records it, plus simulator-only ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DetectionRecord {
    pub detector: PolarizationState,
    pub raw_tag: u32,
    /// Click time on the transmitter clock.
    pub true_time_ps: Picos,
    /// Click time on the receiver clock.
    pub receiver_time_ps: Picos,
    /// Slot whose photon caused the click; `None` for dark and background counts.
    pub source_slot: Option<u64>,
}

pub trait SessionObserver {
    fn on_slot(&mut self, _prep: &AlicePreparation) -> Result<()> {
        Ok(())
    }
    fn on_eve(&mut self, _obs: &EveObservation) -> Result<()> {
        Ok(())
    }
    fn on_detection(&mut self, _det: &DetectionRecord) -> Result<()> {
        Ok(())
    }
    /// Eve sampling is skipped entirely when this returns false.
    fn wants_eve(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SessionSummary {
    pub total_slots: u64,
    pub class_counts: [u64; 7],
    pub photons_emitted: u64,
    pub photons_arrived: u64,
    pub detections: u64,
    pub photon_detections: u64,
    pub dark_detections: u64,
    pub suppressed_by_dead_time: u64,
    pub duration_s: f64,
    pub active_time_s: f64,
}

const STREAM_ALICE: u64 = 0;
const STREAM_EVE: u64 = 1;
const STREAM_DARK: u64 = 2;

pub struct SessionSimulator {
    config: SessionConfig,
    timeline: SessionTimeline,
    transmitter: Transmitter,
    eve: EveSampler,
    channel: ChannelParams,
    detector: DetectorParams,
    clock: ReceiverClock,
}

impl SessionSimulator {
    pub fn new(
        config: &SessionConfig,
        duration_s: f64,
        profiles: &ProfileSet,
        adjustments: &[(SlotClass, TimingAdjustment)],
    ) -> Result<Self> {
        config.validate()?;
        let timeline = SessionTimeline::new(duration_s, config)?;
        let transmitter = Transmitter::new(
            profiles,
            adjustments,
            config.timing_step_ps(),
            config.intensity_levels(),
            config.photon_statistics,
        )?;
        for class in SlotClass::ALL.into_iter().filter(|c| !c.is_vacuum()) {
            profiles.require(class)?;
        }
        let channel = ChannelParams::from_config(config);
        channel.validate()?;
        let detector = DetectorParams::from_config(config);
        detector.validate()?;
        Ok(Self {
            config: config.clone(),
            timeline,
            transmitter,
            eve: EveSampler::new(profiles, config.eve_axis)?,
            channel,
            detector,
            clock: ReceiverClock::from_config(config),
        })
    }

    pub fn timeline(&self) -> &SessionTimeline {
        &self.timeline
    }

    pub fn clock(&self) -> ReceiverClock {
        self.clock
    }

    pub fn run<O: SessionObserver + ?Sized>(
        &self,
        seed: u64,
        observer: &mut O,
    ) -> Result<SessionSummary> {
        let mut alice = ChaCha8Rng::seed_from_u64(seed);
        alice.set_stream(STREAM_ALICE);
        let mut eve_rng = ChaCha8Rng::seed_from_u64(seed);
        eve_rng.set_stream(STREAM_EVE);
        let mut dark_rng = ChaCha8Rng::seed_from_u64(seed);
        dark_rng.set_stream(STREAM_DARK);

        let want_eve = observer.wants_eve();
        let slot_ps = self.timeline.slot_period_ps;
        let duration = self.timeline.duration_ps;
        let thresholds = &self.config.selection_thresholds;
        let jitter = jitter_distribution(&self.detector);
        let tick = self.config.tagger_tick_ps();
        let bits = self.config.tagger_bits;

        let noise_rate = (self.detector.dark_rate_hz + self.channel.background_rate_hz) / 1e12;
        let noise = (noise_rate > 0.0).then(|| Exp::new(noise_rate).expect("positive rate"));
        let mut next_noise = [f64::INFINITY; 4];
        if let Some(exp) = &noise {
            for t in next_noise.iter_mut() {
                *t = exp.sample(&mut dark_rng);
            }
        }

        let mut detectors = [Detector::new(self.detector.dead_time_ps); 4];
        // (time, detector index, source slot + 1, 0 for noise)
        let mut pending: BinaryHeap<Reverse<(Picos, u8, u64)>> = BinaryHeap::new();
        let mut summary = SessionSummary {
            duration_s: duration as f64 / 1e12,
            active_time_s: self.timeline.active_time_ps() as f64 / 1e12,
            ..Default::default()
        };
        let mut wp = Wavepacket::default();

        let flush = |until: Picos,
                     pending: &mut BinaryHeap<Reverse<(Picos, u8, u64)>>,
                     detectors: &mut [Detector; 4],
                     summary: &mut SessionSummary,
                     observer: &mut O|
         -> Result<()> {
            while let Some(&Reverse((t, d, src))) = pending.peek() {
                if t >= until {
                    break;
                }
                pending.pop();
                if t < 0 || t >= duration {
                    continue;
                }
                if !detectors[d as usize].offer(t) {
                    summary.suppressed_by_dead_time += 1;
                    continue;
                }
                let local = self.clock.local_time(t);
                let rec = DetectionRecord {
                    detector: PolarizationState::ALL[d as usize],
                    raw_tag: time_tag(local, tick, bits),
                    true_time_ps: t,
                    receiver_time_ps: local,
                    source_slot: src.checked_sub(1),
                };
                summary.detections += 1;
                if src == 0 {
                    summary.dark_detections += 1;
                } else {
                    summary.photon_detections += 1;
                }
                observer.on_detection(&rec)?;
            }
            Ok(())
        };

        let push_noise = |until: Picos,
                          next: &mut [f64; 4],
                          pending: &mut BinaryHeap<Reverse<(Picos, u8, u64)>>,
                          rng: &mut ChaCha8Rng| {
            if let Some(exp) = &noise {
                for (d, t) in next.iter_mut().enumerate() {
                    while *t < until as f64 {
                        pending.push(Reverse((*t as Picos, d as u8, 0)));
                        *t += exp.sample(rng);
                    }
                }
            }
        };

        for iv in &self.timeline.intervals {
            for k in 0..iv.slots {
                let slot_index = iv.first_slot + k;
                let t0 = iv.start_ps + k as Picos * slot_ps;
                let class = thresholds.class_of(alice.random::<u8>());
                let prep = AlicePreparation { slot_index, class };
                summary.class_counts[class.code().0 as usize] += 1;
                observer.on_slot(&prep)?;
                if want_eve {
                    if let Some(obs) = self.eve.sample(&prep, &mut eve_rng)? {
                        observer.on_eve(&obs)?;
                    }
                }
                if !class.is_vacuum() {
                    self.transmitter.emit_into(&prep, t0, &mut alice, &mut wp)?;
                    summary.photons_emitted += wp.photons.len() as u64;
                    if !wp.photons.is_empty() {
                        transmit_in_place(&mut wp, &self.channel, &mut alice);
                        summary.photons_arrived += wp.photons.len() as u64;
                        for ph in &wp.photons {
                            let det = sort_photon(ph.polarization, &mut alice);
                            if let Some(tc) = detect_photon(
                                ph.time_ps,
                                &self.detector,
                                jitter.as_ref(),
                                &mut alice,
                            ) {
                                pending.push(Reverse((tc, det.index() as u8, slot_index + 1)));
                            }
                        }
                    }
                }
                push_noise(t0 + slot_ps, &mut next_noise, &mut pending, &mut dark_rng);
                flush(
                    t0 - slot_ps,
                    &mut pending,
                    &mut detectors,
                    &mut summary,
                    observer,
                )?;
            }
        }
        push_noise(duration, &mut next_noise, &mut pending, &mut dark_rng);
        flush(
            Picos::MAX,
            &mut pending,
            &mut detectors,
            &mut summary,
            observer,
        )?;
        summary.total_slots = self.timeline.total_slots();
        Ok(summary)
    }
}

/// Detection counts in fixed time bins (transmitter clock).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountRateTimeline {
    pub bin_s: f64,
    pub counts: Vec<u64>,
}

impl CountRateTimeline {
    pub fn new(duration_s: f64, bin_s: f64) -> Self {
        let n = (duration_s / bin_s).ceil() as usize;
        Self {
            bin_s,
            counts: vec![0; n.max(1)],
        }
    }

    pub fn record(&mut self, t_ps: Picos) {
        let i = (t_ps as f64 / 1e12 / self.bin_s) as usize;
        if let Some(c) = self.counts.get_mut(i) {
            *c += 1;
        }
    }

    pub fn rates_hz(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.bin_s).collect()
    }

    /// Maximal runs of bins whose rate is below `fraction` of the median.
    pub fn drops(&self, fraction: f64) -> Vec<(f64, f64)> {
        let mut sorted = self.counts.clone();
        sorted.sort_unstable();
        let median = sorted[sorted.len() / 2] as f64;
        let mut out = Vec::new();
        let mut start = None;
        for (i, &c) in self.counts.iter().enumerate() {
            let low = (c as f64) < fraction * median;
            match (low, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    out.push((s as f64 * self.bin_s, i as f64 * self.bin_s));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s as f64 * self.bin_s, self.counts.len() as f64 * self.bin_s));
        }
        out
    }
}

/// Keeps every event in memory. Intended for short sessions.
#[derive(Debug, Default, Clone)]
pub struct SessionLog {
    pub preparations: Vec<AlicePreparation>,
    pub eve: Vec<EveObservation>,
    pub detections: Vec<DetectionRecord>,
    pub record_eve: bool,
}

impl SessionLog {
    pub fn with_eve() -> Self {
        Self {
            record_eve: true,
            ..Default::default()
        }
    }
}

impl SessionObserver for SessionLog {
    fn on_slot(&mut self, prep: &AlicePreparation) -> Result<()> {
        self.preparations.push(*prep);
        Ok(())
    }
    fn on_eve(&mut self, obs: &EveObservation) -> Result<()> {
        self.eve.push(*obs);
        Ok(())
    }
    fn on_detection(&mut self, det: &DetectionRecord) -> Result<()> {
        self.detections.push(*det);
        Ok(())
    }
    fn wants_eve(&self) -> bool {
        self.record_eve
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(config: &mut SessionConfig) {
        config.dark_rate_hz = 0.0;
        config.background_rate_hz = 0.0;
    }

    fn run(config: &SessionConfig, duration: f64, seed: u64) -> (SessionLog, SessionSummary) {
        let profiles = ProfileSet::synthetic(1e6, 1e6);
        let sim = SessionSimulator::new(config, duration, &profiles, &[]).unwrap();
        let mut log = SessionLog::with_eve();
        let s = sim.run(seed, &mut log).unwrap();
        (log, s)
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SessionConfig::default();
        let (a, _) = run(&cfg, 0.002, 7);
        let (b, _) = run(&cfg, 0.002, 7);
        let (c, _) = run(&cfg, 0.002, 8);
        assert_eq!(a.preparations, b.preparations);
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.eve, b.eve);
        assert_ne!(a.detections, c.detections);
    }

    #[test]
    fn detections_in_arrival_order_within_session() {
        let cfg = SessionConfig::default();
        let (log, s) = run(&cfg, 0.004, 1);
        assert_eq!(s.total_slots, 50_000);
        assert_eq!(log.preparations.len(), 50_000);
        assert!(!log.detections.is_empty());
        for w in log.detections.windows(2) {
            assert!(w[0].true_time_ps <= w[1].true_time_ps);
        }
        assert!(log
            .detections
            .iter()
            .all(|d| d.true_time_ps >= 0 && d.true_time_ps < 4_000_000_000));
        let vacuum_eve = log
            .eve
            .iter()
            .filter(|o| log.preparations[o.slot_index as usize].class.is_vacuum())
            .count();
        assert_eq!(vacuum_eve, 0);
    }

    #[test]
    fn noiseless_has_no_basis_errors() {
        let mut cfg = SessionConfig::default();
        quiet(&mut cfg);
        cfg.channel_transmissivity = 1.0;
        let (log, _) = run(&cfg, 0.002, 3);
        for d in &log.detections {
            let slot = d.source_slot.expect("no noise configured");
            let sent = log.preparations[slot as usize].class.state().unwrap();
            if sent.basis() == d.detector.basis() {
                assert_eq!(sent, d.detector);
            }
        }
    }

    #[test]
    fn multi_photon_clicks_on_several_detectors_are_kept() {
        let mut cfg = SessionConfig::default();
        quiet(&mut cfg);
        cfg.channel_transmissivity = 1.0;
        cfg.detector_efficiency = 1.0;
        cfg.signal_mean_photon_number = 4.0;
        let (log, _) = run(&cfg, 0.001, 4);
        let mut by_slot = std::collections::HashMap::<u64, Vec<PolarizationState>>::new();
        for d in &log.detections {
            by_slot
                .entry(d.source_slot.unwrap())
                .or_default()
                .push(d.detector);
        }
        assert!(by_slot
            .values()
            .any(|v| v.len() >= 2 && v.iter().any(|d| *d != v[0])));
    }

    #[test]
    fn clock_offset_shifts_receiver_time() {
        let mut cfg = SessionConfig::default();
        cfg.receiver_clock_offset_s = 1.5;
        cfg.receiver_clock_drift_ppm = 5.0;
        let (log, _) = run(&cfg, 0.001, 2);
        for d in &log.detections {
            let expect = d.true_time_ps
                + (d.true_time_ps as f64 * 5e-6).round() as Picos
                + 1_500_000_000_000;
            assert_eq!(d.receiver_time_ps, expect);
            assert_eq!(d.raw_tag, time_tag(expect, 10_000, 30));
        }
    }

    #[test]
    fn dark_counts_only_with_zero_transmissivity() {
        let mut cfg = SessionConfig::default();
        cfg.channel_transmissivity = 0.0;
        cfg.dark_rate_hz = 1e5;
        let (log, s) = run(&cfg, 0.01, 5);
        assert_eq!(s.photon_detections, 0);
        // 4 detectors * 1e5/s * 0.01 s = 4000 expected
        let n = log.detections.len() as f64;
        assert!((n - 4000.0).abs() < 4.0 * 4000f64.sqrt(), "{n}");
    }

    #[test]
    fn rate_timeline_drops() {
        let mut t = CountRateTimeline::new(1.0, 0.1);
        for i in 0..10 {
            if i != 4 {
                for _ in 0..100 {
                    t.record(i * 100_000_000_000 + 1);
                }
            }
        }
        assert_eq!(t.drops(0.5), vec![(0.4, 0.5)]);
        assert_eq!(t.rates_hz()[0], 1000.0);
    }

    #[test]
    fn class_frequencies_follow_thresholds() {
        let mut cfg = SessionConfig::default();
        cfg.channel_transmissivity = 0.0;
        quiet(&mut cfg);
        let profiles = ProfileSet::synthetic(1e6, 1e6);
        let sim = SessionSimulator::new(&cfg, 0.08, &profiles, &[]).unwrap();
        struct Nothing;
        impl SessionObserver for Nothing {
            fn wants_eve(&self) -> bool {
                false
            }
        }
        let s = sim.run(11, &mut Nothing).unwrap();
        let n = s.total_slots as f64;
        assert_eq!(n, 1e6);
        let widths = cfg.selection_thresholds.widths();
        for (c, w) in s.class_counts.iter().zip(widths) {
            let p = w as f64 / 256.0;
            assert!((*c as f64 - n * p).abs() < 3.0 * (n * p * (1.0 - p)).sqrt());
        }
    }
}
