//! Receiver-transmitter clock recovery from public announcements.
//!
//! The receiver clock runs as `b = t (1 + d) + o`. Recovery proceeds in
//! three steps:
//!
//! 1. Click times are periodic in the slot period. A hierarchical
//!    periodogram search over the drift `d` (span growing by 10x per stage)
//!    yields `d` and the offset modulo one slot.
//! 2. The whole-slot shift is found by a coarse-to-fine beam search.
//!    Coarse levels score binned detection counts against the binned
//!    expected click weight of the announced intensities.
//! 3. At slot level each detection is scored with the log ratio of its
//!    expected rate given the announced slot class and detector to the
//!    mean rate. The posterior includes a null hypothesis with score 0
//!    (detections unrelated to the announcements), so announcement data
//!    that does not match the detections is rejected.
//!
//! Confidence is the posterior mass within one slot of the best shift.

use serde::Serialize;

use crate::config::SessionConfig;
use crate::model::{Announcement, IntensityLevels, Picos, PolarizationState};
use crate::timeline::SessionTimeline;

/// A detection on the unwrapped receiver clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncDetection {
    pub time_ps: Picos,
    pub detector: PolarizationState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncParams {
    pub slot_period_ps: Picos,
    pub rollover_ps: Picos,
    pub timing_step_ps: Picos,
    pub prior_min_ps: Picos,
    pub prior_max_ps: Picos,
    pub max_drift: f64,
    pub min_detections: usize,
    pub max_detections: usize,
    pub background_fraction: f64,
    pub confidence_threshold: f64,
    /// Expected arrival time of a photon after its slot start, transmitter clock.
    pub mean_arrival_ps: f64,
    pub levels: IntensityLevels,
}

impl SyncParams {
    pub fn from_config(config: &SessionConfig, mean_arrival_ps: f64) -> Self {
        Self {
            slot_period_ps: config.slot_period_ps(),
            rollover_ps: config.rollover_ps(),
            timing_step_ps: config.timing_step_ps(),
            prior_min_ps: crate::model::seconds_to_picos(config.sync_prior_min_s),
            prior_max_ps: crate::model::seconds_to_picos(config.sync_prior_max_s),
            max_drift: 50e-6,
            min_detections: config.sync_min_detections,
            max_detections: config.sync_max_detections,
            background_fraction: config.sync_background_fraction,
            confidence_threshold: config.sync_confidence_threshold,
            mean_arrival_ps,
            levels: config.intensity_levels(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncResult {
    /// Receiver clock reading at transmitter time zero, on the timing-step grid.
    pub offset_ps: Picos,
    pub offset_s: f64,
    pub drift: f64,
    pub confidence: f64,
    pub accepted: bool,
    pub null_probability: f64,
    pub detections_used: usize,
    pub log_likelihood: f64,
    pub reason: Option<String>,
    /// Offset in the unwrapped frame, divided by `1 + drift`.
    #[serde(skip)]
    frame_offset_ps: f64,
}

impl SyncResult {
    fn rejected(reason: impl Into<String>, detections_used: usize) -> Self {
        Self {
            offset_ps: 0,
            offset_s: 0.0,
            drift: 0.0,
            confidence: 0.0,
            accepted: false,
            null_probability: 1.0,
            detections_used,
            log_likelihood: 0.0,
            reason: Some(reason.into()),
            frame_offset_ps: 0.0,
        }
    }

    /// Transmitter-clock time of an unwrapped receiver time.
    pub fn transmitter_time(&self, unwrapped_ps: Picos) -> f64 {
        unwrapped_ps as f64 / (1.0 + self.drift) - self.frame_offset_ps
    }
}

/// Slot classes on the transmitter's time grid (halts included).
struct Schedule<'a> {
    classes: &'a [u8],
    /// (first grid index, first slot, slots) per active interval
    intervals: Vec<(i64, u64, u64)>,
    grid_len: i64,
}

const NO_SLOT: usize = Announcement::COUNT;

/// Envelope log-likelihood margin below the best block that is still searched.
const ENVELOPE_MARGIN: f64 = 50.0;
const MAX_KEPT_BLOCKS: usize = 256;
/// Largest set of shifts scored directly by FFT correlation.
const FFT_MAX_WINDOW: i64 = 1 << 21;
/// Detections (contiguous, from the start) used for the FFT stage.
const FFT_CHUNK_DETECTIONS: usize = 20_000;
const FFT_CHUNK_SPAN: i64 = 1 << 20;
/// Shifts passed from the FFT stage to exact scoring.
const FFT_TOP: usize = 64;

impl<'a> Schedule<'a> {
    fn new(classes: &'a [u8], timeline: &SessionTimeline) -> Self {
        let t = timeline.slot_period_ps;
        Self {
            classes,
            intervals: timeline
                .intervals
                .iter()
                .map(|iv| (iv.start_ps / t, iv.first_slot, iv.slots))
                .collect(),
            grid_len: timeline.duration_ps.div_euclid(t) + 1,
        }
    }

    fn slot_of_grid(&self, g: i64) -> Option<u64> {
        let i = self.intervals.partition_point(|iv| iv.0 <= g);
        if i == 0 {
            return None;
        }
        let (start, first, n) = self.intervals[i - 1];
        let k = (g - start) as u64;
        (k < n && ((first + k) as usize) < self.classes.len()).then_some(first + k)
    }

    fn class_of_grid(&self, g: i64) -> usize {
        self.slot_of_grid(g)
            .map_or(NO_SLOT, |s| self.classes[s as usize] as usize)
    }
}

/// Expected relative click rate per (announced class, detector).
fn rate_table(levels: &IntensityLevels) -> [[f64; 4]; Announcement::COUNT + 1] {
    use PolarizationState::*;
    let mut lam = [[0.0; 4]; Announcement::COUNT + 1];
    // LR preparation, averaged over R and L: every detector sees a quarter.
    let lr = [0.25; 4];
    let mut hv = [0.0; 4];
    hv[H.index()] = 0.5;
    hv[L.index()] = 0.25;
    hv[R.index()] = 0.25;
    for (idx, share, mu) in [
        (0, lr, levels.signal),
        (1, hv, levels.signal),
        (2, lr, levels.decoy),
        (3, hv, levels.decoy),
    ] {
        for d in 0..4 {
            lam[idx][d] = mu * share[d];
        }
    }
    lam
}

fn class_frequencies(classes: &[u8]) -> [f64; Announcement::COUNT + 1] {
    let mut f = [0.0; Announcement::COUNT + 1];
    for &c in classes {
        f[c as usize] += 1.0;
    }
    let n = classes.len().max(1) as f64;
    f.iter_mut().for_each(|x| *x /= n);
    f
}

struct Scorer {
    /// log-weight per (class, detector)
    w: [[f64; 4]; Announcement::COUNT + 1],
    /// envelope weight per class and floor
    env: [f64; Announcement::COUNT + 1],
    env_floor: f64,
}

impl Scorer {
    fn new(classes: &[u8], levels: &IntensityLevels, background_fraction: f64) -> Self {
        let lam = rate_table(levels);
        let freq = class_frequencies(classes);
        let mut w = [[0.0; 4]; Announcement::COUNT + 1];
        for d in 0..4 {
            let mean: f64 = (0..Announcement::COUNT).map(|c| freq[c] * lam[c][d]).sum();
            let floor = background_fraction * mean.max(1e-300);
            for c in 0..=Announcement::COUNT {
                w[c][d] = ((lam[c][d] + floor) / (mean + floor)).ln();
            }
        }
        let mut env = [0.0; Announcement::COUNT + 1];
        for c in 0..Announcement::COUNT {
            env[c] = lam[c].iter().sum();
        }
        let mean_env: f64 = (0..Announcement::COUNT).map(|c| freq[c] * env[c]).sum();
        Self {
            w,
            env,
            env_floor: background_fraction * mean_env.max(1e-300),
        }
    }

    fn slot_score(&self, sched: &Schedule, grid: &[i64], det: &[u8], m: i64) -> f64 {
        grid.iter()
            .zip(det)
            .map(|(&n, &d)| self.w[sched.class_of_grid(n - m)][d as usize])
            .sum()
    }
}

fn periodogram(xs: &[f64], period: f64) -> (f64, f64) {
    let k = std::f64::consts::TAU / period;
    xs.iter().fold((0.0, 0.0), |(re, im), &x| {
        let (s, c) = (k * x).sin_cos();
        (re + c, im + s)
    })
}

fn stride_sample<T: Copy>(v: &[T], cap: usize) -> Vec<T> {
    if v.len() <= cap {
        return v.to_vec();
    }
    let step = v.len() as f64 / cap as f64;
    (0..cap).map(|i| v[(i as f64 * step) as usize]).collect()
}

/// Drift and receiver-frame phase from click periodicity. Returns the drift
/// and `c0`, the value modulo the slot period that `b / (1 + d)` takes at
/// the pulse arrivals.
fn drift_and_phase(times: &[Picos], t_slot: f64, max_drift: f64) -> (f64, f64) {
    let b0 = times[0];
    let xs_all: Vec<f64> = times.iter().map(|&b| (b - b0) as f64).collect();
    let span = *xs_all.last().unwrap();
    let (mut lo, mut hi) = (-max_drift, max_drift);
    let mut len = t_slot / (8.0 * max_drift);
    let mut best = 0.0;
    let mut best_xs;
    loop {
        let end = xs_all.partition_point(|&x| x < len);
        best_xs = stride_sample(&xs_all[..end.max(2).min(xs_all.len())], 20_000);
        let step = t_slot / (8.0 * len.min(span).max(t_slot));
        if hi - lo > step {
            let n = ((hi - lo) / step).ceil() as usize;
            let mut best_z = -1.0;
            for i in 0..=n {
                let d = lo + (hi - lo) * i as f64 / n as f64;
                let (re, im) = periodogram(&best_xs, t_slot * (1.0 + d));
                let z = re * re + im * im;
                if z > best_z {
                    best_z = z;
                    best = d;
                }
            }
            lo = best - 2.0 * step;
            hi = best + 2.0 * step;
        } else {
            best = 0.5 * (lo + hi);
        }
        if len >= span {
            break;
        }
        len *= 10.0;
    }
    // Golden-section polish on the final bracket.
    let z = |d: f64| {
        let (re, im) = periodogram(&best_xs, t_slot * (1.0 + d));
        re * re + im * im
    };
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let (mut c, mut e) = (b - gr * (b - a), a + gr * (b - a));
    let (mut zc, mut ze) = (z(c), z(e));
    for _ in 0..40 {
        if zc > ze {
            b = e;
            e = c;
            ze = zc;
            c = b - gr * (b - a);
            zc = z(c);
        } else {
            a = c;
            c = e;
            zc = ze;
            e = a + gr * (b - a);
            ze = z(e);
        }
    }
    let d = if zc.max(ze) >= z(best) {
        0.5 * (a + b)
    } else {
        best
    };
    let (re, im) = periodogram(&best_xs, t_slot * (1.0 + d));
    let theta = im.atan2(re);
    let c0 = (b0 as f64 / (1.0 + d) + theta / std::f64::consts::TAU * t_slot).rem_euclid(t_slot);
    (d, c0)
}

/// `ln(mean weight + floor)` for every grid block `[a res, (a + 1) res)`.
fn block_log_means(
    sched: &Schedule,
    weights: &[f64; Announcement::COUNT + 1],
    res: i64,
    floor: f64,
) -> Vec<f32> {
    let n_blocks = sched.grid_len.div_euclid(res) as usize + 1;
    let mut sums = vec![0.0f64; n_blocks];
    for &(start, first, n) in &sched.intervals {
        let end = (first + n).min(sched.classes.len() as u64);
        for (k, &c) in sched.classes[first as usize..end as usize]
            .iter()
            .enumerate()
        {
            let g = start + k as i64;
            sums[g.div_euclid(res) as usize] += weights[c as usize];
        }
    }
    sums.iter()
        .map(|s| (s / res as f64 + floor).ln() as f32)
        .collect()
}

/// Sorted, merged half-open intervals.
fn merge_windows(it: impl Iterator<Item = (i64, i64)>) -> Vec<(i64, i64)> {
    let mut v: Vec<(i64, i64)> = it.collect();
    v.sort_unstable();
    let mut out: Vec<(i64, i64)> = Vec::new();
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Grid positions and detectors of a contiguous run of detections.
struct Chunk {
    grid: Vec<i64>,
    det: Vec<u8>,
}

fn fft_chunk(detections: &[SyncDetection], drift: f64, c0: f64, t_slot: f64) -> Option<Chunk> {
    let g = |b: Picos| ((b as f64 / (1.0 + drift) - c0) / t_slot).round() as i64;
    let first = g(detections.first()?.time_ps);
    let mut grid = Vec::new();
    let mut det = Vec::new();
    for d in detections.iter().take(FFT_CHUNK_DETECTIONS) {
        let n = g(d.time_ps);
        if n - first >= FFT_CHUNK_SPAN {
            break;
        }
        grid.push(n);
        det.push(d.detector.index() as u8);
    }
    (grid.len() >= 2).then_some(Chunk { grid, det })
}

/// Slot-level scores of every shift in `windows` for the chunk, by FFT
/// cross-correlation of the detector-weighted class sequence with the click
/// train. Returns the best shifts.
fn fft_candidates(
    sched: &Schedule,
    scorer: &Scorer,
    chunk: &Chunk,
    windows: &[(i64, i64)],
) -> Vec<i64> {
    use rustfft::num_complex::Complex;
    let n0 = chunk.grid[0];
    let span = (chunk.grid.last().unwrap() - n0 + 1) as usize;
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let mut best: Vec<(f64, i64)> = Vec::new();
    for &(a, b) in windows {
        let wlen = (b - a) as usize;
        let len = (span + wlen).next_power_of_two();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        // score(a + j) = sum_x D[x] G[x + wlen - 1 - j], G[y] = w[class(base + y)]
        let base = n0 - a - (wlen as i64 - 1);
        let classes: Vec<usize> = (0..span + wlen - 1)
            .map(|y| sched.class_of_grid(base + y as i64))
            .collect();
        let mut acc = vec![Complex::new(0.0, 0.0); len];
        for d in 0..4 {
            let mut gd = vec![Complex::new(0.0, 0.0); len];
            for (y, &c) in classes.iter().enumerate() {
                gd[y].re = scorer.w[c][d];
            }
            let mut dd = vec![Complex::new(0.0, 0.0); len];
            for (&n, &k) in chunk.grid.iter().zip(&chunk.det) {
                if k as usize == d {
                    dd[(n - n0) as usize].re += 1.0;
                }
            }
            fwd.process(&mut gd);
            fwd.process(&mut dd);
            for ((s, g), x) in acc.iter_mut().zip(&gd).zip(&dd) {
                *s += g * x.conj();
            }
        }
        inv.process(&mut acc);
        let scale = 1.0 / len as f64;
        for j in 0..wlen {
            let k = wlen - 1 - j;
            best.push((acc[k].re * scale, a + j as i64));
        }
        best.sort_by(|x, y| y.0.total_cmp(&x.0));
        best.truncate(FFT_TOP);
    }
    best.into_iter().map(|b| b.1).collect()
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Recovers offset and drift. `announcements` holds one entry per sent slot
/// and `timeline` gives the transmitter's slot times. Detections must be in
/// arrival order on one unwrapped segment.
pub fn recover_clock_offset(
    announcements: &[Announcement],
    timeline: &SessionTimeline,
    detections: &[SyncDetection],
    params: &SyncParams,
) -> SyncResult {
    let classes: Vec<u8> = announcements.iter().map(|a| a.index() as u8).collect();
    recover_from_classes(&classes, timeline, detections, params)
}

pub(crate) fn recover_from_classes(
    classes: &[u8],
    timeline: &SessionTimeline,
    detections: &[SyncDetection],
    params: &SyncParams,
) -> SyncResult {
    let n_det = detections.len();
    if n_det < params.min_detections.max(2) {
        return SyncResult::rejected(
            format!(
                "{n_det} detections, at least {} required",
                params.min_detections.max(2)
            ),
            n_det,
        );
    }
    let t_slot = params.slot_period_ps as f64;

    // Step 1 on a contiguous prefix, so early stages see dense data.
    let prefix = &detections[..n_det.min(params.max_detections.max(2))];
    let times: Vec<Picos> = prefix.iter().map(|d| d.time_ps).collect();
    let (mut drift, c0) = drift_and_phase(&times, t_slot, params.max_drift);

    // Likelihood on detections spread over the whole record.
    let used = stride_sample(detections, params.max_detections.max(2));
    let det_idx: Vec<u8> = used.iter().map(|d| d.detector.index() as u8).collect();
    let grid_of = |b: Picos, drift: f64, c: f64| -> i64 {
        ((b as f64 / (1.0 + drift) - c) / t_slot).round() as i64
    };
    let grid: Vec<i64> = used.iter().map(|d| grid_of(d.time_ps, drift, c0)).collect();

    let sched = Schedule::new(classes, timeline);
    let scorer = Scorer::new(classes, &params.levels, params.background_fraction);
    let env_weights = {
        let mut w = scorer.env;
        w[NO_SLOT] = 0.0;
        w
    };

    // Step 2: coarse-to-fine search over the whole-slot shift m (grid = n - m).
    // Each level keeps every block whose envelope score is close to the best;
    // once the surviving shifts fit, they are scored at slot level by FFT.
    let n_min = grid[0];
    let n_max = *grid.last().unwrap();
    let m_lo = n_min - sched.grid_len;
    let m_hi = n_max;
    let range = (m_hi - m_lo + 1).max(1);
    let mut res: i64 = 1;
    while range / res > 2000 {
        res *= 10;
    }
    let mut candidates: Vec<i64> = (m_lo.div_euclid(res)..=m_hi.div_euclid(res))
        .map(|k| k * res)
        .collect();
    let chunk = fft_chunk(detections, drift, c0, t_slot);
    while res > 1 {
        let mut bins: Vec<(i64, f64)> = Vec::new();
        for &n in &grid {
            let b = n.div_euclid(res);
            match bins.last_mut() {
                Some((lb, c)) if *lb == b => *c += 1.0,
                _ => bins.push((b, 1.0)),
            }
        }
        let table = block_log_means(&sched, &env_weights, res, scorer.env_floor);
        let outside = scorer.env_floor.ln();
        let mut scored: Vec<(f64, i64)> = candidates
            .iter()
            .map(|&m| {
                let k = m / res;
                let s: f64 = bins
                    .iter()
                    .map(|&(b, c)| {
                        let a = b - k;
                        let l = usize::try_from(a)
                            .ok()
                            .and_then(|a| table.get(a))
                            .map_or(outside, |&v| v as f64);
                        c * l
                    })
                    .sum();
                (s, m)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.abs().cmp(&b.1.abs())));
        let best = scored[0].0;
        let kept: Vec<i64> = scored
            .iter()
            .take(MAX_KEPT_BLOCKS)
            .take_while(|s| s.0 >= best - ENVELOPE_MARGIN)
            .map(|s| s.1)
            .collect();
        // a block stands for shifts near [m, m + res); allow one block either side
        let windows = merge_windows(kept.iter().map(|&m| (m - res, m + 2 * res)));
        let total: i64 = windows.iter().map(|w| w.1 - w.0).sum();
        if let Some(c) = &chunk {
            if total <= FFT_MAX_WINDOW {
                candidates = fft_candidates(&sched, &scorer, c, &windows);
                break;
            }
        }
        let next = res / 10;
        let mut refined: Vec<i64> = kept
            .iter()
            .flat_map(|&m| (-10..=20).map(move |j| m + j * next))
            .collect();
        refined.sort_unstable();
        refined.dedup();
        candidates = refined;
        res = next;
    }

    // Step 3: detector-aware slot-level scores.
    let mut scored: Vec<(f64, i64)> = candidates
        .iter()
        .map(|&m| (scorer.slot_score(&sched, &grid, &det_idx, m), m))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.abs().cmp(&b.1.abs())));
    let top: Vec<i64> = scored.iter().take(4).map(|s| s.1).collect();
    for m in top {
        for j in -3..=3 {
            if !scored.iter().any(|s| s.1 == m + j) {
                scored.push((scorer.slot_score(&sched, &grid, &det_idx, m + j), m + j));
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.abs().cmp(&b.1.abs())));
    let (best_score, best_m) = scored[0];

    let log_prior_alt = (0.5 / range as f64).ln();
    let log_prior_null = 0.5f64.ln();
    let log_z = log_sum_exp(
        scored
            .iter()
            .map(|s| s.0 + log_prior_alt)
            .chain(std::iter::once(log_prior_null)),
    );
    let confidence: f64 = scored
        .iter()
        .filter(|s| (s.1 - best_m).abs() <= 1)
        .map(|s| (s.0 + log_prior_alt - log_z).exp())
        .sum();
    let null_probability = (log_prior_null - log_z).exp();

    // Refine drift and phase by regressing arrival residuals of matched clicks.
    let mut frame = c0 - params.mean_arrival_ps + best_m as f64 * t_slot;
    let b0 = used[0].time_ps as f64;
    for _ in 0..2 {
        let mut pts = Vec::new();
        for d in &used {
            let t = d.time_ps as f64 / (1.0 + drift) - frame;
            let g = ((t - params.mean_arrival_ps) / t_slot).round() as i64;
            let c = sched.class_of_grid(g);
            if c == NO_SLOT || scorer.env[c] == 0.0 {
                continue;
            }
            let r = t - g as f64 * t_slot - params.mean_arrival_ps;
            if r.abs() < 0.25 * t_slot {
                pts.push((d.time_ps as f64 - b0, r));
            }
        }
        if pts.len() < 10 {
            break;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let beta = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let alpha = my - beta * mx;
        // t' = b / (1 + d) - frame - alpha - beta (b - b0)
        let inv = 1.0 / (1.0 + drift) - beta;
        drift = 1.0 / inv - 1.0;
        frame += alpha - beta * b0;
    }

    let rollover = params.rollover_ps;
    let frame_offset = frame * (1.0 + drift);
    let raw = frame_offset.round() as Picos;
    let mapped = params.prior_min_ps + (raw - params.prior_min_ps).rem_euclid(rollover);
    let step = params.timing_step_ps.max(1);
    let quantized = (mapped as f64 / step as f64).round() as Picos * step;

    let mut accepted = confidence >= params.confidence_threshold;
    let mut reason = None;
    if !accepted {
        reason = Some(format!(
            "confidence {confidence:.4} below {}",
            params.confidence_threshold
        ));
    }
    if quantized > params.prior_max_ps {
        accepted = false;
        reason = Some("offset outside prior range".into());
    }
    if drift.abs() > params.max_drift * 1.5 {
        accepted = false;
        reason = Some("drift outside search range".into());
    }

    SyncResult {
        offset_ps: quantized,
        offset_s: quantized as f64 / 1e12,
        drift,
        confidence,
        accepted,
        null_probability,
        detections_used: used.len(),
        log_likelihood: best_score,
        reason,
        frame_offset_ps: frame,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SlotClass;
    use crate::profile::ProfileSet;
    use crate::session::{SessionLog, SessionSimulator};
    use crate::tagging::unwrap_tags;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn simulate(
        offset_s: f64,
        drift_ppm: f64,
        duration: f64,
        seed: u64,
    ) -> (SessionConfig, SessionLog, SessionTimeline) {
        let mut cfg = SessionConfig::default();
        cfg.receiver_clock_offset_s = offset_s;
        cfg.receiver_clock_drift_ppm = drift_ppm;
        let profiles = ProfileSet::synthetic(1e6, 1e6);
        let sim = SessionSimulator::new(&cfg, duration, &profiles, &[]).unwrap();
        let mut log = SessionLog::default();
        sim.run(seed, &mut log).unwrap();
        let tl = sim.timeline().clone();
        (cfg, log, tl)
    }

    fn sync(
        cfg: &SessionConfig,
        log: &SessionLog,
        tl: &SessionTimeline,
        shuffle: bool,
    ) -> SyncResult {
        let mut ann: Vec<Announcement> = log
            .preparations
            .iter()
            .map(|p| Announcement::from(p.class))
            .collect();
        if shuffle {
            ann.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        }
        let tags: Vec<u32> = log.detections.iter().map(|d| d.raw_tag).collect();
        let un = unwrap_tags(
            &tags,
            cfg.tagger_tick_ps(),
            cfg.tagger_bits,
            cfg.rollover_ps() / 2,
        );
        let dets: Vec<SyncDetection> = un
            .times_ps
            .iter()
            .zip(&log.detections)
            .map(|(&t, d)| SyncDetection {
                time_ps: t,
                detector: d.detector,
            })
            .collect();
        let mean = ProfileSet::synthetic(1e6, 1e6).mean_emission_ps();
        recover_clock_offset(&ann, tl, &dets, &SyncParams::from_config(cfg, mean))
    }

    #[test]
    fn self_alignment() {
        let (cfg, log, tl) = simulate(0.0, 0.0, 0.05, 1);
        let r = sync(&cfg, &log, &tl, false);
        assert!(r.accepted, "{r:?}");
        assert!(r.confidence > 0.99);
        assert!(r.offset_ps.abs() <= cfg.slot_period_ps() / 2, "{r:?}");
    }

    #[test]
    fn injected_offset_and_drift() {
        let (cfg, log, tl) = simulate(1.234, 5.0, 0.2, 2);
        assert!(log.detections.len() >= 100_000);
        let r = sync(&cfg, &log, &tl, false);
        assert!(r.accepted, "{r:?}");
        assert!(
            (r.offset_ps - 1_234_000_000_000).abs() < cfg.slot_period_ps(),
            "{r:?}"
        );
        assert!((r.drift - 5e-6).abs() < 1e-7, "{r:?}");
    }

    #[test]
    fn negative_offset_wraps() {
        let (cfg, log, tl) = simulate(-3.3, -8.0, 0.05, 3);
        let r = sync(&cfg, &log, &tl, false);
        assert!(r.accepted, "{r:?}");
        assert!(
            (r.offset_ps + 3_300_000_000_000).abs() < cfg.slot_period_ps(),
            "{r:?}"
        );
    }

    #[test]
    fn detections_from_mid_session_only() {
        let (cfg, mut log, tl) = simulate(-0.7, 4.0, 0.2, 6);
        let n = log.detections.len();
        log.detections = log.detections[n / 3..2 * n / 3].to_vec();
        let r = sync(&cfg, &log, &tl, false);
        assert!(r.accepted, "{r:?}");
        assert!(
            (r.offset_ps + 700_000_000_000).abs() < cfg.slot_period_ps(),
            "{r:?}"
        );
    }

    #[test]
    fn shuffled_announcements_rejected() {
        let (cfg, log, tl) = simulate(0.5, 2.0, 0.05, 4);
        let r = sync(&cfg, &log, &tl, true);
        assert!(!r.accepted, "{r:?}");
        assert!(r.confidence < 0.95);
    }

    #[test]
    fn too_few_detections_rejected() {
        let (cfg, log, tl) = simulate(0.0, 0.0, 0.001, 5);
        let r = sync(&cfg, &log, &tl, false);
        assert!(!r.accepted);
        assert!(r.reason.unwrap().contains("detections"));
    }

    #[test]
    fn lr_announcement_spreads_evenly() {
        let lam = rate_table(&IntensityLevels::default());
        let lr = Announcement::from(
            SlotClass::new(
                Some(PolarizationState::R),
                crate::model::IntensityClass::Signal,
            )
            .unwrap(),
        )
        .index();
        assert!(lam[lr].iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(lam[NO_SLOT], [0.0; 4]);
    }
}
