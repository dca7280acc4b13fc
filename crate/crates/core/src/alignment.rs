//! Temporal alignment of per-state emission profiles on the timing-step grid.
//!
//! Each non-reference profile gets an integer-step delay and width change
//! chosen by coordinate descent on the L1 distance to the reference.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Picos;
use crate::profile::{Binning, SideChannelProfile};
use crate::transmitter::TimingAdjustment;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentOptions {
    pub reference: usize,
    pub step_ps: Picos,
    pub max_iters: usize,
    pub max_offset_steps: i32,
    pub max_width_steps: i32,
}

impl Default for AlignmentOptions {
    fn default() -> Self {
        Self {
            reference: 0,
            step_ps: 78,
            max_iters: 5,
            // one 80 ns slot
            max_offset_steps: 1025,
            max_width_steps: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentResult {
    pub adjustments: Vec<TimingAdjustment>,
    /// Summed L1 distance to the reference: initial value, then after each iteration.
    pub l1_history: Vec<f64>,
    pub final_l1: Vec<f64>,
}

/// Piecewise-linear CDF evaluated at `x`.
fn cdf_at(cum: &[f64], lo: f64, width: f64, x: f64) -> f64 {
    let u = (x - lo) / width;
    if u <= 0.0 {
        return 0.0;
    }
    let n = cum.len() - 1;
    if u >= n as f64 {
        return cum[n];
    }
    let k = u.floor() as usize;
    let f = u - k as f64;
    cum[k] + f * (cum[k + 1] - cum[k])
}

fn cumulative(pdf: &[f64]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(pdf.len() + 1);
    let mut acc = 0.0;
    cum.push(0.0);
    for p in pdf {
        acc += p;
        cum.push(acc);
    }
    cum
}

/// Mass on the original grid of `m + s (X - m) + offset`, where `X` has
/// the piecewise-uniform density of the bins. Mass leaving the grid is lost.
fn transform_pdf(cum: &[f64], binning: Binning, mode: f64, stretch: f64, offset: f64) -> Vec<f64> {
    let lo = binning.lower_edge(0);
    let w = binning.width;
    let inv = |y: f64| mode + (y - offset - mode) / stretch;
    let mut out = Vec::with_capacity(binning.len);
    let mut prev = cdf_at(cum, lo, w, inv(lo));
    for k in 0..binning.len {
        let next = cdf_at(cum, lo, w, inv(lo + (k + 1) as f64 * w));
        out.push(next - prev);
        prev = next;
    }
    out
}

fn stretch_factor(width_steps: i32, step_ps: Picos, fwhm: f64) -> f64 {
    1.0 + width_steps as f64 * step_ps as f64 / fwhm
}

/// Applies a delay and symmetric stretch about the mode; the result is
/// renormalized.
pub fn adjust_profile(
    profile: &SideChannelProfile,
    adj: TimingAdjustment,
    step_ps: Picos,
) -> Result<SideChannelProfile> {
    let s = stretch_factor(adj.width_steps, step_ps, profile.fwhm());
    if !(s > 0.0) {
        return Err(Error::config(
            "width_steps",
            format!("{} steps collapses the pulse", adj.width_steps),
        ));
    }
    let mode = profile.binning.center(profile.mode_index());
    let offset = adj.offset_ps(step_ps) as f64;
    let moved = |v: &[f64]| transform_pdf(&cumulative(v), profile.binning, mode, s, offset);
    match &profile.counts {
        Some(c) => SideChannelProfile::from_counts(profile.binning, moved(c)),
        None => SideChannelProfile::exact(profile.binning, moved(&profile.pdf)),
    }
}

struct Candidate {
    cum: Vec<f64>,
    mode: f64,
    fwhm: f64,
}

impl Candidate {
    fn l1(&self, reference: &[f64], binning: Binning, adj: TimingAdjustment, step: Picos) -> f64 {
        let s = stretch_factor(adj.width_steps, step, self.fwhm);
        if !(s > 0.05) {
            return f64::INFINITY;
        }
        let moved = transform_pdf(&self.cum, binning, self.mode, s, adj.offset_ps(step) as f64);
        crate::profile::l1(&moved, reference)
    }
}

/// Search order 0, -1, +1, -2, +2, ... so ties go to the smallest magnitude.
fn search_order(limit: i32) -> impl Iterator<Item = i32> {
    std::iter::once(0).chain((1..=limit).flat_map(|k| [-k, k]))
}

pub fn align_temporal_profiles(
    profiles: &[SideChannelProfile],
    opts: &AlignmentOptions,
) -> Result<AlignmentResult> {
    if profiles.len() < 2 {
        return Err(Error::InsufficientData(
            "alignment needs at least two profiles".into(),
        ));
    }
    if opts.reference >= profiles.len() {
        return Err(Error::config("reference", "index out of range"));
    }
    let binning = profiles[opts.reference].binning;
    if profiles.iter().any(|p| !p.binning.matches(&binning)) {
        return Err(Error::BinningMismatch("profiles use different bins".into()));
    }
    let reference = &profiles[opts.reference].pdf;
    let span_steps = (binning.len as f64 * binning.width / opts.step_ps as f64).ceil() as i32;
    let offset_limit = opts.max_offset_steps.min(span_steps);

    let candidates: Vec<Candidate> = profiles
        .iter()
        .map(|p| Candidate {
            cum: cumulative(&p.pdf),
            mode: binning.center(p.mode_index()),
            fwhm: p.fwhm(),
        })
        .collect();

    let mut adjustments = vec![TimingAdjustment::ZERO; profiles.len()];
    let mut current: Vec<f64> = candidates
        .iter()
        .map(|c| c.l1(reference, binning, TimingAdjustment::ZERO, opts.step_ps))
        .collect();
    current[opts.reference] = 0.0;
    let mut l1_history = vec![current.iter().sum()];

    for _ in 0..opts.max_iters {
        for (i, cand) in candidates.iter().enumerate() {
            if i == opts.reference {
                continue;
            }
            let mut best = adjustments[i];
            let mut best_l1 = f64::INFINITY;
            for o in search_order(offset_limit) {
                let adj = TimingAdjustment {
                    offset_steps: o,
                    width_steps: best.width_steps,
                };
                let d = cand.l1(reference, binning, adj, opts.step_ps);
                if d < best_l1 {
                    best_l1 = d;
                    best.offset_steps = o;
                }
            }
            let offset = best.offset_steps;
            best_l1 = f64::INFINITY;
            for w in search_order(opts.max_width_steps) {
                let adj = TimingAdjustment {
                    offset_steps: offset,
                    width_steps: w,
                };
                let d = cand.l1(reference, binning, adj, opts.step_ps);
                if d < best_l1 {
                    best_l1 = d;
                    best.width_steps = w;
                }
            }
            adjustments[i] = best;
            current[i] = best_l1;
        }
        l1_history.push(current.iter().sum());
    }

    Ok(AlignmentResult {
        adjustments,
        l1_history,
        final_l1: current,
    })
}
