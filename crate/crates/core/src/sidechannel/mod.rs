//! Mutual information between the receiver's sifted outcome B and an
//! eavesdropper's side-channel measurement E, conditioned on sifting S.
//!
//! E depends only on the prepared state A, and so does B, so the joint is
//! `p(B,E|S) = sum_i p(B|A_i,S) p(E|A_i) p(S|A_i) p(A_i) / p(S)`.
//! All entropies are in bits.

pub mod bias;
pub mod uncertainty;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Axis, PhotonStatistics};
use crate::error::{Error, Result};
use crate::model::{IntensityLevels, PolarizationState, SlotClass};
use crate::profile::SideChannelProfile;
use crate::transmitter::photon_number_pgf;

pub use bias::{entropy_bias, mi_bias, EntropyBias, MiBias};
pub use uncertainty::{
    mi_uncertainty_montecarlo, mi_uncertainty_propagation, propagate_errors, MonteCarloResult,
};

const SUM_TOL: f64 = 1e-9;

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p, "distribution")?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.log2())
        .sum::<f64>()
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidDistribution(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidDistribution(format!("{what} sums to {s}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolProbabilities {
    /// Sending probability of each state.
    pub p_a: Vec<f64>,
    /// Probability that a slot of each state ends up sifted.
    pub p_s_given_a: Vec<f64>,
    /// Distribution of the sifted outcome, `[state][outcome]`.
    pub p_b_given_as: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub states: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<String>,
}

impl ProtocolProbabilities {
    pub fn new(p_a: Vec<f64>, p_s_given_a: Vec<f64>, p_b_given_as: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self {
            p_a,
            p_s_given_a,
            p_b_given_as,
            states: Vec::new(),
            outcomes: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_states(&self) -> usize {
        self.p_a.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.p_b_given_as.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if n == 0 {
            return Err(Error::InvalidDistribution("no states".into()));
        }
        if self.p_s_given_a.len() != n || self.p_b_given_as.len() != n {
            return Err(Error::InvalidDistribution(format!(
                "p_a has {n} states, p_s_given_a {}, p_b_given_as {}",
                self.p_s_given_a.len(),
                self.p_b_given_as.len()
            )));
        }
        check_distribution(&self.p_a, "p_a")?;
        if self.p_s_given_a.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidDistribution(
                "p_s_given_a entries must lie in [0, 1]".into(),
            ));
        }
        let k = self.n_outcomes();
        for (i, row) in self.p_b_given_as.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidDistribution(format!(
                    "p_b_given_as row {i} has {} outcomes, expected {k}",
                    row.len()
                )));
            }
            check_distribution(row, &format!("p_b_given_as row {i}"))?;
        }
        if !self.states.is_empty() && self.states.len() != n {
            return Err(Error::InvalidDistribution(
                "state label count mismatch".into(),
            ));
        }
        Ok(())
    }

    /// `p(A_i|S)`. Fails when nothing sifts.
    pub fn sift_weights(&self) -> Result<Vec<f64>> {
        let raw: Vec<f64> = self
            .p_a
            .iter()
            .zip(&self.p_s_given_a)
            .map(|(a, s)| a * s)
            .collect();
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::NothingSifts);
        }
        Ok(raw.into_iter().map(|x| x / total).collect())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Key-bit protocol: each non-vacuum signal/decoy class is a state; a
    /// slot sifts when exactly one of the L/R detectors clicks and the bit
    /// is R=0, L=1. Every photon reaches the receiver and clicks with
    /// probability `eta` (channel times detector), splits 50/50 between bases
    /// and flips with `eps[state]`. Dead time and dark counts are ignored.
    /// HV classes never sift. With `signal_only` the decoy classes are
    /// excluded from S as well.
    pub fn lr_key(
        sending: &[(SlotClass, f64)],
        levels: &IntensityLevels,
        stats: PhotonStatistics,
        eta: f64,
        eps: [f64; 4],
        signal_only: bool,
    ) -> Result<Self> {
        let classes: Vec<(SlotClass, f64)> = sending
            .iter()
            .copied()
            .filter(|(c, _)| !c.is_vacuum())
            .collect();
        let total: f64 = classes.iter().map(|c| c.1).sum();
        let mut p_a = Vec::new();
        let mut p_s = Vec::new();
        let mut p_b = Vec::new();
        let mut states = Vec::new();
        for (class, p) in classes {
            let state = class.state().expect("non-vacuum");
            let mu = levels.mean_photon_number(class.intensity());
            p_a.push(p / total);
            states.push(class.name());
            let sifts = state != PolarizationState::H
                && !(signal_only && class.intensity() != crate::model::IntensityClass::Signal);
            if !sifts {
                p_s.push(0.0);
                p_b.push(vec![0.5, 0.5]);
                continue;
            }
            let e = eps[state.index()];
            let a = eta * (1.0 - e) / 2.0;
            let b = eta * e / 2.0;
            let g = |x: f64| photon_number_pgf(mu, stats, x);
            let both_silent = g(1.0 - a - b);
            let only_right = g(1.0 - b) - both_silent;
            let only_wrong = g(1.0 - a) - both_silent;
            let ps = only_right + only_wrong;
            p_s.push(ps);
            let right = if ps > 0.0 { only_right / ps } else { 0.5 };
            // outcome 0 is bit 0 (detector R)
            p_b.push(if state == PolarizationState::R {
                vec![right, 1.0 - right]
            } else {
                vec![1.0 - right, right]
            });
        }
        let mut p = Self::new(p_a, p_s, p_b)?;
        p.states = states;
        p.outcomes = vec!["0".into(), "1".into()];
        Ok(p)
    }
}

/// Checks the profiles of every state that can sift and returns their pdfs.
/// States that never sift may carry any (or an empty) profile.
fn weighted_pdfs<'a>(
    profiles: &'a [SideChannelProfile],
    probs: &ProtocolProbabilities,
) -> Result<(Vec<f64>, Vec<&'a [f64]>)> {
    probs.validate()?;
    if profiles.len() != probs.n_states() {
        return Err(Error::BinningMismatch(format!(
            "{} profiles for {} states",
            profiles.len(),
            probs.n_states()
        )));
    }
    let w = probs.sift_weights()?;
    let mut reference: Option<&SideChannelProfile> = None;
    for (p, &wi) in profiles.iter().zip(&w) {
        if wi == 0.0 {
            continue;
        }
        match reference {
            None => reference = Some(p),
            Some(r) if !r.binning.matches(&p.binning) => {
                return Err(Error::BinningMismatch(
                    "profiles do not share one binning".into(),
                ))
            }
            _ => {}
        }
    }
    let bins = reference.map_or(0, |r| r.len());
    let pdfs = profiles
        .iter()
        .zip(&w)
        .map(|(p, &wi)| {
            if wi == 0.0 && p.len() != bins {
                &[][..]
            } else {
                &p.pdf[..]
            }
        })
        .collect();
    Ok((w, pdfs))
}

/// `p(B_k|S)`.
pub fn p_b_given_s(probs: &ProtocolProbabilities) -> Result<Vec<f64>> {
    probs.validate()?;
    let w = probs.sift_weights()?;
    Ok(pb_from(&w, &probs.p_b_given_as))
}

fn pb_from(w: &[f64], pb: &[Vec<f64>]) -> Vec<f64> {
    let k = pb.first().map_or(0, Vec::len);
    let mut out = vec![0.0; k];
    for (wi, row) in w.iter().zip(pb) {
        if *wi == 0.0 {
            continue;
        }
        for (o, r) in out.iter_mut().zip(row) {
            *o += wi * r;
        }
    }
    out
}

fn pe_from(w: &[f64], pdfs: &[&[f64]]) -> Vec<f64> {
    let bins = w
        .iter()
        .zip(pdfs)
        .find(|(wi, _)| **wi > 0.0)
        .map_or(0, |(_, p)| p.len());
    let mut out = vec![0.0; bins];
    for (wi, pdf) in w.iter().zip(pdfs) {
        if *wi == 0.0 {
            continue;
        }
        for (o, q) in out.iter_mut().zip(pdf.iter()) {
            *o += wi * q;
        }
    }
    out
}

fn joint_from(w: &[f64], pb: &[Vec<f64>], pdfs: &[&[f64]]) -> Vec<Vec<f64>> {
    let bins = pe_from(w, pdfs).len();
    let k = pb.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; bins]; k];
    for ((wi, row), pdf) in w.iter().zip(pb).zip(pdfs) {
        if *wi == 0.0 {
            continue;
        }
        for (b, &pbk) in row.iter().enumerate() {
            let c = wi * pbk;
            if c == 0.0 {
                continue;
            }
            for (o, q) in out[b].iter_mut().zip(pdf.iter()) {
                *o += c * q;
            }
        }
    }
    out
}

/// `p(E_j|S)`.
pub fn p_e_given_s(
    profiles: &[SideChannelProfile],
    probs: &ProtocolProbabilities,
) -> Result<Vec<f64>> {
    let (w, pdfs) = weighted_pdfs(profiles, probs)?;
    Ok(pe_from(&w, &pdfs))
}

/// `p(B_k, E_j|S)` as `[outcome][bin]`.
pub fn p_joint_be_given_s(
    profiles: &[SideChannelProfile],
    probs: &ProtocolProbabilities,
) -> Result<Vec<Vec<f64>>> {
    let (w, pdfs) = weighted_pdfs(profiles, probs)?;
    Ok(joint_from(&w, &probs.p_b_given_as, &pdfs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MiValues {
    pub mutual_information: f64,
    pub h_b_given_s: f64,
    pub h_e_given_s: f64,
    pub h_be_given_s: f64,
    /// `I / H(B|S)`; `None` when `H(B|S) = 0`.
    pub fractional: Option<f64>,
}

pub(crate) fn mi_from(w: &[f64], pb: &[Vec<f64>], pdfs: &[&[f64]]) -> MiValues {
    let b = pb_from(w, pb);
    let e = pe_from(w, pdfs);
    let joint = joint_from(w, pb, pdfs);
    let h_b = entropy_unchecked(&b);
    let h_e = entropy_unchecked(&e);
    let h_be: f64 = joint.iter().map(|row| entropy_unchecked(row)).sum();
    let mut i = h_b + h_e - h_be;
    if i < 0.0 && i > -1e-12 {
        i = 0.0;
    }
    MiValues {
        mutual_information: i,
        h_b_given_s: h_b,
        h_e_given_s: h_e,
        h_be_given_s: h_be,
        fractional: (h_b > 0.0).then(|| i / h_b),
    }
}

pub fn mutual_information(
    profiles: &[SideChannelProfile],
    probs: &ProtocolProbabilities,
) -> Result<MiValues> {
    let (w, pdfs) = weighted_pdfs(profiles, probs)?;
    Ok(mi_from(&w, &probs.p_b_given_as, &pdfs))
}

/// Plug-in MI of a joint count table `[outcome][bin]`, in bits.
pub fn plugin_mutual_information(counts: &[Vec<f64>]) -> Result<f64> {
    let total: f64 = counts.iter().flatten().sum();
    if !(total > 0.0) {
        return Err(Error::InsufficientData("empty joint table".into()));
    }
    let bins = counts.first().map_or(0, Vec::len);
    let pb: Vec<f64> = counts
        .iter()
        .map(|r| r.iter().sum::<f64>() / total)
        .collect();
    let pe: Vec<f64> = (0..bins)
        .map(|j| counts.iter().map(|r| r[j]).sum::<f64>() / total)
        .collect();
    let h_be: f64 = counts
        .iter()
        .map(|r| entropy_unchecked(&r.iter().map(|c| c / total).collect::<Vec<_>>()))
        .sum();
    Ok(entropy_unchecked(&pb) + entropy_unchecked(&pe) - h_be)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiMetadata {
    pub bin_width: f64,
    pub bins: usize,
    pub states: usize,
    pub outcomes: usize,
    /// Raw counts per state; `null` for exact profiles.
    pub total_counts: Vec<Option<f64>>,
    pub bias_excluded_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MIReport {
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "H_B_given_S")]
    pub h_b_given_s: f64,
    #[serde(rename = "H_E_given_S")]
    pub h_e_given_s: f64,
    pub fractional: Option<f64>,
    pub fractional_note: Option<String>,
    /// Expected plug-in overestimate of I from histogram noise.
    pub bias: f64,
    pub i_corrected: f64,
    pub sigma_propagation: f64,
    pub sigma_montecarlo: Option<f64>,
    pub montecarlo_mean: Option<f64>,
    pub montecarlo_samples: usize,
    pub axis: Option<Axis>,
    pub metadata: MiMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub axis: Option<Axis>,
    /// Monte-Carlo trials; 0 skips the Monte-Carlo estimate.
    pub mc_samples: usize,
    pub seed: u64,
}

/// Full report plus the Monte-Carlo MI samples.
pub fn analyze(
    profiles: &[SideChannelProfile],
    probs: &ProtocolProbabilities,
    opts: &AnalysisOptions,
) -> Result<(MIReport, Vec<f64>)> {
    let core = mutual_information(profiles, probs)?;
    let bias = mi_bias(profiles, probs)?;
    let sigma_propagation = mi_uncertainty_propagation(profiles, probs)?;
    let mc = if opts.mc_samples > 0 {
        Some(mi_uncertainty_montecarlo(
            profiles,
            probs,
            opts.mc_samples,
            opts.seed,
        )?)
    } else {
        None
    };
    let (w, _) = weighted_pdfs(profiles, probs)?;
    let reference = profiles
        .iter()
        .zip(&w)
        .find(|(_, wi)| **wi > 0.0)
        .map(|(p, _)| p)
        .expect("some state sifts");
    let report = MIReport {
        i: core.mutual_information,
        h_b_given_s: core.h_b_given_s,
        h_e_given_s: core.h_e_given_s,
        fractional: core.fractional,
        fractional_note: core
            .fractional
            .is_none()
            .then(|| "undefined: H(B|S) = 0".to_string()),
        bias: bias.total_bits,
        i_corrected: (core.mutual_information - bias.total_bits).max(0.0),
        sigma_propagation,
        sigma_montecarlo: mc.as_ref().map(|m| m.sigma_bits),
        montecarlo_mean: mc.as_ref().map(|m| m.mean_bits),
        montecarlo_samples: mc.as_ref().map_or(0, |m| m.samples.len()),
        axis: opts.axis,
        metadata: MiMetadata {
            bin_width: reference.binning.width,
            bins: reference.len(),
            states: probs.n_states(),
            outcomes: probs.n_outcomes(),
            total_counts: profiles.iter().map(|p| p.total_counts()).collect(),
            bias_excluded_bins: bias.excluded_bins,
        },
    };
    Ok((report, mc.map(|m| m.samples).unwrap_or_default()))
}

/// Histogram of MI samples as `(bin_center, count)`.
pub fn sample_histogram(samples: &[f64], bins: usize) -> Vec<(f64, u64)> {
    if samples.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut h = vec![0u64; bins];
    for &s in samples {
        let k = (((s - lo) / width) as usize).min(bins - 1);
        h[k] += 1;
    }
    h.into_iter()
        .enumerate()
        .map(|(k, c)| (lo + (k as f64 + 0.5) * width, c))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::profile::Binning;
    use proptest::prelude::*;

    pub(crate) fn exact(p: &[f64]) -> SideChannelProfile {
        SideChannelProfile::exact(Binning::new(0.0, 1.0, p.len()), p.to_vec()).unwrap()
    }

    pub(crate) fn two_state(
        p0: &[f64],
        p1: &[f64],
    ) -> (Vec<SideChannelProfile>, ProtocolProbabilities) {
        let probs = ProtocolProbabilities::new(
            vec![0.5, 0.5],
            vec![1.0, 1.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        (vec![exact(p0), exact(p1)], probs)
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.5, 0.5]).unwrap(), 1.0);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(entropy(&[0.25; 4]).unwrap(), 2.0);
        assert!(entropy(&[0.6, 0.6]).is_err());
        assert!(entropy(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn pb_examples() {
        let (_, probs) = two_state(&[1.0], &[1.0]);
        assert_eq!(p_b_given_s(&probs).unwrap(), vec![0.5, 0.5]);
        let mut p = probs.clone();
        p.p_s_given_a = vec![1.0, 0.0];
        assert_eq!(p_b_given_s(&p).unwrap(), vec![1.0, 0.0]);
        p.p_s_given_a = vec![0.0, 0.0];
        assert!(matches!(p_b_given_s(&p), Err(Error::NothingSifts)));
    }

    #[test]
    fn pe_examples() {
        let (prof, mut probs) = two_state(&[0.2, 0.8], &[0.2, 0.8]);
        let pe = p_e_given_s(&prof, &probs).unwrap();
        assert!((pe[0] - 0.2).abs() < 1e-15 && (pe[1] - 0.8).abs() < 1e-15);
        probs.p_s_given_a = vec![0.0, 1.0];
        let (prof, _) = two_state(&[0.5, 0.5], &[0.1, 0.9]);
        assert_eq!(p_e_given_s(&prof, &probs).unwrap(), vec![0.1, 0.9]);
        let (prof, probs) = two_state(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(p_e_given_s(&prof, &probs).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn binning_mismatch_rejected() {
        let (mut prof, probs) = two_state(&[0.5, 0.5], &[0.5, 0.5]);
        prof[1] = exact(&[0.3, 0.3, 0.4]);
        assert!(matches!(
            p_e_given_s(&prof, &probs),
            Err(Error::BinningMismatch(_))
        ));
    }

    #[test]
    fn joint_examples() {
        let (prof, probs) = two_state(&[1.0, 0.0], &[0.0, 1.0]);
        let j = p_joint_be_given_s(&prof, &probs).unwrap();
        assert_eq!(j, vec![vec![0.5, 0.0], vec![0.0, 0.5]]);
        let (prof, probs) = two_state(&[0.3, 0.7], &[0.3, 0.7]);
        let j = p_joint_be_given_s(&prof, &probs).unwrap();
        let pb = p_b_given_s(&probs).unwrap();
        let pe = p_e_given_s(&prof, &probs).unwrap();
        for b in 0..2 {
            for e in 0..2 {
                assert!((j[b][e] - pb[b] * pe[e]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joint_matches_triple_loop() {
        let probs = ProtocolProbabilities::new(
            vec![0.2, 0.5, 0.3],
            vec![0.9, 0.4, 0.7],
            vec![vec![0.8, 0.2], vec![0.1, 0.9], vec![0.5, 0.5]],
        )
        .unwrap();
        let prof = vec![
            exact(&[0.1, 0.2, 0.3, 0.4]),
            exact(&[0.4, 0.3, 0.2, 0.1]),
            exact(&[0.25, 0.25, 0.4, 0.1]),
        ];
        let j = p_joint_be_given_s(&prof, &probs).unwrap();
        let norm: f64 = (0..3).map(|i| probs.p_s_given_a[i] * probs.p_a[i]).sum();
        for b in 0..2 {
            for e in 0..4 {
                let mut s = 0.0;
                for i in 0..3 {
                    s += probs.p_b_given_as[i][b]
                        * prof[i].pdf[e]
                        * probs.p_s_given_a[i]
                        * probs.p_a[i];
                }
                assert!((j[b][e] - s / norm).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mi_examples() {
        let (prof, probs) = two_state(&[0.3, 0.7], &[0.3, 0.7]);
        let m = mutual_information(&prof, &probs).unwrap();
        assert!(m.mutual_information.abs() < 1e-12);
        assert!(m.fractional.unwrap().abs() < 1e-12);
        let (prof, probs) = two_state(&[1.0, 0.0], &[0.0, 1.0]);
        let m = mutual_information(&prof, &probs).unwrap();
        assert!((m.mutual_information - 1.0).abs() < 1e-12);
        let (prof, probs) = two_state(&[0.75, 0.25], &[0.25, 0.75]);
        let m = mutual_information(&prof, &probs).unwrap();
        assert!((m.mutual_information - 0.188_721_875_540_867).abs() < 1e-12);
    }

    #[test]
    fn fractional_undefined_without_bit_entropy() {
        let probs = ProtocolProbabilities::new(
            vec![0.5, 0.5],
            vec![1.0, 1.0],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        )
        .unwrap();
        let m = mutual_information(&[exact(&[1.0, 0.0]), exact(&[0.0, 1.0])], &probs).unwrap();
        assert_eq!(m.fractional, None);
    }

    #[test]
    fn three_state_pb_matches_enumeration() {
        let sending =
            crate::transmitter::sending_probabilities(&crate::config::ThresholdTable::nominal());
        let probs = ProtocolProbabilities::lr_key(
            &sending,
            &IntensityLevels::default(),
            PhotonStatistics::Thermal,
            1.0,
            [0.0; 4],
            false,
        )
        .unwrap();
        // Brute force: sum over (state, outcome) of p(A) p(S|A) p(B|A,S).
        let mut num = [0.0; 2];
        let mut den = 0.0;
        for i in 0..probs.n_states() {
            for b in 0..2 {
                num[b] += probs.p_a[i] * probs.p_s_given_a[i] * probs.p_b_given_as[i][b];
            }
            den += probs.p_a[i] * probs.p_s_given_a[i];
        }
        let pb = p_b_given_s(&probs).unwrap();
        for b in 0..2 {
            assert!((pb[b] - num[b] / den).abs() < 1e-15);
        }
        // symmetric R/L thresholds give a balanced key
        assert!((pb[0] - 0.5).abs() < 1e-12);
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
        (2usize..5, 2usize..4, 2usize..7).prop_flat_map(|(n, k, bins)| {
            (
                proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, bins), n),
                proptest::collection::vec(0.01f64..1.0, n),
                proptest::collection::vec(0.0f64..1.0, n),
                proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, k), n),
            )
        })
    }

    fn normalize(v: &[f64]) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    fn build(
        inst: &(Vec<Vec<f64>>, Vec<f64>, Vec<f64>, Vec<Vec<f64>>),
    ) -> (Vec<SideChannelProfile>, ProtocolProbabilities) {
        let (e, a, s, b) = inst;
        let mut s = s.clone();
        s[0] = s[0].max(0.1);
        let probs =
            ProtocolProbabilities::new(normalize(a), s, b.iter().map(|r| normalize(r)).collect())
                .unwrap();
        (e.iter().map(|p| exact(&normalize(p))).collect(), probs)
    }

    proptest! {
        #[test]
        fn mi_bounds_and_marginals(inst in arb_instance()) {
            let (prof, probs) = build(&inst);
            let m = mutual_information(&prof, &probs).unwrap();
            prop_assert!(m.mutual_information >= -1e-12);
            prop_assert!(m.mutual_information <= m.h_b_given_s.min(m.h_e_given_s) + 1e-12);
            let j = p_joint_be_given_s(&prof, &probs).unwrap();
            let pb = p_b_given_s(&probs).unwrap();
            let pe = p_e_given_s(&prof, &probs).unwrap();
            for (b, row) in j.iter().enumerate() {
                prop_assert!((row.iter().sum::<f64>() - pb[b]).abs() < 1e-12);
            }
            for e in 0..pe.len() {
                prop_assert!((j.iter().map(|r| r[e]).sum::<f64>() - pe[e]).abs() < 1e-12);
            }
        }

        #[test]
        fn mi_invariant_under_bin_permutation(inst in arb_instance(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (prof, probs) = build(&inst);
            let mut order: Vec<usize> = (0..prof[0].len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<SideChannelProfile> = prof
                .iter()
                .map(|p| exact(&order.iter().map(|&k| p.pdf[k]).collect::<Vec<_>>()))
                .collect();
            let a = mutual_information(&prof, &probs).unwrap().mutual_information;
            let b = mutual_information(&permuted, &probs).unwrap().mutual_information;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn mi_invariant_under_bin_splitting(inst in arb_instance()) {
            let (prof, probs) = build(&inst);
            let split: Vec<SideChannelProfile> = prof
                .iter()
                .map(|p| exact(&p.pdf.iter().flat_map(|&x| [0.5 * x, 0.5 * x]).collect::<Vec<_>>()))
                .collect();
            let a = mutual_information(&prof, &probs).unwrap().mutual_information;
            let b = mutual_information(&split, &probs).unwrap().mutual_information;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
