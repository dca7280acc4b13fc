//! Uncertainty of the MI estimate: linear error propagation with
//! finite-difference derivatives, and Monte-Carlo resampling of the counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use super::{mi_from, weighted_pdfs, ProtocolProbabilities};
use crate::error::{Error, Result};
use crate::profile::SideChannelProfile;

fn fd_step(value: f64, sigma: f64) -> Result<f64> {
    let h = (0.01 * sigma).max(1e-6);
    if value + h == value || value - h == value {
        return Err(Error::StepUnderflow { step: h, value });
    }
    Ok(h)
}

/// `sigma_f = sqrt(sum_i (df/dx_i)^2 sigma_i^2)` with central differences.
pub fn propagate_errors<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], sigma: &[f64]) -> Result<f64> {
    if x.len() != sigma.len() {
        return Err(Error::BinningMismatch(
            "x and sigma differ in length".into(),
        ));
    }
    let mut var = 0.0;
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        if sigma[i] == 0.0 {
            continue;
        }
        let h = fd_step(x[i], sigma[i])?;
        xs[i] = x[i] + h;
        let up = f(&xs);
        xs[i] = x[i] - h;
        let down = f(&xs);
        xs[i] = x[i];
        let d = (up - down) / (2.0 * h);
        var += d * d * sigma[i] * sigma[i];
    }
    Ok(var.sqrt())
}

fn renormalized(pdf: &[f64], bin: usize, delta: f64) -> Vec<f64> {
    let mut p = pdf.to_vec();
    p[bin] = (p[bin] + delta).max(0.0);
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Propagated MI error from the per-bin errors of each state's profile. Each
/// perturbed profile is renormalized before the MI is recomputed; empty
/// bins are skipped.
pub fn mi_uncertainty_propagation(
    profiles: &[SideChannelProfile],
    probs: &ProtocolProbabilities,
) -> Result<f64> {
    let (w, pdfs) = weighted_pdfs(profiles, probs)?;
    let mut jobs = Vec::new();
    for (i, p) in profiles.iter().enumerate() {
        if w[i] == 0.0 {
            continue;
        }
        for (j, (&q, &s)) in p.pdf.iter().zip(&p.sigma).enumerate() {
            if s > 0.0 && q > 0.0 {
                jobs.push((i, j, fd_step(q, s)?, s));
            }
        }
    }
    let var: f64 = jobs
        .par_iter()
        .map(|&(i, j, h, s)| {
            let eval = |delta: f64| {
                let perturbed = renormalized(pdfs[i], j, delta);
                let mut set: Vec<&[f64]> = pdfs.clone();
                set[i] = &perturbed;
                mi_from(&w, &probs.p_b_given_as, &set).mutual_information
            };
            let d = (eval(h) - eval(-h)) / (2.0 * h);
            d * d * s * s
        })
        .sum();
    Ok(var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloResult {
    pub sigma_bits: f64,
    pub mean_bits: f64,
    pub samples: Vec<f64>,
}

/// Resamples every profile's counts as independent Poisson variates,
/// renormalizes and recomputes the MI, `n_samples` times. Trial `t` uses
/// its own ChaCha stream, so the result does not depend on scheduling.
/// Exact profiles (no counts) are held fixed.
pub fn mi_uncertainty_montecarlo(
    profiles: &[SideChannelProfile],
    probs: &ProtocolProbabilities,
    n_samples: usize,
    seed: u64,
) -> Result<MonteCarloResult> {
    if n_samples < 100 {
        return Err(Error::config(
            "mc_samples",
            "at least 100 Monte-Carlo samples required",
        ));
    }
    let (w, pdfs) = weighted_pdfs(profiles, probs)?;
    let noisy = profiles
        .iter()
        .zip(&w)
        .any(|(p, &wi)| wi > 0.0 && p.counts.is_some());
    if !noisy {
        let i = mi_from(&w, &probs.p_b_given_as, &pdfs).mutual_information;
        return Ok(MonteCarloResult {
            sigma_bits: 0.0,
            mean_bits: i,
            samples: vec![i; n_samples],
        });
    }
    let samples: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let drawn: Vec<Option<Vec<f64>>> = profiles
                .iter()
                .zip(&w)
                .map(|(p, &wi)| {
                    let counts = p.counts.as_ref().filter(|_| wi > 0.0)?;
                    let mut c: Vec<f64> = counts
                        .iter()
                        .map(|&n| {
                            if n > 0.0 {
                                Poisson::new(n).expect("positive mean").sample(&mut rng)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let s: f64 = c.iter().sum();
                    if s > 0.0 {
                        c.iter_mut().for_each(|x| *x /= s);
                        Some(c)
                    } else {
                        None
                    }
                })
                .collect();
            let set: Vec<&[f64]> = drawn
                .iter()
                .zip(&pdfs)
                .map(|(d, &orig)| d.as_deref().unwrap_or(orig))
                .collect();
            mi_from(&w, &probs.p_b_given_as, &set).mutual_information
        })
        .collect();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MonteCarloResult {
        sigma_bits: var.sqrt(),
        mean_bits: mean,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::two_state;
    use super::super::{mi_bias, mutual_information};
    use super::*;
    use crate::profile::Binning;

    #[test]
    fn zero_sigma_zero_propagation() {
        let (prof, probs) = two_state(&[0.75, 0.25], &[0.25, 0.75]);
        assert_eq!(mi_uncertainty_propagation(&prof, &probs).unwrap(), 0.0);
        let mc = mi_uncertainty_montecarlo(&prof, &probs, 100, 1).unwrap();
        assert_eq!(mc.sigma_bits, 0.0);
    }

    #[test]
    fn linear_function() {
        let s = propagate_errors(|x| 3.0 * x[0], &[0.4], &[0.1]).unwrap();
        assert!((s - 0.3).abs() < 1e-6);
    }

    #[test]
    fn step_underflow() {
        assert!(matches!(
            propagate_errors(|x| x[0], &[1e12], &[1e-3]),
            Err(Error::StepUnderflow { .. })
        ));
    }

    fn counted(p: &[f64], n: f64) -> SideChannelProfile {
        SideChannelProfile::from_counts(
            Binning::new(0.0, 1.0, p.len()),
            p.iter().map(|x| (x * n).round()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn propagation_matches_montecarlo_small_noise() {
        let (_, probs) = two_state(&[0.5, 0.5], &[0.5, 0.5]);
        let prof = vec![
            counted(&[0.4, 0.3, 0.2, 0.1], 1e6),
            counted(&[0.1, 0.2, 0.3, 0.4], 1e6),
        ];
        let a = mi_uncertainty_propagation(&prof, &probs).unwrap();
        let b = mi_uncertainty_montecarlo(&prof, &probs, 2000, 7)
            .unwrap()
            .sigma_bits;
        assert!((a / b - 1.0).abs() < 0.15, "{a} vs {b}");
    }

    #[test]
    fn montecarlo_is_deterministic() {
        let (_, probs) = two_state(&[0.5, 0.5], &[0.5, 0.5]);
        let prof = vec![counted(&[0.6, 0.4], 1e3), counted(&[0.3, 0.7], 1e3)];
        let a = mi_uncertainty_montecarlo(&prof, &probs, 200, 11).unwrap();
        let b = mi_uncertainty_montecarlo(&prof, &probs, 200, 11).unwrap();
        assert_eq!(a.sigma_bits.to_bits(), b.sigma_bits.to_bits());
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn identical_truth_samples_are_pure_bias() {
        let (_, probs) = two_state(&[0.5, 0.5], &[0.5, 0.5]);
        let truth: Vec<f64> = (1..=20).map(|k| k as f64 / 210.0).collect();
        let prof = vec![counted(&truth, 1e4), counted(&truth, 1e4)];
        assert!(
            mutual_information(&prof, &probs)
                .unwrap()
                .mutual_information
                .abs()
                < 1e-12
        );
        let mc = mi_uncertainty_montecarlo(&prof, &probs, 2000, 3).unwrap();
        assert!(mc.samples.iter().all(|&s| s >= 0.0));
        // Each trial is the MI of two noisy copies of one truth: pure bias.
        let predicted = mi_bias(&prof, &probs).unwrap().total_bits;
        assert!(
            (mc.mean_bits / predicted - 1.0).abs() < 0.15,
            "{} vs {}",
            mc.mean_bits,
            predicted
        );
    }
}
