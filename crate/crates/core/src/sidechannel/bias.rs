//! Entropy bias from noisy probability estimates.
//!
//! A second-order expansion of the plug-in entropy around the truth gives a
//! shift of magnitude `sum_i sigma_i^2 / (2 q_i)` nats. Sampled
//! histograms underestimate entropy, so the shift is downward; the functions
//! here return the magnitude. For mutual information `I = H_B + H_E - H_BE`
//! the shifts combine to an overestimate of `b_BE - b_B - b_E`.

use serde::Serialize;

use super::{weighted_pdfs, ProtocolProbabilities};
use crate::error::{Error, Result};
use crate::profile::SideChannelProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyBias {
    pub nats: f64,
    pub bits: f64,
    /// Bins with `q = 0` but `sigma > 0`, left out of the sum.
    pub excluded_bins: usize,
}

pub fn entropy_bias(q: &[f64], sigma: &[f64]) -> Result<EntropyBias> {
    if q.len() != sigma.len() {
        return Err(Error::BinningMismatch(format!(
            "{} probabilities, {} errors",
            q.len(),
            sigma.len()
        )));
    }
    let mut nats = 0.0;
    let mut excluded_bins = 0;
    for (&qi, &si) in q.iter().zip(sigma) {
        if si == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            excluded_bins += 1;
            continue;
        }
        nats += si * si / (2.0 * qi);
    }
    Ok(EntropyBias {
        nats,
        bits: nats / std::f64::consts::LN_2,
        excluded_bins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MiBias {
    pub b: EntropyBias,
    pub e: EntropyBias,
    pub be: EntropyBias,
    /// Expected plug-in overestimate of I, bits.
    pub total_bits: f64,
    pub excluded_bins: usize,
}

/// Bias of the analytic MI computed from noisy per-state histograms. The
/// sifted-outcome distribution is exact; bin errors propagate linearly into
/// `p(E|S)` and `p(B,E|S)`.
pub fn mi_bias(profiles: &[SideChannelProfile], probs: &ProtocolProbabilities) -> Result<MiBias> {
    let (w, pdfs) = weighted_pdfs(profiles, probs)?;
    let bins = super::pe_from(&w, &pdfs).len();
    let k = probs.n_outcomes();
    let mut var_e = vec![0.0; bins];
    let mut var_be = vec![vec![0.0; bins]; k];
    for (i, p) in profiles.iter().enumerate() {
        if w[i] == 0.0 {
            continue;
        }
        for (j, s) in p.sigma.iter().enumerate() {
            let s2 = s * s;
            var_e[j] += w[i] * w[i] * s2;
            for b in 0..k {
                let c = w[i] * probs.p_b_given_as[i][b];
                var_be[b][j] += c * c * s2;
            }
        }
    }
    let q_e = super::pe_from(&w, &pdfs);
    let q_be = super::joint_from(&w, &probs.p_b_given_as, &pdfs);
    let sigma = |v: &[f64]| v.iter().map(|x| x.sqrt()).collect::<Vec<_>>();
    let q_b = super::pb_from(&w, &probs.p_b_given_as);
    let b = entropy_bias(&q_b, &vec![0.0; k])?;
    let e = entropy_bias(&q_e, &sigma(&var_e))?;
    let flat_q: Vec<f64> = q_be.concat();
    let flat_s: Vec<f64> = var_be.iter().flat_map(|r| sigma(r)).collect();
    let be = entropy_bias(&flat_q, &flat_s)?;
    Ok(MiBias {
        b,
        e,
        be,
        total_bits: be.bits - b.bits - e.bits,
        excluded_bins: b.excluded_bins + e.excluded_bins + be.excluded_bins,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::two_state;
    use super::*;
    use crate::profile::Binning;

    #[test]
    fn zero_sigma_zero_bias() {
        let b = entropy_bias(&[0.3, 0.7], &[0.0, 0.0]).unwrap();
        assert_eq!(b.nats, 0.0);
    }

    #[test]
    fn direct_substitution() {
        let b = entropy_bias(&[0.5, 0.5], &[0.01, 0.01]).unwrap();
        assert!((b.nats - 2e-4).abs() < 1e-15);
        assert!((b.bits - 2.885_390_081_777_927e-4).abs() < 1e-12);
    }

    #[test]
    fn empty_bin_with_error_is_flagged() {
        let b = entropy_bias(&[1.0, 0.0], &[0.01, 0.01]).unwrap();
        assert_eq!(b.excluded_bins, 1);
        assert!((b.nats - 5e-5).abs() < 1e-15);
    }

    #[test]
    fn mi_bias_positive_for_identical_noisy_profiles() {
        let (_, probs) = two_state(&[0.5, 0.5], &[0.5, 0.5]);
        let counts = vec![500.0, 300.0, 200.0];
        let p = SideChannelProfile::from_counts(Binning::new(0.0, 1.0, 3), counts).unwrap();
        let bias = mi_bias(&[p.clone(), p], &probs).unwrap();
        // two states, each with its own N = 1000 histogram
        let per_state: f64 = (0..3).map(|_| 1.0 / 1000.0).sum::<f64>() / 2.0;
        let expect = (1.0 - 0.5) * per_state / std::f64::consts::LN_2;
        assert!((bias.total_bits - expect).abs() < 1e-12, "{bias:?}");
    }
}
