//! Receiver: passive 50/50 basis choice, four single-photon detectors with
//! dead time, and the free-running time tagger.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::SessionConfig;
use crate::error::{Error, Result};
use crate::model::{seconds_to_picos, Basis, Picos, PolarizationState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub efficiency: f64,
    pub dark_rate_hz: f64,
    pub jitter_sigma_ps: f64,
    pub dead_time_ps: Picos,
}

impl DetectorParams {
    pub fn ideal() -> Self {
        Self {
            efficiency: 1.0,
            dark_rate_hz: 0.0,
            jitter_sigma_ps: 0.0,
            dead_time_ps: 0,
        }
    }

    pub fn from_config(config: &SessionConfig) -> Self {
        Self {
            efficiency: config.detector_efficiency,
            dark_rate_hz: config.dark_rate_hz,
            jitter_sigma_ps: config.jitter_sigma_s * 1e12,
            dead_time_ps: seconds_to_picos(config.dead_time_s),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::config("detector_efficiency", "must lie in [0, 1]"));
        }
        if !(self.dark_rate_hz >= 0.0) {
            return Err(Error::config("dark_rate_hz", "must be nonnegative"));
        }
        if !(self.jitter_sigma_ps >= 0.0) {
            return Err(Error::config("jitter_sigma_s", "must be nonnegative"));
        }
        if self.dead_time_ps < 0 {
            return Err(Error::config("dead_time_s", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Ideal projection in a given basis.
pub fn project<R: Rng + ?Sized>(
    state: PolarizationState,
    basis: Basis,
    rng: &mut R,
) -> PolarizationState {
    if state.basis() == basis {
        state
    } else {
        basis.detectors()[rng.random_range(0..2)]
    }
}

/// Passive basis choice followed by projection.
pub fn sort_photon<R: Rng + ?Sized>(state: PolarizationState, rng: &mut R) -> PolarizationState {
    let basis = if rng.random_bool(0.5) {
        Basis::Circular
    } else {
        Basis::Linear
    };
    project(state, basis, rng)
}

/// A detector with non-paralyzable dead time. Candidate clicks must be fed
/// in time order.
#[derive(Debug, Clone, Copy)]
pub struct Detector {
    dead_time_ps: Picos,
    last_click: Option<Picos>,
}

impl Detector {
    pub fn new(dead_time_ps: Picos) -> Self {
        Self {
            dead_time_ps,
            last_click: None,
        }
    }

    /// Registers a candidate click; returns whether it fires.
    pub fn offer(&mut self, t: Picos) -> bool {
        match self.last_click {
            Some(last) if t < last + self.dead_time_ps => false,
            _ => {
                self.last_click = Some(t);
                true
            }
        }
    }
}

/// Efficiency and jitter for a photon reaching a detector. Returns the
/// candidate click time; dead time is applied later in time order.
pub fn detect_photon<R: Rng + ?Sized>(
    arrival_ps: Picos,
    params: &DetectorParams,
    jitter: Option<&Normal<f64>>,
    rng: &mut R,
) -> Option<Picos> {
    if params.efficiency < 1.0 && !rng.random_bool(params.efficiency) {
        return None;
    }
    let dt = jitter.map_or(0.0, |n| n.sample(rng));
    Some(arrival_ps + dt.round() as Picos)
}

pub fn jitter_distribution(params: &DetectorParams) -> Option<Normal<f64>> {
    (params.jitter_sigma_ps > 0.0)
        .then(|| Normal::new(0.0, params.jitter_sigma_ps).expect("finite jitter"))
}

/// Counter value for a time on the receiver clock. Negative times wrap.
pub fn time_tag(t_ps: Picos, tick_ps: Picos, bits: u32) -> u32 {
    let ticks = t_ps.div_euclid(tick_ps);
    ticks.rem_euclid(1i64 << bits) as u32
}

/// Receiver clock: `b = t (1 + drift) + offset` in picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceiverClock {
    pub offset_ps: Picos,
    pub drift: f64,
}

impl ReceiverClock {
    pub fn from_config(config: &SessionConfig) -> Self {
        Self {
            offset_ps: seconds_to_picos(config.receiver_clock_offset_s),
            drift: config.receiver_clock_drift_ppm * 1e-6,
        }
    }

    pub fn local_time(&self, t_ps: Picos) -> Picos {
        t_ps + (t_ps as f64 * self.drift).round() as Picos + self.offset_ps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Exp;
    use PolarizationState::*;

    #[test]
    fn forced_basis_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(project(H, Basis::Linear, &mut rng), H);
            assert_eq!(project(R, Basis::Circular, &mut rng), R);
        }
    }

    fn shares(state: PolarizationState) -> [f64; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(state.index() as u64);
        let n = 1_000_000;
        let mut h = [0u64; 4];
        for _ in 0..n {
            h[sort_photon(state, &mut rng).index()] += 1;
        }
        h.map(|c| c as f64 / n as f64)
    }

    fn check(got: [f64; 4], want: [f64; 4]) {
        let n = 1e6;
        for (g, w) in got.iter().zip(want) {
            let sigma = (w * (1.0 - w) / n).sqrt();
            assert!((g - w).abs() <= 3.0 * sigma, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn born_rule_shares() {
        // index order H, V, L, R
        check(shares(H), [0.5, 0.0, 0.25, 0.25]);
        check(shares(L), [0.25, 0.25, 0.5, 0.0]);
        check(shares(R), [0.25, 0.25, 0.0, 0.5]);
    }

    #[test]
    fn ideal_detector_clicks_at_arrival() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = DetectorParams::ideal();
        let j = jitter_distribution(&p);
        assert_eq!(
            detect_photon(12_345, &p, j.as_ref(), &mut rng),
            Some(12_345)
        );
    }

    #[test]
    fn dead_time_blocks_second_arrival() {
        let mut d = Detector::new(50_000);
        assert!(d.offer(0));
        assert!(!d.offer(10_000));
        assert!(d.offer(50_000));
    }

    #[test]
    fn non_paralyzable_saturation() {
        // Poisson arrivals at 20 MHz, 50 ns dead time: r / (1 + r tau) = 10 MHz.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let exp = Exp::new(20e6 / 1e12).unwrap();
        let mut d = Detector::new(50_000);
        let mut t = 0.0;
        let horizon = 0.1e12;
        let mut clicks = 0u64;
        while t < horizon {
            t += exp.sample(&mut rng);
            if d.offer(t as Picos) {
                clicks += 1;
            }
        }
        let rate = clicks as f64 / 0.1;
        let expected = 20e6 / (1.0 + 20e6 * 50e-9);
        assert!(rate < 20e6);
        assert!((rate - expected).abs() / expected < 0.02, "{rate}");
    }

    #[test]
    fn tag_examples() {
        let tick = 10_000;
        assert_eq!(time_tag(0, tick, 30), 0);
        assert_eq!(time_tag(10_737_418_240_000, tick, 30), 0);
        assert_eq!(time_tag(5_000_000_000_000, tick, 30), 500_000_000);
        assert_eq!(time_tag(-10_000, tick, 30), (1u32 << 30) - 1);
    }

    #[test]
    fn clock_model() {
        let c = ReceiverClock {
            offset_ps: 1_000,
            drift: 5e-6,
        };
        assert_eq!(
            c.local_time(1_000_000_000_000),
            1_000_000_000_000 + 5_000_000 + 1_000
        );
    }
}
