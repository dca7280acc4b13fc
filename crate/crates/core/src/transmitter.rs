//! Transmitter: random class selection from a byte, photon-number sampling,
//! and per-slot wavepacket emission with temporal and spectral structure.

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, Geometric, Poisson};

use crate::config::{PhotonStatistics, ThresholdTable};
use crate::error::{Error, Result};
use crate::model::{
    AlicePreparation, IntensityClass, IntensityLevels, Picos, PolarizationState, SlotClass,
};
use crate::profile::{ProfileSet, SideChannelProfile};

/// Maps a random byte to a slot class through the threshold table.
pub fn select_state(random_byte: u8, thresholds: &ThresholdTable) -> SlotClass {
    thresholds.class_of(random_byte)
}

/// Probability of each class, `range width / 256`, in code order.
pub fn sending_probabilities(thresholds: &ThresholdTable) -> Vec<(SlotClass, f64)> {
    thresholds
        .widths()
        .iter()
        .zip(SlotClass::ALL)
        .map(|(&w, c)| (c, w as f64 / 256.0))
        .collect()
}

/// Draws a photon number with mean `mu`.
pub fn sample_photon_number<R: Rng + ?Sized>(
    mu: f64,
    statistics: PhotonStatistics,
    rng: &mut R,
) -> u32 {
    if mu <= 0.0 {
        return 0;
    }
    match statistics {
        // Geometric counts failures before the first success: P(n) = (1-p)^n p,
        // with p = 1/(1+mu) this is the Bose-Einstein distribution.
        PhotonStatistics::Thermal => Geometric::new(1.0 / (1.0 + mu))
            .expect("valid geometric parameter")
            .sample(rng) as u32,
        PhotonStatistics::Poisson => Poisson::new(mu).expect("valid mean").sample(rng) as u32,
    }
}

/// Probability of `n` photons.
pub fn photon_number_pmf(mu: f64, statistics: PhotonStatistics, n: u32) -> f64 {
    if mu <= 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    match statistics {
        PhotonStatistics::Thermal => {
            (n as f64 * mu.ln() - (n as f64 + 1.0) * (1.0 + mu).ln()).exp()
        }
        PhotonStatistics::Poisson => {
            let ln_fact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
            (-mu + n as f64 * mu.ln() - ln_fact).exp()
        }
    }
}

/// Probability generating function `E[x^n]`.
pub fn photon_number_pgf(mu: f64, statistics: PhotonStatistics, x: f64) -> f64 {
    match statistics {
        PhotonStatistics::Thermal => 1.0 / (1.0 + mu * (1.0 - x)),
        PhotonStatistics::Poisson => (-mu * (1.0 - x)).exp(),
    }
}

/// Per-state delay and width corrections, in units of the timing step.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize,
)]
pub struct TimingAdjustment {
    pub offset_steps: i32,
    pub width_steps: i32,
}

impl TimingAdjustment {
    pub const ZERO: TimingAdjustment = TimingAdjustment {
        offset_steps: 0,
        width_steps: 0,
    };

    pub fn offset_ps(&self, step_ps: Picos) -> Picos {
        self.offset_steps as Picos * step_ps
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photon {
    /// Absolute emission time, ps.
    pub time_ps: Picos,
    pub wavelength_nm: f64,
    pub polarization: PolarizationState,
}

/// Photons emitted in one slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Wavepacket {
    pub slot_index: u64,
    pub photons: Vec<Photon>,
}

impl Wavepacket {
    pub fn photon_count(&self) -> usize {
        self.photons.len()
    }
}

/// Fast sampler over a profile, returning bin-center values.
#[derive(Debug, Clone)]
pub(crate) struct BinSampler {
    index: WeightedAliasIndex<f64>,
    first_center: f64,
    width: f64,
}

impl BinSampler {
    pub(crate) fn new(profile: &SideChannelProfile) -> Result<Self> {
        let index = WeightedAliasIndex::new(profile.pdf.clone())
            .map_err(|e| Error::InvalidDistribution(e.to_string()))?;
        Ok(Self {
            index,
            first_center: profile.binning.first_center,
            width: profile.binning.width,
        })
    }

    pub(crate) fn sample_bin<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }

    pub(crate) fn center(&self, bin: usize) -> f64 {
        self.first_center + self.width * bin as f64
    }
}

struct ClassEmitter {
    temporal: BinSampler,
    spectral: BinSampler,
    offset_ps: Picos,
}

/// Emits wavepackets for every non-vacuum class from a profile set.
pub struct Transmitter {
    emitters: [Option<ClassEmitter>; 7],
    /// Photon-number tables for signal and decoy.
    numbers: [PhotonNumberTable; 2],
}

/// Inverse-CDF table for photon numbers; the tail beyond the table holds
/// less than 1e-15 of the mass.
#[derive(Debug, Clone)]
pub struct PhotonNumberTable {
    cdf: Vec<f64>,
}

impl PhotonNumberTable {
    pub fn new(mu: f64, statistics: PhotonStatistics) -> Self {
        let mut cdf = Vec::new();
        let mut acc = 0.0;
        let mut n = 0;
        while acc < 1.0 - 1e-15 && n < 10_000 {
            acc += photon_number_pmf(mu, statistics, n);
            cdf.push(acc);
            n += 1;
        }
        Self { cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        self.cdf
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cdf.len()) as u32
    }
}

impl Transmitter {
    /// `adjustments` apply per class; width corrections are folded into the
    /// temporal pdf once, offsets are added to every emission time.
    pub fn new(
        profiles: &ProfileSet,
        adjustments: &[(SlotClass, TimingAdjustment)],
        timing_step_ps: Picos,
        levels: IntensityLevels,
        statistics: PhotonStatistics,
    ) -> Result<Self> {
        let mut emitters: [Option<ClassEmitter>; 7] = Default::default();
        for profile in profiles.iter() {
            let adj = adjustments
                .iter()
                .find(|(c, _)| *c == profile.class)
                .map(|(_, a)| *a)
                .unwrap_or_default();
            let temporal = if adj.width_steps != 0 {
                crate::alignment::adjust_profile(
                    &profile.temporal,
                    TimingAdjustment {
                        offset_steps: 0,
                        width_steps: adj.width_steps,
                    },
                    timing_step_ps,
                )?
            } else {
                profile.temporal.clone()
            };
            emitters[profile.class.code().0 as usize] = Some(ClassEmitter {
                temporal: BinSampler::new(&temporal)?,
                spectral: BinSampler::new(&profile.spectral)?,
                offset_ps: adj.offset_ps(timing_step_ps),
            });
        }
        Ok(Self {
            emitters,
            numbers: [
                PhotonNumberTable::new(levels.signal, statistics),
                PhotonNumberTable::new(levels.decoy, statistics),
            ],
        })
    }

    /// Emits into a reusable wavepacket. Photons carry the prepared
    /// polarization; emission times are `slot_start + offset + t` with `t`
    /// drawn from the temporal profile and wavelengths from the spectral one.
    pub fn emit_into<R: Rng + ?Sized>(
        &self,
        prep: &AlicePreparation,
        slot_start_ps: Picos,
        rng: &mut R,
        out: &mut Wavepacket,
    ) -> Result<()> {
        out.slot_index = prep.slot_index;
        out.photons.clear();
        let Some(state) = prep.class.state().filter(|_| !prep.class.is_vacuum()) else {
            return Ok(());
        };
        let emitter = self.emitters[prep.class.code().0 as usize]
            .as_ref()
            .ok_or_else(|| Error::MissingProfile(prep.class.name()))?;
        let n = match prep.class.intensity() {
            IntensityClass::Signal => self.numbers[0].sample(rng),
            IntensityClass::Decoy => self.numbers[1].sample(rng),
            IntensityClass::Vacuum => 0,
        };
        for _ in 0..n {
            let tb = emitter.temporal.sample_bin(rng);
            let sb = emitter.spectral.sample_bin(rng);
            out.photons.push(Photon {
                time_ps: slot_start_ps
                    + emitter.offset_ps
                    + emitter.temporal.center(tb).round() as Picos,
                wavelength_nm: emitter.spectral.center(sb),
                polarization: state,
            });
        }
        Ok(())
    }

    pub fn emit_wavepacket<R: Rng + ?Sized>(
        &self,
        prep: &AlicePreparation,
        slot_start_ps: Picos,
        rng: &mut R,
    ) -> Result<Wavepacket> {
        let mut wp = Wavepacket::default();
        self.emit_into(prep, slot_start_ps, rng, &mut wp)?;
        Ok(wp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PolarizationState::*;
    use crate::profile::{Binning, SourceProfile};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn class(s: PolarizationState, i: IntensityClass) -> SlotClass {
        SlotClass::new(Some(s), i).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let t = ThresholdTable::nominal();
        assert_eq!(select_state(0, &t), class(R, IntensityClass::Signal));
        assert_eq!(select_state(50, &t), class(R, IntensityClass::Signal));
        assert_eq!(select_state(51, &t), class(L, IntensityClass::Signal));
        assert_eq!(select_state(102, &t), class(H, IntensityClass::Signal));
        assert_eq!(select_state(179, &t), class(H, IntensityClass::Signal));
        assert_eq!(select_state(180, &t), class(R, IntensityClass::Decoy));
        assert_eq!(select_state(229, &t), SlotClass::VACUUM);
        assert_eq!(select_state(255, &t), SlotClass::VACUUM);
    }

    #[test]
    fn sending_probability_examples() {
        let p = sending_probabilities(&ThresholdTable::nominal());
        assert!((p.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(p[0].1, 51.0 / 256.0);
        assert_eq!(p[2].1, 78.0 / 256.0);
        assert_eq!(p[6].1, 27.0 / 256.0);
    }

    #[test]
    fn vacuum_has_no_photons() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stats in [PhotonStatistics::Thermal, PhotonStatistics::Poisson] {
            for _ in 0..1000 {
                assert_eq!(sample_photon_number(0.0, stats, &mut rng), 0);
            }
        }
    }

    #[test]
    fn pmfs_normalize() {
        for stats in [PhotonStatistics::Thermal, PhotonStatistics::Poisson] {
            for mu in [0.1, 0.4, 1.0, 3.0] {
                let s: f64 = (0..200).map(|n| photon_number_pmf(mu, stats, n)).sum();
                assert!((s - 1.0).abs() < 1e-10);
                let mean: f64 = (0..200)
                    .map(|n| n as f64 * photon_number_pmf(mu, stats, n))
                    .sum();
                assert!((mean - mu).abs() < 1e-9);
                let x: f64 = 0.3;
                let g: f64 = (0..200)
                    .map(|n| x.powi(n as i32) * photon_number_pmf(mu, stats, n))
                    .sum();
                assert!((g - photon_number_pgf(mu, stats, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn thermal_sampling_moments() {
        // Oracle: P(0) = 1/(1+mu) = 0.5, mean 1, var mu(1+mu) = 2.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut zeros = 0u64;
        let mut sum = 0u64;
        for _ in 0..n {
            let k = sample_photon_number(1.0, PhotonStatistics::Thermal, &mut rng);
            sum += k as u64;
            zeros += (k == 0) as u64;
        }
        let mean = sum as f64 / n as f64;
        assert!(
            (mean - 1.0).abs() < 3.0 * (2.0f64 / n as f64).sqrt(),
            "mean {mean}"
        );
        let p0 = zeros as f64 / n as f64;
        assert!(
            (p0 - 0.5).abs() < 3.0 * (0.25f64 / n as f64).sqrt(),
            "p0 {p0}"
        );
    }

    #[test]
    fn poisson_multiphoton_tail() {
        // Oracle: P(n>=2) = 1 - e^{-0.4}(1 + 0.4).
        let expected = 1.0 - (-0.4f64).exp() * 1.4;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1_000_000;
        let multi = (0..n)
            .filter(|_| sample_photon_number(0.4, PhotonStatistics::Poisson, &mut rng) >= 2)
            .count();
        let p = multi as f64 / n as f64;
        let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((p - expected).abs() < 3.0 * sigma, "{p} vs {expected}");
    }

    #[test]
    fn table_sampler_matches_pmf() {
        let table = PhotonNumberTable::new(1.0, PhotonStatistics::Thermal);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 1_000_000;
        let mut hist = [0u64; 6];
        for _ in 0..n {
            let k = table.sample(&mut rng) as usize;
            if k < 6 {
                hist[k] += 1;
            }
        }
        // chi-square over n = 0..5, 1% critical value for 5 dof is 15.09
        let chi2: f64 = hist
            .iter()
            .enumerate()
            .map(|(k, &h)| {
                let e = n as f64 * photon_number_pmf(1.0, PhotonStatistics::Thermal, k as u32);
                (h as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < 15.09, "{chi2}");
    }

    fn delta_profiles(bin: usize) -> ProfileSet {
        let mut w = vec![0.0; 16];
        w[bin] = 1.0;
        let temporal = SideChannelProfile::exact(Binning::new(0.0, 20.0, 16), w.clone()).unwrap();
        let spectral = SideChannelProfile::exact(Binning::new(650.0, 0.3, 16), w).unwrap();
        let mut set = ProfileSet::new();
        for c in SlotClass::ALL.into_iter().filter(|c| !c.is_vacuum()) {
            set.insert(SourceProfile {
                class: c,
                temporal: temporal.clone(),
                spectral: spectral.clone(),
            });
        }
        set
    }

    #[test]
    fn delta_profile_with_two_step_offset() {
        let set = delta_profiles(5);
        let c = class(R, IntensityClass::Signal);
        let tx = Transmitter::new(
            &set,
            &[(
                c,
                TimingAdjustment {
                    offset_steps: 2,
                    width_steps: 0,
                },
            )],
            78,
            IntensityLevels {
                signal: 5.0,
                decoy: 0.4,
            },
            PhotonStatistics::Poisson,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prep = AlicePreparation {
            slot_index: 9,
            class: c,
        };
        let mut total = 0;
        for _ in 0..100 {
            let wp = tx.emit_wavepacket(&prep, 800_000, &mut rng).unwrap();
            total += wp.photon_count();
            for ph in &wp.photons {
                assert_eq!(ph.time_ps, 800_000 + 100 + 156);
                assert_eq!(ph.polarization, R);
            }
        }
        assert!(total > 0);
    }

    #[test]
    fn vacuum_prep_emits_nothing_and_missing_profile_rejected() {
        let set = delta_profiles(0);
        let tx = Transmitter::new(
            &set,
            &[],
            78,
            IntensityLevels::default(),
            PhotonStatistics::Thermal,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wp = tx
            .emit_wavepacket(
                &AlicePreparation {
                    slot_index: 0,
                    class: SlotClass::VACUUM,
                },
                0,
                &mut rng,
            )
            .unwrap();
        assert_eq!(wp.photon_count(), 0);

        let empty = Transmitter::new(
            &ProfileSet::new(),
            &[],
            78,
            IntensityLevels::default(),
            PhotonStatistics::Thermal,
        )
        .unwrap();
        let prep = AlicePreparation {
            slot_index: 0,
            class: class(H, IntensityClass::Signal),
        };
        assert!(matches!(
            empty.emit_wavepacket(&prep, 0, &mut rng),
            Err(Error::MissingProfile(_))
        ));
    }

    #[test]
    fn emission_histogram_matches_profile() {
        let weights: Vec<f64> = (0..16).map(|i| 1.0 + (i as f64 - 7.5).powi(2)).collect();
        let temporal = SideChannelProfile::exact(Binning::new(0.0, 20.0, 16), weights).unwrap();
        let mut set = ProfileSet::new();
        let c = class(L, IntensityClass::Signal);
        set.insert(SourceProfile {
            class: c,
            temporal: temporal.clone(),
            spectral: temporal.clone(),
        });
        let tx = Transmitter::new(
            &set,
            &[(
                c,
                TimingAdjustment {
                    offset_steps: -1,
                    width_steps: 0,
                },
            )],
            78,
            IntensityLevels {
                signal: 1.0,
                decoy: 0.5,
            },
            PhotonStatistics::Poisson,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hist = [0u64; 16];
        let mut n = 0u64;
        let prep = AlicePreparation {
            slot_index: 0,
            class: c,
        };
        let mut wp = Wavepacket::default();
        while n < 1_000_000 {
            tx.emit_into(&prep, 0, &mut rng, &mut wp).unwrap();
            for ph in &wp.photons {
                let bin = ((ph.time_ps + 78) / 20) as usize;
                hist[bin] += 1;
                n += 1;
            }
        }
        for (i, &h) in hist.iter().enumerate() {
            let p = temporal.pdf[i];
            let expected = p * n as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (h as f64 - expected).abs() < 4.0 * sigma,
                "bin {i}: {h} vs {expected}"
            );
        }
    }
}
