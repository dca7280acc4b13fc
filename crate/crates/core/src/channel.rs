//! Free-space channel (loss, residual polarization error) and the side-channel
//! eavesdropper.

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::config::{Axis, SessionConfig};
use crate::error::{Error, Result};
use crate::model::{AlicePreparation, PolarizationState};
use crate::profile::{ProfileSet, SourceProfile};
use crate::transmitter::Wavepacket;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub transmissivity: f64,
    /// Flip probability per prepared state, indexed by `PolarizationState::index`.
    pub polarization_error: [f64; 4],
    pub background_rate_hz: f64,
    /// Photon-number-splitting style tampering: single-photon packets are
    /// blocked, multiphoton packets pass with the ordinary loss.
    pub block_single_photons: bool,
}

impl ChannelParams {
    pub fn ideal() -> Self {
        Self {
            transmissivity: 1.0,
            polarization_error: [0.0; 4],
            background_rate_hz: 0.0,
            block_single_photons: false,
        }
    }

    pub fn from_config(config: &SessionConfig) -> Self {
        let mut eps = [0.0; 4];
        for s in PolarizationState::ALL {
            eps[s.index()] = config.polarization_error_for(s);
        }
        Self {
            transmissivity: config.channel_transmissivity,
            polarization_error: eps,
            background_rate_hz: config.background_rate_hz,
            block_single_photons: config.eve_block_single_photons,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.transmissivity) {
            return Err(Error::config(
                "channel_transmissivity",
                "must lie in [0, 1]",
            ));
        }
        if self
            .polarization_error
            .iter()
            .any(|e| !(0.0..=0.5).contains(e))
        {
            return Err(Error::config(
                "polarization_error_prob",
                "must lie in [0, 0.5]",
            ));
        }
        if !(self.background_rate_hz >= 0.0) {
            return Err(Error::config("background_rate_hz", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Applies loss and polarization flips in place. Emission times and
/// wavelengths are never touched.
pub fn transmit_in_place<R: Rng + ?Sized>(
    wp: &mut Wavepacket,
    params: &ChannelParams,
    rng: &mut R,
) {
    if params.block_single_photons && wp.photons.len() == 1 {
        wp.photons.clear();
        return;
    }
    let eta = params.transmissivity;
    wp.photons.retain_mut(|ph| {
        if eta < 1.0 && !rng.random_bool(eta) {
            return false;
        }
        let eps = params.polarization_error[ph.polarization.index()];
        if eps > 0.0 && rng.random_bool(eps) {
            ph.polarization = ph.polarization.orthogonal();
        }
        true
    });
}

pub fn transmit<R: Rng + ?Sized>(
    wp: &Wavepacket,
    params: &ChannelParams,
    rng: &mut R,
) -> Wavepacket {
    let mut out = wp.clone();
    transmit_in_place(&mut out, params, rng);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EveObservation {
    pub slot_index: u64,
    pub axis: Axis,
    pub bin_index: u32,
}

/// Per-class samplers over Eve's measurement axis.
pub struct EveSampler {
    axis: Axis,
    tables: [Option<WeightedAliasIndex<f64>>; 7],
}

impl EveSampler {
    pub fn new(profiles: &ProfileSet, axis: Axis) -> Result<Self> {
        let mut tables: [Option<WeightedAliasIndex<f64>>; 7] = Default::default();
        for p in profiles.iter() {
            tables[p.class.code().0 as usize] = Some(
                WeightedAliasIndex::new(p.axis(axis).pdf.clone())
                    .map_err(|e| Error::InvalidDistribution(e.to_string()))?,
            );
        }
        Ok(Self { axis, tables })
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    /// `Ok(None)` for vacuum slots, where nothing is emitted.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        prep: &AlicePreparation,
        rng: &mut R,
    ) -> Result<Option<EveObservation>> {
        if prep.class.is_vacuum() {
            return Ok(None);
        }
        let table = self.tables[prep.class.code().0 as usize]
            .as_ref()
            .ok_or_else(|| Error::MissingProfile(prep.class.name()))?;
        Ok(Some(EveObservation {
            slot_index: prep.slot_index,
            axis: self.axis,
            bin_index: table.sample(rng) as u32,
        }))
    }
}

/// One-off draw of Eve's bin for a slot from the profile of its class.
pub fn sample_eve_outcome<R: Rng + ?Sized>(
    prep: &AlicePreparation,
    profile: &SourceProfile,
    axis: Axis,
    rng: &mut R,
) -> Result<Option<EveObservation>> {
    if prep.class.is_vacuum() {
        return Ok(None);
    }
    if profile.class != prep.class {
        return Err(Error::MissingProfile(prep.class.name()));
    }
    let table = WeightedAliasIndex::new(profile.axis(axis).pdf.clone())
        .map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    Ok(Some(EveObservation {
        slot_index: prep.slot_index,
        axis,
        bin_index: table.sample(rng) as u32,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IntensityClass, SlotClass};
    use crate::profile::{Binning, SideChannelProfile};
    use crate::transmitter::Photon;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn packet(n: usize, pol: PolarizationState) -> Wavepacket {
        Wavepacket {
            slot_index: 3,
            photons: (0..n)
                .map(|i| Photon {
                    time_ps: 1000 + i as i64,
                    wavelength_nm: 656.0 + i as f64,
                    polarization: pol,
                })
                .collect(),
        }
    }

    #[test]
    fn ideal_channel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wp = packet(5, PolarizationState::L);
        assert_eq!(transmit(&wp, &ChannelParams::ideal(), &mut rng), wp);
    }

    #[test]
    fn opaque_channel_drops_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ChannelParams {
            transmissivity: 0.0,
            ..ChannelParams::ideal()
        };
        assert_eq!(
            transmit(&packet(5, PolarizationState::H), &p, &mut rng).photon_count(),
            0
        );
    }

    #[test]
    fn half_transmissivity_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ChannelParams {
            transmissivity: 0.5,
            ..ChannelParams::ideal()
        };
        let n = 1_000_000;
        let mut wp = Wavepacket::default();
        let mut survivors = 0;
        for _ in 0..n {
            wp.photons.clear();
            wp.photons.extend(packet(1, PolarizationState::R).photons);
            transmit_in_place(&mut wp, &p, &mut rng);
            survivors += wp.photon_count();
        }
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((survivors as f64 - 0.5 * n as f64).abs() < 3.0 * sigma);
    }

    #[test]
    fn flips_stay_in_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ChannelParams {
            polarization_error: [0.5; 4],
            ..ChannelParams::ideal()
        };
        for s in [
            PolarizationState::H,
            PolarizationState::L,
            PolarizationState::R,
        ] {
            let out = transmit(&packet(1000, s), &p, &mut rng);
            assert!(out
                .photons
                .iter()
                .all(|ph| ph.polarization.basis() == s.basis()));
            assert!(out.photons.iter().any(|ph| ph.polarization != s));
        }
    }

    #[test]
    fn single_photon_blocking() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ChannelParams {
            block_single_photons: true,
            ..ChannelParams::ideal()
        };
        assert_eq!(
            transmit(&packet(1, PolarizationState::H), &p, &mut rng).photon_count(),
            0
        );
        assert_eq!(
            transmit(&packet(2, PolarizationState::H), &p, &mut rng).photon_count(),
            2
        );
    }

    proptest! {
        #[test]
        fn transmit_never_adds_or_alters(n in 0usize..20, eta in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ChannelParams { transmissivity: eta, ..ChannelParams::ideal() };
            let wp = packet(n, PolarizationState::R);
            let out = transmit(&wp, &p, &mut rng);
            prop_assert!(out.photon_count() <= n);
            for ph in &out.photons {
                prop_assert!(wp.photons.iter().any(|q| q.time_ps == ph.time_ps && q.wavelength_nm == ph.wavelength_nm));
                prop_assert_eq!(ph.polarization, PolarizationState::R);
            }
        }
    }

    fn profile_with(class: SlotClass, pdf: Vec<f64>) -> SourceProfile {
        let b = Binning::new(0.0, 1.0, pdf.len());
        let p = SideChannelProfile::exact(b, pdf).unwrap();
        SourceProfile {
            class,
            temporal: p.clone(),
            spectral: p,
        }
    }

    #[test]
    fn eve_delta_and_vacuum() {
        let c = SlotClass::new(Some(PolarizationState::H), IntensityClass::Signal).unwrap();
        let mut pdf = vec![0.0; 10];
        pdf[7] = 1.0;
        let prof = profile_with(c, pdf);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prep = AlicePreparation {
            slot_index: 4,
            class: c,
        };
        for _ in 0..100 {
            let o = sample_eve_outcome(&prep, &prof, Axis::Spectral, &mut rng)
                .unwrap()
                .unwrap();
            assert_eq!(o.bin_index, 7);
            assert_eq!(o.slot_index, 4);
        }
        let vac = AlicePreparation {
            slot_index: 5,
            class: SlotClass::VACUUM,
        };
        assert!(sample_eve_outcome(&vac, &prof, Axis::Spectral, &mut rng)
            .unwrap()
            .is_none());
    }

    #[test]
    fn eve_multinomial_frequencies() {
        let c = SlotClass::new(Some(PolarizationState::R), IntensityClass::Decoy).unwrap();
        let mut set = ProfileSet::new();
        set.insert(profile_with(c, vec![0.2, 0.3, 0.5]));
        let sampler = EveSampler::new(&set, Axis::Temporal).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prep = AlicePreparation {
            slot_index: 0,
            class: c,
        };
        let n = 1_000_000;
        let mut hist = [0u64; 3];
        for _ in 0..n {
            hist[sampler.sample(&prep, &mut rng).unwrap().unwrap().bin_index as usize] += 1;
        }
        for (h, p) in hist.iter().zip([0.2, 0.3, 0.5]) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*h as f64 - n as f64 * p).abs() < 3.0 * sigma);
        }
    }
}
