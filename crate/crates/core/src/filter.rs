//! Spectral band-pass filter applied to measured spectra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::SideChannelProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FilterShape {
    #[default]
    Gaussian,
    TopHat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub center_nm: f64,
    pub fwhm_nm: f64,
    pub shape: FilterShape,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            center_nm: 656.3,
            fwhm_nm: 1.2,
            shape: FilterShape::Gaussian,
        }
    }
}

impl FilterSpec {
    /// Transmission in [0, 1], peak 1 at the center.
    pub fn transmission(&self, wavelength_nm: f64) -> f64 {
        let d = wavelength_nm - self.center_nm;
        match self.shape {
            FilterShape::Gaussian => {
                let sigma = self.fwhm_nm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
                (-0.5 * (d / sigma).powi(2)).exp()
            }
            FilterShape::TopHat => {
                if d.abs() <= 0.5 * self.fwhm_nm {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilteredSpectrum {
    pub profile: SideChannelProfile,
    /// Fraction of the incident light that passes.
    pub transmitted_fraction: f64,
}

/// Multiplies each bin by the transmission at its center and renormalizes.
/// Counts, when present, are scaled the same way.
pub fn apply_spectral_filter(
    profile: &SideChannelProfile,
    filter: &FilterSpec,
) -> Result<FilteredSpectrum> {
    let t: Vec<f64> = (0..profile.len())
        .map(|i| filter.transmission(profile.binning.center(i)))
        .collect();
    let fraction: f64 = profile.pdf.iter().zip(&t).map(|(p, t)| p * t).sum();
    if !(fraction > 0.0) {
        return Err(Error::FilterDisjoint);
    }
    let pdf = profile
        .pdf
        .iter()
        .zip(&t)
        .map(|(p, t)| p * t / fraction)
        .collect();
    let sigma = profile
        .sigma
        .iter()
        .zip(&t)
        .map(|(s, t)| s * t / fraction)
        .collect();
    let counts = profile
        .counts
        .as_ref()
        .map(|c| c.iter().zip(&t).map(|(c, t)| c * t).collect());
    Ok(FilteredSpectrum {
        profile: SideChannelProfile {
            binning: profile.binning,
            pdf,
            sigma,
            counts,
        },
        transmitted_fraction: fraction,
    })
}
