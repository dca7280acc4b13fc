//! Per-state side-channel distributions: binned temporal and spectral
//! profiles with their counting uncertainties, CSV I/O, and the built-in
//! synthetic source profiles used when no measured data is supplied.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::config::Axis;
use crate::error::{Error, Result};
use crate::model::{IntensityClass, PolarizationState, SlotClass};

/// Uniform binning, described by the center of bin 0 and the bin width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binning {
    pub first_center: f64,
    pub width: f64,
    pub len: usize,
}

impl Binning {
    pub fn new(first_center: f64, width: f64, len: usize) -> Self {
        Self {
            first_center,
            width,
            len,
        }
    }

    pub fn center(&self, i: usize) -> f64 {
        self.first_center + self.width * i as f64
    }

    pub fn lower_edge(&self, i: usize) -> f64 {
        self.center(i) - 0.5 * self.width
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.center(i)).collect()
    }

    /// Exact-enough equality for checking that histograms share a grid.
    pub fn matches(&self, other: &Binning) -> bool {
        let tol = 1e-9 * self.width.abs().max(1e-300);
        self.len == other.len
            && (self.width - other.width).abs() <= tol
            && (self.first_center - other.first_center).abs() <= 1e-6 * self.width.abs()
    }

    /// Infers a uniform binning from listed centers.
    pub fn from_centers(centers: &[f64]) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::BinningMismatch(
                "need at least two bins to infer a width".into(),
            ));
        }
        let width = centers[1] - centers[0];
        if !(width > 0.0) {
            return Err(Error::BinningMismatch("bin centers must increase".into()));
        }
        for (i, w) in centers.windows(2).enumerate() {
            if ((w[1] - w[0]) - width).abs() > 1e-6 * width {
                return Err(Error::BinningMismatch(format!(
                    "non-uniform bin width at bin {}",
                    i + 1
                )));
            }
        }
        Ok(Self::new(centers[0], width, centers.len()))
    }
}

/// A normalized distribution over one measurement axis, with per-bin
/// standard errors on the probability scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SideChannelProfile {
    pub binning: Binning,
    pub pdf: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Raw counts behind `pdf`; `None` marks an exact (noise-free) profile.
    pub counts: Option<Vec<f64>>,
}

impl SideChannelProfile {
    /// Builds from raw counts. Probabilities are `n_i / N` and the per-bin
    /// error is `sqrt(n_i) / N`.
    pub fn from_counts(binning: Binning, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != binning.len {
            return Err(Error::BinningMismatch(format!(
                "{} counts for {} bins",
                counts.len(),
                binning.len
            )));
        }
        if counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidDistribution(
                "counts must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("histogram is empty".into()));
        }
        let pdf = counts.iter().map(|c| c / total).collect();
        let sigma = counts.iter().map(|c| c.sqrt() / total).collect();
        Ok(Self {
            binning,
            pdf,
            sigma,
            counts: Some(counts),
        })
    }

    /// An exact profile with zero uncertainty. The input is renormalized.
    pub fn exact(binning: Binning, weights: Vec<f64>) -> Result<Self> {
        let mut p = Self::from_counts(binning, weights)?;
        p.counts = None;
        p.sigma.iter_mut().for_each(|s| *s = 0.0);
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.pdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pdf.is_empty()
    }

    pub fn total_counts(&self) -> Option<f64> {
        self.counts.as_ref().map(|c| c.iter().sum())
    }

    pub fn mean(&self) -> f64 {
        self.pdf
            .iter()
            .enumerate()
            .map(|(i, p)| p * self.binning.center(i))
            .sum()
    }

    pub fn mode_index(&self) -> usize {
        self.pdf
            .iter()
            .enumerate()
            .fold(
                (0, f64::MIN),
                |best, (i, &p)| if p > best.1 { (i, p) } else { best },
            )
            .0
    }

    /// Full width at half maximum, linearly interpolated between bins.
    pub fn fwhm(&self) -> f64 {
        let m = self.mode_index();
        let half = 0.5 * self.pdf[m];
        let w = self.binning.width;
        let mut left = self.binning.center(0);
        for i in (0..m).rev() {
            if self.pdf[i] < half {
                let f = (half - self.pdf[i]) / (self.pdf[i + 1] - self.pdf[i]);
                left = self.binning.center(i) + f * w;
                break;
            }
        }
        let mut right = self.binning.center(self.len() - 1);
        for i in m + 1..self.len() {
            if self.pdf[i] < half {
                let f = (self.pdf[i - 1] - half) / (self.pdf[i - 1] - self.pdf[i]);
                right = self.binning.center(i - 1) + f * w;
                break;
            }
        }
        (right - left).max(w)
    }

    /// Total-variation style L1 distance between two profiles on one grid.
    pub fn l1_distance(&self, other: &SideChannelProfile) -> Result<f64> {
        if !self.binning.matches(&other.binning) {
            return Err(Error::BinningMismatch("profiles use different bins".into()));
        }
        Ok(l1(&self.pdf, &other.pdf))
    }
}

pub(crate) fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Temporal and spectral profiles of one transmitted class.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceProfile {
    pub class: SlotClass,
    /// Emission-time distribution relative to the slot start, in ps.
    pub temporal: SideChannelProfile,
    /// Wavelength distribution, in nm.
    pub spectral: SideChannelProfile,
}

impl SourceProfile {
    pub fn axis(&self, axis: Axis) -> &SideChannelProfile {
        match axis {
            Axis::Temporal => &self.temporal,
            Axis::Spectral => &self.spectral,
        }
    }
}

/// Profiles for the six non-vacuum classes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileSet {
    profiles: BTreeMap<SlotClass, SourceProfile>,
}

pub const TEMPORAL_BIN_PS: f64 = 20.0;
pub const SPECTRAL_BIN_NM: f64 = 0.3;

impl ProfileSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, profile: SourceProfile) {
        self.profiles.insert(profile.class, profile);
    }

    pub fn get(&self, class: SlotClass) -> Option<&SourceProfile> {
        self.profiles.get(&class)
    }

    pub fn require(&self, class: SlotClass) -> Result<&SourceProfile> {
        self.get(class)
            .ok_or_else(|| Error::MissingProfile(class.name()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &SourceProfile> {
        self.profiles.values()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    /// Count-weighted mean emission time over all classes, in ps.
    pub fn mean_emission_ps(&self) -> f64 {
        if self.profiles.is_empty() {
            return 0.0;
        }
        self.iter().map(|p| p.temporal.mean()).sum::<f64>() / self.len() as f64
    }

    /// Synthetic RC-LED-like profiles: ~10 ns optical pulses with decoy pulses
    /// showing slower edges, and ~7 nm wide spectra within ~2 nm of each other
    /// with a small blue shift at decoy current. `temporal_events` and
    /// `spectral_events` set the count totals behind each histogram.
    pub fn synthetic(temporal_events: f64, spectral_events: f64) -> Self {
        let mut set = Self::new();
        for class in SlotClass::ALL.into_iter().filter(|c| !c.is_vacuum()) {
            let state = class.state().expect("non-vacuum");
            let decoy = class.intensity() == IntensityClass::Decoy;
            let (dt, peak) = match state {
                PolarizationState::R => (0.0, 655.6),
                PolarizationState::L => (40.0, 656.4),
                PolarizationState::H => (-30.0, 657.2),
                PolarizationState::V => unreachable!(),
            };
            let (rise, fall) = if decoy {
                (650.0, 900.0)
            } else {
                (500.0, 700.0)
            };
            let temporal = synthetic_pulse(2_000.0 + dt, 12_000.0 + dt, rise, fall);
            let spectral = synthetic_spectrum(if decoy { peak - 0.4 } else { peak }, 7.0);
            let temporal = scaled_counts(&temporal, temporal_events);
            let spectral = scaled_counts(&spectral, spectral_events);
            set.insert(SourceProfile {
                class,
                temporal: SideChannelProfile::from_counts(temporal_binning(), temporal)
                    .expect("synthetic temporal profile"),
                spectral: SideChannelProfile::from_counts(spectral_binning(), spectral)
                    .expect("synthetic spectral profile"),
            });
        }
        set
    }

    /// Loads `<class>_temporal.csv` and `<class>_spectral.csv` for every
    /// non-vacuum class from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut set = Self::new();
        for class in SlotClass::ALL.into_iter().filter(|c| !c.is_vacuum()) {
            let name = class.name();
            let temporal = read_profile_csv(&dir.join(format!("{name}_temporal.csv")))?;
            let spectral = read_profile_csv(&dir.join(format!("{name}_spectral.csv")))?;
            set.insert(SourceProfile {
                class,
                temporal,
                spectral,
            });
        }
        Ok(set)
    }
}

fn temporal_binning() -> Binning {
    // 0..16 ns in 20 ps bins.
    Binning::new(10.0, TEMPORAL_BIN_PS, 800)
}

fn spectral_binning() -> Binning {
    Binning::new(640.0, SPECTRAL_BIN_NM, 108)
}

fn synthetic_pulse(on: f64, off: f64, rise: f64, fall: f64) -> Vec<f64> {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    temporal_binning()
        .centers()
        .into_iter()
        .map(|t| sig((t - on) / rise) * sig((off - t) / fall))
        .collect()
}

fn synthetic_spectrum(peak: f64, fwhm: f64) -> Vec<f64> {
    // Lorentzian-Gaussian mix keeps some weight in the wings.
    let s = fwhm / (8.0 * std::f64::consts::LN_2).sqrt();
    let g = fwhm / 2.0;
    spectral_binning()
        .centers()
        .into_iter()
        .map(|l| {
            let d = l - peak;
            0.8 * (-0.5 * (d / s).powi(2)).exp() + 0.2 / (1.0 + (d / g).powi(2))
        })
        .collect()
}

fn scaled_counts(shape: &[f64], total: f64) -> Vec<f64> {
    let norm: f64 = shape.iter().sum();
    shape
        .iter()
        .map(|v| (v / norm * total).round().max(1.0))
        .collect()
}

/// Reads a `bin_center,counts` CSV. Lines starting with `#` are ignored.
pub fn read_profile_csv(path: &Path) -> Result<SideChannelProfile> {
    let file = std::fs::File::open(path)?;
    read_profile(std::io::BufReader::new(file))
}

pub fn read_profile(reader: impl BufRead) -> Result<SideChannelProfile> {
    let mut centers = Vec::new();
    let mut counts = Vec::new();
    let mut header_seen = false;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line.replace(' ', "") != "bin_center,counts" {
                return Err(Error::parse(n + 1, "expected header `bin_center,counts`"));
            }
            header_seen = true;
            continue;
        }
        let mut parts = line.split(',');
        let (Some(c), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(n + 1, "expected two columns"));
        };
        centers.push(
            c.trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(n + 1, e.to_string()))?,
        );
        counts.push(
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(n + 1, e.to_string()))?,
        );
    }
    if !header_seen {
        return Err(Error::parse(0, "empty profile file"));
    }
    SideChannelProfile::from_counts(Binning::from_centers(&centers)?, counts)
}

/// Writes counts when available, otherwise the pdf itself.
pub fn write_profile(mut w: impl Write, profile: &SideChannelProfile) -> Result<()> {
    writeln!(w, "bin_center,counts")?;
    let values = profile.counts.as_ref().unwrap_or(&profile.pdf);
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{},{}", profile.binning.center(i), v)?;
    }
    Ok(())
}
