//! Session configuration.
//!
//! The on-disk format is flat `key = value` TOML. Every key is optional and
//! falls back to the hardware defaults below; unknown keys are rejected with
//! a diagnostic naming the key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{seconds_to_picos, IntensityLevels, Picos, PolarizationState, SlotClass};

/// Photon-number statistics of the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhotonStatistics {
    /// Bose-Einstein: P(n) = mu^n / (1+mu)^(n+1).
    Thermal,
    /// P(n) = exp(-mu) mu^n / n!.
    Poisson,
}

/// Which degree of freedom the eavesdropper measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Spectral,
    Temporal,
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Axis::Spectral => "spectral",
            Axis::Temporal => "temporal",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "spectral" => Ok(Axis::Spectral),
            "temporal" => Ok(Axis::Temporal),
            other => Err(Error::config("axis", format!("unknown axis `{other}`"))),
        }
    }
}

/// Seven inclusive byte ranges, one per [`SlotClass`] in code order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[u8; 2]>", into = "Vec<[u8; 2]>")]
pub struct ThresholdTable {
    ranges: [[u8; 2]; 7],
    lookup: Box<[u8; 256]>,
}

impl ThresholdTable {
    /// Transmitter defaults: R 0-50, L 51-101, H 102-179, decoy R 180-193,
    /// decoy L 194-207, decoy H 208-228, vacuum 229-255.
    pub fn nominal() -> Self {
        Self::new([
            [0, 50],
            [51, 101],
            [102, 179],
            [180, 193],
            [194, 207],
            [208, 228],
            [229, 255],
        ])
        .expect("default thresholds partition 0..=255")
    }

    pub fn new(ranges: [[u8; 2]; 7]) -> Result<Self> {
        let mut lookup = Box::new([u8::MAX; 256]);
        for (class, [lo, hi]) in ranges.iter().enumerate() {
            if lo > hi {
                return Err(Error::config(
                    "selection_thresholds",
                    format!("range {class} is empty ({lo} > {hi})"),
                ));
            }
            for b in *lo..=*hi {
                if lookup[b as usize] != u8::MAX {
                    return Err(Error::config(
                        "selection_thresholds",
                        format!("byte {b} is covered twice"),
                    ));
                }
                lookup[b as usize] = class as u8;
            }
        }
        if let Some(gap) = lookup.iter().position(|&c| c == u8::MAX) {
            return Err(Error::config(
                "selection_thresholds",
                format!("byte {gap} is not covered"),
            ));
        }
        Ok(Self { ranges, lookup })
    }

    pub fn ranges(&self) -> &[[u8; 2]; 7] {
        &self.ranges
    }

    /// Number of byte values mapped to each class.
    pub fn widths(&self) -> [u32; 7] {
        let mut w = [0u32; 7];
        for (i, [lo, hi]) in self.ranges.iter().enumerate() {
            w[i] = (*hi as u32) - (*lo as u32) + 1;
        }
        w
    }

    pub fn class_of(&self, byte: u8) -> SlotClass {
        SlotClass::ALL[self.lookup[byte as usize] as usize]
    }
}

impl TryFrom<Vec<[u8; 2]>> for ThresholdTable {
    type Error = Error;
    fn try_from(v: Vec<[u8; 2]>) -> Result<Self> {
        let ranges: [[u8; 2]; 7] = v.try_into().map_err(|v: Vec<[u8; 2]>| {
            Error::config(
                "selection_thresholds",
                format!("expected 7 ranges, got {}", v.len()),
            )
        })?;
        ThresholdTable::new(ranges)
    }
}

impl From<ThresholdTable> for Vec<[u8; 2]> {
    fn from(t: ThresholdTable) -> Self {
        t.ranges.to_vec()
    }
}

impl Default for ThresholdTable {
    fn default() -> Self {
        Self::nominal()
    }
}

/// Everything needed to simulate and post-process a session.
///
/// Field units are SI (seconds, hertz) in the file; the `*_ps` accessors give
/// the integer-picosecond values used internally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub clock_rate_hz: f64,
    pub optical_pulse_width_s: f64,
    pub timing_step_s: f64,
    pub tagger_rate_hz: f64,
    pub tagger_bits: u32,
    pub selection_thresholds: ThresholdTable,
    pub signal_mean_photon_number: f64,
    pub decoy_mean_photon_number: f64,
    pub photon_statistics: PhotonStatistics,

    pub channel_transmissivity: f64,
    /// Default residual polarization error for every transmitted state.
    pub polarization_error_prob: f64,
    pub polarization_error_r: Option<f64>,
    pub polarization_error_l: Option<f64>,
    pub polarization_error_h: Option<f64>,
    pub background_rate_hz: f64,

    pub detector_efficiency: f64,
    pub dark_rate_hz: f64,
    pub jitter_sigma_s: f64,
    pub dead_time_s: f64,
    pub saturation_rate_hz: f64,

    pub halt_interval_s: f64,
    pub halt_duration_s: f64,

    pub rng_seed: u64,

    /// Receiver counter reading at transmitter time zero (simulation only).
    pub receiver_clock_offset_s: f64,
    /// Relative receiver clock rate error, parts per million (simulation only).
    pub receiver_clock_drift_ppm: f64,

    pub eve_axis: Axis,
    /// Tampering switch: the channel blocks every single-photon packet.
    pub eve_block_single_photons: bool,
    /// Directory of per-state `bin_center,counts` CSV profiles. Built-in
    /// synthetic profiles are used when unset.
    pub profile_dir: Option<PathBuf>,

    pub sync_prior_min_s: f64,
    pub sync_prior_max_s: f64,
    pub sync_min_detections: usize,
    pub sync_max_detections: usize,
    pub sync_background_fraction: f64,
    pub sync_confidence_threshold: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        let half_rollover = (1u64 << 30) as f64 / 1e8 / 2.0;
        Self {
            clock_rate_hz: 12.5e6,
            optical_pulse_width_s: 10e-9,
            timing_step_s: 78e-12,
            tagger_rate_hz: 100e6,
            tagger_bits: 30,
            selection_thresholds: ThresholdTable::nominal(),
            signal_mean_photon_number: 1.0,
            decoy_mean_photon_number: 0.4,
            photon_statistics: PhotonStatistics::Thermal,
            channel_transmissivity: 0.083,
            polarization_error_prob: 0.0,
            polarization_error_r: None,
            polarization_error_l: None,
            polarization_error_h: None,
            background_rate_hz: 0.0,
            detector_efficiency: 0.65,
            dark_rate_hz: 500.0,
            jitter_sigma_s: 170e-12,
            dead_time_s: 50e-9,
            saturation_rate_hz: 5e6,
            halt_interval_s: 6.71,
            halt_duration_s: 0.5,
            rng_seed: 0,
            receiver_clock_offset_s: 0.0,
            receiver_clock_drift_ppm: 0.0,
            eve_axis: Axis::Temporal,
            eve_block_single_photons: false,
            profile_dir: None,
            sync_prior_min_s: -half_rollover,
            sync_prior_max_s: half_rollover,
            sync_min_detections: 10_000,
            sync_max_detections: 200_000,
            sync_background_fraction: 0.01,
            sync_confidence_threshold: 0.95,
        }
    }
}

/// Names accepted by [`SessionConfig::preset`].
pub const PRESETS: [&str; 3] = ["paper_defaults", "tabletop", "noiseless"];

impl SessionConfig {
    /// Built-in configurations:
    /// - `paper_defaults`: hardware defaults, no polarization error.
    /// - `tabletop`: per-channel residual errors 1.93 % (R), 1.50 % (L), 2.05 % (H).
    /// - `noiseless`: no polarization error, no dark counts or background.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::default();
        match name {
            "paper_defaults" | "default" => Some(base),
            "tabletop" => Some(Self {
                polarization_error_r: Some(0.0193),
                polarization_error_l: Some(0.0150),
                polarization_error_h: Some(0.0205),
                ..base
            }),
            "noiseless" => Some(Self {
                dark_rate_hz: 0.0,
                background_rate_hz: 0.0,
                ..base
            }),
            _ => None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SessionConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".to_string());
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a preset by name, or a TOML file by path.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let text = std::fs::read_to_string(Path::new(spec))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        }
        fn nonneg(key: &str, v: f64) -> Result<()> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be nonnegative, got {v}")))
            }
        }
        fn unit(key: &str, v: f64, max: f64) -> Result<()> {
            if (0.0..=max).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(
                    key,
                    format!("must lie in [0, {max}], got {v}"),
                ))
            }
        }
        fn whole_picos(key: &str, seconds: f64) -> Result<()> {
            let ps = seconds * 1e12;
            if (ps - ps.round()).abs() > 1e-6 * ps.abs().max(1.0) {
                return Err(Error::config(
                    key,
                    format!("{seconds} s is not a whole number of picoseconds"),
                ));
            }
            Ok(())
        }

        positive("clock_rate_hz", self.clock_rate_hz)?;
        whole_picos("clock_rate_hz", 1.0 / self.clock_rate_hz)?;
        positive("optical_pulse_width_s", self.optical_pulse_width_s)?;
        positive("timing_step_s", self.timing_step_s)?;
        whole_picos("timing_step_s", self.timing_step_s)?;
        positive("tagger_rate_hz", self.tagger_rate_hz)?;
        whole_picos("tagger_rate_hz", 1.0 / self.tagger_rate_hz)?;
        if !(1..=62).contains(&self.tagger_bits) {
            return Err(Error::config("tagger_bits", "must lie in 1..=62"));
        }
        IntensityLevels {
            signal: self.signal_mean_photon_number,
            decoy: self.decoy_mean_photon_number,
        }
        .validate()
        .map_err(|_| {
            Error::config(
                "signal_mean_photon_number",
                "need signal > decoy > 0 (decoy_mean_photon_number)",
            )
        })?;
        unit("channel_transmissivity", self.channel_transmissivity, 1.0)?;
        unit("polarization_error_prob", self.polarization_error_prob, 0.5)?;
        for (key, v) in [
            ("polarization_error_r", self.polarization_error_r),
            ("polarization_error_l", self.polarization_error_l),
            ("polarization_error_h", self.polarization_error_h),
        ] {
            if let Some(v) = v {
                unit(key, v, 0.5)?;
            }
        }
        nonneg("background_rate_hz", self.background_rate_hz)?;
        unit("detector_efficiency", self.detector_efficiency, 1.0)?;
        nonneg("dark_rate_hz", self.dark_rate_hz)?;
        nonneg("jitter_sigma_s", self.jitter_sigma_s)?;
        nonneg("dead_time_s", self.dead_time_s)?;
        positive("saturation_rate_hz", self.saturation_rate_hz)?;
        positive("halt_interval_s", self.halt_interval_s)?;
        nonneg("halt_duration_s", self.halt_duration_s)?;
        let slot = self.slot_period_ps();
        if self.halt_interval_ps() % slot != 0 {
            return Err(Error::config(
                "halt_interval_s",
                "must be a whole number of slot periods",
            ));
        }
        if self.halt_duration_ps() % slot != 0 {
            return Err(Error::config(
                "halt_duration_s",
                "must be a whole number of slot periods",
            ));
        }
        if !self.receiver_clock_offset_s.is_finite() {
            return Err(Error::config("receiver_clock_offset_s", "must be finite"));
        }
        if self.receiver_clock_drift_ppm.abs() > 1000.0 {
            return Err(Error::config(
                "receiver_clock_drift_ppm",
                "must lie within +-1000 ppm",
            ));
        }
        if !(self.sync_prior_min_s < self.sync_prior_max_s) {
            return Err(Error::config(
                "sync_prior_min_s",
                "must be below sync_prior_max_s",
            ));
        }
        if self.sync_max_detections < self.sync_min_detections.max(1) {
            return Err(Error::config(
                "sync_max_detections",
                "must be at least sync_min_detections",
            ));
        }
        unit(
            "sync_background_fraction",
            self.sync_background_fraction,
            1.0,
        )?;
        unit(
            "sync_confidence_threshold",
            self.sync_confidence_threshold,
            1.0,
        )?;
        Ok(())
    }

    pub fn slot_period_ps(&self) -> Picos {
        seconds_to_picos(1.0 / self.clock_rate_hz)
    }

    pub fn timing_step_ps(&self) -> Picos {
        seconds_to_picos(self.timing_step_s)
    }

    pub fn tagger_tick_ps(&self) -> Picos {
        seconds_to_picos(1.0 / self.tagger_rate_hz)
    }

    pub fn rollover_ps(&self) -> Picos {
        self.tagger_tick_ps() << self.tagger_bits
    }

    pub fn halt_interval_ps(&self) -> Picos {
        seconds_to_picos(self.halt_interval_s)
    }

    pub fn halt_duration_ps(&self) -> Picos {
        seconds_to_picos(self.halt_duration_s)
    }

    pub fn intensity_levels(&self) -> IntensityLevels {
        IntensityLevels {
            signal: self.signal_mean_photon_number,
            decoy: self.decoy_mean_photon_number,
        }
    }

    /// Residual polarization flip probability for photons sent in `state`.
    pub fn polarization_error_for(&self, state: PolarizationState) -> f64 {
        let specific = match state {
            PolarizationState::R => self.polarization_error_r,
            PolarizationState::L => self.polarization_error_l,
            PolarizationState::H => self.polarization_error_h,
            PolarizationState::V => None,
        };
        specific.unwrap_or(self.polarization_error_prob)
    }

    pub fn set_polarization_error(&mut self, eps: f64) {
        self.polarization_error_prob = eps;
        self.polarization_error_r = None;
        self.polarization_error_l = None;
        self.polarization_error_h = None;
    }
}
