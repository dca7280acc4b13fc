//! Shared protocol vocabulary: polarization states, bases, intensity classes
//! and the 3-bit slot code written to the transmitter's preparation log.
//!
//! All times in the crate are integer picoseconds ([`Picos`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer picoseconds.
pub type Picos = i64;

pub const PICOS_PER_SECOND: f64 = 1e12;

pub fn seconds_to_picos(s: f64) -> Picos {
    (s * PICOS_PER_SECOND).round() as Picos
}

pub fn picos_to_seconds(p: Picos) -> f64 {
    p as f64 / PICOS_PER_SECOND
}

/// Measurement basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    /// Circular basis, L/R. Carries the key.
    #[serde(rename = "LR")]
    Circular,
    /// Linear basis, H/V. Used for parameter estimation.
    #[serde(rename = "HV")]
    Linear,
}

impl Basis {
    pub fn label(self) -> &'static str {
        match self {
            Basis::Circular => "LR",
            Basis::Linear => "HV",
        }
    }

    pub fn detectors(self) -> [PolarizationState; 2] {
        match self {
            Basis::Circular => [PolarizationState::L, PolarizationState::R],
            Basis::Linear => [PolarizationState::H, PolarizationState::V],
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "LR" | "lr" | "RL" => Ok(Basis::Circular),
            "HV" | "hv" | "VH" => Ok(Basis::Linear),
            other => Err(Error::IllegalPreparation(format!(
                "unknown basis `{other}`"
            ))),
        }
    }
}

/// Photon polarization. Transmitted states are restricted to {H, L, R}; any
/// of the four can be a detector label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolarizationState {
    H,
    V,
    L,
    R,
}

impl PolarizationState {
    pub const ALL: [PolarizationState; 4] = [
        PolarizationState::H,
        PolarizationState::V,
        PolarizationState::L,
        PolarizationState::R,
    ];

    /// Detector ordering used for per-detector arrays.
    pub fn index(self) -> usize {
        match self {
            PolarizationState::H => 0,
            PolarizationState::V => 1,
            PolarizationState::L => 2,
            PolarizationState::R => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn basis(self) -> Basis {
        match self {
            PolarizationState::H | PolarizationState::V => Basis::Linear,
            PolarizationState::L | PolarizationState::R => Basis::Circular,
        }
    }

    /// The orthogonal state within the same basis.
    pub fn orthogonal(self) -> Self {
        match self {
            PolarizationState::H => PolarizationState::V,
            PolarizationState::V => PolarizationState::H,
            PolarizationState::L => PolarizationState::R,
            PolarizationState::R => PolarizationState::L,
        }
    }

    /// Whether the transmitter can prepare this state.
    pub fn is_transmittable(self) -> bool {
        !matches!(self, PolarizationState::V)
    }

    pub fn label(self) -> &'static str {
        match self {
            PolarizationState::H => "H",
            PolarizationState::V => "V",
            PolarizationState::L => "L",
            PolarizationState::R => "R",
        }
    }
}

impl fmt::Display for PolarizationState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PolarizationState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "H" | "h" => Ok(PolarizationState::H),
            "V" | "v" => Ok(PolarizationState::V),
            "L" | "l" => Ok(PolarizationState::L),
            "R" | "r" => Ok(PolarizationState::R),
            other => Err(Error::IllegalPreparation(format!(
                "unknown polarization `{other}`"
            ))),
        }
    }
}

/// Pulse intensity class chosen per slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityClass {
    Signal,
    Decoy,
    Vacuum,
}

impl IntensityClass {
    pub const ALL: [IntensityClass; 3] = [
        IntensityClass::Signal,
        IntensityClass::Decoy,
        IntensityClass::Vacuum,
    ];

    pub fn index(self) -> usize {
        match self {
            IntensityClass::Signal => 0,
            IntensityClass::Decoy => 1,
            IntensityClass::Vacuum => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            IntensityClass::Signal => "signal",
            IntensityClass::Decoy => "decoy",
            IntensityClass::Vacuum => "vacuum",
        }
    }
}

impl fmt::Display for IntensityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for IntensityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "signal" | "s" => Ok(IntensityClass::Signal),
            "decoy" | "d" => Ok(IntensityClass::Decoy),
            "vacuum" | "vac" | "0" => Ok(IntensityClass::Vacuum),
            other => Err(Error::IllegalPreparation(format!(
                "unknown intensity class `{other}`"
            ))),
        }
    }
}

/// Mean photon numbers of the two nonzero intensity classes. Vacuum is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityLevels {
    pub signal: f64,
    pub decoy: f64,
}

impl Default for IntensityLevels {
    fn default() -> Self {
        Self {
            signal: 1.0,
            decoy: 0.4,
        }
    }
}

impl IntensityLevels {
    pub fn mean_photon_number(&self, class: IntensityClass) -> f64 {
        match class {
            IntensityClass::Signal => self.signal,
            IntensityClass::Decoy => self.decoy,
            IntensityClass::Vacuum => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decoy > 0.0 && self.signal > self.decoy) || !self.signal.is_finite() {
            return Err(Error::config(
                "mean_photon_number",
                format!(
                    "need signal > decoy > 0, got signal={} decoy={}",
                    self.signal, self.decoy
                ),
            ));
        }
        Ok(())
    }
}

/// One of the seven legal per-slot choices: {H, L, R} x {signal, decoy}, or vacuum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotClass {
    state: Option<PolarizationState>,
    intensity: IntensityClass,
}

impl SlotClass {
    pub const VACUUM: SlotClass = SlotClass {
        state: None,
        intensity: IntensityClass::Vacuum,
    };

    /// All legal classes in code order (code `i` is `ALL[i]`).
    pub const ALL: [SlotClass; 7] = [
        SlotClass::pulse(PolarizationState::R, IntensityClass::Signal),
        SlotClass::pulse(PolarizationState::L, IntensityClass::Signal),
        SlotClass::pulse(PolarizationState::H, IntensityClass::Signal),
        SlotClass::pulse(PolarizationState::R, IntensityClass::Decoy),
        SlotClass::pulse(PolarizationState::L, IntensityClass::Decoy),
        SlotClass::pulse(PolarizationState::H, IntensityClass::Decoy),
        SlotClass::VACUUM,
    ];

    const fn pulse(state: PolarizationState, intensity: IntensityClass) -> Self {
        SlotClass {
            state: Some(state),
            intensity,
        }
    }

    /// Validating constructor. Vacuum ignores the state argument, except that a
    /// V preparation is never legal.
    pub fn new(state: Option<PolarizationState>, intensity: IntensityClass) -> Result<Self> {
        if let Some(s) = state {
            if !s.is_transmittable() {
                return Err(Error::IllegalPreparation(format!(
                    "state {s} is not prepared in the three-state protocol"
                )));
            }
        }
        match (state, intensity) {
            (_, IntensityClass::Vacuum) => Ok(SlotClass::VACUUM),
            (Some(s), i) => Ok(SlotClass::pulse(s, i)),
            (None, i) => Err(Error::IllegalPreparation(format!(
                "{i} pulse needs a polarization state"
            ))),
        }
    }

    pub fn state(self) -> Option<PolarizationState> {
        self.state
    }

    pub fn intensity(self) -> IntensityClass {
        self.intensity
    }

    pub fn basis(self) -> Option<Basis> {
        self.state.map(PolarizationState::basis)
    }

    pub fn is_vacuum(self) -> bool {
        self.intensity == IntensityClass::Vacuum
    }

    pub fn code(self) -> StateCode {
        let idx = SlotClass::ALL
            .iter()
            .position(|c| *c == self)
            .expect("SlotClass values are always legal");
        StateCode(idx as u8)
    }

    pub fn from_code(code: u8) -> Result<Self> {
        SlotClass::ALL
            .get(code as usize)
            .copied()
            .ok_or(Error::InvalidStateCode(code))
    }

    /// Short identifier, e.g. `R_signal`, `vacuum`.
    pub fn name(self) -> String {
        match self.state {
            Some(s) if !self.is_vacuum() => format!("{s}_{}", self.intensity),
            _ => "vacuum".to_string(),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        SlotClass::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(name.trim()))
            .ok_or_else(|| Error::IllegalPreparation(format!("unknown slot class `{name}`")))
    }
}

impl fmt::Display for SlotClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// 3-bit preparation code. Value 7 is reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateCode(pub u8);

pub const RESERVED_STATE_CODE: u8 = 7;

pub fn encode_state_code(
    state: Option<PolarizationState>,
    intensity: IntensityClass,
) -> Result<StateCode> {
    SlotClass::new(state, intensity).map(SlotClass::code)
}

pub fn decode_state_code(code: u8) -> Result<SlotClass> {
    SlotClass::from_code(code)
}

/// A single transmission slot as logged by the transmitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlicePreparation {
    pub slot_index: u64,
    pub class: SlotClass,
}

impl AlicePreparation {
    pub fn state_code(&self) -> StateCode {
        self.class.code()
    }
}

/// Public per-slot announcement: basis and intensity only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Announcement {
    pub basis: Option<Basis>,
    pub intensity: IntensityClass,
}

impl From<SlotClass> for Announcement {
    fn from(c: SlotClass) -> Self {
        Announcement {
            basis: c.basis(),
            intensity: c.intensity(),
        }
    }
}

impl Announcement {
    /// Small dense index used by lookup tables: 0..=4.
    pub fn index(self) -> usize {
        match (self.basis, self.intensity) {
            (_, IntensityClass::Vacuum) => 4,
            (Some(Basis::Circular), IntensityClass::Signal) => 0,
            (Some(Basis::Linear), IntensityClass::Signal) => 1,
            (Some(Basis::Circular), IntensityClass::Decoy) => 2,
            (Some(Basis::Linear), IntensityClass::Decoy) => 3,
            (None, _) => 4,
        }
    }

    pub const COUNT: usize = 5;
}
