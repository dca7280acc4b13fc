//! Session timeline: active transmission intervals separated by data-save halts.

use serde::Serialize;

use crate::config::SessionConfig;
use crate::error::{Error, Result};
use crate::model::Picos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ActiveInterval {
    pub start_ps: Picos,
    pub end_ps: Picos,
    /// Global index of the first slot sent in this interval.
    pub first_slot: u64,
    pub slots: u64,
}

impl ActiveInterval {
    pub fn len_ps(&self) -> Picos {
        self.end_ps - self.start_ps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Halt {
    pub start_ps: Picos,
    pub end_ps: Picos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionTimeline {
    pub duration_ps: Picos,
    pub slot_period_ps: Picos,
    pub intervals: Vec<ActiveInterval>,
    /// Halts that separate two active intervals.
    pub halts: Vec<Halt>,
    /// Idle time after the last active interval (a halt cut short by the end).
    pub trailing_idle_ps: Picos,
}

impl SessionTimeline {
    pub fn new(duration_s: f64, config: &SessionConfig) -> Result<Self> {
        if !(duration_s > 0.0) || !duration_s.is_finite() {
            return Err(Error::config("duration", "duration must be positive"));
        }
        Self::from_picos(
            crate::model::seconds_to_picos(duration_s),
            config.slot_period_ps(),
            config.halt_interval_ps(),
            config.halt_duration_ps(),
        )
    }

    pub fn from_picos(
        duration_ps: Picos,
        slot_period_ps: Picos,
        halt_interval_ps: Picos,
        halt_duration_ps: Picos,
    ) -> Result<Self> {
        if duration_ps <= 0 {
            return Err(Error::config("duration", "duration must be positive"));
        }
        let mut intervals = Vec::new();
        let mut halts = Vec::new();
        let mut t = 0;
        let mut slot = 0u64;
        let mut trailing_idle_ps = 0;
        while t < duration_ps {
            let end = (t + halt_interval_ps).min(duration_ps);
            let slots = ((end - t) / slot_period_ps) as u64;
            intervals.push(ActiveInterval {
                start_ps: t,
                end_ps: end,
                first_slot: slot,
                slots,
            });
            slot += slots;
            if end == duration_ps {
                break;
            }
            let halt_end = end + halt_duration_ps;
            if halt_end >= duration_ps {
                trailing_idle_ps = duration_ps - end;
                break;
            }
            halts.push(Halt {
                start_ps: end,
                end_ps: halt_end,
            });
            t = halt_end;
        }
        Ok(Self {
            duration_ps,
            slot_period_ps,
            intervals,
            halts,
            trailing_idle_ps,
        })
    }

    pub fn total_slots(&self) -> u64 {
        self.intervals.iter().map(|i| i.slots).sum()
    }

    pub fn active_time_ps(&self) -> Picos {
        self.intervals.iter().map(|i| i.len_ps()).sum()
    }

    pub fn halt_time_ps(&self) -> Picos {
        self.halts
            .iter()
            .map(|h| h.end_ps - h.start_ps)
            .sum::<Picos>()
            + self.trailing_idle_ps
    }

    fn interval_of(&self, slot_index: u64) -> Option<&ActiveInterval> {
        let i = self
            .intervals
            .partition_point(|iv| iv.first_slot + iv.slots <= slot_index);
        self.intervals
            .get(i)
            .filter(|iv| slot_index >= iv.first_slot)
    }

    /// Start time of a global slot index.
    pub fn slot_time(&self, slot_index: u64) -> Option<Picos> {
        self.interval_of(slot_index)
            .map(|iv| iv.start_ps + (slot_index - iv.first_slot) as Picos * self.slot_period_ps)
    }

    /// Slot whose period contains time `t`, if the transmitter was active.
    pub fn slot_at(&self, t: Picos) -> Option<u64> {
        let i = self.intervals.partition_point(|iv| iv.end_ps <= t);
        let iv = self.intervals.get(i)?;
        if t < iv.start_ps {
            return None;
        }
        let k = ((t - iv.start_ps) / self.slot_period_ps) as u64;
        (k < iv.slots).then_some(iv.first_slot + k)
    }
}
