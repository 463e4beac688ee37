use serde::{Deserialize, Serialize};

use crate::sim::NUM_LEGS;

/// Periodic trot: diagonal pairs alternate stance and swing with no flight
/// phase. Leg `i` is in stance while `(phase + offset_i) mod 1` is below the
/// stance fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitSchedule {
    pub swing_duration: f64,
    pub stance_duration: f64,
    pub offsets: [f64; NUM_LEGS],
}

impl Default for GaitSchedule {
    fn default() -> Self {
        Self {
            swing_duration: 0.13,
            stance_duration: 0.13,
            // FR and RL together, FL and RR together.
            offsets: [0.0, 0.5, 0.5, 0.0],
        }
    }
}

impl GaitSchedule {
    #[inline]
    pub fn period(&self) -> f64 {
        self.swing_duration + self.stance_duration
    }

    #[inline]
    fn stance_fraction(&self) -> f64 {
        self.stance_duration / self.period()
    }

    /// Gait phase in `[0, 1)`.
    pub fn phase(&self, t: f64) -> f64 {
        (t / self.period()).rem_euclid(1.0)
    }

    /// Phase of one leg in `[0, 1)`; stance occupies the start of the cycle.
    /// Rounded so that tick times such as `0.13` do not land one ulp short
    /// of a boundary.
    fn leg_phase(&self, leg: usize, t: f64) -> f64 {
        let p = (self.phase(t) + self.offsets[leg]).rem_euclid(1.0);
        let snapped = (p * 1e9).round() / 1e9;
        if snapped >= 1.0 {
            0.0
        } else {
            snapped
        }
    }

    pub fn in_stance(&self, leg: usize, t: f64) -> bool {
        self.leg_phase(leg, t) < self.stance_fraction()
    }

    pub fn contact_at(&self, t: f64) -> [bool; NUM_LEGS] {
        [0, 1, 2, 3].map(|leg| self.in_stance(leg, t))
    }

    /// Progress through the current stance or swing segment in `[0, 1)`.
    pub fn segment_progress(&self, leg: usize, t: f64) -> f64 {
        let p = self.leg_phase(leg, t);
        let sf = self.stance_fraction();
        if p < sf {
            p / sf
        } else {
            (p - sf) / (1.0 - sf)
        }
    }

    /// Time until this leg's current segment ends.
    pub fn time_remaining(&self, leg: usize, t: f64) -> f64 {
        let dur = if self.in_stance(leg, t) {
            self.stance_duration
        } else {
            self.swing_duration
        };
        (1.0 - self.segment_progress(leg, t)) * dur
    }
}
