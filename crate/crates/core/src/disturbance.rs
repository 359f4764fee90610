//! Step and pulse force disturbances, and the randomised schedule used while
//! training.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::dynamics::ExternalForce;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DisturbanceError {
    #[error("invalid axis set `{0}` (use letters from x, y, z)")]
    InvalidAxes(String),
    #[error("invalid disturbance: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// On from `start` until the end of the episode.
    Step,
    /// On during `[start, start + duration)`.
    Pulse,
}

/// Non-empty subset of the world axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Axes([bool; 3]);

impl Axes {
    pub const X: Axes = Axes([true, false, false]);
    pub const Y: Axes = Axes([false, true, false]);
    pub const Z: Axes = Axes([false, false, true]);
    pub const XYZ: Axes = Axes([true, true, true]);

    pub fn new(x: bool, y: bool, z: bool) -> Result<Self, DisturbanceError> {
        if !(x || y || z) {
            return Err(DisturbanceError::InvalidAxes(String::new()));
        }
        Ok(Axes([x, y, z]))
    }

    pub fn mask(&self) -> [bool; 3] {
        self.0
    }
}

impl fmt::Display for Axes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (on, c) in self.0.iter().zip(['x', 'y', 'z']) {
            if *on {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Axes {
    type Err = DisturbanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut mask = [false; 3];
        for c in s.chars() {
            let i = match c.to_ascii_lowercase() {
                'x' => 0,
                'y' => 1,
                'z' => 2,
                _ => return Err(DisturbanceError::InvalidAxes(s.to_string())),
            };
            mask[i] = true;
        }
        Axes::new(mask[0], mask[1], mask[2]).map_err(|_| DisturbanceError::InvalidAxes(s.to_string()))
    }
}

impl Serialize for Axes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Axes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub profile: Profile,
    pub axes: Axes,
    /// Newtons on every active axis.
    pub magnitude: f64,
    pub start: f64,
    /// Ignored for [`Profile::Step`].
    pub duration: f64,
}

impl DisturbanceSpec {
    pub fn step(axes: Axes, magnitude: f64, start: f64) -> Self {
        Self {
            profile: Profile::Step,
            axes,
            magnitude,
            start,
            duration: f64::INFINITY,
        }
    }

    pub fn pulse(axes: Axes, magnitude: f64, start: f64, duration: f64) -> Self {
        Self {
            profile: Profile::Pulse,
            axes,
            magnitude,
            start,
            duration,
        }
    }

    pub fn validate(&self) -> Result<(), DisturbanceError> {
        if !self.magnitude.is_finite() {
            return Err(DisturbanceError::Invalid("magnitude must be finite".into()));
        }
        if !(self.start.is_finite() && self.start >= 0.0) {
            return Err(DisturbanceError::Invalid("start must be finite and >= 0".into()));
        }
        if self.profile == Profile::Pulse && !(self.duration > 0.0) {
            return Err(DisturbanceError::Invalid("pulse duration must be > 0".into()));
        }
        Ok(())
    }

    pub fn is_active(&self, t: f64) -> bool {
        match self.profile {
            Profile::Step => t >= self.start,
            Profile::Pulse => t >= self.start && t < self.start + self.duration,
        }
    }

    pub fn force_at(&self, t: f64) -> ExternalForce {
        if !self.is_active(t) {
            return ExternalForce::zero();
        }
        let m = self.axes.mask().map(|on| if on { self.magnitude } else { 0.0 });
        ExternalForce::new(m[0], m[1], m[2])
    }
}

/// Piecewise-constant random schedule: every `switch_interval` iterations a
/// new axis set and magnitude are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingDisturbanceSchedule {
    pub phases: Vec<Axes>,
    pub switch_interval: u64,
    pub magnitude_range: [f64; 2],
    pub seed: u64,
}

impl Default for TrainingDisturbanceSchedule {
    fn default() -> Self {
        Self {
            phases: vec![Axes::X, Axes::Z, Axes::XYZ],
            switch_interval: 25,
            magnitude_range: [0.005, 0.02],
            seed: 0,
        }
    }
}

impl TrainingDisturbanceSchedule {
    pub fn validate(&self) -> Result<(), DisturbanceError> {
        if self.phases.is_empty() {
            return Err(DisturbanceError::Invalid("phases must be non-empty".into()));
        }
        if self.switch_interval < 1 {
            return Err(DisturbanceError::Invalid("switch_interval must be >= 1".into()));
        }
        let [lo, hi] = self.magnitude_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(DisturbanceError::Invalid(
                "magnitude_range must be finite with min <= max".into(),
            ));
        }
        Ok(())
    }

    /// Index of the phase block that `iteration` falls in.
    pub fn block(&self, iteration: u64) -> u64 {
        iteration / self.switch_interval
    }

    /// The disturbance in force at `iteration`. Pure in `(self, iteration)`.
    pub fn schedule_next(&self, iteration: u64) -> DisturbanceSpec {
        let block = self.block(iteration);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(self.seed, "disturbance/block", block));
        let axes = self.phases[rng.random_range(0..self.phases.len())];
        let [lo, hi] = self.magnitude_range;
        let magnitude = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        DisturbanceSpec::step(axes, magnitude, 0.0)
    }
}

/// How an environment obtains its external force.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum DisturbanceSource {
    #[default]
    None,
    Fixed(DisturbanceSpec),
    /// Redrawn per RL iteration; the iteration counter survives resets.
    Training(TrainingDisturbanceSchedule),
}
