//! Circle and helix reference trajectories flown at constant angular rate.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid trajectory: {0}")]
pub struct TrajectoryError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Circle,
    Helix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub radius: f64,
    /// Total climb over `duration` (helix only).
    pub height: f64,
    /// rad/s
    pub angular_rate: f64,
    pub duration: f64,
    pub center: [f64; 3],
}

impl TrajectorySpec {
    /// Radius 0.3 m at 0.5 m altitude, one revolution in 6 s.
    pub fn default_circle() -> Self {
        Self {
            kind: TrajectoryKind::Circle,
            radius: 0.3,
            height: 0.0,
            angular_rate: TAU / 6.0,
            duration: 6.0,
            center: [0.0, 0.0, 0.5],
        }
    }

    /// Radius 0.3 m climbing 0.5 m over one 6 s revolution.
    pub fn default_helix() -> Self {
        Self {
            kind: TrajectoryKind::Helix,
            radius: 0.3,
            height: 0.5,
            angular_rate: TAU / 6.0,
            duration: 6.0,
            center: [0.0, 0.0, 0.5],
        }
    }

    pub fn validate(&self, control_frequency: f64) -> Result<(), TrajectoryError> {
        let fail = |m: &str| Err(TrajectoryError(m.to_string()));
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return fail("radius must be > 0");
        }
        if self.kind == TrajectoryKind::Helix && !(self.height > 0.0 && self.height.is_finite()) {
            return fail("helix height must be > 0");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return fail("duration must be > 0");
        }
        if !self.angular_rate.is_finite() || self.center.iter().any(|c| !c.is_finite()) {
            return fail("angular_rate and center must be finite");
        }
        if !(control_frequency > 0.0) {
            return fail("control frequency must be > 0");
        }
        if self.max_spacing(control_frequency) >= 0.05 {
            return fail("adjacent waypoints must be closer than 0.05 m");
        }
        Ok(())
    }

    /// Upper bound on the distance between consecutive waypoints.
    pub fn max_spacing(&self, control_frequency: f64) -> f64 {
        let dt = 1.0 / control_frequency;
        let horizontal = self.radius * self.angular_rate.abs() * dt;
        let climb = match self.kind {
            TrajectoryKind::Circle => 0.0,
            TrajectoryKind::Helix => self.height / self.duration * dt,
        };
        horizontal.hypot(climb)
    }

    pub fn position_at(&self, t: f64) -> Vector3<f64> {
        let theta = self.angular_rate * t;
        let c = Vector3::from(self.center);
        let z = match self.kind {
            TrajectoryKind::Circle => c.z,
            TrajectoryKind::Helix => c.z + self.height * t / self.duration,
        };
        Vector3::new(c.x + self.radius * theta.cos(), c.y + self.radius * theta.sin(), z)
    }
}

/// Waypoints at `t = k / control_frequency` for `k = 0..=N`, `N = round(duration * f)`.
pub fn sample_trajectory(spec: &TrajectorySpec, control_frequency: f64) -> Result<Vec<Vector3<f64>>, TrajectoryError> {
    spec.validate(control_frequency)?;
    let n = (spec.duration * control_frequency).round() as usize;
    Ok((0..=n)
        .map(|k| spec.position_at(k as f64 / control_frequency))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn circle_starts_at_radius_offset() {
        let spec = TrajectorySpec::default_circle();
        let wps = sample_trajectory(&spec, 50.0).unwrap();
        let c = Vector3::from(spec.center);
        assert_abs_diff_eq!((wps[0] - c).x, 0.3, epsilon = 1e-15);
        assert_eq!((wps[0] - c).y, 0.0);
        assert_eq!(wps.len(), 301);
        assert!((wps[300] - wps[0]).norm() < 1e-9);
    }

    #[test]
    fn helix_climbs_its_height() {
        let spec = TrajectorySpec::default_helix();
        let wps = sample_trajectory(&spec, 50.0).unwrap();
        assert_abs_diff_eq!(wps.last().unwrap().z - wps[0].z, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = TrajectorySpec::default_helix();
        s.height = 0.0;
        assert!(s.validate(50.0).is_err());
        let mut s = TrajectorySpec::default_circle();
        s.radius = -1.0;
        assert!(s.validate(50.0).is_err());
        let mut s = TrajectorySpec::default_circle();
        s.angular_rate = 100.0;
        assert!(s.validate(50.0).is_err());
    }
}
