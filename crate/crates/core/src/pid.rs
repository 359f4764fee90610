//! Cascaded position -> attitude PID controller with 18 gains.
//!
//! The position loop turns position error into an acceleration demand, which
//! becomes a collective thrust and small-angle roll/pitch setpoints. The
//! attitude loop turns attitude error into body torques, and the X mixer is
//! inverted to get rotor speeds.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, Controller, MotorCommand, QuadParams, State12};

/// Nine position gains followed by nine attitude gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidParams18 {
    pub pos_kp: [f64; 3],
    pub pos_ki: [f64; 3],
    pub pos_kd: [f64; 3],
    pub att_kp: [f64; 3],
    pub att_ki: [f64; 3],
    pub att_kd: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("gain {index} ({name}) must be finite and >= 0, got {value}")]
pub struct InvalidGain {
    pub index: usize,
    pub name: &'static str,
    pub value: f64,
}

pub const GAIN_NAMES: [&str; 18] = [
    "pos_kp_x", "pos_kp_y", "pos_kp_z", "pos_ki_x", "pos_ki_y", "pos_ki_z", "pos_kd_x",
    "pos_kd_y", "pos_kd_z", "att_kp_roll", "att_kp_pitch", "att_kp_yaw", "att_ki_roll",
    "att_ki_pitch", "att_ki_yaw", "att_kd_roll", "att_kd_pitch", "att_kd_yaw",
];

impl PidParams18 {
    pub fn zeros() -> Self {
        Self::from_array(&[0.0; 18])
    }

    /// Stable reference gains for the default airframe at a 50 Hz control rate.
    pub fn golden() -> Self {
        Self {
            pos_kp: [2.5, 2.5, 3.0],
            pos_ki: [0.1, 0.1, 0.2],
            pos_kd: [1.8, 1.8, 2.0],
            att_kp: [2.0e-3, 2.0e-3, 1.5e-3],
            att_ki: [1.0e-4, 1.0e-4, 5.0e-5],
            att_kd: [2.5e-4, 2.5e-4, 3.0e-4],
        }
    }

    pub fn to_array(&self) -> [f64; 18] {
        let mut out = [0.0; 18];
        for (chunk, v) in out.chunks_mut(3).zip([
            self.pos_kp,
            self.pos_ki,
            self.pos_kd,
            self.att_kp,
            self.att_ki,
            self.att_kd,
        ]) {
            chunk.copy_from_slice(&v);
        }
        out
    }

    pub fn from_array(v: &[f64; 18]) -> Self {
        let t = |i: usize| [v[i], v[i + 1], v[i + 2]];
        Self {
            pos_kp: t(0),
            pos_ki: t(3),
            pos_kd: t(6),
            att_kp: t(9),
            att_ki: t(12),
            att_kd: t(15),
        }
    }

    pub fn validate(&self) -> Result<(), InvalidGain> {
        for (index, value) in self.to_array().into_iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(InvalidGain {
                    index,
                    name: GAIN_NAMES[index],
                    value,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidLimits {
    /// Clamp on each position-error integral component.
    pub pos_integral: f64,
    /// Clamp on each attitude-error integral component.
    pub att_integral: f64,
    /// Clamp on commanded roll and pitch, rad.
    pub max_tilt: f64,
}

impl Default for PidLimits {
    fn default() -> Self {
        Self {
            pos_integral: 2.0,
            att_integral: 1.0,
            max_tilt: 0.3,
        }
    }
}

/// Integrator memory owned by one flight.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub pos_integral: Vector3<f64>,
    pub att_integral: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionOutput {
    pub desired_att: Vector3<f64>,
    pub collective_thrust: f64,
    pub state: PidState,
}

fn clamp_each(v: Vector3<f64>, bound: f64) -> Vector3<f64> {
    v.map(|c| c.clamp(-bound, bound))
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::from(a)
}

/// Gains, limits and airframe needed to run the cascade. Immutable; all
/// integrator state lives in [`PidState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidController {
    pub gains: PidParams18,
    pub limits: PidLimits,
    pub quad: QuadParams,
    /// Control period, s.
    pub dt: f64,
}

impl PidController {
    pub fn new(gains: PidParams18, limits: PidLimits, quad: QuadParams, dt: f64) -> Self {
        Self {
            gains,
            limits,
            quad,
            dt,
        }
    }

    pub fn position_control(
        &self,
        state: &State12,
        target_pos: &Vector3<f64>,
        target_vel: &Vector3<f64>,
        s: &PidState,
        dt: f64,
    ) -> PositionOutput {
        let g = &self.gains;
        let err = target_pos - state.pos;
        let vel_err = target_vel - state.lin_vel;
        let pos_integral = clamp_each(s.pos_integral + err * dt, self.limits.pos_integral);
        let accel = v3(g.pos_kp).component_mul(&err)
            + v3(g.pos_ki).component_mul(&pos_integral)
            + v3(g.pos_kd).component_mul(&vel_err);

        let gravity = self.quad.gravity;
        let (sy, cy) = state.att.z.sin_cos();
        let pitch = (accel.x * cy + accel.y * sy) / gravity;
        let roll = (accel.x * sy - accel.y * cy) / gravity;
        let tilt = self.limits.max_tilt;
        let desired_att = Vector3::new(roll.clamp(-tilt, tilt), pitch.clamp(-tilt, tilt), 0.0);

        let collective_thrust =
            (self.quad.mass * (gravity + accel.z)).clamp(0.0, self.quad.max_thrust());
        PositionOutput {
            desired_att,
            collective_thrust,
            state: PidState {
                pos_integral,
                ..*s
            },
        }
    }

    pub fn attitude_control(
        &self,
        state: &State12,
        desired_att: &Vector3<f64>,
        collective_thrust: f64,
        s: &PidState,
        dt: f64,
    ) -> (MotorCommand, PidState) {
        let g = &self.gains;
        let diff = desired_att - state.att;
        let err = Vector3::new(wrap_angle(diff.x), diff.y, wrap_angle(diff.z));
        let att_integral = clamp_each(s.att_integral + err * dt, self.limits.att_integral);
        let torque = v3(g.att_kp).component_mul(&err) + v3(g.att_ki).component_mul(&att_integral)
            - v3(g.att_kd).component_mul(&state.ang_vel);
        let cmd = mix(collective_thrust, &torque, &self.quad);
        (
            cmd,
            PidState {
                att_integral,
                ..*s
            },
        )
    }

    /// One control tick toward a stationary setpoint.
    pub fn goto_setpoint(
        &self,
        state: &State12,
        setpoint: &Vector3<f64>,
        s: &PidState,
    ) -> (MotorCommand, PidState) {
        let pos = self.position_control(state, setpoint, &Vector3::zeros(), s, self.dt);
        self.attitude_control(state, &pos.desired_att, pos.collective_thrust, &pos.state, self.dt)
    }
}

/// Inverts the X mixer and saturates each rotor to `[0, rpm_max]`.
pub fn mix(thrust: f64, torque: &Vector3<f64>, quad: &QuadParams) -> MotorCommand {
    let kf = quad.thrust_coeff;
    let a = quad.moment_arm();
    let u0 = thrust / kf;
    let u1 = torque.x / (a * kf);
    let u2 = torque.y / (a * kf);
    let u3 = torque.z / quad.torque_coeff;
    // rows of the forward mixer are orthogonal with squared norm 4
    let w = [
        (u0 - u1 - u2 - u3) / 4.0,
        (u0 - u1 + u2 + u3) / 4.0,
        (u0 + u1 + u2 - u3) / 4.0,
        (u0 + u1 - u2 + u3) / 4.0,
    ];
    MotorCommand {
        rpm: w.map(|wi| {
            if wi.is_nan() {
                0.0
            } else {
                wi.max(0.0).sqrt().min(quad.rpm_max)
            }
        }),
    }
}

/// Stateful wrapper that flies toward a fixed setpoint; usable with
/// [`crate::dynamics::simulate`].
#[derive(Debug, Clone)]
pub struct SetpointTracker {
    pub pid: PidController,
    pub setpoint: Vector3<f64>,
    pub state: PidState,
}

impl SetpointTracker {
    pub fn new(pid: PidController, setpoint: Vector3<f64>) -> Self {
        Self {
            pid,
            setpoint,
            state: PidState::default(),
        }
    }
}

impl Controller for SetpointTracker {
    fn control_period(&self) -> f64 {
        self.pid.dt
    }

    fn command(&mut self, _t: f64, state: &State12) -> MotorCommand {
        let (cmd, next) = self.pid.goto_setpoint(state, &self.setpoint, &self.state);
        self.state = next;
        cmd
    }
}
