//! Rigid-body quadrotor model in the X configuration.
//!
//! The vehicle state is expressed with ZYX Euler angles (roll, pitch, yaw) and
//! body-frame angular rates. Rotor thrust is `k_f * rpm^2` and rotor drag
//! torque is `k_m * rpm^2`. There is no aerodynamic drag and no ground plane.
//!
//! Rotor layout (body frame, `a = arm_length / sqrt(2)`):
//!
//! | rotor | position   | spin |
//! |-------|------------|------|
//! | 0     | (+a, -a)   | -1   |
//! | 1     | (-a, -a)   | +1   |
//! | 2     | (-a, +a)   | -1   |
//! | 3     | (+a, +a)   | +1   |

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pitch magnitude beyond which the Euler parameterisation is considered unusable.
pub const GIMBAL_GUARD: f64 = FRAC_PI_2 - 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("simulation produced a non-finite state")]
    NonFiniteState,
    #[error("rotor {rotor} command {rpm} rpm outside [0, {rpm_max}]")]
    MotorBoundViolation { rotor: usize, rpm: f64, rpm_max: f64 },
    #[error("pitch {pitch} rad entered the gimbal-lock guard band")]
    GimbalLock { pitch: f64 },
    #[error("invalid quadrotor parameter `{key}`: {reason}")]
    InvalidParams { key: &'static str, reason: String },
    #[error("simulation diverged at physics step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<DynamicsError>,
    },
}

impl DynamicsError {
    /// The underlying error with any step annotation removed.
    pub fn root(&self) -> &DynamicsError {
        match self {
            DynamicsError::Diverged { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Full 12-component vehicle state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State12 {
    pub pos: Vector3<f64>,
    /// Roll, pitch, yaw.
    pub att: Vector3<f64>,
    pub lin_vel: Vector3<f64>,
    /// Body-frame angular velocity.
    pub ang_vel: Vector3<f64>,
}

impl Default for State12 {
    fn default() -> Self {
        Self::at_rest(Vector3::zeros())
    }
}

impl State12 {
    pub fn at_rest(pos: Vector3<f64>) -> Self {
        Self {
            pos,
            att: Vector3::zeros(),
            lin_vel: Vector3::zeros(),
            ang_vel: Vector3::zeros(),
        }
    }

    /// `[x, y, z, roll, pitch, yaw, vx, vy, vz, wx, wy, wz]`
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        out[0..3].copy_from_slice(self.pos.as_slice());
        out[3..6].copy_from_slice(self.att.as_slice());
        out[6..9].copy_from_slice(self.lin_vel.as_slice());
        out[9..12].copy_from_slice(self.ang_vel.as_slice());
        out
    }

    pub fn from_array(v: &[f64; 12]) -> Self {
        Self {
            pos: Vector3::new(v[0], v[1], v[2]),
            att: Vector3::new(v[3], v[4], v[5]),
            lin_vel: Vector3::new(v[6], v[7], v[8]),
            ang_vel: Vector3::new(v[9], v[10], v[11]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Reflection about the x-z plane.
    pub fn mirrored_xz(&self) -> Self {
        Self {
            pos: Vector3::new(self.pos.x, -self.pos.y, self.pos.z),
            att: Vector3::new(-self.att.x, self.att.y, -self.att.z),
            lin_vel: Vector3::new(self.lin_vel.x, -self.lin_vel.y, self.lin_vel.z),
            ang_vel: Vector3::new(-self.ang_vel.x, self.ang_vel.y, -self.ang_vel.z),
        }
    }

    /// Body-to-world rotation.
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.att.x, self.att.y, self.att.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorCommand {
    pub rpm: [f64; 4],
}

impl MotorCommand {
    pub fn uniform(rpm: f64) -> Self {
        Self { rpm: [rpm; 4] }
    }

    /// The command a mirrored vehicle needs to reproduce this one's mirrored motion.
    pub fn mirrored_xz(&self) -> Self {
        let r = self.rpm;
        Self {
            rpm: [r[3], r[2], r[1], r[0]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadParams {
    pub mass: f64,
    pub arm_length: f64,
    pub inertia_diag: [f64; 3],
    pub thrust_coeff: f64,
    pub torque_coeff: f64,
    pub gravity: f64,
    pub rpm_max: f64,
    pub physics_dt: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 0.027,
            arm_length: 0.0397,
            inertia_diag: [1.4e-5, 1.4e-5, 2.17e-5],
            thrust_coeff: 3.16e-10,
            torque_coeff: 7.94e-12,
            gravity: 9.81,
            rpm_max: 21702.0,
            physics_dt: 1.0 / 240.0,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = |key: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(DynamicsError::InvalidParams {
                    key,
                    reason: format!("must be finite and > 0, got {v}"),
                })
            }
        };
        positive("mass", self.mass)?;
        positive("arm_length", self.arm_length)?;
        for &i in &self.inertia_diag {
            positive("inertia_diag", i)?;
        }
        positive("thrust_coeff", self.thrust_coeff)?;
        positive("torque_coeff", self.torque_coeff)?;
        positive("gravity", self.gravity)?;
        positive("rpm_max", self.rpm_max)?;
        positive("physics_dt", self.physics_dt)?;
        if self.physics_dt > 1.0 / 240.0 + 1e-15 {
            return Err(DynamicsError::InvalidParams {
                key: "physics_dt",
                reason: format!("must be <= 1/240 s, got {}", self.physics_dt),
            });
        }
        Ok(())
    }

    pub fn weight(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn max_thrust(&self) -> f64 {
        4.0 * self.thrust_coeff * self.rpm_max * self.rpm_max
    }

    /// Lever arm of each rotor about the body x and y axes.
    pub fn moment_arm(&self) -> f64 {
        self.arm_length / std::f64::consts::SQRT_2
    }

    fn inertia(&self) -> Vector3<f64> {
        Vector3::from(self.inertia_diag)
    }
}

/// World-frame force applied at the centre of mass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExternalForce {
    pub force: Vector3<f64>,
}

impl ExternalForce {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            force: Vector3::new(x, y, z),
        }
    }
}

/// Rotor speed that balances gravity with all four rotors equal.
pub fn hover_rpm(params: &QuadParams) -> f64 {
    (params.mass * params.gravity / (4.0 * params.thrust_coeff)).sqrt()
}

/// Collective thrust and body torques produced by a motor command.
pub fn wrench(cmd: &MotorCommand, params: &QuadParams) -> (f64, Vector3<f64>) {
    let w = cmd.rpm.map(|r| r * r);
    let kf = params.thrust_coeff;
    let a = params.moment_arm();
    let thrust = kf * (w[0] + w[1] + w[2] + w[3]);
    let torque = Vector3::new(
        a * kf * (-w[0] - w[1] + w[2] + w[3]),
        a * kf * (-w[0] + w[1] + w[2] - w[3]),
        params.torque_coeff * (-w[0] + w[1] - w[2] + w[3]),
    );
    (thrust, torque)
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Maps body rates to ZYX Euler angle rates.
fn euler_rate_matrix(att: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = att.x.sin_cos();
    let (_, cp) = att.y.sin_cos();
    let tp = att.y.tan();
    Matrix3::new(
        1.0,
        sr * tp,
        cr * tp,
        0.0,
        cr,
        -sr,
        0.0,
        sr / cp,
        cr / cp,
    )
}

/// Advance the state by one physics step.
///
/// Velocities are updated first from the forces at the start of the step.
/// Position and attitude then advance with the mean of the old and new rates,
/// which is exact for a force held constant over the step.
pub fn step(
    state: &State12,
    cmd: &MotorCommand,
    ext: &ExternalForce,
    params: &QuadParams,
) -> Result<State12, DynamicsError> {
    for (rotor, &rpm) in cmd.rpm.iter().enumerate() {
        if !(0.0..=params.rpm_max).contains(&rpm) {
            return Err(DynamicsError::MotorBoundViolation {
                rotor,
                rpm,
                rpm_max: params.rpm_max,
            });
        }
    }
    if !state.is_finite() {
        return Err(DynamicsError::NonFiniteState);
    }
    let dt = params.physics_dt;
    let (thrust, torque) = wrench(cmd, params);

    let body_thrust = Vector3::new(0.0, 0.0, thrust);
    let accel = state.rotation() * body_thrust / params.mass
        + Vector3::new(0.0, 0.0, -params.gravity)
        + ext.force / params.mass;

    let inertia = params.inertia();
    let w = state.ang_vel;
    let gyro = w.cross(&inertia.component_mul(&w));
    let ang_accel = (torque - gyro).component_div(&inertia);

    let lin_vel = state.lin_vel + accel * dt;
    let ang_vel = w + ang_accel * dt;

    let pos = state.pos + (state.lin_vel + lin_vel) * (0.5 * dt);
    let rates = euler_rate_matrix(&state.att) * ((w + ang_vel) * 0.5);
    let raw_att = state.att + rates * dt;
    let att = Vector3::new(wrap_angle(raw_att.x), raw_att.y, wrap_angle(raw_att.z));

    let next = State12 {
        pos,
        att,
        lin_vel,
        ang_vel,
    };
    if !next.is_finite() {
        return Err(DynamicsError::NonFiniteState);
    }
    if next.att.y.abs() > GIMBAL_GUARD {
        return Err(DynamicsError::GimbalLock { pitch: next.att.y });
    }
    Ok(next)
}

/// A controller sampled at a fixed period with zero-order hold in between.
pub trait Controller {
    fn control_period(&self) -> f64;
    fn command(&mut self, t: f64, state: &State12) -> MotorCommand;
}

/// Physics step indices at which a controller with the given period fires.
///
/// Tick `k` lands on the first physics step whose start time is at or past
/// `k * period`.
#[derive(Debug, Clone, Copy)]
pub struct ControlClock {
    ratio: f64,
    next_tick: usize,
}

impl ControlClock {
    pub fn new(physics_dt: f64, control_period: f64) -> Self {
        Self {
            ratio: control_period / physics_dt,
            next_tick: 0,
        }
    }

    /// Physics step index at which tick `k` fires.
    pub fn tick_step(&self, k: usize) -> usize {
        (k as f64 * self.ratio - 1e-9).ceil().max(0.0) as usize
    }

    /// Whether the controller fires at physics step `i`. Must be called with increasing `i`.
    pub fn fires(&mut self, i: usize) -> bool {
        if self.tick_step(self.next_tick) <= i {
            while self.tick_step(self.next_tick) <= i {
                self.next_tick += 1;
            }
            true
        } else {
            false
        }
    }
}

/// Number of physics steps needed to cover `duration`.
pub fn physics_steps(duration: f64, dt: f64) -> usize {
    ((duration / dt) - 1e-9).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    /// Initial state followed by one state per physics step.
    pub states: Vec<State12>,
}

impl Trajectory {
    pub fn final_state(&self) -> &State12 {
        self.states.last().expect("trajectory always holds the initial state")
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.states.len()).map(move |i| i as f64 * self.dt)
    }
}

/// Run the physics loop for `duration`, sampling `controller` at its period
/// and `ext_schedule` at every physics step.
pub fn simulate<C, F>(
    initial: &State12,
    controller: &mut C,
    mut ext_schedule: F,
    duration: f64,
    params: &QuadParams,
) -> Result<Trajectory, DynamicsError>
where
    C: Controller + ?Sized,
    F: FnMut(f64) -> ExternalForce,
{
    params.validate()?;
    if !(duration > 0.0) {
        return Err(DynamicsError::InvalidParams {
            key: "duration",
            reason: format!("must be > 0, got {duration}"),
        });
    }
    let dt = params.physics_dt;
    let n = physics_steps(duration, dt);
    let mut clock = ControlClock::new(dt, controller.control_period());
    let mut states = Vec::with_capacity(n + 1);
    states.push(*initial);
    let mut state = *initial;
    let mut cmd = MotorCommand::uniform(0.0);
    for i in 0..n {
        let t = i as f64 * dt;
        if clock.fires(i) {
            cmd = controller.command(t, &state);
        }
        let ext = ext_schedule(t);
        state = step(&state, &cmd, &ext, params).map_err(|e| DynamicsError::Diverged {
            step: i,
            source: Box::new(e),
        })?;
        states.push(state);
    }
    Ok(Trajectory { dt, states })
}

/// Holds one motor command forever.
#[derive(Debug, Clone, Copy)]
pub struct ConstantCommand {
    pub cmd: MotorCommand,
    pub period: f64,
}

impl Controller for ConstantCommand {
    fn control_period(&self) -> f64 {
        self.period
    }

    fn command(&mut self, _t: f64, _state: &State12) -> MotorCommand {
        self.cmd
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn hover(params: &QuadParams) -> ConstantCommand {
        ConstantCommand {
            cmd: MotorCommand::uniform(hover_rpm(params)),
            period: 1.0 / 50.0,
        }
    }

    #[test]
    fn free_fall_single_step() {
        let p = QuadParams::default();
        let s = step(
            &State12::default(),
            &MotorCommand::uniform(0.0),
            &ExternalForce::zero(),
            &p,
        )
        .unwrap();
        assert_eq!(s.lin_vel.z, -p.gravity * p.physics_dt);
    }

    #[test]
    fn hover_single_step_is_stationary() {
        let p = QuadParams::default();
        let s = step(
            &State12::default(),
            &MotorCommand::uniform(hover_rpm(&p)),
            &ExternalForce::zero(),
            &p,
        )
        .unwrap();
        assert!(s.pos.norm() < 1e-9);
        assert!(s.att.norm() < 1e-9);
    }

    #[test]
    fn lateral_force_single_step() {
        let p = QuadParams::default();
        let f = 0.01;
        let s = step(
            &State12::default(),
            &MotorCommand::uniform(hover_rpm(&p)),
            &ExternalForce::new(f, 0.0, 0.0),
            &p,
        )
        .unwrap();
        // independent scalar calculation
        let expected = f / 0.027 * (1.0 / 240.0);
        assert_abs_diff_eq!(s.lin_vel.x, expected, epsilon = 1e-9);
    }

    #[test]
    fn hover_rpm_constructed_inverse() {
        let mut p = QuadParams::default();
        p.thrust_coeff = p.mass * p.gravity / (4.0 * 1000.0 * 1000.0);
        assert_abs_diff_eq!(hover_rpm(&p), 1000.0, epsilon = 1e-9);
    }

    #[test]
    fn hover_rpm_residual_and_scaling() {
        let p = QuadParams::default();
        let r = hover_rpm(&p);
        assert!((4.0 * p.thrust_coeff * r * r - p.mass * p.gravity).abs() < 1e-12);
        let mut heavy = p;
        heavy.mass *= 2.0;
        assert_abs_diff_eq!(hover_rpm(&heavy) / r, 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_out_of_range_rpm() {
        let p = QuadParams::default();
        let err = step(
            &State12::default(),
            &MotorCommand {
                rpm: [0.0, p.rpm_max + 1.0, 0.0, 0.0],
            },
            &ExternalForce::zero(),
            &p,
        )
        .unwrap_err();
        assert!(matches!(err, DynamicsError::MotorBoundViolation { rotor: 1, .. }));
        let err = step(
            &State12::default(),
            &MotorCommand {
                rpm: [-1.0, 0.0, 0.0, 0.0],
            },
            &ExternalForce::zero(),
            &p,
        )
        .unwrap_err();
        assert!(matches!(err, DynamicsError::MotorBoundViolation { rotor: 0, .. }));
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let p = QuadParams::default();
        let mut s = State12::default();
        s.lin_vel.x = f64::NAN;
        let err = step(&s, &MotorCommand::uniform(0.0), &ExternalForce::zero(), &p).unwrap_err();
        assert_eq!(err, DynamicsError::NonFiniteState);
    }

    #[test]
    fn gimbal_guard_trips() {
        let p = QuadParams::default();
        let mut s = State12::default();
        s.att.y = GIMBAL_GUARD - 1e-6;
        s.ang_vel.y = 1.0;
        let err = step(&s, &MotorCommand::uniform(0.0), &ExternalForce::zero(), &p).unwrap_err();
        assert!(matches!(err, DynamicsError::GimbalLock { .. }));
    }

    #[test]
    fn simulate_free_fall_matches_closed_form() {
        let p = QuadParams::default();
        let mut ctrl = ConstantCommand {
            cmd: MotorCommand::uniform(0.0),
            period: 0.02,
        };
        let traj = simulate(&State12::default(), &mut ctrl, |_| ExternalForce::zero(), 1.0, &p).unwrap();
        assert_eq!(traj.states.len(), 241);
        assert!((traj.final_state().pos.z + p.gravity / 2.0).abs() < 1e-3);
    }

    #[test]
    fn simulate_hover_holds_position() {
        let p = QuadParams::default();
        let traj = simulate(&State12::default(), &mut hover(&p), |_| ExternalForce::zero(), 1.0, &p).unwrap();
        let drift = traj.states.iter().map(|s| s.pos.norm()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "drift {drift}");
    }

    #[test]
    fn simulate_step_force_impulse() {
        let p = QuadParams::default();
        let traj = simulate(
            &State12::default(),
            &mut hover(&p),
            |_| ExternalForce::new(0.01, 0.0, 0.0),
            1.0,
            &p,
        )
        .unwrap();
        assert!((traj.final_state().lin_vel.x - 0.01 / p.mass).abs() < 1e-3);
    }

    #[test]
    fn simulate_reports_divergence_step() {
        let p = QuadParams::default();
        let mut s = State12::default();
        s.ang_vel.y = 20.0;
        let mut ctrl = ConstantCommand {
            cmd: MotorCommand::uniform(0.0),
            period: 0.02,
        };
        let err = simulate(&s, &mut ctrl, |_| ExternalForce::zero(), 1.0, &p).unwrap_err();
        match err {
            DynamicsError::Diverged { step, source } => {
                assert!(step > 0 && step < 240);
                assert!(matches!(*source, DynamicsError::GimbalLock { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn control_clock_fires_fifty_times_per_second() {
        let mut clock = ControlClock::new(1.0 / 240.0, 1.0 / 50.0);
        let fired: Vec<usize> = (0..240).filter(|&i| clock.fires(i)).collect();
        assert_eq!(fired.len(), 50);
        assert_eq!(&fired[..3], &[0, 5, 10]);
        assert_eq!(fired[5], 24);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_eq!(wrap_angle(0.3), 0.3);
    }

    #[test]
    fn params_validation() {
        let mut p = QuadParams::default();
        assert!(p.validate().is_ok());
        p.physics_dt = 0.01;
        assert!(matches!(
            p.validate(),
            Err(DynamicsError::InvalidParams { key: "physics_dt", .. })
        ));
        let mut p = QuadParams::default();
        p.mass = 0.0;
        assert!(p.validate().is_err());
    }
}
