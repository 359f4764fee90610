//! Waypoint navigation task.
//!
//! The policy observes the full 12-state and commands a relative move in the
//! unit cube, scaled by `action_scale`. In the closed-loop mode the PID
//! cascade flies to the new setpoint for `action_window` seconds at
//! `control_frequency`. The two baseline modes let the policy drive the
//! rotors directly, or hold a single PID command open-loop for the window.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::disturbance::DisturbanceSource;
use crate::dynamics::{
    physics_steps, step as physics_step, ControlClock, DynamicsError, ExternalForce, MotorCommand,
    QuadParams, State12,
};
use crate::env::{check_action, EnvError, Environment, Step, StepInfo};
use crate::pid::{PidController, PidLimits, PidParams18, PidState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Actor outputs four rotor speeds, applied for one control tick.
    PureRl,
    /// One PID command computed at the window start, held for the window.
    OpenLoop,
    /// The PID cascade tracks the new setpoint for the whole window.
    ClosedLoopPid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardTiming {
    /// Scored on the commanded setpoint `pos + scaled action`.
    Commanded,
    /// Scored on the position reached at the end of the window.
    Achieved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NavConfig {
    pub target: [f64; 3],
    pub initial_pos: [f64; 3],
    pub action_scale: f64,
    pub control_frequency: f64,
    pub action_window: f64,
    pub execution_mode: ExecutionMode,
    pub reward_timing: RewardTiming,
    pub max_rl_steps: usize,
    pub success_radius: f64,
    /// Symmetric box `[-b, b]^3` around the origin; leaving it ends the episode.
    pub workspace_bound: f64,
    /// Added to the reward of a step that ends in failure.
    pub failure_penalty: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            target: [0.0, 0.0, 1.0],
            initial_pos: [0.0, 0.0, 0.0],
            action_scale: 0.05,
            control_frequency: 50.0,
            action_window: 2.0,
            execution_mode: ExecutionMode::ClosedLoopPid,
            reward_timing: RewardTiming::Commanded,
            max_rl_steps: 64,
            success_radius: 0.05,
            workspace_bound: 2.0,
            failure_penalty: -50.0,
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |m: String| Err(EnvError::Config(m));
        if !(self.action_scale > 0.0 && self.action_scale.is_finite()) {
            return fail(format!("action_scale must be > 0, got {}", self.action_scale));
        }
        if !(self.control_frequency > 0.0 && self.action_window > 0.0) {
            return fail("control_frequency and action_window must be > 0".into());
        }
        let ticks = self.control_frequency * self.action_window;
        if (ticks - ticks.round()).abs() > 1e-9 || ticks.round() < 1.0 {
            return fail(format!(
                "control_frequency * action_window must be a positive integer, got {ticks}"
            ));
        }
        if self.max_rl_steps == 0 {
            return fail("max_rl_steps must be > 0".into());
        }
        if !(self.success_radius > 0.0 && self.workspace_bound > 0.0) {
            return fail("success_radius and workspace_bound must be > 0".into());
        }
        if !self.failure_penalty.is_finite() || self.failure_penalty > 0.0 {
            return fail("failure_penalty must be finite and <= 0".into());
        }
        if self.target.iter().chain(&self.initial_pos).any(|v| !v.is_finite()) {
            return fail("target and initial_pos must be finite".into());
        }
        Ok(())
    }

    /// PID ticks per RL action in the closed-loop mode.
    pub fn ticks_per_action(&self) -> usize {
        (self.control_frequency * self.action_window).round() as usize
    }

    pub fn target(&self) -> Vector3<f64> {
        Vector3::from(self.target)
    }
}

/// `-||pos + displacement - target||^2`
pub fn reward_fn(pos: &Vector3<f64>, displacement: &Vector3<f64>, target: &Vector3<f64>) -> f64 {
    -(pos + displacement - target).norm_squared()
}

/// Scaled displacement for an action, with the action clipped to the unit cube.
pub fn scale_action(action: &[f64], scale: f64) -> Vector3<f64> {
    Vector3::new(
        scale * action[0].clamp(-1.0, 1.0),
        scale * action[1].clamp(-1.0, 1.0),
        scale * action[2].clamp(-1.0, 1.0),
    )
}

/// Affine map from `[-1, 1]^4` onto `[0, rpm_max]^4`.
pub fn action_to_rpm(action: &[f64], rpm_max: f64) -> MotorCommand {
    let mut rpm = [0.0; 4];
    for (r, a) in rpm.iter_mut().zip(action) {
        *r = ((a.clamp(-1.0, 1.0) + 1.0) * 0.5 * rpm_max).clamp(0.0, rpm_max);
    }
    MotorCommand { rpm }
}

/// One RL step of an episode, as written to the per-step trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    /// `(t, state)` at every physics step, starting with the reset state.
    pub states: Vec<(f64, State12)>,
    pub steps: Vec<StepRecord>,
}

enum WindowEnd {
    Completed,
    Failed,
}

#[derive(Debug, Clone)]
pub struct NavEnv {
    cfg: NavConfig,
    quad: QuadParams,
    pid: PidController,
    disturbance: DisturbanceSource,
    state: State12,
    pid_state: PidState,
    t: f64,
    physics_index: usize,
    steps: usize,
    iterations: u64,
    running: bool,
    record: bool,
    trace: EpisodeTrace,
}

impl NavEnv {
    pub fn new(
        cfg: NavConfig,
        quad: QuadParams,
        gains: PidParams18,
        limits: PidLimits,
    ) -> Result<Self, EnvError> {
        cfg.validate()?;
        quad.validate()?;
        gains
            .validate()
            .map_err(|e| EnvError::Config(e.to_string()))?;
        let pid = PidController::new(gains, limits, quad, 1.0 / cfg.control_frequency);
        Ok(Self {
            state: State12::at_rest(Vector3::from(cfg.initial_pos)),
            cfg,
            quad,
            pid,
            disturbance: DisturbanceSource::None,
            pid_state: PidState::default(),
            t: 0.0,
            physics_index: 0,
            steps: 0,
            iterations: 0,
            running: false,
            record: false,
            trace: EpisodeTrace::default(),
        })
    }

    pub fn with_disturbance(mut self, source: DisturbanceSource) -> Self {
        self.disturbance = source;
        self
    }

    /// Keep a physics-rate trace of each episode.
    pub fn with_recording(mut self, record: bool) -> Self {
        self.record = record;
        self
    }

    pub fn config(&self) -> &NavConfig {
        &self.cfg
    }

    pub fn state(&self) -> &State12 {
        &self.state
    }

    pub fn trace(&self) -> &EpisodeTrace {
        &self.trace
    }

    pub fn distance_to_target(&self) -> f64 {
        (self.state.pos - self.cfg.target()).norm()
    }

    fn external_force(&self) -> ExternalForce {
        match &self.disturbance {
            DisturbanceSource::None => ExternalForce::zero(),
            DisturbanceSource::Fixed(spec) => spec.force_at(self.t),
            DisturbanceSource::Training(schedule) => {
                schedule.schedule_next(self.iterations).force_at(self.t)
            }
        }
    }

    fn outside_workspace(&self) -> bool {
        self.state.pos.amax() > self.cfg.workspace_bound
    }

    /// Runs physics for `duration`, asking `command` for a new rotor command
    /// at every control tick. Returns whether the vehicle stayed inside the
    /// success radius throughout.
    fn fly<F>(&mut self, duration: f64, mut command: F) -> (WindowEnd, bool)
    where
        F: FnMut(&State12, &mut PidState) -> MotorCommand,
    {
        let dt = self.quad.physics_dt;
        let n = physics_steps(duration, dt);
        let mut clock = ControlClock::new(dt, 1.0 / self.cfg.control_frequency);
        let target = self.cfg.target();
        let mut sustained = (self.state.pos - target).norm() < self.cfg.success_radius;
        let mut cmd = MotorCommand::uniform(0.0);
        for i in 0..n {
            if clock.fires(i) {
                cmd = command(&self.state, &mut self.pid_state);
            }
            let ext = self.external_force();
            let next: Result<State12, DynamicsError> = physics_step(&self.state, &cmd, &ext, &self.quad);
            self.physics_index += 1;
            self.t = self.physics_index as f64 * dt;
            match next {
                Ok(s) => self.state = s,
                Err(_) => return (WindowEnd::Failed, false),
            }
            if self.record {
                self.trace.states.push((self.t, self.state));
            }
            if self.outside_workspace() {
                return (WindowEnd::Failed, false);
            }
            sustained &= (self.state.pos - target).norm() < self.cfg.success_radius;
        }
        (WindowEnd::Completed, sustained)
    }
}

impl Environment for NavEnv {
    fn observation_dim(&self) -> usize {
        12
    }

    fn action_dim(&self) -> usize {
        match self.cfg.execution_mode {
            ExecutionMode::PureRl => 4,
            _ => 3,
        }
    }

    fn reset(&mut self, _seed: u64) -> Result<Vec<f64>, EnvError> {
        self.state = State12::at_rest(Vector3::from(self.cfg.initial_pos));
        self.pid_state = PidState::default();
        self.t = 0.0;
        self.physics_index = 0;
        self.steps = 0;
        self.running = true;
        self.trace = EpisodeTrace::default();
        if self.record {
            self.trace.states.push((0.0, self.state));
        }
        Ok(self.state.to_array().to_vec())
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        if !self.running {
            return Err(EnvError::NotRunning);
        }
        check_action(action, self.action_dim())?;
        let target = self.cfg.target();
        let start_pos = self.state.pos;
        let window = self.cfg.action_window;

        let (end, sustained, commanded) = match self.cfg.execution_mode {
            ExecutionMode::ClosedLoopPid => {
                let d = scale_action(action, self.cfg.action_scale);
                let setpoint = start_pos + d;
                let pid = self.pid;
                let (end, sustained) = self.fly(window, |s, ps| {
                    let (cmd, next) = pid.goto_setpoint(s, &setpoint, ps);
                    *ps = next;
                    cmd
                });
                (end, sustained, Some(d))
            }
            ExecutionMode::OpenLoop => {
                let d = scale_action(action, self.cfg.action_scale);
                let setpoint = start_pos + d;
                let (cmd, next) = self.pid.goto_setpoint(&self.state, &setpoint, &self.pid_state);
                self.pid_state = next;
                let (end, sustained) = self.fly(window, |_, _| cmd);
                (end, sustained, Some(d))
            }
            ExecutionMode::PureRl => {
                let cmd = action_to_rpm(action, self.quad.rpm_max);
                let (end, sustained) = self.fly(1.0 / self.cfg.control_frequency, |_, _| cmd);
                (end, sustained, None)
            }
        };

        let mut reward = match (self.cfg.reward_timing, commanded) {
            (RewardTiming::Commanded, Some(d)) => reward_fn(&start_pos, &d, &target),
            _ => reward_fn(&self.state.pos, &Vector3::zeros(), &target),
        };
        self.steps += 1;
        self.iterations += 1;

        let failure = matches!(end, WindowEnd::Failed);
        let success = !failure && sustained;
        if failure {
            reward += self.cfg.failure_penalty;
        }
        let terminated = failure || success;
        let truncated = !terminated && self.steps >= self.cfg.max_rl_steps;
        if terminated || truncated {
            self.running = false;
        }
        if self.record {
            self.trace.steps.push(StepRecord {
                step: self.steps - 1,
                action: action.to_vec(),
                reward,
                done: terminated || truncated,
            });
        }
        Ok(Step {
            obs: self.state.to_array().to_vec(),
            reward,
            terminated,
            truncated,
            info: StepInfo {
                success,
                failure,
                distance: Some(self.distance_to_target()),
            },
        })
    }
}
