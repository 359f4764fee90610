//! Learning the 18 PID gains with TD3.
//!
//! Each RL step maps an action in `[-1, 1]^18` onto the gain box and flies
//! one trajectory segment with those gains. The episode is one pass over the
//! training trajectory; vehicle and integrator state carry across segments.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step as physics_step, ControlClock, ExternalForce, QuadParams, State12};
use crate::env::{check_action, EnvError, Environment, Step, StepInfo};
use crate::pid::{PidController, PidLimits, PidParams18, PidState};
use crate::seed;
use crate::td3::{self, select_action, EpisodeLog, Td3Config, Td3Error};
use crate::trajectory::{sample_trajectory, TrajectorySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub td3: Td3Config,
    pub train_trajectory: TrajectorySpec,
    pub test_trajectory: TrajectorySpec,
    pub control_frequency: f64,
    /// Flight time per RL step, s.
    pub segment_duration: f64,
    pub gain_min: PidParams18,
    pub gain_max: PidParams18,
    /// Added to the accumulated reward when a flight diverges.
    pub divergence_penalty: f64,
    /// Tracking error treated as divergence, m.
    pub divergence_distance: f64,
    /// Highest-reward candidates re-scored on the full training trajectory.
    pub top_k: usize,
    /// Random gain vectors in the baseline.
    pub random_baseline: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            td3: Td3Config {
                actor_arch: vec![50, 50, 18],
                critic_arch: vec![50, 50, 1],
                total_timesteps: 1000,
                learning_rate: 1e-3,
                warmup_steps: 100,
                ..Td3Config::default()
            },
            train_trajectory: TrajectorySpec::default_circle(),
            test_trajectory: TrajectorySpec::default_helix(),
            control_frequency: 50.0,
            segment_duration: 2.0,
            gain_min: PidParams18::zeros(),
            gain_max: PidParams18 {
                pos_kp: [4.0; 3],
                pos_ki: [1.0; 3],
                pos_kd: [2.0; 3],
                att_kp: [0.01; 3],
                att_ki: [0.002; 3],
                att_kd: [0.005; 3],
            },
            divergence_penalty: -1000.0,
            divergence_distance: 5.0,
            top_k: 10,
            random_baseline: 50,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |m: String| Err(EnvError::Config(m));
        self.train_trajectory
            .validate(self.control_frequency)
            .map_err(|e| EnvError::Config(format!("train_trajectory: {e}")))?;
        self.test_trajectory
            .validate(self.control_frequency)
            .map_err(|e| EnvError::Config(format!("test_trajectory: {e}")))?;
        let ticks = self.segment_duration * self.control_frequency;
        if !(ticks >= 1.0) || (ticks - ticks.round()).abs() > 1e-9 {
            return fail(format!(
                "segment_duration * control_frequency must be a positive integer, got {ticks}"
            ));
        }
        self.gain_min
            .validate()
            .map_err(|e| EnvError::Config(format!("gain_min: {e}")))?;
        self.gain_max
            .validate()
            .map_err(|e| EnvError::Config(format!("gain_max: {e}")))?;
        let (lo, hi) = (self.gain_min.to_array(), self.gain_max.to_array());
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return fail("gain_min must not exceed gain_max".into());
        }
        if !(self.divergence_penalty.is_finite() && self.divergence_penalty <= 0.0) {
            return fail("divergence_penalty must be finite and <= 0".into());
        }
        if !(self.divergence_distance > 0.0) {
            return fail("divergence_distance must be > 0".into());
        }
        if self.top_k == 0 {
            return fail("top_k must be > 0".into());
        }
        Ok(())
    }

    pub fn ticks_per_segment(&self) -> usize {
        (self.segment_duration * self.control_frequency).round() as usize
    }
}

/// Affine map between `[-1, 1]^18` and the configured gain box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainBox {
    pub min: [f64; 18],
    pub max: [f64; 18],
}

impl GainBox {
    pub fn new(min: &PidParams18, max: &PidParams18) -> Self {
        Self {
            min: min.to_array(),
            max: max.to_array(),
        }
    }

    /// Clamps `action` into the cube before mapping.
    pub fn to_gains(&self, action: &[f64]) -> PidParams18 {
        let mut g = [0.0; 18];
        for i in 0..18 {
            let u = (action[i].clamp(-1.0, 1.0) + 1.0) * 0.5;
            g[i] = self.min[i] + u * (self.max[i] - self.min[i]);
        }
        PidParams18::from_array(&g)
    }

    /// Inverse of [`GainBox::to_gains`] on the box; degenerate ranges map to 0.
    pub fn to_action(&self, gains: &PidParams18) -> [f64; 18] {
        let g = gains.to_array();
        let mut a = [0.0; 18];
        for i in 0..18 {
            let span = self.max[i] - self.min[i];
            a[i] = if span > 0.0 {
                (2.0 * (g[i] - self.min[i]) / span - 1.0).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
        a
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PidParams18 {
        let a: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..=1.0)).collect();
        self.to_gains(&a)
    }
}

/// One control tick of a tracking flight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub t: f64,
    pub target: Vector3<f64>,
    pub pos: Vector3<f64>,
    pub err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub total_reward: f64,
    pub points: Vec<TrackPoint>,
    pub diverged: bool,
}

impl RolloutReport {
    /// Root-mean-square tracking error; infinite for diverged flights.
    pub fn rmse(&self) -> f64 {
        if self.diverged || self.points.is_empty() {
            return f64::INFINITY;
        }
        let ss: f64 = self.points.iter().map(|p| p.err * p.err).sum();
        (ss / self.points.len() as f64).sqrt()
    }
}

/// Flight state carried between segments.
#[derive(Debug, Clone, Copy)]
struct Flight {
    state: State12,
    pid_state: PidState,
    /// Index of the last waypoint reached.
    tick: usize,
    physics_index: usize,
}

impl Flight {
    fn start(at: Vector3<f64>) -> Self {
        Self {
            state: State12::at_rest(at),
            pid_state: PidState::default(),
            tick: 0,
            physics_index: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TrackingRig {
    quad: QuadParams,
    limits: PidLimits,
    control_frequency: f64,
    divergence_distance: f64,
}

impl TrackingRig {
    /// Tracks waypoints `flight.tick + 1 ..= last` and appends one point per
    /// tick. Returns `false` on divergence.
    fn fly(
        &self,
        flight: &mut Flight,
        gains: &PidParams18,
        waypoints: &[Vector3<f64>],
        last: usize,
        points: &mut Vec<TrackPoint>,
    ) -> bool {
        let period = 1.0 / self.control_frequency;
        let pid = PidController::new(*gains, self.limits, self.quad, period);
        let clock = ControlClock::new(self.quad.physics_dt, period);
        while flight.tick < last {
            let k = flight.tick + 1;
            let wp = waypoints[k];
            let (cmd, next) = pid.goto_setpoint(&flight.state, &wp, &flight.pid_state);
            flight.pid_state = next;
            let end = clock.tick_step(k);
            while flight.physics_index < end {
                match physics_step(&flight.state, &cmd, &ExternalForce::zero(), &self.quad) {
                    Ok(s) => flight.state = s,
                    Err(_) => return false,
                }
                flight.physics_index += 1;
            }
            flight.tick = k;
            let err = (flight.state.pos - wp).norm();
            points.push(TrackPoint {
                t: k as f64 * period,
                target: wp,
                pos: flight.state.pos,
                err,
            });
            if err > self.divergence_distance {
                return false;
            }
        }
        true
    }
}

fn rig(cfg: &TuneConfig, quad: &QuadParams, limits: &PidLimits) -> TrackingRig {
    TrackingRig {
        quad: *quad,
        limits: *limits,
        control_frequency: cfg.control_frequency,
        divergence_distance: cfg.divergence_distance,
    }
}

fn squared_error_reward(points: &[TrackPoint]) -> f64 {
    -points.iter().map(|p| p.err * p.err).sum::<f64>()
}

/// Flies the whole trajectory with fixed gains from rest at its first waypoint.
///
/// The reward is `-sum ||pos - waypoint||^2` over control ticks, plus the
/// divergence penalty if the flight blows up.
pub fn rollout_gains(
    gains: &PidParams18,
    spec: &TrajectorySpec,
    cfg: &TuneConfig,
    quad: &QuadParams,
    limits: &PidLimits,
) -> Result<RolloutReport, EnvError> {
    let waypoints = sample_trajectory(spec, cfg.control_frequency)
        .map_err(|e| EnvError::Config(e.to_string()))?;
    let mut flight = Flight::start(waypoints[0]);
    let mut points = Vec::with_capacity(waypoints.len());
    let ok = rig(cfg, quad, limits).fly(&mut flight, gains, &waypoints, waypoints.len() - 1, &mut points);
    let mut total_reward = squared_error_reward(&points);
    if !ok {
        total_reward += cfg.divergence_penalty;
    }
    Ok(RolloutReport {
        total_reward,
        points,
        diverged: !ok,
    })
}

/// Gains proposed during training together with the reward of their segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub gains: PidParams18,
    pub segment_reward: f64,
}

#[derive(Debug, Clone)]
pub struct PidTuneEnv {
    cfg: TuneConfig,
    rig: TrackingRig,
    gain_box: GainBox,
    waypoints: Vec<Vector3<f64>>,
    flight: Flight,
    running: bool,
    candidates: Vec<Candidate>,
}

impl PidTuneEnv {
    pub fn new(cfg: TuneConfig, quad: QuadParams, limits: PidLimits) -> Result<Self, EnvError> {
        cfg.validate()?;
        quad.validate()?;
        let waypoints = sample_trajectory(&cfg.train_trajectory, cfg.control_frequency)
            .map_err(|e| EnvError::Config(e.to_string()))?;
        Ok(Self {
            rig: rig(&cfg, &quad, &limits),
            gain_box: GainBox::new(&cfg.gain_min, &cfg.gain_max),
            flight: Flight::start(waypoints[0]),
            waypoints,
            cfg,
            running: false,
            candidates: Vec::new(),
        })
    }

    pub fn gain_box(&self) -> &GainBox {
        &self.gain_box
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    fn observation(&self) -> Vec<f64> {
        let s = &self.flight.state;
        vec![s.pos.x, s.pos.y, s.pos.z, s.att.x, s.att.y, s.att.z]
    }
}

impl Environment for PidTuneEnv {
    fn observation_dim(&self) -> usize {
        6
    }

    fn action_dim(&self) -> usize {
        18
    }

    fn reset(&mut self, _seed: u64) -> Result<Vec<f64>, EnvError> {
        self.flight = Flight::start(self.waypoints[0]);
        self.running = true;
        Ok(self.observation())
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        if !self.running {
            return Err(EnvError::NotRunning);
        }
        check_action(action, 18)?;
        let gains = self.gain_box.to_gains(action);
        let last = (self.flight.tick + self.cfg.ticks_per_segment()).min(self.waypoints.len() - 1);
        let mut points = Vec::with_capacity(self.cfg.ticks_per_segment());
        let ok = self
            .rig
            .fly(&mut self.flight, &gains, &self.waypoints, last, &mut points);
        let mut reward = squared_error_reward(&points);
        if !ok {
            reward += self.cfg.divergence_penalty;
        }
        self.candidates.push(Candidate {
            gains,
            segment_reward: reward,
        });
        let finished = self.flight.tick >= self.waypoints.len() - 1;
        let terminated = !ok || finished;
        if terminated {
            self.running = false;
        }
        Ok(Step {
            obs: self.observation(),
            reward,
            terminated,
            truncated: false,
            info: StepInfo {
                success: ok && finished,
                failure: !ok,
                distance: points.last().map(|p| p.err),
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub gains: PidParams18,
    /// Full training-trajectory reward of the returned gains.
    pub train_reward: f64,
    pub log: Vec<EpisodeLog>,
}

/// Trains TD3 over the tuning task and returns the best gains it proposed.
///
/// The `top_k` candidates by segment reward, plus the trained actor's
/// noise-free proposal from the start state, are re-scored on the full
/// training trajectory; the best of them wins, earliest first on ties.
pub fn tune(cfg: &TuneConfig, quad: &QuadParams, limits: &PidLimits) -> Result<TuneOutcome, Td3Error> {
    let mut env = PidTuneEnv::new(cfg.clone(), *quad, *limits).map_err(|e| Td3Error::Config(e.to_string()))?;
    let outcome = td3::train(&mut env, &cfg.td3)?;

    let mut ranked: Vec<&Candidate> = env.candidates().iter().collect();
    ranked.sort_by(|a, b| b.segment_reward.total_cmp(&a.segment_reward));
    let mut shortlist: Vec<PidParams18> = ranked.iter().take(cfg.top_k).map(|c| c.gains).collect();
    let start_obs = env.reset(0).map_err(|e| Td3Error::Env { timestep: cfg.td3.total_timesteps, source: e })?;
    let proposal = select_action(outcome.actor(), &start_obs, None)?;
    shortlist.push(env.gain_box().to_gains(&proposal));

    let mut best: Option<(PidParams18, f64)> = None;
    for gains in shortlist {
        let report = rollout_gains(&gains, &cfg.train_trajectory, cfg, quad, limits)
            .map_err(|e| Td3Error::Config(e.to_string()))?;
        if best.is_none_or(|(_, r)| report.total_reward > r) {
            best = Some((gains, report.total_reward));
        }
    }
    let (gains, train_reward) = best.expect("shortlist holds at least the actor proposal");
    Ok(TuneOutcome {
        gains,
        train_reward,
        log: outcome.log,
    })
}

/// Helix (or any trajectory) RMSE of `n` gain vectors drawn uniformly from the box.
pub fn random_baseline_rmse(
    cfg: &TuneConfig,
    spec: &TrajectorySpec,
    n: usize,
    root_seed: u64,
    quad: &QuadParams,
    limits: &PidLimits,
) -> Result<Vec<f64>, EnvError> {
    let gain_box = GainBox::new(&cfg.gain_min, &cfg.gain_max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(root_seed, "tune/random-baseline"));
    (0..n)
        .map(|_| {
            let g = gain_box.sample(&mut rng);
            rollout_gains(&g, spec, cfg, quad, limits).map(|r| r.rmse())
        })
        .collect()
}

/// Median with infinities sorted last.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a.is_infinite() || b.is_infinite() {
            a.max(b)
        } else {
            0.5 * (a + b)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(gains: &PidParams18, spec: &TrajectorySpec) -> RolloutReport {
        let cfg = TuneConfig::default();
        rollout_gains(gains, spec, &cfg, &QuadParams::default(), &PidLimits::default()).unwrap()
    }

    #[test]
    fn gain_box_endpoints() {
        let cfg = TuneConfig::default();
        let b = GainBox::new(&cfg.gain_min, &cfg.gain_max);
        assert_eq!(b.to_gains(&[-1.0; 18]), cfg.gain_min);
        assert_eq!(b.to_gains(&[1.0; 18]), cfg.gain_max);
        assert_eq!(b.to_gains(&[5.0; 18]), cfg.gain_max);
        let g = PidParams18::golden();
        let back = b.to_gains(&b.to_action(&g));
        for (x, y) in back.to_array().iter().zip(g.to_array()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn golden_beats_zero_gains() {
        for spec in [TrajectorySpec::default_circle(), TrajectorySpec::default_helix()] {
            let golden = run(&PidParams18::golden(), &spec);
            let zero = run(&PidParams18::zeros(), &spec);
            assert!(!golden.diverged);
            assert!(golden.total_reward > TuneConfig::default().divergence_penalty);
            assert!(golden.total_reward > zero.total_reward);
            assert_eq!(golden.points.len(), 300);
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let spec = TrajectorySpec::default_circle();
        assert_eq!(run(&PidParams18::golden(), &spec), run(&PidParams18::golden(), &spec));
    }

    #[test]
    fn episode_has_three_segments() {
        let mut env = PidTuneEnv::new(TuneConfig::default(), QuadParams::default(), PidLimits::default()).unwrap();
        env.reset(0).unwrap();
        let a = env.gain_box().to_action(&PidParams18::golden());
        let s1 = env.step(&a).unwrap();
        let s2 = env.step(&a).unwrap();
        let s3 = env.step(&a).unwrap();
        assert!(!s1.done() && !s2.done() && s3.terminated);
        assert_eq!(env.candidates().len(), 3);
        // same gains throughout reproduce the full rollout reward
        let full = run(&PidParams18::golden(), &TrajectorySpec::default_circle());
        let sum = s1.reward + s2.reward + s3.reward;
        assert!((sum - full.total_reward).abs() < 1e-9 * full.total_reward.abs());
    }

    #[test]
    fn median_handles_infinities() {
        assert_eq!(median(&[3.0, f64::INFINITY, 1.0]), Some(3.0));
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), Some(2.5));
        assert_eq!(median(&[1.0, f64::INFINITY]), Some(f64::INFINITY));
        assert_eq!(median(&[]), None);
    }
}
