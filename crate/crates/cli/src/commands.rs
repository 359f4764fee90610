//! The five subcommands. Each returns the committed manifest.

use std::path::{Path, PathBuf};

use log::info;
use nalgebra::Vector3;
use serde::Serialize;

use quadlab::disturbance::DisturbanceSource;
use quadlab::dynamics::{self, hover_rpm, Controller, MotorCommand, State12};
use quadlab::evaluation::{self, compare_sweeps, robustness_sweep, EpisodeResult, EvalSummary, SweepReport};
use quadlab::nav::NavEnv;
use quadlab::pid::PidParams18;
use quadlab::pidtune::{self, median, random_baseline_rmse, rollout_gains};
use quadlab::seed;
use quadlab::td3::{self, early_late_returns, EpisodeLog};
use quadlab::trajectory::{TrajectoryKind, TrajectorySpec};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::output::{fmt_f64, now_rfc3339, states_csv, Csv, Outputs, RunManifest};
use crate::{CliError, Result};

fn nav_env(cfg: &RunConfig) -> Result<NavEnv> {
    Ok(NavEnv::new(cfg.nav.clone(), cfg.quad, cfg.gains, cfg.pid_limits)?)
}

fn config_echo(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serialises")
}

/// Finite values as numbers, anything else as `null`.
fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn opt_field(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn training_log_csv(log: &[EpisodeLog]) -> Vec<u8> {
    let mut csv = Csv::new("timestep,episode,episode_return,critic_loss,actor_loss");
    for e in log {
        csv.row([
            e.timestep.to_string(),
            e.episode.to_string(),
            fmt_f64(e.episode_return),
            opt_field(e.critic_loss),
            opt_field(e.actor_loss),
        ]);
    }
    csv.into_bytes()
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    timesteps: usize,
    episodes: usize,
    early_mean_return: Option<f64>,
    late_mean_return: Option<f64>,
    disturbance_training: bool,
}

pub fn train_nav(cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest> {
    let started = now_rfc3339();
    let mut env = nav_env(cfg)?;
    if let Some(schedule) = cfg.training_schedule() {
        env = env.with_disturbance(DisturbanceSource::Training(schedule));
    }
    info!("training {} timesteps", cfg.td3.total_timesteps);
    let outcome = td3::train(&mut env, &cfg.td3)?;
    let (early, late) = early_late_returns(&outcome.log, cfg.td3.total_timesteps);
    info!("trained: {} episodes, early {early:?}, late {late:?}", outcome.log.len());

    let mut out = Outputs::new(out_dir);
    out.add(
        "checkpoint.json",
        Checkpoint::from_actor(outcome.actor(), config_echo(cfg)).to_bytes(),
    );
    out.add("train_log.csv", training_log_csv(&outcome.log));
    out.add_json(
        "train_summary.json",
        &TrainSummary {
            timesteps: cfg.td3.total_timesteps,
            episodes: outcome.log.len(),
            early_mean_return: early,
            late_mean_return: late,
            disturbance_training: cfg.training_disturbance.enabled,
        },
    );
    out.commit("train-nav", cfg, started)
}

fn steps_csv(result: &EpisodeResult) -> Vec<u8> {
    let trace = result.trace.as_ref().expect("traced episode");
    let act_dim = trace.steps.first().map(|s| s.action.len()).unwrap_or(3);
    let header = if act_dim == 3 {
        "step,ax,ay,az,reward,done".to_string()
    } else {
        let cols: Vec<String> = (0..act_dim).map(|i| format!("a{i}")).collect();
        format!("step,{},reward,done", cols.join(","))
    };
    let mut csv = Csv::new(&header);
    for s in &trace.steps {
        let mut row = vec![s.step.to_string()];
        row.extend(s.action.iter().map(|a| fmt_f64(*a)));
        row.push(fmt_f64(s.reward));
        row.push(u8::from(s.done).to_string());
        csv.row(row);
    }
    csv.into_bytes()
}

#[derive(Debug, Serialize)]
struct EpisodeRow {
    episode: usize,
    episode_return: f64,
    terminal_err_m: f64,
    steps: usize,
    success: bool,
    failure: bool,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    summary: EvalSummary,
    episodes: Vec<EpisodeRow>,
}

pub fn eval(cfg: &RunConfig, checkpoint_path: &Path, out_dir: &Path) -> Result<RunManifest> {
    let started = now_rfc3339();
    let actor = checkpoint::load(checkpoint_path)?.actor().map_err(CliError::from)?;
    let env = nav_env(cfg)?;
    let root = cfg.eval_seed();
    let mut results = Vec::with_capacity(cfg.eval.episodes);
    for e in 0..cfg.eval.episodes {
        let mut env = env.clone().with_recording(e < cfg.eval.trace_episodes);
        let reset_seed = seed::derive_indexed(root, "eval/reset", e as u64);
        results.push(evaluation::run_episode(&mut env, &actor, reset_seed)?);
    }
    let summary = EvalSummary::from_results(&results);
    info!(
        "eval: mean return {:.4}, mean terminal error {:.4} m",
        summary.mean_return, summary.mean_terminal_err_m
    );

    let mut out = Outputs::new(out_dir);
    for (e, r) in results.iter().enumerate().filter(|(_, r)| r.trace.is_some()) {
        let trace = r.trace.as_ref().expect("filtered");
        out.add(format!("episode_{e:03}_steps.csv"), steps_csv(r));
        out.add(
            format!("episode_{e:03}_states.csv"),
            states_csv(trace.states.iter().map(|(t, s)| (*t, s))),
        );
    }
    let episodes = results
        .iter()
        .enumerate()
        .map(|(e, r)| EpisodeRow {
            episode: e,
            episode_return: r.episode_return,
            terminal_err_m: r.terminal_distance,
            steps: r.steps,
            success: r.success,
            failure: r.failure,
        })
        .collect();
    out.add_json("eval.json", &EvalReport { summary, episodes });
    out.commit("eval", cfg, started)
}

#[derive(Debug, Clone, Default)]
pub struct TuneOptions {
    /// Evaluation trajectory; the configured test trajectory when absent.
    pub trajectory: Option<TrajectoryKind>,
    /// Evaluate these gains instead of training.
    pub gains: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RandomBaseline {
    samples: usize,
    median_rmse_m: Option<f64>,
    diverged: usize,
}

#[derive(Debug, Serialize)]
struct TuneSummary {
    trained: bool,
    train_reward: Option<f64>,
    trajectory: TrajectoryKind,
    total_reward: f64,
    rmse_m: Option<f64>,
    diverged: bool,
    random_baseline: RandomBaseline,
    beats_random_median: bool,
}

pub fn read_gains(path: &Path) -> Result<PidParams18> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let gains: PidParams18 = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("gains file {}: {e}", path.display())))?;
    gains
        .validate()
        .map_err(|e| CliError::Config(format!("gains file {}: {e}", path.display())))?;
    Ok(gains)
}

pub fn tune_pid(cfg: &RunConfig, opts: &TuneOptions, out_dir: &Path) -> Result<RunManifest> {
    let started = now_rfc3339();
    let tc = &cfg.tune;
    let spec: TrajectorySpec = match opts.trajectory {
        Some(kind) if kind == tc.train_trajectory.kind => tc.train_trajectory,
        Some(kind) if kind == tc.test_trajectory.kind => tc.test_trajectory,
        Some(kind) => {
            return Err(CliError::Config(format!(
                "no configured trajectory of kind {kind:?}"
            )))
        }
        None => tc.test_trajectory,
    };
    let mut out = Outputs::new(out_dir);
    let (gains, train_reward) = match &opts.gains {
        Some(path) => (read_gains(path)?, None),
        None => {
            info!("tuning for {} timesteps", tc.td3.total_timesteps);
            let outcome = pidtune::tune(tc, &cfg.quad, &cfg.pid_limits)?;
            out.add("tune_log.csv", training_log_csv(&outcome.log));
            (outcome.gains, Some(outcome.train_reward))
        }
    };
    let report = rollout_gains(&gains, &spec, tc, &cfg.quad, &cfg.pid_limits)?;
    let baseline = random_baseline_rmse(
        tc,
        &spec,
        tc.random_baseline,
        seed::derive(cfg.seed, "tune-pid/random-baseline"),
        &cfg.quad,
        &cfg.pid_limits,
    )?;
    let baseline_median = median(&baseline);
    let rmse = report.rmse();
    info!("tracking RMSE {rmse:.4} m, random median {baseline_median:?}");

    let mut csv = Csv::new("t,target_x,target_y,target_z,x,y,z,err");
    for p in &report.points {
        csv.row(
            [p.t, p.target.x, p.target.y, p.target.z, p.pos.x, p.pos.y, p.pos.z, p.err].map(fmt_f64),
        );
    }
    out.add_json("gains.json", &gains);
    out.add("tracking.csv", csv.into_bytes());
    out.add_json(
        "tune_summary.json",
        &TuneSummary {
            trained: opts.gains.is_none(),
            train_reward,
            trajectory: spec.kind,
            total_reward: report.total_reward,
            rmse_m: finite(rmse),
            diverged: report.diverged,
            random_baseline: RandomBaseline {
                samples: baseline.len(),
                median_rmse_m: baseline_median.and_then(finite),
                diverged: baseline.iter().filter(|r| r.is_infinite()).count(),
            },
            beats_random_median: baseline_median.is_some_and(|m| rmse < m),
        },
    );
    out.commit("tune-pid", cfg, started)
}

pub fn sweep_csv(report: &SweepReport) -> Vec<u8> {
    let mut csv = Csv::new("axis,magnitude_N,mean_return,mean_terminal_err_m,max_deviation_m,recovered_frac");
    for c in &report.cells {
        csv.row([
            c.axis.to_string(),
            fmt_f64(c.magnitude_n),
            fmt_f64(c.mean_return),
            fmt_f64(c.mean_terminal_err_m),
            fmt_f64(c.max_deviation_m),
            fmt_f64(c.recovered_frac),
        ]);
    }
    csv.into_bytes()
}

pub fn robustness(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    disturbance_checkpoint: Option<&Path>,
    out_dir: &Path,
) -> Result<RunManifest> {
    let started = now_rfc3339();
    let env = nav_env(cfg)?;
    let clean_actor = checkpoint::load(checkpoint_path)?.actor().map_err(CliError::from)?;
    let clean = robustness_sweep(&env, &clean_actor, &cfg.sweep)?;
    info!("sweep: {} cells, violations {:?}", clean.cells.len(), clean.monotonicity_violations);

    let mut out = Outputs::new(out_dir);
    out.add("sweep.csv", sweep_csv(&clean));
    out.add_json("sweep.json", &clean);
    if let Some(path) = disturbance_checkpoint {
        let actor = checkpoint::load(path)?.actor().map_err(CliError::from)?;
        let disturbed = robustness_sweep(&env, &actor, &cfg.sweep)?;
        let comparison = compare_sweeps(&clean, &disturbed, cfg.compare.alpha)?;
        info!(
            "comparison: {} significant cells, no-impact finding observed: {}",
            comparison.significant_cells, comparison.no_significant_impact_observed
        );
        out.add("sweep_disturbance_trained.csv", sweep_csv(&disturbed));
        out.add_json("sweep_disturbance_trained.json", &disturbed);
        out.add_json("comparison.json", &comparison);
    }
    out.commit("robustness", cfg, started)
}

/// Zero-order-hold replay of timed rotor commands.
#[derive(Debug, Clone)]
pub struct CommandReplay {
    commands: Vec<(f64, MotorCommand)>,
    period: f64,
}

impl CommandReplay {
    pub fn new(commands: Vec<(f64, MotorCommand)>, period: f64) -> Result<Self> {
        if commands.first().map(|c| c.0) != Some(0.0) {
            return Err(CliError::Config("command replay must start at t = 0".into()));
        }
        if commands.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(CliError::Config("command times must be strictly increasing".into()));
        }
        Ok(Self { commands, period })
    }
}

impl Controller for CommandReplay {
    fn control_period(&self) -> f64 {
        self.period
    }

    fn command(&mut self, t: f64, _state: &State12) -> MotorCommand {
        let i = self.commands.partition_point(|(ti, _)| *ti <= t + 1e-12);
        self.commands[i.saturating_sub(1)].1
    }
}

pub fn parse_commands_csv(text: &str) -> Result<Vec<(f64, MotorCommand)>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match vals {
            Ok(v) if v.len() == 5 && v.iter().all(|x| x.is_finite()) => {
                rows.push((v[0], MotorCommand { rpm: [v[1], v[2], v[3], v[4]] }))
            }
            _ => {
                return Err(CliError::Config(format!(
                    "commands_csv line {}: expected 5 finite numbers `t,rpm0,rpm1,rpm2,rpm3`",
                    n + 1
                )))
            }
        }
    }
    Ok(rows)
}

pub fn simulate(cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest> {
    let started = now_rfc3339();
    let sim = &cfg.simulate;
    let commands = match (&sim.commands_csv, sim.rpm) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            parse_commands_csv(&text)?
        }
        (None, Some(rpm)) => vec![(0.0, MotorCommand { rpm })],
        (None, None) => vec![(0.0, MotorCommand::uniform(hover_rpm(&cfg.quad)))],
    };
    for (t, c) in &commands {
        if c.rpm.iter().any(|r| !(0.0..=cfg.quad.rpm_max).contains(r)) {
            return Err(CliError::Config(format!(
                "simulate: command at t = {t} outside [0, {}] rpm",
                cfg.quad.rpm_max
            )));
        }
    }
    let mut ctrl = CommandReplay::new(commands, 1.0 / cfg.nav.control_frequency)?;
    let initial = State12::at_rest(Vector3::from(sim.initial_pos));
    let disturbance = sim.disturbance;
    let traj = dynamics::simulate(
        &initial,
        &mut ctrl,
        |t| disturbance.map(|d| d.force_at(t)).unwrap_or_default(),
        sim.duration,
        &cfg.quad,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut out = Outputs::new(out_dir);
    out.add("trajectory.csv", states_csv(traj.times().zip(traj.states.iter())));
    out.commit("simulate", cfg, started)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_holds_commands() {
        let a = MotorCommand::uniform(1.0);
        let b = MotorCommand::uniform(2.0);
        let mut r = CommandReplay::new(vec![(0.0, a), (0.5, b)], 0.02).unwrap();
        let s = State12::default();
        assert_eq!(r.command(0.0, &s), a);
        assert_eq!(r.command(0.49, &s), a);
        assert_eq!(r.command(0.5, &s), b);
        assert_eq!(r.command(9.0, &s), b);
        assert!(CommandReplay::new(vec![(0.1, a)], 0.02).is_err());
        assert!(CommandReplay::new(vec![(0.0, a), (0.0, b)], 0.02).is_err());
    }

    #[test]
    fn commands_csv_parsing() {
        let rows = parse_commands_csv("t,rpm0,rpm1,rpm2,rpm3\n0,1,2,3,4\n0.5,5,5,5,5\n").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].1.rpm, [1.0, 2.0, 3.0, 4.0]);
        assert!(parse_commands_csv("h\n0,1,2\n").is_err());
    }
}
