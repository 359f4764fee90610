//! Noise-free policy evaluation, the disturbance robustness sweep and the
//! clean-versus-disturbance-trained comparison.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::disturbance::{Axes, DisturbanceSource, DisturbanceSpec};
use crate::env::{EnvError, Environment};
use crate::nav::{EpisodeTrace, NavEnv};
use crate::nn::Mlp;
use crate::seed;
use crate::td3::{select_action, Td3Error};

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode_return: f64,
    pub terminal_distance: f64,
    pub steps: usize,
    pub success: bool,
    pub failure: bool,
    /// Present when the environment records traces.
    pub trace: Option<EpisodeTrace>,
}

/// Runs one episode with the actor's noise-free actions.
pub fn run_episode(env: &mut NavEnv, actor: &Mlp, reset_seed: u64) -> Result<EpisodeResult, Td3Error> {
    if actor.input_dim() != env.observation_dim() || actor.output_dim() != env.action_dim() {
        return Err(Td3Error::Config(format!(
            "actor maps {} -> {} but the environment needs {} -> {}",
            actor.input_dim(),
            actor.output_dim(),
            env.observation_dim(),
            env.action_dim()
        )));
    }
    let env_err = |timestep: usize| move |source: EnvError| Td3Error::Env { timestep, source };
    let mut obs = env.reset(reset_seed).map_err(env_err(0))?;
    let mut episode_return = 0.0;
    let mut steps = 0;
    loop {
        let action = select_action(actor, &obs, None)?;
        let step = env.step(&action).map_err(env_err(steps))?;
        episode_return += step.reward;
        steps += 1;
        if step.done() {
            return Ok(EpisodeResult {
                episode_return,
                terminal_distance: env.distance_to_target(),
                steps,
                success: step.info.success,
                failure: step.info.failure,
                trace: env.trace().states.first().map(|_| env.trace().clone()),
            });
        }
        obs = step.obs;
    }
}

/// `episodes` noise-free episodes, reset seeds split from `root_seed`.
pub fn evaluate(env: &mut NavEnv, actor: &Mlp, episodes: usize, root_seed: u64) -> Result<Vec<EpisodeResult>, Td3Error> {
    if episodes == 0 {
        return Err(Td3Error::Config("episodes must be > 0".into()));
    }
    (0..episodes)
        .map(|e| run_episode(env, actor, seed::derive_indexed(root_seed, "eval/reset", e as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub min_return: f64,
    pub max_return: f64,
    pub mean_terminal_err_m: f64,
    pub min_terminal_err_m: f64,
    pub max_terminal_err_m: f64,
    pub success_frac: f64,
}

impl EvalSummary {
    pub fn from_results(results: &[EpisodeResult]) -> Self {
        let n = results.len() as f64;
        let rets = results.iter().map(|r| r.episode_return);
        let errs = results.iter().map(|r| r.terminal_distance);
        Self {
            episodes: results.len(),
            mean_return: rets.clone().sum::<f64>() / n,
            min_return: rets.clone().fold(f64::INFINITY, f64::min),
            max_return: rets.fold(f64::NEG_INFINITY, f64::max),
            mean_terminal_err_m: errs.clone().sum::<f64>() / n,
            min_terminal_err_m: errs.clone().fold(f64::INFINITY, f64::min),
            max_terminal_err_m: errs.fold(f64::NEG_INFINITY, f64::max),
            success_frac: results.iter().filter(|r| r.success).count() as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axes: Vec<Axes>,
    /// Newtons, evaluated in the given order.
    pub magnitudes: Vec<f64>,
    pub episodes: usize,
    /// Step onset drawn uniformly from this interval per episode, s.
    pub onset_range: [f64; 2],
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axes: vec![Axes::X, Axes::Y, Axes::Z],
            magnitudes: vec![0.005, 0.01, 0.02, 0.04],
            episodes: 5,
            onset_range: [0.0, 2.0],
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.axes.is_empty() || self.magnitudes.is_empty() {
            return fail("sweep grid must have at least one axis and one magnitude");
        }
        if self.magnitudes.iter().any(|m| !m.is_finite()) {
            return fail("sweep magnitudes must be finite");
        }
        if self.episodes == 0 {
            return fail("sweep episodes must be > 0");
        }
        let [lo, hi] = self.onset_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return fail("onset_range must satisfy 0 <= min <= max");
        }
        Ok(())
    }

    /// Onset time of episode `e`; shared by every cell and checkpoint.
    pub fn onset(&self, e: usize) -> f64 {
        let [lo, hi] = self.onset_range;
        if hi > lo {
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(self.seed, "sweep/onset", e as u64)).random_range(lo..hi)
        } else {
            lo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub axis: Axes,
    pub magnitude_n: f64,
    pub mean_return: f64,
    pub mean_terminal_err_m: f64,
    /// Largest distance from the undisturbed trajectory at equal time, any episode.
    pub max_deviation_m: f64,
    pub recovered_frac: f64,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub baseline: SweepCell,
    pub cells: Vec<SweepCell>,
    /// Grid inversions per axis: adjacent magnitudes (ascending) where mean return rises.
    pub monotonicity_violations: Vec<(Axes, usize)>,
}

impl SweepReport {
    pub fn max_violations_per_axis(&self) -> usize {
        self.monotonicity_violations.iter().map(|(_, v)| *v).max().unwrap_or(0)
    }
}

fn positions(trace: &EpisodeTrace) -> Vec<Vector3<f64>> {
    trace.states.iter().map(|(_, s)| s.pos).collect()
}

/// Max distance between two physics-rate paths; the shorter is held at its last point.
fn max_deviation(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| (a[i.min(a.len() - 1)] - b[i.min(b.len() - 1)]).norm())
        .fold(0.0, f64::max)
}

fn run_cell(
    env: &NavEnv,
    actor: &Mlp,
    cfg: &SweepConfig,
    axis: Axes,
    magnitude: f64,
    disturbance: impl Fn(usize) -> DisturbanceSource,
    baseline_path: Option<&[Vector3<f64>]>,
) -> Result<(SweepCell, Vec<Vector3<f64>>), Td3Error> {
    let mut returns = Vec::with_capacity(cfg.episodes);
    let mut errs = Vec::with_capacity(cfg.episodes);
    let mut max_dev: f64 = 0.0;
    let mut recovered = 0usize;
    let mut first_path = Vec::new();
    let success_radius = env.config().success_radius;
    for e in 0..cfg.episodes {
        let mut env = env.clone().with_disturbance(disturbance(e)).with_recording(true);
        let r = run_episode(&mut env, actor, seed::derive_indexed(cfg.seed, "sweep/reset", e as u64))?;
        let path = positions(r.trace.as_ref().expect("recording enabled"));
        if let Some(base) = baseline_path {
            max_dev = max_dev.max(max_deviation(base, &path));
        }
        if e == 0 {
            first_path = path;
        }
        returns.push(r.episode_return);
        errs.push(r.terminal_distance);
        if r.terminal_distance < success_radius {
            recovered += 1;
        }
    }
    let n = cfg.episodes as f64;
    Ok((
        SweepCell {
            axis,
            magnitude_n: magnitude,
            mean_return: returns.iter().sum::<f64>() / n,
            mean_terminal_err_m: errs.iter().sum::<f64>() / n,
            max_deviation_m: max_dev,
            recovered_frac: recovered as f64 / n,
            returns,
        },
        first_path,
    ))
}

/// Evaluates `actor` under a fixed step disturbance for every (axis, magnitude) cell.
///
/// The environment is used as a template; each episode runs on a fresh clone.
/// Environment failures are scored by the episode, not raised.
pub fn robustness_sweep(env: &NavEnv, actor: &Mlp, cfg: &SweepConfig) -> Result<SweepReport, Td3Error> {
    cfg.validate().map_err(|e| Td3Error::Config(e.to_string()))?;
    let (mut baseline, base_path) = run_cell(env, actor, cfg, Axes::XYZ, 0.0, |_| DisturbanceSource::None, None)?;
    baseline.max_deviation_m = 0.0;

    let grid: Vec<(Axes, f64)> = cfg
        .axes
        .iter()
        .flat_map(|&a| cfg.magnitudes.iter().map(move |&m| (a, m)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(axis, magnitude)| {
            run_cell(
                env,
                actor,
                cfg,
                axis,
                magnitude,
                |e| DisturbanceSource::Fixed(DisturbanceSpec::step(axis, magnitude, cfg.onset(e))),
                Some(&base_path),
            )
            .map(|(c, _)| c)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let monotonicity_violations = cfg
        .axes
        .iter()
        .map(|&axis| {
            let mut row: Vec<&SweepCell> = cells.iter().filter(|c| c.axis == axis).collect();
            row.sort_by(|a, b| a.magnitude_n.total_cmp(&b.magnitude_n));
            let v = row.windows(2).filter(|w| w[1].mean_return > w[0].mean_return).count();
            (axis, v)
        })
        .collect();
    Ok(SweepReport {
        baseline,
        cells,
        monotonicity_violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 {
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

/// Two-sided Welch t-test of equal means.
///
/// With both samples constant the test degenerates: equal means give p = 1,
/// different means give p = 0.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Option<WelchTest> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        let p_value = if ma == mb { 1.0 } else { 0.0 };
        let t = if ma == mb { 0.0 } else { (ma - mb).signum() * f64::INFINITY };
        return Some(WelchTest {
            t,
            df: na + nb - 2.0,
            p_value,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let denom = (va / na).powi(2) / (na - 1.0).max(1.0) + (vb / nb).powi(2) / (nb - 1.0).max(1.0);
    let df = se2 * se2 / denom;
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Some(WelchTest { t, df, p_value })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellComparison {
    pub axis: Axes,
    pub magnitude_n: f64,
    /// Disturbance-trained minus clean-trained.
    pub delta_mean_return: f64,
    pub delta_mean_terminal_err_m: f64,
    pub delta_recovered_frac: f64,
    pub welch: Option<WelchTest>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub alpha: f64,
    pub cells: Vec<CellComparison>,
    pub significant_cells: usize,
    /// No cell differs at the Bonferroni-adjusted level `alpha / cells`.
    pub no_significant_impact_observed: bool,
}

/// Cell-by-cell comparison of two sweeps over the same grid.
pub fn compare_sweeps(clean: &SweepReport, disturbed: &SweepReport, alpha: f64) -> Result<Comparison, Td3Error> {
    if clean.cells.len() != disturbed.cells.len() {
        return Err(Td3Error::Config("sweeps cover different grids".into()));
    }
    let adjusted = alpha / clean.cells.len().max(1) as f64;
    let mut any_adjusted = false;
    let cells = clean
        .cells
        .iter()
        .zip(&disturbed.cells)
        .map(|(c, d)| {
            if c.axis != d.axis || c.magnitude_n != d.magnitude_n {
                return Err(Td3Error::Config("sweeps cover different grids".into()));
            }
            let welch = welch_t_test(&d.returns, &c.returns);
            let p = welch.map(|w| w.p_value).unwrap_or(1.0);
            any_adjusted |= p < adjusted;
            Ok(CellComparison {
                axis: c.axis,
                magnitude_n: c.magnitude_n,
                delta_mean_return: d.mean_return - c.mean_return,
                delta_mean_terminal_err_m: d.mean_terminal_err_m - c.mean_terminal_err_m,
                delta_recovered_frac: d.recovered_frac - c.recovered_frac,
                welch,
                significant: p < alpha,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Comparison {
        alpha,
        significant_cells: cells.iter().filter(|c| c.significant).count(),
        no_significant_impact_observed: !any_adjusted,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_matches_hand_computation() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0];
        let w = welch_t_test(&a, &b).unwrap();
        // var a = 5/3, var b = 10; se^2 = 5/12 + 2
        let se2: f64 = 5.0 / 12.0 + 2.0;
        assert!((w.t - (2.5 - 6.0) / se2.sqrt()).abs() < 1e-12);
        let df = se2 * se2 / ((5.0f64 / 12.0).powi(2) / 3.0 + 4.0 / 4.0);
        assert!((w.df - df).abs() < 1e-12);
        // reference value from an independent Welch implementation
        assert!((w.p_value - 0.06913359319239236).abs() < 1e-9);
    }

    #[test]
    fn welch_degenerate_cases() {
        assert_eq!(welch_t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap().p_value, 1.0);
        assert_eq!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).unwrap().p_value, 0.0);
        assert!(welch_t_test(&[], &[1.0]).is_none());
    }

    #[test]
    fn onsets_are_seeded_and_in_range() {
        let cfg = SweepConfig::default();
        for e in 0..50 {
            let t = cfg.onset(e);
            assert!((0.0..2.0).contains(&t));
            assert_eq!(t, cfg.onset(e));
        }
        assert_ne!(cfg.onset(0), cfg.onset(1));
    }

    #[test]
    fn deviation_holds_shorter_path() {
        let a = vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)];
        let b = vec![Vector3::zeros(), Vector3::zeros(), Vector3::new(0.0, 3.0, 0.0)];
        assert!((max_deviation(&a, &b) - 10f64.sqrt()).abs() < 1e-15);
    }
}
