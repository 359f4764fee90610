//! Run configuration.
//!
//! Resolution order: built-in defaults, then the TOML file, then each
//! `--override key=value` in order, then `--seed`. Keys are dotted paths into
//! the tables below (`td3.learning_rate`, `tune.td3.total_timesteps`, ...).
//! Per-consumer seeds are derived from the root `seed` and cannot be set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use quadlab::disturbance::{Axes, DisturbanceSpec, TrainingDisturbanceSchedule};
use quadlab::dynamics::QuadParams;
use quadlab::evaluation::SweepConfig;
use quadlab::nav::NavConfig;
use quadlab::pid::{PidLimits, PidParams18};
use quadlab::pidtune::TuneConfig;
use quadlab::seed;
use quadlab::td3::Td3Config;

use crate::{CliError, Result};

/// Keys owned by the seed splitter.
const DERIVED_SEED_KEYS: [&str; 3] = ["td3.seed", "tune.td3.seed", "sweep.seed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingDisturbanceConfig {
    pub enabled: bool,
    pub phases: Vec<Axes>,
    pub switch_interval: u64,
    pub magnitude_range: [f64; 2],
}

impl Default for TrainingDisturbanceConfig {
    fn default() -> Self {
        let s = TrainingDisturbanceSchedule::default();
        Self {
            enabled: false,
            phases: s.phases,
            switch_interval: s.switch_interval,
            magnitude_range: s.magnitude_range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Episodes whose per-step and state traces are written.
    pub trace_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            trace_episodes: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub alpha: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { alpha: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub duration: f64,
    pub initial_pos: [f64; 3],
    /// Constant rotor command; hover when absent.
    pub rpm: Option<[f64; 4]>,
    /// CSV `t,rpm0,rpm1,rpm2,rpm3` replayed with zero-order hold; overrides `rpm`.
    pub commands_csv: Option<PathBuf>,
    pub disturbance: Option<DisturbanceSpec>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            duration: 2.0,
            initial_pos: [0.0, 0.0, 1.0],
            rpm: None,
            commands_csv: None,
            disturbance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub quad: QuadParams,
    pub gains: PidParams18,
    pub pid_limits: PidLimits,
    pub nav: NavConfig,
    pub td3: Td3Config,
    pub training_disturbance: TrainingDisturbanceConfig,
    pub eval: EvalConfig,
    pub tune: TuneConfig,
    pub sweep: SweepConfig,
    pub compare: CompareConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            quad: QuadParams::default(),
            gains: PidParams18::golden(),
            pid_limits: PidLimits::default(),
            nav: NavConfig::default(),
            td3: Td3Config::default(),
            training_disturbance: TrainingDisturbanceConfig::default(),
            eval: EvalConfig::default(),
            tune: TuneConfig::default(),
            sweep: SweepConfig::default(),
            compare: CompareConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Root seed for evaluation episode resets.
    pub fn eval_seed(&self) -> u64 {
        seed::derive(self.seed, "eval")
    }

    pub fn training_schedule(&self) -> Option<TrainingDisturbanceSchedule> {
        let d = &self.training_disturbance;
        d.enabled.then(|| TrainingDisturbanceSchedule {
            phases: d.phases.clone(),
            switch_interval: d.switch_interval,
            magnitude_range: d.magnitude_range,
            seed: seed::derive(self.seed, "train-nav/disturbance"),
        })
    }

    fn split_seeds(&mut self) {
        self.td3.seed = seed::derive(self.seed, "train-nav/td3");
        self.tune.td3.seed = seed::derive(self.seed, "tune-pid/td3");
        self.sweep.seed = seed::derive(self.seed, "robustness/sweep");
    }

    /// Checks every section; the message names the offending key.
    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{key}: {e}"));
        self.quad.validate().map_err(|e| cfg("quad", &e))?;
        self.gains.validate().map_err(|e| cfg("gains", &e))?;
        self.nav.validate().map_err(|e| cfg("nav", &e))?;
        self.td3.validate().map_err(|e| cfg("td3", &e))?;
        if let Some(s) = self.training_schedule() {
            s.validate().map_err(|e| cfg("training_disturbance", &e))?;
        }
        if self.eval.episodes == 0 {
            return Err(cfg("eval.episodes", &"must be > 0"));
        }
        self.tune.validate().map_err(|e| cfg("tune", &e))?;
        self.tune.td3.validate().map_err(|e| cfg("tune.td3", &e))?;
        self.sweep.validate().map_err(|e| cfg("sweep", &e))?;
        if !(self.compare.alpha > 0.0 && self.compare.alpha < 1.0) {
            return Err(cfg("compare.alpha", &"must lie in (0, 1)"));
        }
        if !(self.simulate.duration > 0.0 && self.simulate.duration.is_finite()) {
            return Err(cfg("simulate.duration", &"must be finite and > 0"));
        }
        if let Some(d) = &self.simulate.disturbance {
            d.validate().map_err(|e| cfg("simulate.disturbance", &e))?;
        }
        Ok(())
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursive merge; tables merge key-wise, anything else replaces.
fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn contains_path(t: &Table, key: &str) -> bool {
    let mut cur = t;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match cur.get(*p) {
            Some(Value::Table(next)) if i + 1 < parts.len() => cur = next,
            Some(_) if i + 1 == parts.len() => return true,
            _ => return false,
        }
    }
    false
}

/// Parses `key=value`.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Builds the resolved configuration.
pub fn resolve(file_text: Option<&str>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut tree = match Value::try_from(RunConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("defaults serialise to a table"),
    };
    let mut user = match file_text {
        Some(text) => text
            .parse::<Table>()
            .map_err(|e| CliError::Config(format!("config file: {e}")))?,
        None => Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut user, &k, v)?;
    }
    if let Some(s) = seed {
        let v = i64::try_from(s).map_err(|_| CliError::Config(format!("seed {s} exceeds i64::MAX")))?;
        user.insert("seed".into(), Value::Integer(v));
    }
    for key in DERIVED_SEED_KEYS {
        if contains_path(&user, key) {
            return Err(CliError::Config(format!(
                "`{key}` is derived from the root `seed` and cannot be set"
            )));
        }
    }
    merge(&mut tree, user);

    let mut cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(tree)).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("`{path}`: {}", e.into_inner()))
    })?;
    cfg.split_seeds();
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (if any) and resolves.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    resolve(text.as_deref(), overrides, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = resolve(None, &[], None).unwrap();
        let mut expected = RunConfig::default();
        expected.split_seeds();
        assert_eq!(cfg, expected);
    }

    #[test]
    fn precedence_file_then_override_then_seed() {
        let file = "seed = 3\n[td3]\nlearning_rate = 0.002\ntotal_timesteps = 500\n";
        let cfg = resolve(Some(file), &["td3.learning_rate=0.004".into()], Some(9)).unwrap();
        assert_eq!(cfg.td3.learning_rate, 0.004);
        assert_eq!(cfg.td3.total_timesteps, 500);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.td3.seed, seed::derive(9, "train-nav/td3"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = resolve(None, &["nav.bogus=1".into()], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nav") && msg.contains("bogus"), "{msg}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn invalid_value_is_rejected() {
        let err = resolve(None, &["nav.action_scale=-1".into()], None).unwrap_err();
        assert!(err.to_string().contains("nav"));
        let err = resolve(None, &["td3.learning_rate=\"fast\"".into()], None).unwrap_err();
        assert!(err.to_string().contains("td3.learning_rate"), "{err}");
    }

    #[test]
    fn derived_seeds_are_protected() {
        assert!(resolve(None, &["td3.seed=4".into()], None).is_err());
        assert!(resolve(Some("[sweep]\nseed = 1\n"), &[], None).is_err());
    }

    #[test]
    fn string_and_array_overrides() {
        let cfg = resolve(
            None,
            &[
                "nav.execution_mode=open_loop".into(),
                "sweep.magnitudes=[0.0, 0.01]".into(),
                "sweep.axes=[\"x\", \"yz\"]".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.nav.execution_mode, quadlab::nav::ExecutionMode::OpenLoop);
        assert_eq!(cfg.sweep.magnitudes, vec![0.0, 0.01]);
        assert_eq!(cfg.sweep.axes[1].to_string(), "yz");
    }
}
