//! Episodic environment interface shared by the learner and the tasks.

use thiserror::Error;

use crate::dynamics::DynamicsError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("action has {got} components, expected {expected}")]
    ActionDimension { expected: usize, got: usize },
    #[error("action contains a non-finite component")]
    NonFiniteAction,
    #[error("step called before reset or after the episode ended")]
    NotRunning,
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Episode ended on its own (success or failure); no bootstrapping past it.
    pub terminated: bool,
    /// Episode cut off by the step limit.
    pub truncated: bool,
    pub info: StepInfo,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    pub success: bool,
    /// The vehicle diverged or left the workspace.
    pub failure: bool,
    /// Distance to the goal after the step, when the task has one.
    pub distance: Option<f64>,
}

pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError>;
    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError>;
}

pub(crate) fn check_action(action: &[f64], expected: usize) -> Result<(), EnvError> {
    if action.len() != expected {
        return Err(EnvError::ActionDimension {
            expected,
            got: action.len(),
        });
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(EnvError::NonFiniteAction);
    }
    Ok(())
}
