//! Twin-delayed deep deterministic policy gradient.
//!
//! Two critics regress a shared TD target built from the smaller of their
//! target-network estimates. The actor and all target networks update every
//! `policy_delay` critic updates. Exploration uses correlated Gaussian noise
//! added to the actor output before clipping to `[-1, 1]`.

use nalgebra::{DMatrix, DVector};
use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment};
use crate::nn::{Activation, Adam, AdamConfig, Mlp, NnError};
use crate::seed;

pub const ACTION_MIN: f64 = -1.0;
pub const ACTION_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Td3Error {
    #[error("invalid TD3 configuration: {0}")]
    Config(String),
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    InsufficientBuffer { have: usize, need: usize },
    #[error("noise covariance is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("environment failed at timestep {timestep}: {source}")]
    Env {
        timestep: usize,
        #[source]
        source: EnvError,
    },
}

/// Multivariate Gaussian sampler `mu + L z` with `L L^T = cov`.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn new(mean: &[f64], cov: DMatrix<f64>, seed: u64) -> Result<Self, Td3Error> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Td3Error::Config(format!(
                "covariance must be {n}x{n}, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if cov != cov.transpose() {
            return Err(Td3Error::NotPositiveDefinite);
        }
        let chol = cov.cholesky().ok_or(Td3Error::NotPositiveDefinite)?.unpack();
        Ok(Self {
            mean: DVector::from_column_slice(mean),
            chol,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Zero mean, `variance * I`.
    pub fn isotropic(dim: usize, variance: f64, seed: u64) -> Result<Self, Td3Error> {
        Self::new(
            &vec![0.0; dim],
            DMatrix::identity(dim, dim) * variance,
            seed,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&mut self) -> Vec<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| {
            StandardNormal.sample(&mut self.rng)
        });
        (&self.mean + &self.chol * z).as_slice().to_vec()
    }
}

/// Actor output plus optional exploration noise, clipped to the action box.
pub fn select_action(
    actor: &Mlp,
    obs: &[f64],
    noise: Option<&mut GaussianNoise>,
) -> Result<Vec<f64>, Td3Error> {
    let mut a = actor.forward(obs)?;
    if let Some(n) = noise {
        if n.dim() != a.len() {
            return Err(NnError::DimensionMismatch {
                expected: a.len(),
                got: n.dim(),
            }
            .into());
        }
        for (ai, ni) in a.iter_mut().zip(n.sample()) {
            *ai += ni;
        }
    }
    Ok(a.into_iter().map(clip_action).collect())
}

fn clip_action(a: f64) -> f64 {
    a.clamp(ACTION_MIN, ACTION_MAX)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Column-stacked minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(ts: &[Transition]) -> Self {
        let obs_dim = ts.first().map_or(0, |t| t.state.len());
        let act_dim = ts.first().map_or(0, |t| t.action.len());
        let rows = |f: &dyn Fn(&Transition) -> &[f64], d: usize| {
            Array2::from_shape_vec(
                (ts.len(), d),
                ts.iter().flat_map(|t| f(t).iter().copied()).collect(),
            )
            .expect("transition dimensions agree")
        };
        Self {
            obs: rows(&|t| &t.state, obs_dim),
            actions: rows(&|t| &t.action, act_dim),
            rewards: ts.iter().map(|t| t.reward).collect(),
            next_obs: rows(&|t| &t.next_state, obs_dim),
            dones: ts.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_obs: Vec<f64>,
    dones: Vec<f64>,
    len: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        Self {
            capacity,
            obs_dim,
            act_dim,
            obs: vec![0.0; capacity * obs_dim],
            actions: vec![0.0; capacity * act_dim],
            rewards: vec![0.0; capacity],
            next_obs: vec![0.0; capacity * obs_dim],
            dones: vec![0.0; capacity],
            len: 0,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, t: &Transition) -> Result<(), Td3Error> {
        for (got, expected) in [
            (t.state.len(), self.obs_dim),
            (t.next_state.len(), self.obs_dim),
            (t.action.len(), self.act_dim),
        ] {
            if got != expected {
                return Err(NnError::DimensionMismatch { expected, got }.into());
            }
        }
        let i = self.head;
        self.obs[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(&t.state);
        self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(&t.next_state);
        self.actions[i * self.act_dim..(i + 1) * self.act_dim].copy_from_slice(&t.action);
        self.rewards[i] = t.reward;
        self.dones[i] = if t.done { 1.0 } else { 0.0 };
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch, Td3Error> {
        if self.len < batch_size || batch_size == 0 {
            return Err(Td3Error::InsufficientBuffer {
                have: self.len,
                need: batch_size.max(1),
            });
        }
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..self.len)).collect();
        let gather = |src: &[f64], d: usize| {
            let mut out = Array2::zeros((batch_size, d));
            for (row, &i) in idx.iter().enumerate() {
                out.row_mut(row)
                    .as_slice_mut()
                    .expect("standard layout")
                    .copy_from_slice(&src[i * d..(i + 1) * d]);
            }
            out
        };
        Ok(Batch {
            obs: gather(&self.obs, self.obs_dim),
            actions: gather(&self.actions, self.act_dim),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            next_obs: gather(&self.next_obs, self.obs_dim),
            dones: idx.iter().map(|&i| self.dones[i]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Config {
    /// Layer widths after the input, ending with the action dimension.
    pub actor_arch: Vec<usize>,
    /// Layer widths after the input, ending with 1.
    pub critic_arch: Vec<usize>,
    pub hidden_activation: Activation,
    pub learning_rate: f64,
    pub total_timesteps: usize,
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: usize,
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub warmup_steps: usize,
    /// Diagonal of the exploration covariance (zero mean).
    pub exploration_noise_var: f64,
    pub seed: u64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            actor_arch: vec![50, 100, 500, 100, 50, 3],
            critic_arch: vec![50, 100, 500, 100, 50, 1],
            hidden_activation: Activation::Relu,
            learning_rate: 1e-3,
            total_timesteps: 100_000,
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            target_noise_std: 0.2,
            target_noise_clip: 0.5,
            batch_size: 100,
            buffer_capacity: 100_000,
            warmup_steps: 1000,
            exploration_noise_var: 0.5,
            seed: 0,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<(), Td3Error> {
        let fail = |msg: String| Err(Td3Error::Config(msg));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.policy_delay < 1 {
            return fail("policy_delay must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, v) in [
            ("total_timesteps", self.total_timesteps),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
        ] {
            if v == 0 {
                return fail(format!("{name} must be > 0"));
            }
        }
        if self.buffer_capacity < self.batch_size {
            return fail("buffer_capacity must be >= batch_size".into());
        }
        if self.actor_arch.is_empty() || self.critic_arch.is_empty() {
            return fail("actor_arch and critic_arch need at least an output layer".into());
        }
        if self.actor_arch.contains(&0) || self.critic_arch.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        if self.critic_arch.last() != Some(&1) {
            return fail(format!(
                "critic_arch must end with a single output, got {:?}",
                self.critic_arch
            ));
        }
        for (name, v) in [
            ("target_noise_std", self.target_noise_std),
            ("target_noise_clip", self.target_noise_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.exploration_noise_var > 0.0 && self.exploration_noise_var.is_finite()) {
            return fail(format!(
                "exploration_noise_var must be > 0, got {}",
                self.exploration_noise_var
            ));
        }
        Ok(())
    }

    /// Checks the architecture against an environment's spaces.
    pub fn validate_for(&self, obs_dim: usize, act_dim: usize) -> Result<(), Td3Error> {
        self.validate()?;
        if self.actor_arch.last() != Some(&act_dim) {
            return Err(Td3Error::Config(format!(
                "actor_arch {:?} must end with the environment action dimension {act_dim}",
                self.actor_arch
            )));
        }
        if obs_dim == 0 {
            return Err(Td3Error::Config("observation dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn actor_sizes(&self, obs_dim: usize) -> Vec<usize> {
        std::iter::once(obs_dim).chain(self.actor_arch.iter().copied()).collect()
    }

    pub fn critic_sizes(&self, obs_dim: usize, act_dim: usize) -> Vec<usize> {
        std::iter::once(obs_dim + act_dim)
            .chain(self.critic_arch.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    /// Sum of both critics' mean squared TD errors.
    pub critic_loss: f64,
    /// `-mean Q1(s, pi(s))`, present only on delayed-update steps.
    pub actor_loss: Option<f64>,
}

/// TD targets with the per-critic alternatives kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct TdTargets {
    pub y: Array1<f64>,
    pub y_critic1: Array1<f64>,
    pub y_critic2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Td3Agent {
    cfg: Td3Config,
    obs_dim: usize,
    act_dim: usize,
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critics: [Mlp; 2],
    pub critic_targets: [Mlp; 2],
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    updates: u64,
    rng: ChaCha8Rng,
}

fn join(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("batch rows agree")
}

impl Td3Agent {
    pub fn new(cfg: &Td3Config, obs_dim: usize, act_dim: usize) -> Result<Self, Td3Error> {
        cfg.validate_for(obs_dim, act_dim)?;
        let mut init = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "td3/init"));
        let hidden = cfg.hidden_activation;
        let actor = Mlp::new(
            &cfg.actor_sizes(obs_dim),
            hidden,
            Activation::Tanh,
            &mut init,
        )?;
        let critic_sizes = cfg.critic_sizes(obs_dim, act_dim);
        let critics = [
            Mlp::new(&critic_sizes, hidden, Activation::Linear, &mut init)?,
            Mlp::new(&critic_sizes, hidden, Activation::Linear, &mut init)?,
        ];
        let adam = AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        };
        Ok(Self {
            cfg: cfg.clone(),
            obs_dim,
            act_dim,
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor_opt: Adam::new(&actor, adam),
            critic_opts: [Adam::new(&critics[0], adam), Adam::new(&critics[1], adam)],
            actor,
            critics,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "td3/update")),
        })
    }

    pub fn config(&self) -> &Td3Config {
        &self.cfg
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Number of completed `train_on_batch` calls.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Smoothed target action and the twin-min TD target.
    pub fn td_targets(&mut self, batch: &Batch) -> Result<TdTargets, Td3Error> {
        let mut next_actions = self.actor_target.forward_batch(batch.next_obs.view())?;
        let std = self.cfg.target_noise_std;
        let clip = self.cfg.target_noise_clip;
        for a in next_actions.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *a = clip_action(*a + (std * z).clamp(-clip, clip));
        }
        let input = join(&batch.next_obs, &next_actions);
        let q1 = self.critic_targets[0].forward_batch(input.view())?.column(0).to_owned();
        let q2 = self.critic_targets[1].forward_batch(input.view())?.column(0).to_owned();
        let discount = batch.dones.mapv(|d| self.cfg.gamma * (1.0 - d));
        let y_critic1 = &batch.rewards + &(&discount * &q1);
        let y_critic2 = &batch.rewards + &(&discount * &q2);
        let q_min = ndarray::Zip::from(&q1).and(&q2).map_collect(|&a, &b| a.min(b));
        let y = &batch.rewards + &(&discount * &q_min);
        Ok(TdTargets {
            y,
            y_critic1,
            y_critic2,
        })
    }

    /// One TD3 update on a given minibatch.
    pub fn train_on_batch(&mut self, batch: &Batch) -> Result<LossReport, Td3Error> {
        if batch.is_empty() {
            return Err(Td3Error::InsufficientBuffer { have: 0, need: 1 });
        }
        let n = batch.len() as f64;
        let targets = self.td_targets(batch)?;
        let y = targets.y.insert_axis(Axis(1));
        let input = join(&batch.obs, &batch.actions);
        let mut critic_loss = 0.0;
        for (critic, opt) in self.critics.iter_mut().zip(self.critic_opts.iter_mut()) {
            let cache = critic.forward_cached(input.view())?;
            let err = cache.output() - &y;
            critic_loss += err.mapv(|e| e * e).sum() / n;
            let grad = err * (2.0 / n);
            let (grads, _) = critic.backward(&cache, grad.view())?;
            opt.step(critic, &grads);
        }
        self.updates += 1;

        let mut actor_loss = None;
        if self.updates % self.cfg.policy_delay as u64 == 0 {
            let actor_cache = self.actor.forward_cached(batch.obs.view())?;
            let critic_input = join(&batch.obs, actor_cache.output());
            let critic_cache = self.critics[0].forward_cached(critic_input.view())?;
            actor_loss = Some(-critic_cache.output().sum() / n);
            let dq = Array2::from_elem((batch.len(), 1), -1.0 / n);
            let (_, dinput) = self.critics[0].backward(&critic_cache, dq.view())?;
            let da = dinput.slice(s![.., self.obs_dim..]).to_owned();
            let (grads, _) = self.actor.backward(&actor_cache, da.view())?;
            self.actor_opt.step(&mut self.actor, &grads);

            let tau = self.cfg.tau;
            self.actor_target.soft_update_from(&self.actor, tau);
            for (t, c) in self.critic_targets.iter_mut().zip(&self.critics) {
                t.soft_update_from(c, tau);
            }
        }
        Ok(LossReport {
            critic_loss,
            actor_loss,
        })
    }

    /// Samples a minibatch from `buffer` and trains on it.
    pub fn train_step(&mut self, buffer: &ReplayBuffer) -> Result<LossReport, Td3Error> {
        let batch = buffer.sample(self.cfg.batch_size, &mut self.rng)?;
        self.train_on_batch(&batch)
    }
}

/// One row of the per-episode training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    /// Total environment steps taken when the episode ended.
    pub timestep: usize,
    pub episode: usize,
    pub episode_return: f64,
    /// Mean losses over the updates performed during the episode.
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Td3Agent,
    pub log: Vec<EpisodeLog>,
}

impl TrainOutcome {
    pub fn actor(&self) -> &Mlp {
        &self.agent.actor
    }
}

/// Mean of `values`, or `None` when empty.
fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Standard interaction loop: uniform random actions during warmup, then
/// noisy actor actions with one update per environment step.
pub fn train<E: Environment + ?Sized>(env: &mut E, cfg: &Td3Config) -> Result<TrainOutcome, Td3Error> {
    let obs_dim = env.observation_dim();
    let act_dim = env.action_dim();
    cfg.validate_for(obs_dim, act_dim)?;
    let mut agent = Td3Agent::new(cfg, obs_dim, act_dim)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, obs_dim, act_dim);
    let mut explore_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "td3/warmup"));
    let mut noise = GaussianNoise::isotropic(
        act_dim,
        cfg.exploration_noise_var,
        seed::derive(cfg.seed, "td3/exploration"),
    )?;

    let env_err = |timestep: usize| move |source: EnvError| Td3Error::Env { timestep, source };
    let mut log = Vec::new();
    let mut episode = 0usize;
    let mut obs = env
        .reset(seed::derive_indexed(cfg.seed, "env/reset", 0))
        .map_err(env_err(0))?;
    let mut ep_return = 0.0;
    let mut critic_losses = Vec::new();
    let mut actor_losses = Vec::new();

    for t in 0..cfg.total_timesteps {
        let action = if t < cfg.warmup_steps {
            (0..act_dim)
                .map(|_| explore_rng.random_range(ACTION_MIN..=ACTION_MAX))
                .collect()
        } else {
            select_action(&agent.actor, &obs, Some(&mut noise))?
        };
        let step = env.step(&action).map_err(env_err(t))?;
        ep_return += step.reward;
        buffer.push(&Transition {
            state: obs,
            action,
            reward: step.reward,
            next_state: step.obs.clone(),
            done: step.terminated,
        })?;
        obs = step.obs.clone();

        if t >= cfg.warmup_steps && buffer.len() >= cfg.batch_size {
            let report = agent.train_step(&buffer)?;
            critic_losses.push(report.critic_loss);
            if let Some(a) = report.actor_loss {
                actor_losses.push(a);
            }
        }

        if step.done() {
            log.push(EpisodeLog {
                timestep: t + 1,
                episode,
                episode_return: ep_return,
                critic_loss: mean(&critic_losses),
                actor_loss: mean(&actor_losses),
            });
            episode += 1;
            ep_return = 0.0;
            critic_losses.clear();
            actor_losses.clear();
            if t + 1 < cfg.total_timesteps {
                obs = env
                    .reset(seed::derive_indexed(cfg.seed, "env/reset", episode as u64))
                    .map_err(env_err(t + 1))?;
            }
        }
    }
    Ok(TrainOutcome { agent, log })
}

/// Mean episode returns over the first and last tenth of a training log.
pub fn early_late_returns(log: &[EpisodeLog], total_timesteps: usize) -> (Option<f64>, Option<f64>) {
    let tenth = total_timesteps / 10;
    let early: Vec<f64> = log
        .iter()
        .filter(|e| e.timestep <= tenth)
        .map(|e| e.episode_return)
        .collect();
    let late: Vec<f64> = log
        .iter()
        .filter(|e| e.timestep > total_timesteps - tenth)
        .map(|e| e.episode_return)
        .collect();
    (mean(&early), mean(&late))
}
