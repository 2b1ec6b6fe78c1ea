//! Replay buffer and off-policy actor-critic agents (SAC and TD3) acting on
//! encoder latents.
//!
//! The encoder is trained by the critic (and, elsewhere, by the
//! self-predictive losses); actors always consume detached latents.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use spd_autograd::{Adam, AdamConfig, Graph, ParamSet, Real, Tensor, Var};

use crate::imageops::ImageBatch;
use crate::nets::{
    soft_update, Bind, DeterministicActor, Encoder, EncoderConfig, GaussianActor, LogStdBounds, TwinCritic,
};
use crate::pixelenv::Observation;
use crate::{Result, SpdError};

// ---------------------------------------------------------------- replay

/// One interaction record, stored un-augmented.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_obs: Observation,
    /// True only for genuine terminations; time limits are stored as false.
    pub done: bool,
}

/// Ring buffer with FIFO eviction and uniform sampling with replacement.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

/// A sampled minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: ImageBatch,
    pub actions: Tensor<f32>,
    pub rewards: Tensor<f32>,
    pub next_obs: ImageBatch,
    pub not_done: Tensor<f32>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(SpdError::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: Vec::new(), cursor: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Next slot to be written.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Storage order (not insertion order once the ring has wrapped).
    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    /// Rebuild from stored items and cursor (checkpoint restore).
    pub fn from_parts(capacity: usize, items: Vec<Transition>, cursor: usize) -> Result<Self> {
        if capacity == 0
            || items.len() > capacity
            || cursor >= capacity.max(1)
            || (items.len() < capacity && cursor != items.len())
        {
            return Err(SpdError::Checkpoint("inconsistent replay buffer state".into()));
        }
        Ok(Self { capacity, items, cursor })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(SpdError::InvalidState("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let picked: Vec<&Transition> = indices.iter().map(|&i| &self.items[i]).collect();
        let n = picked.len();
        let adim = picked.first().map_or(0, |t| t.action.len());
        Ok(Batch {
            obs: Observation::stack(picked.iter().map(|t| &t.obs))?,
            next_obs: Observation::stack(picked.iter().map(|t| &t.next_obs))?,
            actions: Tensor::new(&[n, adim], picked.iter().flat_map(|t| t.action.iter().copied()).collect())?,
            rewards: Tensor::new(&[n, 1], picked.iter().map(|t| t.reward).collect())?,
            not_done: Tensor::new(&[n, 1], picked.iter().map(|t| if t.done { 0.0 } else { 1.0 }).collect())?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(n, rng)?;
        self.gather(&idx)
    }
}

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentKind {
    Sac,
    Td3,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sac => "sac",
            Self::Td3 => "td3",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = SpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sac" => Ok(Self::Sac),
            "td3" => Ok(Self::Td3),
            _ => Err(SpdError::Config(format!("unknown agent kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub num_filters: usize,
    pub num_conv_layers: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub discount: f64,
    pub critic_tau: f64,
    pub encoder_tau: f64,
    pub actor_update_freq: u64,
    pub critic_target_update_freq: u64,
    pub init_temperature: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub encoder_lr: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub log_std: LogStdBounds,
    /// Weak augmentation of sampled observations for the RL losses.
    pub augment: bool,
    pub exploration_noise: f64,
    pub target_noise: f64,
    pub noise_clip: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            kind: AgentKind::Sac,
            hidden_dim: 256,
            latent_dim: 50,
            num_filters: 32,
            num_conv_layers: 4,
            batch_size: 128,
            buffer_capacity: 100_000,
            discount: 0.99,
            critic_tau: 0.01,
            encoder_tau: 0.05,
            actor_update_freq: 2,
            critic_target_update_freq: 2,
            init_temperature: 0.1,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            encoder_lr: 1e-3,
            alpha_lr: 1e-4,
            alpha_beta1: 0.5,
            log_std: LogStdBounds::default(),
            augment: true,
            exploration_noise: 0.1,
            target_noise: 0.2,
            noise_clip: 0.5,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SpdError::Config(m.into()));
        if self.hidden_dim == 0 || self.latent_dim == 0 || self.num_filters == 0 || self.num_conv_layers == 0 {
            return bad("network widths must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("batch size and buffer capacity must be positive");
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad("discount must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.critic_tau) || !(0.0..=1.0).contains(&self.encoder_tau) {
            return bad("soft-update rates must be in [0, 1]");
        }
        if self.actor_update_freq == 0 || self.critic_target_update_freq == 0 {
            return bad("update frequencies must be positive");
        }
        if self.init_temperature <= 0.0 {
            return bad("initial temperature must be positive");
        }
        if self.log_std.min >= self.log_std.max {
            return bad("log-std bounds must satisfy min < max");
        }
        if self.exploration_noise < 0.0 || self.target_noise < 0.0 || self.noise_clip < 0.0 {
            return bad("noise scales must be non-negative");
        }
        Ok(())
    }

    pub fn encoder_config(&self, in_channels: usize, image_size: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels,
            image_size,
            num_filters: self.num_filters,
            num_layers: self.num_conv_layers,
            latent_dim: self.latent_dim,
        }
    }
}

// ---------------------------------------------------------------- losses

/// Bellman regression target `r + γ·notdone·v_next`.
pub fn bellman_target(
    rewards: &Tensor<f32>,
    not_done: &Tensor<f32>,
    next_value: &Tensor<f32>,
    discount: f64,
) -> Tensor<f32> {
    let gamma = discount as f32;
    let data = rewards
        .data()
        .iter()
        .zip(not_done.data())
        .zip(next_value.data())
        .map(|((&r, &nd), &v)| r + gamma * nd * v)
        .collect();
    Tensor::new(rewards.shape(), data).unwrap()
}

/// Sum of both heads' mean squared errors against the fixed target `y`.
pub fn critic_loss<T: Real>(
    g: &mut Graph<T>,
    critic: &TwinCritic<T>,
    z: Var,
    a: Var,
    y: &Tensor<T>,
    mode: Bind,
) -> Result<Var> {
    let (q1, q2) = critic.forward(g, z, a, mode)?;
    if g.shape(q1) != y.shape() {
        return Err(SpdError::Shape(format!("critic target {:?} vs {:?}", y.shape(), g.shape(q1))));
    }
    let y = g.input(y.clone());
    let d1 = g.sub(q1, y);
    let d1 = g.square(d1);
    let d2 = g.sub(q2, y);
    let d2 = g.square(d2);
    let (m1, m2) = (g.mean(d1), g.mean(d2));
    Ok(g.add(m1, m2))
}

/// Gaussian noise with standard deviation `sigma`, clipped to `[-clip, clip]`.
pub fn clipped_noise<R: Rng + ?Sized>(shape: &[usize], sigma: f64, clip: f64, rng: &mut R) -> Tensor<f32> {
    if sigma == 0.0 {
        return Tensor::zeros(shape);
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    Tensor::from_fn(shape, |_| normal.sample(rng).clamp(-clip, clip) as f32)
}

fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

// ---------------------------------------------------------------- agent

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

#[derive(Clone, Debug)]
pub enum Policy {
    Gaussian {
        actor: GaussianActor,
        actor_opt: Adam<f32>,
        /// Single scalar `log α`.
        log_alpha: ParamSet<f64>,
        alpha_opt: Adam<f64>,
        target_entropy: f64,
    },
    Deterministic {
        actor: DeterministicActor,
        actor_target: DeterministicActor,
        actor_opt: Adam<f32>,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct ActorTerms {
    pub loss: Var,
    /// Per-sample log-probability (stochastic policies only).
    pub log_prob: Option<Var>,
}

/// Losses of one RL update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlReport {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub alpha_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub targets_updated: bool,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub action_dim: usize,
    pub encoder: Encoder,
    pub encoder_target: Encoder,
    pub critic: TwinCritic,
    pub critic_target: TwinCritic,
    pub critic_opt: Adam<f32>,
    /// Applies critic gradients to the encoder.
    pub encoder_opt: Adam<f32>,
    pub policy: Policy,
    pub update_count: u64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        config: AgentConfig,
        in_channels: usize,
        image_size: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let encoder = Encoder::new(c.encoder_config(in_channels, image_size), rng)?;
        let critic = TwinCritic::new(c.latent_dim, c.hidden_dim, action_dim, rng);
        let policy = match c.kind {
            AgentKind::Sac => {
                let actor = GaussianActor::new(c.latent_dim, c.hidden_dim, action_dim, c.log_std, rng);
                let mut log_alpha = ParamSet::new();
                log_alpha.push("log_alpha", Tensor::scalar(c.init_temperature.ln()));
                let alpha_cfg = AdamConfig { lr: c.alpha_lr, beta1: c.alpha_beta1, ..AdamConfig::default() };
                Policy::Gaussian {
                    actor_opt: Adam::new(actor.params(), AdamConfig::with_lr(c.actor_lr)),
                    alpha_opt: Adam::new(&log_alpha, alpha_cfg),
                    actor,
                    log_alpha,
                    target_entropy: -(action_dim as f64),
                }
            }
            AgentKind::Td3 => {
                let actor = DeterministicActor::new(c.latent_dim, c.hidden_dim, action_dim, rng);
                Policy::Deterministic {
                    actor_opt: Adam::new(actor.params(), AdamConfig::with_lr(c.actor_lr)),
                    actor_target: actor.clone(),
                    actor,
                }
            }
        };
        Ok(Self {
            critic_opt: Adam::new(critic.params(), AdamConfig::with_lr(c.critic_lr)),
            encoder_opt: Adam::new(encoder.params(), AdamConfig::with_lr(c.encoder_lr)),
            encoder_target: encoder.clone(),
            critic_target: critic.clone(),
            encoder,
            critic,
            policy,
            action_dim,
            update_count: 0,
            config,
        })
    }

    pub fn alpha(&self) -> Option<f64> {
        match &self.policy {
            Policy::Gaussian { log_alpha, .. } => Some(log_alpha.get(0).item().exp()),
            Policy::Deterministic { .. } => None,
        }
    }

    /// Actions for a batch of un-augmented observations, each in `[-1, 1]`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &ImageBatch, mode: ActMode, rng: &mut R) -> Result<Vec<Vec<f32>>> {
        let n = obs.batch();
        let mut g = Graph::new();
        let x = g.input(obs.tensor().clone());
        let z = self.encoder.forward(&mut g, x, Bind::Frozen)?;
        let actions = match &self.policy {
            Policy::Gaussian { actor, .. } => match mode {
                ActMode::Deterministic => {
                    let (mean, _) = actor.distribution(&mut g, z, Bind::Frozen)?;
                    let t = g.tanh(mean);
                    g.value(t).clone()
                }
                ActMode::Stochastic => {
                    let eps = standard_normal(&[n, self.action_dim], rng);
                    let s = actor.sample(&mut g, z, eps, Bind::Frozen)?;
                    g.value(s.action).clone()
                }
            },
            Policy::Deterministic { actor, .. } => {
                let mu = actor.forward(&mut g, z, Bind::Frozen)?;
                let mut a = g.value(mu).clone();
                if mode == ActMode::Stochastic {
                    let noise = clipped_noise(a.shape(), self.config.exploration_noise, f64::INFINITY, rng);
                    a.add_assign(&noise);
                    a = a.map(|v| v.clamp(-1.0, 1.0));
                }
                a
            }
        };
        Ok(actions.data().chunks(self.action_dim).map(<[f32]>::to_vec).collect())
    }

    /// Latent of the next observations under the target encoder.
    pub fn target_latent(&self, next_obs: &ImageBatch) -> Result<Tensor<f32>> {
        self.encoder_target.encode(next_obs)
    }

    /// Soft Bellman (SAC) or clipped double-Q (TD3) regression target.
    pub fn critic_target_values<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        z_next: &Tensor<f32>,
        rng: &mut R,
    ) -> Result<Tensor<f32>> {
        let n = batch.rewards.dim(0);
        let mut g = Graph::new();
        let zn = g.input(z_next.clone());
        let next_value = match &self.policy {
            Policy::Gaussian { actor, .. } => {
                let eps = standard_normal(&[n, self.action_dim], rng);
                let s = actor.sample(&mut g, zn, eps, Bind::Frozen)?;
                let (q1, q2) = self.critic_target.forward(&mut g, zn, s.action, Bind::Frozen)?;
                let q = g.min(q1, q2);
                let alpha = self.alpha().unwrap();
                let ent = g.scale(s.log_prob, alpha);
                let v = g.sub(q, ent);
                g.value(v).clone()
            }
            Policy::Deterministic { actor_target, .. } => {
                let mu = actor_target.forward(&mut g, zn, Bind::Frozen)?;
                let mut a = g.value(mu).clone();
                let noise = clipped_noise(a.shape(), self.config.target_noise, self.config.noise_clip, rng);
                a.add_assign(&noise);
                let a = g.input(a.map(|v| v.clamp(-1.0, 1.0)));
                let (q1, q2) = self.critic_target.forward(&mut g, zn, a, Bind::Frozen)?;
                let q = g.min(q1, q2);
                g.value(q).clone()
            }
        };
        Ok(bellman_target(&batch.rewards, &batch.not_done, &next_value, self.config.discount))
    }

    /// Policy loss on a detached copy of `z`: `mean(α·log π − min Q)` for
    /// SAC, `−mean Q₁(z, μ(z))` for TD3. The critic is frozen, so only the
    /// actor receives gradient.
    pub fn actor_loss<R: Rng + ?Sized>(&self, g: &mut Graph<f32>, z: Var, rng: &mut R) -> Result<ActorTerms> {
        let z_det = g.detach(z);
        match &self.policy {
            Policy::Gaussian { actor, log_alpha, .. } => {
                let alpha = log_alpha.get(0).item().exp();
                let eps = standard_normal(&[g.shape(z)[0], self.action_dim], rng);
                let s = actor.sample(g, z_det, eps, Bind::Train)?;
                let (q1, q2) = self.critic.forward(g, z_det, s.action, Bind::Frozen)?;
                let q = g.min(q1, q2);
                let ent = g.scale(s.log_prob, alpha);
                let diff = g.sub(ent, q);
                Ok(ActorTerms { loss: g.mean(diff), log_prob: Some(s.log_prob) })
            }
            Policy::Deterministic { actor, .. } => {
                let mu = actor.forward(g, z_det, Bind::Train)?;
                let (q1, _) = self.critic.forward(g, z_det, mu, Bind::Frozen)?;
                let m = g.mean(q1);
                Ok(ActorTerms { loss: g.neg(m), log_prob: None })
            }
        }
    }

    /// One RL update given the online weak latent `z` of the batch
    /// observations, already built into `g` with the encoder trainable.
    /// The critic step updates critic and encoder; the actor step consumes
    /// a detached copy of `z`.
    pub fn update_in_graph<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<f32>,
        z: Var,
        batch: &Batch,
        z_next: &Tensor<f32>,
        rng: &mut R,
    ) -> Result<RlReport> {
        let y = self.critic_target_values(batch, z_next, rng)?;
        let a = g.input(batch.actions.clone());
        let closs = critic_loss(g, &self.critic, z, a, &y, Bind::Train)?;
        let grads = g.backward(closs);
        self.critic_opt.apply(self.critic.params_mut(), &grads);
        self.encoder_opt.apply(self.encoder.params_mut(), &grads);
        let mut report = RlReport {
            critic_loss: scalar(g, closs),
            actor_loss: None,
            alpha_loss: None,
            alpha: self.alpha(),
            targets_updated: false,
        };

        let step = self.update_count;
        if step.is_multiple_of(self.config.actor_update_freq) {
            let terms = self.actor_loss(g, z, rng)?;
            let grads = g.backward(terms.loss);
            report.actor_loss = Some(scalar(g, terms.loss));
            match &mut self.policy {
                Policy::Gaussian { actor, actor_opt, log_alpha, alpha_opt, target_entropy } => {
                    actor_opt.apply(actor.params_mut(), &grads);
                    // d/d(log α) of mean(α·(−log π − H̄)) is α·mean(−log π − H̄).
                    let alpha = log_alpha.get(0).item().exp();
                    let lp = g.value(terms.log_prob.expect("stochastic actor")).data();
                    let mean_term = lp.iter().map(|&v| -(v as f64) - *target_entropy).sum::<f64>() / lp.len() as f64;
                    report.alpha_loss = Some(alpha * mean_term);
                    alpha_opt.step(log_alpha, &[Tensor::scalar(alpha * mean_term)]);
                    report.alpha = Some(log_alpha.get(0).item().exp());
                }
                Policy::Deterministic { actor, actor_opt, .. } => actor_opt.apply(actor.params_mut(), &grads),
            }
        }

        if step.is_multiple_of(self.config.critic_target_update_freq) {
            soft_update(self.critic_target.params_mut(), self.critic.params(), self.config.critic_tau)?;
            soft_update(self.encoder_target.params_mut(), self.encoder.params(), self.config.encoder_tau)?;
            if let Policy::Deterministic { actor, actor_target, .. } = &mut self.policy {
                soft_update(actor_target.params_mut(), actor.params(), self.config.critic_tau)?;
            }
            report.targets_updated = true;
        }
        self.update_count += 1;
        Ok(report)
    }

    /// Every parameter set with a stable name, for checkpoints and tests.
    pub fn param_sets(&self) -> Vec<(&'static str, &ParamSet<f32>)> {
        let mut v = vec![
            ("encoder", self.encoder.params()),
            ("encoder_target", self.encoder_target.params()),
            ("critic", self.critic.params()),
            ("critic_target", self.critic_target.params()),
        ];
        match &self.policy {
            Policy::Gaussian { actor, .. } => v.push(("actor", actor.params())),
            Policy::Deterministic { actor, actor_target, .. } => {
                v.push(("actor", actor.params()));
                v.push(("actor_target", actor_target.params()));
            }
        }
        v
    }

    pub fn actor_params(&self) -> &ParamSet<f32> {
        match &self.policy {
            Policy::Gaussian { actor, .. } => actor.params(),
            Policy::Deterministic { actor, .. } => actor.params(),
        }
    }
}
