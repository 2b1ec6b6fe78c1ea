//! Run configuration as flat `dotted.key = value` text.
//!
//! Every field has a key; unknown keys are rejected. The canonical form
//! lists every key in sorted order and its SHA-256 identifies the run for
//! resumption.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::agent::AgentConfig;
use crate::imageops::{AugmentationSpec, JitterStrength};
use crate::nets::{HeadDepth, LogStdBounds};
use crate::objectives::{SpdHeadConfig, SpdOptions, SpdWeights};
use crate::pixelenv::{BackgroundKind, EnvConfig};
use crate::{Result, SpdError};

#[derive(Clone, Debug, PartialEq)]
pub struct SpdConfig {
    pub options: SpdOptions,
    pub hidden_dim: usize,
    pub head_depth: HeadDepth,
    pub discriminator_tanh: bool,
    pub dynamics_lr: f64,
    pub discriminator_lr: f64,
    pub encoder_lr: f64,
}

impl Default for SpdConfig {
    fn default() -> Self {
        Self {
            options: SpdOptions::default(),
            hidden_dim: 256,
            head_depth: HeadDepth::Deep,
            discriminator_tanh: false,
            dynamics_lr: 1e-3,
            discriminator_lr: 1e-3,
            encoder_lr: 1e-3,
        }
    }
}

impl SpdConfig {
    pub fn head_config(&self, latent_dim: usize, action_dim: usize) -> SpdHeadConfig {
        SpdHeadConfig {
            latent_dim,
            action_dim,
            hidden: self.hidden_dim,
            depth: self.head_depth,
            discriminator_tanh: self.discriminator_tanh,
            dynamics_lr: self.dynamics_lr,
            discriminator_lr: self.discriminator_lr,
            encoder_lr: self.encoder_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopConfig {
    /// Raw environment steps.
    pub total_steps: usize,
    /// Agent steps taken with a uniform random policy before updates start.
    pub seed_steps: usize,
    /// Raw steps between evaluations.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    /// Raw steps between checkpoints (0 = only at the end).
    pub checkpoint_interval: usize,
    /// Updates between logged update rows.
    pub log_interval: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            total_steps: 500_000,
            seed_steps: 1000,
            eval_interval: 5000,
            eval_episodes: 10,
            seeds: vec![1, 2, 3],
            checkpoint_interval: 50_000,
            log_interval: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub test_background: BackgroundKind,
    pub distance_pairs: usize,
    pub baseline_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { test_background: BackgroundKind::TexturedVideo, distance_pairs: 50, baseline_episodes: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub aug: AugmentationSpec,
    pub spd: SpdConfig,
    pub train: LoopConfig,
    pub eval: EvalConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| SpdError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(SpdError::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    /// Named presets: `full` (published scale), `desk64` (64×64 desk scale),
    /// `desk` (32×32 desk scale used for acceptance) and `micro` (smoke runs).
    pub fn profile(name: &str) -> Result<Self> {
        let mut c = Self::default();
        match name {
            "full" => {}
            "desk64" | "desk" => {
                c.env.image_size = if name == "desk" { 32 } else { 64 };
                c.env.background = BackgroundKind::SimpleDistractor;
                c.agent.buffer_capacity = 20_000;
                c.agent.batch_size = if name == "desk" { 32 } else { 128 };
                c.aug.pad_pixels = if name == "desk" { 2 } else { 3 };
                c.train.total_steps = 40_000;
                c.train.checkpoint_interval = 10_000;
            }
            "micro" => {
                c.env.image_size = 32;
                c.env.background = BackgroundKind::SimpleDistractor;
                c.env.episode_length = 200;
                c.agent.buffer_capacity = 1000;
                c.agent.batch_size = 8;
                c.agent.hidden_dim = 32;
                c.agent.num_filters = 8;
                c.spd.hidden_dim = 32;
                c.aug.pad_pixels = 2;
                c.train.total_steps = 400;
                c.train.seed_steps = 50;
                c.train.eval_interval = 200;
                c.train.eval_episodes = 1;
                c.train.seeds = vec![1];
                c.train.checkpoint_interval = 0;
                c.eval.baseline_episodes = 5;
            }
            _ => return Err(SpdError::Config(format!("unknown profile {name:?}"))),
        }
        Ok(c)
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (e, a, g, s, t, v) = (&self.env, &self.agent, &self.aug, &self.spd, &self.train, &self.eval);
        let o = &s.options;
        let mut out = vec![
            ("agent.actor_lr", a.actor_lr.to_string()),
            ("agent.actor_update_freq", a.actor_update_freq.to_string()),
            ("agent.alpha_beta1", a.alpha_beta1.to_string()),
            ("agent.alpha_lr", a.alpha_lr.to_string()),
            ("agent.augment", a.augment.to_string()),
            ("agent.batch_size", a.batch_size.to_string()),
            ("agent.buffer_capacity", a.buffer_capacity.to_string()),
            ("agent.critic_lr", a.critic_lr.to_string()),
            ("agent.critic_target_update_freq", a.critic_target_update_freq.to_string()),
            ("agent.critic_tau", a.critic_tau.to_string()),
            ("agent.discount", a.discount.to_string()),
            ("agent.encoder_lr", a.encoder_lr.to_string()),
            ("agent.encoder_tau", a.encoder_tau.to_string()),
            ("agent.exploration_noise", a.exploration_noise.to_string()),
            ("agent.hidden_dim", a.hidden_dim.to_string()),
            ("agent.init_temperature", a.init_temperature.to_string()),
            ("agent.kind", a.kind.to_string()),
            ("agent.latent_dim", a.latent_dim.to_string()),
            ("agent.log_std_max", a.log_std.max.to_string()),
            ("agent.log_std_min", a.log_std.min.to_string()),
            ("agent.noise_clip", a.noise_clip.to_string()),
            ("agent.num_conv_layers", a.num_conv_layers.to_string()),
            ("agent.num_filters", a.num_filters.to_string()),
            ("agent.target_noise", a.target_noise.to_string()),
            ("aug.cutout_max", g.cutout_size.1.to_string()),
            ("aug.cutout_min", g.cutout_size.0.to_string()),
            ("aug.grayscale_prob", g.grayscale_prob.to_string()),
            ("aug.jitter_hue", g.jitter.hue.to_string()),
            ("aug.jitter_saturation", g.jitter.saturation.to_string()),
            ("aug.jitter_value", g.jitter.value.to_string()),
            ("aug.pad", g.pad_pixels.to_string()),
            ("env.action_repeat", e.action_repeat.to_string()),
            ("env.background", e.background.to_string()),
            ("env.episode_length", e.episode_length.to_string()),
            ("env.frame_dir", e.frame_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("env.frame_stack", e.frame_stack.to_string()),
            ("env.image_size", e.image_size.to_string()),
            ("env.max_speed", e.max_speed.to_string()),
            ("env.reward_rate", e.reward_rate.to_string()),
            ("env.spawn", e.spawn.name().to_string()),
            ("env.trail_steps", e.trail_steps.to_string()),
            ("eval.baseline_episodes", v.baseline_episodes.to_string()),
            ("eval.distance_pairs", v.distance_pairs.to_string()),
            ("eval.test_background", v.test_background.to_string()),
            ("spd.ablation", o.ablation.to_string()),
            ("spd.detach_forward_targets", o.detach_forward_targets.to_string()),
            ("spd.detach_inferred_actions", o.detach_inferred_actions.to_string()),
            ("spd.discriminator_lr", s.discriminator_lr.to_string()),
            ("spd.discriminator_tanh", s.discriminator_tanh.to_string()),
            ("spd.dynamics_lr", s.dynamics_lr.to_string()),
            ("spd.encoder_lr", s.encoder_lr.to_string()),
            ("spd.head_depth", s.head_depth.to_string()),
            ("spd.hidden_dim", s.hidden_dim.to_string()),
            ("spd.lambda_adv", o.weights.lambda_adv.to_string()),
            ("spd.lambda_psi", o.weights.lambda_psi.to_string()),
            ("train.checkpoint_interval", t.checkpoint_interval.to_string()),
            ("train.eval_episodes", t.eval_episodes.to_string()),
            ("train.eval_interval", t.eval_interval.to_string()),
            ("train.log_interval", t.log_interval.to_string()),
            ("train.seed_steps", t.seed_steps.to_string()),
            ("train.seeds", t.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
            ("train.total_steps", t.total_steps.to_string()),
        ];
        out.sort_by_key(|(k, _)| *k);
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (e, a, g, s, t, v) =
            (&mut self.env, &mut self.agent, &mut self.aug, &mut self.spd, &mut self.train, &mut self.eval);
        match key {
            "agent.actor_lr" => a.actor_lr = parse(key, value)?,
            "agent.actor_update_freq" => a.actor_update_freq = parse(key, value)?,
            "agent.alpha_beta1" => a.alpha_beta1 = parse(key, value)?,
            "agent.alpha_lr" => a.alpha_lr = parse(key, value)?,
            "agent.augment" => a.augment = parse_bool(key, value)?,
            "agent.batch_size" => a.batch_size = parse(key, value)?,
            "agent.buffer_capacity" => a.buffer_capacity = parse(key, value)?,
            "agent.critic_lr" => a.critic_lr = parse(key, value)?,
            "agent.critic_target_update_freq" => a.critic_target_update_freq = parse(key, value)?,
            "agent.critic_tau" => a.critic_tau = parse(key, value)?,
            "agent.discount" => a.discount = parse(key, value)?,
            "agent.encoder_lr" => a.encoder_lr = parse(key, value)?,
            "agent.encoder_tau" => a.encoder_tau = parse(key, value)?,
            "agent.exploration_noise" => a.exploration_noise = parse(key, value)?,
            "agent.hidden_dim" => a.hidden_dim = parse(key, value)?,
            "agent.init_temperature" => a.init_temperature = parse(key, value)?,
            "agent.kind" => a.kind = value.parse()?,
            "agent.latent_dim" => a.latent_dim = parse(key, value)?,
            "agent.log_std_max" => a.log_std = LogStdBounds { max: parse(key, value)?, ..a.log_std },
            "agent.log_std_min" => a.log_std = LogStdBounds { min: parse(key, value)?, ..a.log_std },
            "agent.noise_clip" => a.noise_clip = parse(key, value)?,
            "agent.num_conv_layers" => a.num_conv_layers = parse(key, value)?,
            "agent.num_filters" => a.num_filters = parse(key, value)?,
            "agent.target_noise" => a.target_noise = parse(key, value)?,
            "aug.cutout_max" => g.cutout_size.1 = parse(key, value)?,
            "aug.cutout_min" => g.cutout_size.0 = parse(key, value)?,
            "aug.grayscale_prob" => g.grayscale_prob = parse(key, value)?,
            "aug.jitter_hue" => g.jitter = JitterStrength { hue: parse(key, value)?, ..g.jitter },
            "aug.jitter_saturation" => g.jitter = JitterStrength { saturation: parse(key, value)?, ..g.jitter },
            "aug.jitter_value" => g.jitter = JitterStrength { value: parse(key, value)?, ..g.jitter },
            "aug.pad" => g.pad_pixels = parse(key, value)?,
            "env.action_repeat" => e.action_repeat = parse(key, value)?,
            "env.background" => e.background = value.parse()?,
            "env.episode_length" => e.episode_length = parse(key, value)?,
            "env.frame_dir" => e.frame_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "env.frame_stack" => e.frame_stack = parse(key, value)?,
            "env.image_size" => e.image_size = parse(key, value)?,
            "env.max_speed" => e.max_speed = parse(key, value)?,
            "env.reward_rate" => e.reward_rate = parse(key, value)?,
            "env.spawn" => e.spawn = value.parse()?,
            "env.trail_steps" => e.trail_steps = parse(key, value)?,
            "eval.baseline_episodes" => v.baseline_episodes = parse(key, value)?,
            "eval.distance_pairs" => v.distance_pairs = parse(key, value)?,
            "eval.test_background" => v.test_background = value.parse()?,
            "spd.ablation" => s.options.ablation = value.parse()?,
            "spd.detach_forward_targets" => s.options.detach_forward_targets = parse_bool(key, value)?,
            "spd.detach_inferred_actions" => s.options.detach_inferred_actions = parse_bool(key, value)?,
            "spd.discriminator_lr" => s.discriminator_lr = parse(key, value)?,
            "spd.discriminator_tanh" => s.discriminator_tanh = parse_bool(key, value)?,
            "spd.dynamics_lr" => s.dynamics_lr = parse(key, value)?,
            "spd.encoder_lr" => s.encoder_lr = parse(key, value)?,
            "spd.head_depth" => s.head_depth = value.parse()?,
            "spd.hidden_dim" => s.hidden_dim = parse(key, value)?,
            "spd.lambda_adv" => s.options.weights = SpdWeights { lambda_adv: parse(key, value)?, ..s.options.weights },
            "spd.lambda_psi" => s.options.weights = SpdWeights { lambda_psi: parse(key, value)?, ..s.options.weights },
            "train.checkpoint_interval" => t.checkpoint_interval = parse(key, value)?,
            "train.eval_episodes" => t.eval_episodes = parse(key, value)?,
            "train.eval_interval" => t.eval_interval = parse(key, value)?,
            "train.log_interval" => t.log_interval = parse(key, value)?,
            "train.seed_steps" => t.seed_steps = parse(key, value)?,
            "train.seeds" => t.seeds = value.split(',').map(|x| parse(key, x.trim())).collect::<Result<Vec<u64>>>()?,
            "train.total_steps" => t.total_steps = parse(key, value)?,
            _ => return Err(SpdError::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment. A leading
    /// `profile = name` line selects the base preset.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut config: Option<Self> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SpdError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "profile" {
                if config.is_some() {
                    return Err(SpdError::Config(format!("line {}: profile must come first", n + 1)));
                }
                config = Some(Self::profile(value)?);
                continue;
            }
            config
                .get_or_insert_with(Self::default)
                .set(key, value)
                .map_err(|e| SpdError::Config(format!("line {}: {e}", n + 1)))?;
        }
        let config = config.unwrap_or_default();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SpdError::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) =
            spec.split_once('=').ok_or_else(|| SpdError::Config(format!("override {spec:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        self.aug.validate()?;
        let bad = |m: String| Err(SpdError::Config(m));
        if self.aug.pad_pixels >= self.env.image_size {
            return bad(format!("aug.pad {} must be below the image size", self.aug.pad_pixels));
        }
        let t = &self.train;
        if t.total_steps == 0 || t.eval_interval == 0 || !t.total_steps.is_multiple_of(t.eval_interval) {
            return bad(format!(
                "train.eval_interval {} must divide train.total_steps {}",
                t.eval_interval, t.total_steps
            ));
        }
        if !t.eval_interval.is_multiple_of(self.env.action_repeat)
            || !t.total_steps.is_multiple_of(self.env.action_repeat)
        {
            return bad("train.total_steps and train.eval_interval must be multiples of env.action_repeat".into());
        }
        if !self.env.episode_length.is_multiple_of(self.env.action_repeat) {
            return bad("env.episode_length must be a multiple of env.action_repeat".into());
        }
        if !t.checkpoint_interval.is_multiple_of(self.env.action_repeat) {
            return bad("train.checkpoint_interval must be a multiple of env.action_repeat".into());
        }
        if t.seeds.is_empty() {
            return bad("train.seeds needs at least one seed".into());
        }
        if t.eval_episodes == 0 || t.log_interval == 0 {
            return bad("train.eval_episodes and train.log_interval must be positive".into());
        }
        let w = self.spd.options.weights;
        if !(w.lambda_psi >= 0.0 && w.lambda_adv >= 0.0) {
            return bad("spd weights must be non-negative".into());
        }
        if self.spd.hidden_dim == 0 {
            return bad("spd.hidden_dim must be positive".into());
        }
        if self.eval.distance_pairs == 0 || self.eval.baseline_episodes == 0 {
            return bad("eval.distance_pairs and eval.baseline_episodes must be positive".into());
        }
        if self.spd.options.ablation.is_active() && !self.agent.augment {
            return bad("self-predictive training needs agent.augment = true".into());
        }
        Ok(())
    }

    /// Agent (true) steps per run.
    pub fn agent_steps(&self) -> usize {
        self.train.total_steps / self.env.action_repeat
    }
}
