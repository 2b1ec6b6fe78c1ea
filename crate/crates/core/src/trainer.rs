//! The training loop and run directories.
//!
//! After `train.seed_steps` agent steps under a uniform random policy, every
//! agent step performs, in order: interact, store, sample one minibatch, the
//! self-predictive update, then the RL update. Both updates share one graph
//! so the weak latent of the minibatch is encoded once.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use spd_autograd::{Graph, Tensor};

use crate::agent::{ActMode, Agent, Policy, ReplayBuffer, RlReport, Transition};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::eval::{evaluate, load_frames, EvalSummary};
use crate::imageops::{augment_strong, augment_weak, ImageBatch};
use crate::nets::Bind;
use crate::objectives::{SpdLatents, SpdLearner, SpdLossReport};
use crate::pixelenv::{EnvConfig, FrameSet, Observation, PixelEnv};
use crate::rng::{self, derive_seed, stream, StreamRng};
use crate::{Result, SpdError};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const POLICY_FILE: &str = "policy.bin";

pub const METRICS_HEADER: [&str; 17] = [
    "kind",
    "step",
    "agent_step",
    "episode",
    "episode_return",
    "eval_return_mean",
    "eval_return_std",
    "j_encoder_adv",
    "j_discriminator",
    "j_inverse",
    "j_forward",
    "j_dynamics",
    "j_total",
    "critic_loss",
    "actor_loss",
    "alpha_loss",
    "alpha",
];

/// Stages of one agent step, recorded when tracing is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Interact,
    Store,
    Sample,
    SpdUpdate,
    RlUpdate,
    Evaluate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Episode,
    Update,
    Eval,
}

impl RowKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Episode => "episode",
            Self::Update => "update",
            Self::Eval => "eval",
        }
    }
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub kind: RowKind,
    /// Raw environment steps so far.
    pub step: usize,
    pub agent_step: usize,
    pub episode: u64,
    pub episode_return: Option<f64>,
    pub eval: Option<(f64, f64)>,
    pub spd: Option<SpdLossReport>,
    pub rl: Option<RlReport>,
}

impl MetricsRow {
    fn new(kind: RowKind, step: usize, agent_step: usize, episode: u64) -> Self {
        Self { kind, step, agent_step, episode, episode_return: None, eval: None, spd: None, rl: None }
    }

    pub fn fields(&self) -> Vec<String> {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let s = self.spd.as_ref();
        let r = self.rl.as_ref();
        vec![
            self.kind.name().to_string(),
            self.step.to_string(),
            self.agent_step.to_string(),
            self.episode.to_string(),
            o(self.episode_return),
            o(self.eval.map(|e| e.0)),
            o(self.eval.map(|e| e.1)),
            o(s.and_then(|s| s.j_encoder_adv)),
            o(s.and_then(|s| s.j_discriminator)),
            o(s.and_then(|s| s.j_inverse)),
            o(s.and_then(|s| s.j_forward)),
            o(s.map(|s| s.j_dynamics)),
            o(s.map(|s| s.j_total)),
            o(r.map(|r| r.critic_loss)),
            o(r.and_then(|r| r.actor_loss)),
            o(r.and_then(|r| r.alpha_loss)),
            o(r.and_then(|r| r.alpha)),
        ]
    }
}

struct Streams {
    act: StreamRng,
    sample: StreamRng,
    weak: StreamRng,
    strong: StreamRng,
    update: StreamRng,
}

impl Streams {
    const NAMES: [&'static str; 5] = ["act", "sample", "aug_weak", "aug_strong", "update"];

    fn new(seed: u64) -> Self {
        Self {
            act: stream(seed, "act"),
            sample: stream(seed, "sample"),
            weak: stream(seed, "aug_weak"),
            strong: stream(seed, "aug_strong"),
            update: stream(seed, "update"),
        }
    }

    fn all(&self) -> [&StreamRng; 5] {
        [&self.act, &self.sample, &self.weak, &self.strong, &self.update]
    }

    fn all_mut(&mut self) -> [&mut StreamRng; 5] {
        [&mut self.act, &mut self.sample, &mut self.weak, &mut self.strong, &mut self.update]
    }
}

/// In-memory training state for one (config, seed).
pub struct Trainer {
    config: TrainConfig,
    seed: u64,
    env_config: EnvConfig,
    frames: Option<Arc<FrameSet>>,
    env: PixelEnv,
    obs: Observation,
    replay: ReplayBuffer,
    agent: Agent,
    spd: Option<SpdLearner>,
    streams: Streams,
    agent_step: usize,
    episode_return: f64,
    trace: Option<Vec<Phase>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let env_config = EnvConfig { seed: derive_seed(seed, "train_env", 0), ..config.env.clone() };
        let frames = load_frames(&env_config)?;
        let mut env = PixelEnv::with_frames(env_config.clone(), frames.clone())?;
        let obs = env.reset()?;
        let mut init = stream(seed, "init");
        let agent = Agent::new(
            config.agent.clone(),
            env_config.channels(),
            env_config.image_size,
            EnvConfig::ACTION_DIM,
            &mut init,
        )?;
        let spd = config.spd.options.ablation.is_active().then(|| {
            let head = config.spd.head_config(config.agent.latent_dim, EnvConfig::ACTION_DIM);
            SpdLearner::new(head, config.spd.options, agent.encoder.params(), &mut init)
        });
        Ok(Self {
            replay: ReplayBuffer::new(config.agent.buffer_capacity)?,
            streams: Streams::new(seed),
            config,
            seed,
            env_config,
            frames,
            env,
            obs,
            agent,
            spd,
            agent_step: 0,
            episode_return: 0.0,
            trace: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn spd(&self) -> Option<&SpdLearner> {
        self.spd.as_ref()
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn agent_step(&self) -> usize {
        self.agent_step
    }

    pub fn raw_steps(&self) -> usize {
        self.agent_step * self.env_config.action_repeat
    }

    pub fn is_finished(&self) -> bool {
        self.agent_step >= self.config.agent_steps()
    }

    /// Record the phases of subsequent steps.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<Phase> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn mark(&mut self, p: Phase) {
        if let Some(t) = &mut self.trace {
            t.push(p);
        }
    }

    /// Deterministic-policy evaluation with the seed of evaluation round `round`.
    pub fn evaluate_now(&self, round: u64) -> Result<EvalSummary> {
        evaluate(
            &self.agent,
            &self.config.env,
            self.frames.clone(),
            self.config.train.eval_episodes,
            derive_seed(self.seed, "eval", round),
        )
    }

    fn eval_row(&mut self) -> Result<MetricsRow> {
        self.mark(Phase::Evaluate);
        let round = (self.raw_steps() / self.config.train.eval_interval) as u64;
        let s = self.evaluate_now(round)?;
        let mut row = MetricsRow::new(RowKind::Eval, self.raw_steps(), self.agent_step, self.env.episode());
        row.eval = Some((s.mean, s.std));
        Ok(row)
    }

    /// The initial evaluation, before any interaction.
    pub fn initial_rows(&mut self) -> Result<Vec<MetricsRow>> {
        if self.agent_step != 0 {
            return Ok(Vec::new());
        }
        Ok(vec![self.eval_row()?])
    }

    /// One agent step; returns the metrics rows it produced.
    pub fn step(&mut self) -> Result<Vec<MetricsRow>> {
        if self.is_finished() {
            return Err(SpdError::InvalidState("training already reached train.total_steps".into()));
        }
        let mut rows = Vec::new();
        let seeding = self.agent_step < self.config.train.seed_steps;

        self.mark(Phase::Interact);
        let action: Vec<f32> = if seeding {
            (0..EnvConfig::ACTION_DIM).map(|_| self.streams.act.random_range(-1.0f32..=1.0)).collect()
        } else {
            self.agent.act(&self.obs.to_batch(), ActMode::Stochastic, &mut self.streams.act)?.swap_remove(0)
        };
        let out = self.env.step([action[0] as f64, action[1] as f64])?;
        self.agent_step += 1;
        self.episode_return += out.reward;

        self.mark(Phase::Store);
        // Episodes end only at the time limit, so the value keeps bootstrapping.
        self.replay.push(Transition {
            obs: std::mem::replace(&mut self.obs, out.observation.clone()),
            action,
            reward: out.reward as f32,
            next_obs: out.observation,
            done: false,
        });

        if !seeding {
            let (spd, rl) = self.update()?;
            let updates = self.agent.update_count as usize;
            if updates.is_multiple_of(self.config.train.log_interval) {
                let mut row = MetricsRow::new(RowKind::Update, self.raw_steps(), self.agent_step, self.env.episode());
                row.spd = spd;
                row.rl = Some(rl);
                rows.push(row);
            }
        }

        if out.done {
            let mut row = MetricsRow::new(RowKind::Episode, self.raw_steps(), self.agent_step, self.env.episode());
            row.episode_return = Some(self.episode_return);
            rows.push(row);
            self.episode_return = 0.0;
            self.obs = self.env.reset()?;
        }

        if self.raw_steps().is_multiple_of(self.config.train.eval_interval) {
            rows.push(self.eval_row()?);
        }
        Ok(rows)
    }

    fn update(&mut self) -> Result<(Option<SpdLossReport>, RlReport)> {
        self.mark(Phase::Sample);
        let batch = self.replay.sample(self.config.agent.batch_size, &mut self.streams.sample)?;
        let aug = &self.config.aug;
        let s = &mut self.streams;
        let (obs_w, next_w) = if self.config.agent.augment {
            (augment_weak(&batch.obs, aug, &mut s.weak)?, augment_weak(&batch.next_obs, aug, &mut s.weak)?)
        } else {
            (batch.obs.clone(), batch.next_obs.clone())
        };

        let mut g = Graph::new();
        let encoder = &self.agent.encoder;
        let encode = |g: &mut Graph<f32>, b: &ImageBatch| {
            let x = g.input(b.tensor().clone());
            encoder.forward(g, x, Bind::Train)
        };
        let z_w_t = encode(&mut g, &obs_w)?;
        let mut spd_report = None;
        if let Some(learner) = &mut self.spd {
            let (strong_t, _) = augment_strong(&batch.obs, aug, &mut s.strong)?;
            let (strong_t1, _) = augment_strong(&batch.next_obs, aug, &mut s.strong)?;
            let lat = SpdLatents {
                z_w_t,
                z_s_t: encode(&mut g, &strong_t)?,
                z_w_t1: encode(&mut g, &next_w)?,
                z_s_t1: encode(&mut g, &strong_t1)?,
            };
            if let Some(t) = &mut self.trace {
                t.push(Phase::SpdUpdate);
            }
            let actions = g.input(batch.actions.clone());
            spd_report = Some(learner.update_in_graph(&mut g, self.agent.encoder.params_mut(), &lat, actions)?);
        }

        self.mark(Phase::RlUpdate);
        let z_next = self.agent.target_latent(&next_w)?;
        let rl = self.agent.update_in_graph(&mut g, z_w_t, &batch, &z_next, &mut self.streams.update)?;
        Ok((spd_report, rl))
    }

    // ------------------------------------------------------------ persistence

    fn put_networks(&self, c: &mut Checkpoint) {
        for (name, set) in self.agent.param_sets() {
            c.put_params(&format!("agent.{name}"), set);
        }
        if let Policy::Gaussian { log_alpha, .. } = &self.agent.policy {
            c.put_params("agent.log_alpha", log_alpha);
        }
        if let Some(s) = &self.spd {
            c.put_params("spd.inverse", s.inverse.params());
            c.put_params("spd.forward", s.forward.params());
            c.put_params("spd.discriminator", s.discriminator.params());
        }
    }

    fn load_networks(&mut self, c: &Checkpoint) -> Result<()> {
        let a = &mut self.agent;
        c.load_params("agent.encoder", a.encoder.params_mut())?;
        c.load_params("agent.encoder_target", a.encoder_target.params_mut())?;
        c.load_params("agent.critic", a.critic.params_mut())?;
        c.load_params("agent.critic_target", a.critic_target.params_mut())?;
        match &mut a.policy {
            Policy::Gaussian { actor, log_alpha, .. } => {
                c.load_params("agent.actor", actor.params_mut())?;
                c.load_params("agent.log_alpha", log_alpha)?;
            }
            Policy::Deterministic { actor, actor_target, .. } => {
                c.load_params("agent.actor", actor.params_mut())?;
                c.load_params("agent.actor_target", actor_target.params_mut())?;
            }
        }
        if let Some(s) = &mut self.spd {
            c.load_params("spd.inverse", s.inverse.params_mut())?;
            c.load_params("spd.forward", s.forward.params_mut())?;
            c.load_params("spd.discriminator", s.discriminator.params_mut())?;
        }
        Ok(())
    }

    /// Networks only: enough to evaluate or encode.
    pub fn policy_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set("kind", "policy");
        c.set("config_hash", self.config.hash());
        c.set("seed", self.seed);
        c.set("agent_step", self.agent_step);
        self.put_networks(&mut c);
        c
    }

    /// Everything needed to continue bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.policy_checkpoint();
        c.set("kind", "full");
        c.set("episode_return", self.episode_return);
        c.set("agent.update_count", self.agent.update_count);
        for (name, r) in Streams::NAMES.iter().zip(self.streams.all()) {
            c.set(&format!("rng.{name}"), rng::snapshot(r));
        }
        let a = &self.agent;
        c.put_adam("opt.critic", &a.critic_opt);
        c.put_adam("opt.encoder", &a.encoder_opt);
        match &a.policy {
            Policy::Gaussian { actor_opt, alpha_opt, .. } => {
                c.put_adam("opt.actor", actor_opt);
                c.put_adam("opt.alpha", alpha_opt);
            }
            Policy::Deterministic { actor_opt, .. } => c.put_adam("opt.actor", actor_opt),
        }
        if let Some(s) = &self.spd {
            c.put_adam("opt.spd_inverse", &s.inverse_opt);
            c.put_adam("opt.spd_forward", &s.forward_opt);
            c.put_adam("opt.spd_discriminator", &s.discriminator_opt);
            c.put_adam("opt.spd_encoder", &s.encoder_opt);
        }
        c.put_replay("replay", &self.replay);
        c.put_env("env", &self.env.snapshot());
        c
    }

    fn check_identity(&self, c: &Checkpoint) -> Result<()> {
        let hash = c.get("config_hash")?;
        if hash != self.config.hash() {
            return Err(SpdError::Checkpoint(format!(
                "checkpoint was written under config {hash}, current config is {}",
                self.config.hash()
            )));
        }
        let seed: u64 = c.parse("seed")?;
        if seed != self.seed {
            return Err(SpdError::Checkpoint(format!(
                "checkpoint seed {seed} differs from requested seed {}",
                self.seed
            )));
        }
        Ok(())
    }

    /// Load networks from a policy or full checkpoint of the same run.
    pub fn restore_policy(&mut self, c: &Checkpoint) -> Result<()> {
        self.check_identity(c)?;
        self.load_networks(c)?;
        self.agent_step = c.parse("agent_step")?;
        Ok(())
    }

    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        if c.get("kind")? != "full" {
            return Err(SpdError::Checkpoint("not a resumable checkpoint".into()));
        }
        self.restore_policy(c)?;
        self.episode_return = c.parse("episode_return")?;
        self.agent.update_count = c.parse("agent.update_count")?;
        for (name, r) in Streams::NAMES.iter().zip(self.streams.all_mut()) {
            *r = rng::restore(c.get(&format!("rng.{name}"))?)?;
        }
        let a = &mut self.agent;
        c.load_adam("opt.critic", &mut a.critic_opt)?;
        c.load_adam("opt.encoder", &mut a.encoder_opt)?;
        match &mut a.policy {
            Policy::Gaussian { actor_opt, alpha_opt, .. } => {
                c.load_adam("opt.actor", actor_opt)?;
                c.load_adam("opt.alpha", alpha_opt)?;
            }
            Policy::Deterministic { actor_opt, .. } => c.load_adam("opt.actor", actor_opt)?,
        }
        if let Some(s) = &mut self.spd {
            c.load_adam("opt.spd_inverse", &mut s.inverse_opt)?;
            c.load_adam("opt.spd_forward", &mut s.forward_opt)?;
            c.load_adam("opt.spd_discriminator", &mut s.discriminator_opt)?;
            c.load_adam("opt.spd_encoder", &mut s.encoder_opt)?;
        }
        self.replay = c.replay("replay")?;
        if self.replay.capacity() != self.config.agent.buffer_capacity {
            return Err(SpdError::Checkpoint("replay capacity differs from the configuration".into()));
        }
        self.env.restore(&c.env("env")?)?;
        self.obs = self.env.observation();
        Ok(())
    }
}

// ---------------------------------------------------------------- run directories

/// Options that steer one invocation without entering the config hash.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `checkpoint.bin` in the run directory.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many raw steps are done.
    pub stop_after: Option<usize>,
    /// Echo eval rows to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub agent_steps: usize,
    pub raw_steps: usize,
    pub completed: bool,
    /// Last evaluation of this invocation.
    pub last_eval: Option<(f64, f64)>,
    pub seconds: f64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SpdError::io(path, e))
}

/// Keep the header and the first `rows` data lines of a CSV file.
fn truncate_rows(path: &Path, rows: usize) -> Result<()> {
    let file = File::open(path).map_err(|e| SpdError::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        if i > rows {
            break;
        }
        kept.push_str(&line.map_err(|e| SpdError::io(path, e))?);
        kept.push('\n');
    }
    if kept.lines().count() != rows + 1 {
        return Err(SpdError::Checkpoint(format!("{} has fewer rows than the checkpoint recorded", path.display())));
    }
    write_text(path, &kept)
}

struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<File>,
    rows: usize,
}

impl CsvSink {
    fn create(path: PathBuf, header: &[&str]) -> Result<Self> {
        let file = File::create(&path).map_err(|e| SpdError::io(&path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header)?;
        Ok(Self { path, writer, rows: 0 })
    }

    fn append(path: PathBuf, rows: usize) -> Result<Self> {
        truncate_rows(&path, rows)?;
        let file = OpenOptions::new().append(true).open(&path).map_err(|e| SpdError::io(&path, e))?;
        Ok(Self { writer: csv::WriterBuilder::new().has_headers(false).from_writer(file), path, rows })
    }

    fn write(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields)?;
        self.rows += 1;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| SpdError::io(&self.path, e))
    }
}

/// Train one seed into `run_dir`: `config.txt` (resolved canonical
/// config), `manifest.txt`, `metrics.csv`, `timing.csv`, `checkpoint.bin`
/// and, once finished, `policy.bin`.
pub fn train(config: &TrainConfig, seed: u64, run_dir: &Path, opts: &RunOptions) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone(), seed)?;
    fs::create_dir_all(run_dir).map_err(|e| SpdError::io(run_dir, e))?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let mut elapsed_before = 0.0;

    let (mut metrics, mut timing) = if opts.resume {
        let c = Checkpoint::load(&ckpt_path)?;
        trainer.restore(&c)?;
        elapsed_before = c.parse("elapsed_seconds")?;
        (
            CsvSink::append(run_dir.join(METRICS_FILE), c.parse("metrics_rows")?)?,
            CsvSink::append(run_dir.join(TIMING_FILE), c.parse("timing_rows")?)?,
        )
    } else {
        write_text(&run_dir.join(CONFIG_FILE), &config.canonical_text())?;
        let manifest = format!(
            "seed = {seed}\nconfig_hash = {}\nagent_steps = {}\ntotal_steps = {}\nversion = {}\n",
            config.hash(),
            config.agent_steps(),
            config.train.total_steps,
            env!("CARGO_PKG_VERSION"),
        );
        write_text(&run_dir.join(MANIFEST_FILE), &manifest)?;
        (
            CsvSink::create(run_dir.join(METRICS_FILE), &METRICS_HEADER)?,
            CsvSink::create(run_dir.join(TIMING_FILE), &["step", "agent_step", "seconds"])?,
        )
    };

    let mut last_eval = None;
    let emit = |rows: Vec<MetricsRow>,
                metrics: &mut CsvSink,
                timing: &mut CsvSink,
                last_eval: &mut Option<(f64, f64)>|
     -> Result<()> {
        for row in rows {
            metrics.write(&row.fields())?;
            if let (RowKind::Eval, Some(e)) = (row.kind, row.eval) {
                *last_eval = Some(e);
                let secs = elapsed_before + start.elapsed().as_secs_f64();
                timing.write(&[row.step.to_string(), row.agent_step.to_string(), format!("{secs:.3}")])?;
                if opts.verbose {
                    eprintln!("step {:>8}  eval return {:.3} ± {:.3}  ({secs:.0}s)", row.step, e.0, e.1);
                }
            }
        }
        Ok(())
    };

    let save = |trainer: &Trainer, metrics: &mut CsvSink, timing: &mut CsvSink| -> Result<()> {
        metrics.flush()?;
        timing.flush()?;
        let mut c = trainer.checkpoint();
        c.set("metrics_rows", metrics.rows);
        c.set("timing_rows", timing.rows);
        c.set("elapsed_seconds", elapsed_before + start.elapsed().as_secs_f64());
        c.save(&ckpt_path)
    };

    let rows = trainer.initial_rows()?;
    emit(rows, &mut metrics, &mut timing, &mut last_eval)?;
    let interval = config.train.checkpoint_interval;
    let mut stopped = false;
    while !trainer.is_finished() {
        let rows = trainer.step()?;
        emit(rows, &mut metrics, &mut timing, &mut last_eval)?;
        let raw = trainer.raw_steps();
        if opts.stop_after.is_some_and(|s| raw >= s) && !trainer.is_finished() {
            stopped = true;
            break;
        }
        if interval > 0 && raw % interval == 0 && !trainer.is_finished() {
            save(&trainer, &mut metrics, &mut timing)?;
        }
    }
    save(&trainer, &mut metrics, &mut timing)?;
    if !stopped {
        trainer.policy_checkpoint().save(&run_dir.join(POLICY_FILE))?;
    }
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        agent_steps: trainer.agent_step(),
        raw_steps: trainer.raw_steps(),
        completed: !stopped,
        last_eval,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// A trained run loaded back from its directory.
pub struct LoadedRun {
    pub config: TrainConfig,
    pub seed: u64,
    pub trainer: Trainer,
}

impl LoadedRun {
    pub fn agent(&self) -> &Agent {
        self.trainer.agent()
    }
}

/// Read `config.txt`, `manifest.txt` and the policy (or, failing that,
/// the latest full checkpoint) of a run directory.
pub fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let config = TrainConfig::load(&run_dir.join(CONFIG_FILE))?;
    let manifest_path = run_dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| SpdError::io(&manifest_path, e))?;
    let seed = manifest
        .lines()
        .find_map(|l| l.strip_prefix("seed = "))
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| SpdError::Checkpoint(format!("{} has no seed", manifest_path.display())))?;
    let policy = run_dir.join(POLICY_FILE);
    let ckpt = if policy.exists() { policy } else { run_dir.join(CHECKPOINT_FILE) };
    let mut trainer = Trainer::new(config.clone(), seed)?;
    trainer.restore_policy(&Checkpoint::load(&ckpt)?)?;
    Ok(LoadedRun { config, seed, trainer })
}

/// Run directory of `seed` under `root`.
pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

// ---------------------------------------------------------------- sweep

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub lambda_psi: Vec<f64>,
    pub lambda_adv: Vec<f64>,
}

impl SweepGrid {
    /// Dynamics weights 1e-3..1e0 by decades against adversarial weights 1e-4..1e0.
    pub fn standard() -> Self {
        Self { lambda_psi: vec![1e-3, 1e-2, 1e-1, 1e0], lambda_adv: vec![1e-4, 1e-3, 1e-2, 1e-1, 1e0] }
    }

    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.lambda_psi.iter().flat_map(|&p| self.lambda_adv.iter().map(move |&a| (p, a))).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub lambda_psi: f64,
    pub lambda_adv: f64,
    /// Final evaluation mean per seed, in seed order.
    pub returns: Vec<f64>,
}

impl SweepCell {
    pub fn mean(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// Train and evaluate every grid cell for every configured seed, each in
/// its own run directory, then write `sweep.csv` under `root`.
pub fn sweep(base: &TrainConfig, grid: &SweepGrid, root: &Path, opts: &RunOptions) -> Result<Vec<SweepCell>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(SpdError::InvalidArgument("sweep grid is empty".into()));
    }
    let mut out = Vec::with_capacity(cells.len());
    for (i, &(psi, adv)) in cells.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.spd.options.weights.lambda_psi = psi;
        cfg.spd.options.weights.lambda_adv = adv;
        cfg.validate()?;
        let mut returns = Vec::new();
        for &seed in &base.train.seeds {
            let dir = seed_dir(&root.join(format!("cell_{i:02}_psi{psi}_adv{adv}")), seed);
            let r = train(&cfg, seed, &dir, &RunOptions { resume: false, ..opts.clone() })?;
            returns.push(r.last_eval.map(|e| e.0).unwrap_or(f64::NAN));
        }
        out.push(SweepCell { lambda_psi: psi, lambda_adv: adv, returns });
    }
    write_sweep_table(&root.join(SWEEP_FILE), &out)?;
    Ok(out)
}

pub fn write_sweep_table(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda_psi", "lambda_adv", "mean_return", "seeds", "returns"])?;
    for c in cells {
        let returns: Vec<String> = c.returns.iter().map(f64::to_string).collect();
        w.write_record([
            c.lambda_psi.to_string(),
            c.lambda_adv.to_string(),
            c.mean().to_string(),
            c.returns.len().to_string(),
            returns.join(" "),
        ])?;
    }
    w.flush().map_err(|e| SpdError::io(path, e))
}

/// Latent of `obs` under a run's online encoder.
pub fn encode_observations(agent: &Agent, obs: &[Observation]) -> Result<Tensor<f32>> {
    agent.encoder.encode(&Observation::stack(obs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::profile("micro").unwrap();
        c.train.total_steps = 160;
        c.train.seed_steps = 10;
        c.train.eval_interval = 80;
        c.env.episode_length = 60;
        c.agent.batch_size = 4;
        c
    }

    #[test]
    fn phases_run_in_order() {
        let mut t = Trainer::new(tiny(), 3).unwrap();
        t.enable_trace();
        for _ in 0..10 {
            t.step().unwrap();
        }
        assert!(t.take_trace().iter().all(|p| matches!(p, Phase::Interact | Phase::Store)));
        t.step().unwrap();
        use Phase::*;
        assert_eq!(t.take_trace(), vec![Interact, Store, Sample, SpdUpdate, RlUpdate]);
    }

    #[test]
    fn baseline_skips_the_self_predictive_update() {
        let mut c = tiny();
        c.spd.options.ablation = crate::objectives::AblationMode::None;
        let mut t = Trainer::new(c, 3).unwrap();
        assert!(t.spd().is_none());
        for _ in 0..10 {
            t.step().unwrap();
        }
        t.enable_trace();
        t.step().unwrap();
        use Phase::*;
        assert_eq!(t.take_trace(), vec![Interact, Store, Sample, RlUpdate]);
    }

    #[test]
    fn rows_have_header_width() {
        let mut t = Trainer::new(tiny(), 1).unwrap();
        let rows = t.initial_rows().unwrap();
        assert_eq!(rows[0].fields().len(), METRICS_HEADER.len());
        assert_eq!(rows[0].kind, RowKind::Eval);
    }

    #[test]
    fn grid_has_twenty_cells() {
        let g = SweepGrid::standard();
        assert_eq!(g.cells().len(), 20);
        assert_eq!(g.cells()[0], (1e-3, 1e-4));
    }

    #[test]
    fn resume_refuses_other_config() {
        let t = Trainer::new(tiny(), 1).unwrap();
        let c = t.checkpoint();
        let mut other = tiny();
        other.spd.options.weights.lambda_psi = 0.5;
        let mut t2 = Trainer::new(other, 1).unwrap();
        assert!(matches!(t2.restore(&c), Err(SpdError::Checkpoint(_))));
        let mut t3 = Trainer::new(tiny(), 2).unwrap();
        assert!(t3.restore(&c).is_err());
    }
}
