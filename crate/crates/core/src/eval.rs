//! Evaluation protocols: policy return, background generalization,
//! latent distance across backgrounds, and latent export.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::agent::{ActMode, Agent};
use crate::nets::Encoder;
use crate::pixelenv::{
    paired_observation, render_observation, BackgroundKind, BackgroundStream, EnvConfig, FrameSet, Observation,
    PhysState, PixelEnv,
};
use crate::rng::{derive_seed, stream};
use crate::{Result, SpdError};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single episode.
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalSummary {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = if returns.len() < 2 {
            0.0
        } else {
            (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std, returns }
    }
}

/// The frame set a configuration needs, if any.
pub fn load_frames(config: &EnvConfig) -> Result<Option<Arc<FrameSet>>> {
    match (config.background, &config.frame_dir) {
        (BackgroundKind::FrameDirectory, Some(dir)) => Ok(Some(Arc::new(FrameSet::load(dir, config.image_size)?))),
        (BackgroundKind::FrameDirectory, None) => {
            Err(SpdError::Config("frame_directory background needs env.frame_dir".into()))
        }
        _ => Ok(None),
    }
}

/// Run `episodes` fresh environments in lockstep, querying `policy` with
/// every live observation at once. Episode `i` uses an environment seeded
/// from `(seed, i)`, so results do not depend on batching.
pub fn rollout(
    config: &EnvConfig,
    frames: Option<Arc<FrameSet>>,
    episodes: usize,
    seed: u64,
    mut policy: impl FnMut(&[Observation]) -> Result<Vec<Vec<f32>>>,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(SpdError::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let mut envs = (0..episodes)
        .map(|i| {
            let cfg = EnvConfig { seed: derive_seed(seed, "eval_episode", i as u64), ..config.clone() };
            PixelEnv::with_frames(cfg, frames.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut obs = envs.iter_mut().map(PixelEnv::reset).collect::<Result<Vec<_>>>()?;
    let mut returns = vec![0.0; episodes];
    let mut live: Vec<usize> = (0..episodes).collect();
    while !live.is_empty() {
        let batch: Vec<Observation> = live.iter().map(|&i| obs[i].clone()).collect();
        let actions = policy(&batch)?;
        let mut still = Vec::with_capacity(live.len());
        for (&i, a) in live.iter().zip(&actions) {
            let out = envs[i].step([a[0] as f64, a[1] as f64])?;
            returns[i] += out.reward;
            obs[i] = out.observation;
            if !out.done {
                still.push(i);
            }
        }
        live = still;
    }
    Ok(EvalSummary::from_returns(returns))
}

/// Deterministic policy on un-augmented observations.
pub fn evaluate(
    agent: &Agent,
    config: &EnvConfig,
    frames: Option<Arc<FrameSet>>,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    // The deterministic mode never draws; the generator only satisfies the signature.
    let mut unused = stream(seed, "eval_policy");
    rollout(config, frames, episodes, seed, |obs| {
        agent.act(&Observation::stack(obs)?, ActMode::Deterministic, &mut unused)
    })
}

/// Uniform random actions: the return floor of an environment configuration.
pub fn random_baseline(
    config: &EnvConfig,
    frames: Option<Arc<FrameSet>>,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let mut rng = stream(seed, "random_policy");
    rollout(config, frames, episodes, seed, |obs| {
        Ok(obs.iter().map(|_| (0..EnvConfig::ACTION_DIM).map(|_| rng.random_range(-1.0f32..=1.0)).collect()).collect())
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizationRow {
    pub train_background: BackgroundKind,
    pub test_background: BackgroundKind,
    pub train: EvalSummary,
    pub test: EvalSummary,
}

impl GeneralizationRow {
    /// Train-background mean minus test-background mean.
    pub fn gap(&self) -> f64 {
        self.train.mean - self.test.mean
    }
}

/// Evaluate one snapshot under its training background and under
/// `test_background`, with identical episode seeds for both.
pub fn generalization_eval(
    agent: &Agent,
    train_config: &EnvConfig,
    test_config: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<GeneralizationRow> {
    let train = evaluate(agent, train_config, load_frames(train_config)?, episodes, seed)?;
    let test = evaluate(agent, test_config, load_frames(test_config)?, episodes, seed)?;
    Ok(GeneralizationRow {
        train_background: train_config.background,
        test_background: test_config.background,
        train,
        test,
    })
}

// ---------------------------------------------------------------- distance

pub type Pairing = (BackgroundKind, BackgroundKind);

/// The three pairings of the built-in backgrounds.
pub const BUILTIN_PAIRINGS: [Pairing; 3] = [
    (BackgroundKind::Default, BackgroundKind::SimpleDistractor),
    (BackgroundKind::Default, BackgroundKind::TexturedVideo),
    (BackgroundKind::SimpleDistractor, BackgroundKind::TexturedVideo),
];

/// A random mid-episode physical state.
pub fn random_state<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> PhysState {
    let mut u = || rng.random_range(-0.9..0.9);
    let (agent_pos, target_pos) = ([u(), u()], [u(), u()]);
    let agent_vel = [u() / 0.9 * config.max_speed, u() / 0.9 * config.max_speed];
    PhysState { agent_pos, agent_vel, target_pos, step_count: rng.random_range(0..config.episode_length) }
}

/// `pairs` physical states, each rendered over one background of each kind
/// in `pairing` (independent background seeds).
pub fn paired_dataset(
    config: &EnvConfig,
    frames: Option<Arc<FrameSet>>,
    pairing: Pairing,
    pairs: usize,
    seed: u64,
) -> Result<(Vec<Observation>, Vec<Observation>)> {
    let mut rng = stream(seed, "paired_states");
    let mut a = Vec::with_capacity(pairs);
    let mut b = Vec::with_capacity(pairs);
    for i in 0..pairs as u64 {
        let state = random_state(config, &mut rng);
        let phase = state.step_count as u64;
        let bg_a =
            BackgroundStream::new(pairing.0, derive_seed(seed, "pair_bg_a", i), frames.clone())?.with_phase(phase);
        let bg_b =
            BackgroundStream::new(pairing.1, derive_seed(seed, "pair_bg_b", i), frames.clone())?.with_phase(phase);
        let (oa, ob) = paired_observation(config, &state, &bg_a, &bg_b);
        a.push(oa);
        b.push(ob);
    }
    Ok((a, b))
}

/// Mean row-wise Euclidean distance.
pub fn mean_l2(a: &[f32], b: &[f32], dim: usize) -> Result<f64> {
    if a.len() != b.len() || dim == 0 || !a.len().is_multiple_of(dim) || a.is_empty() {
        return Err(SpdError::Shape(format!("cannot pair {} and {} values in rows of {dim}", a.len(), b.len())));
    }
    let rows = a.len() / dim;
    let total: f64 = a
        .chunks(dim)
        .zip(b.chunks(dim))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / rows as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceCell {
    pub method: String,
    pub pairing: Pairing,
    pub raw: f64,
    /// `raw` divided by the reference method's raw value; equal to `raw`
    /// when that reference is zero.
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTable {
    pub reference: String,
    pub cells: Vec<DistanceCell>,
    /// Pairings whose reference distance was zero (reported raw).
    pub degenerate: Vec<Pairing>,
}

impl DistanceTable {
    pub fn get(&self, method: &str, pairing: Pairing) -> Option<&DistanceCell> {
        self.cells.iter().find(|c| c.method == method && c.pairing == pairing)
    }
}

fn encode_all(encoder: &Encoder, obs: &[Observation]) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for chunk in obs.chunks(64) {
        out.extend_from_slice(encoder.encode(&Observation::stack(chunk)?)?.data());
    }
    Ok(out)
}

/// Mean latent distance between same-state observations under different
/// backgrounds, per method and pairing, normalized to `reference`.
pub fn representation_distance(
    methods: &[(&str, &Encoder)],
    reference: &str,
    config: &EnvConfig,
    pairings: &[Pairing],
    pairs: usize,
    seed: u64,
) -> Result<DistanceTable> {
    if methods.is_empty() || !methods.iter().any(|(m, _)| *m == reference) {
        return Err(SpdError::InvalidArgument(format!("reference method {reference:?} is not among the methods")));
    }
    if pairs == 0 {
        return Err(SpdError::InvalidArgument("need at least one observation pair".into()));
    }
    let frames = load_frames(config).or_else(|_| Ok::<_, SpdError>(None))?;
    let mut cells = Vec::new();
    let mut degenerate = Vec::new();
    for (k, &pairing) in pairings.iter().enumerate() {
        let (a, b) = paired_dataset(config, frames.clone(), pairing, pairs, derive_seed(seed, "pairing", k as u64))?;
        let mut raw = Vec::new();
        for (name, enc) in methods {
            let dim = enc.config().latent_dim;
            raw.push((name.to_string(), mean_l2(&encode_all(enc, &a)?, &encode_all(enc, &b)?, dim)?));
        }
        let base = raw.iter().find(|(m, _)| m == reference).map(|r| r.1).unwrap();
        if base == 0.0 {
            degenerate.push(pairing);
        }
        for (method, d) in raw {
            let normalized = if base == 0.0 { d } else { d / base };
            cells.push(DistanceCell { method, pairing, raw: d, normalized });
        }
    }
    Ok(DistanceTable { reference: reference.to_string(), cells, degenerate })
}

// ---------------------------------------------------------------- latents

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub state: usize,
    pub background: BackgroundKind,
    pub latent: Vec<f32>,
}

/// `states` random physical states, each rendered once per background.
pub fn latent_dataset(
    config: &EnvConfig,
    backgrounds: &[BackgroundKind],
    states: usize,
    seed: u64,
) -> Result<Vec<(usize, BackgroundKind, Observation)>> {
    let frames = load_frames(config).or_else(|_| Ok::<_, SpdError>(None))?;
    let mut rng = stream(seed, "latent_states");
    let mut out = Vec::with_capacity(states * backgrounds.len());
    for i in 0..states {
        let state = random_state(config, &mut rng);
        for &kind in backgrounds {
            let bg = BackgroundStream::new(kind, derive_seed(seed, "latent_bg", i as u64), frames.clone())?
                .with_phase(state.step_count as u64);
            out.push((i, kind, render_observation(config, &state, &bg)));
        }
    }
    Ok(out)
}

/// Encode every observation and write `state,background,z0..` rows.
pub fn export_latents(
    encoder: &Encoder,
    items: &[(usize, BackgroundKind, Observation)],
    path: &Path,
) -> Result<Vec<LatentRow>> {
    let obs: Vec<Observation> = items.iter().map(|(_, _, o)| o.clone()).collect();
    let dim = encoder.config().latent_dim;
    let z = encode_all(encoder, &obs)?;
    let rows: Vec<LatentRow> = items
        .iter()
        .zip(z.chunks(dim))
        .map(|((s, k, _), z)| LatentRow { state: *s, background: *k, latent: z.to_vec() })
        .collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["state".to_string(), "background".to_string()];
    header.extend((0..dim).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.state.to_string(), r.background.to_string()];
        rec.extend(r.latent.iter().map(f32::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| SpdError::io(path, e))?;
    Ok(rows)
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let bad = |m: &str| SpdError::Parse(format!("{}: {m}", path.display()));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut it = rec.iter();
        let state = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad state column"))?;
        let background = it.next().ok_or_else(|| bad("missing background"))?.parse()?;
        let latent = it.map(|v| v.parse::<f32>().map_err(|_| bad("bad latent value"))).collect::<Result<_>>()?;
        rows.push(LatentRow { state, background, latent });
    }
    Ok(rows)
}

impl fmt::Display for DistanceTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "method,background_a,background_b,raw,normalized")?;
        for c in &self.cells {
            writeln!(f, "{},{},{},{},{}", c.method, c.pairing.0, c.pairing.1, c.raw, c.normalized)?;
        }
        Ok(())
    }
}
