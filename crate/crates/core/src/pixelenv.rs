//! Procedurally rendered point-mass reacher with swappable backgrounds.
//!
//! The agent is a disc moved by a 2-D velocity command inside the arena
//! `[-1, 1]²`; the target is a ring. Dense reward `exp(-k·‖agent − target‖)`
//! with `k = ln 2` gives 0.5 at unit (half-arena) distance. Backgrounds are
//! drawn first and the foreground composited on top, so physics and the
//! foreground pixels never depend on the background.

use std::collections::VecDeque;
use std::f64::consts::{LN_2, TAU};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use spd_autograd::Tensor;

use crate::imageops::ImageBatch;
use crate::rng::{derive_seed, indexed_stream, StreamRng};
use crate::{Result, SpdError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackgroundKind {
    Default,
    SimpleDistractor,
    TexturedVideo,
    FrameDirectory,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 4] =
        [Self::Default, Self::SimpleDistractor, Self::TexturedVideo, Self::FrameDirectory];

    pub fn name(self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::SimpleDistractor => "simple_distractor",
            Self::TexturedVideo => "textured_video",
            Self::FrameDirectory => "frame_directory",
        }
    }
}

impl fmt::Display for BackgroundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackgroundKind {
    type Err = SpdError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SpdError::Config(format!("unknown background kind {s:?}")))
    }
}

/// Where episodes start.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpawnMode {
    /// Agent and target in diagonally opposite corner regions.
    OppositeCorners,
    /// Agent near the lower-left corner, target near the upper-right one.
    FixedCorners,
    /// Agent and target independently uniform over the inner arena.
    Uniform,
}

impl SpawnMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::OppositeCorners => "opposite_corners",
            Self::FixedCorners => "fixed_corners",
            Self::Uniform => "uniform",
        }
    }
}

impl FromStr for SpawnMode {
    type Err = SpdError;

    fn from_str(s: &str) -> Result<Self> {
        [Self::OppositeCorners, Self::FixedCorners, Self::Uniform]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SpdError::Config(format!("unknown spawn mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub image_size: usize,
    pub frame_stack: usize,
    pub action_repeat: usize,
    /// Raw physics steps per episode.
    pub episode_length: usize,
    pub background: BackgroundKind,
    pub frame_dir: Option<PathBuf>,
    /// Arena units moved per raw step at full action.
    pub max_speed: f64,
    /// Reward decay rate per arena unit of distance.
    pub reward_rate: f64,
    pub spawn: SpawnMode,
    /// Raw steps of motion drawn as the agent's trail.
    pub trail_steps: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            image_size: 84,
            frame_stack: 3,
            action_repeat: 4,
            episode_length: 1000,
            background: BackgroundKind::Default,
            frame_dir: None,
            max_speed: 0.01,
            reward_rate: LN_2,
            spawn: SpawnMode::FixedCorners,
            trail_steps: 12,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub const ACTION_DIM: usize = 2;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpdError::Config(m));
        if self.image_size < 32 {
            return bad(format!("image_size {} is below the minimum of 32", self.image_size));
        }
        if self.frame_stack == 0 || self.action_repeat == 0 || self.episode_length == 0 {
            return bad("frame_stack, action_repeat and episode_length must be positive".into());
        }
        if !(self.max_speed > 0.0 && self.max_speed.is_finite()) {
            return bad("max_speed must be positive".into());
        }
        if !(self.reward_rate > 0.0 && self.reward_rate.is_finite()) {
            return bad("reward_rate must be positive".into());
        }
        if self.background == BackgroundKind::FrameDirectory && self.frame_dir.is_none() {
            return bad("frame_directory background needs env.frame_dir".into());
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        3 * self.frame_stack
    }

    /// Agent-visible steps per episode.
    pub fn steps_per_episode(&self) -> usize {
        self.episode_length.div_ceil(self.action_repeat)
    }

    pub fn with_background(&self, background: BackgroundKind) -> Self {
        Self { background, ..self.clone() }
    }

    pub fn reward(&self, state: &PhysState) -> f64 {
        (-self.reward_rate * state.distance()).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysState {
    pub agent_pos: [f64; 2],
    pub agent_vel: [f64; 2],
    pub target_pos: [f64; 2],
    pub step_count: usize,
}

impl PhysState {
    pub fn distance(&self) -> f64 {
        let dx = self.agent_pos[0] - self.target_pos[0];
        let dy = self.agent_pos[1] - self.target_pos[1];
        dx.hypot(dy)
    }

    /// One raw step under a velocity command in `[-1, 1]²`.
    pub fn advance(&mut self, action: [f64; 2], max_speed: f64) {
        for k in 0..2 {
            self.agent_vel[k] = action[k].clamp(-1.0, 1.0) * max_speed;
            self.agent_pos[k] = (self.agent_pos[k] + self.agent_vel[k]).clamp(-1.0, 1.0);
        }
        self.step_count += 1;
    }

    fn spawn(mode: SpawnMode, rng: &mut StreamRng) -> Self {
        let (agent_pos, target_pos) = match mode {
            SpawnMode::OppositeCorners => {
                let sx = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let sy = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut m = || rng.random_range(0.65..0.95);
                ([sx * m(), sy * m()], [-sx * m(), -sy * m()])
            }
            SpawnMode::FixedCorners => {
                let mut m = || rng.random_range(0.65..0.95);
                ([-m(), -m()], [m(), m()])
            }
            SpawnMode::Uniform => {
                let mut u = || rng.random_range(-0.9..0.9);
                ([u(), u()], [u(), u()])
            }
        };
        Self { agent_pos, agent_vel: [0.0; 2], target_pos, step_count: 0 }
    }
}

// ---------------------------------------------------------------- backgrounds

const BASE_COLOR: [f32; 3] = [0.16, 0.18, 0.24];

#[derive(Clone, Debug)]
struct Circle {
    center: [f64; 2],
    amplitude: [f64; 2],
    omega: [f64; 2],
    offset: [f64; 2],
    radius: f64,
    color: [f32; 3],
}

#[derive(Clone, Debug)]
struct NoiseLayer {
    cells: usize,
    lattice: Vec<f32>,
    velocity: [f64; 2],
    weight: f32,
}

impl NoiseLayer {
    fn sample(&self, x: f64, y: f64) -> f32 {
        let n = self.cells;
        let (fx, fy) = (x.rem_euclid(1.0) * n as f64, y.rem_euclid(1.0) * n as f64);
        let (x0, y0) = (fx.floor() as usize % n, fy.floor() as usize % n);
        let (x1, y1) = ((x0 + 1) % n, (y0 + 1) % n);
        let smooth = |t: f64| (t * t * (3.0 - 2.0 * t)) as f32;
        let (tx, ty) = (smooth(fx.fract()), smooth(fy.fract()));
        let at = |i: usize, j: usize| self.lattice[j * n + i];
        let top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * tx;
        let bottom = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * tx;
        top + (bottom - top) * ty
    }
}

/// User frames, decoded once and shared between environments.
#[derive(Debug)]
pub struct FrameSet {
    size: usize,
    frames: Vec<Vec<f32>>,
}

impl FrameSet {
    /// Load every PNG/BMP file in `dir` in lexicographic order, resized to
    /// `size × size`.
    pub fn load(dir: &Path, size: usize) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| SpdError::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(SpdError::Config(format!("frame directory {} has no PNG/BMP frames", dir.display())));
        }
        let mut frames = Vec::with_capacity(paths.len());
        for p in &paths {
            let img = image::open(p)?.to_rgb8();
            let img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
            let mut planar = vec![0.0f32; 3 * size * size];
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    planar[c * size * size + y as usize * size + x as usize] = px[c] as f32 / 255.0;
                }
            }
            frames.push(planar);
        }
        Ok(Self { size, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Scene {
    Plain,
    Circles(Vec<Circle>),
    Texture([Vec<NoiseLayer>; 3]),
    Frames { set: Arc<FrameSet>, offset: usize },
}

/// A deterministic background sequence: `(kind, seed, phase)` fixes the image.
#[derive(Clone, Debug)]
pub struct BackgroundStream {
    kind: BackgroundKind,
    seed: u64,
    phase: u64,
    scene: Scene,
}

impl BackgroundStream {
    pub fn new(kind: BackgroundKind, seed: u64, frames: Option<Arc<FrameSet>>) -> Result<Self> {
        let mut rng = indexed_stream(seed, "background", 0);
        let scene = match kind {
            BackgroundKind::Default => Scene::Plain,
            BackgroundKind::SimpleDistractor => Scene::Circles(
                (0..6)
                    .map(|_| Circle {
                        center: [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)],
                        amplitude: [rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)],
                        omega: [rng.random_range(0.01..0.04), rng.random_range(0.01..0.04)],
                        offset: [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
                        radius: rng.random_range(0.12..0.3),
                        color: [rng.random(), rng.random(), rng.random()],
                    })
                    .collect(),
            ),
            BackgroundKind::TexturedVideo => {
                let mut channel = || {
                    [3usize, 6, 12]
                        .iter()
                        .enumerate()
                        .map(|(o, &cells)| {
                            let angle: f64 = rng.random_range(0.0..TAU);
                            let speed = rng.random_range(0.002..0.006);
                            NoiseLayer {
                                cells,
                                lattice: (0..cells * cells).map(|_| rng.random()).collect(),
                                velocity: [speed * angle.cos(), speed * angle.sin()],
                                weight: 0.5f32.powi(o as i32),
                            }
                        })
                        .collect::<Vec<_>>()
                };
                Scene::Texture([channel(), channel(), channel()])
            }
            BackgroundKind::FrameDirectory => {
                let set = frames
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| SpdError::Config("frame_directory background has no frames".into()))?;
                let offset = rng.random_range(0..set.len());
                Scene::Frames { set, offset }
            }
        };
        Ok(Self { kind, seed, phase: 0, scene })
    }

    pub fn kind(&self) -> BackgroundKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn phase(&self) -> u64 {
        self.phase
    }

    pub fn set_phase(&mut self, phase: u64) {
        self.phase = phase;
    }

    pub fn with_phase(mut self, phase: u64) -> Self {
        self.phase = phase;
        self
    }

    /// Planar RGB background of `size × size` at the current phase.
    pub fn draw(&self, size: usize) -> Vec<f32> {
        let plane = size * size;
        let mut out = vec![0.0f32; 3 * plane];
        let t = self.phase as f64;
        match &self.scene {
            Scene::Plain => fill_base(&mut out, plane),
            Scene::Circles(circles) => {
                fill_base(&mut out, plane);
                for c in circles {
                    let cx = c.center[0] + c.amplitude[0] * (c.omega[0] * t + c.offset[0]).sin();
                    let cy = c.center[1] + c.amplitude[1] * (c.omega[1] * t + c.offset[1]).sin();
                    for_each_pixel(size, |p, x, y| {
                        if (x - cx).hypot(y - cy) <= c.radius {
                            for k in 0..3 {
                                out[k * plane + p] = c.color[k];
                            }
                        }
                    });
                }
            }
            Scene::Texture(channels) => {
                for (k, layers) in channels.iter().enumerate() {
                    let norm: f32 = layers.iter().map(|l| l.weight).sum();
                    for_each_pixel(size, |p, x, y| {
                        let (u, v) = ((x + 1.0) / 2.0, (y + 1.0) / 2.0);
                        let s: f32 = layers
                            .iter()
                            .map(|l| l.weight * l.sample(u + l.velocity[0] * t, v + l.velocity[1] * t))
                            .sum();
                        out[k * plane + p] = (s / norm).clamp(0.0, 1.0);
                    });
                }
            }
            Scene::Frames { set, offset } => {
                let frame = &set.frames[(*offset + self.phase as usize) % set.len()];
                if set.size == size {
                    out.copy_from_slice(frame);
                } else {
                    // Nearest-neighbour resample when rendering at a different size.
                    for_each_pixel(size, |p, _, _| {
                        let (r, c) = (p / size * set.size / size, p % size * set.size / size);
                        for k in 0..3 {
                            out[k * plane + p] = frame[k * set.size * set.size + r * set.size + c];
                        }
                    });
                }
            }
        }
        out
    }
}

fn fill_base(out: &mut [f32], plane: usize) {
    for (k, &c) in BASE_COLOR.iter().enumerate() {
        out[k * plane..(k + 1) * plane].fill(c);
    }
}

/// Visit every pixel with its flat index and arena coordinates of its centre.
fn for_each_pixel(size: usize, mut f: impl FnMut(usize, f64, f64)) {
    let coord = |i: usize| (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
    for r in 0..size {
        let y = coord(r);
        for c in 0..size {
            f(r * size + c, coord(c), y);
        }
    }
}

// ---------------------------------------------------------------- foreground

const AGENT_RADIUS: f64 = 0.1;
const TRAIL_RADIUS: f64 = 0.05;
const RING_INNER: f64 = 0.09;
const RING_OUTER: f64 = 0.15;
const AGENT_COLOR: [f32; 3] = [0.35, 0.95, 1.0];
const TRAIL_COLOR: [f32; 3] = [0.2, 0.55, 0.6];
const RING_COLOR: [f32; 3] = [1.0, 0.3, 0.25];

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Foreground color of every pixel, `None` where the background shows.
fn foreground(config: &EnvConfig, state: &PhysState) -> Vec<Option<[f32; 3]>> {
    let size = config.image_size;
    let mut out = vec![None; size * size];
    let tail = [
        state.agent_pos[0] - state.agent_vel[0] * config.trail_steps as f64,
        state.agent_pos[1] - state.agent_vel[1] * config.trail_steps as f64,
    ];
    for_each_pixel(size, |p, x, y| {
        let d_target = (x - state.target_pos[0]).hypot(y - state.target_pos[1]);
        let d_agent = (x - state.agent_pos[0]).hypot(y - state.agent_pos[1]);
        out[p] = if d_agent <= AGENT_RADIUS {
            Some(AGENT_COLOR)
        } else if segment_distance([x, y], state.agent_pos, tail) <= TRAIL_RADIUS {
            Some(TRAIL_COLOR)
        } else if (RING_INNER..=RING_OUTER).contains(&d_target) {
            Some(RING_COLOR)
        } else {
            None
        };
    });
    out
}

/// Pixels covered by the agent, its trail or the target ring.
pub fn foreground_mask(config: &EnvConfig, state: &PhysState) -> Vec<bool> {
    foreground(config, state).iter().map(Option::is_some).collect()
}

/// One planar RGB frame in `[0, 1]`: background, then foreground on top.
pub fn render(config: &EnvConfig, state: &PhysState, background: &BackgroundStream) -> Vec<f32> {
    let size = config.image_size;
    let plane = size * size;
    let mut frame = background.draw(size);
    for (p, fg) in foreground(config, state).into_iter().enumerate() {
        if let Some(color) = fg {
            for k in 0..3 {
                frame[k * plane + p] = color[k];
            }
        }
    }
    frame
}

fn quantize(frame: &[f32]) -> Arc<[u8]> {
    frame.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

// ---------------------------------------------------------------- observations

/// Stacked 8-bit frames, oldest first, `3·frame_stack × size × size`.
/// Frames are shared, so consecutive observations cost one frame each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    frames: Vec<Arc<[u8]>>,
    size: usize,
}

impl Observation {
    pub fn new(frames: Vec<Arc<[u8]>>, size: usize) -> Result<Self> {
        if frames.is_empty() || frames.iter().any(|f| f.len() != 3 * size * size) {
            return Err(SpdError::Shape(format!("frames do not form {size}×{size} RGB images")));
        }
        Ok(Self { frames, size })
    }

    pub fn frames(&self) -> &[Arc<[u8]>] {
        &self.frames
    }

    /// All channels as one contiguous byte array.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.frames.iter().flat_map(|f| f.iter().copied()).collect()
    }

    pub fn channels(&self) -> usize {
        3 * self.frames.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn to_batch(&self) -> ImageBatch {
        Self::stack([self]).expect("observation shape is validated on construction")
    }

    /// Stack observations of identical shape into one batch scaled to `[0, 1]`.
    pub fn stack<'a>(observations: impl IntoIterator<Item = &'a Observation>) -> Result<ImageBatch> {
        let all: Vec<&Observation> = observations.into_iter().collect();
        let first = all.first().ok_or_else(|| SpdError::InvalidArgument("no observations to stack".into()))?;
        let (channels, size) = (first.channels(), first.size);
        if all.iter().any(|o| o.channels() != channels || o.size != size) {
            return Err(SpdError::Shape("observations differ in shape".into()));
        }
        let mut data = Vec::with_capacity(all.len() * channels * size * size);
        for o in &all {
            for f in &o.frames {
                data.extend(f.iter().map(|&b| b as f32 / 255.0));
            }
        }
        ImageBatch::new(Tensor::new(&[all.len(), channels, size, size], data)?)
    }
}

fn stack_frames(frames: &VecDeque<Arc<[u8]>>, size: usize) -> Observation {
    Observation { frames: frames.iter().cloned().collect(), size }
}

/// Render `state` over `background` as a full observation (the frame
/// repeated `frame_stack` times, as right after a reset).
pub fn render_observation(config: &EnvConfig, state: &PhysState, background: &BackgroundStream) -> Observation {
    let frame = quantize(&render(config, state, background));
    let frames: VecDeque<Arc<[u8]>> = std::iter::repeat_n(frame, config.frame_stack).collect();
    stack_frames(&frames, config.image_size)
}

/// The same physical state rendered over two backgrounds.
pub fn paired_observation(
    config: &EnvConfig,
    state: &PhysState,
    bg_a: &BackgroundStream,
    bg_b: &BackgroundStream,
) -> (Observation, Observation) {
    (render_observation(config, state, bg_a), render_observation(config, state, bg_b))
}

// ---------------------------------------------------------------- environment

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observation: Observation,
    /// Reward summed over the repeated raw steps.
    pub reward: f64,
    pub done: bool,
}

/// Everything needed to continue an episode bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSnapshot {
    pub state: PhysState,
    pub episode: u64,
    pub started: bool,
    pub done: bool,
    pub frames: Vec<Vec<u8>>,
}

pub struct PixelEnv {
    config: EnvConfig,
    frame_set: Option<Arc<FrameSet>>,
    state: PhysState,
    background: BackgroundStream,
    frames: VecDeque<Arc<[u8]>>,
    /// Episodes started so far.
    episode: u64,
    done: bool,
}

impl PixelEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let frame_set = match (&config.background, &config.frame_dir) {
            (BackgroundKind::FrameDirectory, Some(dir)) => Some(Arc::new(FrameSet::load(dir, config.image_size)?)),
            _ => None,
        };
        Self::with_frames(config, frame_set)
    }

    /// Construct with an already loaded frame set (shared between instances).
    pub fn with_frames(config: EnvConfig, frame_set: Option<Arc<FrameSet>>) -> Result<Self> {
        config.validate()?;
        let background = BackgroundStream::new(config.background, 0, frame_set.clone())?;
        Ok(Self {
            state: PhysState { agent_pos: [0.0; 2], agent_vel: [0.0; 2], target_pos: [0.0; 2], step_count: 0 },
            background,
            frames: VecDeque::new(),
            episode: 0,
            done: true,
            frame_set,
            config,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn frame_set(&self) -> Option<&Arc<FrameSet>> {
        self.frame_set.as_ref()
    }

    pub fn state(&self) -> &PhysState {
        &self.state
    }

    pub fn background(&self) -> &BackgroundStream {
        &self.background
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn episode_background(&self, episode: u64) -> Result<BackgroundStream> {
        let seed = derive_seed(self.config.seed, "episode_background", episode);
        BackgroundStream::new(self.config.background, seed, self.frame_set.clone())
    }

    pub fn reset(&mut self) -> Result<Observation> {
        let mut rng = indexed_stream(self.config.seed, "episode_spawn", self.episode);
        self.state = PhysState::spawn(self.config.spawn, &mut rng);
        self.background = self.episode_background(self.episode)?;
        self.episode += 1;
        self.done = false;
        let frame = self.render_current();
        self.frames = std::iter::repeat_n(frame, self.config.frame_stack).collect();
        Ok(self.observation())
    }

    fn render_current(&self) -> Arc<[u8]> {
        quantize(&render(&self.config, &self.state, &self.background))
    }

    pub fn observation(&self) -> Observation {
        stack_frames(&self.frames, self.config.image_size)
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<StepOutcome> {
        if self.done {
            return Err(SpdError::InvalidState("step called on a finished or unstarted episode".into()));
        }
        let action = action.map(|a| if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) });
        let mut reward = 0.0;
        for _ in 0..self.config.action_repeat {
            self.state.advance(action, self.config.max_speed);
            reward += self.config.reward(&self.state);
            if self.state.step_count >= self.config.episode_length {
                break;
            }
        }
        self.background.set_phase(self.state.step_count as u64);
        self.done = self.state.step_count >= self.config.episode_length;
        let frame = self.render_current();
        self.frames.pop_front();
        self.frames.push_back(frame);
        Ok(StepOutcome { observation: self.observation(), reward, done: self.done })
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            state: self.state,
            episode: self.episode,
            started: !self.frames.is_empty(),
            done: self.done,
            frames: self.frames.iter().map(|f| f.to_vec()).collect(),
        }
    }

    pub fn restore(&mut self, snap: &EnvSnapshot) -> Result<()> {
        let frame_len = 3 * self.config.image_size * self.config.image_size;
        if snap.started
            && (snap.frames.len() != self.config.frame_stack || snap.frames.iter().any(|f| f.len() != frame_len))
        {
            return Err(SpdError::Checkpoint("environment frames do not match the configuration".into()));
        }
        self.state = snap.state;
        self.episode = snap.episode;
        self.done = snap.done;
        self.frames = snap.frames.iter().map(|f| Arc::from(f.as_slice())).collect();
        if snap.episode > 0 {
            self.background = self.episode_background(snap.episode - 1)?.with_phase(snap.state.step_count as u64);
        }
        Ok(())
    }
}
