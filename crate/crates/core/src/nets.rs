//! Function approximators: pixel encoder, actors, twin critic, inverse and
//! forward dynamics heads, and the latent discriminator.
//!
//! Every network owns a [`ParamSet`] and builds its forward pass into a
//! caller-supplied [`Graph`]. Whether the parameters receive gradients is
//! decided per call through [`Bind`], which is how gradient routing is
//! expressed: a frozen binding lets gradients pass through to the inputs
//! but never into the weights.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use spd_autograd::{conv_output_size, Graph, ParamSet, Real, Tensor, Var};

use crate::imageops::ImageBatch;
use crate::{Result, SpdError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Train,
    Frozen,
}

fn bind<T: Real>(g: &mut Graph<T>, set: &ParamSet<T>, index: usize, mode: Bind) -> Var {
    match mode {
        Bind::Train => g.param(set, index),
        Bind::Frozen => g.frozen(set, index),
    }
}

/// `target ← tau·source + (1 − tau)·target`.
pub fn soft_update<T: Real>(target: &mut ParamSet<T>, source: &ParamSet<T>, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(SpdError::InvalidArgument(format!("soft-update rate {tau} outside [0, 1]")));
    }
    Ok(target.soft_update_from(source, T::lit(tau))?)
}

// ---------------------------------------------------------------- init

/// Orthogonal `[rows, cols]` matrix (orthonormal rows or columns, whichever
/// is the shorter side).
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (long, short) = (rows.max(cols), rows.min(cols));
    // `short` orthonormal vectors of length `long`, by modified Gram–Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            if rows >= cols {
                out[j * cols + i] = x;
            } else {
                out[i * cols + j] = x;
            }
        }
    }
    out
}

fn linear_params<T: Real, R: Rng + ?Sized>(
    set: &mut ParamSet<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let w = orthogonal(fan_out, fan_in, rng);
    set.push(format!("{name}.w"), Tensor::new(&[fan_out, fan_in], w.into_iter().map(T::lit).collect()).unwrap());
    set.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn conv_params<T: Real, R: Rng + ?Sized>(
    set: &mut ParamSet<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut R,
) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let w = Tensor::from_fn(&[cout, cin, k, k], |_| {
        let n: f64 = StandardNormal.sample(rng);
        T::lit(std * n)
    });
    set.push(format!("{name}.w"), w);
    set.push(format!("{name}.b"), Tensor::zeros(&[cout]));
}

// ---------------------------------------------------------------- MLP

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

/// Fully connected stack with ReLU between layers.
#[derive(Clone, Debug)]
pub struct Mlp<T: Real = f32> {
    params: ParamSet<T>,
    dims: Vec<usize>,
    output: Activation,
}

impl<T: Real> Mlp<T> {
    /// `dims = [input, hidden…, output]`.
    pub fn new<R: Rng + ?Sized>(name: &str, dims: &[usize], output: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let mut params = ParamSet::new();
        for (i, w) in dims.windows(2).enumerate() {
            linear_params(&mut params, &format!("{name}.fc{i}"), w[0], w[1], rng);
        }
        Self { params, dims: dims.to_vec(), output }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Bind) -> Var {
        assert_eq!(g.shape(x)[1], self.dims[0], "MLP input width");
        let mut h = x;
        for i in 0..self.layers() {
            let w = bind(g, &self.params, 2 * i, mode);
            let b = bind(g, &self.params, 2 * i + 1, mode);
            h = g.linear(h, w, b);
            if i + 1 < self.layers() {
                h = g.relu(h);
            }
        }
        match self.output {
            Activation::Identity => h,
            Activation::Tanh => g.tanh(h),
        }
    }
}

fn check_width<T: Real>(g: &Graph<T>, v: Var, width: usize, what: &str) -> Result<()> {
    let s = g.shape(v);
    if s.len() != 2 || s[1] != width {
        return Err(SpdError::Shape(format!("{what}: expected [batch, {width}], got {s:?}")));
    }
    Ok(())
}

// ---------------------------------------------------------------- encoder

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub num_filters: usize,
    pub num_layers: usize,
    pub latent_dim: usize,
}

impl EncoderConfig {
    pub fn new(in_channels: usize, image_size: usize) -> Self {
        Self { in_channels, image_size, num_filters: 32, num_layers: 4, latent_dim: 50 }
    }

    /// Spatial side after each conv layer.
    pub fn feature_sizes(&self) -> Result<Vec<usize>> {
        let mut side = self.image_size;
        let mut sizes = Vec::with_capacity(self.num_layers);
        for layer in 0..self.num_layers {
            if side < 3 {
                return Err(SpdError::Shape(format!("image size {} too small for the encoder", self.image_size)));
            }
            side = conv_output_size(side, 3, if layer == 0 { 2 } else { 1 });
            sizes.push(side);
        }
        Ok(sizes)
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let side = *self.feature_sizes()?.last().unwrap_or(&self.image_size);
        Ok(self.num_filters * side * side)
    }
}

/// Conv stack → FC → LayerNorm → tanh.
#[derive(Clone, Debug)]
pub struct Encoder<T: Real = f32> {
    config: EncoderConfig,
    params: ParamSet<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.num_layers == 0 || config.in_channels == 0 || config.latent_dim == 0 {
            return Err(SpdError::Config("encoder dimensions must be positive".into()));
        }
        let flat = config.flat_dim()?;
        let mut params = ParamSet::new();
        let mut cin = config.in_channels;
        for l in 0..config.num_layers {
            conv_params(&mut params, &format!("encoder.conv{l}"), cin, config.num_filters, 3, rng);
            cin = config.num_filters;
        }
        linear_params(&mut params, "encoder.fc", flat, config.latent_dim, rng);
        params.push("encoder.ln.gamma", Tensor::full(&[config.latent_dim], T::one()));
        params.push("encoder.ln.beta", Tensor::zeros(&[config.latent_dim]));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.image_size || shape[3] != c.image_size {
            return Err(SpdError::Shape(format!(
                "encoder expects [batch, {}, {}, {}], got {shape:?}",
                c.in_channels, c.image_size, c.image_size
            )));
        }
        Ok(())
    }

    /// Conv feature map before flattening, `[batch, filters, s, s]`.
    pub fn features(&self, g: &mut Graph<T>, x: Var, mode: Bind) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        for l in 0..self.config.num_layers {
            let w = bind(g, &self.params, 2 * l, mode);
            let b = bind(g, &self.params, 2 * l + 1, mode);
            h = g.conv2d(h, w, b, if l == 0 { 2 } else { 1 });
            h = g.relu(h);
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Bind) -> Result<Var> {
        let h = self.features(g, x, mode)?;
        let batch = g.shape(h)[0];
        let flat = g.reshape(h, &[batch, self.config.flat_dim()?]);
        let n = 2 * self.config.num_layers;
        let (w, b) = (bind(g, &self.params, n, mode), bind(g, &self.params, n + 1, mode));
        let y = g.linear(flat, w, b);
        let (gamma, beta) = (bind(g, &self.params, n + 2, mode), bind(g, &self.params, n + 3, mode));
        let y = g.layer_norm(y, gamma, beta, 1e-5);
        Ok(g.tanh(y))
    }

    /// Encode a batch outside of any training graph.
    pub fn encode(&self, batch: &ImageBatch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(batch.tensor().cast());
        let z = self.forward(&mut g, x, Bind::Frozen)?;
        Ok(g.value(z).clone())
    }
}

// ---------------------------------------------------------------- actor / critic

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogStdBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for LogStdBounds {
    fn default() -> Self {
        Self { min: -10.0, max: 2.0 }
    }
}

/// Graph nodes of one reparameterized actor sample.
#[derive(Clone, Copy, Debug)]
pub struct ActorSample {
    pub action: Var,
    pub log_prob: Var,
    pub mean_action: Var,
    pub log_std: Var,
}

/// Diagonal Gaussian policy squashed by tanh.
#[derive(Clone, Debug)]
pub struct GaussianActor<T: Real = f32> {
    net: Mlp<T>,
    action_dim: usize,
    bounds: LogStdBounds,
}

impl<T: Real> GaussianActor<T> {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden: usize,
        action_dim: usize,
        bounds: LogStdBounds,
        rng: &mut R,
    ) -> Self {
        Self {
            net: Mlp::new("actor", &[latent_dim, hidden, hidden, 2 * action_dim], Activation::Identity, rng),
            action_dim,
            bounds,
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.net.params_mut()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Pre-squash mean and bounded log-std.
    pub fn distribution(&self, g: &mut Graph<T>, z: Var, mode: Bind) -> Result<(Var, Var)> {
        check_width(g, z, self.net.input_dim(), "actor input")?;
        let out = self.net.forward(g, z, mode);
        let mean = g.narrow(out, 0, self.action_dim);
        let raw = g.narrow(out, self.action_dim, self.action_dim);
        // Smoothly map into [min, max] instead of hard clipping.
        let t = g.tanh(raw);
        let half = 0.5 * (self.bounds.max - self.bounds.min);
        let scaled = g.scale(t, half);
        let log_std = g.add_scalar(scaled, self.bounds.min + half);
        Ok((mean, log_std))
    }

    /// Reparameterized sample with standard-normal noise `eps` `[batch, action_dim]`.
    /// The log-probability includes the tanh change-of-variables correction.
    pub fn sample(&self, g: &mut Graph<T>, z: Var, eps: Tensor<T>, mode: Bind) -> Result<ActorSample> {
        let (mean, log_std) = self.distribution(g, z, mode)?;
        if eps.shape() != g.shape(mean) {
            return Err(SpdError::Shape(format!("actor noise {:?} vs {:?}", eps.shape(), g.shape(mean))));
        }
        let eps = g.input(eps);
        let std = g.exp(log_std);
        let noise = g.mul(std, eps);
        let u = g.add(mean, noise);
        let action = g.tanh(u);
        let mean_action = g.tanh(mean);

        // Gaussian log-density: −½ε² − log σ − ½ log 2π per dimension.
        let eps2 = g.square(eps);
        let half_eps2 = g.scale(eps2, -0.5);
        let per_dim = g.sub(half_eps2, log_std);
        let gauss = g.sum_rows(per_dim);
        let gauss = g.add_scalar(gauss, -0.5 * (std::f64::consts::TAU).ln() * self.action_dim as f64);
        // log(1 − tanh²u) = 2(ln 2 − u − softplus(−2u)), stable for large |u|.
        let m2u = g.scale(u, -2.0);
        let sp = g.softplus(m2u);
        let u_plus_sp = g.add(u, sp);
        let neg = g.scale(u_plus_sp, -2.0);
        let corr = g.add_scalar(neg, 2.0 * std::f64::consts::LN_2);
        let corr = g.sum_rows(corr);
        let log_prob = g.sub(gauss, corr);
        Ok(ActorSample { action, log_prob, mean_action, log_std })
    }
}

/// Two independent Q-networks on `(z, a)`, stored in one parameter set:
/// the first half belongs to Q1, the second to Q2.
#[derive(Clone, Debug)]
pub struct TwinCritic<T: Real = f32> {
    params: ParamSet<T>,
    latent_dim: usize,
    action_dim: usize,
    layers: usize,
}

impl<T: Real> TwinCritic<T> {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden: usize, action_dim: usize, rng: &mut R) -> Self {
        let dims = [latent_dim + action_dim, hidden, hidden, 1];
        let q1: Mlp<T> = Mlp::new("critic.q1", &dims, Activation::Identity, rng);
        let q2: Mlp<T> = Mlp::new("critic.q2", &dims, Activation::Identity, rng);
        let mut params = ParamSet::new();
        for (n, t) in q1.params().iter().chain(q2.params().iter()) {
            params.push(n, t.clone());
        }
        Self { params, latent_dim, action_dim, layers: dims.len() - 1 }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph<T>, z: Var, a: Var, mode: Bind) -> Result<(Var, Var)> {
        check_width(g, z, self.latent_dim, "critic latent")?;
        check_width(g, a, self.action_dim, "critic action")?;
        let x = g.concat(&[z, a]);
        let mut head = |offset: usize| {
            let mut h = x;
            for i in 0..self.layers {
                let w = bind(g, &self.params, offset + 2 * i, mode);
                let b = bind(g, &self.params, offset + 2 * i + 1, mode);
                h = g.linear(h, w, b);
                if i + 1 < self.layers {
                    h = g.relu(h);
                }
            }
            h
        };
        let q1 = head(0);
        let q2 = head(2 * self.layers);
        Ok((q1, q2))
    }
}

/// Deterministic tanh policy for TD3.
#[derive(Clone, Debug)]
pub struct DeterministicActor<T: Real = f32> {
    net: Mlp<T>,
}

impl<T: Real> DeterministicActor<T> {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden: usize, action_dim: usize, rng: &mut R) -> Self {
        Self { net: Mlp::new("actor", &[latent_dim, hidden, hidden, action_dim], Activation::Tanh, rng) }
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.net.params_mut()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn forward(&self, g: &mut Graph<T>, z: Var, mode: Bind) -> Result<Var> {
        check_width(g, z, self.net.input_dim(), "actor input")?;
        Ok(self.net.forward(g, z, mode))
    }
}

// ---------------------------------------------------------------- SPD heads

/// Depth of the dynamics heads: three hidden layers, or the shallow
/// single-hidden-layer reading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadDepth {
    Deep,
    Shallow,
}

impl HeadDepth {
    pub fn name(self) -> &'static str {
        match self {
            Self::Deep => "deep",
            Self::Shallow => "shallow",
        }
    }

    fn dims(self, input: usize, hidden: usize, output: usize) -> Vec<usize> {
        match self {
            Self::Deep => vec![input, hidden, hidden, hidden, output],
            Self::Shallow => vec![input, hidden, output],
        }
    }
}

impl fmt::Display for HeadDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadDepth {
    type Err = SpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(Self::Deep),
            "shallow" => Ok(Self::Shallow),
            _ => Err(SpdError::Config(format!("unknown head depth {s:?}"))),
        }
    }
}

/// Inverse dynamics: `(z_t, z_{t+1}) → action`, tanh-bounded.
#[derive(Clone, Debug)]
pub struct InverseModel<T: Real = f32> {
    net: Mlp<T>,
    latent_dim: usize,
}

impl<T: Real> InverseModel<T> {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden: usize,
        action_dim: usize,
        depth: HeadDepth,
        rng: &mut R,
    ) -> Self {
        Self {
            net: Mlp::new("inverse", &depth.dims(2 * latent_dim, hidden, action_dim), Activation::Tanh, rng),
            latent_dim,
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.net.params_mut()
    }

    pub fn layers(&self) -> usize {
        self.net.layers()
    }

    pub fn forward(&self, g: &mut Graph<T>, z_t: Var, z_next: Var, mode: Bind) -> Result<Var> {
        check_width(g, z_t, self.latent_dim, "inverse z_t")?;
        check_width(g, z_next, self.latent_dim, "inverse z_t+1")?;
        let x = g.concat(&[z_t, z_next]);
        Ok(self.net.forward(g, x, mode))
    }
}

/// Forward dynamics: `(z_t, a_t) → z_{t+1}`, tanh-bounded; the action is
/// concatenated at the input layer.
#[derive(Clone, Debug)]
pub struct ForwardModel<T: Real = f32> {
    net: Mlp<T>,
    latent_dim: usize,
    action_dim: usize,
}

impl<T: Real> ForwardModel<T> {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden: usize,
        action_dim: usize,
        depth: HeadDepth,
        rng: &mut R,
    ) -> Self {
        Self {
            net: Mlp::new("forward", &depth.dims(latent_dim + action_dim, hidden, latent_dim), Activation::Tanh, rng),
            latent_dim,
            action_dim,
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.net.params_mut()
    }

    pub fn layers(&self) -> usize {
        self.net.layers()
    }

    pub fn forward(&self, g: &mut Graph<T>, z_t: Var, a: Var, mode: Bind) -> Result<Var> {
        check_width(g, z_t, self.latent_dim, "forward z_t")?;
        check_width(g, a, self.action_dim, "forward action")?;
        let x = g.concat(&[z_t, a]);
        Ok(self.net.forward(g, x, mode))
    }
}

/// Latent discriminator: one hidden layer, raw scalar score (optionally tanh).
#[derive(Clone, Debug)]
pub struct Discriminator<T: Real = f32> {
    net: Mlp<T>,
    latent_dim: usize,
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden: usize, tanh_output: bool, rng: &mut R) -> Self {
        let act = if tanh_output { Activation::Tanh } else { Activation::Identity };
        Self { net: Mlp::new("discriminator", &[latent_dim, hidden, 1], act, rng), latent_dim }
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.net.params_mut()
    }

    pub fn layers(&self) -> usize {
        self.net.layers()
    }

    pub fn forward(&self, g: &mut Graph<T>, z: Var, mode: Bind) -> Result<Var> {
        check_width(g, z, self.latent_dim, "discriminator input")?;
        Ok(self.net.forward(g, z, mode))
    }
}
