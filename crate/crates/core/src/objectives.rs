//! The self-predictive loss surface and its alternating update.
//!
//! * encoder-adversarial term: `softplus(−(D(z_s) − D(z_w)))`, D frozen;
//! * discriminator term: `softplus(−(D(z_w) − D(z_s)))`, latents detached;
//! * inverse term: MSE of the cross-paired inferred actions
//!   `ã = I(z_w_t, z_s_t1)` and `ā = I(z_s_t, z_w_t1)`;
//! * forward term: negative cosine between `F(z_s_t, ã)` / `F(z_w_t, ā)`
//!   and the next strong / weak latents;
//! * total: `λψ·(inverse + forward) + λA·adversarial`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use spd_autograd::{Adam, AdamConfig, Graph, ParamSet, Real, Tensor, Var};

use crate::imageops::{augment_strong, augment_weak, AugmentationSpec, ImageBatch, StrongAugmentation};
use crate::nets::{Bind, Discriminator, Encoder, ForwardModel, HeadDepth, InverseModel};
use crate::{Result, SpdError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpdWeights {
    pub lambda_psi: f64,
    pub lambda_adv: f64,
}

impl Default for SpdWeights {
    fn default() -> Self {
        Self { lambda_psi: 0.1, lambda_adv: 0.001 }
    }
}

/// Which self-predictive terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    Full,
    DiscriminatorOnly,
    DiscriminatorInverse,
    DynamicsOnly,
    /// No self-predictive training at all (plain agent).
    None,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] =
        [Self::Full, Self::DiscriminatorOnly, Self::DiscriminatorInverse, Self::DynamicsOnly, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::DiscriminatorOnly => "discriminator_only",
            Self::DiscriminatorInverse => "discriminator_inverse",
            Self::DynamicsOnly => "dynamics_only",
            Self::None => "none",
        }
    }

    pub fn uses_discriminator(self) -> bool {
        matches!(self, Self::Full | Self::DiscriminatorOnly | Self::DiscriminatorInverse)
    }

    pub fn uses_inverse(self) -> bool {
        matches!(self, Self::Full | Self::DiscriminatorInverse | Self::DynamicsOnly)
    }

    pub fn uses_forward(self) -> bool {
        matches!(self, Self::Full | Self::DynamicsOnly)
    }

    pub fn is_active(self) -> bool {
        self != Self::None
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = SpdError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SpdError::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpdOptions {
    pub weights: SpdWeights,
    pub ablation: AblationMode,
    pub detach_forward_targets: bool,
    pub detach_inferred_actions: bool,
    pub cosine_eps: f64,
}

impl Default for SpdOptions {
    fn default() -> Self {
        Self {
            weights: SpdWeights::default(),
            ablation: AblationMode::Full,
            detach_forward_targets: true,
            detach_inferred_actions: false,
            cosine_eps: 1e-8,
        }
    }
}

// ---------------------------------------------------------------- loss builders

/// `−log σ(x) = softplus(−x)`, batch-averaged, for score gap `x = hi − lo`.
fn relativistic<T: Real>(g: &mut Graph<T>, hi: Var, lo: Var) -> Var {
    let gap = g.sub(lo, hi);
    let sp = g.softplus(gap);
    g.mean(sp)
}

/// Encoder-side adversarial loss with the discriminator frozen.
pub fn encoder_adv_loss<T: Real>(g: &mut Graph<T>, d: &Discriminator<T>, z_w: Var, z_s: Var) -> Result<Var> {
    let sw = d.forward(g, z_w, Bind::Frozen)?;
    let ss = d.forward(g, z_s, Bind::Frozen)?;
    Ok(relativistic(g, ss, sw))
}

/// Discriminator loss on detached latents; only D receives gradient.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, d: &Discriminator<T>, z_w: Var, z_s: Var) -> Result<Var> {
    let (zw, zs) = (g.detach(z_w), g.detach(z_s));
    let sw = d.forward(g, zw, Bind::Train)?;
    let ss = d.forward(g, zs, Bind::Train)?;
    Ok(relativistic(g, sw, ss))
}

/// Weak and strong latents of `s_t` and `s_{t+1}`.
#[derive(Clone, Copy, Debug)]
pub struct SpdLatents {
    pub z_w_t: Var,
    pub z_s_t: Var,
    pub z_w_t1: Var,
    pub z_s_t1: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct InverseTerms {
    pub loss: Var,
    /// `I(z_w_t, z_s_t1)`.
    pub a_tilde: Var,
    /// `I(z_s_t, z_w_t1)`.
    pub a_bar: Var,
}

pub fn inverse_loss<T: Real>(
    g: &mut Graph<T>,
    inverse: &InverseModel<T>,
    lat: &SpdLatents,
    actions: Var,
    mode: Bind,
) -> Result<InverseTerms> {
    let a_tilde = inverse.forward(g, lat.z_w_t, lat.z_s_t1, mode)?;
    let a_bar = inverse.forward(g, lat.z_s_t, lat.z_w_t1, mode)?;
    if g.shape(a_tilde) != g.shape(actions) {
        return Err(SpdError::Shape(format!("actions {:?} vs inferred {:?}", g.shape(actions), g.shape(a_tilde))));
    }
    let e1 = g.sub(a_tilde, actions);
    let e1 = g.square(e1);
    let e2 = g.sub(a_bar, actions);
    let e2 = g.square(e2);
    let both = g.add(e1, e2);
    let m = g.mean(both);
    let loss = g.scale(m, 0.5);
    Ok(InverseTerms { loss, a_tilde, a_bar })
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardTerms {
    pub loss: Var,
    /// `F(z_s_t, ã)`, compared with `z_s_t1`.
    pub z_tilde: Var,
    /// `F(z_w_t, ā)`, compared with `z_w_t1`.
    pub z_bar: Var,
}

pub fn forward_loss<T: Real>(
    g: &mut Graph<T>,
    forward: &ForwardModel<T>,
    lat: &SpdLatents,
    a_tilde: Var,
    a_bar: Var,
    opts: &SpdOptions,
    mode: Bind,
) -> Result<ForwardTerms> {
    let (a_tilde, a_bar) =
        if opts.detach_inferred_actions { (g.detach(a_tilde), g.detach(a_bar)) } else { (a_tilde, a_bar) };
    let z_tilde = forward.forward(g, lat.z_s_t, a_tilde, mode)?;
    let z_bar = forward.forward(g, lat.z_w_t, a_bar, mode)?;
    let (t_s, t_w) = if opts.detach_forward_targets {
        (g.detach(lat.z_s_t1), g.detach(lat.z_w_t1))
    } else {
        (lat.z_s_t1, lat.z_w_t1)
    };
    let c1 = g.cosine_rows(z_tilde, t_s, opts.cosine_eps);
    let c2 = g.cosine_rows(z_bar, t_w, opts.cosine_eps);
    let both = g.add(c1, c2);
    let m = g.mean(both);
    let loss = g.scale(m, -0.5);
    Ok(ForwardTerms { loss, z_tilde, z_bar })
}

/// `λψ·(inverse + forward) + λA·adversarial`.
pub fn spd_total(weights: SpdWeights, j_inverse: f64, j_forward: f64, j_encoder_adv: f64) -> f64 {
    weights.lambda_psi * (j_inverse + j_forward) + weights.lambda_adv * j_encoder_adv
}

// ---------------------------------------------------------------- report

/// Values of every term for one update. Terms an ablation drops are `None`
/// and count as zero in the sums.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdLossReport {
    pub j_encoder_adv: Option<f64>,
    pub j_discriminator: Option<f64>,
    pub j_inverse: Option<f64>,
    pub j_forward: Option<f64>,
    pub j_dynamics: f64,
    pub j_total: f64,
    pub a_tilde: Option<Tensor<f32>>,
    pub a_bar: Option<Tensor<f32>>,
    pub z_tilde: Option<Tensor<f32>>,
    pub z_bar: Option<Tensor<f32>>,
}

impl SpdLossReport {
    fn assemble(weights: SpdWeights, adv: Option<f64>, disc: Option<f64>, inv: Option<f64>, fwd: Option<f64>) -> Self {
        let j_dynamics = inv.unwrap_or(0.0) + fwd.unwrap_or(0.0);
        Self {
            j_encoder_adv: adv,
            j_discriminator: disc,
            j_inverse: inv,
            j_forward: fwd,
            j_dynamics,
            j_total: weights.lambda_psi * j_dynamics + weights.lambda_adv * adv.unwrap_or(0.0),
            a_tilde: None,
            a_bar: None,
            z_tilde: None,
            z_bar: None,
        }
    }
}

// ---------------------------------------------------------------- learner

/// Inverse, forward and discriminator heads with their optimizers, plus the
/// optimizer that applies self-predictive gradients to the encoder.
#[derive(Clone, Debug)]
pub struct SpdLearner<T: Real = f32> {
    pub inverse: InverseModel<T>,
    pub forward: ForwardModel<T>,
    pub discriminator: Discriminator<T>,
    pub inverse_opt: Adam<T>,
    pub forward_opt: Adam<T>,
    pub discriminator_opt: Adam<T>,
    pub encoder_opt: Adam<T>,
    pub options: SpdOptions,
}

/// Shapes and rates for [`SpdLearner::new`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpdHeadConfig {
    pub latent_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub depth: HeadDepth,
    pub discriminator_tanh: bool,
    pub dynamics_lr: f64,
    pub discriminator_lr: f64,
    pub encoder_lr: f64,
}

impl<T: Real> SpdLearner<T> {
    pub fn new<R: Rng + ?Sized>(cfg: SpdHeadConfig, options: SpdOptions, encoder: &ParamSet<T>, rng: &mut R) -> Self {
        let inverse = InverseModel::new(cfg.latent_dim, cfg.hidden, cfg.action_dim, cfg.depth, rng);
        let forward = ForwardModel::new(cfg.latent_dim, cfg.hidden, cfg.action_dim, cfg.depth, rng);
        let discriminator = Discriminator::new(cfg.latent_dim, cfg.hidden, cfg.discriminator_tanh, rng);
        Self {
            inverse_opt: Adam::new(inverse.params(), AdamConfig::with_lr(cfg.dynamics_lr)),
            forward_opt: Adam::new(forward.params(), AdamConfig::with_lr(cfg.dynamics_lr)),
            discriminator_opt: Adam::new(discriminator.params(), AdamConfig::with_lr(cfg.discriminator_lr)),
            encoder_opt: Adam::new(encoder, AdamConfig::with_lr(cfg.encoder_lr)),
            inverse,
            forward,
            discriminator,
            options,
        }
    }

    /// One alternating update on latents already present in `g`: a
    /// discriminator step on detached latents, then one joint step on the
    /// encoder and dynamics heads with the (updated) discriminator frozen.
    pub fn update_in_graph(
        &mut self,
        g: &mut Graph<T>,
        encoder: &mut ParamSet<T>,
        lat: &SpdLatents,
        actions: Var,
    ) -> Result<SpdLossReport> {
        let opts = self.options;
        let mode = opts.ablation;
        if !mode.is_active() {
            return Ok(SpdLossReport::assemble(opts.weights, None, None, None, None));
        }
        if g.shape(lat.z_w_t)[0] == 0 {
            return Err(SpdError::InvalidArgument("empty minibatch".into()));
        }

        let mut j_disc = None;
        if mode.uses_discriminator() {
            let loss = discriminator_loss(g, &self.discriminator, lat.z_w_t, lat.z_s_t)?;
            let grads = g.backward(loss);
            self.discriminator_opt.apply(self.discriminator.params_mut(), &grads);
            j_disc = Some(g.value(loss).item().to_f64().unwrap());
        }

        let w = opts.weights;
        let mut terms: Vec<Var> = Vec::new();
        let mut adv = None;
        if mode.uses_discriminator() {
            let loss = encoder_adv_loss(g, &self.discriminator, lat.z_w_t, lat.z_s_t)?;
            adv = Some(loss);
            terms.push(g.scale(loss, w.lambda_adv));
        }
        let mut inv = None;
        let mut fwd = None;
        if mode.uses_inverse() {
            let it = inverse_loss(g, &self.inverse, lat, actions, Bind::Train)?;
            inv = Some(it);
            terms.push(g.scale(it.loss, w.lambda_psi));
            if mode.uses_forward() {
                let ft = forward_loss(g, &self.forward, lat, it.a_tilde, it.a_bar, &opts, Bind::Train)?;
                fwd = Some(ft);
                terms.push(g.scale(ft.loss, w.lambda_psi));
            }
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }
        let grads = g.backward(total);
        self.encoder_opt.apply(encoder, &grads);
        if inv.is_some() {
            self.inverse_opt.apply(self.inverse.params_mut(), &grads);
        }
        if fwd.is_some() {
            self.forward_opt.apply(self.forward.params_mut(), &grads);
        }

        let val = |g: &Graph<T>, v: Var| g.value(v).item().to_f64().unwrap();
        let mut report = SpdLossReport::assemble(
            w,
            adv.map(|v| val(g, v)),
            j_disc,
            inv.map(|t| val(g, t.loss)),
            fwd.map(|t| val(g, t.loss)),
        );
        if let Some(t) = inv {
            report.a_tilde = Some(g.value(t.a_tilde).cast());
            report.a_bar = Some(g.value(t.a_bar).cast());
        }
        if let Some(t) = fwd {
            report.z_tilde = Some(g.value(t.z_tilde).cast());
            report.z_bar = Some(g.value(t.z_bar).cast());
        }
        Ok(report)
    }
}

/// Weak and strong views of `obs` and `next_obs`, encoded into `g` with the
/// encoder trainable. Weak and strong branches use separate generators so
/// their shift offsets are independent.
pub fn encode_views<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    encoder: &Encoder<T>,
    obs: &ImageBatch,
    next_obs: &ImageBatch,
    spec: &AugmentationSpec,
    weak_rng: &mut R,
    strong_rng: &mut R,
) -> Result<(SpdLatents, [StrongAugmentation; 2])> {
    let encode = |g: &mut Graph<T>, b: ImageBatch| {
        let x = g.input(b.into_tensor().cast());
        encoder.forward(g, x, Bind::Train)
    };
    let z_w_t = encode(g, augment_weak(obs, spec, weak_rng)?)?;
    let (s, c0) = augment_strong(obs, spec, strong_rng)?;
    let z_s_t = encode(g, s)?;
    let z_w_t1 = encode(g, augment_weak(next_obs, spec, weak_rng)?)?;
    let (s, c1) = augment_strong(next_obs, spec, strong_rng)?;
    let z_s_t1 = encode(g, s)?;
    Ok((SpdLatents { z_w_t, z_s_t, z_w_t1, z_s_t1 }, [c0, c1]))
}

/// A complete self-predictive update on one minibatch `(S, A, S')` in its
/// own graph: augment, encode, then [`SpdLearner::update_in_graph`].
#[allow(clippy::too_many_arguments)]
pub fn spd_update_step<R: Rng + ?Sized>(
    learner: &mut SpdLearner<f32>,
    encoder: &mut Encoder<f32>,
    obs: &ImageBatch,
    actions: &Tensor<f32>,
    next_obs: &ImageBatch,
    spec: &AugmentationSpec,
    weak_rng: &mut R,
    strong_rng: &mut R,
) -> Result<SpdLossReport> {
    if obs.batch() == 0 {
        return Err(SpdError::InvalidArgument("empty minibatch".into()));
    }
    if obs.shape() != next_obs.shape() || actions.dim(0) != obs.batch() {
        return Err(SpdError::Shape("observation, next observation and action batches disagree".into()));
    }
    let mut g = Graph::new();
    let (lat, _) = encode_views(&mut g, encoder, obs, next_obs, spec, weak_rng, strong_rng)?;
    let a = g.input(actions.clone());
    learner.update_in_graph(&mut g, encoder.params_mut(), &lat, a)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    #[test]
    fn report_identities() {
        let w = SpdWeights::default();
        let r = SpdLossReport::assemble(w, Some(0.5), Some(0.7), Some(0.02), Some(-1.0));
        assert!((r.j_dynamics - -0.98).abs() < 1e-15);
        // -0.098 + 0.0005
        assert!((r.j_total - -0.0975).abs() < 1e-15);
        assert_eq!(r.j_total, spd_total(w, 0.02, -1.0, 0.5));
        let zero = SpdWeights { lambda_psi: 0.0, lambda_adv: 0.0 };
        assert_eq!(spd_total(zero, 3.0, -0.4, 9.0), 0.0);
    }

    #[test]
    fn softplus_reference_values() {
        assert!((softplus(-10.0) - 4.5398899216870535e-5).abs() < 1e-15);
        assert!((softplus(10.0) - 10.000045398899218).abs() < 1e-12);
    }

    #[test]
    fn inverse_hand_arithmetic() {
        // Identity-like inverse model is not needed: feed inferred actions directly.
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(Tensor::scalar(0.5).reshape(&[1, 1]).unwrap());
        let t = g.input(Tensor::scalar(0.7).reshape(&[1, 1]).unwrap());
        let b = g.input(Tensor::scalar(0.5).reshape(&[1, 1]).unwrap());
        let e1 = g.sub(t, a);
        let e1 = g.square(e1);
        let e2 = g.sub(b, a);
        let e2 = g.square(e2);
        let s = g.add(e1, e2);
        let m = g.mean(s);
        let l = g.scale(m, 0.5);
        assert!((g.value(l).item() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn ablation_flags() {
        use AblationMode::*;
        assert!(Full.uses_discriminator() && Full.uses_inverse() && Full.uses_forward());
        assert!(DiscriminatorOnly.uses_discriminator() && !DiscriminatorOnly.uses_inverse());
        assert!(DiscriminatorInverse.uses_inverse() && !DiscriminatorInverse.uses_forward());
        assert!(!DynamicsOnly.uses_discriminator() && DynamicsOnly.uses_forward());
        assert!(!None.is_active());
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
    }

    #[test]
    fn discriminator_step_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d: Discriminator<f64> = Discriminator::new(8, 32, false, &mut rng);
        let mut d = d;
        let zw = Tensor::from_fn(&[16, 8], |_| rng.random_range(-1.0..1.0));
        let zs = Tensor::from_fn(&[16, 8], |_| rng.random_range(-1.0..1.0));
        let eval = |d: &Discriminator<f64>| {
            let mut g = Graph::new();
            let (a, b) = (g.input(zw.clone()), g.input(zs.clone()));
            let l = discriminator_loss(&mut g, d, a, b).unwrap();
            let grads = g.backward(l);
            (g.value(l).item(), grads.for_set(d.params()))
        };
        let (before, grads) = eval(&d);
        let mut opt = Adam::new(d.params(), AdamConfig::with_lr(1e-3));
        opt.step(d.params_mut(), &grads);
        let (after, _) = eval(&d);
        assert!(after < before, "{after} !< {before}");
    }
}
