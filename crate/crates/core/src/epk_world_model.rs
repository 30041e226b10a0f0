//! Action-conditioned latent diffusion world model with an ODE-derived
//! energy anchor.
//!
//! The anchor chain decodes the current latent, estimates the cardiac phase
//! at the end of the window, modulates the baseline ODE parameters by the
//! action and integrates one cycle forward. A learnable projection maps that
//! trajectory into latent space, where it regularizes the denoiser's clean
//! prediction during training.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{action_features, modulate, Action, ActionError, DrugRegistry};
use crate::diffusion_engine::{ancestral_sample, build_schedule, forward_sample, DiffusionError, NoiseSchedule, ScheduleKind};
use crate::ecg_ode::{integrate_rk4, OdeError, OdeParams, PhaseWindow};
use crate::io::{self, FormatError};
use crate::latent_codec::{resample_linear, Codec, CodecError, LatentState};
use crate::nn::{cosine_lr, timestep_embedding, Activation, AdamW, Mlp};
use crate::signal_metrics::{phase_anchor_cyclic, MetricsError, PatientProfile};

pub const WM_MAGIC: &[u8] = b"CWMWM1";
pub const TRANSITIONS_MAGIC: &[u8] = b"CWMTRANS1";

#[derive(Debug, Error)]
pub enum EpkError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("empty transition dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}, max |z0_hat| {max_abs}")]
    Diverged { epoch: usize, batch: usize, loss: f64, max_abs: f64 },
}

/// Settings of the anchor chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpkConfig {
    pub theta_base: OdeParams,
    /// Channel used for phase estimation and the initial ODE value.
    pub channel: usize,
    /// Ratio between that channel and the raw ODE signal.
    pub lead_gain: f64,
    /// Trajectory length `L`.
    pub steps: usize,
    /// Substitute phase 0 when no beat is detected instead of failing.
    pub fallback: bool,
}

impl EpkConfig {
    pub fn healthy(steps: usize) -> Self {
        EpkConfig { theta_base: OdeParams::healthy(), channel: 0, lead_gain: 1.0, steps, fallback: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpkAnchor {
    pub e_epk: Vec<f64>,
    pub theta_start: f64,
    pub y_init: f64,
    pub fallback_used: bool,
}

/// One cycle of the modulated ODE continuing from the end of the decoded window.
///
/// The phase window holds `L + 1` points spaced `2π/L` apart starting at the
/// anchored phase; the first point is the current sample and is dropped.
pub fn build_epk(z_k: &[f64], action: &Action, codec: &Codec, registry: &DrugRegistry, cfg: &EpkConfig) -> Result<EpkAnchor, EpkError> {
    let x = codec.decode(z_k)?;
    let (theta_start, fallback_used) = match phase_anchor_cyclic(&x, cfg.channel) {
        Ok(t) => (t, false),
        Err(MetricsError::NoBeatsDetected | MetricsError::InsufficientBeats { .. }) if cfg.fallback => (0.0, true),
        Err(e) => return Err(e.into()),
    };
    let y_init = x.channel(cfg.channel)[x.len() - 1] / cfg.lead_gain;
    let e_epk = integrate_cycle(&cfg.theta_base, action, registry, theta_start, y_init, cfg.steps)?;
    Ok(EpkAnchor { e_epk, theta_start, y_init, fallback_used })
}

/// Modulates `theta` by `action` and integrates `steps` samples past `theta_start`.
pub fn integrate_cycle(
    theta: &OdeParams,
    action: &Action,
    registry: &DrugRegistry,
    theta_start: f64,
    y_init: f64,
    steps: usize,
) -> Result<Vec<f64>, EpkError> {
    let params = modulate(theta, action, registry)?;
    let window = PhaseWindow::new(theta_start, TAU, steps + 1)?;
    let mut traj = integrate_rk4(&params, y_init, &window)?;
    traj.remove(0);
    Ok(traj)
}

/// Learnable map `Π_φ`: resampling of the trajectory to a fixed length, then an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    input_len: usize,
    resample_len: usize,
    mlp: Mlp,
}

impl Projection {
    pub fn new<R: Rng>(input_len: usize, resample_len: usize, hidden: Option<usize>, d: usize, rng: &mut R) -> Self {
        let sizes: Vec<usize> = match hidden {
            Some(h) => vec![resample_len, h, d],
            None => vec![resample_len, d],
        };
        Projection { input_len, resample_len, mlp: Mlp::new(&sizes, Activation::Tanh, rng) }
    }

    pub fn from_mlp(input_len: usize, mlp: Mlp) -> Self {
        Projection { input_len, resample_len: mlp.input_dim(), mlp }
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn resample_len(&self) -> usize {
        self.resample_len
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn resample(&self, e: &[f64]) -> Vec<f64> {
        resample_linear(e, self.resample_len)
    }
}

pub fn project_epk(e_epk: &[f64], proj: &Projection) -> Result<LatentState, EpkError> {
    if e_epk.len() != proj.input_len {
        return Err(EpkError::Length { expected: proj.input_len, got: e_epk.len() });
    }
    Ok(proj.mlp.forward(&proj.resample(e_epk)))
}

/// `‖ẑ0 − z_epk‖²`.
pub fn epk_energy(z0_hat: &[f64], z_epk: &[f64]) -> f64 {
    z0_hat.iter().zip(z_epk).map(|(a, b)| (a - b).powi(2)).sum()
}

/// `ω_τ = 1 / ((1 − ᾱ_τ) + ε)`.
pub fn time_weight(tau: usize, schedule: &NoiseSchedule, eps_stab: f64) -> Result<f64, EpkError> {
    if tau == 0 || tau > schedule.steps() {
        return Err(DiffusionError::StepOutOfRange { tau, lo: 1, hi: schedule.steps() }.into());
    }
    Ok(1.0 / (schedule.one_minus_alpha_bar(tau) + eps_stab))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldModelConfig {
    pub latent_dim: usize,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub time_embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub proj_len: usize,
    pub proj_hidden: Option<usize>,
    /// Energy weight `c`.
    pub c: f64,
    pub eps_stab: f64,
    pub omega_max: f64,
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        WorldModelConfig {
            latent_dim: 16,
            schedule: ScheduleKind::Linear,
            diffusion_steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
            time_embed_dim: 16,
            hidden: vec![128, 128],
            activation: Activation::Silu,
            proj_len: 128,
            proj_hidden: Some(64),
            c: 0.25,
            eps_stab: 1e-5,
            omega_max: 1e3,
            learning_rate: 5e-4,
            lr_floor: 1e-5,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 60,
            seed: 0,
        }
    }
}

impl WorldModelConfig {
    pub fn validate(&self) -> Result<(), EpkError> {
        let bad = |m: &str| Err(EpkError::Config(m.to_string()));
        if !(self.c >= 0.0) {
            return bad("c must be non-negative");
        }
        if !(self.eps_stab > 0.0) {
            return bad("eps_stab must be positive");
        }
        if !(self.omega_max > 0.0) {
            return bad("omega_max must be positive");
        }
        if self.latent_dim == 0 || self.batch_size == 0 || self.proj_len < 2 {
            return bad("latent_dim, batch_size must be positive and proj_len >= 2");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule, EpkError> {
        Ok(build_schedule(self.schedule, self.diffusion_steps, self.beta_min, self.beta_max)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean `‖z_{k+1} − ẑ0‖²`.
    pub data: f64,
    /// Mean `c·ω_τ·‖ẑ0 − z_epk‖²`.
    pub energy: f64,
    pub total: f64,
    pub lr: f64,
    /// Fraction of draws whose `ω_τ` hit the clamp.
    pub clamped_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub anchor_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub registry: DrugRegistry,
    pub schedule: NoiseSchedule,
    pub denoiser: Mlp,
    pub projection: Projection,
    pub log: TrainLog,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WmHeader {
    config: WorldModelConfig,
    registry: DrugRegistry,
    epk_len: usize,
    denoiser_sizes: Vec<usize>,
    projection_sizes: Vec<usize>,
    d: usize,
    n: usize,
    schedule_kind: ScheduleKind,
    c: f64,
    seed: u64,
    epoch: usize,
    log: TrainLog,
}

/// Per-sample diffusion draw `(τ, ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub tau: usize,
    pub eps: Vec<f64>,
}

/// A transition with everything the loss needs precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub cond: Vec<f64>,
    pub z_next: Vec<f64>,
    /// Anchor trajectory after resampling to the projection length.
    pub epk: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: f64,
    pub data: f64,
    pub energy: f64,
    pub clamped: usize,
    pub max_abs_pred: f64,
    pub grad_denoiser: Vec<f64>,
    pub grad_projection: Vec<f64>,
}

impl WorldModel {
    pub fn init(config: &WorldModelConfig, registry: &DrugRegistry, epk_len: usize) -> Result<Self, EpkError> {
        config.validate()?;
        let schedule = config.build_schedule()?;
        let d = config.latent_dim;
        let cond_dim = d + 2 * registry.len() + PatientProfile::FEATURE_LEN;
        let mut sizes = vec![d + config.time_embed_dim + cond_dim];
        sizes.extend(&config.hidden);
        sizes.push(d);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let denoiser = Mlp::new(&sizes, config.activation, &mut rng);
        let mut prng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let projection = Projection::new(epk_len, config.proj_len, config.proj_hidden, d, &mut prng);
        Ok(WorldModel { config: config.clone(), registry: registry.clone(), schedule, denoiser, projection, log: TrainLog::default() })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// `ẑ_k ⊕ action features ⊕ profile features`.
    pub fn conditioning(&self, z_k: &[f64], action: &Action, profile: &PatientProfile) -> Result<Vec<f64>, EpkError> {
        if z_k.len() != self.latent_dim() {
            return Err(EpkError::Length { expected: self.latent_dim(), got: z_k.len() });
        }
        let mut c = z_k.to_vec();
        c.extend(action_features(action, &self.registry)?);
        c.extend(profile.features());
        Ok(c)
    }

    fn denoiser_input(&self, z_tau: &[f64], tau: usize, cond: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.denoiser.input_dim());
        x.extend_from_slice(z_tau);
        x.extend(timestep_embedding(tau, self.config.time_embed_dim));
        x.extend_from_slice(cond);
        x
    }

    pub fn predict_z0(&self, z_tau: &[f64], tau: usize, cond: &[f64]) -> Vec<f64> {
        self.denoiser.forward(&self.denoiser_input(z_tau, tau, cond))
    }

    /// Clamped `ω_τ` and whether the clamp was active.
    pub fn omega(&self, tau: usize) -> (f64, bool) {
        let w = 1.0 / (self.schedule.one_minus_alpha_bar(tau) + self.config.eps_stab);
        if w > self.config.omega_max {
            (self.config.omega_max, true)
        } else {
            (w, false)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.denoiser.is_finite() && self.projection.mlp.is_finite()
    }

    pub fn prepare(
        &self,
        record: &Transition,
        profile: &PatientProfile,
        codec: &Codec,
        epk_cfg: &EpkConfig,
    ) -> Result<(PreparedSample, bool), EpkError> {
        let anchor = build_epk(&record.z_k, &record.action, codec, &self.registry, epk_cfg)?;
        if anchor.e_epk.len() != self.projection.input_len {
            return Err(EpkError::Length { expected: self.projection.input_len, got: anchor.e_epk.len() });
        }
        Ok((
            PreparedSample {
                cond: self.conditioning(&record.z_k, &record.action, profile)?,
                z_next: record.z_next.clone(),
                epk: self.projection.resample(&anchor.e_epk),
            },
            anchor.fallback_used,
        ))
    }

    /// Projected anchor `z_epk` for a state and action.
    pub fn epk_latent(&self, z_k: &[f64], action: &Action, codec: &Codec, epk_cfg: &EpkConfig) -> Result<(EpkAnchor, LatentState), EpkError> {
        let anchor = build_epk(z_k, action, codec, &self.registry, epk_cfg)?;
        let z = project_epk(&anchor.e_epk, &self.projection)?;
        Ok((anchor, z))
    }

    pub fn save(&self, path: &Path) -> Result<(), EpkError> {
        let mut weights = self.denoiser.params().to_vec();
        weights.extend_from_slice(self.projection.mlp.params());
        io::write_checkpoint(path, WM_MAGIC, &self.header(), &weights)?;
        Ok(())
    }

    fn header(&self) -> WmHeader {
        WmHeader {
            config: self.config.clone(),
            registry: self.registry.clone(),
            epk_len: self.projection.input_len,
            denoiser_sizes: self.denoiser.sizes().to_vec(),
            projection_sizes: self.projection.mlp.sizes().to_vec(),
            d: self.config.latent_dim,
            n: self.schedule.steps(),
            schedule_kind: self.schedule.kind,
            c: self.config.c,
            seed: self.config.seed,
            epoch: self.log.epochs.len(),
            log: self.log.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, EpkError> {
        let (h, w): (WmHeader, Vec<f64>) = io::read_checkpoint(path, WM_MAGIC)?;
        h.config.validate()?;
        h.registry.validate()?;
        let nd = Mlp::count(&h.denoiser_sizes);
        if w.len() != nd + Mlp::count(&h.projection_sizes) {
            return Err(FormatError::Invalid("world-model weight count does not match architecture".into()).into());
        }
        let denoiser = Mlp::from_params(&h.denoiser_sizes, h.config.activation, w[..nd].to_vec())
            .ok_or_else(|| FormatError::Invalid("denoiser shape".into()))?;
        let pmlp = Mlp::from_params(&h.projection_sizes, Activation::Tanh, w[nd..].to_vec())
            .ok_or_else(|| FormatError::Invalid("projection shape".into()))?;
        Ok(WorldModel {
            schedule: h.config.build_schedule()?,
            config: h.config,
            registry: h.registry,
            denoiser,
            projection: Projection::from_mlp(h.epk_len, pmlp),
            log: h.log,
        })
    }
}

/// Batch mean of `‖z_{k+1} − ẑ0‖² + c·ω_τ·‖ẑ0 − Π_φ(e_epk)‖²` with analytic gradients.
pub fn loss_joint(model: &WorldModel, batch: &[&PreparedSample], draws: &[Draw]) -> Result<JointLoss, EpkError> {
    let d = model.latent_dim();
    let b = batch.len() as f64;
    let c = model.config.c;
    let mut gd = vec![0.0; model.denoiser.params().len()];
    let mut gp = vec![0.0; model.projection.mlp.params().len()];
    let (mut data, mut energy, mut clamped, mut max_abs) = (0.0, 0.0, 0, 0.0f64);
    for (s, draw) in batch.iter().zip(draws) {
        let z_tau = forward_sample(&s.z_next, draw.tau, &draw.eps, &model.schedule)?;
        let dc = model.denoiser.forward_cached(&model.denoiser_input(&z_tau, draw.tau, &s.cond));
        let z0 = dc.output();
        max_abs = z0.iter().fold(max_abs, |m, v| m.max(v.abs()));
        let mut g0 = vec![0.0; d];
        for j in 0..d {
            let r = z0[j] - s.z_next[j];
            data += r * r / b;
            g0[j] = 2.0 * r / b;
        }
        if c > 0.0 {
            let (w, was_clamped) = model.omega(draw.tau);
            clamped += was_clamped as usize;
            let pc = model.projection.mlp.forward_cached(&s.epk);
            let ze = pc.output();
            let mut ge = vec![0.0; d];
            let mut e = 0.0;
            for j in 0..d {
                let r = z0[j] - ze[j];
                e += r * r;
                g0[j] += 2.0 * c * w * r / b;
                ge[j] = -2.0 * c * w * r / b;
            }
            energy += c * w * e / b;
            model.projection.mlp.backward(&pc, &ge, &mut gp);
        }
        model.denoiser.backward(&dc, &g0, &mut gd);
    }
    Ok(JointLoss { total: data + energy, data, energy, clamped, max_abs_pred: max_abs, grad_denoiser: gd, grad_projection: gp })
}

pub fn draw_noise<R: Rng>(rng: &mut R, n_steps: usize, d: usize) -> Draw {
    let tau = rng.random_range(1..=n_steps);
    let eps = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    Draw { tau, eps }
}

/// A recorded environment transition `(z_k, a_k, z_{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub z_k: LatentState,
    pub action: Action,
    pub z_next: LatentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub latent_dim: usize,
    pub profile: PatientProfile,
    pub records: Vec<Transition>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransitionHeader {
    latent_dim: usize,
    profile: PatientProfile,
    actions: Vec<Action>,
    count: usize,
}

impl TransitionDataset {
    /// Header lists the distinct actions; each record is
    /// `z_k (d) ⊕ z_{k+1} (d) ⊕ action index ⊕ dose` as packed `f32`.
    pub fn save(&self, path: &Path) -> Result<(), EpkError> {
        let mut actions: Vec<Action> = Vec::new();
        let mut values = Vec::with_capacity(self.records.len() * (2 * self.latent_dim + 2));
        for r in &self.records {
            let idx = match actions.iter().position(|a| a == &r.action) {
                Some(i) => i,
                None => {
                    actions.push(r.action.clone());
                    actions.len() - 1
                }
            };
            values.extend(r.z_k.iter().map(|&v| v as f32));
            values.extend(r.z_next.iter().map(|&v| v as f32));
            values.push(idx as f32);
            values.push(r.action.dose as f32);
        }
        let header = TransitionHeader { latent_dim: self.latent_dim, profile: self.profile.clone(), actions, count: self.records.len() };
        io::write_f32_records(path, TRANSITIONS_MAGIC, &header, &values)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EpkError> {
        let (h, values): (TransitionHeader, Vec<f32>) = io::read_f32_records(path, TRANSITIONS_MAGIC)?;
        let d = h.latent_dim;
        let stride = 2 * d + 2;
        if values.len() != h.count * stride {
            return Err(FormatError::Invalid("transition record count mismatch".into()).into());
        }
        let records = values
            .chunks_exact(stride)
            .map(|r| {
                let idx = r[2 * d] as usize;
                let action = h.actions.get(idx).cloned().ok_or_else(|| FormatError::Invalid(format!("action index {idx} out of range")))?;
                Ok(Transition {
                    z_k: r[..d].iter().map(|&v| v as f64).collect(),
                    z_next: r[d..2 * d].iter().map(|&v| v as f64).collect(),
                    action,
                })
            })
            .collect::<Result<Vec<_>, FormatError>>()?;
        Ok(TransitionDataset { latent_dim: d, profile: h.profile, records })
    }
}

/// Joint training of denoiser and projection with AdamW and cosine annealing.
pub fn train_world_model(
    dataset: &TransitionDataset,
    codec: &Codec,
    epk_cfg: &EpkConfig,
    registry: &DrugRegistry,
    config: &WorldModelConfig,
    checkpoint: Option<&Path>,
) -> Result<WorldModel, EpkError> {
    if dataset.records.is_empty() {
        return Err(EpkError::EmptyDataset);
    }
    if dataset.latent_dim != config.latent_dim {
        return Err(EpkError::Length { expected: config.latent_dim, got: dataset.latent_dim });
    }
    let mut model = WorldModel::init(config, registry, epk_cfg.steps)?;
    let mut prepared = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        let (p, fb) = model.prepare(r, &dataset.profile, codec, epk_cfg)?;
        model.log.anchor_fallbacks += fb as usize;
        prepared.push(p);
    }
    train_prepared(&mut model, &prepared, checkpoint)?;
    Ok(model)
}

/// Training loop over already prepared samples.
pub fn train_prepared(model: &mut WorldModel, prepared: &[PreparedSample], checkpoint: Option<&Path>) -> Result<(), EpkError> {
    let cfg = model.config.clone();
    let d = cfg.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1ff_0517);
    let mut opt_d = AdamW::new(model.denoiser.params().len(), cfg.weight_decay);
    let mut opt_p = AdamW::new(model.projection.mlp.params().len(), cfg.weight_decay);
    let per_epoch = prepared.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut rec = EpochRecord { epoch, data: 0.0, energy: 0.0, total: 0.0, lr: 0.0, clamped_fraction: 0.0 };
        let mut clamped = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            let draws: Vec<Draw> = (0..batch.len()).map(|_| draw_noise(&mut rng, model.schedule.steps(), d)).collect();
            let lj = loss_joint(model, &batch, &draws)?;
            if !lj.total.is_finite() {
                return Err(EpkError::Diverged { epoch, batch: bi, loss: lj.total, max_abs: lj.max_abs_pred });
            }
            let lr = cosine_lr(cfg.learning_rate, cfg.lr_floor, step, total);
            opt_d.step(model.denoiser.params_mut(), &lj.grad_denoiser, lr);
            if cfg.c > 0.0 {
                opt_p.step(model.projection.mlp.params_mut(), &lj.grad_projection, lr);
            }
            step += 1;
            let w = batch.len() as f64 / prepared.len() as f64;
            rec.data += lj.data * w;
            rec.energy += lj.energy * w;
            rec.total += lj.total * w;
            rec.lr = lr;
            clamped += lj.clamped;
        }
        rec.clamped_fraction = clamped as f64 / prepared.len() as f64;
        model.log.epochs.push(rec);
        if let Some(p) = checkpoint {
            model.save(p)?;
        }
    }
    if !model.is_finite() {
        return Err(EpkError::Diverged { epoch: cfg.epochs, batch: 0, loss: f64::NAN, max_abs: f64::NAN });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub samples: Vec<LatentState>,
    pub seeds: Vec<u64>,
    /// `(seed, message)` for samples that failed.
    pub failures: Vec<(u64, String)>,
}

impl Prediction {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Seed of the `i`-th of `K` samples drawn from `base_seed`.
pub fn sample_seed(base_seed: u64, i: usize) -> u64 {
    base_seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64)
}

/// `K` independent ancestral samples of `z_{k+1}` given `(ẑ_k, a)`.
pub fn predict_next(model: &WorldModel, z_k: &[f64], action: &Action, profile: &PatientProfile, k: usize, base_seed: u64) -> Result<Prediction, EpkError> {
    if k == 0 {
        return Err(EpkError::Config("K must be at least 1".into()));
    }
    let cond = model.conditioning(z_k, action, profile)?;
    let den = |z: &[f64], tau: usize| model.predict_z0(z, tau, &cond);
    let mut out = Prediction { samples: Vec::with_capacity(k), seeds: Vec::with_capacity(k), failures: Vec::new() };
    for i in 0..k {
        let seed = sample_seed(base_seed, i);
        match ancestral_sample(&den, model.latent_dim(), &model.schedule, seed) {
            Ok(z) => {
                out.samples.push(z);
                out.seeds.push(seed);
            }
            Err(e) => out.failures.push((seed, e.to_string())),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::max_relative_gradient_error;

    fn small_config(c: f64) -> WorldModelConfig {
        WorldModelConfig {
            latent_dim: 3,
            diffusion_steps: 10,
            beta_min: 1e-3,
            beta_max: 0.2,
            time_embed_dim: 4,
            hidden: vec![8],
            proj_len: 6,
            proj_hidden: Some(4),
            c,
            batch_size: 4,
            epochs: 2,
            ..WorldModelConfig::default()
        }
    }

    fn random_samples(model: &WorldModel, n: usize, seed: u64) -> Vec<PreparedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cd = model.denoiser.input_dim() - model.latent_dim() - model.config.time_embed_dim;
        (0..n)
            .map(|_| PreparedSample {
                cond: (0..cd).map(|_| rng.random_range(-1.0..1.0)).collect(),
                z_next: (0..model.latent_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                epk: (0..model.projection.resample_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn energy_values() {
        assert_eq!(epk_energy(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(epk_energy(&[1.0, 2.0], &[1.0, 1.0]), 1.0);
        let a = [0.3, -1.7, 2.2];
        let b = [1.1, 0.4, -0.5];
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let dot: f64 = diff.iter().map(|v| v * v).sum();
        assert!((epk_energy(&a, &b) - dot).abs() < 1e-12);
    }

    #[test]
    fn time_weight_values() {
        let s = NoiseSchedule::from_explicit_betas(vec![0.01]).unwrap();
        let w = time_weight(1, &s, 1e-5).unwrap();
        assert!((w - 1.0 / 0.01001).abs() < 1e-9);
        assert!(time_weight(0, &s, 1e-5).is_err());
        let s = build_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        assert!((time_weight(1000, &s, 1e-5).unwrap() - 1.0).abs() < 1e-3);
        let w: Vec<f64> = (1..=1000).map(|t| time_weight(t, &s, 1e-5).unwrap()).collect();
        assert!(w.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn projection_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Projection::new(20, 8, None, 4, &mut rng);
        assert_eq!(project_epk(&[0.0; 20], &p).unwrap().len(), 4);
        p.mlp_mut().layer_mut(0).1.iter_mut().for_each(|b| *b = 0.0);
        assert_eq!(project_epk(&[0.0; 20], &p).unwrap(), vec![0.0; 4]);
        let e: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin()).collect();
        let z1 = project_epk(&e, &p).unwrap();
        let e3: Vec<f64> = e.iter().map(|v| 3.0 * v).collect();
        let z3 = project_epk(&e3, &p).unwrap();
        for (a, b) in z1.iter().zip(&z3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        assert!(matches!(project_epk(&[0.0; 19], &p), Err(EpkError::Length { .. })));
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let reg = DrugRegistry::default_registry();
        let model = WorldModel::init(&small_config(0.25), &reg, 12).unwrap();
        let samples = random_samples(&model, 5, 1);
        let batch: Vec<&PreparedSample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draws: Vec<Draw> = (0..5).map(|_| draw_noise(&mut rng, 10, 3)).collect();
        draws[0].tau = 1;
        let lj = loss_joint(&model, &batch, &draws).unwrap();
        assert!(lj.energy > 0.0);

        let mut pd = model.denoiser.params().to_vec();
        let idx: Vec<usize> = (0..pd.len()).collect();
        let err = max_relative_gradient_error(&mut pd, &lj.grad_denoiser, &idx, 1e-5, 1e-9, |p| {
            let mut m = model.clone();
            m.denoiser.params_mut().copy_from_slice(p);
            loss_joint(&m, &batch, &draws).unwrap().total
        });
        assert!(err < 1e-4, "denoiser {err}");
        let mut pp = model.projection.mlp.params().to_vec();
        let idx: Vec<usize> = (0..pp.len()).collect();
        let err = max_relative_gradient_error(&mut pp, &lj.grad_projection, &idx, 1e-5, 1e-9, |p| {
            let mut m = model.clone();
            m.projection.mlp_mut().params_mut().copy_from_slice(p);
            loss_joint(&m, &batch, &draws).unwrap().total
        });
        assert!(err < 1e-4, "projection {err}");
    }

    #[test]
    fn zero_weight_drops_energy_term() {
        let reg = DrugRegistry::default_registry();
        let model = WorldModel::init(&small_config(0.0), &reg, 12).unwrap();
        let samples = random_samples(&model, 4, 5);
        let batch: Vec<&PreparedSample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws: Vec<Draw> = (0..4).map(|_| draw_noise(&mut rng, 10, 3)).collect();
        let lj = loss_joint(&model, &batch, &draws).unwrap();
        assert_eq!(lj.energy, 0.0);
        assert_eq!(lj.total, lj.data);
        assert!(lj.grad_projection.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn exact_prediction_gives_zero_loss() {
        let reg = DrugRegistry::default_registry();
        let mut model = WorldModel::init(&small_config(0.5), &reg, 12).unwrap();
        let target = vec![0.4, -0.2, 0.9];
        // Zero weights with output biases equal to the target in both networks.
        for m in [&mut model.denoiser, model.projection.mlp_mut()] {
            m.params_mut().iter_mut().for_each(|p| *p = 0.0);
            let last = m.num_layers() - 1;
            m.layer_mut(last).1.copy_from_slice(&target);
        }
        let s = PreparedSample { cond: vec![0.1; model.denoiser.input_dim() - 7], z_next: target.clone(), epk: vec![0.2; 6] };
        let draws = vec![Draw { tau: 3, eps: vec![0.5, -0.5, 1.0] }];
        let lj = loss_joint(&model, &[&s], &draws).unwrap();
        assert_eq!(lj.total, 0.0);
    }

    #[test]
    fn memorizes_single_transition_and_is_deterministic() {
        let reg = DrugRegistry::default_registry();
        let cfg = WorldModelConfig { epochs: 600, batch_size: 1, learning_rate: 1e-2, weight_decay: 0.0, hidden: vec![32], ..small_config(0.0) };
        let s = random_samples(&WorldModel::init(&cfg, &reg, 12).unwrap(), 1, 11);
        let mut a = WorldModel::init(&cfg, &reg, 12).unwrap();
        train_prepared(&mut a, &s, None).unwrap();
        let last = a.log.epochs.iter().rev().take(20).map(|e| e.total).sum::<f64>() / 20.0;
        assert!(last < 1e-3, "final loss {last}");
        let mut b = WorldModel::init(&cfg, &reg, 12).unwrap();
        train_prepared(&mut b, &s, None).unwrap();
        assert_eq!(a.denoiser.params(), b.denoiser.params());
    }

    #[test]
    fn zero_weight_run_ignores_projection() {
        let reg = DrugRegistry::default_registry();
        let cfg = small_config(0.0);
        let samples = random_samples(&WorldModel::init(&cfg, &reg, 12).unwrap(), 9, 4);
        let mut a = WorldModel::init(&cfg, &reg, 12).unwrap();
        train_prepared(&mut a, &samples, None).unwrap();
        let mut b = WorldModel::init(&WorldModelConfig { proj_hidden: None, ..cfg.clone() }, &reg, 12).unwrap();
        train_prepared(&mut b, &samples, None).unwrap();
        let traj = |m: &WorldModel| m.log.epochs.iter().map(|e| e.total).collect::<Vec<_>>();
        assert_eq!(traj(&a), traj(&b));
        assert!(a.log.epochs.iter().all(|e| e.total == e.data));
    }

    #[test]
    fn checkpoint_round_trip_and_prediction() {
        let reg = DrugRegistry::default_registry();
        let cfg = small_config(0.25);
        let samples = random_samples(&WorldModel::init(&cfg, &reg, 12).unwrap(), 6, 8);
        let mut m = WorldModel::init(&cfg, &reg, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wm.bin");
        train_prepared(&mut m, &samples, Some(&p)).unwrap();
        let back = WorldModel::load(&p).unwrap();
        assert_eq!(back, m);

        let prof = PatientProfile::default();
        let a = reg.single("placebo", 1.0).unwrap();
        let z = vec![0.1, 0.2, 0.3];
        let p1 = predict_next(&m, &z, &a, &prof, 1, 42).unwrap();
        assert_eq!(p1, predict_next(&m, &z, &a, &prof, 1, 42).unwrap());
        let p3 = predict_next(&m, &z, &a, &prof, 3, 42).unwrap();
        assert_eq!(p3.samples.len(), 3);
        assert_ne!(p3.samples[0], p3.samples[1]);
        assert_ne!(p3.samples[1], p3.samples[2]);
        assert!(predict_next(&m, &z, &a, &prof, 0, 42).is_err());
    }

    #[test]
    fn transition_file_round_trip() {
        let reg = DrugRegistry::default_registry();
        let ds = TransitionDataset {
            latent_dim: 2,
            profile: PatientProfile::default(),
            records: vec![
                Transition { z_k: vec![0.5, -1.0], action: reg.single("dofetilide", 1.5).unwrap(), z_next: vec![0.25, 2.0] },
                Transition { z_k: vec![1.0, 0.0], action: reg.single("placebo", 0.0).unwrap(), z_next: vec![-0.5, 0.125] },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        ds.save(&p).unwrap();
        assert_eq!(TransitionDataset::load(&p).unwrap(), ds);
    }

    #[test]
    fn anchor_chain_cycle_properties() {
        let reg = DrugRegistry::default_registry();
        let healthy = OdeParams::healthy();
        let placebo = reg.single("placebo", 1.0).unwrap();
        let base = integrate_cycle(&healthy, &placebo, &reg, 1.0, 0.0, 256).unwrap();
        let window = PhaseWindow::new(1.0, TAU, 257).unwrap();
        let direct = integrate_rk4(&healthy, 0.0, &window).unwrap();
        assert_eq!(base, direct[1..].to_vec());

        // The T lobe of a QT-prolonging drug peaks later in phase.
        let start = -std::f64::consts::PI;
        let t_lobe_peak = |traj: &[f64]| {
            let h = TAU / 256.0;
            (0..256)
                .filter(|&l| {
                    let th = start + (l + 1) as f64 * h;
                    th > 0.8 && th < 2.9
                })
                .max_by(|&a, &b| traj[a].total_cmp(&traj[b]))
                .unwrap()
        };
        let p = integrate_cycle(&healthy, &placebo, &reg, start, 0.0, 256).unwrap();
        let q = integrate_cycle(&healthy, &reg.single("dofetilide", 1.0).unwrap(), &reg, start, 0.0, 256).unwrap();
        assert!(t_lobe_peak(&q) > t_lobe_peak(&p));
    }
}
