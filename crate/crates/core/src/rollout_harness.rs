//! Synthetic ground-truth environment, closed-loop rollouts, contraction
//! probing, missing-lead evaluation and the ablation battery.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::action_space::{Action, ActionError, DrugRegistry};
use crate::ecg_ode::{default_channel_labels, integrate_rk4, OdeError, OdeParams, PhaseWindow, Waveform};
use crate::epk_world_model::{integrate_cycle, predict_next, train_world_model, EpkConfig, EpkError, Transition, TransitionDataset, WorldModel, WorldModelConfig};
use crate::io::FormatError;
use crate::latent_codec::{latent_moments, train_codec, Codec, CodecConfig, CodecError, LatentState};
use crate::risk_decision::{aggregate, delta_risk_metrics, rank_actions, risk_labels_cyclic, AggregateMode, DeltaRiskMetrics, RiskDistribution, RiskError, CYCLIC_TILES};
use crate::signal_metrics::{extract_intervals_on, phase_anchor_cyclic, MetricsError, PatientProfile};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Model(#[from] EpkError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sampler failed: {0}")]
    Sampler(String),
    #[error("perturbation radii have insufficient spread")]
    InsufficientSpread,
    #[error("cannot mask every channel")]
    AllChannelsMasked,
}

/// Independent seed for stream `stream`, index `i` (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, i: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// --- environment -----------------------------------------------------------

/// Every window holds exactly one cardiac cycle, so `sample_rate / window`
/// fixes the heart rate (256 / 256 → 60 bpm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub channels: usize,
    pub window: usize,
    pub sample_rate: f64,
    pub lead_mix: Vec<f64>,
    /// Standard deviation of the latent transition noise `η`.
    pub sigma_eta: f64,
    /// Largest R-peak offset (samples) from the window centre drawn at reset.
    pub max_offset: usize,
    pub warmup_cycles: usize,
    pub theta: OdeParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            channels: 2,
            window: 256,
            sample_rate: 256.0,
            lead_mix: vec![1.0, 0.6],
            sigma_eta: 0.5,
            max_offset: 10,
            warmup_cycles: 2,
            theta: OdeParams::healthy(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.channels == 0 || self.lead_mix.len() != self.channels {
            return bad("lead_mix must have one gain per channel");
        }
        if self.lead_mix[0] == 0.0 {
            return bad("channel 0 gain must be non-zero");
        }
        if self.window < 8 || !(self.sample_rate > 0.0) {
            return bad("window must be >= 8 samples and sample_rate positive");
        }
        if !(self.sigma_eta >= 0.0) {
            return bad("sigma_eta must be non-negative");
        }
        if 2 * self.max_offset >= self.window {
            return bad("max_offset too large for the window");
        }
        Ok(())
    }

    fn phase_step(&self) -> f64 {
        TAU / self.window as f64
    }

    /// Projects a 1D trace onto the configured leads.
    pub fn render(&self, trace: &[f64]) -> Waveform {
        let rows = self.lead_mix.iter().map(|g| trace.iter().map(|v| g * v).collect()).collect();
        Waveform::new(rows, self.sample_rate, default_channel_labels(self.channels)).expect("finite trace")
    }

    /// Steady-state window under `params` with the R-peak at `window/2 + offset`.
    pub fn cycle_window(&self, params: &OdeParams, offset: i64) -> Result<Waveform, HarnessError> {
        let w = self.window;
        let h = self.phase_step();
        let first = -((w / 2) as f64 + offset as f64) * h;
        let n = (self.warmup_cycles + 1) * w;
        let pw = PhaseWindow::new(first - self.warmup_cycles as f64 * TAU, (n - 1) as f64 * h, n)?;
        let y = integrate_rk4(params, 0.0, &pw)?;
        Ok(self.render(&y[n - w..]))
    }
}

/// The ODE-through-codec transition `z_{k+1} = T(z_k, a_k) + η_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEnv {
    config: EnvConfig,
    codec: Codec,
    registry: DrugRegistry,
}

impl SyntheticEnv {
    pub fn new(config: EnvConfig, codec: Codec, registry: DrugRegistry) -> Result<Self, HarnessError> {
        config.validate()?;
        if codec.channels() != config.channels || codec.window() != config.window {
            return Err(HarnessError::Config(format!(
                "codec shape {}x{} does not match environment {}x{}",
                codec.channels(),
                codec.window(),
                config.channels,
                config.window
            )));
        }
        Ok(SyntheticEnv { config, codec, registry })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn registry(&self) -> &DrugRegistry {
        &self.registry
    }

    pub fn latent_dim(&self) -> usize {
        self.codec.latent_dim()
    }

    /// Anchor settings matching this environment's dynamics.
    pub fn epk_config(&self) -> EpkConfig {
        EpkConfig {
            theta_base: self.config.theta.clone(),
            channel: 0,
            lead_gain: self.config.lead_mix[0],
            steps: self.config.window,
            fallback: false,
        }
    }

    /// Window rendered under `action` after warm-up.
    pub fn initial_window(&self, offset: i64, action: &Action) -> Result<Waveform, HarnessError> {
        let p = crate::action_space::modulate(&self.config.theta, action, &self.registry)?;
        self.config.cycle_window(&p, offset)
    }

    /// Placebo steady state at a random R-peak offset.
    pub fn reset(&self, seed: u64) -> Result<LatentState, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.config.max_offset as i64;
        let offset = rng.random_range(-m..=m);
        let x = self.initial_window(offset, &Action::single("placebo", 1.0)?)?;
        Ok(self.codec.encode(&x)?)
    }

    /// One cycle continuing `x` under `action` (signal space, noise free).
    pub fn next_window(&self, x: &Waveform, action: &Action) -> Result<Waveform, HarnessError> {
        let theta_start = phase_anchor_cyclic(x, 0)?;
        let y_init = x.channel(0)[x.len() - 1] / self.config.lead_mix[0];
        let trace = integrate_cycle(&self.config.theta, action, &self.registry, theta_start, y_init, self.config.window)?;
        Ok(self.config.render(&trace))
    }

    /// Noise-free `T(z, a)`.
    pub fn transition(&self, z: &[f64], action: &Action) -> Result<LatentState, HarnessError> {
        let x = self.codec.decode(z)?;
        Ok(self.codec.encode(&self.next_window(&x, action)?)?)
    }

    pub fn env_step(&self, z: &[f64], action: &Action, seed: u64) -> Result<LatentState, HarnessError> {
        let mut next = self.transition(z, action)?;
        self.add_noise(&mut next, seed);
        Ok(next)
    }

    pub fn add_noise(&self, z: &mut [f64], seed: u64) {
        if self.config.sigma_eta == 0.0 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in z {
            let e: f64 = rng.sample(StandardNormal);
            *v += self.config.sigma_eta * e;
        }
    }
}

// --- corpora ---------------------------------------------------------------

/// Single-bolus actions for every registered drug at every dose.
pub fn single_actions(registry: &DrugRegistry, doses: &[f64]) -> Result<Vec<Action>, HarnessError> {
    let mut ids: Vec<&str> = registry.drugs.iter().map(|d| d.id.as_str()).collect();
    ids.sort_unstable();
    let mut out = Vec::new();
    for id in ids {
        for &d in doses {
            out.push(Action::single(id, d)?);
        }
    }
    Ok(out)
}

/// Raw windows for codec training: random offsets and random modulated rhythms.
pub fn codec_corpus(cfg: &EnvConfig, registry: &DrugRegistry, actions: &[Action], count: usize, seed: u64) -> Result<Vec<Waveform>, HarnessError> {
    cfg.validate()?;
    if actions.is_empty() {
        return Err(HarnessError::Config("no actions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cfg.max_offset as i64;
    (0..count)
        .map(|_| {
            let a = actions.choose(&mut rng).expect("non-empty");
            let offset = rng.random_range(-m..=m);
            let p = crate::action_space::modulate(&cfg.theta, a, registry)?;
            cfg.cycle_window(&p, offset)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub episodes: usize,
    pub steps: usize,
    pub actions: Vec<Action>,
    pub seed: u64,
}

/// Random-action episodes from independent resets.
pub fn generate_transitions(env: &SyntheticEnv, cfg: &CorpusConfig, profile: &PatientProfile) -> Result<TransitionDataset, HarnessError> {
    if cfg.actions.is_empty() || cfg.episodes == 0 || cfg.steps == 0 {
        return Err(HarnessError::Config("corpus needs actions, episodes and steps".into()));
    }
    let mut records = Vec::with_capacity(cfg.episodes * cfg.steps);
    for e in 0..cfg.episodes as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, e));
        let mut z = env.reset(derive_seed(cfg.seed, 2, e))?;
        for s in 0..cfg.steps as u64 {
            let a = cfg.actions.choose(&mut rng).expect("non-empty").clone();
            let next = env.env_step(&z, &a, derive_seed(cfg.seed, 3, e * 1_000_003 + s))?;
            records.push(Transition { z_k: z, action: a, z_next: next.clone() });
            z = next;
        }
    }
    Ok(TransitionDataset { latent_dim: env.latent_dim(), profile: profile.clone(), records })
}

/// Codec, environment, corpus and world-model settings of the standard experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub codec: CodecConfig,
    pub codec_windows: usize,
    pub episodes: usize,
    pub steps: usize,
    pub train_doses: Vec<f64>,
    /// Doses never seen in training, used for directional checks.
    pub test_doses: Vec<f64>,
    pub world_model: WorldModelConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvConfig::default(),
            codec: CodecConfig::default(),
            codec_windows: 256,
            episodes: 64,
            steps: 8,
            train_doses: vec![0.5, 1.0, 1.5],
            test_doses: vec![0.75, 1.25],
            world_model: WorldModelConfig { epochs: 1200, ..WorldModelConfig::default() },
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn train_actions(&self, registry: &DrugRegistry) -> Result<Vec<Action>, HarnessError> {
        single_actions(registry, &self.train_doses)
    }

    pub fn test_actions(&self, registry: &DrugRegistry) -> Result<Vec<Action>, HarnessError> {
        single_actions(registry, &self.test_doses)
    }

    pub fn codec_corpus(&self, registry: &DrugRegistry) -> Result<Vec<Waveform>, HarnessError> {
        codec_corpus(&self.env, registry, &self.train_actions(registry)?, self.codec_windows, self.codec.seed)
    }

    /// Trains the codec and wraps it in the environment.
    pub fn build_env(&self, registry: &DrugRegistry) -> Result<SyntheticEnv, HarnessError> {
        let codec = train_codec(&self.codec_corpus(registry)?, &self.codec)?;
        SyntheticEnv::new(self.env.clone(), codec, registry.clone())
    }

    pub fn corpus(&self, env: &SyntheticEnv, seed: u64, profile: &PatientProfile) -> Result<TransitionDataset, HarnessError> {
        let cfg = CorpusConfig { episodes: self.episodes, steps: self.steps, actions: self.train_actions(env.registry())?, seed };
        generate_transitions(env, &cfg, profile)
    }

    /// World model with energy weight `c` trained on `dataset`.
    pub fn train_model(&self, env: &SyntheticEnv, dataset: &TransitionDataset, c: f64, seed: u64) -> Result<WorldModel, HarnessError> {
        let cfg = WorldModelConfig { c, seed, ..self.world_model.clone() };
        Ok(train_world_model(dataset, env.codec(), &env.epk_config(), env.registry(), &cfg, None)?)
    }
}

// --- predictors and rollouts -----------------------------------------------

pub trait Predictor {
    fn predict(&self, z: &[f64], action: &Action, seed: u64) -> Result<LatentState, HarnessError>;
}

/// One ancestral sample from a trained world model.
pub struct ModelPredictor<'a> {
    pub model: &'a WorldModel,
    pub profile: PatientProfile,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, z: &[f64], action: &Action, seed: u64) -> Result<LatentState, HarnessError> {
        let mut p = predict_next(self.model, z, action, &self.profile, 1, seed)?;
        match p.samples.pop() {
            Some(s) => Ok(s),
            None => Err(HarnessError::Sampler(p.failures.first().map(|f| f.1.clone()).unwrap_or_default())),
        }
    }
}

/// The noise-free environment used as its own predictor.
pub struct EnvPredictor<'a>(pub &'a SyntheticEnv);

impl Predictor for EnvPredictor<'_> {
    fn predict(&self, z: &[f64], action: &Action, _seed: u64) -> Result<LatentState, HarnessError> {
        self.0.transition(z, action)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    ClosedLoop,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub mode: RolloutMode,
    pub horizon: usize,
    /// `δ_k = ‖ẑ_k − z_k‖²` for each completed step.
    pub latent_sq_err: Vec<f64>,
    pub latent_mse: Vec<f64>,
    pub signal_mse: Vec<f64>,
    pub signal_mae: Vec<f64>,
    /// Set when a step failed; earlier steps stay valid.
    pub failure: Option<String>,
}

impl RolloutResult {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.latent_sq_err.len() == self.horizon
    }

    pub fn mean_latent_mse(&self) -> f64 {
        mean(&self.latent_mse)
    }
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub latent_mse: f64,
    pub latent_mae: f64,
    pub signal_mse: f64,
    pub signal_mae: f64,
}

fn error_stats(codec: &Codec, pred: &[f64], truth: &[f64]) -> ErrorStats {
    let d = pred.len() as f64;
    let xp = codec.decode_flat(pred);
    let xt = codec.decode_flat(truth);
    let n = xp.len() as f64;
    ErrorStats {
        latent_mse: squared_dist(pred, truth) / d,
        latent_mae: pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / d,
        signal_mse: squared_dist(&xp, &xt) / n,
        signal_mae: xp.iter().zip(&xt).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
    }
}

fn mean_stats(v: &[ErrorStats]) -> ErrorStats {
    let m = |f: fn(&ErrorStats) -> f64| mean(&v.iter().map(f).collect::<Vec<_>>());
    ErrorStats { latent_mse: m(|s| s.latent_mse), latent_mae: m(|s| s.latent_mae), signal_mse: m(|s| s.signal_mse), signal_mae: m(|s| s.signal_mae) }
}

/// Ground truth follows the noisy environment from `z0`; closed-loop feeds
/// predictions back, oracle conditions on the true state at every step. The
/// prediction seed of step `k` is shared by both modes.
pub fn rollout(pred: &dyn Predictor, env: &SyntheticEnv, z0: &[f64], actions: &[Action], mode: RolloutMode, seed: u64) -> RolloutResult {
    let mut res = RolloutResult {
        mode,
        horizon: actions.len(),
        latent_sq_err: Vec::new(),
        latent_mse: Vec::new(),
        signal_mse: Vec::new(),
        signal_mae: Vec::new(),
        failure: None,
    };
    let mut z_true = z0.to_vec();
    let mut z_hat = z0.to_vec();
    for (k, a) in actions.iter().enumerate() {
        let cond = match mode {
            RolloutMode::ClosedLoop => &z_hat,
            RolloutMode::Oracle => &z_true,
        };
        let step = pred
            .predict(cond, a, derive_seed(seed, 11, k as u64))
            .and_then(|p| env.env_step(&z_true, a, derive_seed(seed, 12, k as u64)).map(|t| (p, t)));
        let (p, t) = match step {
            Ok(v) => v,
            Err(e) => {
                res.failure = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let s = error_stats(env.codec(), &p, &t);
        res.latent_sq_err.push(squared_dist(&p, &t));
        res.latent_mse.push(s.latent_mse);
        res.signal_mse.push(s.signal_mse);
        res.signal_mae.push(s.signal_mae);
        z_hat = p;
        z_true = t;
    }
    res
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutComparison {
    pub closed_loop: RolloutResult,
    pub oracle: RolloutResult,
    /// Per-step latent MSE difference, rollout minus oracle.
    pub delta: Vec<f64>,
}

pub fn rollout_pair(pred: &dyn Predictor, env: &SyntheticEnv, z0: &[f64], actions: &[Action], seed: u64) -> RolloutComparison {
    let closed_loop = rollout(pred, env, z0, actions, RolloutMode::ClosedLoop, seed);
    let oracle = rollout(pred, env, z0, actions, RolloutMode::Oracle, seed);
    let delta = closed_loop.latent_mse.iter().zip(&oracle.latent_mse).map(|(a, b)| a - b).collect();
    RolloutComparison { closed_loop, oracle, delta }
}

// --- contraction -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionConfig {
    /// Perturbation radii in units of the per-coordinate latent std.
    pub radii: Vec<f64>,
    pub pairs: usize,
    pub seed: u64,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        ContractionConfig { radii: vec![0.1, 0.5, 1.0, 2.0], pairs: 512, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionEstimate {
    pub kappa: f64,
    pub delta_sys: f64,
    /// Two-sided 95% interval of the slope.
    pub kappa_ci: (f64, f64),
    pub residual_sd: f64,
    pub n: usize,
    /// Zero spread in the response; the slope carries no information.
    pub degenerate: bool,
}

/// Ordinary least squares `y = a + b·x` with the slope's 95% interval.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<ContractionEstimate, HarnessError> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(HarnessError::InsufficientSpread);
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(HarnessError::InsufficientSpread);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let sse: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - a - b * xi).powi(2)).sum();
    let s2 = sse / (n - 2) as f64;
    let se = (s2 / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 2) as f64).expect("dof > 0").inverse_cdf(0.975);
    let degenerate = y.iter().all(|v| *v == y[0]);
    Ok(ContractionEstimate { kappa: b, delta_sys: a, kappa_ci: (b - t * se, b + t * se), residual_sd: s2.sqrt(), n, degenerate })
}

/// Regresses `‖G(ẑ, a) − T(z, a)‖²` on `‖ẑ − z‖²` over Gaussian perturbations
/// at the configured radii.
pub fn contraction_probe(
    pred: &dyn Predictor,
    env: &SyntheticEnv,
    cases: &[(LatentState, Action)],
    latent_std: &[f64],
    cfg: &ContractionConfig,
) -> Result<ContractionEstimate, HarnessError> {
    let mut distinct = cfg.radii.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 || cases.is_empty() {
        return Err(HarnessError::InsufficientSpread);
    }
    let truths = cases.iter().map(|(z, a)| env.transition(z, a)).collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xs = Vec::with_capacity(cfg.pairs);
    let mut ys = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let c = i % cases.len();
        let r = cfg.radii[(i / cases.len()) % cfg.radii.len()];
        let (z, a) = &cases[c];
        let z_hat: Vec<f64> = z
            .iter()
            .zip(latent_std)
            .map(|(v, s)| {
                let g: f64 = rng.sample(StandardNormal);
                v + r * s * g
            })
            .collect();
        let p = pred.predict(&z_hat, a, derive_seed(cfg.seed, 21, i as u64))?;
        xs.push(squared_dist(&z_hat, z));
        ys.push(squared_dist(&p, &truths[c]));
    }
    fit_line(&xs, &ys)
}

// --- missing leads ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingLeadRow {
    pub mask: Vec<usize>,
    pub samples: usize,
    pub errors: ErrorStats,
    /// Per-case latent MSE, index-aligned with the evaluated cases.
    pub per_case_latent_mse: Vec<f64>,
}

/// One-step prediction from the masked pre-dose window against the noise-free
/// transition of the unmasked window.
pub fn missing_lead_eval(pred: &dyn Predictor, env: &SyntheticEnv, cases: &[(Waveform, Action)], mask: &[usize], seed: u64) -> Result<MissingLeadRow, HarnessError> {
    let c = env.config().channels;
    if mask.iter().any(|&m| m >= c) {
        return Err(HarnessError::Config(format!("mask channel out of range for {c} channels")));
    }
    let mut distinct = mask.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() == c {
        return Err(HarnessError::AllChannelsMasked);
    }
    let codec = env.codec();
    let mut stats = Vec::with_capacity(cases.len());
    for (i, (x, a)) in cases.iter().enumerate() {
        let truth = codec.encode(&env.next_window(x, a)?)?;
        let z_in = codec.encode(&x.with_zeroed_channels(&distinct))?;
        let p = pred.predict(&z_in, a, derive_seed(seed, 31, i as u64))?;
        stats.push(error_stats(codec, &p, &truth));
    }
    Ok(MissingLeadRow {
        mask: distinct,
        samples: cases.len(),
        errors: mean_stats(&stats),
        per_case_latent_mse: stats.iter().map(|s| s.latent_mse).collect(),
    })
}

// --- risk and interval readouts --------------------------------------------

/// Aggregate abnormality risk of a decoded one-cycle latent.
pub fn latent_risk(codec: &Codec, z: &[f64], profile: &PatientProfile, mode: AggregateMode) -> Result<f64, HarnessError> {
    Ok(aggregate(&risk_labels_cyclic(&codec.decode(z)?, profile), mode))
}

/// QTc (ms) of a decoded one-cycle latent, channel 0.
pub fn latent_qtc(codec: &Codec, z: &[f64], profile: &PatientProfile) -> Result<f64, HarnessError> {
    let x = codec.decode(z)?;
    Ok(extract_intervals_on(&x.tile(CYCLIC_TILES), 0, profile)?.qtc_ms)
}

/// One-sided paired t-test of `mean(a − b) < 0`; returns `(t, p)`.
pub fn paired_t_less(a: &[f64], b: &[f64]) -> Result<(f64, f64), HarnessError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(HarnessError::Config("paired test needs two equal-length samples of size >= 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        let p = if m < 0.0 { 0.0 } else { 1.0 };
        return Ok((if m < 0.0 { f64::NEG_INFINITY } else { f64::INFINITY }, p));
    }
    let t = m / (sd / n.sqrt());
    let p = StudentsT::new(0.0, 1.0, n - 1.0).expect("dof > 0").cdf(t);
    Ok((t, p))
}

// --- evaluation suite and ablation battery ---------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub z0: LatentState,
    pub actions: Vec<Action>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSuite {
    pub episodes: Vec<Episode>,
    /// States at which candidate actions are ranked.
    pub decision_states: Vec<LatentState>,
    pub candidates: Vec<Action>,
    /// Pre-dose windows for the missing-lead table.
    pub missing: Vec<(Waveform, Action)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub decision_states: usize,
    pub missing_cases: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { episodes: 16, horizon: 5, decision_states: 8, missing_cases: 50, seed: 1000 }
    }
}

/// Test episodes start from a random-action warm state so rollouts do not all
/// begin on the placebo rhythm.
pub fn build_eval_suite(env: &SyntheticEnv, actions: &[Action], candidates: &[Action], cfg: &SuiteConfig) -> Result<EvalSuite, HarnessError> {
    if actions.is_empty() || candidates.is_empty() {
        return Err(HarnessError::Config("suite needs actions and candidates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = env.config().max_offset as i64;
    let warm_state = |rng: &mut ChaCha8Rng| -> Result<Waveform, HarnessError> {
        let a = actions.choose(rng).expect("non-empty");
        env.initial_window(rng.random_range(-m..=m), a)
    };
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for i in 0..cfg.episodes {
        let z0 = env.codec().encode(&warm_state(&mut rng)?)?;
        let acts = (0..cfg.horizon).map(|_| actions.choose(&mut rng).expect("non-empty").clone()).collect();
        episodes.push(Episode { z0, actions: acts, seed: derive_seed(cfg.seed, 41, i as u64) });
    }
    let decision_states = (0..cfg.decision_states)
        .map(|_| Ok(env.codec().encode(&warm_state(&mut rng)?)?))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let missing = (0..cfg.missing_cases)
        .map(|_| Ok((warm_state(&mut rng)?, actions.choose(&mut rng).expect("non-empty").clone())))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(EvalSuite { episodes, decision_states, candidates: candidates.to_vec(), missing })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub c_values: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
    /// K used for the λ sweep.
    pub decision_k: usize,
    pub mask: Vec<usize>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            c_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            lambdas: vec![0.0, 0.3, 0.6, 0.9, 1.2],
            k_values: vec![1, 3, 5],
            seeds: vec![0, 1, 2, 3, 4],
            decision_k: 3,
            mask: vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    pub metrics: DeltaRiskMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    /// True risk of the top-ranked action minus the best achievable, averaged over states.
    pub mean_regret: f64,
    pub top1_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub one_step: ErrorStats,
    pub rollout_latent_mse: f64,
    pub oracle_latent_mse: f64,
    pub rollout_signal_mse: f64,
    pub oracle_signal_mse: f64,
    pub delta: f64,
    pub k_rows: Vec<KRow>,
    pub lambda_rows: Vec<LambdaRow>,
    pub unmasked: MissingLeadRow,
    pub masked: MissingLeadRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub c: f64,
    pub seed: u64,
    pub status: String,
    pub error: Option<String>,
    pub metrics: Option<CellMetrics>,
}

/// Evaluates one trained model over the suite.
pub fn evaluate_model(model: &WorldModel, env: &SyntheticEnv, suite: &EvalSuite, grid: &AblationGrid, profile: &PatientProfile) -> Result<CellMetrics, HarnessError> {
    if !model.is_finite() {
        return Err(HarnessError::Sampler("model weights are not finite".into()));
    }
    let pred = ModelPredictor { model, profile: profile.clone() };
    let codec = env.codec();

    let mut one_step = Vec::new();
    let (mut cl, mut or, mut cls, mut ors) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ep in &suite.episodes {
        let cmp = rollout_pair(&pred, env, &ep.z0, &ep.actions, ep.seed);
        if let Some(f) = cmp.closed_loop.failure.as_ref().or(cmp.oracle.failure.as_ref()) {
            return Err(HarnessError::Sampler(f.clone()));
        }
        cl.push(cmp.closed_loop.mean_latent_mse());
        or.push(cmp.oracle.mean_latent_mse());
        cls.push(mean(&cmp.closed_loop.signal_mse));
        ors.push(mean(&cmp.oracle.signal_mse));
        let z1 = env.env_step(&ep.z0, &ep.actions[0], derive_seed(ep.seed, 12, 0))?;
        let p1 = pred.predict(&ep.z0, &ep.actions[0], derive_seed(ep.seed, 11, 0))?;
        one_step.push(error_stats(codec, &p1, &z1));
    }

    let k_max = grid.k_values.iter().copied().chain([grid.decision_k]).max().unwrap_or(1);
    let mut pred_delta: Vec<Vec<f64>> = vec![Vec::new(); grid.k_values.len()];
    let mut true_delta = Vec::new();
    let mut per_state: Vec<(Vec<f64>, Vec<RiskDistribution>)> = Vec::new();
    for (si, z) in suite.decision_states.iter().enumerate() {
        let base = latent_risk(codec, z, profile, AggregateMode::Mean)?;
        let mut truths = Vec::new();
        let mut dists = Vec::new();
        for (ai, a) in suite.candidates.iter().enumerate() {
            let t = latent_risk(codec, &env.transition(z, a)?, profile, AggregateMode::Mean)?;
            let p = predict_next(model, z, a, profile, k_max, derive_seed(si as u64, 51, ai as u64))?;
            if p.is_partial() {
                return Err(HarnessError::Sampler(p.failures[0].1.clone()));
            }
            let risks = p.samples.iter().map(|s| latent_risk(codec, s, profile, AggregateMode::Mean)).collect::<Result<Vec<_>, _>>()?;
            for (ki, &k) in grid.k_values.iter().enumerate() {
                pred_delta[ki].push(mean(&risks[..k]) - base);
            }
            true_delta.push(t - base);
            truths.push(t);
            dists.push(RiskDistribution { action: a.clone(), samples: risks[..grid.decision_k].to_vec() });
        }
        per_state.push((truths, dists));
    }
    let k_rows = grid
        .k_values
        .iter()
        .zip(&pred_delta)
        .map(|(&k, p)| Ok(KRow { k, metrics: delta_risk_metrics(p, &true_delta)? }))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let mut lambda_rows = Vec::new();
    for &lambda in &grid.lambdas {
        let (mut regret, mut hits) = (0.0, 0.0);
        for (truths, dists) in &per_state {
            let ranked = rank_actions(dists, lambda)?;
            let chosen = dists.iter().position(|d| d.action.id() == ranked[0].id).expect("ranked id comes from dists");
            let best = truths.iter().cloned().fold(f64::INFINITY, f64::min);
            regret += truths[chosen] - best;
            hits += (truths[chosen] == best) as u8 as f64;
        }
        let n = per_state.len().max(1) as f64;
        lambda_rows.push(LambdaRow { lambda, mean_regret: regret / n, top1_match: hits / n });
    }

    Ok(CellMetrics {
        one_step: mean_stats(&one_step),
        rollout_latent_mse: mean(&cl),
        oracle_latent_mse: mean(&or),
        rollout_signal_mse: mean(&cls),
        oracle_signal_mse: mean(&ors),
        delta: mean(&cl) - mean(&or),
        k_rows,
        lambda_rows,
        unmasked: missing_lead_eval(&pred, env, &suite.missing, &[], 7)?,
        masked: missing_lead_eval(&pred, env, &suite.missing, &grid.mask, 7)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryReport {
    pub grid: AblationGrid,
    pub cells: Vec<CellReport>,
}

/// Trains and evaluates every `(c, seed)` cell; a failing cell is recorded and
/// the battery moves on.
pub fn ablation_battery(
    env: &SyntheticEnv,
    suite: &EvalSuite,
    grid: &AblationGrid,
    profile: &PatientProfile,
    train: &dyn Fn(f64, u64) -> Result<WorldModel, HarnessError>,
) -> BatteryReport {
    let mut cells = Vec::new();
    for &c in &grid.c_values {
        for &seed in &grid.seeds {
            let outcome = train(c, seed).and_then(|m| evaluate_model(&m, env, suite, grid, profile));
            cells.push(match outcome {
                Ok(m) => CellReport { c, seed, status: "ok".into(), error: None, metrics: Some(m) },
                Err(e) => CellReport { c, seed, status: "failed".into(), error: Some(e.to_string()), metrics: None },
            });
        }
    }
    BatteryReport { grid: grid.clone(), cells }
}

impl BatteryReport {
    /// Writes one CSV per table and an `index.json`; returns the written paths.
    pub fn write(&self, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        fs::create_dir_all(out_dir)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut epk = String::from("c,seed,status,latent_mse,latent_mae,signal_mse,signal_mae,rollout_latent_mse,oracle_latent_mse,delta,rollout_signal_mse,oracle_signal_mse\n");
        let mut k_tab = String::from("c,seed,K,pearson,spearman,sign_agreement,mae,rmse\n");
        let mut l_tab = String::from("c,seed,lambda,mean_regret,top1_match\n");
        let mut ml_tab = String::from("c,seed,mask,samples,latent_mse,latent_mae,signal_mse,signal_mae\n");
        for cell in &self.cells {
            let Some(m) = &cell.metrics else {
                epk.push_str(&format!("{},{},{},,,,,,,,,\n", cell.c, cell.seed, cell.status));
                continue;
            };
            let s = &m.one_step;
            epk.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                cell.c, cell.seed, cell.status, s.latent_mse, s.latent_mae, s.signal_mse, s.signal_mae, m.rollout_latent_mse, m.oracle_latent_mse, m.delta, m.rollout_signal_mse, m.oracle_signal_mse
            ));
            for r in &m.k_rows {
                let q = &r.metrics;
                k_tab.push_str(&format!("{},{},{},{},{},{},{},{}\n", cell.c, cell.seed, r.k, opt(q.pearson), opt(q.spearman), q.sign_agreement, q.mae, q.rmse));
            }
            for r in &m.lambda_rows {
                l_tab.push_str(&format!("{},{},{},{},{}\n", cell.c, cell.seed, r.lambda, r.mean_regret, r.top1_match));
            }
            for row in [&m.unmasked, &m.masked] {
                let mask = row.mask.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
                let e = &row.errors;
                ml_tab.push_str(&format!("{},{},{},{},{},{},{},{}\n", cell.c, cell.seed, mask, row.samples, e.latent_mse, e.latent_mae, e.signal_mse, e.signal_mae));
            }
        }
        let mut written = Vec::new();
        for (name, body) in [("epk_ablation.csv", epk), ("k_ablation.csv", k_tab), ("lambda_ablation.csv", l_tab), ("missing_lead.csv", ml_tab)] {
            let p = out_dir.join(name);
            fs::write(&p, body)?;
            written.push(p);
        }
        let index = serde_json::json!({
            "grid": self.grid,
            "tables": ["epk_ablation.csv", "k_ablation.csv", "lambda_ablation.csv", "missing_lead.csv"],
            "cells": self.cells.iter().map(|c| serde_json::json!({"c": c.c, "seed": c.seed, "status": c.status, "error": c.error})).collect::<Vec<_>>(),
        });
        let p = out_dir.join("index.json");
        fs::write(&p, serde_json::to_string_pretty(&index)?)?;
        written.push(p);
        Ok(written)
    }
}

/// Mean per-sample latent std of a transition set.
pub fn dataset_latent_std(ds: &TransitionDataset) -> Vec<f64> {
    let zs: Vec<LatentState> = ds.records.iter().map(|r| r.z_k.clone()).collect();
    latent_moments(&zs).1
}

/// Median of `b − a` over index-aligned vectors.
pub fn median_difference(a: &[f64], b: &[f64]) -> f64 {
    median(&a.iter().zip(b).map(|(x, y)| y - x).collect::<Vec<_>>())
}
