//! Simulation and ranking shared by the CLI and the HTTP service.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ecgwm_core::action_space::{enumerate_actions, Action, ActionError, MaskReason};
use ecgwm_core::latent_codec::Codec;
use ecgwm_core::ecg_ode::{OdeParams, Waveform};
use ecgwm_core::epk_world_model::{predict_next, WorldModel};
use ecgwm_core::risk_decision::{
    aggregate, ranking_report, risk_labels_cyclic, risk_stats, score, AggregateMode, DecisionScore, RankingReport,
    RiskDistribution, RiskStats, CYCLIC_TILES,
};
use ecgwm_core::rollout_harness::{derive_seed, EnvConfig, SyntheticEnv};
use ecgwm_core::signal_metrics::{classify_intervals, extract_intervals_on, IntervalFlags, IntervalReport, PatientProfile};

use crate::error::CliError;

pub const API_SCHEMA_VERSION: u32 = 1;
/// Upper bound on points per transported trace.
pub const MAX_TRACE_POINTS: usize = 2000;
pub const MAX_K: usize = 64;
pub const DEFAULT_DOSE_GRID: [f64; 3] = [0.5, 1.0, 1.5];

/// Pre-dose state: a named preset, explicit ODE parameters, or a recorded window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Baseline {
    Preset { name: String },
    Params { params: OdeParams },
    Waveform { sample_rate: f64, channels: Vec<Vec<f64>> },
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline::Preset { name: "healthy".into() }
    }
}

fn default_lambda() -> f64 {
    0.6
}

fn default_k() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRequest {
    #[serde(default)]
    pub baseline: Baseline,
    /// Drug id, or a full action id (`drug@dose[+drug@dose]`) when `dose` is absent.
    pub action_id: String,
    #[serde(default)]
    pub dose: Option<f64>,
    #[serde(rename = "K", default = "default_k")]
    pub k: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub seed: u64,
    #[serde(default)]
    pub profile: Option<PatientProfile>,
    #[serde(default)]
    pub aggregate: AggregateMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub sample_rate: f64,
    pub channels: Vec<Vec<f64>>,
}

impl Trace {
    pub fn from_waveform(w: &Waveform) -> Self {
        let d = w.downsampled(MAX_TRACE_POINTS);
        Trace { sample_rate: d.sample_rate(), channels: (0..d.channels()).map(|c| d.channel(c).to_vec()).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.channels.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub seed: u64,
    pub risk: f64,
    pub waveform: Trace,
    /// `None` when the decoded window could not be delineated.
    pub intervals: Option<IntervalReport>,
    pub flags: Option<IntervalFlags>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResponse {
    pub schema_version: u32,
    pub action_id: String,
    pub action: Action,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
    pub baseline: SampleOutcome,
    pub samples: Vec<SampleOutcome>,
    pub epk_template: Vec<f64>,
    pub epk_fallback: bool,
    pub risk: RiskDistribution,
    pub stats: RiskStats,
    pub score: DecisionScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankRequest {
    #[serde(default)]
    pub baseline: Baseline,
    /// Defaults to every mask-feasible action on the standard dose grid.
    #[serde(default)]
    pub action_ids: Option<Vec<String>>,
    #[serde(rename = "K", default = "default_k")]
    pub k: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub seed: u64,
    #[serde(default)]
    pub profile: Option<PatientProfile>,
    #[serde(default)]
    pub aggregate: AggregateMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// Request-level failure, mapped to 400 / 422 / 500 by the HTTP layer.
#[derive(Debug, Clone, PartialEq)]
pub enum ServiceError {
    BadRequest(Vec<FieldError>),
    Infeasible { action: String, reason: MaskReason },
    Internal(String),
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServiceError::BadRequest(errs) => {
                let parts: Vec<String> = errs.iter().map(|e| format!("{}: {}", e.field, e.message)).collect();
                write!(f, "invalid request: {}", parts.join("; "))
            }
            ServiceError::Infeasible { action, reason } => write!(f, "action {action} infeasible: {reason}"),
            ServiceError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for ServiceError {}

impl ServiceError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        ServiceError::BadRequest(vec![FieldError { field: field.into(), message: message.into() }])
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

/// Parses a JSON body, reporting the path of the offending field.
pub fn parse_request<T: DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ServiceError::field(&field, e.into_inner().to_string())
    })
}

fn check_k_lambda(k: usize, lambda: f64) -> Result<(), ServiceError> {
    let mut errs = Vec::new();
    if k == 0 || k > MAX_K {
        errs.push(FieldError { field: "K".into(), message: format!("must be in 1..={MAX_K}, got {k}") });
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        errs.push(FieldError { field: "lambda".into(), message: format!("must be finite and >= 0, got {lambda}") });
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(ServiceError::BadRequest(errs))
    }
}

/// FNV-1a of an action id, used to give each ranked action its own seed stream.
pub fn action_stream(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Base seed of the `K` samples drawn for `action_id` under request seed `seed`.
pub fn action_seed(seed: u64, action_id: &str) -> u64 {
    derive_seed(seed, action_stream(action_id), 0)
}

/// Loaded model state. Read-only after construction.
pub struct Engine {
    env: SyntheticEnv,
    model: WorldModel,
    profile: PatientProfile,
}

/// Per-sample risks, decoded windows and sample seeds.
type SampledRisks = (Vec<f64>, Vec<Waveform>, Vec<u64>);

impl Engine {
    pub fn new(env: SyntheticEnv, model: WorldModel, profile: PatientProfile) -> Result<Self, CliError> {
        if model.latent_dim() != env.latent_dim() {
            return Err(CliError::Config(format!(
                "world model latent dim {} does not match codec latent dim {}",
                model.latent_dim(),
                env.latent_dim()
            )));
        }
        if model.registry != *env.registry() {
            return Err(CliError::Config("registry differs from the one the world model was trained with".into()));
        }
        Ok(Engine { env, model, profile })
    }

    /// Builds the environment around `codec` with the default settings resized to its shape.
    pub fn from_parts(codec: Codec, model: WorldModel, profile: PatientProfile) -> Result<Self, CliError> {
        let env_cfg = EnvConfig { channels: codec.channels(), window: codec.window(), sample_rate: codec.sample_rate(), ..EnvConfig::default() };
        let mut env_cfg = env_cfg;
        if env_cfg.lead_mix.len() != env_cfg.channels {
            env_cfg.lead_mix = ecgwm_core::ecg_ode::default_lead_mix(env_cfg.channels);
        }
        let registry = model.registry.clone();
        let env = SyntheticEnv::new(env_cfg, codec, registry)?;
        Self::new(env, model, profile)
    }

    pub fn env(&self) -> &SyntheticEnv {
        &self.env
    }

    pub fn model(&self) -> &WorldModel {
        &self.model
    }

    pub fn default_actions(&self) -> Vec<Action> {
        let reg = self.env.registry();
        enumerate_actions(reg, &reg.mask(), &DEFAULT_DOSE_GRID)
    }

    fn resolve_action(&self, id: &str, dose: Option<f64>, field: &str) -> Result<Action, ServiceError> {
        let reg = self.env.registry();
        let parsed = match dose {
            Some(d) => reg.single(id, d),
            None => reg.parse_action(id),
        };
        let action = parsed.map_err(|e| match e {
            ActionError::UnknownDrug(_) => ServiceError::Infeasible { action: id.to_string(), reason: MaskReason::UnknownDrug },
            other => ServiceError::field(field, other.to_string()),
        })?;
        let verdict = ecgwm_core::action_space::mask_check(&action, &reg.mask());
        match verdict.reason {
            Some(reason) => Err(ServiceError::Infeasible { action: action.id(), reason }),
            None => Ok(action),
        }
    }

    fn baseline_window(&self, b: &Baseline) -> Result<Waveform, ServiceError> {
        let cfg = self.env.config();
        match b {
            Baseline::Preset { name } => {
                let p = OdeParams::preset(name).ok_or_else(|| ServiceError::field("baseline.name", format!("unknown preset {name:?}")))?;
                self.env.config().cycle_window(&p, 0).map_err(ServiceError::internal)
            }
            Baseline::Params { params } => self.env.config().cycle_window(params, 0).map_err(|e| ServiceError::field("baseline.params", e.to_string())),
            Baseline::Waveform { sample_rate, channels } => {
                let bad = |m: String| ServiceError::field("baseline.channels", m);
                if channels.len() != cfg.channels || channels.iter().any(|c| c.len() != cfg.window) {
                    return Err(bad(format!("expected {} channels of {} samples", cfg.channels, cfg.window)));
                }
                if (*sample_rate - cfg.sample_rate).abs() > 1e-9 {
                    return Err(ServiceError::field("baseline.sample_rate", format!("expected {}", cfg.sample_rate)));
                }
                let labels = ecgwm_core::ecg_ode::default_channel_labels(cfg.channels);
                Waveform::new(channels.clone(), *sample_rate, labels).map_err(|e| bad(e.to_string()))
            }
        }
    }

    fn outcome(&self, w: &Waveform, seed: u64, profile: &PatientProfile, mode: AggregateMode) -> SampleOutcome {
        let intervals = extract_intervals_on(&w.tile(CYCLIC_TILES), 0, profile).ok();
        SampleOutcome {
            seed,
            risk: aggregate(&risk_labels_cyclic(w, profile), mode),
            waveform: Trace::from_waveform(w),
            flags: intervals.as_ref().map(classify_intervals),
            intervals,
        }
    }

    fn profile_of(&self, p: &Option<PatientProfile>) -> Result<PatientProfile, ServiceError> {
        let p = p.clone().unwrap_or_else(|| self.profile.clone());
        p.validate().map_err(|e| ServiceError::field("profile", e.to_string()))?;
        Ok(p)
    }

    fn risk_samples(&self, z0: &[f64], action: &Action, profile: &PatientProfile, k: usize, seed: u64, mode: AggregateMode) -> Result<SampledRisks, ServiceError> {
        let pred = predict_next(&self.model, z0, action, profile, k, seed).map_err(ServiceError::internal)?;
        if let Some((s, m)) = pred.failures.first() {
            return Err(ServiceError::Internal(format!("sample with seed {s} failed: {m}")));
        }
        let mut risks = Vec::with_capacity(k);
        let mut windows = Vec::with_capacity(k);
        for z in &pred.samples {
            let w = self.env.codec().decode(z).map_err(ServiceError::internal)?;
            risks.push(aggregate(&risk_labels_cyclic(&w, profile), mode));
            windows.push(w);
        }
        Ok((risks, windows, pred.seeds))
    }

    pub fn simulate(&self, req: &SimulationRequest) -> Result<SimulationResponse, ServiceError> {
        check_k_lambda(req.k, req.lambda)?;
        let profile = self.profile_of(&req.profile)?;
        let action = self.resolve_action(&req.action_id, req.dose, "action_id")?;
        let x0 = self.baseline_window(&req.baseline)?;
        let codec = self.env.codec();
        let z0 = codec.encode(&x0).map_err(ServiceError::internal)?;
        let base = self.outcome(&codec.decode(&z0).map_err(ServiceError::internal)?, req.seed, &profile, req.aggregate);
        let anchor = self.model.epk_latent(&z0, &action, codec, &self.env.epk_config()).map_err(ServiceError::internal)?.0;

        let seed = action_seed(req.seed, &action.id());
        let (risks, windows, seeds) = self.risk_samples(&z0, &action, &profile, req.k, seed, req.aggregate)?;
        let samples: Vec<SampleOutcome> =
            windows.iter().zip(&seeds).map(|(w, &s)| self.outcome(w, s, &profile, req.aggregate)).collect();
        let stats = risk_stats(&risks).map_err(ServiceError::internal)?;
        let response = SimulationResponse {
            schema_version: API_SCHEMA_VERSION,
            action_id: action.id(),
            k: req.k,
            lambda: req.lambda,
            seed: req.seed,
            baseline: base,
            samples,
            epk_template: anchor.e_epk.clone(),
            epk_fallback: anchor.fallback_used,
            risk: RiskDistribution { action: action.clone(), samples: risks },
            score: score(stats.mu, stats.sigma2.unwrap_or(0.0), req.lambda),
            stats,
            action,
        };
        if !response.samples.iter().chain([&response.baseline]).all(|s| s.waveform.is_finite()) {
            return Err(ServiceError::Internal("decoded waveform is not finite".into()));
        }
        Ok(response)
    }

    pub fn rank(&self, req: &RankRequest) -> Result<RankingReport, ServiceError> {
        check_k_lambda(req.k, req.lambda)?;
        let profile = self.profile_of(&req.profile)?;
        let actions = match &req.action_ids {
            Some(ids) if ids.is_empty() => return Err(ServiceError::field("action_ids", "must not be empty")),
            Some(ids) => ids
                .iter()
                .enumerate()
                .map(|(i, id)| self.resolve_action(id, None, &format!("action_ids[{i}]")))
                .collect::<Result<Vec<_>, _>>()?,
            None => self.default_actions(),
        };
        let z0 = self.env.codec().encode(&self.baseline_window(&req.baseline)?).map_err(ServiceError::internal)?;
        let mut dists = Vec::with_capacity(actions.len());
        for a in actions {
            let (risks, _, _) = self.risk_samples(&z0, &a, &profile, req.k, action_seed(req.seed, &a.id()), req.aggregate)?;
            dists.push(RiskDistribution { action: a, samples: risks });
        }
        ranking_report(&dists, req.lambda, req.k, req.seed).map_err(ServiceError::internal)
    }
}

/// Canonical serialized form of a ranking report, shared by the CLI and HTTP paths.
pub fn report_bytes<T: Serialize>(report: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(report).expect("report types serialize");
    out.push(b'\n');
    out
}
