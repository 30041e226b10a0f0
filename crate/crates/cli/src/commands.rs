//! Subcommand definitions and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ecgwm_core::action_space::DrugRegistry;
use ecgwm_core::diffusion_engine::{verify_propositions, GaussianTestBed, PropositionBudget};
use ecgwm_core::ecg_ode::Waveform;
use ecgwm_core::epk_world_model::{train_world_model, TransitionDataset, WorldModel, WorldModelConfig};
use ecgwm_core::io::{read_f32_records, write_f32_records};
use ecgwm_core::latent_codec::{train_codec, Codec, CodecConfig};
use ecgwm_core::rollout_harness::{
    ablation_battery, build_eval_suite, codec_corpus, rollout_pair, single_actions, AblationGrid, CorpusConfig,
    EnvConfig, ExperimentConfig, ModelPredictor, SuiteConfig, SyntheticEnv,
};
use ecgwm_core::signal_metrics::PatientProfile;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::http;
use crate::service::{report_bytes, Baseline, Engine, RankRequest, ServiceError, SimulationRequest};

const WINDOWS_MAGIC: &[u8] = b"ECGWIN01";

#[derive(Debug, Parser)]
#[command(name = "ecgwm", version, about = "Synthetic cardiac world model: data, training, simulation and ranking")]
pub struct Cli {
    /// JSON run configuration supplying defaults for paths and experiment parameters.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic window corpus (and transitions when a codec is given).
    GenData(GenDataArgs),
    /// Train the waveform codec.
    TrainCodec(TrainCodecArgs),
    /// Train the latent diffusion world model.
    TrainWm(TrainWmArgs),
    /// Sample K post-dose outcomes for one action.
    Simulate(SimulateArgs),
    /// Rank candidate actions by mean-variance risk score.
    Rank(RankArgs),
    /// Closed-loop versus oracle rollout errors over several horizons.
    Rollout(RolloutArgs),
    /// Run the ablation battery and write its tables.
    Ablate(AblateArgs),
    /// Numerically check the guidance propositions on a Gaussian test bed.
    VerifyTheory(VerifyTheoryArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ModelPaths {
    #[arg(long)]
    pub codec: Option<PathBuf>,
    #[arg(long = "world-model")]
    pub world_model: Option<PathBuf>,
    /// Registry override; must match the one stored in the world model.
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub windows: usize,
    /// Codec used to encode transitions; without it only windows are written.
    #[arg(long)]
    pub codec: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub episodes: usize,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainCodecArgs {
    /// Window corpus from `gen-data`; generated in memory when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainWmArgs {
    #[arg(long)]
    pub codec: Option<PathBuf>,
    /// Transitions from `gen-data`; generated in memory when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// EPK energy weight.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub episodes: usize,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub paths: ModelPaths,
    /// Drug id (with `--dose`) or full action id such as `dofetilide@1`.
    #[arg(long)]
    pub action: String,
    #[arg(long)]
    pub dose: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "healthy")]
    pub preset: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub paths: ModelPaths,
    /// Comma-separated action ids; defaults to every feasible action.
    #[arg(long, value_delimiter = ',')]
    pub actions: Option<Vec<String>>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "healthy")]
    pub preset: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub paths: ModelPaths,
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    #[arg(long, default_value_t = 16)]
    pub episodes: usize,
    #[arg(long, default_value_t = 1000)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Comma-separated energy weights.
    #[arg(long, value_delimiter = ',')]
    pub c: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub codec_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyTheoryArgs {
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 2.0)]
    pub m: f64,
    #[arg(long)]
    pub langevin_steps: Option<usize>,
    #[arg(long, default_value = "propositions.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub paths: ModelPaths,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = http::DEFAULT_PORT)]
    pub port: u16,
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    let cfg = RunConfig::load_opt(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::TrainCodec(a) => train_codec_cmd(&cfg, a),
        Command::TrainWm(a) => train_wm(&cfg, a),
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Rank(a) => rank(&cfg, a),
        Command::Rollout(a) => rollout_cmd(&cfg, a),
        Command::Ablate(a) => ablate(&cfg, a),
        Command::VerifyTheory(a) => verify_theory(a),
        Command::Serve(a) => serve(&cfg, a),
    }
}

fn pick<T: Clone>(flag: Option<T>, cfg: &Option<T>) -> Option<T> {
    flag.or_else(|| cfg.clone())
}

fn require(p: Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    p.ok_or_else(|| CliError::Usage(format!("--{name} is required (or set it in --config)")))
}

fn load_registry(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<DrugRegistry, CliError> {
    match pick(flag, &cfg.registry) {
        Some(p) => Ok(DrugRegistry::load(&p)?),
        None => Ok(DrugRegistry::default_registry()),
    }
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, bytes)?;
        }
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn env_config_for(codec: &Codec) -> EnvConfig {
    let mut cfg = EnvConfig { channels: codec.channels(), window: codec.window(), sample_rate: codec.sample_rate(), ..EnvConfig::default() };
    if cfg.lead_mix.len() != cfg.channels {
        cfg.lead_mix = ecgwm_core::ecg_ode::default_lead_mix(cfg.channels);
    }
    cfg
}

/// Loads codec and world model and wraps them in an engine.
pub fn load_engine(paths: &ModelPaths, cfg: &RunConfig) -> Result<Engine, CliError> {
    let codec = Codec::load(&require(pick(paths.codec.clone(), &cfg.codec), "codec")?)?;
    let model = WorldModel::load(&require(pick(paths.world_model.clone(), &cfg.world_model), "world-model")?)?;
    let registry = match pick(paths.registry.clone(), &cfg.registry) {
        Some(p) => DrugRegistry::load(&p)?,
        None => model.registry.clone(),
    };
    let env = SyntheticEnv::new(env_config_for(&codec), codec, registry)?;
    Engine::new(env, model, PatientProfile::default())
}

#[derive(Debug, Serialize, Deserialize)]
struct WindowsHeader {
    count: usize,
    channels: usize,
    window: usize,
    sample_rate: f64,
}

pub fn write_windows(path: &Path, windows: &[Waveform]) -> Result<(), CliError> {
    let first = windows.first().ok_or_else(|| CliError::Usage("no windows to write".into()))?;
    let header = WindowsHeader { count: windows.len(), channels: first.channels(), window: first.len(), sample_rate: first.sample_rate() };
    let values: Vec<f32> = windows.iter().flat_map(|w| w.as_flat().iter().map(|&v| v as f32)).collect();
    write_f32_records(path, WINDOWS_MAGIC, &header, &values)?;
    Ok(())
}

pub fn read_windows(path: &Path) -> Result<Vec<Waveform>, CliError> {
    let (h, values): (WindowsHeader, Vec<f32>) = read_f32_records(path, WINDOWS_MAGIC)?;
    let per = h.channels * h.window;
    if per == 0 || values.len() != h.count * per {
        return Err(CliError::Config(format!("{}: record count does not match header", path.display())));
    }
    values
        .chunks_exact(per)
        .map(|c| {
            let flat = c.iter().map(|&v| v as f64).collect();
            Waveform::from_flat(flat, h.channels, h.sample_rate).map_err(|e| CliError::Config(e.to_string()))
        })
        .collect()
}

fn gen_data(cfg: &RunConfig, a: GenDataArgs) -> Result<i32, CliError> {
    let out_dir = require(pick(a.out_dir, &cfg.out_dir), "out-dir")?;
    std::fs::create_dir_all(&out_dir)?;
    let registry = load_registry(a.registry, cfg)?;
    let exp = ExperimentConfig::default();
    let actions = exp.train_actions(&registry)?;
    let windows = codec_corpus(&exp.env, &registry, &actions, a.windows, a.seed)?;
    let wpath = out_dir.join("windows.bin");
    write_windows(&wpath, &windows)?;
    eprintln!("wrote {} windows to {}", windows.len(), wpath.display());
    if let Some(codec_path) = pick(a.codec, &cfg.codec) {
        let codec = Codec::load(&codec_path)?;
        let env = SyntheticEnv::new(env_config_for(&codec), codec, registry)?;
        let corpus = CorpusConfig { episodes: a.episodes, steps: a.steps, actions, seed: a.seed };
        let ds = ecgwm_core::rollout_harness::generate_transitions(&env, &corpus, &PatientProfile::default())?;
        let tpath = out_dir.join("transitions.bin");
        ds.save(&tpath)?;
        eprintln!("wrote {} transitions to {}", ds.records.len(), tpath.display());
    }
    Ok(0)
}

fn train_codec_cmd(cfg: &RunConfig, a: TrainCodecArgs) -> Result<i32, CliError> {
    let registry = load_registry(a.registry, cfg)?;
    let exp = ExperimentConfig::default();
    let windows = match &a.data {
        Some(p) => read_windows(p)?,
        None => exp.codec_corpus(&registry)?,
    };
    let first = windows.first().ok_or_else(|| CliError::Usage("empty window corpus".into()))?;
    let config = CodecConfig {
        channels: first.channels(),
        window: first.len(),
        latent_dim: pick(a.latent_dim, &cfg.latent_dim).unwrap_or(exp.codec.latent_dim),
        epochs: a.epochs.unwrap_or(exp.codec.epochs),
        seed: a.seed,
        ..exp.codec.clone()
    };
    let codec = train_codec(&windows, &config)?;
    codec.save(&a.out)?;
    eprintln!("codec saved to {} (relative reconstruction error {:.4})", a.out.display(), codec.log.relative_error());
    Ok(0)
}

fn train_wm(cfg: &RunConfig, a: TrainWmArgs) -> Result<i32, CliError> {
    let codec = Codec::load(&require(pick(a.codec, &cfg.codec), "codec")?)?;
    let registry = load_registry(a.registry, cfg)?;
    let env = SyntheticEnv::new(env_config_for(&codec), codec, registry)?;
    let ds = match &a.data {
        Some(p) => TransitionDataset::load(p)?,
        None => {
            let corpus = CorpusConfig {
                episodes: a.episodes,
                steps: a.steps,
                actions: single_actions(env.registry(), &ExperimentConfig::default().train_doses)?,
                seed: a.seed,
            };
            ecgwm_core::rollout_harness::generate_transitions(&env, &corpus, &PatientProfile::default())?
        }
    };
    let base = ExperimentConfig::default().world_model;
    let config = WorldModelConfig {
        latent_dim: env.latent_dim(),
        diffusion_steps: pick(a.diffusion_steps, &cfg.diffusion_steps).unwrap_or(base.diffusion_steps),
        c: pick(a.c, &cfg.c).unwrap_or(base.c),
        epochs: a.epochs.unwrap_or(base.epochs),
        seed: a.seed,
        ..base
    };
    let model = train_world_model(&ds, env.codec(), &env.epk_config(), env.registry(), &config, None)?;
    model.save(&a.out)?;
    eprintln!("world model saved to {}", a.out.display());
    Ok(0)
}

fn service_err(e: ServiceError) -> CliError {
    match e {
        ServiceError::BadRequest(_) | ServiceError::Infeasible { .. } => CliError::Usage(e.to_string()),
        ServiceError::Internal(m) => CliError::Config(m),
    }
}

fn simulate(cfg: &RunConfig, a: SimulateArgs) -> Result<i32, CliError> {
    let engine = load_engine(&a.paths, cfg)?;
    let req = SimulationRequest {
        baseline: Baseline::Preset { name: a.preset },
        action_id: a.action,
        dose: a.dose,
        k: pick(a.k, &cfg.k).unwrap_or(3),
        lambda: pick(a.lambda, &cfg.lambda).unwrap_or(0.6),
        seed: a.seed,
        profile: None,
        aggregate: Default::default(),
    };
    let resp = engine.simulate(&req).map_err(service_err)?;
    write_output(a.out.as_deref(), &report_bytes(&resp))?;
    Ok(0)
}

/// Request the `rank` subcommand sends to the engine; the HTTP route accepts the same JSON.
pub fn rank_request(a: &RankArgs, cfg: &RunConfig) -> RankRequest {
    RankRequest {
        baseline: Baseline::Preset { name: a.preset.clone() },
        action_ids: a.actions.clone(),
        k: pick(a.k, &cfg.k).unwrap_or(3),
        lambda: pick(a.lambda, &cfg.lambda).unwrap_or(0.6),
        seed: a.seed,
        profile: None,
        aggregate: Default::default(),
    }
}

fn rank(cfg: &RunConfig, a: RankArgs) -> Result<i32, CliError> {
    let engine = load_engine(&a.paths, cfg)?;
    let report = engine.rank(&rank_request(&a, cfg)).map_err(service_err)?;
    write_output(a.out.as_deref(), &report_bytes(&report))?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct HorizonRow {
    horizon: usize,
    episodes: usize,
    closed_loop_latent_mse: f64,
    oracle_latent_mse: f64,
    delta: f64,
    closed_loop_signal_mse: f64,
    oracle_signal_mse: f64,
    failures: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn rollout_cmd(cfg: &RunConfig, a: RolloutArgs) -> Result<i32, CliError> {
    let engine = load_engine(&a.paths, cfg)?;
    let horizons = pick(a.horizons, &cfg.horizons).unwrap_or_else(|| vec![1, 2, 5]);
    let h_max = *horizons.iter().max().ok_or_else(|| CliError::Usage("--horizons must not be empty".into()))?;
    if horizons.contains(&0) {
        return Err(CliError::Usage("horizons must be >= 1".into()));
    }
    let env = engine.env();
    let actions = single_actions(env.registry(), &ExperimentConfig::default().test_doses)?;
    let suite_cfg = SuiteConfig { episodes: a.episodes, horizon: h_max, decision_states: 0, missing_cases: 0, seed: a.seed };
    let suite = build_eval_suite(env, &actions, &actions, &suite_cfg)?;
    let pred = ModelPredictor { model: engine.model(), profile: PatientProfile::default() };
    let mut rows = Vec::new();
    for &h in &horizons {
        let (mut cl, mut or, mut cls, mut ors, mut failures) = (vec![], vec![], vec![], vec![], 0);
        for ep in &suite.episodes {
            let cmp = rollout_pair(&pred, env, &ep.z0, &ep.actions[..h], ep.seed);
            if !(cmp.closed_loop.is_complete() && cmp.oracle.is_complete()) {
                failures += 1;
                continue;
            }
            cl.push(cmp.closed_loop.mean_latent_mse());
            or.push(cmp.oracle.mean_latent_mse());
            cls.push(mean(&cmp.closed_loop.signal_mse));
            ors.push(mean(&cmp.oracle.signal_mse));
        }
        rows.push(HorizonRow {
            horizon: h,
            episodes: cl.len(),
            closed_loop_latent_mse: mean(&cl),
            oracle_latent_mse: mean(&or),
            delta: mean(&cl) - mean(&or),
            closed_loop_signal_mse: mean(&cls),
            oracle_signal_mse: mean(&ors),
            failures,
        });
    }
    let body = serde_json::json!({"schema_version": crate::config::SCHEMA_VERSION, "seed": a.seed, "horizons": rows});
    write_output(a.out.as_deref(), &report_bytes(&body))?;
    Ok(0)
}

fn ablate(cfg: &RunConfig, a: AblateArgs) -> Result<i32, CliError> {
    let out_dir = require(pick(a.out_dir, &cfg.out_dir), "out-dir")?;
    let registry = load_registry(a.registry, cfg)?;
    let mut exp = ExperimentConfig::default();
    if let Some(e) = a.epochs {
        exp.world_model.epochs = e;
    }
    if let Some(e) = a.episodes {
        exp.episodes = e;
    }
    if let Some(e) = a.codec_epochs {
        exp.codec.epochs = e;
    }
    if let Some(d) = cfg.latent_dim {
        exp.codec.latent_dim = d;
        exp.world_model.latent_dim = d;
    }
    if let Some(n) = cfg.diffusion_steps {
        exp.world_model.diffusion_steps = n;
    }
    let mut grid = AblationGrid::default();
    if let Some(c) = pick(a.c, &cfg.c.map(|c| vec![c])) {
        grid.c_values = c;
    }
    if let Some(s) = pick(a.seeds, &cfg.seeds) {
        grid.seeds = s;
    }
    if let Some(k) = cfg.k {
        grid.decision_k = k;
    }
    if let Some(l) = cfg.lambda {
        grid.lambdas = vec![l];
    }
    let profile = PatientProfile::default();
    let env = exp.build_env(&registry)?;
    let test = exp.test_actions(&registry)?;
    let suite = build_eval_suite(&env, &test, &test, &SuiteConfig::default())?;
    let train = |c: f64, seed: u64| {
        let ds = exp.corpus(&env, seed, &profile)?;
        exp.train_model(&env, &ds, c, seed)
    };
    let report = ablation_battery(&env, &suite, &grid, &profile, &train);
    for p in report.write(&out_dir)? {
        eprintln!("wrote {}", p.display());
    }
    let failed = report.cells.iter().filter(|c| c.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} cell(s) failed; see index.json");
    }
    Ok(0)
}

fn verify_theory(a: VerifyTheoryArgs) -> Result<i32, CliError> {
    let bed = GaussianTestBed::standard_1d(a.m, a.gamma);
    let mut budget = PropositionBudget::default();
    if let Some(s) = a.langevin_steps {
        budget.langevin.steps = s;
        budget.langevin.burn_in = budget.langevin.burn_in.min(s / 10);
    }
    let report = verify_propositions(&bed, &budget)?;
    write_output(Some(&a.out), &report_bytes(&report))?;
    let pass = report.all_pass();
    eprintln!("propositions {} (report: {})", if pass { "pass" } else { "FAIL" }, a.out.display());
    Ok(if pass { 0 } else { 2 })
}

fn serve(cfg: &RunConfig, a: ServeArgs) -> Result<i32, CliError> {
    let engine = Arc::new(load_engine(&a.paths, cfg)?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().map_err(|e| CliError::Usage(format!("bad address: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(http::serve(engine, addr))?;
    Ok(0)
}
