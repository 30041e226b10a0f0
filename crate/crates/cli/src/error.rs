use ecgwm_core::action_space::ActionError;
use ecgwm_core::diffusion_engine::DiffusionError;
use ecgwm_core::epk_world_model::EpkError;
use ecgwm_core::io::FormatError;
use ecgwm_core::latent_codec::CodecError;
use ecgwm_core::risk_decision::RiskError;
use ecgwm_core::rollout_harness::HarnessError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Model(#[from] EpkError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Format(#[from] FormatError),
}
