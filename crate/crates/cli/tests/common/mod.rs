#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ecgwm_core::action_space::DrugRegistry;
use ecgwm_core::epk_world_model::{train_world_model, WorldModelConfig};
use ecgwm_core::latent_codec::{train_codec, CodecConfig};
use ecgwm_core::rollout_harness::{codec_corpus, generate_transitions, single_actions, CorpusConfig, EnvConfig, SyntheticEnv};
use ecgwm_core::signal_metrics::PatientProfile;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub codec: PathBuf,
    pub world_model: PathBuf,
}

/// Tiny codec and world model, trained in a few seconds, saved to a temp dir.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let registry = DrugRegistry::default_registry();
    let env_cfg = EnvConfig::default();
    let actions = single_actions(&registry, &[0.5, 1.0]).unwrap();
    let windows = codec_corpus(&env_cfg, &registry, &actions, 32, 0).unwrap();
    let codec_cfg = CodecConfig { latent_dim: 4, hidden: vec![32], epochs: 150, ..CodecConfig::default() };
    let codec = train_codec(&windows, &codec_cfg).unwrap();
    let codec_path = dir.path().join("codec.bin");
    codec.save(&codec_path).unwrap();

    let env = SyntheticEnv::new(env_cfg, codec, registry.clone()).unwrap();
    let corpus = CorpusConfig { episodes: 4, steps: 2, actions, seed: 0 };
    let ds = generate_transitions(&env, &corpus, &PatientProfile::default()).unwrap();
    let wm_cfg = WorldModelConfig {
        latent_dim: 4,
        diffusion_steps: 10,
        time_embed_dim: 4,
        hidden: vec![16],
        proj_len: 16,
        proj_hidden: Some(8),
        epochs: 2,
        batch_size: 4,
        ..WorldModelConfig::default()
    };
    let model = train_world_model(&ds, env.codec(), &env.epk_config(), &registry, &wm_cfg, None).unwrap();
    let wm_path = dir.path().join("wm.bin");
    model.save(&wm_path).unwrap();
    Fixture { dir, codec: codec_path, world_model: wm_path }
}

pub fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}
