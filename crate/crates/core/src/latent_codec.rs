//! Trainable waveform codec mapping one-beat windows to latent vectors.
//!
//! The encoder and decoder are small [`Mlp`]s over the channel-major flattened
//! window. After training, latents are standardized per dimension and the
//! affine map is folded into the outer layers, so the stored networks emit
//! and accept standardized coordinates directly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ecg_ode::{default_channel_labels, Waveform};
use crate::io::{self, FormatError};
use crate::nn::{cosine_lr, Activation, AdamW, Mlp};

pub type LatentState = Vec<f64>;

pub const CODEC_MAGIC: &[u8] = b"CWMCODEC1";

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("shape mismatch: expected {expected_channels}x{expected_len}, got {channels}x{len}")]
    Shape { expected_channels: usize, expected_len: usize, channels: usize, len: usize },
    #[error("latent dimension mismatch: expected {expected}, got {got}")]
    LatentDim { expected: usize, got: usize },
    #[error("non-finite latent")]
    NonFinite,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("need at least two latent samples")]
    TooFewSamples,
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Deterministic,
    Variational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub channels: usize,
    pub window: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub mode: CodecMode,
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            channels: 2,
            window: 256,
            latent_dim: 16,
            hidden: vec![128],
            activation: Activation::Tanh,
            mode: CodecMode::Deterministic,
            kl_weight: 0.0,
            epochs: 300,
            batch_size: 16,
            learning_rate: 2e-3,
            lr_floor: 2e-5,
            weight_decay: 0.0,
            standardize: true,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |m: &str| Err(CodecError::Config(m.to_string()));
        if self.channels == 0 || self.window == 0 || self.latent_dim == 0 {
            return bad("channels, window and latent_dim must be positive");
        }
        if !(self.kl_weight >= 0.0) {
            return bad("kl_weight must be non-negative");
        }
        if self.mode == CodecMode::Deterministic && self.kl_weight != 0.0 {
            return bad("deterministic mode requires kl_weight = 0");
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("batch_size and learning_rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecLog {
    pub epochs: Vec<EpochLoss>,
    /// Mean per-sample reconstruction MSE over the training set after training.
    pub final_recon_mse: f64,
    /// Largest per-sample reconstruction MSE over the training set.
    pub max_sample_mse: f64,
    /// Mean per-element variance of the training signals.
    pub signal_variance: f64,
    pub seed: u64,
}

impl CodecLog {
    pub fn relative_error(&self) -> f64 {
        self.final_recon_mse / self.signal_variance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    channels: usize,
    window: usize,
    latent_dim: usize,
    sample_rate: f64,
    mode: CodecMode,
    kl_weight: f64,
    encoder: Mlp,
    decoder: Mlp,
    pub log: CodecLog,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CodecHeader {
    channels: usize,
    window: usize,
    latent_dim: usize,
    sample_rate: f64,
    mode: CodecMode,
    kl_weight: f64,
    encoder_sizes: Vec<usize>,
    decoder_sizes: Vec<usize>,
    activation: Activation,
    log: CodecLog,
}

impl Codec {
    /// Identity codec (`d = C·window`) with the decoder scaled by `scale`.
    pub fn identity_scaled(channels: usize, window: usize, sample_rate: f64, scale: f64) -> Self {
        let n = channels * window;
        let mut encoder = Mlp::zeros(&[n, n], Activation::Identity);
        let mut decoder = Mlp::zeros(&[n, n], Activation::Identity);
        for i in 0..n {
            encoder.layer_mut(0).0[i * n + i] = 1.0;
            decoder.layer_mut(0).0[i * n + i] = scale;
        }
        Codec {
            channels,
            window,
            latent_dim: n,
            sample_rate,
            mode: CodecMode::Deterministic,
            kl_weight: 0.0,
            encoder,
            decoder,
            log: CodecLog::default(),
        }
    }

    pub fn identity(channels: usize, window: usize, sample_rate: f64) -> Self {
        Self::identity_scaled(channels, window, sample_rate, 1.0)
    }

    /// Untrained codec with random weights.
    pub fn init(config: &CodecConfig, sample_rate: f64) -> Result<Self, CodecError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.channels * config.window;
        let d = config.latent_dim;
        let head = if config.mode == CodecMode::Variational { 2 * d } else { d };
        let mut enc_sizes = vec![n];
        enc_sizes.extend(&config.hidden);
        enc_sizes.push(head);
        let mut dec_sizes = vec![d];
        dec_sizes.extend(config.hidden.iter().rev());
        dec_sizes.push(n);
        Ok(Codec {
            channels: config.channels,
            window: config.window,
            latent_dim: d,
            sample_rate,
            mode: config.mode,
            kl_weight: config.kl_weight,
            encoder: Mlp::new(&enc_sizes, config.activation, &mut rng),
            decoder: Mlp::new(&dec_sizes, config.activation, &mut rng),
            log: CodecLog { seed: config.seed, ..CodecLog::default() },
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn mode(&self) -> CodecMode {
        self.mode
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    fn check_shape(&self, w: &Waveform) -> Result<(), CodecError> {
        if w.channels() != self.channels || w.len() != self.window {
            return Err(CodecError::Shape {
                expected_channels: self.channels,
                expected_len: self.window,
                channels: w.channels(),
                len: w.len(),
            });
        }
        Ok(())
    }

    /// Mean latent (the mean head in variational mode).
    pub fn encode(&self, w: &Waveform) -> Result<LatentState, CodecError> {
        self.check_shape(w)?;
        Ok(self.encode_flat(w.as_flat()))
    }

    pub fn encode_flat(&self, x: &[f64]) -> LatentState {
        let mut h = self.encoder.forward(x);
        h.truncate(self.latent_dim);
        h
    }

    /// Reparameterized draw from the variational posterior; equals [`Codec::encode`]
    /// in deterministic mode.
    pub fn encode_sample<R: Rng>(&self, w: &Waveform, rng: &mut R) -> Result<LatentState, CodecError> {
        self.check_shape(w)?;
        let h = self.encoder.forward(w.as_flat());
        let d = self.latent_dim;
        if self.mode == CodecMode::Deterministic {
            return Ok(h);
        }
        Ok((0..d)
            .map(|j| {
                let e: f64 = rng.sample(StandardNormal);
                h[j] + (0.5 * h[d + j]).exp() * e
            })
            .collect())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Waveform, CodecError> {
        if z.len() != self.latent_dim {
            return Err(CodecError::LatentDim { expected: self.latent_dim, got: z.len() });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::NonFinite);
        }
        let flat = self.decoder.forward(z);
        let rows: Vec<Vec<f64>> = flat.chunks(self.window).map(<[f64]>::to_vec).collect();
        Waveform::new(rows, self.sample_rate, default_channel_labels(self.channels)).map_err(|_| CodecError::NonFinite)
    }

    pub fn decode_flat(&self, z: &[f64]) -> Vec<f64> {
        self.decoder.forward(z)
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }

    /// Folds `z' = (z − mean)/std` into the encoder output layer and its
    /// inverse into the decoder input layer.
    pub fn fold_standardization(&mut self, mean: &[f64], std: &[f64]) {
        let d = self.latent_dim;
        let last = self.encoder.num_layers() - 1;
        let n_in = self.encoder.sizes()[last];
        let (w, b) = self.encoder.layer_mut(last);
        for j in 0..d {
            for v in &mut w[j * n_in..(j + 1) * n_in] {
                *v /= std[j];
            }
            b[j] = (b[j] - mean[j]) / std[j];
        }
        if self.mode == CodecMode::Variational {
            for j in 0..d {
                b[d + j] -= 2.0 * std[j].ln();
            }
        }
        let n_out = self.decoder.sizes()[1];
        let (w, b) = self.decoder.layer_mut(0);
        for o in 0..n_out {
            let row = &mut w[o * d..(o + 1) * d];
            let mut shift = 0.0;
            for j in 0..d {
                shift += row[j] * mean[j];
                row[j] *= std[j];
            }
            b[o] += shift;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let header = self.header();
        let mut weights = self.encoder.params().to_vec();
        weights.extend_from_slice(self.decoder.params());
        io::write_checkpoint(path, CODEC_MAGIC, &header, &weights)?;
        Ok(())
    }

    fn header(&self) -> CodecHeader {
        CodecHeader {
            channels: self.channels,
            window: self.window,
            latent_dim: self.latent_dim,
            sample_rate: self.sample_rate,
            mode: self.mode,
            kl_weight: self.kl_weight,
            encoder_sizes: self.encoder.sizes().to_vec(),
            decoder_sizes: self.decoder.sizes().to_vec(),
            activation: self.encoder.activation(),
            log: self.log.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let (h, weights): (CodecHeader, Vec<f64>) = io::read_checkpoint(path, CODEC_MAGIC)?;
        let ne = Mlp::count(&h.encoder_sizes);
        if weights.len() != ne + Mlp::count(&h.decoder_sizes) {
            return Err(FormatError::Invalid("codec weight count does not match architecture".into()).into());
        }
        let encoder = Mlp::from_params(&h.encoder_sizes, h.activation, weights[..ne].to_vec())
            .ok_or_else(|| FormatError::Invalid("encoder shape".into()))?;
        let decoder = Mlp::from_params(&h.decoder_sizes, h.activation, weights[ne..].to_vec())
            .ok_or_else(|| FormatError::Invalid("decoder shape".into()))?;
        if *h.encoder_sizes.last().unwrap_or(&0) < h.latent_dim || h.decoder_sizes[0] != h.latent_dim {
            return Err(FormatError::Invalid("latent dimension inconsistent with networks".into()).into());
        }
        Ok(Codec {
            channels: h.channels,
            window: h.window,
            latent_dim: h.latent_dim,
            sample_rate: h.sample_rate,
            mode: h.mode,
            kl_weight: h.kl_weight,
            encoder,
            decoder,
            log: h.log,
        })
    }
}

/// Loss terms and gradients of one mini-batch.
#[derive(Debug, Clone)]
pub struct CodecLossGrad {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub grad_encoder: Vec<f64>,
    pub grad_decoder: Vec<f64>,
}

/// Batch loss `mean_i[ mse(x̂_i, x_i) + kl_weight·KL_i ]` with analytic gradients.
///
/// `noise[i]` supplies the reparameterization draw for sample `i` in
/// variational mode and is ignored otherwise.
pub fn codec_loss_grad(codec: &Codec, batch: &[&[f64]], noise: &[Vec<f64>]) -> CodecLossGrad {
    let d = codec.latent_dim;
    let bsz = batch.len() as f64;
    let mut ge = vec![0.0; codec.encoder.params().len()];
    let mut gd = vec![0.0; codec.decoder.params().len()];
    let (mut recon, mut kl) = (0.0, 0.0);
    for (i, x) in batch.iter().enumerate() {
        let ec = codec.encoder.forward_cached(x);
        let h = ec.output();
        let z: Vec<f64> = match codec.mode {
            CodecMode::Deterministic => h.to_vec(),
            CodecMode::Variational => (0..d).map(|j| h[j] + (0.5 * h[d + j]).exp() * noise[i][j]).collect(),
        };
        let dc = codec.decoder.forward_cached(&z);
        let xh = dc.output();
        let n = xh.len() as f64;
        let mut g_out = Vec::with_capacity(xh.len());
        let mut se = 0.0;
        for (a, b) in xh.iter().zip(x.iter()) {
            let r = a - b;
            se += r * r;
            g_out.push(2.0 * r / (n * bsz));
        }
        recon += se / n;
        let gz = codec.decoder.backward(&dc, &g_out, &mut gd);
        let gh: Vec<f64> = match codec.mode {
            CodecMode::Deterministic => gz,
            CodecMode::Variational => {
                let mut gh = vec![0.0; 2 * d];
                let kw = codec.kl_weight;
                for j in 0..d {
                    let (mu, lv) = (h[j], h[d + j]);
                    let s = (0.5 * lv).exp();
                    kl += 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
                    gh[j] = gz[j] + kw * mu / bsz;
                    gh[d + j] = gz[j] * noise[i][j] * 0.5 * s + kw * 0.5 * (lv.exp() - 1.0) / bsz;
                }
                gh
            }
        };
        codec.encoder.backward(&ec, &gh, &mut ge);
    }
    recon /= bsz;
    kl /= bsz;
    let kl_term = if codec.mode == CodecMode::Variational { codec.kl_weight * kl } else { 0.0 };
    CodecLossGrad { recon, kl: if codec.mode == CodecMode::Variational { kl } else { 0.0 }, total: recon + kl_term, grad_encoder: ge, grad_decoder: gd }
}

fn per_sample_mse(codec: &Codec, x: &[f64]) -> f64 {
    let xh = codec.decode_flat(&codec.encode_flat(x));
    xh.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64
}

/// Mini-batch AdamW training with a cosine learning-rate schedule.
pub fn train_codec(dataset: &[Waveform], config: &CodecConfig) -> Result<Codec, CodecError> {
    config.validate()?;
    let first = dataset.first().ok_or(CodecError::EmptyDataset)?;
    let mut codec = Codec::init(config, first.sample_rate())?;
    for w in dataset {
        codec.check_shape(w)?;
    }
    let data: Vec<&[f64]> = dataset.iter().map(Waveform::as_flat).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
    let mut opt_e = AdamW::new(codec.encoder.params().len(), config.weight_decay);
    let mut opt_d = AdamW::new(codec.decoder.params().len(), config.weight_decay);
    let batches_per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochLoss { recon: 0.0, kl: 0.0, total: 0.0 };
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| data[i]).collect();
            let noise: Vec<Vec<f64>> = match config.mode {
                CodecMode::Deterministic => Vec::new(),
                CodecMode::Variational => {
                    (0..batch.len()).map(|_| (0..config.latent_dim).map(|_| rng.sample(StandardNormal)).collect()).collect()
                }
            };
            let lg = codec_loss_grad(&codec, &batch, &noise);
            if !lg.total.is_finite() {
                return Err(CodecError::Diverged { epoch, loss: lg.total });
            }
            let lr = cosine_lr(config.learning_rate, config.lr_floor, step, total_steps);
            opt_e.step(codec.encoder.params_mut(), &lg.grad_encoder, lr);
            opt_d.step(codec.decoder.params_mut(), &lg.grad_decoder, lr);
            step += 1;
            let wgt = batch.len() as f64 / data.len() as f64;
            acc.recon += lg.recon * wgt;
            acc.kl += lg.kl * wgt;
            acc.total += lg.total * wgt;
        }
        codec.log.epochs.push(acc);
    }

    if config.standardize && data.len() >= 2 {
        let latents: Vec<LatentState> = data.iter().map(|x| codec.encode_flat(x)).collect();
        let (mean, std) = latent_moments(&latents);
        let floor = 1e-3 * std.iter().cloned().fold(0.0, f64::max).max(1e-12);
        let std: Vec<f64> = std.iter().map(|s| s.max(floor)).collect();
        codec.fold_standardization(&mean, &std);
    }

    let mses: Vec<f64> = data.iter().map(|x| per_sample_mse(&codec, x)).collect();
    codec.log.final_recon_mse = mses.iter().sum::<f64>() / mses.len() as f64;
    codec.log.max_sample_mse = mses.iter().cloned().fold(0.0, f64::max);
    codec.log.signal_variance = signal_variance(&data);
    if !codec.is_finite() || !codec.log.final_recon_mse.is_finite() {
        return Err(CodecError::Diverged { epoch: config.epochs, loss: codec.log.final_recon_mse });
    }
    Ok(codec)
}

/// Per-element variance of the signals around their per-element mean.
fn signal_variance(data: &[&[f64]]) -> f64 {
    let n = data[0].len();
    let m = data.len() as f64;
    let mut total = 0.0;
    for k in 0..n {
        let mean = data.iter().map(|x| x[k]).sum::<f64>() / m;
        total += data.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / m;
    }
    total / n as f64
}

/// Per-dimension mean and (population) standard deviation.
pub fn latent_moments(latents: &[LatentState]) -> (Vec<f64>, Vec<f64>) {
    let d = latents[0].len();
    let m = latents.len() as f64;
    let mut mean = vec![0.0; d];
    for z in latents {
        for j in 0..d {
            mean[j] += z[j] / m;
        }
    }
    let mut var = vec![0.0; d];
    for z in latents {
        for j in 0..d {
            var[j] += (z[j] - mean[j]).powi(2) / m;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Empirical bi-Lipschitz constants of the decoder over sampled latent pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProbe {
    pub c1: f64,
    pub c2: f64,
    pub argmin_pair: (usize, usize),
    pub argmax_pair: (usize, usize),
    pub pairs_evaluated: usize,
    pub duplicates_skipped: usize,
}

/// Uses every pair when `pair_count` covers them all, otherwise a seeded random subset.
pub fn bi_lipschitz_probe(codec: &Codec, samples: &[LatentState], pair_count: usize, seed: u64) -> Result<LipschitzProbe, CodecError> {
    if samples.len() < 2 {
        return Err(CodecError::TooFewSamples);
    }
    let n = samples.len();
    let total = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if pair_count >= total {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..pair_count)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (i.min(j), i.max(j))
            })
            .collect()
    };
    let decoded: Vec<Vec<f64>> = samples
        .iter()
        .map(|z| codec.decode(z).map(|w| w.as_flat().to_vec()))
        .collect::<Result<_, _>>()?;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut probe = LipschitzProbe {
        c1: f64::INFINITY,
        c2: 0.0,
        argmin_pair: (0, 0),
        argmax_pair: (0, 0),
        pairs_evaluated: 0,
        duplicates_skipped: 0,
    };
    for (i, j) in pairs {
        let dz = dist(&samples[i], &samples[j]);
        if dz == 0.0 {
            probe.duplicates_skipped += 1;
            continue;
        }
        let ratio = dist(&decoded[i], &decoded[j]) / dz;
        probe.pairs_evaluated += 1;
        if ratio < probe.c1 {
            probe.c1 = ratio;
            probe.argmin_pair = (i, j);
        }
        if ratio > probe.c2 {
            probe.c2 = ratio;
            probe.argmax_pair = (i, j);
        }
    }
    if probe.pairs_evaluated == 0 {
        return Err(CodecError::TooFewSamples);
    }
    Ok(probe)
}

/// Linear-interpolation resampling of `x` to `n` points spanning the same interval.
pub fn resample_linear(x: &[f64], n: usize) -> Vec<f64> {
    if x.is_empty() || n == 0 {
        return vec![0.0; n];
    }
    if x.len() == 1 || n == 1 {
        return vec![x[0]; n];
    }
    let scale = (x.len() - 1) as f64 / (n - 1) as f64;
    (0..n)
        .map(|k| {
            let pos = k as f64 * scale;
            let i = (pos.floor() as usize).min(x.len() - 2);
            let f = pos - i as f64;
            x[i] * (1.0 - f) + x[i + 1] * f
        })
        .collect()
}

/// Beat-aligned windows: each R-peak with both neighbours contributes the
/// span between the RR midpoints, resampled to `window` samples per channel.
pub fn beat_windows(w: &Waveform, peaks: &[usize], window: usize) -> Vec<Waveform> {
    let mut out = Vec::new();
    for k in 1..peaks.len().saturating_sub(1) {
        let start = (peaks[k - 1] + peaks[k]) / 2;
        let end = (peaks[k] + peaks[k + 1]) / 2;
        if end <= start + 1 {
            continue;
        }
        let rows: Vec<Vec<f64>> = (0..w.channels())
            .map(|c| {
                let seg = &w.channel(c)[start..end];
                // Sample the half-open span so the resampled window stays one cycle long.
                let mut ext = seg.to_vec();
                ext.push(w.channel(c)[end.min(w.len() - 1)]);
                let mut r = resample_linear(&ext, window + 1);
                r.pop();
                r
            })
            .collect();
        let fs = w.sample_rate() * window as f64 / (end - start) as f64;
        if let Ok(bw) = Waveform::new(rows, fs, w.channel_labels().to_vec()) {
            out.push(bw);
        }
    }
    out
}
