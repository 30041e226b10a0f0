//! Phase-driven dynamical ECG model.
//!
//! The waveform `y(θ)` obeys
//!
//! ```text
//! dy/dθ = −Σ_i α_i Δθ_i exp(−Δθ_i² / (2 b_i²)) − (y − y0)
//! ```
//!
//! over the five wave components P, Q, R, S, T. The model is integrated with a
//! fixed-step classical Runge-Kutta scheme and projected onto `C` channels by a
//! fixed lead-mixing vector.

use std::f64::consts::{PI, TAU};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OdeError {
    #[error("invalid ODE parameters: {0}")]
    InvalidParams(String),
    #[error("invalid phase window: {0}")]
    InvalidWindow(String),
    #[error("non-finite initial value {0}")]
    NonFiniteInit(f64),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("invalid synthesis config: {0}")]
    InvalidSynth(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WaveLabel {
    P,
    Q,
    R,
    S,
    T,
}

impl WaveLabel {
    pub const ALL: [WaveLabel; 5] = [WaveLabel::P, WaveLabel::Q, WaveLabel::R, WaveLabel::S, WaveLabel::T];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for WaveLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One Gaussian wave event of the template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveComponent {
    pub label: WaveLabel,
    pub alpha: f64,
    /// Width in radians, strictly positive.
    pub b: f64,
    /// Center in radians, in `[0, 2π)`.
    pub theta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawOdeParams {
    waves: Vec<WaveComponent>,
    y0: f64,
}

/// The full parameter set of the template: five components plus baseline.
///
/// Components are always stored in P, Q, R, S, T order regardless of the
/// order they were supplied in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawOdeParams", into = "RawOdeParams")]
pub struct OdeParams {
    waves: [WaveComponent; 5],
    y0: f64,
}

impl TryFrom<RawOdeParams> for OdeParams {
    type Error = OdeError;

    fn try_from(raw: RawOdeParams) -> Result<Self, Self::Error> {
        OdeParams::new(raw.waves, raw.y0)
    }
}

impl From<OdeParams> for RawOdeParams {
    fn from(p: OdeParams) -> Self {
        RawOdeParams { waves: p.waves.to_vec(), y0: p.y0 }
    }
}

impl OdeParams {
    pub fn new(waves: Vec<WaveComponent>, y0: f64) -> Result<Self, OdeError> {
        if waves.len() != 5 {
            return Err(OdeError::InvalidParams(format!("expected 5 wave components, got {}", waves.len())));
        }
        let mut slots: [Option<WaveComponent>; 5] = [None; 5];
        for w in waves {
            let slot = &mut slots[w.label.index()];
            if slot.is_some() {
                return Err(OdeError::InvalidParams(format!("duplicate wave label {}", w.label)));
            }
            *slot = Some(w);
        }
        let waves = slots.map(|w| w.expect("five distinct labels fill every slot"));
        let params = OdeParams { waves, y0 };
        params.validate()?;
        Ok(params)
    }

    /// Canonical McSharry defaults, exposed as the preset `"healthy"`.
    pub fn healthy() -> Self {
        let thetas = [-PI / 3.0, -PI / 12.0, 0.0, PI / 12.0, PI / 2.0];
        let alphas = [1.2, -5.0, 30.0, -7.5, 0.75];
        let widths = [0.25, 0.1, 0.1, 0.1, 0.4];
        let waves = WaveLabel::ALL.map(|label| {
            let i = label.index();
            WaveComponent { label, alpha: alphas[i], b: widths[i], theta: thetas[i].rem_euclid(TAU) }
        });
        OdeParams { waves, y0: 0.0 }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "healthy" => Some(Self::healthy()),
            _ => None,
        }
    }

    /// Template with every amplitude zeroed, leaving only the baseline relaxation.
    pub fn relaxation_only(y0: f64) -> Self {
        let mut p = Self::healthy();
        for w in &mut p.waves {
            w.alpha = 0.0;
        }
        p.y0 = y0;
        p
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        for w in &self.waves {
            if !(w.alpha.is_finite() && w.b.is_finite() && w.theta.is_finite()) {
                return Err(OdeError::InvalidParams(format!("non-finite field in wave {}", w.label)));
            }
            if w.b <= 0.0 {
                return Err(OdeError::InvalidParams(format!("wave {} width must be > 0, got {}", w.label, w.b)));
            }
            if !(0.0..TAU).contains(&w.theta) {
                return Err(OdeError::InvalidParams(format!(
                    "wave {} center must lie in [0, 2π), got {}",
                    w.label, w.theta
                )));
            }
        }
        if !self.y0.is_finite() {
            return Err(OdeError::InvalidParams("non-finite baseline".into()));
        }
        Ok(())
    }

    pub fn waves(&self) -> &[WaveComponent; 5] {
        &self.waves
    }

    pub fn wave(&self, label: WaveLabel) -> &WaveComponent {
        &self.waves[label.index()]
    }

    pub fn wave_mut(&mut self, label: WaveLabel) -> &mut WaveComponent {
        &mut self.waves[label.index()]
    }

    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn set_y0(&mut self, y0: f64) {
        self.y0 = y0;
    }
}

/// How the raw difference `θ − θ_i` is folded back onto the circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseWrap {
    /// Signed wrap to `(−π, π]`; each wave is a symmetric bump around its center.
    #[default]
    Signed,
    /// Literal `mod 2π` into `[0, 2π)`.
    Literal,
}

/// Signed phase difference `θ − θ_i` wrapped to `(−π, π]`.
pub fn wrapped_phase_shift(theta: f64, theta_i: f64) -> f64 {
    phase_shift(theta, theta_i, PhaseWrap::Signed)
}

pub fn phase_shift(theta: f64, theta_i: f64, wrap: PhaseWrap) -> f64 {
    // Reducing θ first keeps large unwrapped phases from losing bits in the subtraction.
    let m = (theta.rem_euclid(TAU) - theta_i).rem_euclid(TAU);
    match wrap {
        PhaseWrap::Literal => m,
        PhaseWrap::Signed => {
            if m > PI {
                m - TAU
            } else {
                m
            }
        }
    }
}

pub fn ode_rhs(y: f64, theta: f64, params: &OdeParams) -> f64 {
    ode_rhs_with(y, theta, params, PhaseWrap::Signed)
}

pub fn ode_rhs_with(y: f64, theta: f64, params: &OdeParams, wrap: PhaseWrap) -> f64 {
    let mut drive = 0.0;
    for w in &params.waves {
        if w.alpha == 0.0 {
            continue;
        }
        let d = phase_shift(theta, w.theta, wrap);
        drive += w.alpha * d * (-d * d / (2.0 * w.b * w.b)).exp();
    }
    -drive - (y - params.y0)
}

/// `L` uniform phase samples spanning `[θ_start, θ_start + Δθ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseWindow {
    theta_start: f64,
    span: f64,
    steps: usize,
}

impl PhaseWindow {
    pub fn new(theta_start: f64, span: f64, steps: usize) -> Result<Self, OdeError> {
        if steps < 2 {
            return Err(OdeError::InvalidWindow(format!("need at least 2 samples, got {steps}")));
        }
        if !(span.is_finite() && span > 0.0) {
            return Err(OdeError::InvalidWindow(format!("span must be finite and > 0, got {span}")));
        }
        if !theta_start.is_finite() {
            return Err(OdeError::InvalidWindow("non-finite start phase".into()));
        }
        Ok(PhaseWindow { theta_start, span, steps })
    }

    pub fn theta_start(&self) -> f64 {
        self.theta_start
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step_size(&self) -> f64 {
        self.span / (self.steps - 1) as f64
    }

    pub fn phase_at(&self, l: usize) -> f64 {
        self.theta_start + l as f64 * self.step_size()
    }
}

/// Classical fixed-step RK4. Element 0 of the result is `y_init`; element
/// `l` is the state at `θ_start + l·Δθ/(L−1)`.
pub fn integrate_rk4(params: &OdeParams, y_init: f64, window: &PhaseWindow) -> Result<Vec<f64>, OdeError> {
    integrate_rk4_with(params, y_init, window, PhaseWrap::Signed)
}

pub fn integrate_rk4_with(
    params: &OdeParams,
    y_init: f64,
    window: &PhaseWindow,
    wrap: PhaseWrap,
) -> Result<Vec<f64>, OdeError> {
    if !y_init.is_finite() {
        return Err(OdeError::NonFiniteInit(y_init));
    }
    let h = window.step_size();
    let mut out = Vec::with_capacity(window.steps);
    let mut y = y_init;
    out.push(y);
    for l in 1..window.steps {
        let theta = window.phase_at(l - 1);
        let k1 = ode_rhs_with(y, theta, params, wrap);
        let k2 = ode_rhs_with(y + 0.5 * h * k1, theta + 0.5 * h, params, wrap);
        let k3 = ode_rhs_with(y + 0.5 * h * k2, theta + 0.5 * h, params, wrap);
        let k4 = ode_rhs_with(y + h * k3, theta + h, params, wrap);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        out.push(y);
    }
    Ok(out)
}

/// Multi-channel sampled signal, stored row-major by channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    channels: usize,
    len: usize,
    sample_rate: f64,
    channel_labels: Vec<String>,
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(rows: Vec<Vec<f64>>, sample_rate: f64, channel_labels: Vec<String>) -> Result<Self, OdeError> {
        let channels = rows.len();
        if channels == 0 {
            return Err(OdeError::InvalidWaveform("need at least one channel".into()));
        }
        let len = rows[0].len();
        if len == 0 {
            return Err(OdeError::InvalidWaveform("need at least one sample".into()));
        }
        if rows.iter().any(|r| r.len() != len) {
            return Err(OdeError::InvalidWaveform("ragged channel lengths".into()));
        }
        if channel_labels.len() != channels {
            return Err(OdeError::InvalidWaveform(format!(
                "{} labels for {} channels",
                channel_labels.len(),
                channels
            )));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(OdeError::InvalidWaveform(format!("bad sample rate {sample_rate}")));
        }
        let samples: Vec<f64> = rows.into_iter().flatten().collect();
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::InvalidWaveform("non-finite sample".into()));
        }
        Ok(Waveform { channels, len, sample_rate, channel_labels, samples })
    }

    /// Builds a waveform from a flat row-major buffer with default channel labels.
    pub fn from_flat(samples: Vec<f64>, channels: usize, sample_rate: f64) -> Result<Self, OdeError> {
        if channels == 0 || !samples.len().is_multiple_of(channels) {
            return Err(OdeError::InvalidWaveform(format!(
                "{} samples do not split into {channels} channels",
                samples.len()
            )));
        }
        let len = samples.len() / channels;
        let rows = samples.chunks(len.max(1)).map(<[f64]>::to_vec).collect();
        Waveform::new(rows, sample_rate, default_channel_labels(channels))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn channel_labels(&self) -> &[String] {
        &self.channel_labels
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c * self.len..(c + 1) * self.len]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.samples
    }

    pub fn duration_secs(&self) -> f64 {
        self.len as f64 / self.sample_rate
    }

    /// Periodic extension: the waveform repeated `n` times end to end.
    pub fn tile(&self, n: usize) -> Waveform {
        let n = n.max(1);
        let mut samples = Vec::with_capacity(self.samples.len() * n);
        for c in 0..self.channels {
            for _ in 0..n {
                samples.extend_from_slice(self.channel(c));
            }
        }
        Waveform { len: self.len * n, samples, channel_labels: self.channel_labels.clone(), ..*self }
    }

    /// Copy with the listed channels replaced by zeros.
    pub fn with_zeroed_channels(&self, mask: &[usize]) -> Waveform {
        let mut out = self.clone();
        for &c in mask {
            if c < self.channels {
                out.samples[c * self.len..(c + 1) * self.len].fill(0.0);
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Waveform {
        let mut out = self.clone();
        out.samples.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Window `[start, start + len)` of every channel.
    pub fn slice(&self, start: usize, len: usize) -> Result<Waveform, OdeError> {
        if len == 0 || start + len > self.len {
            return Err(OdeError::InvalidWaveform(format!(
                "slice [{start}, {}) outside 0..{}",
                start + len,
                self.len
            )));
        }
        let rows = (0..self.channels).map(|c| self.channel(c)[start..start + len].to_vec()).collect();
        Waveform::new(rows, self.sample_rate, self.channel_labels.clone())
    }

    /// Keeps at most `max_points` per channel by uniform decimation.
    pub fn downsampled(&self, max_points: usize) -> Waveform {
        if self.len <= max_points || max_points == 0 {
            return self.clone();
        }
        let stride = self.len.div_ceil(max_points);
        let rows: Vec<Vec<f64>> =
            (0..self.channels).map(|c| self.channel(c).iter().step_by(stride).copied().collect()).collect();
        Waveform::new(rows, self.sample_rate / stride as f64, self.channel_labels.clone())
            .expect("decimating a valid waveform stays valid")
    }
}

const TWELVE_LEADS: [&str; 12] = ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"];

pub fn default_channel_labels(channels: usize) -> Vec<String> {
    if channels == 12 {
        TWELVE_LEADS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..channels).map(|c| format!("ch{c}")).collect()
    }
}

/// Fixed per-channel gains projecting the 1D template onto `C` leads.
pub fn default_lead_mix(channels: usize) -> Vec<f64> {
    match channels {
        1 => vec![1.0],
        2 => vec![1.0, 0.6],
        12 => vec![0.8, 1.0, 0.2, -0.9, 0.3, 0.6, -0.4, 0.5, 0.9, 1.2, 1.0, 0.8],
        n => (0..n).map(|c| 1.0 - 0.5 * c as f64 / n as f64).collect(),
    }
}

/// Integration step ceiling used by the generator, in radians.
pub const MAX_SYNTH_STEP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub beats: usize,
    pub sample_rate: f64,
    pub heart_rate: f64,
    pub lead_mix: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(beats: usize, sample_rate: f64, heart_rate: f64) -> Self {
        SynthConfig { beats, sample_rate, heart_rate, lead_mix: vec![1.0], noise_std: 0.0, seed: 0 }
    }

    /// Phase advance per output sample.
    pub fn phase_per_sample(&self) -> f64 {
        TAU * self.heart_rate / 60.0 / self.sample_rate
    }

    /// RK4 sub-steps per output sample.
    pub fn substeps(&self) -> usize {
        (self.phase_per_sample() / MAX_SYNTH_STEP).ceil().max(1.0) as usize
    }

    pub fn num_samples(&self) -> usize {
        (self.beats as f64 * 60.0 / self.heart_rate * self.sample_rate).round() as usize
    }
}

/// Generator output together with the ground truth it was built from.
#[derive(Debug, Clone)]
pub struct SyntheticEcg {
    pub waveform: Waveform,
    /// The noise-free single-channel template before lead mixing.
    pub template: Vec<f64>,
    /// Unwrapped phase of each output sample.
    pub phase: Vec<f64>,
    /// Samples nearest to each R-wave center crossing.
    pub r_peaks: Vec<usize>,
}

/// Phase of the first output sample; the recording opens mid-diastole.
pub const SYNTH_START_PHASE: f64 = PI;

/// Generates `beats` full cycles at constant phase velocity.
pub fn synth_ecg(params: &OdeParams, config: &SynthConfig) -> Result<SyntheticEcg, OdeError> {
    if config.beats < 1 {
        return Err(OdeError::InvalidSynth("need at least one beat".into()));
    }
    if !(config.sample_rate.is_finite() && config.sample_rate > 0.0) {
        return Err(OdeError::InvalidSynth(format!("bad sample rate {}", config.sample_rate)));
    }
    if !(config.heart_rate.is_finite() && config.heart_rate > 0.0) {
        return Err(OdeError::InvalidSynth(format!("bad heart rate {}", config.heart_rate)));
    }
    if config.lead_mix.is_empty() || config.lead_mix.iter().any(|g| !g.is_finite()) {
        return Err(OdeError::InvalidSynth("lead mix must be non-empty and finite".into()));
    }
    if !(config.noise_std.is_finite() && config.noise_std >= 0.0) {
        return Err(OdeError::InvalidSynth(format!("bad noise std {}", config.noise_std)));
    }
    params.validate()?;

    let n = config.num_samples().max(1);
    let dphi = config.phase_per_sample();
    let sub = config.substeps();

    // Two warm-up cycles put the state on the limit cycle before recording.
    let warm = PhaseWindow::new(SYNTH_START_PHASE - 2.0 * TAU, 2.0 * TAU, 2 * 1024 + 1)?;
    let y_start = *integrate_rk4(params, params.y0, &warm)?.last().expect("non-empty");

    let fine = if n > 1 {
        let window = PhaseWindow::new(SYNTH_START_PHASE, dphi * (n - 1) as f64, (n - 1) * sub + 1)?;
        integrate_rk4(params, y_start, &window)?
    } else {
        vec![y_start]
    };
    let template: Vec<f64> = fine.iter().step_by(sub).copied().collect();
    debug_assert_eq!(template.len(), n);
    let phase: Vec<f64> = (0..n).map(|j| SYNTH_START_PHASE + dphi * j as f64).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let rows: Vec<Vec<f64>> = config
        .lead_mix
        .iter()
        .map(|&g| {
            template
                .iter()
                .map(|&y| {
                    let clean = g * y;
                    if config.noise_std > 0.0 {
                        clean + noise.sample(&mut rng)
                    } else {
                        clean
                    }
                })
                .collect()
        })
        .collect();

    let theta_r = params.wave(WaveLabel::R).theta;
    let mut r_peaks = Vec::new();
    let mut k = ((SYNTH_START_PHASE - theta_r) / TAU).ceil();
    loop {
        let target = theta_r + k * TAU;
        let idx = ((target - SYNTH_START_PHASE) / dphi).round();
        if idx >= n as f64 {
            break;
        }
        if idx >= 0.0 {
            r_peaks.push(idx as usize);
        }
        k += 1.0;
    }

    let waveform = Waveform::new(rows, config.sample_rate, default_channel_labels(config.lead_mix.len()))?;
    Ok(SyntheticEcg { waveform, template, phase, r_peaks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn phase_shift_examples() {
        let ti = 1.3;
        assert_eq!(wrapped_phase_shift(ti, ti), 0.0);
        assert_abs_diff_eq!(wrapped_phase_shift(ti + PI / 2.0, ti), PI / 2.0, epsilon = 1e-15);
        // oracle: direct modular arithmetic then shift into (−π, π]
        let theta = ti - 0.1 + TAU * 3.0;
        let mut oracle = (theta - ti) % TAU;
        if oracle <= -PI {
            oracle += TAU;
        }
        if oracle > PI {
            oracle -= TAU;
        }
        assert_abs_diff_eq!(wrapped_phase_shift(theta, ti), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(wrapped_phase_shift(theta, ti), -0.1, epsilon = 1e-12);
    }

    #[test]
    fn literal_wrap_is_asymmetric() {
        assert_abs_diff_eq!(phase_shift(0.9, 1.0, PhaseWrap::Literal), TAU - 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(phase_shift(0.9, 1.0, PhaseWrap::Signed), -0.1, epsilon = 1e-12);
    }

    #[test]
    fn rhs_fixed_point_and_relaxation() {
        let p = OdeParams::relaxation_only(0.5);
        assert_eq!(ode_rhs(0.5, 2.0, &p), 0.0);
        assert_eq!(ode_rhs(1.5, 2.0, &p), -1.0);
    }

    #[test]
    fn rhs_at_r_center_drops_r_term() {
        let p = OdeParams::healthy();
        let theta = p.wave(WaveLabel::R).theta;
        // term-by-term oracle over the other four components
        let mut expected = 0.0;
        for w in p.waves().iter().filter(|w| w.label != WaveLabel::R) {
            let mut d = (theta - w.theta) % TAU;
            if d > PI {
                d -= TAU;
            } else if d <= -PI {
                d += TAU;
            }
            expected -= w.alpha * d * (-(d * d) / (2.0 * w.b * w.b)).exp();
        }
        assert_abs_diff_eq!(ode_rhs(p.y0(), theta, &p), expected, epsilon = 1e-12);
    }

    #[test]
    fn window_validation() {
        assert!(PhaseWindow::new(0.0, 0.0, 2).is_err());
        assert!(PhaseWindow::new(0.0, 1.0, 1).is_err());
        assert!(PhaseWindow::new(0.0, -1.0, 10).is_err());
    }

    #[test]
    fn nan_init_rejected() {
        let p = OdeParams::healthy();
        let w = PhaseWindow::new(0.0, 1.0, 3).unwrap();
        assert!(matches!(integrate_rk4(&p, f64::NAN, &w), Err(OdeError::NonFiniteInit(_))));
    }

    #[test]
    fn relaxation_matches_analytic() {
        let p = OdeParams::relaxation_only(0.0);
        let w = PhaseWindow::new(0.3, 1.0, 1001).unwrap();
        let ys = integrate_rk4(&p, 1.0, &w).unwrap();
        assert_eq!(ys.len(), 1001);
        assert_eq!(ys[0], 1.0);
        assert_abs_diff_eq!(*ys.last().unwrap(), (-1.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn fixed_point_preserved_exactly() {
        let p = OdeParams::relaxation_only(-0.25);
        let w = PhaseWindow::new(0.0, TAU, 500).unwrap();
        assert!(integrate_rk4(&p, -0.25, &w).unwrap().iter().all(|&y| y == -0.25));
    }

    #[test]
    fn healthy_cycle_peaks_at_r() {
        let p = OdeParams::healthy();
        let theta_r = p.wave(WaveLabel::R).theta;
        // start half a cycle before R, settle onto the limit cycle first
        let start = theta_r - PI;
        let settle = PhaseWindow::new(start - 2.0 * TAU, 2.0 * TAU, 4001).unwrap();
        let y0 = *integrate_rk4(&p, 0.0, &settle).unwrap().last().unwrap();
        let steps = 2001;
        let w = PhaseWindow::new(start, TAU, steps).unwrap();
        let ys = integrate_rk4(&p, y0, &w).unwrap();
        let imax = (0..steps).max_by(|&a, &b| ys[a].total_cmp(&ys[b])).unwrap();
        let peak_phase = w.phase_at(imax);

        // oracle: forward Euler on a 10x denser grid
        let fine = 10 * (steps - 1);
        let h = TAU / fine as f64;
        let mut y = y0;
        let (mut best, mut best_phase) = (y, start);
        for l in 0..fine {
            let th = start + l as f64 * h;
            y += h * ode_rhs(y, th, &p);
            if y > best {
                best = y;
                best_phase = th + h;
            }
        }
        assert!((best_phase - theta_r).abs() < 0.05, "oracle peak at {best_phase}");
        assert!((peak_phase - theta_r).abs() < 0.05, "rk4 peak at {peak_phase}");
    }

    #[test]
    fn params_roundtrip_and_validation() {
        let p = OdeParams::healthy();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"waves\"") && json.contains("\"y0\""));
        let back: OdeParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);

        let mut waves = p.waves().to_vec();
        waves[4].label = WaveLabel::R;
        assert!(OdeParams::new(waves, 0.0).is_err());
        let mut waves = p.waves().to_vec();
        waves[0].b = 0.0;
        assert!(OdeParams::new(waves, 0.0).is_err());
        let mut waves = p.waves().to_vec();
        waves[1].theta = TAU;
        assert!(OdeParams::new(waves, 0.0).is_err());
        assert!(OdeParams::new(p.waves()[..4].to_vec(), 0.0).is_err());
    }

    #[test]
    fn synth_identity_projection_matches_integrator() {
        let p = OdeParams::healthy();
        let cfg = SynthConfig::new(2, 250.0, 72.0);
        let out = synth_ecg(&p, &cfg).unwrap();
        let n = cfg.num_samples();
        let sub = cfg.substeps();
        let warm = PhaseWindow::new(SYNTH_START_PHASE - 2.0 * TAU, 2.0 * TAU, 2049).unwrap();
        let y_start = *integrate_rk4(&p, 0.0, &warm).unwrap().last().unwrap();
        let w = PhaseWindow::new(SYNTH_START_PHASE, cfg.phase_per_sample() * (n - 1) as f64, (n - 1) * sub + 1)
            .unwrap();
        let fine = integrate_rk4(&p, y_start, &w).unwrap();
        let expected: Vec<f64> = fine.iter().step_by(sub).copied().collect();
        assert_eq!(out.waveform.channel(0), &expected[..]);
    }

    #[test]
    fn synth_lead_linearity_and_determinism() {
        let p = OdeParams::healthy();
        let mut cfg = SynthConfig::new(3, 500.0, 60.0);
        cfg.lead_mix = vec![1.0, 2.0];
        let out = synth_ecg(&p, &cfg).unwrap();
        for (a, b) in out.waveform.channel(0).iter().zip(out.waveform.channel(1)) {
            assert_eq!(2.0 * a, *b);
        }
        cfg.noise_std = 0.05;
        cfg.seed = 9;
        let a = synth_ecg(&p, &cfg).unwrap();
        let b = synth_ecg(&p, &cfg).unwrap();
        assert_eq!(a.waveform, b.waveform);
        assert_eq!(out.r_peaks.len(), 3);
    }

    #[test]
    fn synth_rejects_bad_lead_mix() {
        let mut cfg = SynthConfig::new(1, 500.0, 60.0);
        cfg.lead_mix = vec![1.0, f64::INFINITY];
        assert!(synth_ecg(&OdeParams::healthy(), &cfg).is_err());
        cfg.lead_mix = vec![1.0];
        cfg.beats = 0;
        assert!(synth_ecg(&OdeParams::healthy(), &cfg).is_err());
    }

    #[test]
    fn tile_and_mask() {
        let w = Waveform::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]], 100.0, default_channel_labels(2)).unwrap();
        let t = w.tile(3);
        assert_eq!(t.len(), 6);
        assert_eq!(t.channel(1), &[3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        let m = w.with_zeroed_channels(&[0]);
        assert_eq!(m.channel(0), &[0.0, 0.0]);
        assert_eq!(m.channel(1), w.channel(1));
    }
}
