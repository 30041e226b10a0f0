//! R-peak detection, phase anchoring and clinical interval metrics.
//!
//! The detector follows the classic Pan-Tompkins chain (band-pass, derivative,
//! squaring, moving-window integration, adaptive dual thresholds with a 200 ms
//! refractory period). Filtering runs forward-backward so the stages add no
//! group delay, and every accepted peak is snapped to the extremum of the raw
//! signal nearby.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ecg_ode::Waveform;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no beats detected")]
    NoBeatsDetected,
    #[error("need at least {needed} beats, found {found}")]
    InsufficientBeats { needed: usize, found: usize },
    #[error("sample rate {0} Hz is below the 100 Hz minimum")]
    SampleRateTooLow(f64),
    #[error("channel {channel} out of range for {channels} channels")]
    BadChannel { channel: usize, channels: usize },
    #[error("fiducial delineation failed on every beat")]
    FiducialFailure,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl std::fmt::Display for Sex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sex::Male => "male",
            Sex::Female => "female",
        })
    }
}

/// Number of auxiliary metadata features carried by a profile.
pub const PROFILE_AUX_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub sex: Sex,
    pub age: f64,
    #[serde(default = "default_aux")]
    pub aux: Vec<f64>,
}

fn default_aux() -> Vec<f64> {
    vec![0.0; PROFILE_AUX_LEN]
}

impl Default for PatientProfile {
    fn default() -> Self {
        PatientProfile { sex: Sex::Male, age: 55.0, aux: default_aux() }
    }
}

impl PatientProfile {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.age.is_finite() && self.age >= 0.0) {
            return Err(MetricsError::InvalidInput(format!("age must be >= 0, got {}", self.age)));
        }
        if self.aux.len() != PROFILE_AUX_LEN || self.aux.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::InvalidInput(format!("aux must hold {PROFILE_AUX_LEN} finite values")));
        }
        Ok(())
    }

    /// Fixed-length conditioning vector: sex indicator, scaled age, aux.
    pub fn features(&self) -> Vec<f64> {
        let mut v = vec![if self.sex == Sex::Female { 1.0 } else { 0.0 }, self.age / 100.0];
        v.extend(self.aux.iter().copied().chain(std::iter::repeat(0.0)).take(PROFILE_AUX_LEN));
        v
    }

    pub const FEATURE_LEN: usize = 2 + PROFILE_AUX_LEN;
}

// --- filtering -------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn lowpass(fc: f64, fs: f64) -> Self {
        Self::design(fc, fs, false)
    }

    fn highpass(fc: f64, fs: f64) -> Self {
        Self::design(fc, fs, true)
    }

    // Butterworth section, Q = 1/√2, bilinear transform.
    fn design(fc: f64, fs: f64, high: bool) -> Self {
        let w0 = TAU * fc / fs;
        let alpha = w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        let (b0, b1) = if high { ((1.0 + cos) / 2.0, -(1.0 + cos)) } else { ((1.0 - cos) / 2.0, 1.0 - cos) };
        Biquad { b: [b0 / a0, b1 / a0, b0 / a0], a: [-2.0 * cos / a0, (1.0 - alpha) / a0] }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }

    fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.run(x);
        y.reverse();
        let mut y = self.run(&y);
        y.reverse();
        y
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ms_to_samples(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).round() as usize
}

/// Intermediate detector signals, exposed for diagnostics.
#[derive(Debug, Clone)]
pub struct DetectorTrace {
    pub bandpassed: Vec<f64>,
    pub integrated: Vec<f64>,
    pub peaks: Vec<usize>,
    pub confidence: Vec<f64>,
}

/// Max-to-median ratio of the integrated signal below which a recording is
/// treated as flat or pure noise.
const MIN_PEAKINESS: f64 = 8.0;

pub fn pan_tompkins_rpeaks(w: &Waveform, channel: usize) -> Result<Vec<usize>, MetricsError> {
    Ok(pan_tompkins_trace(w, channel)?.peaks)
}

pub fn pan_tompkins_trace(w: &Waveform, channel: usize) -> Result<DetectorTrace, MetricsError> {
    let fs = w.sample_rate();
    if fs < 100.0 {
        return Err(MetricsError::SampleRateTooLow(fs));
    }
    if channel >= w.channels() {
        return Err(MetricsError::BadChannel { channel, channels: w.channels() });
    }
    let raw = w.channel(channel);
    let n = raw.len();
    let empty = |bandpassed: Vec<f64>, integrated: Vec<f64>| DetectorTrace {
        bandpassed,
        integrated,
        peaks: Vec::new(),
        confidence: Vec::new(),
    };

    let hp = Biquad::highpass(5.0, fs).filtfilt(raw);
    let bp = Biquad::lowpass(15.0, fs).filtfilt(&hp);

    // five-point derivative, centered
    let at = |i: isize| -> f64 { bp[i.clamp(0, n as isize - 1) as usize] };
    let deriv: Vec<f64> = (0..n as isize)
        .map(|i| (-at(i - 2) - 2.0 * at(i - 1) + 2.0 * at(i + 1) + at(i + 2)) * fs / 8.0)
        .collect();
    let squared: Vec<f64> = deriv.iter().map(|d| d * d).collect();

    // centered 150 ms moving-window integration
    let half = ms_to_samples(75.0, fs);
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + squared[i];
    }
    let width = (2 * half + 1) as f64;
    let mwi: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / width
        })
        .collect();

    let peak_level = mwi.iter().copied().fold(0.0, f64::max);
    let med = median(&mwi);
    if !(peak_level > 0.0) || peak_level < MIN_PEAKINESS * med || !peak_level.is_finite() {
        return Ok(empty(bp, mwi));
    }

    // candidate fiducial marks: local maxima that dominate ±200 ms
    let refractory = ms_to_samples(200.0, fs).max(1);
    let mut candidates = Vec::new();
    for i in 0..n {
        let lo = i.saturating_sub(refractory);
        let hi = (i + refractory + 1).min(n);
        let v = mwi[i];
        if v <= 0.0 {
            continue;
        }
        let dominated = (lo..hi).any(|j| mwi[j] > v || (mwi[j] == v && j < i));
        if !dominated {
            candidates.push(i);
        }
    }

    let mut spki = 0.25 * peak_level;
    let mut npki = 0.0;
    let mut accepted: Vec<(usize, f64)> = Vec::new();
    let mut rr_avg: Option<f64> = None;
    let mut last_checked = 0usize;
    for (ci, &c) in candidates.iter().enumerate() {
        let thr1 = npki + 0.25 * (spki - npki);
        let thr2 = 0.5 * thr1;

        // search back over skipped candidates after an overly long gap
        if let (Some(&(prev, _)), Some(rr)) = (accepted.last(), rr_avg) {
            if (c - prev) as f64 > 1.66 * rr {
                let best = candidates[last_checked..ci]
                    .iter()
                    .copied()
                    .filter(|&k| k > prev + refractory && mwi[k] > thr2)
                    .max_by(|&a, &b| mwi[a].total_cmp(&mwi[b]));
                if let Some(k) = best {
                    spki = 0.25 * mwi[k] + 0.75 * spki;
                    accepted.push((k, (mwi[k] / spki).min(1.0)));
                }
            }
        }

        let v = mwi[c];
        let clear = accepted.last().is_none_or(|&(p, _)| c > p + refractory);
        if v > thr1 && clear {
            spki = 0.125 * v + 0.875 * spki;
            accepted.push((c, (v / spki).min(1.0)));
            if accepted.len() >= 2 {
                let rr: Vec<f64> = accepted.windows(2).rev().take(8).map(|p| (p[1].0 - p[0].0) as f64).collect();
                rr_avg = Some(rr.iter().sum::<f64>() / rr.len() as f64);
            }
            last_checked = ci + 1;
        } else {
            npki = 0.125 * v + 0.875 * npki;
        }
    }

    // snap to the raw-signal extremum within ±75 ms
    let base = median(raw);
    let mut peaks = Vec::with_capacity(accepted.len());
    let mut confidence = Vec::with_capacity(accepted.len());
    for &(c, conf) in &accepted {
        let lo = c.saturating_sub(half);
        let hi = (c + half + 1).min(n);
        let r = (lo..hi)
            .max_by(|&a, &b| (raw[a] - base).abs().total_cmp(&(raw[b] - base).abs()).then(b.cmp(&a)))
            .expect("non-empty search range");
        if peaks.last().is_none_or(|&p| r > p) {
            peaks.push(r);
            confidence.push(conf);
        }
    }
    Ok(DetectorTrace { bandpassed: bp, integrated: mwi, peaks, confidence })
}

/// Options for [`phase_anchor_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct AnchorOptions {
    pub channel: usize,
    /// RR length (samples) to use when only a single beat is visible.
    pub nominal_rr: Option<f64>,
}


/// Phase of the final sample relative to the last R-peak, in `[0, 2π)`.
pub fn phase_anchor(w: &Waveform) -> Result<f64, MetricsError> {
    phase_anchor_with(w, AnchorOptions::default())
}

pub fn phase_anchor_with(w: &Waveform, opts: AnchorOptions) -> Result<f64, MetricsError> {
    let peaks = pan_tompkins_rpeaks(w, opts.channel)?;
    phase_from_peaks(&peaks, w.len(), opts.nominal_rr)
}

/// Anchor for a waveform holding exactly one cardiac cycle: the window is
/// periodically extended so the detector sees several beats.
pub fn phase_anchor_cyclic(w: &Waveform, channel: usize) -> Result<f64, MetricsError> {
    let tiled = w.tile(3);
    let peaks = pan_tompkins_rpeaks(&tiled, channel)?;
    phase_from_peaks(&peaks, tiled.len(), Some(w.len() as f64))
}

pub fn phase_from_peaks(peaks: &[usize], len: usize, nominal_rr: Option<f64>) -> Result<f64, MetricsError> {
    let last = *peaks.last().ok_or(MetricsError::NoBeatsDetected)?;
    let rr = if peaks.len() >= 2 {
        let gaps: Vec<f64> = peaks.windows(2).map(|p| (p[1] - p[0]) as f64).collect();
        median(&gaps)
    } else {
        nominal_rr.ok_or(MetricsError::InsufficientBeats { needed: 2, found: peaks.len() })?
    };
    let elapsed = (len - 1 - last) as f64;
    Ok((TAU * elapsed / rr).rem_euclid(TAU))
}

// --- intervals -------------------------------------------------------------

pub fn bazett_qtc(qt_ms: f64, rr_ms: f64) -> Result<f64, MetricsError> {
    if !(qt_ms > 0.0 && rr_ms > 0.0) || !qt_ms.is_finite() || !rr_ms.is_finite() {
        return Err(MetricsError::InvalidInput(format!("QT and RR must be positive, got {qt_ms}, {rr_ms}")));
    }
    Ok(qt_ms / (rr_ms / 1000.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub qt_ms: f64,
    pub rr_ms: f64,
    pub qtc_ms: f64,
    pub pr_ms: f64,
    pub tpte_ms: f64,
    pub sex: Sex,
    /// Per-beat delineation confidence in `[0, 1]`; 0 marks a fiducial failure.
    #[serde(default)]
    pub beat_confidence: Vec<f64>,
}

pub const INTERVAL_CSV_HEADER: &str = "qt_ms,rr_ms,qtc_ms,pr_ms,tpte_ms,sex,qtc_normal,pr_normal,tpte_normal";

impl IntervalReport {
    pub fn heart_rate_bpm(&self) -> f64 {
        60_000.0 / self.rr_ms
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.beat_confidence.is_empty() {
            0.0
        } else {
            self.beat_confidence.iter().sum::<f64>() / self.beat_confidence.len() as f64
        }
    }

    pub fn csv_row(&self) -> String {
        let f = classify_intervals(self);
        format!(
            "{:.3},{:.3},{:.3},{:.3},{:.3},{},{},{},{}",
            self.qt_ms, self.rr_ms, self.qtc_ms, self.pr_ms, self.tpte_ms, self.sex, f.qtc_normal, f.pr_normal,
            f.tpte_normal
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalFlags {
    pub qtc_normal: bool,
    pub pr_normal: bool,
    pub tpte_normal: bool,
}

pub const QTC_MAX_MALE_MS: f64 = 450.0;
pub const QTC_MAX_FEMALE_MS: f64 = 470.0;
pub const PR_RANGE_MS: (f64, f64) = (120.0, 200.0);
pub const TPTE_RANGE_MS: (f64, f64) = (80.0, 113.0);

/// Normal-range flags; every boundary is inclusive.
pub fn classify_intervals(r: &IntervalReport) -> IntervalFlags {
    let qtc_max = match r.sex {
        Sex::Male => QTC_MAX_MALE_MS,
        Sex::Female => QTC_MAX_FEMALE_MS,
    };
    IntervalFlags {
        qtc_normal: r.qtc_ms <= qtc_max,
        pr_normal: (PR_RANGE_MS.0..=PR_RANGE_MS.1).contains(&r.pr_ms),
        tpte_normal: (TPTE_RANGE_MS.0..=TPTE_RANGE_MS.1).contains(&r.tpte_ms),
    }
}

/// Fraction of positions where all three flags agree.
pub fn interval_match_accuracy(predicted: &[IntervalFlags], truth: &[IntervalFlags]) -> Result<f64, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::InvalidInput(format!(
            "length mismatch: {} predicted vs {} truth",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(MetricsError::InvalidInput("empty label lists".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatFiducials {
    pub p_onset: usize,
    pub q_onset: usize,
    pub r_peak: usize,
    pub t_peak: usize,
    pub t_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiducialPoints {
    /// `None` where delineation failed for that beat.
    pub beats: Vec<Option<BeatFiducials>>,
    pub confidence: Vec<f64>,
}

/// Windowed extrema and tangent rules referenced to each R-peak.
pub fn delineate(w: &Waveform, channel: usize, peaks: &[usize], detector_conf: &[f64]) -> FiducialPoints {
    let x = w.channel(channel);
    let n = x.len();
    let fs = w.sample_rate();
    let base = median(x);
    let sign = peaks.first().map_or(1.0, |&r| if x[r] >= base { 1.0 } else { -1.0 });
    let y: Vec<f64> = x.iter().map(|v| sign * (v - base)).collect();
    let slope = |i: usize| -> f64 {
        let a = i.saturating_sub(1);
        let b = (i + 1).min(n - 1);
        (y[b] - y[a]) / (b - a).max(1) as f64
    };

    let mut beats = Vec::with_capacity(peaks.len());
    let mut confidence = Vec::with_capacity(peaks.len());
    for (bi, &r) in peaks.iter().enumerate() {
        let conf = detector_conf.get(bi).copied().unwrap_or(1.0);
        let next_r = peaks.get(bi + 1).copied().unwrap_or(n);
        let beat = delineate_beat(&y, fs, r, next_r, &slope);
        match beat {
            Some((b, ok)) => {
                beats.push(Some(b));
                confidence.push(if ok { conf } else { 0.5 * conf });
            }
            None => {
                beats.push(None);
                confidence.push(0.0);
            }
        }
    }
    FiducialPoints { beats, confidence }
}

fn delineate_beat(
    y: &[f64],
    fs: f64,
    r: usize,
    next_r: usize,
    slope: &dyn Fn(usize) -> f64,
) -> Option<(BeatFiducials, bool)> {
    let n = y.len();
    let s = |ms: f64| ms_to_samples(ms, fs);
    let mut clean = true;

    // Q onset: back from R past the Q nadir to where the slope flattens.
    let q_lim = r.checked_sub(s(80.0))?;
    let mut i = r;
    while i > q_lim && y[i - 1] < y[i] {
        i -= 1;
    }
    let nadir = i;
    let max_slope = (q_lim..r).map(|k| slope(k).abs()).fold(0.0, f64::max);
    let mut q_onset = nadir;
    while q_onset > q_lim && slope(q_onset - 1).abs() > 0.1 * max_slope {
        q_onset -= 1;
    }
    if q_onset == q_lim {
        clean = false;
    }

    // T peak: maximum in [R+150 ms, R+450 ms], kept before the next beat.
    let t_lo = r + s(150.0);
    let t_hi = (r + s(450.0)).min(next_r.saturating_sub(s(100.0))).min(n - 1);
    if t_lo >= t_hi {
        return None;
    }
    let t_peak = (t_lo..=t_hi).max_by(|&a, &b| y[a].total_cmp(&y[b]))?;
    if y[t_peak] <= 0.0 {
        return None;
    }

    // T end: tangent at the steepest descent after the peak, meeting baseline.
    let d_hi = (t_peak + s(250.0)).min(next_r.saturating_sub(1)).min(n - 2);
    if d_hi <= t_peak + 1 {
        return None;
    }
    let steep = (t_peak + 1..=d_hi).min_by(|&a, &b| slope(a).total_cmp(&slope(b)))?;
    let m = slope(steep);
    if m >= 0.0 {
        return None;
    }
    let t_end_f = steep as f64 + y[steep] / -m;
    let t_end = t_end_f.round().max(t_peak as f64 + 1.0) as usize;
    if t_end >= n || t_end >= next_r {
        return None;
    }

    // P onset: tangent at the steepest rise before the P apex, meeting baseline.
    let p_lo = r.checked_sub(s(250.0))?;
    let p_hi = r - s(80.0);
    let p_apex = (p_lo..=p_hi).max_by(|&a, &b| y[a].total_cmp(&y[b]))?;
    if y[p_apex] <= 0.0 || p_apex <= p_lo.saturating_sub(s(60.0)) + 1 {
        return None;
    }
    let rise_lo = p_lo.saturating_sub(s(60.0)).max(1);
    let rise = (rise_lo..p_apex).max_by(|&a, &b| slope(a).total_cmp(&slope(b)))?;
    let mp = slope(rise);
    if mp <= 0.0 {
        return None;
    }
    let p_onset_f = rise as f64 - y[rise] / mp;
    if p_onset_f < 0.0 {
        return None;
    }
    let p_onset = p_onset_f.round() as usize;

    if !(p_onset < q_onset && q_onset < r && r < t_peak && t_peak < t_end) {
        return None;
    }
    Some((BeatFiducials { p_onset, q_onset, r_peak: r, t_peak, t_end }, clean))
}

/// Per-recording intervals pooled as the median over delineated beats.
pub fn extract_intervals(w: &Waveform, profile: &PatientProfile) -> Result<IntervalReport, MetricsError> {
    extract_intervals_on(w, 0, profile)
}

pub fn extract_intervals_on(w: &Waveform, channel: usize, profile: &PatientProfile) -> Result<IntervalReport, MetricsError> {
    let trace = pan_tompkins_trace(w, channel)?;
    let peaks = &trace.peaks;
    if peaks.len() < 2 {
        return Err(if peaks.is_empty() {
            MetricsError::NoBeatsDetected
        } else {
            MetricsError::InsufficientBeats { needed: 2, found: peaks.len() }
        });
    }
    let fs = w.sample_rate();
    let to_ms = |samples: f64| samples * 1000.0 / fs;
    let gaps: Vec<f64> = peaks.windows(2).map(|p| (p[1] - p[0]) as f64).collect();
    let rr_ms = to_ms(median(&gaps));

    let fid = delineate(w, channel, peaks, &trace.confidence);
    let beats: Vec<&BeatFiducials> = fid.beats.iter().flatten().collect();
    if beats.is_empty() {
        return Err(MetricsError::FiducialFailure);
    }
    let pooled = |f: &dyn Fn(&BeatFiducials) -> f64| median(&beats.iter().map(|b| f(b)).collect::<Vec<_>>());
    let qt_ms = to_ms(pooled(&|b| (b.t_end - b.q_onset) as f64));
    let pr_ms = to_ms(pooled(&|b| (b.q_onset - b.p_onset) as f64));
    let tpte_ms = to_ms(pooled(&|b| (b.t_end - b.t_peak) as f64));
    let qtc_ms = bazett_qtc(qt_ms, rr_ms)?;
    Ok(IntervalReport { qt_ms, rr_ms, qtc_ms, pr_ms, tpte_ms, sex: profile.sex, beat_confidence: fid.confidence })
}

/// Signed gap between two phases, in `(−π, π]`.
pub fn phase_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecg_ode::{default_channel_labels, synth_ecg, OdeParams, SynthConfig};
    use approx::assert_abs_diff_eq;

    fn healthy(beats: usize, fs: f64, hr: f64) -> crate::ecg_ode::SyntheticEcg {
        synth_ecg(&OdeParams::healthy(), &SynthConfig::new(beats, fs, hr)).unwrap()
    }

    #[test]
    fn bazett_examples() {
        assert_eq!(bazett_qtc(400.0, 1000.0).unwrap(), 400.0);
        assert_abs_diff_eq!(bazett_qtc(400.0, 640.0).unwrap(), 500.0, epsilon = 1e-12);
        let oracle = 442.0 / (820.0f64 / 1000.0).sqrt();
        assert_abs_diff_eq!(bazett_qtc(442.0, 820.0).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle, 488.11, epsilon = 0.01);
        assert!(bazett_qtc(0.0, 800.0).is_err());
        assert!(bazett_qtc(400.0, -1.0).is_err());
    }

    fn report(qtc: f64, pr: f64, tpte: f64, sex: Sex) -> IntervalReport {
        IntervalReport { qt_ms: qtc, rr_ms: 1000.0, qtc_ms: qtc, pr_ms: pr, tpte_ms: tpte, sex, beat_confidence: vec![] }
    }

    #[test]
    fn classification_thresholds() {
        assert!(!classify_intervals(&report(460.0, 150.0, 100.0, Sex::Male)).qtc_normal);
        assert!(classify_intervals(&report(460.0, 150.0, 100.0, Sex::Female)).qtc_normal);
        assert!(classify_intervals(&report(450.0, 150.0, 100.0, Sex::Male)).qtc_normal);
        assert!(classify_intervals(&report(400.0, 150.0, 100.0, Sex::Male)).pr_normal);
        assert!(classify_intervals(&report(400.0, 120.0, 80.0, Sex::Male)).pr_normal);
        assert!(classify_intervals(&report(400.0, 200.0, 113.0, Sex::Male)).tpte_normal);
        assert!(!classify_intervals(&report(400.0, 150.0, 120.0, Sex::Male)).tpte_normal);
    }

    #[test]
    fn match_accuracy() {
        let t = IntervalFlags { qtc_normal: true, pr_normal: true, tpte_normal: false };
        let mut f = t;
        f.pr_normal = false;
        assert_eq!(interval_match_accuracy(&[t, t], &[t, t]).unwrap(), 1.0);
        assert_eq!(interval_match_accuracy(&[t, t, t, f], &[t, t, t, t]).unwrap(), 0.75);
        assert!(interval_match_accuracy(&[], &[]).is_err());
        assert!(interval_match_accuracy(&[t], &[t, t]).is_err());
    }

    #[test]
    fn zero_signal_has_no_peaks() {
        let w = Waveform::new(vec![vec![0.0; 5000]], 500.0, default_channel_labels(1)).unwrap();
        assert!(pan_tompkins_rpeaks(&w, 0).unwrap().is_empty());
        assert_eq!(phase_anchor(&w), Err(MetricsError::NoBeatsDetected));
    }

    #[test]
    fn white_noise_has_no_peaks() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..5000).map(|_| nd.sample(&mut rng)).collect();
        let w = Waveform::new(vec![x], 500.0, default_channel_labels(1)).unwrap();
        assert!(pan_tompkins_rpeaks(&w, 0).unwrap().is_empty());
    }

    #[test]
    fn detects_all_clean_beats() {
        let s = healthy(10, 500.0, 60.0);
        let peaks = pan_tompkins_rpeaks(&s.waveform, 0).unwrap();
        assert_eq!(peaks.len(), 10, "{peaks:?} vs {:?}", s.r_peaks);
        for (p, t) in peaks.iter().zip(&s.r_peaks) {
            assert!((*p as f64 - *t as f64).abs() <= 10.0, "{p} vs {t}");
        }
    }

    #[test]
    fn low_sample_rate_rejected() {
        let s = healthy(3, 90.0, 60.0);
        assert_eq!(pan_tompkins_rpeaks(&s.waveform, 0), Err(MetricsError::SampleRateTooLow(90.0)));
        assert!(pan_tompkins_rpeaks(&healthy(3, 500.0, 60.0).waveform, 1).is_err());
    }

    #[test]
    fn anchor_linear_phase() {
        assert_eq!(phase_from_peaks(&[100, 200, 299], 300, None).unwrap(), 0.0);
        assert_abs_diff_eq!(phase_from_peaks(&[100, 200, 300], 351, None).unwrap(), PI, epsilon = 1e-12);
        assert_eq!(phase_from_peaks(&[], 10, None), Err(MetricsError::NoBeatsDetected));
        assert!(phase_from_peaks(&[3], 10, None).is_err());
        assert_abs_diff_eq!(phase_from_peaks(&[3], 11, Some(14.0)).unwrap(), PI, epsilon = 1e-12);
    }

    #[test]
    fn anchor_tracks_generator_phase() {
        let s = healthy(5, 500.0, 60.0);
        let got = phase_anchor(&s.waveform).unwrap();
        let truth = s.phase.last().unwrap().rem_euclid(TAU);
        assert!(phase_error(got, truth).abs() < 0.05, "{got} vs {truth}");
    }

    #[test]
    fn healthy_intervals_are_plausible() {
        let s = healthy(8, 500.0, 60.0);
        let r = extract_intervals(&s.waveform, &PatientProfile::default()).unwrap();
        assert!((r.rr_ms - 1000.0).abs() <= 10.0, "{r:?}");
        assert!(r.qt_ms > 300.0 && r.qt_ms < 500.0, "{r:?}");
        assert!(r.pr_ms > 100.0 && r.pr_ms < 250.0, "{r:?}");
        assert!(r.tpte_ms > 40.0 && r.tpte_ms < 200.0, "{r:?}");
        assert!(r.beat_confidence.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn single_beat_is_rejected() {
        let s = healthy(1, 500.0, 60.0);
        let err = extract_intervals(&s.waveform, &PatientProfile::default()).unwrap_err();
        assert!(matches!(err, MetricsError::NoBeatsDetected | MetricsError::InsufficientBeats { .. }));
    }

    #[test]
    fn csv_row_layout() {
        let r = report(400.0, 150.0, 100.0, Sex::Female);
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), INTERVAL_CSV_HEADER.split(',').count());
        assert!(row.ends_with("female,true,true,true"));
    }

    #[test]
    fn profile_features() {
        let p = PatientProfile { sex: Sex::Female, age: 50.0, aux: vec![0.1, 0.2] };
        assert_eq!(p.features(), vec![1.0, 0.5, 0.1, 0.2]);
        assert!(PatientProfile { age: -1.0, ..PatientProfile::default() }.validate().is_err());
    }
}
