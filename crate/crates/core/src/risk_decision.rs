//! Rule-based diagnostic risk labels, risk aggregation, mean-variance scoring
//! and intervention ranking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::Action;
use crate::ecg_ode::Waveform;
use crate::signal_metrics::{extract_intervals_on, IntervalReport, PatientProfile, Sex, QTC_MAX_FEMALE_MS, QTC_MAX_MALE_MS};

pub const RANKING_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum RiskError {
    #[error("no samples")]
    NoSamples,
    #[error("nothing to rank")]
    EmptyRanking,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
}

pub const NUM_LABELS: usize = 17;

pub const LABEL_NAMES: [&str; NUM_LABELS] = [
    "Poor data quality",
    "Sinus rhythm",
    "Premature ventricular contraction",
    "Tachycardia",
    "Ventricular tachycardia",
    "Supraventricular tachycardia with aberrancy",
    "Atrial fibrillation",
    "Atrial flutter",
    "Bradycardia",
    "Accessory pathway conduction",
    "Atrioventricular block",
    "1st degree atrioventricular block",
    "Bifascicular block",
    "Right bundle branch block",
    "Left bundle branch block",
    "Myocardial infarction",
    "Electronic pacemaker",
];

pub const POOR_QUALITY: usize = 0;
pub const SINUS_RHYTHM: usize = 1;
pub const TACHYCARDIA: usize = 3;
pub const VENTRICULAR_TACHYCARDIA: usize = 4;
pub const BRADYCARDIA: usize = 8;
pub const FIRST_DEGREE_AV_BLOCK: usize = 11;

/// Probability assigned to labels the rule set does not drive.
pub const BASELINE_PROB: f64 = 0.01;
pub const DEGRADED_POOR_QUALITY: f64 = 0.99;

/// Logistic `σ((x − center)/scale)` parameters of the driven labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCalibration {
    pub pr_center_ms: f64,
    pub pr_scale_ms: f64,
    pub tachy_center_bpm: f64,
    pub tachy_scale_bpm: f64,
    pub brady_center_bpm: f64,
    pub brady_scale_bpm: f64,
    pub quality_center: f64,
    pub quality_scale: f64,
    /// Offset from the sex-specific QTc limit.
    pub qtc_offset_ms: f64,
    pub qtc_scale_ms: f64,
}

impl Default for RiskCalibration {
    fn default() -> Self {
        RiskCalibration {
            pr_center_ms: 240.0,
            pr_scale_ms: 10.0,
            tachy_center_bpm: 100.0,
            tachy_scale_bpm: 5.0,
            brady_center_bpm: 45.0,
            brady_scale_bpm: 3.0,
            quality_center: 0.3,
            quality_scale: 0.06,
            qtc_offset_ms: 0.0,
            qtc_scale_ms: 15.0,
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskLabels {
    pub probs: [f64; NUM_LABELS],
}

impl RiskLabels {
    pub fn baseline() -> Self {
        RiskLabels { probs: [BASELINE_PROB; NUM_LABELS] }
    }

    /// Degraded output used when beats cannot be measured.
    pub fn degraded() -> Self {
        let mut l = Self::baseline();
        l.probs[POOR_QUALITY] = DEGRADED_POOR_QUALITY;
        l
    }

    pub fn is_valid(&self) -> bool {
        self.probs.iter().all(|p| (0.0..=1.0).contains(p))
    }
}

/// Labels from already measured intervals.
pub fn labels_from_intervals(r: &IntervalReport, cal: &RiskCalibration) -> RiskLabels {
    let mut l = RiskLabels::baseline();
    let hr = r.heart_rate_bpm();
    let qtc_limit = match r.sex {
        Sex::Male => QTC_MAX_MALE_MS,
        Sex::Female => QTC_MAX_FEMALE_MS,
    } + cal.qtc_offset_ms;
    l.probs[FIRST_DEGREE_AV_BLOCK] = logistic((r.pr_ms - cal.pr_center_ms) / cal.pr_scale_ms);
    l.probs[TACHYCARDIA] = logistic((hr - cal.tachy_center_bpm) / cal.tachy_scale_bpm);
    l.probs[BRADYCARDIA] = logistic((cal.brady_center_bpm - hr) / cal.brady_scale_bpm);
    l.probs[POOR_QUALITY] = logistic((cal.quality_center - r.mean_confidence()) / cal.quality_scale);
    l.probs[VENTRICULAR_TACHYCARDIA] = logistic((r.qtc_ms - qtc_limit) / cal.qtc_scale_ms);
    let normal_mass: f64 = [FIRST_DEGREE_AV_BLOCK, TACHYCARDIA, BRADYCARDIA, POOR_QUALITY, VENTRICULAR_TACHYCARDIA]
        .iter()
        .map(|&i| 1.0 - l.probs[i])
        .product();
    l.probs[SINUS_RHYTHM] = normal_mass;
    l
}

/// Rule-based labels for a multi-beat recording (channel 0).
pub fn risk_labels(w: &Waveform, profile: &PatientProfile) -> RiskLabels {
    risk_labels_with(w, profile, &RiskCalibration::default())
}

pub fn risk_labels_with(w: &Waveform, profile: &PatientProfile, cal: &RiskCalibration) -> RiskLabels {
    match extract_intervals_on(w, 0, profile) {
        Ok(r) => labels_from_intervals(&r, cal),
        Err(_) => RiskLabels::degraded(),
    }
}

/// Labels for a single-cycle window, extended periodically before measurement.
pub fn risk_labels_cyclic(window: &Waveform, profile: &PatientProfile) -> RiskLabels {
    risk_labels(&window.tile(CYCLIC_TILES), profile)
}

/// Copies of a one-cycle window used for interval measurement.
pub const CYCLIC_TILES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    #[default]
    Mean,
    Max,
    Top3,
}

/// Abnormality score over every label except sinus rhythm.
pub fn aggregate(labels: &RiskLabels, mode: AggregateMode) -> f64 {
    let mut v: Vec<f64> = labels.probs.iter().enumerate().filter(|(i, _)| *i != SINUS_RHYTHM).map(|(_, p)| *p).collect();
    match mode {
        AggregateMode::Mean => v.iter().sum::<f64>() / v.len() as f64,
        AggregateMode::Max => v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        AggregateMode::Top3 => {
            v.sort_by(|a, b| b.total_cmp(a));
            v[..3].iter().sum::<f64>() / 3.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskStats {
    pub mu: f64,
    /// Unbiased variance; `None` for a single sample.
    pub sigma2: Option<f64>,
}

/// Mean and unbiased (K−1) variance, two-pass.
pub fn risk_stats(samples: &[f64]) -> Result<RiskStats, RiskError> {
    if samples.is_empty() {
        return Err(RiskError::NoSamples);
    }
    let k = samples.len() as f64;
    let mu = samples.iter().sum::<f64>() / k;
    let sigma2 = (samples.len() >= 2).then(|| samples.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / (k - 1.0));
    Ok(RiskStats { mu, sigma2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionScore {
    pub s: f64,
    pub lambda: f64,
}

/// `S = μ + λ·√σ²`.
pub fn score(mu: f64, sigma2: f64, lambda: f64) -> DecisionScore {
    DecisionScore { s: mu + lambda * sigma2.sqrt(), lambda }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskDistribution {
    pub action: Action,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAction {
    pub id: String,
    pub dose: f64,
    pub mu: f64,
    pub sigma2: Option<f64>,
    #[serde(rename = "S")]
    pub s: f64,
    pub rank: usize,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub schema_version: u32,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub actions: Vec<RankedAction>,
}

/// Ascending `S`; ties by smaller `σ`, then action id. Single-sample
/// distributions score with `σ = 0` and report `sigma2 = null`.
pub fn rank_actions(dists: &[RiskDistribution], lambda: f64) -> Result<Vec<RankedAction>, RiskError> {
    if dists.is_empty() {
        return Err(RiskError::EmptyRanking);
    }
    if !(lambda >= 0.0) {
        return Err(RiskError::InvalidArgument("lambda must be non-negative".into()));
    }
    let mut rows = dists
        .iter()
        .map(|d| {
            let st = risk_stats(&d.samples)?;
            Ok(RankedAction {
                id: d.action.id(),
                dose: d.action.dose,
                mu: st.mu,
                sigma2: st.sigma2,
                s: score(st.mu, st.sigma2.unwrap_or(0.0), lambda).s,
                rank: 0,
                samples: d.samples.clone(),
            })
        })
        .collect::<Result<Vec<_>, RiskError>>()?;
    rows.sort_by(|a, b| {
        a.s.total_cmp(&b.s)
            .then_with(|| a.sigma2.unwrap_or(0.0).total_cmp(&b.sigma2.unwrap_or(0.0)))
            .then_with(|| a.id.cmp(&b.id))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(rows)
}

pub fn ranking_report(dists: &[RiskDistribution], lambda: f64, k: usize, seed: u64) -> Result<RankingReport, RiskError> {
    Ok(RankingReport { schema_version: RANKING_SCHEMA_VERSION, lambda, k, seed, actions: rank_actions(dists, lambda)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaRiskMetrics {
    /// `None` when either vector is constant.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub sign_agreement: f64,
    pub mae: f64,
    pub rmse: f64,
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if is_constant(x) || is_constant(y) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties receiving their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn delta_risk_metrics(pred: &[f64], truth: &[f64]) -> Result<DeltaRiskMetrics, RiskError> {
    if pred.len() != truth.len() {
        return Err(RiskError::Length(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(RiskError::InvalidArgument("need at least two pairs".into()));
    }
    let n = pred.len() as f64;
    let agree = pred.iter().zip(truth).filter(|(p, t)| sign(**p) == sign(**t)).count() as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let rmse = (pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt();
    Ok(DeltaRiskMetrics {
        pearson: pearson(pred, truth),
        spearman: pearson(&average_ranks(pred), &average_ranks(truth)),
        sign_agreement: agree / n,
        mae,
        rmse,
    })
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}
