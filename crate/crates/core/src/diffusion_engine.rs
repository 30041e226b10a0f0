//! Diffusion mathematics: noise schedules, forward marginals, the exact
//! reverse posterior, ancestral sampling, energy-guided Langevin dynamics and
//! numerical checks of the energy-tilting identities on Gaussian test beds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("step index {tau} outside [{lo}, {hi}]")]
    StepOutOfRange { tau: usize, lo: usize, hi: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("non-finite state at step {step} (norm {norm})")]
    NonFinite { step: usize, norm: f64 },
    #[error("langevin chain diverged at step {step} (norm {norm} > {bound})")]
    Diverged { step: usize, norm: f64, bound: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Variance schedule with `ᾱ_0 = 1` prepended; index `τ` runs over `0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    one_minus_alpha_bars: Vec<f64>,
}

pub fn build_schedule(kind: ScheduleKind, n: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, DiffusionError> {
    if n == 0 {
        return Err(DiffusionError::InvalidSchedule("N must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!("need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..n)
            .map(|i| if n == 1 { beta_min } else { beta_min + (beta_max - beta_min) * i as f64 / (n - 1) as f64 })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / n as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=n).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_min, beta_max)).collect()
        }
    };
    Ok(NoiseSchedule::from_betas(kind, betas))
}

impl NoiseSchedule {
    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let mut alpha_bars = vec![1.0];
        let mut omab = vec![0.0];
        for &b in &betas {
            let a = 1.0 - b;
            alpha_bars.push(alpha_bars.last().expect("non-empty") * a);
            // Recurrence avoids cancellation in 1 − ᾱ for small τ.
            omab.push(omab.last().expect("non-empty") * a + b);
        }
        NoiseSchedule { kind, betas, alpha_bars, one_minus_alpha_bars: omab }
    }

    pub fn from_explicit_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule("every beta must lie in (0, 1)".into()));
        }
        Ok(Self::from_betas(ScheduleKind::Linear, betas))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, tau: usize) -> f64 {
        self.betas[tau - 1]
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        1.0 - self.betas[tau - 1]
    }

    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bars[tau]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn one_minus_alpha_bar(&self, tau: usize) -> f64 {
        self.one_minus_alpha_bars[tau]
    }

    fn check(&self, tau: usize, lo: usize) -> Result<(), DiffusionError> {
        if tau < lo || tau > self.steps() {
            return Err(DiffusionError::StepOutOfRange { tau, lo, hi: self.steps() });
        }
        Ok(())
    }

    /// `β̃_τ = (1 − ᾱ_{τ−1}) / (1 − ᾱ_τ) · β_τ`.
    pub fn posterior_variance(&self, tau: usize) -> Result<f64, DiffusionError> {
        self.check(tau, 1)?;
        Ok(self.one_minus_alpha_bar(tau - 1) / self.one_minus_alpha_bar(tau) * self.beta(tau))
    }

    /// Coefficients of `ẑ0` and `z_τ` in the posterior mean.
    pub fn posterior_coefficients(&self, tau: usize) -> Result<(f64, f64), DiffusionError> {
        self.check(tau, 1)?;
        let denom = self.one_minus_alpha_bar(tau);
        let c0 = self.alpha_bar(tau - 1).sqrt() * self.beta(tau) / denom;
        let ct = self.alpha(tau).sqrt() * self.one_minus_alpha_bar(tau - 1) / denom;
        Ok((c0, ct))
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), DiffusionError> {
    if a.len() != b.len() {
        return Err(DiffusionError::Dimension(a.len(), b.len()));
    }
    Ok(())
}

/// Closed-form forward marginal `z_τ = √ᾱ_τ z0 + √(1−ᾱ_τ) ε`.
pub fn forward_sample(z0: &[f64], tau: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    s.check(tau, 0)?;
    same_len(z0, eps)?;
    let (a, b) = (s.alpha_bar(tau).sqrt(), s.one_minus_alpha_bar(tau).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// One forward transition `z_τ = √α_τ z_{τ−1} + √β_τ ε`.
pub fn forward_step(z_prev: &[f64], tau: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    s.check(tau, 1)?;
    same_len(z_prev, eps)?;
    let (a, b) = (s.alpha(tau).sqrt(), s.beta(tau).sqrt());
    Ok(z_prev.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

pub fn posterior_params(z_tau: &[f64], z0_hat: &[f64], tau: usize, s: &NoiseSchedule) -> Result<(Vec<f64>, f64), DiffusionError> {
    same_len(z_tau, z0_hat)?;
    let (c0, ct) = s.posterior_coefficients(tau)?;
    let mean = z0_hat.iter().zip(z_tau).map(|(x0, xt)| c0 * x0 + ct * xt).collect();
    Ok((mean, s.posterior_variance(tau)?))
}

pub fn eps_to_z0(z_tau: &[f64], eps_hat: &[f64], tau: usize, s: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    s.check(tau, 1)?;
    same_len(z_tau, eps_hat)?;
    let (a, b) = (s.alpha_bar(tau).sqrt(), s.one_minus_alpha_bar(tau).sqrt());
    Ok(z_tau.iter().zip(eps_hat).map(|(z, e)| (z - b * e) / a).collect())
}

pub fn z0_to_eps(z_tau: &[f64], z0_hat: &[f64], tau: usize, s: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    s.check(tau, 1)?;
    same_len(z_tau, z0_hat)?;
    let (a, b) = (s.alpha_bar(tau).sqrt(), s.one_minus_alpha_bar(tau).sqrt());
    Ok(z_tau.iter().zip(z0_hat).map(|(z, x0)| (z - a * x0) / b).collect())
}

/// A clean-latent predictor `ẑ0(z_τ, τ)` with its conditioning already bound.
pub trait Denoiser {
    fn predict_z0(&self, z_tau: &[f64], tau: usize) -> Vec<f64>;
}

impl<F: Fn(&[f64], usize) -> Vec<f64>> Denoiser for F {
    fn predict_z0(&self, z_tau: &[f64], tau: usize) -> Vec<f64> {
        self(z_tau, tau)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reverse-process sampling from `z_N ~ N(0, I)` with variance `β̃_τ`.
pub fn ancestral_sample<D: Denoiser + ?Sized>(denoiser: &D, dim: usize, s: &NoiseSchedule, seed: u64) -> Result<Vec<f64>, DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    for tau in (1..=s.steps()).rev() {
        let z0 = denoiser.predict_z0(&z, tau);
        if z0.len() != dim {
            return Err(DiffusionError::Dimension(z0.len(), dim));
        }
        let (mean, var) = posterior_params(&z, &z0, tau, s)?;
        let sd = var.sqrt();
        z = mean
            .into_iter()
            .map(|m| {
                let xi: f64 = rng.sample(StandardNormal);
                if sd > 0.0 {
                    m + sd * xi
                } else {
                    m
                }
            })
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite { step: tau, norm: norm(&z) });
        }
    }
    Ok(z)
}

/// `∇log p_θ − γ∇E`.
pub fn guided_score(score: &[f64], grad_energy: &[f64], gamma: f64) -> Vec<f64> {
    score.iter().zip(grad_energy).map(|(s, g)| s - gamma * g).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub gamma: f64,
    pub eta: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub bound: f64,
    pub seed: u64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig { gamma: 0.0, eta: 0.01, steps: 100_000, burn_in: 1_000, thin: 1, bound: 1e6, seed: 0 }
    }
}

/// Retained states of a chain, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LangevinChain {
    pub dim: usize,
    pub states: Vec<f64>,
}

impl LangevinChain {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.states.iter().skip(j).step_by(self.dim).copied().collect()
    }
}

/// Euler–Maruyama: `z ← z + η(score(z) − γ∇E(z)) + √(2η) ξ`.
pub fn langevin_sample<S, G>(score: S, grad_energy: G, init: &[f64], cfg: &LangevinConfig) -> Result<LangevinChain, DiffusionError>
where
    S: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(cfg.gamma >= 0.0) || !(cfg.eta > 0.0) || cfg.thin == 0 {
        return Err(DiffusionError::InvalidArgument("need gamma >= 0, eta > 0, thin >= 1".into()));
    }
    let dim = init.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = (2.0 * cfg.eta).sqrt();
    let mut z = init.to_vec();
    let kept = cfg.steps.saturating_sub(cfg.burn_in) / cfg.thin + 1;
    let mut states = Vec::with_capacity(kept * dim);
    for step in 0..cfg.steps {
        let drift = guided_score(&score(&z), &grad_energy(&z), cfg.gamma);
        for j in 0..dim {
            let xi: f64 = rng.sample(StandardNormal);
            z[j] += cfg.eta * drift[j] + noise * xi;
        }
        let n = norm(&z);
        if !(n <= cfg.bound) {
            return Err(DiffusionError::Diverged { step, norm: n, bound: cfg.bound });
        }
        if step >= cfg.burn_in && (step - cfg.burn_in).is_multiple_of(cfg.thin) {
            states.extend_from_slice(&z);
        }
    }
    Ok(LangevinChain { dim, states })
}

/// Sample mean and unbiased variance.
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// One-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> (f64, f64) {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max(((i + 1) as f64 / n - f).abs()).max((f - i as f64 / n).abs());
    }
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

/// Diagonal Gaussian base `p_θ` with quadratic energy `E(z) = ‖z − m‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTestBed {
    pub base_mean: Vec<f64>,
    pub base_var: Vec<f64>,
    pub anchor: Vec<f64>,
    pub gamma: f64,
}

impl GaussianTestBed {
    pub fn standard_1d(m: f64, gamma: f64) -> Self {
        GaussianTestBed { base_mean: vec![0.0], base_var: vec![1.0], anchor: vec![m], gamma }
    }

    pub fn dim(&self) -> usize {
        self.base_mean.len()
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let d = self.dim();
        if !(1..=2).contains(&d) || self.base_var.len() != d || self.anchor.len() != d {
            return Err(DiffusionError::InvalidArgument("test bed must be 1D or 2D with matching lengths".into()));
        }
        if self.base_var.iter().any(|v| !(*v > 0.0)) || !(self.gamma >= 0.0) {
            return Err(DiffusionError::InvalidArgument("variances must be positive and gamma non-negative".into()));
        }
        Ok(())
    }

    pub fn tilted_var(&self) -> Vec<f64> {
        self.base_var.iter().map(|v| v / (1.0 + 2.0 * self.gamma * v)).collect()
    }

    pub fn tilted_mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                let v = self.base_var[j];
                (self.base_mean[j] + 2.0 * self.gamma * v * self.anchor[j]) / (1.0 + 2.0 * self.gamma * v)
            })
            .collect()
    }

    pub fn base_score(&self, z: &[f64]) -> Vec<f64> {
        (0..z.len()).map(|j| -(z[j] - self.base_mean[j]) / self.base_var[j]).collect()
    }

    pub fn energy_grad(&self, z: &[f64]) -> Vec<f64> {
        (0..z.len()).map(|j| 2.0 * (z[j] - self.anchor[j])).collect()
    }

    pub fn tilted_score(&self, z: &[f64]) -> Vec<f64> {
        let (m, v) = (self.tilted_mean(), self.tilted_var());
        (0..z.len()).map(|j| -(z[j] - m[j]) / v[j]).collect()
    }

    /// `J(q) = KL(q‖p_θ) + γ E_q[E]` for a diagonal Gaussian `q = N(μ, diag(s²))`.
    pub fn gibbs_objective(&self, mu: &[f64], var: &[f64]) -> f64 {
        (0..self.dim())
            .map(|j| {
                let (m0, v0) = (self.base_mean[j], self.base_var[j]);
                let kl = 0.5 * (var[j] / v0 + (mu[j] - m0).powi(2) / v0 - 1.0 + (v0 / var[j]).ln());
                kl + self.gamma * (var[j] + (mu[j] - self.anchor[j]).powi(2))
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropositionBudget {
    /// Grid points per axis for the Gibbs-objective search.
    pub grid_points: usize,
    pub langevin: LangevinConfig,
    pub bins: usize,
    pub tv_threshold: f64,
    pub score_tolerance: f64,
}

impl Default for PropositionBudget {
    fn default() -> Self {
        PropositionBudget {
            grid_points: 401,
            langevin: LangevinConfig { gamma: 0.0, eta: 0.01, steps: 1_000_000, burn_in: 5_000, thin: 1, bound: 1e6, seed: 7 },
            bins: 60,
            tv_threshold: 0.05,
            score_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P1Report {
    /// Per coordinate `[mean, variance]` of the grid minimizer.
    pub argmin: Vec<[f64; 2]>,
    pub analytic: Vec<[f64; 2]>,
    /// Per coordinate `[mean step, variance step]`.
    pub grid_cell: Vec<[f64; 2]>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2Report {
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P3Report {
    pub tv_distance: f64,
    pub chain_mean: Vec<f64>,
    pub chain_var: Vec<f64>,
    pub samples: usize,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub p1: P1Report,
    pub p2: P2Report,
    pub p3: P3Report,
}

impl PropositionReport {
    pub fn all_pass(&self) -> bool {
        self.p1.pass && self.p2.pass && self.p3.pass
    }
}

pub fn verify_propositions(bed: &GaussianTestBed, budget: &PropositionBudget) -> Result<PropositionReport, DiffusionError> {
    bed.validate()?;
    if budget.grid_points < 3 || budget.bins < 2 {
        return Err(DiffusionError::InvalidArgument("grid_points >= 3 and bins >= 2 required".into()));
    }
    let tm = bed.tilted_mean();
    let tv = bed.tilted_var();
    let d = bed.dim();

    // P1: the objective is separable across diagonal coordinates.
    let mut argmin = Vec::with_capacity(d);
    let mut cells = Vec::with_capacity(d);
    let mut p1_pass = true;
    for j in 0..d {
        let lo_m = bed.base_mean[j].min(bed.anchor[j]) - 1.0;
        let hi_m = bed.base_mean[j].max(bed.anchor[j]) + 1.0;
        let hi_v = 1.5 * bed.base_var[j];
        let g = budget.grid_points;
        let dm = (hi_m - lo_m) / (g - 1) as f64;
        let dv = hi_v / g as f64;
        let sub = |mu: f64, var: f64| {
            let mut m = bed.base_mean.clone();
            let mut v = bed.base_var.clone();
            m[j] = mu;
            v[j] = var;
            // Other coordinates held at their optimum so only coordinate j varies.
            for k in 0..d {
                if k != j {
                    m[k] = tm[k];
                    v[k] = tv[k];
                }
            }
            bed.gibbs_objective(&m, &v)
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for a in 0..g {
            let mu = lo_m + a as f64 * dm;
            for b in 1..=g {
                let var = b as f64 * dv;
                let val = sub(mu, var);
                if val < best.0 {
                    best = (val, mu, var);
                }
            }
        }
        p1_pass &= (best.1 - tm[j]).abs() <= dm && (best.2 - tv[j]).abs() <= dv;
        argmin.push([best.1, best.2]);
        cells.push([dm, dv]);
    }
    let p1 = P1Report { argmin, analytic: (0..d).map(|j| [tm[j], tv[j]]).collect(), grid_cell: cells, pass: p1_pass };

    // P2: analytic tilted score against the modified base score.
    let mut max_err: f64 = 0.0;
    for a in 0..=200 {
        for b in 0..=(if d == 2 { 200 } else { 0 }) {
            let mut z = vec![-5.0 + 10.0 * a as f64 / 200.0];
            if d == 2 {
                z.push(-5.0 + 10.0 * b as f64 / 200.0);
            }
            let lhs = bed.tilted_score(&z);
            let rhs = guided_score(&bed.base_score(&z), &bed.energy_grad(&z), bed.gamma);
            for (x, y) in lhs.iter().zip(&rhs) {
                max_err = max_err.max((x - y).abs());
            }
        }
    }
    let p2 = P2Report { max_abs_err: max_err, pass: max_err < budget.score_tolerance };

    // P3: long chain histogram against p*.
    let cfg = LangevinConfig { gamma: bed.gamma, ..budget.langevin };
    let p3 = match langevin_sample(|z| bed.base_score(z), |z| bed.energy_grad(z), &bed.base_mean, &cfg) {
        Err(e) => P3Report {
            tv_distance: f64::NAN,
            chain_mean: vec![],
            chain_var: vec![],
            samples: 0,
            pass: false,
            error: Some(e.to_string()),
        },
        Ok(chain) => {
            let mut tvd: f64 = 0.0;
            let mut means = Vec::new();
            let mut vars = Vec::new();
            for j in 0..d {
                let x = chain.coordinate(j);
                let (m, v) = mean_var(&x);
                means.push(m);
                vars.push(v);
                tvd = tvd.max(histogram_tv(&x, tm[j], tv[j].sqrt(), budget.bins));
            }
            P3Report {
                tv_distance: tvd,
                chain_mean: means,
                chain_var: vars,
                samples: chain.len(),
                pass: tvd < budget.tv_threshold,
                error: None,
            }
        }
    };
    Ok(PropositionReport { p1, p2, p3 })
}

/// Total-variation distance between a histogram of `x` over `mean ± 5 sd`
/// and the bin masses of `N(mu, sd²)` (tails folded into the outer bins).
fn histogram_tv(x: &[f64], mu: f64, sd: f64, bins: usize) -> f64 {
    let target = Normal::new(mu, sd).expect("positive variance");
    let lo = mu - 5.0 * sd;
    let width = 10.0 * sd / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in x {
        let k = ((v - lo) / width).floor();
        let k = if k < 0.0 { 0 } else { (k as usize).min(bins - 1) };
        counts[k] += 1;
    }
    let n = x.len() as f64;
    let mut tv = 0.0;
    for (k, &c) in counts.iter().enumerate() {
        let a = if k == 0 { 0.0 } else { target.cdf(lo + k as f64 * width) };
        let b = if k == bins - 1 { 1.0 } else { target.cdf(lo + (k + 1) as f64 * width) };
        tv += (c as f64 / n - (b - a)).abs();
    }
    0.5 * tv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> NoiseSchedule {
        build_schedule(ScheduleKind::Linear, 2, 0.1, 0.1).unwrap()
    }

    #[test]
    fn linear_two_step() {
        let s = toy();
        assert_eq!(s.alpha_bars(), &[1.0, 0.9, 0.81]);
        let s1 = build_schedule(ScheduleKind::Linear, 1, 0.3, 0.3).unwrap();
        assert_eq!(s1.alpha_bars(), &[1.0, 0.7]);
    }

    #[test]
    fn cosine_strictly_decreasing() {
        let s = build_schedule(ScheduleKind::Cosine, 100, 1e-4, 0.999).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(100) < s.alpha_bar(1));
    }

    #[test]
    fn invalid_bounds() {
        assert!(build_schedule(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 5, 0.2, 0.1).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 5, 0.0, 0.1).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 5, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_edge_cases() {
        let s = build_schedule(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        let z0 = [0.3, -1.2];
        assert_eq!(forward_sample(&z0, 0, &[5.0, 5.0], &s).unwrap(), z0.to_vec());
        let z = forward_sample(&z0, 40, &[0.0, 0.0], &s).unwrap();
        assert_eq!(z, vec![s.alpha_bar(40).sqrt() * 0.3, s.alpha_bar(40).sqrt() * -1.2]);
        assert!(forward_sample(&z0, 101, &[0.0, 0.0], &s).is_err());
    }

    #[test]
    fn posterior_values() {
        let s = toy();
        assert_eq!(s.posterior_variance(1).unwrap(), 0.0);
        let b2 = s.posterior_variance(2).unwrap();
        assert!((b2 - 0.1 / 0.19 * 0.1).abs() < 1e-15);
        assert!(s.posterior_variance(0).is_err());
        let big = build_schedule(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        for tau in 1..=100 {
            let (c0, ct) = big.posterior_coefficients(tau).unwrap();
            let ab = big.alpha_bars();
            let beta = 1e-4 + (0.02 - 1e-4) * (tau - 1) as f64 / 99.0;
            let sum = ab[tau - 1].sqrt() * beta / (1.0 - ab[tau]) + (1.0 - beta).sqrt() * (1.0 - ab[tau - 1]) / (1.0 - ab[tau]);
            assert!((c0 + ct - sum).abs() < 1e-9, "tau {tau}");
            let (mean, _) = posterior_params(&[2.0], &[2.0], tau, &big).unwrap();
            assert!((mean[0] - 2.0 * sum).abs() < 1e-8);
        }
    }

    #[test]
    fn eps_z0_conversions() {
        let s = build_schedule(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        let zt = [0.7, -0.2, 1.9];
        let eps = [0.1, 0.5, -1.3];
        let z0 = eps_to_z0(&zt, &eps, 37, &s).unwrap();
        let back = z0_to_eps(&zt, &z0, 37, &s).unwrap();
        for (a, b) in back.iter().zip(&eps) {
            assert!((a - b).abs() < 1e-12);
        }
        let z0 = eps_to_z0(&zt, &[0.0; 3], 10, &s).unwrap();
        assert_eq!(z0[0], 0.7 / s.alpha_bar(10).sqrt());
    }

    #[test]
    fn ancestral_constant_denoisers() {
        let s = build_schedule(ScheduleKind::Linear, 50, 1e-4, 0.02).unwrap();
        let zero = |_: &[f64], _: usize| vec![0.0; 3];
        assert_eq!(ancestral_sample(&zero, 3, &s, 1).unwrap(), vec![0.0; 3]);
        assert_eq!(ancestral_sample(&zero, 3, &s, 99).unwrap(), vec![0.0; 3]);
        let s1 = build_schedule(ScheduleKind::Linear, 1, 0.05, 0.05).unwrap();
        let c = |_: &[f64], _: usize| vec![1.5, -0.5];
        assert_eq!(ancestral_sample(&c, 2, &s1, 3).unwrap(), vec![1.5, -0.5]);
        let lin = |z: &[f64], t: usize| z.iter().map(|v| v * 0.5 + t as f64 * 1e-3).collect::<Vec<_>>();
        assert_eq!(ancestral_sample(&lin, 4, &s, 7).unwrap(), ancestral_sample(&lin, 4, &s, 7).unwrap());
    }

    #[test]
    fn ancestral_reports_non_finite() {
        let s = build_schedule(ScheduleKind::Linear, 5, 1e-4, 0.02).unwrap();
        let bad = |_: &[f64], t: usize| vec![if t == 3 { f64::NAN } else { 0.0 }];
        assert!(matches!(ancestral_sample(&bad, 1, &s, 0), Err(DiffusionError::NonFinite { step: 3, .. })));
    }

    #[test]
    fn langevin_divergence_guard() {
        let cfg = LangevinConfig { eta: 0.5, steps: 1000, bound: 1e3, ..LangevinConfig::default() };
        let r = langevin_sample(|z: &[f64]| z.iter().map(|v| 3.0 * v).collect(), |z: &[f64]| vec![0.0; z.len()], &[1.0], &cfg);
        assert!(matches!(r, Err(DiffusionError::Diverged { .. })));
    }

    #[test]
    fn null_guidance_matches_unguided() {
        let bed = GaussianTestBed::standard_1d(2.0, 0.0);
        let cfg = LangevinConfig { steps: 5000, burn_in: 0, ..LangevinConfig::default() };
        let a = langevin_sample(|z| bed.base_score(z), |z| bed.energy_grad(z), &[0.0], &cfg).unwrap();
        let cfg1 = LangevinConfig { gamma: 1.0, ..cfg };
        let b = langevin_sample(|z| bed.base_score(z), |z: &[f64]| vec![0.0; z.len()], &[0.0], &cfg1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tilted_gaussian_closed_form() {
        let bed = GaussianTestBed::standard_1d(2.0, 1.0);
        assert!((bed.tilted_mean()[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((bed.tilted_var()[0] - 1.0 / 3.0).abs() < 1e-15);
        // Quadrature of p_θ·exp(−γE) on a fine grid.
        let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
        let h = 1e-3;
        for k in 0..20_000 {
            let z = -8.0 + k as f64 * h;
            let w = (-0.5 * z * z - (z - 2.0) * (z - 2.0)).exp();
            z0 += w;
            z1 += w * z;
            z2 += w * z * z;
        }
        let m = z1 / z0;
        assert!((m - 4.0 / 3.0).abs() < 1e-8);
        assert!((z2 / z0 - m * m - 1.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn ks_detects_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = Normal::new(0.0, 1.0).unwrap();
        let (_, p) = ks_test(&x, |v| n.cdf(v));
        assert!(p > 0.01);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.3).collect();
        let (_, p) = ks_test(&shifted, |v| n.cdf(v));
        assert!(p < 1e-6);
    }

    #[test]
    fn gamma_zero_report_is_base() {
        let bed = GaussianTestBed::standard_1d(2.0, 0.0);
        let budget = PropositionBudget {
            grid_points: 101,
            langevin: LangevinConfig { steps: 200_000, burn_in: 2_000, ..PropositionBudget::default().langevin },
            ..PropositionBudget::default()
        };
        let r = verify_propositions(&bed, &budget).unwrap();
        assert_eq!(r.p1.analytic, vec![[0.0, 1.0]]);
        assert!(r.all_pass(), "{r:?}");
    }

    #[test]
    fn anisotropic_2d_factorizes() {
        let bed = GaussianTestBed { base_mean: vec![0.0, 1.0], base_var: vec![1.0, 0.25], anchor: vec![2.0, -1.0], gamma: 1.0 };
        let tv = bed.tilted_var();
        let tm = bed.tilted_mean();
        let single = |j: usize| GaussianTestBed {
            base_mean: vec![bed.base_mean[j]],
            base_var: vec![bed.base_var[j]],
            anchor: vec![bed.anchor[j]],
            gamma: 1.0,
        };
        for j in 0..2 {
            assert_eq!(single(j).tilted_mean()[0], tm[j]);
            assert_eq!(single(j).tilted_var()[0], tv[j]);
        }
        let budget = PropositionBudget {
            grid_points: 121,
            langevin: LangevinConfig { steps: 300_000, burn_in: 2_000, ..PropositionBudget::default().langevin },
            ..PropositionBudget::default()
        };
        let r = verify_propositions(&bed, &budget).unwrap();
        assert!(r.all_pass(), "{r:?}");
    }
}
