//! Acceptance suite. Runs with `harness = false` so every criterion prints one
//! PASS/FAIL line regardless of output capture; exits non-zero on any failure.

use std::time::{Duration, Instant};

use ecgwm_core::action_space::{Action, DrugRegistry, ParamField, ParamSelector};
use ecgwm_core::diffusion_engine::{build_schedule, eps_to_z0, forward_sample, verify_propositions, z0_to_eps, GaussianTestBed, PropositionBudget, ScheduleKind};
use ecgwm_core::ecg_ode::{integrate_rk4, synth_ecg, OdeParams, PhaseWindow, SynthConfig, WaveLabel};
use ecgwm_core::epk_world_model::{draw_noise, loss_joint, predict_next, Draw, PreparedSample, WorldModel, WorldModelConfig};
use ecgwm_core::nn::max_relative_gradient_error;
use ecgwm_core::risk_decision::{aggregate, rank_actions, risk_stats, score, AggregateMode, RiskDistribution, RiskLabels, NUM_LABELS, TACHYCARDIA};
use ecgwm_core::rollout_harness::{
    build_eval_suite, contraction_probe, dataset_latent_std, latent_qtc, median_difference, missing_lead_eval, paired_t_less, rollout_pair, ContractionConfig,
    ContractionEstimate, ExperimentConfig, ModelPredictor, SuiteConfig,
};
use ecgwm_core::signal_metrics::{pan_tompkins_rpeaks, PatientProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<(bool, String), String>;

struct Report {
    failed: usize,
}

impl Report {
    fn record(&mut self, name: &str, outcome: Outcome) {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            self.failed += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

// --- theory -----------------------------------------------------------------

/// Mean and variance of `N(0,1)·exp(−γ(z−m)²)` by trapezoid quadrature.
fn tilted_moments_by_quadrature(m: f64, gamma: f64) -> (f64, f64) {
    let (lo, hi, n) = (-12.0, 14.0, 200_000);
    let h = (hi - lo) / n as f64;
    let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let z = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let p = w * (-0.5 * z * z - gamma * (z - m).powi(2)).exp();
        z0 += p;
        z1 += p * z;
        z2 += p * z * z;
    }
    let mu = z1 / z0;
    (mu, z2 / z0 - mu * mu)
}

fn theory() -> Outcome {
    let t0 = Instant::now();
    let bed = GaussianTestBed::standard_1d(2.0, 1.0);
    let rep = verify_propositions(&bed, &PropositionBudget::default()).map_err(err)?;
    let elapsed = t0.elapsed();
    let (mu, var) = tilted_moments_by_quadrature(2.0, 1.0);
    let stat_ok = (rep.p3.chain_mean[0] - mu).abs() <= 0.05 && (rep.p3.chain_var[0] - var).abs() <= 0.05;
    let score_ok = rep.p2.max_abs_err < 1e-8;
    let cell = rep.p1.grid_cell[0];
    let argmin = rep.p1.argmin[0];
    let grid_ok = (argmin[0] - mu).abs() <= cell[0] && (argmin[1] - var).abs() <= cell[1];
    let time_ok = elapsed < Duration::from_secs(120);
    Ok((
        stat_ok && score_ok && grid_ok && time_ok,
        format!(
            "Langevin mean {:.4} var {:.4} (oracle {mu:.4}, {var:.4}); score err {:.2e}; grid argmin ({:.4}, {:.4}) cell ({:.4}, {:.4}); {:.1}s",
            rep.p3.chain_mean[0],
            rep.p3.chain_var[0],
            rep.p2.max_abs_err,
            argmin[0],
            argmin[1],
            cell[0],
            cell[1],
            elapsed.as_secs_f64()
        ),
    ))
}

// --- diffusion algebra ------------------------------------------------------

fn diffusion_algebra() -> Outcome {
    let s = build_schedule(ScheduleKind::Linear, 100, 1e-4, 0.02).map_err(err)?;
    let z0 = [0.7, -1.3];
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_z: f64 = 0.0;
    for tau in [1, 25, 50, 100] {
        let mut cols = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for _ in 0..n {
            let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let z = forward_sample(&z0, tau, &eps, &s).map_err(err)?;
            cols[0].push(z[0]);
            cols[1].push(z[1]);
        }
        let ab: f64 = (1..=tau).map(|t| 1.0 - s.beta(t)).product();
        for (j, col) in cols.iter().enumerate() {
            let m = mean(col);
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let target_m = ab.sqrt() * z0[j];
            let target_v = 1.0 - ab;
            let se_m = (target_v / n as f64).sqrt();
            let se_v = target_v * (2.0 / (n - 1) as f64).sqrt();
            worst_z = worst_z.max((m - target_m).abs() / se_m).max((v - target_v).abs() / se_v);
        }
    }
    let mut worst_rt: f64 = 0.0;
    for tau in [1, 10, 50, 100] {
        let zt: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let eps: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let back = z0_to_eps(&zt, &eps_to_z0(&zt, &eps, tau, &s).map_err(err)?, tau, &s).map_err(err)?;
        worst_rt = eps.iter().zip(&back).fold(worst_rt, |w, (a, b)| w.max((a - b).abs()));
    }
    let post1 = s.posterior_variance(1).map_err(err)?;
    Ok((
        worst_z <= 3.0 && worst_rt < 1e-10 && post1 == 0.0,
        format!("max moment deviation {worst_z:.2} SE; round trip {worst_rt:.1e}; posterior variance at step 1 = {post1}"),
    ))
}

// --- gradient contract ------------------------------------------------------

fn gradient_contract() -> Outcome {
    let reg = DrugRegistry::default_registry();
    let cfg = WorldModelConfig {
        latent_dim: 3,
        diffusion_steps: 10,
        beta_min: 1e-3,
        beta_max: 0.2,
        time_embed_dim: 4,
        hidden: vec![8, 8],
        proj_len: 6,
        proj_hidden: Some(4),
        c: 0.25,
        ..WorldModelConfig::default()
    };
    let model = WorldModel::init(&cfg, &reg, 12).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cd = model.denoiser.input_dim() - model.latent_dim() - cfg.time_embed_dim;
    let samples: Vec<PreparedSample> = (0..6)
        .map(|_| PreparedSample {
            cond: (0..cd).map(|_| rng.random_range(-1.0..1.0)).collect(),
            z_next: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            epk: (0..model.projection.resample_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let batch: Vec<&PreparedSample> = samples.iter().collect();
    let mut draws: Vec<Draw> = (0..6).map(|_| draw_noise(&mut rng, 10, 3)).collect();
    draws[0].tau = 1;
    draws[1].tau = 10;
    let lj = loss_joint(&model, &batch, &draws).map_err(err)?;

    let mut pd = model.denoiser.params().to_vec();
    let idx: Vec<usize> = (0..pd.len()).collect();
    let e_den = max_relative_gradient_error(&mut pd, &lj.grad_denoiser, &idx, 1e-5, 1e-9, |p| {
        let mut m = model.clone();
        m.denoiser.params_mut().copy_from_slice(p);
        loss_joint(&m, &batch, &draws).expect("loss").total
    });
    let mut pp = model.projection.mlp().params().to_vec();
    let idx: Vec<usize> = (0..pp.len()).collect();
    let e_proj = max_relative_gradient_error(&mut pp, &lj.grad_projection, &idx, 1e-5, 1e-9, |p| {
        let mut m = model.clone();
        m.projection.mlp_mut().params_mut().copy_from_slice(p);
        loss_joint(&m, &batch, &draws).expect("loss").total
    });
    Ok((e_den < 1e-4 && e_proj < 1e-4, format!("max relative error denoiser {e_den:.2e}, projection {e_proj:.2e}")))
}

// --- ODE numerics -----------------------------------------------------------

fn relaxation_error(steps: usize, span: f64) -> Result<f64, String> {
    let p = OdeParams::relaxation_only(0.0);
    let y = integrate_rk4(&p, 1.0, &PhaseWindow::new(0.3, span, steps).map_err(err)?).map_err(err)?;
    Ok((y.last().expect("non-empty") - (-span).exp()).abs())
}

fn ode_numerics() -> Outcome {
    let e1001 = relaxation_error(1001, 1.0)?;
    // Coarse steps keep the error well above round-off so the slope is measurable.
    let span = 4.0;
    let steps = [5usize, 9, 17, 33, 65];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &l in &steps {
        xs.push((span / (l - 1) as f64).ln());
        ys.push(relaxation_error(l, span)?.ln());
    }
    let (mx, my) = (mean(&xs), mean(&ys));
    let order = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    Ok((e1001 < 1e-6 && order >= 3.5, format!("error at L = 1001 {e1001:.2e}; fitted order {order:.3}")))
}

// --- decision arithmetic ----------------------------------------------------

fn dist(id: &str, samples: &[f64]) -> RiskDistribution {
    RiskDistribution { action: Action::single(id, 1.0).expect("valid action"), samples: samples.to_vec() }
}

fn ranking_ids(dists: &[RiskDistribution], lambda: f64) -> Result<Vec<String>, String> {
    Ok(rank_actions(dists, lambda).map_err(err)?.into_iter().map(|r| r.id).collect())
}

fn decision_arithmetic() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let mut fails = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            fails.push(what.to_string());
        }
    };

    let st = risk_stats(&[0.2, 0.3, 0.4]).map_err(err)?;
    check(close(st.mu, 0.3) && close(st.sigma2.unwrap_or(f64::NAN), 0.01), "stats {0.2,0.3,0.4}");
    let st = risk_stats(&[0.1, 0.9]).map_err(err)?;
    check(close(st.mu, 0.5) && close(st.sigma2.unwrap_or(f64::NAN), 0.32), "stats {0.1,0.9}");
    let st = risk_stats(&[0.4; 5]).map_err(err)?;
    check(st.sigma2 == Some(0.0), "constant samples");
    check(risk_stats(&[]).is_err(), "empty samples");
    check(risk_stats(&[0.3]).map_err(err)?.sigma2.is_none(), "single sample");

    check(close(score(0.3, 0.01, 0.6).s, 0.36), "score 0.3/0.01/0.6");
    check(score(0.42, 0.09, 0.0).s == 0.42, "score lambda 0");
    check(score(0.42, 0.0, 1.7).s == 0.42, "score zero variance");

    let all_half = RiskLabels { probs: [0.5; NUM_LABELS] };
    for mode in [AggregateMode::Mean, AggregateMode::Max, AggregateMode::Top3] {
        check(close(aggregate(&all_half, mode), 0.5), "aggregate all 0.5");
    }
    let mut one = RiskLabels { probs: [0.0; NUM_LABELS] };
    one.probs[TACHYCARDIA] = 0.9;
    check(close(aggregate(&one, AggregateMode::Max), 0.9), "aggregate max");
    check(close(aggregate(&one, AggregateMode::Top3), 0.3), "aggregate top3");
    check(close(aggregate(&one, AggregateMode::Mean), 0.9 / 16.0), "aggregate mean");

    check(ranking_ids(&[dist("quinidine", &[0.5, 0.5]), dist("lidocaine", &[0.2, 0.2])], 0.6)? == ["lidocaine@1", "quinidine@1"], "S ordering");
    // Equal S at λ = 0 (both means 0.3125); the narrower distribution has the later id.
    let tie = [dist("lidocaine", &[0.125, 0.5]), dist("quinidine", &[0.25, 0.375])];
    let ranked = rank_actions(&tie, 0.0).map_err(err)?;
    check(ranked[0].s == ranked[1].s && ranked[0].id == "quinidine@1", "sigma tie-break");
    check(rank_actions(&[], 0.6).is_err(), "empty ranking");

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ids = ["dofetilide", "lidocaine", "mexiletine", "moxifloxacin", "quinidine", "ranolazine", "placebo", "diltiazem"];
    let mut invariance_failures = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let n = rng.random_range(2..=ids.len());
        let lambda = rng.random_range(0.0..2.0);
        // Samples on a 1/64 grid keep shifted and scaled scores exactly representable,
        // so equal scores stay equal after the transformation.
        let grid = |rng: &mut ChaCha8Rng| rng.random_range(0..64) as f64 / 64.0;
        let base: Vec<RiskDistribution> = ids[..n].iter().map(|id| dist(id, &(0..k).map(|_| grid(&mut rng)).collect::<Vec<_>>())).collect();
        let shift = rng.random_range(-4..=4) as f64 / 8.0;
        let factor = [0.5, 2.0, 4.0][rng.random_range(0..3)];
        let shifted: Vec<_> = base.iter().map(|d| dist(&d.action.drug_id, &d.samples.iter().map(|v| v + shift).collect::<Vec<_>>())).collect();
        let scaled: Vec<_> = base.iter().map(|d| dist(&d.action.drug_id, &d.samples.iter().map(|v| v * factor).collect::<Vec<_>>())).collect();
        let r0 = ranking_ids(&base, lambda)?;
        if ranking_ids(&shifted, lambda)? != r0 || ranking_ids(&scaled, lambda)? != r0 {
            invariance_failures += 1;
        }
    }
    check(invariance_failures == 0, "ranking invariance");
    let pass = fails.is_empty();
    Ok((pass, if pass { "all examples exact; shift/scale invariance held on 1000 instances".to_string() } else { format!("failed: {}", fails.join(", ")) }))
}

// --- detector ---------------------------------------------------------------

fn detector() -> Outcome {
    let fs: f64 = 256.0;
    let tol = (0.020 * fs).floor() as i64;
    let (mut hit, mut total) = (0usize, 0usize);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hr = rng.random_range(50.0..110.0);
        let ecg = synth_ecg(&OdeParams::healthy(), &SynthConfig { seed, ..SynthConfig::new(12, fs, hr) }).map_err(err)?;
        let found = pan_tompkins_rpeaks(&ecg.waveform, 0).map_err(err)?;
        for &r in &ecg.r_peaks {
            total += 1;
            hit += found.iter().any(|&p| (p as i64 - r as i64).abs() <= tol) as usize;
        }
    }
    let frac = hit as f64 / total as f64;
    Ok((frac >= 0.95, format!("{hit}/{total} R-peaks matched within ±20 ms ({:.1}%)", 100.0 * frac)))
}

// --- trained-model criteria ---------------------------------------------------

struct SeedRun {
    closed: [f64; 2],
    delta: [f64; 2],
    unmasked: [f64; 2],
    masked: [f64; 2],
    contraction: Option<ContractionEstimate>,
    qtc_agree: usize,
    qtc_total: usize,
}

/// +1 when the drug lengthens the T-wave phase, −1 when it shortens it,
/// `None` for drugs without a T-phase rule.
fn qtc_rule_sign(reg: &DrugRegistry, drug: &str) -> Option<f64> {
    let shift: f64 = reg
        .drug(drug)?
        .rules
        .iter()
        .filter(|r| r.target == ParamSelector::Wave(WaveLabel::T, ParamField::Theta))
        .map(|r| r.add)
        .sum();
    (shift != 0.0).then(|| shift.signum())
}

fn run_seed(exp: &ExperimentConfig, env: &ecgwm_core::rollout_harness::SyntheticEnv, seed: u64) -> Result<SeedRun, String> {
    let reg = env.registry();
    let prof = PatientProfile::default();
    let train = exp.train_actions(reg).map_err(err)?;
    let test = exp.test_actions(reg).map_err(err)?;
    let ds = exp.corpus(env, seed, &prof).map_err(err)?;
    let suite = build_eval_suite(env, &train, &train, &SuiteConfig { episodes: 24, horizon: 5, decision_states: 0, missing_cases: 50, seed: 1000 + seed }).map_err(err)?;
    let latent_std = dataset_latent_std(&ds);
    let cases: Vec<_> = ds.records.iter().take(128).map(|r| (r.z_k.clone(), r.action.clone())).collect();

    let mut out = SeedRun { closed: [0.0; 2], delta: [0.0; 2], unmasked: [0.0; 2], masked: [0.0; 2], contraction: None, qtc_agree: 0, qtc_total: 0 };
    for (i, c) in [0.0, 0.25].into_iter().enumerate() {
        let model = exp.train_model(env, &ds, c, seed).map_err(err)?;
        let pred = ModelPredictor { model: &model, profile: prof.clone() };
        let (mut cl, mut or) = (Vec::new(), Vec::new());
        for ep in &suite.episodes {
            let cmp = rollout_pair(&pred, env, &ep.z0, &ep.actions, ep.seed);
            if let Some(f) = cmp.closed_loop.failure.as_ref().or(cmp.oracle.failure.as_ref()) {
                return Err(f.clone());
            }
            cl.push(cmp.closed_loop.mean_latent_mse());
            or.push(cmp.oracle.mean_latent_mse());
        }
        out.closed[i] = mean(&cl);
        out.delta[i] = mean(&cl) - mean(&or);
        out.unmasked[i] = missing_lead_eval(&pred, env, &suite.missing, &[], 7).map_err(err)?.errors.latent_mse;
        out.masked[i] = missing_lead_eval(&pred, env, &suite.missing, &[1], 7).map_err(err)?.errors.latent_mse;
        if c > 0.0 {
            out.contraction = Some(contraction_probe(&pred, env, &cases, &latent_std, &ContractionConfig::default()).map_err(err)?);
            for s in 0..24u64 {
                let z = env.reset(5000 + s).map_err(err)?;
                let q0 = latent_qtc(env.codec(), &z, &prof).map_err(err)?;
                for a in &test {
                    let Some(sign) = qtc_rule_sign(reg, &a.drug_id) else { continue };
                    let p = predict_next(&model, &z, a, &prof, 3, s).map_err(err)?;
                    let qs = p.samples.iter().map(|x| latent_qtc(env.codec(), x, &prof)).collect::<Result<Vec<_>, _>>().map_err(err)?;
                    out.qtc_total += 1;
                    out.qtc_agree += ((mean(&qs) - q0).signum() == sign) as usize;
                }
            }
        }
    }
    Ok(out)
}

fn trained_criteria(report: &mut Report) {
    const NAMES: [&str; 4] = ["epk-ablation-direction", "contraction", "directional-drug-effects", "missing-lead-direction"];
    let t0 = Instant::now();
    let exp = ExperimentConfig::default();
    let reg = DrugRegistry::default_registry();
    let env = match exp.build_env(&reg) {
        Ok(e) => e,
        Err(e) => {
            for n in NAMES {
                report.record(n, Err(format!("environment: {e}")));
            }
            return;
        }
    };
    let mut runs = Vec::new();
    for seed in 0..5u64 {
        match run_seed(&exp, &env, seed) {
            Ok(r) => {
                eprintln!(
                    "  seed {seed}: closed-loop {:.4} vs {:.4}, gap {:.4} vs {:.4}, kappa {:.3}, qtc {}/{}, missing {:.4}->{:.4} vs {:.4}->{:.4} ({:.0}s)",
                    r.closed[0], r.closed[1], r.delta[0], r.delta[1], r.contraction.as_ref().map_or(f64::NAN, |c| c.kappa), r.qtc_agree, r.qtc_total, r.unmasked[0], r.masked[0], r.unmasked[1], r.masked[1],
                    t0.elapsed().as_secs_f64()
                );
                runs.push(r);
            }
            Err(e) => {
                for n in NAMES {
                    report.record(n, Err(format!("seed {seed}: {e}")));
                }
                return;
            }
        }
    }
    let elapsed = t0.elapsed();
    let col = |f: &dyn Fn(&SeedRun) -> f64| runs.iter().map(f).collect::<Vec<f64>>();
    let (c0, c25) = (col(&|r| r.closed[0]), col(&|r| r.closed[1]));
    let (d0, d25) = (col(&|r| r.delta[0]), col(&|r| r.delta[1]));

    report.record(
        NAMES[0],
        paired_t_less(&c25, &c0).map_err(err).map(|(t, p)| {
            let gap_ok = median(&d25) < median(&d0);
            (
                p < 0.05 && gap_ok && elapsed < Duration::from_secs(7200),
                format!(
                    "horizon-5 latent MSE mean {:.4} (c=0.25) vs {:.4} (c=0), t = {t:.2}, p = {p:.2e}; median gap {:.4} vs {:.4}; {:.0}s",
                    mean(&c25),
                    mean(&c0),
                    median(&d25),
                    median(&d0),
                    elapsed.as_secs_f64()
                ),
            )
        }),
    );

    let fits: Vec<&ContractionEstimate> = runs.iter().filter_map(|r| r.contraction.as_ref()).collect();
    let kappas: Vec<String> = fits.iter().map(|c| format!("{:.3} [{:.3}, {:.3}]", c.kappa, c.kappa_ci.0, c.kappa_ci.1)).collect();
    let ok = fits.len() == runs.len() && fits.iter().all(|c| !c.degenerate && c.kappa < 1.0 && c.kappa_ci.1 < 1.1);
    report.record(NAMES[1], Ok((ok, format!("kappa per seed {}", kappas.join(", ")))));

    let (agree, total): (usize, usize) = runs.iter().fold((0, 0), |(a, t), r| (a + r.qtc_agree, t + r.qtc_total));
    let frac = agree as f64 / total.max(1) as f64;
    report.record(NAMES[2], Ok((total > 0 && frac >= 0.9, format!("{agree}/{total} QTc signs match ({:.1}%)", 100.0 * frac))));

    let masked_ge = runs.iter().all(|r| r.masked[0] >= r.unmasked[0] && r.masked[1] >= r.unmasked[1]);
    let deg0 = median_difference(&col(&|r| r.unmasked[0]), &col(&|r| r.masked[0]));
    let deg25 = median_difference(&col(&|r| r.unmasked[1]), &col(&|r| r.masked[1]));
    report.record(
        NAMES[3],
        Ok((masked_ge && deg25 < deg0, format!("masked >= unmasked in every cell: {masked_ge}; median degradation {deg25:.4} (c=0.25) vs {deg0:.4} (c=0)"))),
    );
}

fn main() {
    let mut report = Report { failed: 0 };
    report.record("theory-suite", theory());
    report.record("diffusion-algebra", diffusion_algebra());
    report.record("gradient-contract", gradient_contract());
    report.record("ode-numerics", ode_numerics());
    report.record("decision-arithmetic", decision_arithmetic());
    report.record("detector", detector());
    trained_criteria(&mut report);
    println!("acceptance: {} failed", report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
