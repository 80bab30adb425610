//! Trajectory generation with full rollout recording.
//!
//! Both samplers record, per step, the state entering the update, the
//! injected standard normal noise, and the old policy's guided prediction,
//! so that a training pass can recompute the exact same update (replay
//! identity) and evaluate policy ratios without any stored densities. The
//! DDPO-style baseline additionally stores per-step Gaussian log-densities
//! via [`store_baseline_logprob`], optionally through a single-precision
//! pipeline to expose storage-precision mismatch.

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::flow::{FlowGrid, FlowSigma};
use crate::policy::PolicyParams;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Classifier-free guidance scale plus implicit-reward-guidance mixing
/// weights (one λ per tuned policy; the λ list may be empty).
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    /// CFG scale β: `ε̂ = (1−β)·ε̂(·,∅) + β·ε̂(·,c)`.
    pub cfg_scale: f64,
    /// IRG weights λ_i; `ε̂ = ε̂_ref + Σ λ_i (ε̂_θi − ε̂_ref)`.
    pub lambdas: Vec<f64>,
}

impl GuidanceSpec {
    /// Plain conditional sampling from a single policy.
    pub fn plain() -> Self {
        Self { cfg_scale: 1.0, lambdas: Vec::new() }
    }

    pub fn with_lambdas(lambdas: Vec<f64>) -> Self {
        Self { cfg_scale: 1.0, lambdas }
    }
}

/// CFG-combined prediction of a single policy.
fn cfg_prediction(
    policy: &PolicyParams,
    beta: f64,
    x: &[f64],
    t: f64,
    c: Option<usize>,
) -> Result<Vec<f64>> {
    if beta == 1.0 || c.is_none() {
        return policy.predict(x, t, c);
    }
    let cond = policy.predict(x, t, c)?;
    let uncond = policy.predict(x, t, None)?;
    Ok(cond
        .iter()
        .zip(&uncond)
        .map(|(cv, uv)| (1.0 - beta) * uv + beta * cv)
        .collect())
}

/// Guided prediction: CFG per policy, then IRG mixing across policies.
///
/// Exact identities (bit-for-bit): an empty or all-zero λ list returns the
/// reference prediction; a single λ = 1 returns that tuned policy's
/// prediction.
pub fn guided_prediction(
    spec: &GuidanceSpec,
    reference: &PolicyParams,
    tuned: &[&PolicyParams],
    x: &[f64],
    t: f64,
    c: Option<usize>,
) -> Result<Vec<f64>> {
    if tuned.len() != spec.lambdas.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} tuned policies for {} lambdas",
            tuned.len(),
            spec.lambdas.len()
        )));
    }
    let active: Vec<(usize, f64)> = spec
        .lambdas
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, l)| *l != 0.0)
        .collect();
    if active.is_empty() {
        return cfg_prediction(reference, spec.cfg_scale, x, t, c);
    }
    if active.len() == 1 && active[0].1 == 1.0 {
        return cfg_prediction(tuned[active[0].0], spec.cfg_scale, x, t, c);
    }
    let lambda_sum: f64 = active.iter().map(|(_, l)| l).sum();
    let mut out: Vec<f64> = cfg_prediction(reference, spec.cfg_scale, x, t, c)?
        .into_iter()
        .map(|v| (1.0 - lambda_sum) * v)
        .collect();
    for &(i, l) in &active {
        let pred = cfg_prediction(tuned[i], spec.cfg_scale, x, t, c)?;
        for (o, p) in out.iter_mut().zip(&pred) {
            *o += l * p;
        }
    }
    Ok(out)
}

/// One recorded reverse-sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Index into the schedule (diffusion: subset position; flow: interval).
    pub step: usize,
    /// State entering the update (`x_t` / `z_t`).
    pub state: Vec<f64>,
    /// Injected standard normal noise ε_old (zeros for deterministic steps).
    pub noise: Vec<f64>,
    /// Old-policy guided prediction at this state (ε̂_old / u_old).
    pub prediction: Vec<f64>,
    /// Stored per-step log-density (baseline path only).
    pub logprob: Option<f64>,
}

/// One reverse-sampling rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Records in sampling order (high noise first).
    pub steps: Vec<StepRecord>,
    pub final_sample: Vec<f64>,
    pub condition: Option<usize>,
    /// Terminal reward, filled by the benchmark harness.
    pub reward: Option<f64>,
    pub stream_id: u64,
}

/// Normalized network time for a diffusion schedule position.
pub fn diffusion_t_norm(schedule: &DiffusionSchedule, k: usize) -> f64 {
    schedule.steps()[k] as f64 / (schedule.base().t_train() - 1) as f64
}

/// Posterior mean of the DDIM update: `(x − sqrt(1−ᾱ_t)·ε̂)/sqrt(α_t)
/// + sqrt(1−ᾱ_prev−σ²)·ε̂` with `α_t = ᾱ_t/ᾱ_prev`.
pub fn ddim_mean(
    x: &[f64],
    eps_hat: &[f64],
    ab_t: f64,
    ab_prev: f64,
    sigma: f64,
) -> Vec<f64> {
    let s_noise = (1.0 - ab_t).sqrt();
    let s_alpha = (ab_t / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).sqrt();
    x.iter()
        .zip(eps_hat)
        .map(|(xi, e)| (xi - s_noise * e) / s_alpha + dir * e)
        .collect()
}

fn ddim_mean_f32(x: &[f64], eps_hat: &[f64], ab_t: f64, ab_prev: f64, sigma: f64) -> Vec<f32> {
    let ab_t = ab_t as f32;
    let ab_prev = ab_prev as f32;
    let sigma = sigma as f32;
    let s_noise = (1.0 - ab_t).sqrt();
    let s_alpha = (ab_t / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).sqrt();
    x.iter()
        .zip(eps_hat)
        .map(|(xi, e)| {
            let (xi, e) = (*xi as f32, *e as f32);
            (xi - s_noise * e) / s_alpha + dir * e
        })
        .collect()
}

/// Isotropic Gaussian log-density.
pub fn gaussian_logprob(x: &[f64], mu: &[f64], sigma: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma)
}

fn gaussian_logprob_f32(x: &[f64], mu: &[f32], sigma: f64) -> f64 {
    let d = x.len() as f32;
    let sigma = sigma as f32;
    let sq: f32 = x
        .iter()
        .zip(mu)
        .map(|(a, b)| {
            let diff = *a as f32 - b;
            diff * diff
        })
        .sum();
    let lp = -0.5 * d * (2.0 * std::f32::consts::PI * sigma * sigma).ln()
        - sq / (2.0 * sigma * sigma);
    lp as f64
}

fn check_finite(v: &[f64], what: &str, step: usize) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite {what} at step {step}; aborting trajectory"
        )));
    }
    Ok(())
}

/// Stochastic DDIM reverse sampling with full recording.
///
/// Starts from `x ~ N(0, I)` at the highest selected timestep and applies
/// `x ← μ̂(x, ε̂) + σ_t·ε` down the schedule. Steps with `σ_t = 0` are
/// deterministic and draw no noise.
pub fn ddim_reverse_sample(
    spec: &GuidanceSpec,
    reference: &PolicyParams,
    tuned: &[&PolicyParams],
    schedule: &DiffusionSchedule,
    c: Option<usize>,
    rng: &mut ChaCha8Rng,
    stream_id: u64,
) -> Result<Trajectory> {
    let dim = reference.arch.data_dim;
    let mut x: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
    let mut steps = Vec::with_capacity(schedule.len());
    for k in (0..schedule.len()).rev() {
        check_finite(&x, "state", k)?;
        let t = diffusion_t_norm(schedule, k);
        let eps_hat = guided_prediction(spec, reference, tuned, &x, t, c)?;
        check_finite(&eps_hat, "prediction", k)?;
        let sigma = schedule.sigma()[k];
        let noise: Vec<f64> = if sigma > 0.0 {
            (0..dim).map(|_| standard_normal(rng)).collect()
        } else {
            vec![0.0; dim]
        };
        let mean = ddim_mean(&x, &eps_hat, schedule.alpha_bar_at(k), schedule.alpha_bar_prev(k), sigma);
        let next: Vec<f64> = mean.iter().zip(&noise).map(|(m, n)| m + sigma * n).collect();
        steps.push(StepRecord { step: k, state: x, noise, prediction: eps_hat, logprob: None });
        x = next;
    }
    check_finite(&x, "final sample", 0)?;
    Ok(Trajectory { steps, final_sample: x, condition: c, reward: None, stream_id })
}

/// Storage precision for the baseline's per-step log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogProbPrecision {
    Double,
    Single,
}

/// Fills each record's stored log-density of the taken action under the old
/// policy, at the configured storage precision.
///
/// `Single` runs the whole pipeline — network forward, posterior mean, and
/// Gaussian density — in `f32`, which is what creates the stored-versus-
/// recomputed mismatch the log-ratio objectives are immune to.
pub fn store_baseline_logprob(
    traj: &mut Trajectory,
    schedule: &DiffusionSchedule,
    spec: &GuidanceSpec,
    reference: &PolicyParams,
    precision: LogProbPrecision,
) -> Result<()> {
    let n = traj.steps.len();
    for i in 0..n {
        let k = traj.steps[i].step;
        let sigma = schedule.sigma()[k];
        if !(sigma > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "log-prob undefined at step {k}: sigma = {sigma}"
            )));
        }
        let (ab_t, ab_prev) = (schedule.alpha_bar_at(k), schedule.alpha_bar_prev(k));
        let next_state: &[f64] = if i + 1 < n {
            &traj.steps[i + 1].state
        } else {
            &traj.final_sample
        };
        let lp = match precision {
            LogProbPrecision::Double => {
                let mean = ddim_mean(&traj.steps[i].state, &traj.steps[i].prediction, ab_t, ab_prev, sigma);
                gaussian_logprob(next_state, &mean, sigma)
            }
            LogProbPrecision::Single => {
                let t = diffusion_t_norm(schedule, k);
                if !spec.lambdas.is_empty() {
                    return Err(Error::InvalidInput(
                        "single-precision log-prob storage supports plain policies only".into(),
                    ));
                }
                let eps32 = if spec.cfg_scale == 1.0 || traj.condition.is_none() {
                    reference.predict_f32(&traj.steps[i].state, t, traj.condition)?
                } else {
                    let cond = reference.predict_f32(&traj.steps[i].state, t, traj.condition)?;
                    let uncond = reference.predict_f32(&traj.steps[i].state, t, None)?;
                    cond.iter()
                        .zip(&uncond)
                        .map(|(cv, uv)| {
                            let b = spec.cfg_scale as f32;
                            ((1.0 - b) * (*uv as f32) + b * (*cv as f32)) as f64
                        })
                        .collect()
                };
                let mean32 = ddim_mean_f32(&traj.steps[i].state, &eps32, ab_t, ab_prev, sigma);
                gaussian_logprob_f32(next_state, &mean32, sigma)
            }
        };
        traj.steps[i].logprob = Some(lp);
    }
    Ok(())
}

/// Euler–Maruyama transition mean for the flow SDE:
/// `μ = z − u·Δt + (σ²/2)·s·Δt` with the model score
/// `s = −(z − (1−t)·ẑ0)/σ²`, `ẑ0 = z − u·t`.
pub fn flow_sde_mean(z: &[f64], u: &[f64], t: f64, dt: f64, sigma: f64) -> Vec<f64> {
    z.iter()
        .zip(u)
        .map(|(zi, ui)| {
            let z0 = zi - ui * t;
            let score = -(zi - (1.0 - t) * z0) / (sigma * sigma);
            zi - ui * dt + 0.5 * sigma * sigma * score * dt
        })
        .collect()
}

/// Integration mode for the flow sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowMode {
    /// Stochastic SDE with score correction and injected noise.
    Sde,
    /// Plain Euler ODE: `z ← z − u·Δt` (the σ → 0 limit switch).
    Ode,
}

/// Flow sampling from `z ~ N(0, I)` at `t = 1` down to `t = 0`.
pub fn flow_sample(
    spec: &GuidanceSpec,
    reference: &PolicyParams,
    tuned: &[&PolicyParams],
    grid: &FlowGrid,
    sigma: &FlowSigma,
    mode: FlowMode,
    c: Option<usize>,
    rng: &mut ChaCha8Rng,
    stream_id: u64,
) -> Result<Trajectory> {
    if sigma.sigma.len() != grid.len() {
        return Err(Error::DimensionMismatch("sigma/grid length".into()));
    }
    let dim = reference.arch.data_dim;
    let mut z: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
    let mut steps = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        check_finite(&z, "state", i)?;
        let t = grid.t()[i];
        let dt = grid.dt()[i];
        let u = guided_prediction(spec, reference, tuned, &z, t, c)?;
        check_finite(&u, "prediction", i)?;
        let (next, noise) = match mode {
            FlowMode::Ode => {
                let next = z.iter().zip(&u).map(|(zi, ui)| zi - ui * dt).collect();
                (next, vec![0.0; dim])
            }
            FlowMode::Sde => {
                let s = sigma.sigma[i];
                let noise: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
                let mean = flow_sde_mean(&z, &u, t, dt, s);
                let step_std = s * dt.sqrt();
                let next = mean.iter().zip(&noise).map(|(m, n)| m + step_std * n).collect();
                (next, noise)
            }
        };
        steps.push(StepRecord { step: i, state: z, noise, prediction: u, logprob: None });
        z = next;
    }
    check_finite(&z, "final sample", grid.len())?;
    Ok(Trajectory { steps, final_sample: z, condition: c, reward: None, stream_id })
}

/// Re-applies every recorded diffusion update and checks that it reproduces
/// the next recorded state bit-for-bit.
pub fn replay_check_diffusion(traj: &Trajectory, schedule: &DiffusionSchedule) -> Result<()> {
    for (i, rec) in traj.steps.iter().enumerate() {
        let k = rec.step;
        let sigma = schedule.sigma()[k];
        let mean = ddim_mean(&rec.state, &rec.prediction, schedule.alpha_bar_at(k), schedule.alpha_bar_prev(k), sigma);
        let next: Vec<f64> = mean.iter().zip(&rec.noise).map(|(m, n)| m + sigma * n).collect();
        let expect: &[f64] =
            if i + 1 < traj.steps.len() { &traj.steps[i + 1].state } else { &traj.final_sample };
        if next.iter().zip(expect).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Numerical(format!("replay mismatch at record {i}")));
        }
    }
    Ok(())
}

/// Flow-side replay identity (SDE mode).
pub fn replay_check_flow(traj: &Trajectory, grid: &FlowGrid, sigma: &FlowSigma) -> Result<()> {
    for (i, rec) in traj.steps.iter().enumerate() {
        let t = grid.t()[rec.step];
        let dt = grid.dt()[rec.step];
        let s = sigma.sigma[rec.step];
        let mean = flow_sde_mean(&rec.state, &rec.prediction, t, dt, s);
        let step_std = s * dt.sqrt();
        let next: Vec<f64> = mean.iter().zip(&rec.noise).map(|(m, n)| m + step_std * n).collect();
        let expect: &[f64] =
            if i + 1 < traj.steps.len() { &traj.steps[i + 1].state } else { &traj.final_sample };
        if next.iter().zip(expect).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Numerical(format!("replay mismatch at record {i}")));
        }
    }
    Ok(())
}

/// Box–Muller standard normal draw.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
