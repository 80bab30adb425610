//! Surrogate objectives and per-step log policy ratios.
//!
//! The clipped PPO term, its hinge equivalent, and the log-hinge variant all
//! share the same gradient away from the clip kinks; the ε-matching loss
//! rewrites the log-hinge directly in terms of noise-prediction differences
//! via
//!
//! ```text
//! log ρ_t = −[ w·(ε̂_θ − ε̂_old)·ε_old + ½‖w·(ε̂_θ − ε̂_old)‖² ]
//! ```
//!
//! so an on-policy step (ε̂_θ = ε̂_old) has log ρ = 0 exactly, with no
//! stored-density recomputation involved. The same algebra applies verbatim
//! to flow velocities with the flow-side weights.

use crate::error::{Error, Result};

/// A group-normalized terminal reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Advantage {
    pub value: f64,
    pub group_id: usize,
}

/// Guard added to the group standard deviation before dividing.
pub const ADVANTAGE_STD_GUARD: f64 = 1e-8;

/// Normalizes rewards within one group: `A_j = (r_j − mean) / (std + 1e-8)`
/// with the population standard deviation. A single-member group gets
/// `A = 0` (nothing to compare against); an empty group is an error.
pub fn normalize_advantages(group_id: usize, rewards: &[f64]) -> Result<Vec<Advantage>> {
    if rewards.is_empty() {
        return Err(Error::InvalidInput("cannot normalize an empty reward group".into()));
    }
    if rewards.len() == 1 {
        return Ok(vec![Advantage { value: 0.0, group_id }]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + ADVANTAGE_STD_GUARD;
    Ok(rewards
        .iter()
        .map(|r| Advantage { value: (r - mean) / denom, group_id })
        .collect())
}

/// The clipped PPO surrogate for one term:
/// `max(−ρA, −clip(ρ, 1−ξ, 1+ξ)·A)`.
pub fn ppo_clip_term(rho: f64, a: f64, xi: f64) -> f64 {
    (-rho * a).max(-rho.clamp(1.0 - xi, 1.0 + xi) * a)
}

/// Hinge form with the same gradient: `max(0, ξ|A| − A(ρ−1))`.
pub fn hinge_term(rho: f64, a: f64, xi: f64) -> f64 {
    (xi * a.abs() - a * (rho - 1.0)).max(0.0)
}

/// Log-hinge: `max(0, ξ|A| − A·log ρ)`.
pub fn log_hinge_term(log_rho: f64, a: f64, xi: f64) -> f64 {
    (xi * a.abs() - a * log_rho).max(0.0)
}

/// Relative gap of the first-order approximation `log ρ ≈ ρ − 1`:
/// `|log ρ − (ρ−1)| / max(|ρ−1|, 1e-12)`.
pub fn taylor_gap(rho: f64) -> f64 {
    (rho.ln() - (rho - 1.0)).abs() / (rho - 1.0).abs().max(1e-12)
}

/// Everything needed to evaluate one step's log policy ratio: the current
/// and old predictions (ε̂ for diffusion, u for flow), the standard normal
/// noise injected at that step under the old policy, the step's credit
/// weight, and the clipping threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRatioInputs {
    pub eps_theta: Vec<f64>,
    pub eps_old: Vec<f64>,
    pub noise_old: Vec<f64>,
    pub w: f64,
    pub clip_xi: f64,
}

impl StepRatioInputs {
    pub fn new(
        eps_theta: Vec<f64>,
        eps_old: Vec<f64>,
        noise_old: Vec<f64>,
        w: f64,
        clip_xi: f64,
    ) -> Result<Self> {
        if eps_theta.len() != eps_old.len() || eps_theta.len() != noise_old.len() {
            return Err(Error::DimensionMismatch(format!(
                "eps_theta/eps_old/noise_old lengths {}/{}/{}",
                eps_theta.len(),
                eps_old.len(),
                noise_old.len()
            )));
        }
        if !(w > 0.0) {
            return Err(Error::InvalidInput(format!("step weight must be > 0, got {w}")));
        }
        if !(clip_xi > 0.0 && clip_xi < 1.0) {
            return Err(Error::InvalidInput(format!("need 0 < xi < 1, got {clip_xi}")));
        }
        Ok(Self { eps_theta, eps_old, noise_old, w, clip_xi })
    }

    /// `D = w·(ε̂_θ−ε̂_old)·ε_old + ½‖w·(ε̂_θ−ε̂_old)‖²`; `log ρ = −D`.
    pub fn mismatch(&self) -> f64 {
        let mut dot = 0.0;
        let mut quad = 0.0;
        for i in 0..self.eps_theta.len() {
            let d = self.eps_theta[i] - self.eps_old[i];
            dot += d * self.noise_old[i];
            let wd = self.w * d;
            quad += wd * wd;
        }
        self.w * dot + 0.5 * quad
    }
}

/// Per-step log policy ratio for the DDIM sampler (predictions are ε̂).
pub fn log_rho_diffusion(inputs: &StepRatioInputs) -> f64 {
    0.0 - inputs.mismatch()
}

/// Per-step log policy ratio for the flow SDE (predictions are velocities).
pub fn log_rho_flow(inputs: &StepRatioInputs) -> f64 {
    0.0 - inputs.mismatch()
}

/// Result of evaluating the ε-matching loss over one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// `Σ_t max(0, ξ|A| + A·D_t)`.
    pub loss: f64,
    /// Per-step gradient of the loss w.r.t. ε̂_θ (zero rows where clipped).
    pub grad_wrt_eps_theta: Vec<Vec<f64>>,
    /// `true` where the hinge is inactive, i.e. the step is clipped.
    pub clip_mask: Vec<bool>,
    /// `1 − mean(clip_mask)`.
    pub active_fraction: f64,
}

/// ε-matching loss over a trajectory's steps. Each active step contributes
/// `ξ|A| + A·D_t` and gradient `A·(w·ε_old + w²·(ε̂_θ − ε̂_old))` w.r.t.
/// ε̂_θ; inactive (clipped) steps contribute nothing.
pub fn eps_matching_loss(steps: &[StepRatioInputs], a: f64, xi: f64) -> Result<LossReport> {
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::InvalidInput(format!("need 0 < xi < 1, got {xi}")));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(steps.len());
    let mut clip_mask = Vec::with_capacity(steps.len());
    for step in steps {
        let arg = xi * a.abs() + a * step.mismatch();
        let active = arg > 0.0;
        clip_mask.push(!active);
        if active {
            loss += arg;
            let w = step.w;
            let grad = (0..step.eps_theta.len())
                .map(|i| {
                    a * (w * step.noise_old[i]
                        + w * w * (step.eps_theta[i] - step.eps_old[i]))
                })
                .collect();
            grads.push(grad);
        } else {
            grads.push(vec![0.0; step.eps_theta.len()]);
        }
    }
    let active_fraction = if steps.is_empty() {
        1.0
    } else {
        clip_mask.iter().filter(|&&m| !m).count() as f64 / steps.len() as f64
    };
    Ok(LossReport { loss, grad_wrt_eps_theta: grads, clip_mask, active_fraction })
}

/// Fraction of clipped (inactive) steps over a batch of reports, weighting
/// every step equally.
pub fn clip_fraction(reports: &[LossReport]) -> f64 {
    let total: usize = reports.iter().map(|r| r.clip_mask.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let clipped: usize = reports
        .iter()
        .map(|r| r.clip_mask.iter().filter(|&&m| m).count())
        .sum();
    clipped as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    // Independent oracle: log ratio of two isotropic Gaussians with shared
    // variance, evaluated at x.
    fn gaussian_log_density(x: &[f64], mu: &[f64], sigma: f64) -> f64 {
        let d = x.len() as f64;
        let sq: f64 = x.iter().zip(mu).map(|(xi, mi)| (xi - mi) * (xi - mi)).sum();
        -0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma)
    }

    #[test]
    fn advantages_hand_cases() {
        // Constant rewards: std guard keeps A at ~0.
        let a = normalize_advantages(0, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(a.iter().all(|adv| adv.value.abs() < 1e-12));
        // [0, 2]: population std 1, so A = [-1, 1] (up to the 1e-8 guard).
        let a = normalize_advantages(3, &[0.0, 2.0]).unwrap();
        assert!((a[0].value + 1.0).abs() < 1e-7);
        assert!((a[1].value - 1.0).abs() < 1e-7);
        assert_eq!(a[0].group_id, 3);
        // Degenerate group of one.
        let a = normalize_advantages(0, &[5.0]).unwrap();
        assert_eq!(a[0].value, 0.0);
        assert!(normalize_advantages(0, &[]).is_err());
    }

    #[test]
    fn advantages_shift_invariant() {
        let r = [0.3, 1.7, 0.9, 2.2, 0.1];
        let shifted: Vec<f64> = r.iter().map(|x| x + 123.456).collect();
        let a = normalize_advantages(0, &r).unwrap();
        let b = normalize_advantages(0, &shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.value - y.value).abs() < 1e-9);
        }
    }

    #[test]
    fn ppo_clip_hand_cases() {
        assert_eq!(ppo_clip_term(1.0, 0.7, 0.2), -0.7);
        assert!((ppo_clip_term(1.5, 1.0, 0.2) + 1.2).abs() < 1e-15);
        assert!((ppo_clip_term(0.5, -1.0, 0.2) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn hinge_hand_cases() {
        assert!((hinge_term(1.0, 0.4, 0.2) - 0.2 * 0.4).abs() < 1e-15);
        assert_eq!(hinge_term(1.3, 1.0, 0.2), 0.0);
        assert!((hinge_term(1.3, -1.0, 0.2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_hinge_hand_cases() {
        assert!((log_hinge_term(0.0, 0.4, 0.2) - 0.08).abs() < 1e-15);
        assert_eq!(log_hinge_term(0.25, 1.0, 0.2), 0.0);
        assert!((log_hinge_term(0.25, -1.0, 0.2) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn hinge_matches_ppo_gradient_away_from_kinks() {
        let mut rng = crate::rng::StreamRng::new(11).stream(&[0]);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 500 {
            let rho: f64 = rng.gen_range(0.2..2.0);
            let a: f64 = rng.gen_range(-2.0..2.0);
            let xi: f64 = rng.gen_range(0.05..0.5);
            if (rho - (1.0 + xi)).abs() < 1e-3
                || (rho - (1.0 - xi)).abs() < 1e-3
                || (rho - 1.0).abs() < 1e-3
            {
                continue;
            }
            let fd = |f: &dyn Fn(f64) -> f64| (f(rho + h) - f(rho - h)) / (2.0 * h);
            let dp = fd(&|r| ppo_clip_term(r, a, xi));
            let dh = fd(&|r| hinge_term(r, a, xi));
            assert!((dp - dh).abs() < 1e-6, "rho={rho} a={a} xi={xi}: {dp} vs {dh}");
            // Both are either -A (active) or 0.
            let active = xi * a.abs() - a * (rho - 1.0) > 0.0;
            let expect = if active { -a } else { 0.0 };
            assert!((dh - expect).abs() < 1e-5);
            checked += 1;
        }
    }

    #[test]
    fn taylor_gap_hand_values() {
        assert_eq!(taylor_gap(1.0), 0.0);
        assert!((taylor_gap(1.1) - 0.046898).abs() < 1e-5);
        assert!((taylor_gap(0.9) - 0.053605).abs() < 1e-5);
    }

    #[test]
    fn log_abs_bound_on_grid() {
        // |log(1+x) - x| <= x^2 / (2(1-|x|)) for |x| <= 0.5.
        for i in 0..=1000 {
            let x = -0.5 + i as f64 / 1000.0;
            let gap = ((1.0 + x).ln() - x).abs();
            let bound = x * x / (2.0 * (1.0 - x.abs()));
            assert!(gap <= bound + 1e-15, "x={x}: {gap} > {bound}");
        }
    }

    #[test]
    fn log_rho_identity_case_is_bitwise_zero() {
        let eps = vec![0.3, -0.7, 1.2];
        let inputs = StepRatioInputs::new(
            eps.clone(),
            eps,
            vec![0.5, -0.1, 2.0],
            1.7,
            0.1,
        )
        .unwrap();
        let lr = log_rho_diffusion(&inputs);
        assert_eq!(lr.to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn log_rho_matches_gaussian_ratio_oracle() {
        let mut rng = crate::rng::StreamRng::new(42).stream(&[7]);
        for _ in 0..2000 {
            let d = rng.gen_range(1..5);
            let ab_prev: f64 = rng.gen_range(0.2..0.999);
            let ab_t: f64 = ab_prev * rng.gen_range(0.5..0.999);
            let sigma: f64 = rng.gen_range(0.05..1.0) * (1.0 - ab_prev).sqrt();
            let c = crate::diffusion::credit_from_parts(ab_t, ab_prev, sigma).unwrap();
            let w = c / sigma;

            let x_t: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let eps_old: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let eps_theta: Vec<f64> =
                eps_old.iter().map(|e| e + rng.gen_range(-0.5..0.5)).collect();
            let noise: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();

            // DDIM posterior means under both predictions.
            let alpha_t = ab_t / ab_prev;
            let dir = (1.0 - ab_prev - sigma * sigma).sqrt();
            let mu = |eps: &[f64]| -> Vec<f64> {
                (0..d)
                    .map(|i| (x_t[i] - (1.0 - ab_t).sqrt() * eps[i]) / alpha_t.sqrt() + dir * eps[i])
                    .collect()
            };
            let mu_old = mu(&eps_old);
            let mu_theta = mu(&eps_theta);
            let x_prev: Vec<f64> =
                (0..d).map(|i| mu_old[i] + sigma * noise[i]).collect();

            let oracle = gaussian_log_density(&x_prev, &mu_theta, sigma)
                - gaussian_log_density(&x_prev, &mu_old, sigma);
            let inputs =
                StepRatioInputs::new(eps_theta, eps_old, noise, w, 0.1).unwrap();
            let got = log_rho_diffusion(&inputs);
            assert!(
                (got - oracle).abs() <= 1e-8,
                "log rho {got} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn log_rho_linear_term_negates_under_sign_flip() {
        let eps_old = vec![0.2, -0.4];
        let delta = vec![0.3, 0.1];
        let noise = vec![1.0, -0.5];
        let make = |sign: f64| {
            let eps_theta: Vec<f64> =
                eps_old.iter().zip(&delta).map(|(e, d)| e + sign * d).collect();
            StepRatioInputs::new(eps_theta, eps_old.clone(), noise.clone(), 2.0, 0.1).unwrap()
        };
        let plus = log_rho_diffusion(&make(1.0));
        let minus = log_rho_diffusion(&make(-1.0));
        // log rho = -(linear + quad): sum isolates the quadratic part,
        // difference isolates the linear part.
        let quad = -(plus + minus) / 2.0;
        let w = 2.0;
        let expect_quad =
            0.5 * w * w * delta.iter().map(|d| d * d).sum::<f64>();
        assert!((quad - expect_quad).abs() < 1e-12);
    }

    #[test]
    fn flow_log_rho_matches_gaussian_ratio_oracle() {
        let mut rng = crate::rng::StreamRng::new(43).stream(&[9]);
        for _ in 0..2000 {
            let d = rng.gen_range(1..4);
            let t: f64 = rng.gen_range(0.05..1.0);
            let dt: f64 = rng.gen_range(0.01..t.min(0.5));
            let sigma: f64 = rng.gen_range(0.1..1.2);
            let poly = 1.0 + (1.0 - t) * t / 2.0;
            let w = dt.sqrt() / sigma * poly;

            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let u_old: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let u_theta: Vec<f64> =
                u_old.iter().map(|u| u + rng.gen_range(-0.5..0.5)).collect();
            let noise: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();

            // Euler–Maruyama transition mean with the model score
            // s = -(z - (1-t) z0_hat)/sigma^2, z0_hat = z - u t.
            let mu = |u: &[f64]| -> Vec<f64> {
                (0..d)
                    .map(|i| {
                        let z0 = z[i] - u[i] * t;
                        let s = -(z[i] - (1.0 - t) * z0) / (sigma * sigma);
                        z[i] - u[i] * dt + 0.5 * sigma * sigma * s * dt
                    })
                    .collect()
            };
            let mu_old = mu(&u_old);
            let mu_theta = mu(&u_theta);
            let step_std = sigma * dt.sqrt();
            let z_next: Vec<f64> =
                (0..d).map(|i| mu_old[i] + step_std * noise[i]).collect();

            let oracle = gaussian_log_density(&z_next, &mu_theta, step_std)
                - gaussian_log_density(&z_next, &mu_old, step_std);
            let inputs = StepRatioInputs::new(u_theta, u_old, noise, w, 0.1).unwrap();
            let got = log_rho_flow(&inputs);
            assert!(
                (got - oracle).abs() <= 1e-8,
                "flow log rho {got} vs oracle {oracle}"
            );
        }
    }

    fn random_steps(rng: &mut impl Rng, n: usize, d: usize) -> Vec<StepRatioInputs> {
        (0..n)
            .map(|_| {
                let eps_old: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let eps_theta: Vec<f64> =
                    eps_old.iter().map(|e| e + rng.gen_range(-0.3..0.3)).collect();
                let noise: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                StepRatioInputs::new(eps_theta, eps_old, noise, rng.gen_range(0.2..4.0), 0.1)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn eps_matching_on_policy_case() {
        let mut steps = random_steps(&mut crate::rng::StreamRng::new(5).stream(&[1]), 6, 3);
        for s in &mut steps {
            s.eps_theta = s.eps_old.clone();
        }
        let a = -1.3;
        let xi = 0.1;
        let report = eps_matching_loss(&steps, a, xi).unwrap();
        assert!((report.loss - 6.0 * xi * a.abs()).abs() < 1e-12);
        assert!(report.clip_mask.iter().all(|&m| !m));
        assert_eq!(report.active_fraction, 1.0);
        assert_eq!(clip_fraction(&[report]), 0.0);
    }

    #[test]
    fn eps_matching_zero_advantage() {
        let steps = random_steps(&mut crate::rng::StreamRng::new(6).stream(&[1]), 4, 2);
        let report = eps_matching_loss(&steps, 0.0, 0.1).unwrap();
        assert_eq!(report.loss, 0.0);
        for g in &report.grad_wrt_eps_theta {
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn eps_matching_gradient_matches_finite_differences() {
        let mut rng = crate::rng::StreamRng::new(9).stream(&[2]);
        for _ in 0..25 {
            let mut steps = random_steps(&mut rng, 3, 2);
            let a: f64 = rng.gen_range(-2.0..2.0);
            let xi = 0.1;
            let base = eps_matching_loss(&steps, a, xi).unwrap();
            let h = 1e-6;
            for t in 0..steps.len() {
                for i in 0..steps[t].eps_theta.len() {
                    let orig = steps[t].eps_theta[i];
                    steps[t].eps_theta[i] = orig + h;
                    let up = eps_matching_loss(&steps, a, xi).unwrap().loss;
                    steps[t].eps_theta[i] = orig - h;
                    let dn = eps_matching_loss(&steps, a, xi).unwrap().loss;
                    steps[t].eps_theta[i] = orig;
                    let fd = (up - dn) / (2.0 * h);
                    let g = base.grad_wrt_eps_theta[t][i];
                    let denom = fd.abs().max(g.abs()).max(1e-6);
                    assert!(
                        (fd - g).abs() / denom <= 1e-5,
                        "grad mismatch at step {t}, dim {i}: fd={fd} analytic={g}"
                    );
                }
            }
        }
    }

    #[test]
    fn clip_fraction_extremes() {
        let active = LossReport {
            loss: 1.0,
            grad_wrt_eps_theta: vec![vec![0.0]; 4],
            clip_mask: vec![false; 4],
            active_fraction: 1.0,
        };
        let clipped = LossReport {
            loss: 0.0,
            grad_wrt_eps_theta: vec![vec![0.0]; 4],
            clip_mask: vec![true; 4],
            active_fraction: 0.0,
        };
        assert_eq!(clip_fraction(&[active.clone(), active.clone()]), 0.0);
        assert_eq!(clip_fraction(&[clipped.clone(), clipped.clone()]), 1.0);
        assert_eq!(clip_fraction(&[active, clipped]), 0.5);
    }

    #[test]
    fn step_inputs_validation() {
        assert!(StepRatioInputs::new(vec![0.0], vec![0.0, 1.0], vec![0.0], 1.0, 0.1).is_err());
        assert!(StepRatioInputs::new(vec![0.0], vec![0.0], vec![0.0], 0.0, 0.1).is_err());
        assert!(StepRatioInputs::new(vec![0.0], vec![0.0], vec![0.0], 1.0, 1.0).is_err());
    }
}
