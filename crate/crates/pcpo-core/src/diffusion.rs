//! DDIM schedule construction and per-step credit weights.
//!
//! A reverse-sampling step from `x_t` to `x_prev` with noise scale `σ_t`
//! contributes to the log policy ratio with weight `w(t) = C(t)/σ_t`, where
//!
//! ```text
//! C(t) = sqrt(1 − ᾱ_t)/sqrt(α_t) − sqrt(1 − ᾱ_prev − σ_t²),   α_t = ᾱ_t/ᾱ_prev
//! ```
//!
//! and `ᾱ_prev` comes from the *selected* inference subset, so the same prev
//! index is used by sampling and by the weight. `w(t)` is highly non-uniform
//! under the standard DDIM variance; [`DiffusionSchedule::solve_constant_sigma`]
//! re-engineers per-step deviations `σ̃_t` so that `C(σ̃_t)/σ̃_t = w*` at every
//! step, which equalizes the credit each timestep receives.

use crate::error::{Error, Result};

/// How β interpolates from `beta_start` to `beta_end` over training steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaKind {
    Linear,
    /// Linear in sqrt(β), squared back; the usual latent-diffusion choice.
    ScaledLinear,
}

/// Training-time noise schedule: β, α = 1 − β and cumulative products ᾱ.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl TrainSchedule {
    /// Builds a schedule of `t_train` steps.
    ///
    /// Requires `0 < beta_start <= beta_end < 1` and `t_train >= 2`.
    pub fn new(t_train: usize, beta_start: f64, beta_end: f64, kind: BetaKind) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::InvalidSchedule(format!(
                "t_train must be >= 2, got {t_train}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let n = t_train as f64;
        let beta: Vec<f64> = match kind {
            BetaKind::Linear => (0..t_train)
                .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (n - 1.0))
                .collect(),
            BetaKind::ScaledLinear => {
                let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
                (0..t_train)
                    .map(|t| {
                        let s = s0 + (s1 - s0) * t as f64 / (n - 1.0);
                        s * s
                    })
                    .collect()
            }
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_train);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        // Strict monotonicity and range are guaranteed by 0 < β < 1, but a
        // pathological (subnormal) product would break downstream square roots.
        if alpha_bar.iter().any(|&ab| !(ab > 0.0 && ab < 1.0)) {
            return Err(Error::InvalidSchedule(
                "alpha_bar left (0, 1); t_train or beta_end too large".into(),
            ));
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// The default SD-like schedule: scaled-linear β from 8.5e-4 to 1.2e-2
    /// over 1000 steps.
    pub fn default_sd_like() -> Self {
        Self::new(1000, 8.5e-4, 1.2e-2, BetaKind::ScaledLinear).expect("valid default")
    }

    /// Default 50-step RL inference schedule at η = 1.
    pub fn default_rl_schedule() -> DiffusionSchedule {
        DiffusionSchedule::new(Self::default_sd_like(), 50, 1.0, true).expect("valid default")
    }

    /// Default 50-step audit schedule. η is reduced so the native weights
    /// sit well above their per-step floors and the constant-weight solve
    /// can match the native mean (at η = 1 it cannot; see
    /// [`DiffusionSchedule::min_weight_at`]).
    pub fn default_audit_schedule() -> DiffusionSchedule {
        DiffusionSchedule::new(Self::default_sd_like(), 50, 0.05, true).expect("valid default")
    }

    pub fn t_train(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// A DDIM inference schedule over a subset of the training grid.
///
/// `steps` is strictly increasing; sampling iterates it in reverse. For RL
/// use every `σ_t` must be strictly positive (the Gaussian policy ratio is
/// undefined at zero variance), so `rl: true` rejects η = 0 and any
/// degenerate boundary step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    base: TrainSchedule,
    steps: Vec<usize>,
    eta: f64,
    sigma: Vec<f64>,
    rl: bool,
}

/// Evenly spaced subset of `k` indices in `0..t_train` ("trailing" spacing:
/// the highest training step is always selected, and `k = t_train` recovers
/// the identity subset).
fn spaced_steps(t_train: usize, k: usize) -> Vec<usize> {
    (0..k)
        .map(|i| {
            let pos = (i + 1) as f64 * t_train as f64 / k as f64;
            (pos.round() as usize).saturating_sub(1).min(t_train - 1)
        })
        .collect()
}

/// `C` from its parts. `alpha_t` here is the step-to-step ratio
/// `ᾱ_t/ᾱ_prev` over the selected subset. Errors if the radicand
/// `1 − ᾱ_prev − σ²` is negative.
pub fn credit_from_parts(alpha_bar_t: f64, alpha_bar_prev: f64, sigma: f64) -> Result<f64> {
    let alpha_t = alpha_bar_t / alpha_bar_prev;
    let radicand = 1.0 - alpha_bar_prev - sigma * sigma;
    if radicand < 0.0 {
        return Err(Error::InvalidSchedule(format!(
            "negative radicand 1 - alpha_bar_prev - sigma^2 = {radicand}"
        )));
    }
    Ok((1.0 - alpha_bar_t).sqrt() / alpha_t.sqrt() - radicand.sqrt())
}

impl DiffusionSchedule {
    /// Builds a `k`-step DDIM schedule with stochasticity `eta`.
    ///
    /// `σ_t = η · sqrt((1−ᾱ_prev)/(1−ᾱ_t)) · sqrt(1 − ᾱ_t/ᾱ_prev)` with
    /// `ᾱ_prev` taken from the selected subset. The step preceding the first
    /// selected index is the training boundary: `ᾱ_0` when `steps[0] > 0`
    /// (matching samplers that do not force the final alpha to one), or the
    /// exact `ᾱ_{-1} = 1` when the subset starts at index 0 — in which case
    /// `σ` vanishes there and the schedule is rejected for RL use.
    pub fn new(base: TrainSchedule, k: usize, eta: f64, rl: bool) -> Result<Self> {
        let t_train = base.t_train();
        if k == 0 || k > t_train {
            return Err(Error::InvalidSchedule(format!(
                "need 1 <= k <= t_train, got k={k}, t_train={t_train}"
            )));
        }
        if eta < 0.0 {
            return Err(Error::InvalidSchedule(format!("eta must be >= 0, got {eta}")));
        }
        if rl && eta == 0.0 {
            return Err(Error::InvalidSchedule(
                "eta = 0 gives a zero-variance policy with undefined density ratio; \
                 rl schedules need eta > 0"
                    .into(),
            ));
        }
        let steps = spaced_steps(t_train, k);
        let mut schedule = Self { base, steps, eta, sigma: Vec::new(), rl };
        let sigma: Vec<f64> = (0..k)
            .map(|i| {
                let ab_t = schedule.alpha_bar_at(i);
                let ab_prev = schedule.alpha_bar_prev(i);
                eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
            })
            .collect();
        schedule.sigma = sigma;
        if rl {
            for (i, &s) in schedule.sigma.iter().enumerate() {
                if !(s > 0.0) {
                    return Err(Error::InvalidSchedule(format!(
                        "rl schedule requires sigma > 0 at every step; step {i} has sigma = {s}"
                    )));
                }
                let b = 1.0 - schedule.alpha_bar_prev(i);
                if s * s >= b {
                    return Err(Error::InvalidSchedule(format!(
                        "sigma^2 must stay below 1 - alpha_bar_prev at step {i}"
                    )));
                }
            }
        }
        Ok(schedule)
    }

    /// Replaces per-step deviations, revalidating the RL invariants.
    pub fn with_sigma(&self, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != self.steps.len() {
            return Err(Error::DimensionMismatch(format!(
                "sigma length {} != step count {}",
                sigma.len(),
                self.steps.len()
            )));
        }
        let out = Self { sigma, ..self.clone() };
        if out.rl {
            for i in 0..out.steps.len() {
                let s = out.sigma[i];
                let b = 1.0 - out.alpha_bar_prev(i);
                if !(s > 0.0 && s * s < b) {
                    return Err(Error::InvalidSchedule(format!(
                        "replacement sigma inadmissible at step {i}"
                    )));
                }
            }
        }
        Ok(out)
    }

    pub fn base(&self) -> &TrainSchedule {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn is_rl(&self) -> bool {
        self.rl
    }

    /// ᾱ at the selected step `i`.
    pub fn alpha_bar_at(&self, i: usize) -> f64 {
        self.base.alpha_bar[self.steps[i]]
    }

    /// ᾱ at the step preceding selected step `i` (subset order).
    pub fn alpha_bar_prev(&self, i: usize) -> f64 {
        if i > 0 {
            self.base.alpha_bar[self.steps[i - 1]]
        } else if self.steps[0] > 0 {
            self.base.alpha_bar[0]
        } else {
            1.0
        }
    }

    /// The step-to-step `α_t = ᾱ_t/ᾱ_prev` for selected step `i`.
    pub fn step_alpha(&self, i: usize) -> f64 {
        self.alpha_bar_at(i) / self.alpha_bar_prev(i)
    }

    /// Credit coefficient `C(t)` at selected step `i`.
    pub fn credit_coefficient(&self, i: usize) -> Result<f64> {
        credit_from_parts(self.alpha_bar_at(i), self.alpha_bar_prev(i), self.sigma[i])
    }

    /// Native per-step weights `w = C/σ`.
    pub fn native_weights(&self) -> Result<CreditProfile> {
        let mut w = Vec::with_capacity(self.len());
        let mut c = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let ci = self.credit_coefficient(i)?;
            let s = self.sigma[i];
            if !(s > 0.0) {
                return Err(Error::InvalidSchedule(format!(
                    "native weight needs sigma > 0 at step {i}"
                )));
            }
            c.push(ci);
            w.push(ci / s);
        }
        Ok(CreditProfile { w, c, w_star: None, sigma_tilde: None })
    }

    /// Solves `C(σ̃)/σ̃ = w*` per step, keeping the admissible root closest
    /// to the original `σ`. With `a = sqrt(1−ᾱ_t)/sqrt(α_t)` and
    /// `b = 1−ᾱ_prev`, `σ̃` is a root of
    /// `(1+w*²)σ² − 2·a·w*·σ + (a² − b) = 0` subject to `σ̃ > 0`,
    /// `σ̃² < b`, and `C(σ̃) > 0`.
    pub fn solve_constant_sigma(&self, w_star: f64) -> Result<CreditProfile> {
        if !(w_star > 0.0) {
            return Err(Error::InvalidInput(format!("w_star must be > 0, got {w_star}")));
        }
        let mut sigma_tilde = Vec::with_capacity(self.len());
        let mut w = Vec::with_capacity(self.len());
        let mut c = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let ab_t = self.alpha_bar_at(i);
            let ab_prev = self.alpha_bar_prev(i);
            let a = (1.0 - ab_t).sqrt() / (ab_t / ab_prev).sqrt();
            let b = 1.0 - ab_prev;
            let st = solve_sigma_step(a, b, w_star, self.sigma[i]).map_err(|reason| {
                Error::NoAdmissibleSigma { step: i, w_star, reason }
            })?;
            let ci = credit_from_parts(ab_t, ab_prev, st)?;
            let wi = ci / st;
            if (wi - w_star).abs() > 1e-9 {
                return Err(Error::NoAdmissibleSigma {
                    step: i,
                    w_star,
                    reason: format!("root verification failed: |w - w*| = {}", (wi - w_star).abs()),
                });
            }
            sigma_tilde.push(st);
            w.push(wi);
            c.push(ci);
        }
        Ok(CreditProfile { w, c, w_star: Some(w_star), sigma_tilde: Some(sigma_tilde) })
    }

    /// Smallest weight attainable at step `i` over all admissible σ:
    /// `w_min = sqrt(a²/b − 1)`. The η = 1 DDIM deviation is exactly the
    /// minimizer (σ₁² = b·(1−α)/(1−ᾱ) coincides with b·(1−b/a²)), so at
    /// η = 1 the native weight *is* this floor.
    pub fn min_weight_at(&self, i: usize) -> f64 {
        let ab_t = self.alpha_bar_at(i);
        let ab_prev = self.alpha_bar_prev(i);
        let a2 = (1.0 - ab_t) / (ab_t / ab_prev);
        let b = 1.0 - ab_prev;
        (a2 / b - 1.0).max(0.0).sqrt()
    }

    /// Smallest constant weight solvable at *every* step. A target below
    /// this floor has no admissible σ̃ at the binding step (usually the
    /// terminal one, where `1 − ᾱ_prev` is tiny).
    pub fn min_feasible_constant_weight(&self) -> f64 {
        (0..self.len()).map(|i| self.min_weight_at(i)).fold(0.0, f64::max)
    }

    /// Target weight for the constant-weight re-engineering: the native
    /// mean when it is attainable, otherwise just above the feasibility
    /// floor. Returns the target and whether the mean was attainable.
    pub fn default_w_star(&self) -> Result<(f64, bool)> {
        let mean = self.native_weights()?.target_weight();
        let floor = 1.02 * self.min_feasible_constant_weight();
        if mean >= floor {
            Ok((mean, true))
        } else {
            Ok((floor, false))
        }
    }
}

/// One step of the constant-weight solve: returns the admissible root of the
/// quadratic nearest `sigma_orig`, or a human-readable reason on failure.
///
/// Besides the two quadratic roots, the parabola's vertex is always tried as
/// a candidate: when `w*` sits exactly at the step's attainable minimum the
/// true solution is a tangent (double) root, where the discriminant is a
/// cancellation of equals and the explicit-root formula loses half the
/// digits. The residual check below keeps or discards each candidate.
fn solve_sigma_step(a: f64, b: f64, w_star: f64, sigma_orig: f64) -> std::result::Result<f64, String> {
    // (1+w*^2) s^2 - 2 a w* s + (a^2 - b) = 0, solved with the stable form.
    let qa = 1.0 + w_star * w_star;
    let qb = -2.0 * a * w_star;
    let qc = a * a - b;
    let disc = qb * qb - 4.0 * qa * qc; // = 4 (b (1 + w*^2) - a^2)
    let mut candidates = vec![-qb / (2.0 * qa)];
    if disc >= 0.0 {
        let q = -0.5 * (qb - disc.sqrt()); // qb <= 0 always, no cancellation
        candidates.push(q / qa);
        if q != 0.0 {
            candidates.push(qc / q);
        }
    }
    let mut best: Option<f64> = None;
    for &s in &candidates {
        if !s.is_finite() || !(s > 0.0) || s * s >= b {
            continue;
        }
        // Reject spurious candidates (squaring artifacts, off-target vertex):
        // the step must actually satisfy C(s)/s = w*.
        let cs = a - (b - s * s).sqrt();
        if !(cs > 0.0) || (cs / s - w_star).abs() > 1e-9 * w_star.max(1.0) {
            continue;
        }
        match best {
            Some(cur) if (cur - sigma_orig).abs() <= (s - sigma_orig).abs() => {}
            _ => best = Some(s),
        }
    }
    best.ok_or_else(|| {
        if disc < 0.0 {
            format!("discriminant {disc} < 0 (w* below the attainable minimum)")
        } else {
            "both quadratic roots inadmissible".into()
        }
    })
}

/// Per-step credit weights for a diffusion schedule, either native or
/// re-engineered to a constant target.
#[derive(Debug, Clone, PartialEq)]
pub struct CreditProfile {
    /// Per-step weight `w = C/σ`.
    pub w: Vec<f64>,
    /// Per-step credit coefficient `C`.
    pub c: Vec<f64>,
    /// Target constant weight, when re-engineered.
    pub w_star: Option<f64>,
    /// Re-engineered deviations, when re-engineered.
    pub sigma_tilde: Option<Vec<f64>>,
}

impl CreditProfile {
    /// Arithmetic mean of the weights; the rescaling target for the
    /// constant-weight solve.
    pub fn target_weight(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.w.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.w.iter().sum()
    }
}
