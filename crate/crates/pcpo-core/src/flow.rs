//! Flow-matching time grids, SDE σ-schedules, and credit weights.
//!
//! A reverse SDE step over the interval `[t_{i+1}, t_i]` (time runs from 1
//! down to 0) contributes to the log policy ratio with native weight
//!
//! ```text
//! w(t_i) = sqrt(Δt_i)/σ_{t_i} · (1 + (1 − t_i)·t_i / 2)
//! ```
//!
//! which is non-proportional to `Δt_i` whenever timestep shifting makes the
//! grid non-uniform. [`FlowCredit::proportional`] restores proportionality
//! with `w(t_i) = ζ·Δt_i`, `ζ = Σ_i w_native(t_i)`, which preserves the
//! total weight; [`FlowCredit::uniform`] is the constant-weight heuristic
//! comparator with the same total.

use crate::error::{Error, Result};

/// Decreasing time grid from 1 to 0 with `n` integration intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrid {
    /// Grid points, `t[0] = 1` down to `t[n] = 0`, strictly decreasing.
    t: Vec<f64>,
    /// Interval lengths, `dt[i] = t[i] - t[i+1] > 0`.
    dt: Vec<f64>,
    shift: f64,
}

impl FlowGrid {
    /// Builds an `n`-step grid, applying the shifting map
    /// `t = s·u / (1 + (s−1)·u)` to a uniform grid `u`. `shift = 1` leaves
    /// the grid uniform; larger shifts concentrate points near `t = 1`.
    pub fn new(n: usize, shift: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidSchedule("flow grid needs n >= 1".into()));
        }
        if !(shift >= 1.0) {
            return Err(Error::InvalidSchedule(format!("shift must be >= 1, got {shift}")));
        }
        let t: Vec<f64> = (0..=n)
            .map(|j| {
                let u = (n - j) as f64 / n as f64;
                shift * u / (1.0 + (shift - 1.0) * u)
            })
            .collect();
        let dt: Vec<f64> = (0..n).map(|i| t[i] - t[i + 1]).collect();
        Ok(Self { t, dt, shift })
    }

    pub fn len(&self) -> usize {
        self.dt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dt.is_empty()
    }

    /// Grid points including both endpoints (length `n + 1`).
    pub fn t(&self) -> &[f64] {
        &self.t
    }

    /// Interval lengths (length `n`).
    pub fn dt(&self) -> &[f64] {
        &self.dt
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }
}

/// Which σ-schedule drives the reverse SDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSigmaKind {
    /// Constant `σ_t = η`.
    Constant,
    /// `σ_t = η·sqrt(t/(1−t))`, diverging at `t = 1`.
    FlowGrpo,
}

/// Per-step σ values for a [`FlowGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSigma {
    pub kind: FlowSigmaKind,
    pub eta: f64,
    /// One σ per integration step, evaluated at the step's start time.
    pub sigma: Vec<f64>,
    /// Substitute evaluation point used where `t = 1` would divide by zero.
    pub t_one_approx: Option<f64>,
}

impl FlowSigma {
    /// Evaluates the σ-schedule on the grid. For [`FlowSigmaKind::FlowGrpo`],
    /// any step at `t = 1` is evaluated at the next lower grid point instead
    /// (mirroring the reference implementation's divide-by-zero guard); this
    /// fails for an `n = 1` grid where the next point is 0.
    pub fn new(grid: &FlowGrid, kind: FlowSigmaKind, eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::InvalidSchedule(format!("eta must be > 0, got {eta}")));
        }
        let mut t_one_approx = None;
        let sigma = match kind {
            FlowSigmaKind::Constant => vec![eta; grid.len()],
            FlowSigmaKind::FlowGrpo => {
                let mut out = Vec::with_capacity(grid.len());
                for i in 0..grid.len() {
                    let mut t = grid.t()[i];
                    if t >= 1.0 {
                        let next = grid.t()[i + 1];
                        if !(next > 0.0 && next < 1.0) {
                            return Err(Error::InvalidSchedule(
                                "flow-grpo sigma undefined at t = 1 with no interior next point"
                                    .into(),
                            ));
                        }
                        t_one_approx = Some(next);
                        t = next;
                    }
                    let s = eta * (t / (1.0 - t)).sqrt();
                    if !s.is_finite() || !(s > 0.0) {
                        return Err(Error::Numerical(format!(
                            "flow-grpo sigma not finite/positive at step {i}: {s}"
                        )));
                    }
                    out.push(s);
                }
                out
            }
        };
        Ok(Self { kind, eta, sigma, t_one_approx })
    }
}

/// How a [`FlowCredit`] distributes weight over steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowWeightMode {
    Native,
    Proportional,
    UniformHeuristic,
}

/// Per-step credit weights for a flow grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowCredit {
    pub w: Vec<f64>,
    pub mode: FlowWeightMode,
    /// Normalizer `ζ = Σ w_native`, present for the proportional mode.
    pub zeta: Option<f64>,
}

impl FlowCredit {
    /// Native weights `w(t_i) = sqrt(Δt_i)/σ_{t_i} · (1 + (1−t_i)t_i/2)`.
    pub fn native(grid: &FlowGrid, sigma: &FlowSigma) -> Result<Self> {
        if sigma.sigma.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "sigma has {} entries for a {}-step grid",
                sigma.sigma.len(),
                grid.len()
            )));
        }
        let w = (0..grid.len())
            .map(|i| {
                let t = grid.t()[i];
                grid.dt()[i].sqrt() / sigma.sigma[i] * (1.0 + (1.0 - t) * t / 2.0)
            })
            .collect();
        Ok(Self { w, mode: FlowWeightMode::Native, zeta: None })
    }

    /// Proportional weights `w(t_i) = ζ·Δt_i` with `ζ = Σ w_native`.
    pub fn proportional(grid: &FlowGrid, sigma: &FlowSigma) -> Result<Self> {
        let zeta = Self::native(grid, sigma)?.sum();
        let w = grid.dt().iter().map(|&dt| zeta * dt).collect();
        Ok(Self { w, mode: FlowWeightMode::Proportional, zeta: Some(zeta) })
    }

    /// Constant weights with the native total: `w_i = Σ w_native / n`.
    pub fn uniform(grid: &FlowGrid, sigma: &FlowSigma) -> Result<Self> {
        let total = Self::native(grid, sigma)?.sum();
        let n = grid.len() as f64;
        Ok(Self {
            w: vec![total / n; grid.len()],
            mode: FlowWeightMode::UniformHeuristic,
            zeta: None,
        })
    }

    pub fn sum(&self) -> f64 {
        self.w.iter().sum()
    }
}
