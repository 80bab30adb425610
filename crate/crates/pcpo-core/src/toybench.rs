//! Desk-scale experiment harness on a 2D Gaussian mixture.
//!
//! The dataset is a ring of Gaussian components; each condition id names one
//! component as its target. Policies are pretrained by plain denoising /
//! flow-matching regression, then fine-tuned online: sample a rollout batch
//! with the old policy, normalize terminal rewards within condition groups,
//! and take inner optimization epochs with one of the method variants. Mode
//! coverage of deterministic samples is the collapse diagnostic.

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::flow::{FlowCredit, FlowGrid, FlowSigma};
use crate::objective::{self, Advantage};
use crate::policy::{AdamState, Arch, PolicyParams};
use crate::rng::StreamRng;
use crate::sampler::{
    self, ddim_mean, flow_sample, gaussian_logprob, FlowMode, GuidanceSpec,
    LogProbPrecision, Trajectory,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// Stream tag namespaces.
const TAG_DATA: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_TRAJ: u64 = 3;
const TAG_SUBSET: u64 = 4;
const TAG_COVERAGE: u64 = 5;

/// 2D mixture dataset with a condition vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    /// Component means.
    pub means: Vec<Vec<f64>>,
    /// Shared isotropic standard deviation.
    pub component_std: f64,
    /// Mixture weights (sum to 1).
    pub weights: Vec<f64>,
    /// Condition id -> target component indices.
    pub condition_targets: Vec<Vec<usize>>,
}

impl ToyDataset {
    /// The default benchmark: `n` components on a ring, one condition per
    /// component plus the null condition.
    pub fn ring(n: usize, radius: f64, component_std: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput("need >= 2 components to observe collapse".into()));
        }
        let means = (0..n)
            .map(|i| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                vec![radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        Ok(Self {
            means,
            component_std,
            weights: vec![1.0 / n as f64; n],
            condition_targets: (0..n).map(|i| vec![i]).collect(),
        })
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn n_conditions(&self) -> usize {
        self.condition_targets.len()
    }

    /// Mean of a condition's (first) target component.
    pub fn target_mean(&self, c: usize) -> &[f64] {
        &self.means[self.condition_targets[c][0]]
    }

    /// Draws one sample; `None` draws from the full mixture.
    pub fn sample(&self, c: Option<usize>, rng: &mut impl rand::Rng) -> Vec<f64> {
        let component = match c {
            Some(c) => {
                let targets = &self.condition_targets[c];
                targets[rng.gen_range(0..targets.len())]
            }
            None => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = self.weights.len() - 1;
                for (i, w) in self.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        };
        self.means[component]
            .iter()
            .map(|m| m + self.component_std * sampler::standard_normal(rng))
            .collect()
    }

    fn nearest_component(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, m) in self.means.iter().enumerate() {
            let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        (best.0, best.1.sqrt())
    }
}

/// Analytic reward families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RewardKind {
    /// `exp(−‖x0 − m_c‖²/τ)` toward the condition's target mode.
    ModeDistance { tau: f64 },
    /// Logistic alignment with a half-plane: `1/(1 + exp(−d·x0))`.
    HalfPlane { direction: Vec<f64> },
}

impl Default for RewardKind {
    fn default() -> Self {
        RewardKind::ModeDistance { tau: 0.25 }
    }
}

/// Terminal reward `r(x0, c)`.
pub fn reward(dataset: &ToyDataset, kind: &RewardKind, x0: &[f64], c: Option<usize>) -> f64 {
    match kind {
        RewardKind::ModeDistance { tau } => {
            let m: &[f64] = match c {
                Some(c) => dataset.target_mean(c),
                None => {
                    let (i, _) = dataset.nearest_component(x0);
                    &dataset.means[i]
                }
            };
            let d2: f64 = x0.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            (-d2 / tau).exp()
        }
        RewardKind::HalfPlane { direction } => {
            let dot: f64 = x0.iter().zip(direction).map(|(a, b)| a * b).sum();
            1.0 / (1.0 + (-dot).exp())
        }
    }
}

/// Fraction of mixture components holding at least `1/(2M)` of the
/// nearest-assigned samples.
pub fn mode_coverage(samples: &[Vec<f64>], dataset: &ToyDataset) -> f64 {
    let m = dataset.n_components();
    if samples.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; m];
    for s in samples {
        counts[dataset.nearest_component(s).0] += 1;
    }
    let threshold = samples.len() as f64 / (2.0 * m as f64);
    counts.iter().filter(|&&c| c as f64 >= threshold).count() as f64 / m as f64
}

/// Mean distance from samples to their nearest component mean.
pub fn sample_spread(samples: &[Vec<f64>], dataset: &ToyDataset) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| dataset.nearest_component(s).1).sum::<f64>() / samples.len() as f64
}

/// Pretraining budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the condition with null (trains the CFG row).
    pub cond_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 6000, batch: 64, lr: 2e-3, cond_dropout: 0.1 }
    }
}

/// Denoising regression against the training grid: predict the injected
/// noise at a uniformly drawn timestep.
pub fn pretrain_diffusion(
    dataset: &ToyDataset,
    schedule: &DiffusionSchedule,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PolicyParams> {
    let streams = StreamRng::new(seed);
    let arch = Arch::default_toy(2, dataset.n_conditions());
    let mut params = PolicyParams::init(arch, &mut streams.stream(&[TAG_INIT]));
    let mut opt = AdamState::new(params.values.len(), cfg.lr);
    let t_train = schedule.base().t_train();
    let alpha_bar = schedule.base().alpha_bar();
    for step in 0..cfg.steps {
        let mut rng = streams.stream(&[TAG_DATA, step as u64]);
        let mut grad = vec![0.0; params.values.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let c = draw_condition(dataset, cfg.cond_dropout, &mut rng);
            let x0 = dataset.sample(c, &mut rng);
            let t_idx = rng.gen_range(0..t_train);
            let ab = alpha_bar[t_idx];
            let noise: Vec<f64> = (0..2).map(|_| sampler::standard_normal(&mut rng)).collect();
            let x_t: Vec<f64> = x0
                .iter()
                .zip(&noise)
                .map(|(x, n)| ab.sqrt() * x + (1.0 - ab).sqrt() * n)
                .collect();
            let t_norm = t_idx as f64 / (t_train - 1) as f64;
            let (pred, cache) = params.forward(&x_t, t_norm, c)?;
            let upstream: Vec<f64> = pred.iter().zip(&noise).map(|(p, n)| p - n).collect();
            loss += 0.5 * upstream.iter().map(|u| u * u).sum::<f64>();
            let g = params.backward(&cache, &upstream)?;
            for (gi, gv) in grad.iter_mut().zip(&g) {
                *gi += gv;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("pretraining diverged at step {step}")));
        }
        for g in &mut grad {
            *g /= cfg.batch as f64;
        }
        opt.step(&mut params, &grad)?;
    }
    Ok(params)
}

/// Flow-matching regression: predict `u = ε − x0` at `z_t = (1−t)x0 + t·ε`.
pub fn pretrain_flow(dataset: &ToyDataset, cfg: &PretrainConfig, seed: u64) -> Result<PolicyParams> {
    let streams = StreamRng::new(seed);
    let arch = Arch::default_toy(2, dataset.n_conditions());
    let mut params = PolicyParams::init(arch, &mut streams.stream(&[TAG_INIT]));
    let mut opt = AdamState::new(params.values.len(), cfg.lr);
    for step in 0..cfg.steps {
        let mut rng = streams.stream(&[TAG_DATA, step as u64]);
        let mut grad = vec![0.0; params.values.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let c = draw_condition(dataset, cfg.cond_dropout, &mut rng);
            let x0 = dataset.sample(c, &mut rng);
            let t: f64 = rng.gen();
            let noise: Vec<f64> = (0..2).map(|_| sampler::standard_normal(&mut rng)).collect();
            let z_t: Vec<f64> =
                x0.iter().zip(&noise).map(|(x, n)| (1.0 - t) * x + t * n).collect();
            let target: Vec<f64> = noise.iter().zip(&x0).map(|(n, x)| n - x).collect();
            let (pred, cache) = params.forward(&z_t, t, c)?;
            let upstream: Vec<f64> = pred.iter().zip(&target).map(|(p, u)| p - u).collect();
            loss += 0.5 * upstream.iter().map(|u| u * u).sum::<f64>();
            let g = params.backward(&cache, &upstream)?;
            for (gi, gv) in grad.iter_mut().zip(&g) {
                *gi += gv;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("pretraining diverged at step {step}")));
        }
        for g in &mut grad {
            *g /= cfg.batch as f64;
        }
        opt.step(&mut params, &grad)?;
    }
    Ok(params)
}

fn draw_condition(
    dataset: &ToyDataset,
    dropout: f64,
    rng: &mut impl rand::Rng,
) -> Option<usize> {
    let c = rng.gen_range(0..dataset.n_conditions());
    if rng.gen::<f64>() < dropout {
        None
    } else {
        Some(c)
    }
}

/// Fine-tuning method variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// PPO clip on stored-versus-recomputed log-probabilities.
    DdpoBaseline,
    /// Log-hinge on fully recomputed log ratios.
    LogRho,
    /// ε-matching with native weights.
    EpsMatching,
    /// ε-matching on the constant-weight σ̃ schedule.
    PcpoFull,
    /// Baseline updating a random half of the timesteps.
    TimestepSubsample,
    /// Flow sampler with native Eq.-8 weights.
    FlowVanilla,
    /// Flow sampler with interval-proportional weights.
    FlowProportional,
    /// Flow sampler with constant weights (high-noise-emphasis heuristic).
    FlowUniform,
}

/// Which sampler family a method runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerFamily {
    Diffusion,
    Flow,
}

impl Method {
    pub fn sampler(&self) -> SamplerFamily {
        match self {
            Method::FlowVanilla | Method::FlowProportional | Method::FlowUniform => {
                SamplerFamily::Flow
            }
            _ => SamplerFamily::Diffusion,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::DdpoBaseline => "ddpo-baseline",
            Method::LogRho => "log-rho",
            Method::EpsMatching => "eps-matching",
            Method::PcpoFull => "pcpo-full",
            Method::TimestepSubsample => "timestep-subsample",
            Method::FlowVanilla => "flow-vanilla",
            Method::FlowProportional => "flow-proportional",
            Method::FlowUniform => "flow-uniform",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ddpo-baseline" => Method::DdpoBaseline,
            "log-rho" => Method::LogRho,
            "eps-matching" => Method::EpsMatching,
            "pcpo-full" => Method::PcpoFull,
            "timestep-subsample" => Method::TimestepSubsample,
            "flow-vanilla" => Method::FlowVanilla,
            "flow-proportional" => Method::FlowProportional,
            "flow-uniform" => Method::FlowUniform,
            other => return Err(Error::InvalidInput(format!("unknown method '{other}'"))),
        })
    }
}

/// Per-variant fine-tuning configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub method: Method,
    /// Clipping threshold ξ. Kept small so that the surrogate stays in the
    /// near-on-policy regime where log ρ ≈ ρ − 1.
    pub xi: f64,
    pub lr: f64,
    pub group_size: usize,
    pub groups: usize,
    pub inner_epochs: usize,
    /// Fraction of timesteps touched by the subsampling variant.
    pub subsample_fraction: f64,
    pub logprob_precision: LogProbPrecision,
}

impl VariantConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            xi: 1e-4,
            lr: 3e-4,
            group_size: 16,
            groups: 8,
            inner_epochs: 2,
            subsample_fraction: 0.5,
            logprob_precision: LogProbPrecision::Double,
        }
    }

    pub fn rollout_size(&self) -> usize {
        self.group_size * self.groups
    }

    fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(Error::InvalidInput(format!("xi must be in (0,1), got {}", self.xi)));
        }
        if self.group_size == 0 || self.groups == 0 {
            return Err(Error::InvalidInput("empty rollout".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::InvalidInput("subsample_fraction must be in (0,1]".into()));
        }
        Ok(())
    }
}

/// Per-epoch traces of one fine-tuning run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub reward_mean: Vec<f64>,
    /// Mean clipped fraction over all inner passes of the epoch.
    pub clip_frac: Vec<f64>,
    /// Clipped fraction of the first (on-policy) inner pass.
    pub clip_frac_first_step: Vec<f64>,
    pub coverage: Vec<f64>,
    pub spread: Vec<f64>,
    /// Largest per-step relative gap |log ρ − (ρ−1)|/|ρ−1| seen on active
    /// recomputed ratios (first inner pass excluded: ρ = 1 there).
    pub max_taylor_gap: f64,
}

impl RunMetrics {
    pub fn epochs(&self) -> usize {
        self.reward_mean.len()
    }

    /// First epoch whose mean rollout reward reaches `threshold`.
    pub fn epochs_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.reward_mean.iter().position(|&r| r >= threshold)
    }

    pub fn mean_clip_frac(&self) -> f64 {
        if self.clip_frac.is_empty() {
            return 0.0;
        }
        self.clip_frac.iter().sum::<f64>() / self.clip_frac.len() as f64
    }
}

enum SamplerSetup {
    Diffusion {
        /// Sampling schedule (σ̃ for pcpo-full).
        schedule: DiffusionSchedule,
        /// σ = 0 copy for deterministic coverage sampling.
        deterministic: DiffusionSchedule,
        /// Per-step loss weights (native or constant).
        weights: Vec<f64>,
    },
    Flow {
        grid: FlowGrid,
        sigma: FlowSigma,
        weights: Vec<f64>,
    },
}

/// One online fine-tuning run.
pub struct RlRun {
    pub variant: VariantConfig,
    pub dataset: ToyDataset,
    pub reward_kind: RewardKind,
    pub policy: PolicyParams,
    pub old_policy: PolicyParams,
    pub optimizer: AdamState,
    pub metrics: RunMetrics,
    setup: SamplerSetup,
    streams: StreamRng,
    epoch: usize,
    /// Deterministic samples drawn per epoch for the coverage trace.
    pub coverage_samples: usize,
}

impl RlRun {
    /// Prepares a run for a diffusion-family method. `base_schedule` must be
    /// an RL schedule (σ > 0 everywhere); pcpo-full re-engineers its σ.
    pub fn new_diffusion(
        variant: VariantConfig,
        dataset: ToyDataset,
        reward_kind: RewardKind,
        base_schedule: &DiffusionSchedule,
        base_policy: PolicyParams,
        seed: u64,
    ) -> Result<Self> {
        variant.validate()?;
        if variant.method.sampler() != SamplerFamily::Diffusion {
            return Err(Error::InvalidInput(format!(
                "{} is not a diffusion-family method",
                variant.method.name()
            )));
        }
        let native = base_schedule.native_weights()?;
        let (schedule, weights) = match variant.method {
            Method::PcpoFull => {
                let profile = base_schedule.solve_constant_sigma(native.target_weight())?;
                let w_star = profile.w_star.unwrap();
                let worst = profile
                    .w
                    .iter()
                    .map(|w| (w - w_star).abs())
                    .fold(0.0f64, f64::max);
                if worst > 1e-9 {
                    return Err(Error::InvalidSchedule(format!(
                        "constant-weight profile off target by {worst}"
                    )));
                }
                let schedule = base_schedule.with_sigma(profile.sigma_tilde.clone().unwrap())?;
                (schedule, profile.w)
            }
            _ => (base_schedule.clone(), native.w),
        };
        let deterministic = deterministic_copy(&schedule)?;
        Ok(Self {
            variant,
            dataset,
            reward_kind,
            old_policy: base_policy.clone(),
            policy: base_policy,
            optimizer: AdamState::new(0, 0.0),
            metrics: RunMetrics::default(),
            setup: SamplerSetup::Diffusion { schedule, deterministic, weights },
            streams: StreamRng::new(seed),
            epoch: 0,
            coverage_samples: 128,
        }
        .init_optimizer())
    }

    /// Prepares a run for a flow-family method.
    pub fn new_flow(
        variant: VariantConfig,
        dataset: ToyDataset,
        reward_kind: RewardKind,
        grid: FlowGrid,
        sigma: FlowSigma,
        base_policy: PolicyParams,
        seed: u64,
    ) -> Result<Self> {
        variant.validate()?;
        let weights = match variant.method {
            Method::FlowVanilla => FlowCredit::native(&grid, &sigma)?.w,
            Method::FlowProportional => FlowCredit::proportional(&grid, &sigma)?.w,
            Method::FlowUniform => FlowCredit::uniform(&grid, &sigma)?.w,
            other => {
                return Err(Error::InvalidInput(format!(
                    "{} is not a flow-family method",
                    other.name()
                )))
            }
        };
        Ok(Self {
            variant,
            dataset,
            reward_kind,
            old_policy: base_policy.clone(),
            policy: base_policy,
            optimizer: AdamState::new(0, 0.0),
            metrics: RunMetrics::default(),
            setup: SamplerSetup::Flow { grid, sigma, weights },
            streams: StreamRng::new(seed),
            epoch: 0,
            coverage_samples: 128,
        }
        .init_optimizer())
    }

    fn init_optimizer(mut self) -> Self {
        self.optimizer = AdamState::new(self.policy.values.len(), self.variant.lr);
        self
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn rollout(&self) -> Result<Vec<Trajectory>> {
        let spec = GuidanceSpec::plain();
        let n = self.variant.rollout_size();
        let epoch = self.epoch as u64;
        (0..n)
            .into_par_iter()
            .map(|j| {
                let c = Some((j / self.variant.group_size) % self.dataset.n_conditions());
                let stream_id = epoch * n as u64 + j as u64;
                let mut rng = self.streams.stream(&[TAG_TRAJ, epoch, j as u64]);
                let mut traj = match &self.setup {
                    SamplerSetup::Diffusion { schedule, .. } => sampler::ddim_reverse_sample(
                        &spec,
                        &self.old_policy,
                        &[],
                        schedule,
                        c,
                        &mut rng,
                        stream_id,
                    )?,
                    SamplerSetup::Flow { grid, sigma, .. } => flow_sample(
                        &spec,
                        &self.old_policy,
                        &[],
                        grid,
                        sigma,
                        FlowMode::Sde,
                        c,
                        &mut rng,
                        stream_id,
                    )?,
                };
                if matches!(
                    self.variant.method,
                    Method::DdpoBaseline | Method::TimestepSubsample
                ) {
                    if let SamplerSetup::Diffusion { schedule, .. } = &self.setup {
                        sampler::store_baseline_logprob(
                            &mut traj,
                            schedule,
                            &spec,
                            &self.old_policy,
                            self.variant.logprob_precision,
                        )?;
                    }
                }
                traj.reward =
                    Some(reward(&self.dataset, &self.reward_kind, &traj.final_sample, c));
                Ok(traj)
            })
            .collect()
    }

    fn advantages(&self, trajectories: &[Trajectory]) -> Result<Vec<Advantage>> {
        let mut out = Vec::with_capacity(trajectories.len());
        for g in 0..self.variant.groups {
            let lo = g * self.variant.group_size;
            let hi = lo + self.variant.group_size;
            let rewards: Vec<f64> =
                trajectories[lo..hi].iter().map(|t| t.reward.unwrap()).collect();
            out.extend(objective::normalize_advantages(g, &rewards)?);
        }
        Ok(out)
    }

    /// One full epoch: rollout, advantages, inner optimization passes,
    /// metrics, old ← current.
    pub fn rl_epoch(&mut self) -> Result<()> {
        let trajectories = self.rollout()?;
        let advantages = self.advantages(&trajectories)?;
        let reward_mean = trajectories.iter().map(|t| t.reward.unwrap()).sum::<f64>()
            / trajectories.len() as f64;

        let mut inner_clip = Vec::with_capacity(self.variant.inner_epochs);
        for inner in 0..self.variant.inner_epochs {
            let pass = self.inner_pass(&trajectories, &advantages, inner)?;
            if !pass.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {}, inner {inner} ({})",
                    self.epoch,
                    self.variant.method.name()
                )));
            }
            inner_clip.push(pass.clip_fraction);
            self.metrics.max_taylor_gap = self.metrics.max_taylor_gap.max(pass.max_taylor_gap);
            let scale = 1.0 / trajectories.len() as f64;
            let grad: Vec<f64> = pass.grad.iter().map(|g| g * scale).collect();
            self.optimizer.step(&mut self.policy, &grad)?;
        }

        let (coverage, spread) = self.coverage_probe()?;
        self.metrics.reward_mean.push(reward_mean);
        self.metrics
            .clip_frac
            .push(inner_clip.iter().sum::<f64>() / inner_clip.len().max(1) as f64);
        self.metrics.clip_frac_first_step.push(inner_clip.first().copied().unwrap_or(0.0));
        self.metrics.coverage.push(coverage);
        self.metrics.spread.push(spread);
        self.epoch += 1;
        self.old_policy = self.policy.clone();
        Ok(())
    }

    /// Runs `epochs` epochs.
    pub fn run(&mut self, epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            self.rl_epoch()?;
        }
        Ok(())
    }

    /// Deterministic (σ = 0 / ODE) samples across conditions for the
    /// coverage and spread diagnostics.
    pub fn deterministic_samples(&self, count: usize) -> Result<Vec<Vec<f64>>> {
        let spec = GuidanceSpec::plain();
        let epoch = self.epoch as u64;
        (0..count)
            .into_par_iter()
            .map(|j| {
                let c = Some(j % self.dataset.n_conditions());
                let mut rng = self.streams.stream(&[TAG_COVERAGE, epoch, j as u64]);
                let traj = match &self.setup {
                    SamplerSetup::Diffusion { deterministic, .. } => sampler::ddim_reverse_sample(
                        &spec,
                        &self.policy,
                        &[],
                        deterministic,
                        c,
                        &mut rng,
                        j as u64,
                    )?,
                    SamplerSetup::Flow { grid, sigma, .. } => flow_sample(
                        &spec,
                        &self.policy,
                        &[],
                        grid,
                        sigma,
                        FlowMode::Ode,
                        c,
                        &mut rng,
                        j as u64,
                    )?,
                };
                Ok(traj.final_sample)
            })
            .collect()
    }

    fn coverage_probe(&self) -> Result<(f64, f64)> {
        let samples = self.deterministic_samples(self.coverage_samples)?;
        Ok((mode_coverage(&samples, &self.dataset), sample_spread(&samples, &self.dataset)))
    }

    fn inner_pass(
        &self,
        trajectories: &[Trajectory],
        advantages: &[Advantage],
        inner: usize,
    ) -> Result<PassResult> {
        let epoch = self.epoch as u64;
        let results: Vec<Result<PassResult>> = trajectories
            .par_iter()
            .zip(advantages.par_iter())
            .enumerate()
            .map(|(j, (traj, adv))| {
                let subset = self.step_subset(epoch, inner as u64, j as u64, traj.steps.len());
                self.trajectory_pass(traj, adv.value, subset.as_deref())
            })
            .collect();
        let mut total = PassResult::zeros(self.policy.values.len());
        let mut terms = 0usize;
        let mut clipped = 0usize;
        for r in results {
            let r = r?;
            total.loss += r.loss;
            terms += r.terms;
            clipped += r.clipped;
            total.max_taylor_gap = total.max_taylor_gap.max(r.max_taylor_gap);
            for (g, rg) in total.grad.iter_mut().zip(&r.grad) {
                *g += rg;
            }
        }
        total.terms = terms;
        total.clipped = clipped;
        total.clip_fraction = if terms == 0 { 0.0 } else { clipped as f64 / terms as f64 };
        Ok(total)
    }

    /// Step subset for the subsampling variant: ⌈K·fraction⌉ distinct
    /// record indices per (epoch, inner pass, trajectory).
    fn step_subset(&self, epoch: u64, inner: u64, traj: u64, n_steps: usize) -> Option<Vec<usize>> {
        if self.variant.method != Method::TimestepSubsample {
            return None;
        }
        let take = ((n_steps as f64) * self.variant.subsample_fraction).ceil() as usize;
        let mut rng = self.streams.stream(&[TAG_SUBSET, epoch, inner, traj]);
        let mut idx: Vec<usize> = (0..n_steps).collect();
        for i in 0..take {
            let j = rand::Rng::gen_range(&mut rng, i..n_steps);
            idx.swap(i, j);
        }
        idx.truncate(take);
        Some(idx)
    }

    fn trajectory_pass(
        &self,
        traj: &Trajectory,
        advantage: f64,
        subset: Option<&[usize]>,
    ) -> Result<PassResult> {
        let mut out = PassResult::zeros(self.policy.values.len());
        // A degenerate group yields A = 0: nothing to learn from, and the
        // steps are neither active nor clipped.
        if advantage == 0.0 {
            return Ok(out);
        }
        let xi = self.variant.xi;
        let n = traj.steps.len();
        for rec_idx in 0..n {
            if let Some(sub) = subset {
                if !sub.contains(&rec_idx) {
                    continue;
                }
            }
            let rec = &traj.steps[rec_idx];
            let (t_norm, w) = match &self.setup {
                SamplerSetup::Diffusion { schedule, weights, .. } => {
                    (sampler::diffusion_t_norm(schedule, rec.step), weights[rec.step])
                }
                SamplerSetup::Flow { grid, weights, .. } => (grid.t()[rec.step], weights[rec.step]),
            };
            let (pred, cache) = self.policy.forward(&rec.state, t_norm, traj.condition)?;
            let term = match self.variant.method {
                Method::EpsMatching
                | Method::PcpoFull
                | Method::FlowVanilla
                | Method::FlowProportional
                | Method::FlowUniform => {
                    // D-form on prediction differences; log rho = -D.
                    let mut dot = 0.0;
                    let mut quad = 0.0;
                    for i in 0..pred.len() {
                        let d = pred[i] - rec.prediction[i];
                        dot += d * rec.noise[i];
                        let wd = w * d;
                        quad += wd * wd;
                    }
                    let mismatch = w * dot + 0.5 * quad;
                    let arg = xi * advantage.abs() + advantage * mismatch;
                    if arg > 0.0 {
                        let upstream: Vec<f64> = (0..pred.len())
                            .map(|i| {
                                advantage
                                    * (w * rec.noise[i] + w * w * (pred[i] - rec.prediction[i]))
                            })
                            .collect();
                        StepTerm { loss: arg, upstream: Some(upstream), log_rho: Some(-mismatch) }
                    } else {
                        StepTerm { loss: 0.0, upstream: None, log_rho: Some(-mismatch) }
                    }
                }
                Method::LogRho | Method::DdpoBaseline | Method::TimestepSubsample => {
                    self.density_step(traj, rec_idx, &pred, advantage)?
                }
            };
            out.terms += 1;
            if let Some(up) = term.upstream {
                out.loss += term.loss;
                let g = self.policy.backward(&cache, &up)?;
                for (a, b) in out.grad.iter_mut().zip(&g) {
                    *a += b;
                }
            } else {
                out.clipped += 1;
            }
            if let Some(lr) = term.log_rho {
                if lr != 0.0 {
                    out.max_taylor_gap = out.max_taylor_gap.max(objective::taylor_gap(lr.exp()));
                }
            }
        }
        Ok(out)
    }

    /// Density-route loss terms (recomputed Gaussian log-probabilities).
    fn density_step(
        &self,
        traj: &Trajectory,
        rec_idx: usize,
        pred: &[f64],
        advantage: f64,
    ) -> Result<StepTerm> {
        let SamplerSetup::Diffusion { schedule, .. } = &self.setup else {
            return Err(Error::InvalidInput(
                "density-route methods run on the diffusion sampler".into(),
            ));
        };
        let rec = &traj.steps[rec_idx];
        let k = rec.step;
        let sigma = schedule.sigma()[k];
        let (ab_t, ab_prev) = (schedule.alpha_bar_at(k), schedule.alpha_bar_prev(k));
        let next: &[f64] = if rec_idx + 1 < traj.steps.len() {
            &traj.steps[rec_idx + 1].state
        } else {
            &traj.final_sample
        };
        let mean_theta = ddim_mean(&rec.state, pred, ab_t, ab_prev, sigma);
        let logp_theta = gaussian_logprob(next, &mean_theta, sigma);
        let logp_old = match self.variant.method {
            Method::LogRho => {
                let mean_old = ddim_mean(&rec.state, &rec.prediction, ab_t, ab_prev, sigma);
                gaussian_logprob(next, &mean_old, sigma)
            }
            _ => rec.logprob.ok_or_else(|| {
                Error::InvalidInput("baseline trajectory is missing stored log-probs".into())
            })?,
        };
        let log_rho = logp_theta - logp_old;
        let xi = self.variant.xi;
        let credit = (1.0 - ab_t).sqrt() / (ab_t / ab_prev).sqrt()
            - (1.0 - ab_prev - sigma * sigma).sqrt();
        // d log rho / d eps_theta = -C (x' - mu_theta)/sigma^2.
        let dlog: Vec<f64> = next
            .iter()
            .zip(&mean_theta)
            .map(|(x, m)| -credit * (x - m) / (sigma * sigma))
            .collect();
        match self.variant.method {
            Method::LogRho => {
                let arg = xi * advantage.abs() - advantage * log_rho;
                if arg > 0.0 {
                    let upstream = dlog.iter().map(|d| -advantage * d).collect();
                    Ok(StepTerm { loss: arg, upstream: Some(upstream), log_rho: Some(log_rho) })
                } else {
                    Ok(StepTerm { loss: 0.0, upstream: None, log_rho: Some(log_rho) })
                }
            }
            _ => {
                let rho = log_rho.exp();
                let loss = objective::ppo_clip_term(rho, advantage, xi);
                // The surrogate's gradient is -A·ρ·∇log ρ while the hinge is
                // active, zero once the term is clipped away.
                let active = advantage * (rho - 1.0) < xi * advantage.abs();
                if active {
                    let upstream = dlog.iter().map(|d| -advantage * rho * d).collect();
                    Ok(StepTerm { loss, upstream: Some(upstream), log_rho: Some(log_rho) })
                } else {
                    Ok(StepTerm { loss, upstream: None, log_rho: Some(log_rho) })
                }
            }
        }
    }
}

struct StepTerm {
    loss: f64,
    /// Upstream gradient at the prediction; `None` marks a clipped step.
    upstream: Option<Vec<f64>>,
    log_rho: Option<f64>,
}

struct PassResult {
    loss: f64,
    grad: Vec<f64>,
    terms: usize,
    clipped: usize,
    clip_fraction: f64,
    max_taylor_gap: f64,
}

impl PassResult {
    fn zeros(n: usize) -> Self {
        Self {
            loss: 0.0,
            grad: vec![0.0; n],
            terms: 0,
            clipped: 0,
            clip_fraction: 0.0,
            max_taylor_gap: 0.0,
        }
    }
}

/// σ = 0 copy of a schedule for deterministic sampling.
fn deterministic_copy(schedule: &DiffusionSchedule) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(schedule.base().clone(), schedule.len(), 0.0, false)
}

/// Epochs-to-threshold table plus matched-reward coverage for a set of runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub seed: u64,
    pub threshold: f64,
    /// First epoch whose rollout reward reached the threshold, if any.
    pub epochs_to_threshold: Option<usize>,
    /// Coverage at the crossing epoch (final epoch if never crossed).
    pub coverage_at_threshold: f64,
    pub final_reward: f64,
    pub mean_clip_frac: f64,
    pub first_step_clip_max: f64,
}

/// Shared threshold: midpoint between the starting reward and the observed
/// plateau (both medians across runs).
pub fn shared_threshold(runs: &[&RunMetrics]) -> f64 {
    let mut starts: Vec<f64> = runs.iter().map(|m| m.reward_mean[0]).collect();
    let mut plateaus: Vec<f64> = runs
        .iter()
        .map(|m| {
            let n = m.reward_mean.len();
            let tail = (n / 10).max(1);
            m.reward_mean[n - tail..].iter().sum::<f64>() / tail as f64
        })
        .collect();
    (median(&mut starts) + median(&mut plateaus)) / 2.0
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Summarizes one finished run against a shared threshold.
pub fn comparison_row(
    method: Method,
    seed: u64,
    metrics: &RunMetrics,
    threshold: f64,
) -> ComparisonRow {
    let crossing = metrics.epochs_to_threshold(threshold);
    let cov_at = crossing.unwrap_or(metrics.epochs().saturating_sub(1));
    ComparisonRow {
        method: method.name().to_string(),
        seed,
        threshold,
        epochs_to_threshold: crossing,
        coverage_at_threshold: metrics.coverage.get(cov_at).copied().unwrap_or(0.0),
        final_reward: *metrics.reward_mean.last().unwrap_or(&0.0),
        mean_clip_frac: metrics.mean_clip_frac(),
        first_step_clip_max: metrics
            .clip_frac_first_step
            .iter()
            .fold(0.0f64, |a, &b| a.max(b)),
    }
}
