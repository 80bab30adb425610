//! Proportionate credit assignment for diffusion and flow samplers.
//!
//! The crate is organized around the pipeline of an online policy-gradient
//! fine-tuning run for a generative sampler:
//!
//! * [`diffusion`] — DDIM inference schedules, the per-step credit
//!   coefficient `C(t)` and native weight `w(t) = C(t)/σ_t`, and the
//!   constant-weight variance solver that re-engineers `σ̃_t` so every
//!   timestep carries the same weight.
//! * [`flow`] — flow-matching time grids with timestep shifting, the two
//!   SDE σ-schedules, and native / proportional / uniform credit weights.
//! * [`objective`] — group-relative advantages, the clipped-surrogate family
//!   (PPO clip, hinge, log-hinge, ε-matching) and per-step log policy
//!   ratios for both sampler families.
//! * [`policy`] — a small fully-connected ε/velocity predictor with exact
//!   reverse-mode gradients and an Adam optimizer.
//! * [`sampler`] — stochastic DDIM and Euler–Maruyama flow-SDE rollouts with
//!   full trajectory recording, classifier-free guidance, and implicit
//!   reward guidance mixing.
//! * [`toybench`] — a 2D Gaussian-mixture harness: pretraining, analytic
//!   rewards, the RL fine-tuning loop over all method variants, and
//!   collapse diagnostics.

pub mod diffusion;
pub mod error;
pub mod flow;
pub mod objective;
pub mod policy;
pub mod rng;
pub mod sampler;
pub mod toybench;

pub use error::{Error, Result};
