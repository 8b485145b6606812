//! Parameter estimation for multidimensional diffusions with small
//! diffusion coefficient observed at discrete times.
//!
//! The observation model is the SDE
//!
//! ```text
//! dX_t = b(alpha, X_t) dt + eps * sigma(beta, X_t) dB_t,   X_0 = x0,
//! ```
//!
//! sampled at t_k = k*Delta on a fixed window `[0, T]` with known noise
//! scale `eps`. Estimators are minimum-contrast: every contrast is built
//! from the one-step residuals of the observations against the
//! deterministic skeleton `x_alpha` and its linearized flow.
//!
//! Module map:
//! - [`model`]: diffusion model abstraction and the four built-in models
//!   (Ornstein-Uhlenbeck, CIR, a two-factor short-rate model, SIR).
//! - [`flow`]: deterministic skeleton, resolvent, per-interval covariance
//!   and parameter sensitivities (fixed-step RK4).
//! - [`contrast`]: residuals and the contrast processes (conditional least
//!   squares, weighted variants, small-interval contrast, Gaussian
//!   loglikelihood).
//! - [`estimate`]: projected multi-start Nelder-Mead minimization,
//!   information matrices and confidence intervals.
//! - [`simulate`]: Euler-Maruyama paths, exact Gillespie SIR trajectories,
//!   and the jump-process MLE baseline.
//! - [`harness`]: experiment configuration, Monte Carlo orchestration and
//!   CSV/JSON reporting.

pub mod contrast;
pub mod error;
pub mod estimate;
pub mod flow;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod simulate;

pub use contrast::{ContrastKind, ObservedPath};
pub use error::{Error, Result};
pub use estimate::{EstimationResult, MinimizeOptions};
pub use flow::{FlowSolution, SamplingGrid};
pub use model::{LinkSpec, ModelSpec, ParamBox};
pub use simulate::{JumpTrajectory, SeededRng};
