//! One-step residuals and the contrast processes built from them.
//!
//! The residual of an observed path `y` against the skeleton at `alpha`
//! is
//!
//! ```text
//! N_k = y(t_k) - x_alpha(t_k) - Phi_alpha(t_k, t_{k-1}) (y(t_{k-1}) - x_alpha(t_{k-1}))
//! ```
//!
//! and vanishes identically when `y` is the skeleton itself. The four
//! contrasts are
//!
//! - conditional least squares: `(1/Delta) sum N_k^T N_k` (no beta),
//! - weighted: `(1/Delta) sum N_k^T S_k^{-1} N_k`, with `S_k` built under
//!   `beta = f(alpha)` or from the multiplicative base,
//! - small-interval: `sum log det Sigma(beta, X_{t_{k-1}})
//!   + (1/(eps^2 Delta)) sum N_k^T Sigma^{-1}(beta, X_{t_{k-1}}) N_k`,
//! - the Gaussian loglikelihood of the approximating process.
//!
//! All quadratic forms go through Cholesky solves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowSolution, SamplingGrid};
use crate::linalg::{cholesky_with_ridge, log_det, quad_form_inv};
use crate::model::{LinkSpec, ModelSpec};

/// Discrete observations on a regular grid with known noise scale.
#[derive(Debug, Clone)]
pub struct ObservedPath {
    pub grid: SamplingGrid,
    /// Initial state, identical to `obs[0]`.
    pub x0: DVector<f64>,
    /// Observations `X_{t_k}` for `k = 0..n`.
    pub obs: Vec<DVector<f64>>,
    /// Known noise scale (`1/sqrt(N)` for normalized epidemic counts).
    pub epsilon: f64,
}

impl ObservedPath {
    pub fn new(grid: SamplingGrid, obs: Vec<DVector<f64>>, epsilon: f64) -> Result<Self> {
        if obs.len() != grid.n() + 1 {
            return Err(Error::dim(format!(
                "path has {} observations, grid expects {}",
                obs.len(),
                grid.n() + 1
            )));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::config(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        if obs.iter().any(|o| o.iter().any(|v| !v.is_finite())) {
            return Err(Error::config("path contains non-finite observations"));
        }
        let p = obs[0].len();
        if obs.iter().any(|o| o.len() != p) {
            return Err(Error::dim("observations have inconsistent dimensions"));
        }
        Ok(ObservedPath {
            grid,
            x0: obs[0].clone(),
            obs,
            epsilon,
        })
    }

    pub fn p(&self) -> usize {
        self.x0.len()
    }
}

/// Which contrast a minimization targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    /// Conditional least squares; estimates alpha with beta unknown.
    Cls,
    /// Weighted contrast under a `beta = f(alpha)` link.
    WeightedLink,
    /// Weighted contrast with the multiplicative scalar factored out.
    WeightedMultiplicative,
    /// Small-interval contrast; estimates `(alpha, beta)` jointly.
    SmallDelta,
    /// Gaussian loglikelihood of the approximating process (minimized as
    /// its negative).
    GaussianLoglik,
}

impl ContrastKind {
    pub fn name(&self) -> &'static str {
        match self {
            ContrastKind::Cls => "cls",
            ContrastKind::WeightedLink => "weighted_link",
            ContrastKind::WeightedMultiplicative => "weighted_multiplicative",
            ContrastKind::SmallDelta => "small_delta",
            ContrastKind::GaussianLoglik => "gaussian_loglik",
        }
    }
}

fn check_alignment(path: &ObservedPath, flow: &FlowSolution) {
    assert_eq!(
        path.grid.n(),
        flow.grid.n(),
        "path and flow were built on different grids"
    );
    assert_eq!(path.p(), flow.p(), "path and flow have different state dimensions");
}

/// Residuals `N_k` for `k = 1..n`.
pub fn residuals(path: &ObservedPath, flow: &FlowSolution) -> Vec<DVector<f64>> {
    check_alignment(path, flow);
    let n = path.grid.n();
    let mut out = Vec::with_capacity(n);
    for k in 1..=n {
        let prev_dev = &path.obs[k - 1] - &flow.x[k - 1];
        let nk = &path.obs[k] - &flow.x[k] - &flow.phi[k - 1] * prev_dev;
        out.push(nk);
    }
    out
}

/// Conditional least squares `(1/Delta) sum N_k^T N_k`. Does not involve
/// `beta` at all.
pub fn contrast_cls(path: &ObservedPath, flow: &FlowSolution) -> f64 {
    let res = residuals(path, flow);
    res.iter().map(|nk| nk.norm_squared()).sum::<f64>() / path.grid.delta()
}

/// Weighted contrast `(1/Delta) sum N_k^T S_k^{-1} N_k`.
///
/// The flow's `S_k` must have been built consistently with `link`: under
/// `beta = f(alpha)` for [`ContrastKind::WeightedLink`], or from the
/// multiplicative base (scalar omitted) for
/// [`ContrastKind::WeightedMultiplicative`].
pub fn contrast_weighted(
    path: &ObservedPath,
    flow: &FlowSolution,
    link: &LinkSpec,
) -> Result<f64> {
    if matches!(link, LinkSpec::FreeBeta) {
        return Err(Error::config(
            "weighted contrast needs a beta link or a multiplicative structure",
        ));
    }
    let res = residuals(path, flow);
    let s_mats = flow.s_mats()?;
    let mut acc = 0.0;
    for (nk, s) in res.iter().zip(s_mats) {
        let chol = cholesky_with_ridge(s)?;
        acc += quad_form_inv(&chol, nk);
    }
    Ok(acc / path.grid.delta())
}

/// Small-interval contrast
/// `sum log det Sigma(beta, X_{t_{k-1}})
///  + (1/(eps^2 Delta)) sum N_k^T Sigma^{-1}(beta, X_{t_{k-1}}) N_k`.
///
/// `Sigma` is evaluated at the guarded *observed* states, so the flow only
/// has to carry the skeleton and resolvent.
pub fn contrast_small_delta(
    path: &ObservedPath,
    flow: &FlowSolution,
    beta: &[f64],
    model: &ModelSpec,
) -> Result<f64> {
    check_alignment(path, flow);
    let res = residuals(path, flow);
    let p = path.p();
    let n = path.grid.n();
    let weight = 1.0 / (path.epsilon * path.epsilon * path.grid.delta());
    let mut sig_buf = vec![0.0; p * p];
    let mut acc = 0.0;
    for k in 1..=n {
        let xg = model.guarded(path.obs[k - 1].as_slice());
        model.big_sigma_into(beta, &xg, &mut sig_buf);
        let sigma = DMatrix::from_row_slice(p, p, &sig_buf);
        let chol = cholesky_with_ridge(&sigma)?;
        acc += log_det(&chol) + weight * quad_form_inv(&chol, &res[k - 1]);
    }
    Ok(acc)
}

/// Gaussian loglikelihood of the approximating process,
/// `-(1/2) sum log det S_k - (1/(2 eps^2 Delta)) sum N_k^T S_k^{-1} N_k`.
pub fn gaussian_loglik(path: &ObservedPath, flow: &FlowSolution) -> Result<f64> {
    let res = residuals(path, flow);
    let s_mats = flow.s_mats()?;
    let weight = 1.0 / (path.epsilon * path.epsilon * path.grid.delta());
    let mut acc = 0.0;
    for (nk, s) in res.iter().zip(s_mats) {
        let chol = cholesky_with_ridge(s)?;
        acc += log_det(&chol) + weight * quad_form_inv(&chol, nk);
    }
    Ok(-0.5 * acc)
}
