//! Contrast minimization over parameter boxes, information matrices and
//! confidence intervals.
//!
//! The minimizer is the projected multi-start Nelder-Mead from
//! [`crate::optim`]. Confidence intervals are plug-in: the applicable
//! information matrix is evaluated at the estimate and inverted, then
//! scaled by the rate of the corresponding block (`eps` for drift
//! parameters, `1/sqrt(n)` for diffusion parameters).
//!
//! Information matrices:
//! - `I_b`: quadrature of `(db/dalpha)^T Sigma^{-1} (db/dalpha)` along the
//!   skeleton (the continuous-observation information),
//! - `I_Delta = Delta sum_k D_k^T S_k^{-1} D_k`,
//! - `J_Delta = M_Delta (Delta sum_k D_k^T S_k D_k)^{-1} M_Delta^T` with
//!   `M_Delta = Delta sum_k D_k^T D_k` (the least-squares limit),
//! - `I_sigma`: `1/(2T)` times the quadrature of
//!   `Tr[(dSigma/dbeta_i) Sigma^{-1} (dSigma/dbeta_j) Sigma^{-1}]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::contrast::{
    contrast_cls, contrast_small_delta, contrast_weighted, gaussian_loglik, residuals,
    ContrastKind, ObservedPath,
};
use crate::error::{Error, Result};
use crate::flow::{d_matrices, solve_flow, solve_flow_core, CovSpec, FlowSolution, SamplingGrid};
use crate::linalg::{cholesky_with_ridge, invert_spd, log_det, quad_form_inv, symmetrize};
use crate::model::{LinkSpec, ModelSpec, ParamBox};
use crate::optim::{multi_start, SearchOptions, SearchResult};

/// 95% normal quantile used for all reported intervals.
pub const Z_95: f64 = 1.96;

/// Controls for [`minimize`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinimizeOptions {
    /// RK4 substeps per sampling interval for candidate flows.
    pub substeps: usize,
    /// Iteration cap per Nelder-Mead start; `0` means `400 * dimension`.
    pub max_iters: usize,
    /// Cap on lattice starts.
    pub max_starts: usize,
    /// Optional two-phase search: screen all starts with this budget,
    /// polish only the best.
    pub screen_iters: Option<usize>,
    /// Pin `alpha` and search over `beta` only (small-interval contrast
    /// with a free `beta`, or the Gaussian loglikelihood).
    pub fixed_alpha: Option<Vec<f64>>,
    /// Externally known `beta`, used to evaluate information matrices for
    /// kinds that do not estimate `beta` themselves.
    pub known_beta: Option<Vec<f64>>,
    /// Skip information matrices and intervals entirely.
    pub compute_ci: bool,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            substeps: 16,
            max_iters: 0,
            max_starts: 27,
            screen_iters: None,
            fixed_alpha: None,
            known_beta: None,
            compute_ci: true,
        }
    }
}

/// Search diagnostics carried on every result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerDiagnostics {
    pub iterations: usize,
    pub evaluations: usize,
    pub restarts: usize,
    pub converged: bool,
}

/// A point estimate with information matrices and 95% intervals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationResult {
    pub kind: ContrastKind,
    pub alpha_hat: Vec<f64>,
    /// Present for the small-interval contrast (jointly or through the
    /// link) and for the Gaussian loglikelihood.
    pub beta_hat: Option<Vec<f64>>,
    pub contrast_min: f64,
    /// False when `alpha` was pinned by [`MinimizeOptions::fixed_alpha`].
    pub alpha_estimated: bool,
    /// Information matrix for the drift block (`J_Delta`, `I_Delta` or
    /// `I_b` depending on the kind), evaluated at the estimate.
    pub info_alpha: Option<DMatrix<f64>>,
    /// Information matrix for the diffusion block (`I_sigma`).
    pub info_beta: Option<DMatrix<f64>>,
    /// Block-diagonal composition of the blocks above.
    pub info_matrix: Option<DMatrix<f64>>,
    /// Block-diagonal `diag(eps^2 info_alpha^{-1}, info_beta^{-1}/n)`.
    pub cov_matrix: Option<DMatrix<f64>>,
    /// Per-parameter intervals, alpha coordinates first, then beta when it
    /// is estimated. `None` marks an unavailable interval.
    pub ci_95: Vec<Option<(f64, f64)>>,
    pub optimizer: OptimizerDiagnostics,
}

fn link_beta(link: &LinkSpec, alpha: &[f64], beta_dim: usize) -> Result<Vec<f64>> {
    match link {
        LinkSpec::BetaEqualsFAlpha { f } => {
            let beta = f(alpha);
            if beta.len() != beta_dim {
                return Err(Error::dim(format!(
                    "beta link returned length {}, expected {}",
                    beta.len(),
                    beta_dim
                )));
            }
            Ok(beta)
        }
        _ => Err(Error::config("link does not define beta = f(alpha)")),
    }
}

/// Minimize a contrast over the box and attach plug-in intervals.
///
/// Box layout by kind: `alpha` alone for `cls` and the weighted kinds
/// (and for `small_delta` under a `beta = f(alpha)` link); `(alpha, beta)`
/// concatenated for the joint kinds; `beta` alone when `fixed_alpha` is
/// set.
pub fn minimize(
    kind: ContrastKind,
    model: &ModelSpec,
    link: &LinkSpec,
    path: &ObservedPath,
    bounds: &ParamBox,
    opts: &MinimizeOptions,
) -> Result<EstimationResult> {
    if path.p() != model.p {
        return Err(Error::dim(format!(
            "path has dimension {}, model '{}' has {}",
            path.p(),
            model.id,
            model.p
        )));
    }
    if path.grid.n() < 2 {
        return Err(Error::config("estimation needs at least two observations"));
    }
    let (a, b) = (model.alpha_dim, model.beta_dim);
    let x0 = path.x0.as_slice().to_vec();
    let grid = path.grid;
    let substeps = opts.substeps.max(1);
    let search_opts = SearchOptions {
        max_iters: opts.max_iters,
        max_starts: opts.max_starts,
        screen_iters: opts.screen_iters,
    };

    if let Some(fixed) = &opts.fixed_alpha {
        if fixed.len() != a {
            return Err(Error::dim(format!(
                "fixed_alpha has length {}, expected {}",
                fixed.len(),
                a
            )));
        }
        if !matches!(kind, ContrastKind::SmallDelta | ContrastKind::GaussianLoglik) {
            return Err(Error::config(
                "fixed_alpha only applies to small_delta and gaussian_loglik",
            ));
        }
    }

    let expect_dim = |want: usize, label: &str| -> Result<()> {
        if bounds.dim() != want {
            return Err(Error::dim(format!(
                "box has dimension {}, {} expects {}",
                bounds.dim(),
                label,
                want
            )));
        }
        Ok(())
    };

    let flow_basic = |alpha: &[f64]| {
        solve_flow_core(model, alpha, CovSpec::None, &x0, &grid, substeps, false, false)
            .map(|o| o.solution)
    };

    let search: SearchResult;
    let alpha_hat: Vec<f64>;
    let mut beta_hat: Option<Vec<f64>> = None;
    let mut alpha_estimated = true;

    match kind {
        ContrastKind::Cls => {
            expect_dim(a, "cls")?;
            let mut obj = |alpha: &[f64]| Ok(contrast_cls(path, &flow_basic(alpha)?));
            search = multi_start(&mut obj, bounds, &search_opts)?;
            alpha_hat = search.x.clone();
        }
        ContrastKind::WeightedLink => {
            expect_dim(a, "weighted_link")?;
            if !matches!(link, LinkSpec::BetaEqualsFAlpha { .. }) {
                return Err(Error::config(
                    "weighted_link requires a beta = f(alpha) link",
                ));
            }
            let mut obj = |alpha: &[f64]| {
                let beta = link_beta(link, alpha, b)?;
                let flow = solve_flow_core(
                    model,
                    alpha,
                    CovSpec::Beta(&beta),
                    &x0,
                    &grid,
                    substeps,
                    false,
                    false,
                )?
                .solution;
                contrast_weighted(path, &flow, link)
            };
            search = multi_start(&mut obj, bounds, &search_opts)?;
            alpha_hat = search.x.clone();
        }
        ContrastKind::WeightedMultiplicative => {
            expect_dim(a, "weighted_multiplicative")?;
            if !matches!(model.link, LinkSpec::Multiplicative { .. }) {
                return Err(Error::config(format!(
                    "model '{}' has no multiplicative diffusion structure",
                    model.id
                )));
            }
            let mut obj = |alpha: &[f64]| {
                let flow = solve_flow_core(
                    model,
                    alpha,
                    CovSpec::MultiplicativeBase,
                    &x0,
                    &grid,
                    substeps,
                    false,
                    false,
                )?
                .solution;
                contrast_weighted(path, &flow, &model.link)
            };
            search = multi_start(&mut obj, bounds, &search_opts)?;
            alpha_hat = search.x.clone();
        }
        ContrastKind::SmallDelta => {
            if let LinkSpec::BetaEqualsFAlpha { .. } = link {
                if opts.fixed_alpha.is_some() {
                    return Err(Error::config(
                        "fixed_alpha conflicts with a beta = f(alpha) link",
                    ));
                }
                expect_dim(a, "small_delta with link")?;
                let mut obj = |alpha: &[f64]| {
                    let beta = link_beta(link, alpha, b)?;
                    contrast_small_delta(path, &flow_basic(alpha)?, &beta, model)
                };
                search = multi_start(&mut obj, bounds, &search_opts)?;
                alpha_hat = search.x.clone();
                beta_hat = Some(link_beta(link, &alpha_hat, b)?);
            } else if let Some(fixed) = &opts.fixed_alpha {
                expect_dim(b, "small_delta with fixed alpha")?;
                let flow = flow_basic(fixed)?;
                let mut obj = |beta: &[f64]| contrast_small_delta(path, &flow, beta, model);
                search = multi_start(&mut obj, bounds, &search_opts)?;
                alpha_hat = fixed.clone();
                alpha_estimated = false;
                beta_hat = Some(search.x.clone());
            } else {
                expect_dim(a + b, "joint small_delta")?;
                let mut obj = |theta: &[f64]| {
                    contrast_small_delta(path, &flow_basic(&theta[..a])?, &theta[a..], model)
                };
                search = multi_start(&mut obj, bounds, &search_opts)?;
                alpha_hat = search.x[..a].to_vec();
                beta_hat = Some(search.x[a..].to_vec());
            }
        }
        ContrastKind::GaussianLoglik => {
            if let Some(fixed) = &opts.fixed_alpha {
                expect_dim(b, "gaussian_loglik with fixed alpha")?;
                if let LinkSpec::Multiplicative { f_scalar, .. } = &model.link {
                    // S_k = f(beta) S_k^0: one base flow, then O(n) per
                    // candidate
                    let flow = solve_flow_core(
                        model,
                        fixed,
                        CovSpec::MultiplicativeBase,
                        &x0,
                        &grid,
                        substeps,
                        false,
                        false,
                    )?
                    .solution;
                    let res = residuals(path, &flow);
                    let mut log_dets = Vec::with_capacity(grid.n());
                    let mut quads = Vec::with_capacity(grid.n());
                    for (s, nk) in flow.s_mats()?.iter().zip(&res) {
                        let chol = cholesky_with_ridge(s)?;
                        log_dets.push(log_det(&chol));
                        quads.push(quad_form_inv(&chol, nk));
                    }
                    let weight = 1.0 / (path.epsilon * path.epsilon * grid.delta());
                    let p = model.p as f64;
                    let mut obj = move |beta: &[f64]| {
                        let fb = f_scalar(beta);
                        if !(fb > 0.0) || !fb.is_finite() {
                            return Ok(f64::INFINITY);
                        }
                        let mut acc = 0.0;
                        for (ld, q) in log_dets.iter().zip(&quads) {
                            acc += p * fb.ln() + ld + weight * q / fb;
                        }
                        Ok(0.5 * acc)
                    };
                    search = multi_start(&mut obj, bounds, &search_opts)?;
                } else {
                    let mut obj = |beta: &[f64]| {
                        let flow = solve_flow_core(
                            model,
                            fixed,
                            CovSpec::Beta(beta),
                            &x0,
                            &grid,
                            substeps,
                            false,
                            false,
                        )?
                        .solution;
                        Ok(-gaussian_loglik(path, &flow)?)
                    };
                    search = multi_start(&mut obj, bounds, &search_opts)?;
                }
                alpha_hat = fixed.clone();
                alpha_estimated = false;
                beta_hat = Some(search.x.clone());
            } else {
                expect_dim(a + b, "joint gaussian_loglik")?;
                let mut obj = |theta: &[f64]| {
                    let flow = solve_flow_core(
                        model,
                        &theta[..a],
                        CovSpec::Beta(&theta[a..]),
                        &x0,
                        &grid,
                        substeps,
                        false,
                        false,
                    )?
                    .solution;
                    Ok(-gaussian_loglik(path, &flow)?)
                };
                search = multi_start(&mut obj, bounds, &search_opts)?;
                alpha_hat = search.x[..a].to_vec();
                beta_hat = Some(search.x[a..].to_vec());
            }
        }
    }

    let mut result = EstimationResult {
        kind,
        alpha_hat,
        beta_hat,
        contrast_min: search.value,
        alpha_estimated,
        info_alpha: None,
        info_beta: None,
        info_matrix: None,
        cov_matrix: None,
        ci_95: Vec::new(),
        optimizer: OptimizerDiagnostics {
            iterations: search.iterations,
            evaluations: search.evaluations,
            restarts: search.restarts,
            converged: search.converged,
        },
    };

    if opts.compute_ci {
        attach_information(&mut result, kind, model, link, path, opts)?;
        confidence_intervals(&mut result, path.epsilon, &grid)?;
    }
    Ok(result)
}

/// Beta value to plug into information matrices: the estimate when
/// available, otherwise the externally known value, otherwise the link.
fn beta_for_info(
    result: &EstimationResult,
    link: &LinkSpec,
    model: &ModelSpec,
    opts: &MinimizeOptions,
) -> Option<Vec<f64>> {
    if let Some(beta) = &result.beta_hat {
        return Some(beta.clone());
    }
    if let Some(beta) = &opts.known_beta {
        return Some(beta.clone());
    }
    link_beta(link, &result.alpha_hat, model.beta_dim).ok()
}

/// Fill `info_alpha` / `info_beta` at the estimate.
fn attach_information(
    result: &mut EstimationResult,
    kind: ContrastKind,
    model: &ModelSpec,
    link: &LinkSpec,
    path: &ObservedPath,
    opts: &MinimizeOptions,
) -> Result<()> {
    let grid = path.grid;
    let substeps = opts.substeps.max(4);
    let x0 = path.x0.as_slice();
    let beta_info = beta_for_info(result, link, model, opts);

    match kind {
        ContrastKind::Cls => {
            if let Some(beta) = &beta_info {
                let flow = solve_flow(model, &result.alpha_hat, beta, x0, &grid, substeps)?;
                result.info_alpha = Some(info_j_delta(&flow)?);
            }
        }
        ContrastKind::WeightedLink | ContrastKind::WeightedMultiplicative => {
            if let Some(beta) = &beta_info {
                let flow = solve_flow(model, &result.alpha_hat, beta, x0, &grid, substeps)?;
                result.info_alpha = Some(info_i_delta(&flow)?);
            }
        }
        ContrastKind::SmallDelta => {
            if let Some(beta) = &beta_info {
                if result.alpha_estimated {
                    result.info_alpha =
                        Some(info_i_b(model, &result.alpha_hat, beta, x0, &grid, substeps)?);
                }
                result.info_beta =
                    Some(info_i_sigma(model, &result.alpha_hat, beta, x0, &grid, substeps)?);
            }
        }
        ContrastKind::GaussianLoglik => {
            if let Some(beta) = &beta_info {
                if result.alpha_estimated {
                    let flow =
                        solve_flow(model, &result.alpha_hat, beta, x0, &grid, substeps)?;
                    result.info_alpha = Some(info_i_delta(&flow)?);
                }
                result.info_beta =
                    Some(info_i_sigma(model, &result.alpha_hat, beta, x0, &grid, substeps)?);
            }
        }
    }
    Ok(())
}

/// Compose covariance blocks and 95% intervals from the information
/// blocks, in place. Intervals stay `None` where the block is missing or
/// singular.
pub fn confidence_intervals(
    result: &mut EstimationResult,
    epsilon: f64,
    grid: &SamplingGrid,
) -> Result<()> {
    let a = result.alpha_hat.len();
    let b = result.beta_hat.as_ref().map_or(0, Vec::len);
    let mut ci: Vec<Option<(f64, f64)>> = vec![None; a + b];

    let cov_alpha: Option<DMatrix<f64>> = result.info_alpha.as_ref().and_then(|info| {
        invert_spd(info)
            .ok()
            .map(|inv| inv * (epsilon * epsilon))
    });
    let cov_beta: Option<DMatrix<f64>> = result.info_beta.as_ref().and_then(|info| {
        invert_spd(info)
            .ok()
            .map(|inv| inv / grid.n() as f64)
    });

    if let Some(cov) = &cov_alpha {
        for i in 0..a {
            let half = Z_95 * cov[(i, i)].max(0.0).sqrt();
            ci[i] = Some((result.alpha_hat[i] - half, result.alpha_hat[i] + half));
        }
    }
    if let (Some(cov), Some(beta)) = (&cov_beta, &result.beta_hat) {
        for i in 0..b {
            let half = Z_95 * cov[(i, i)].max(0.0).sqrt();
            ci[a + i] = Some((beta[i] - half, beta[i] + half));
        }
    }

    result.info_matrix = block_diag(result.info_alpha.as_ref(), result.info_beta.as_ref());
    result.cov_matrix = block_diag(cov_alpha.as_ref(), cov_beta.as_ref());
    result.ci_95 = ci;
    Ok(())
}

fn block_diag(a: Option<&DMatrix<f64>>, b: Option<&DMatrix<f64>>) -> Option<DMatrix<f64>> {
    match (a, b) {
        (Some(a), Some(b)) => {
            let (na, nb) = (a.nrows(), b.nrows());
            let mut m = DMatrix::zeros(na + nb, na + nb);
            m.view_mut((0, 0), (na, na)).copy_from(a);
            m.view_mut((na, na), (nb, nb)).copy_from(b);
            Some(m)
        }
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => Some(b.clone()),
        (None, None) => None,
    }
}

/// Composite Simpson accumulation of a matrix-valued function over the
/// flow's substep mesh.
fn simpson_over_mesh<F>(
    model: &ModelSpec,
    alpha: &[f64],
    x0: &[f64],
    grid: &SamplingGrid,
    substeps: usize,
    dim: usize,
    mut node_term: F,
) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64], &mut DMatrix<f64>) -> Result<()>,
{
    let m = substeps + substeps % 2; // Simpson needs an even count
    let out = solve_flow_core(model, alpha, CovSpec::None, x0, grid, m, false, true)?;
    let mesh = out.mesh.expect("mesh recording requested");
    let h = mesh.h;
    let mut acc = DMatrix::zeros(dim, dim);
    let mut term = DMatrix::zeros(dim, dim);
    for k in 0..grid.n() {
        for j in 0..=m {
            let weight = if j == 0 || j == m {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            node_term(mesh.node(k * m + j), &mut term)?;
            acc += &term * (weight * h / 3.0);
        }
    }
    symmetrize(&mut acc);
    Ok(acc)
}

/// Continuous-observation information
/// `I_b = int_0^T (db/dalpha)^T Sigma^{-1} (db/dalpha) dt` along the
/// skeleton, by composite Simpson on the substep mesh.
pub fn info_i_b(
    model: &ModelSpec,
    alpha: &[f64],
    beta: &[f64],
    x0: &[f64],
    grid: &SamplingGrid,
    substeps: usize,
) -> Result<DMatrix<f64>> {
    let (p, a) = (model.p, model.alpha_dim);
    let mut grad = vec![0.0; p * a];
    let mut sig = vec![0.0; p * p];
    simpson_over_mesh(model, alpha, x0, grid, substeps, a, |x, term| {
        model.drift_grad_alpha_into(alpha, x, &mut grad);
        let xg = model.guarded(x);
        model.big_sigma_into(beta, &xg, &mut sig);
        let sigma = DMatrix::from_row_slice(p, p, &sig);
        let chol = cholesky_with_ridge(&sigma)?;
        let g = DMatrix::from_row_slice(p, a, &grad);
        let solved = chol.solve(&g);
        *term = g.transpose() * solved;
        Ok(())
    })
}

/// `I_Delta = Delta sum_k D_k^T S_k^{-1} D_k` from a flow with
/// sensitivities and covariances.
pub fn info_i_delta(flow: &FlowSolution) -> Result<DMatrix<f64>> {
    let d = d_matrices(flow)?;
    let s_mats = flow.s_mats()?;
    let a = d[0].ncols();
    let mut acc = DMatrix::zeros(a, a);
    for (dk, sk) in d.iter().zip(s_mats) {
        let chol = cholesky_with_ridge(sk)?;
        let solved = chol.solve(dk);
        acc += dk.transpose() * solved;
    }
    acc *= flow.grid.delta();
    symmetrize(&mut acc);
    Ok(acc)
}

/// `J_Delta = M (Delta sum_k D_k^T S_k D_k)^{-1} M^T` with
/// `M = Delta sum_k D_k^T D_k`.
pub fn info_j_delta(flow: &FlowSolution) -> Result<DMatrix<f64>> {
    let d = d_matrices(flow)?;
    let s_mats = flow.s_mats()?;
    let a = d[0].ncols();
    let delta = flow.grid.delta();
    let mut m = DMatrix::zeros(a, a);
    let mut mid = DMatrix::zeros(a, a);
    for (dk, sk) in d.iter().zip(s_mats) {
        m += dk.transpose() * dk;
        mid += dk.transpose() * sk * dk;
    }
    m *= delta;
    mid *= delta;
    symmetrize(&mut mid);
    let mid_inv = invert_spd(&mid)?;
    let mut j = &m * mid_inv * m.transpose();
    symmetrize(&mut j);
    Ok(j)
}

/// `I_sigma[i,j] = 1/(2T) int_0^T
///  Tr[(dSigma/dbeta_i) Sigma^{-1} (dSigma/dbeta_j) Sigma^{-1}] dt`.
pub fn info_i_sigma(
    model: &ModelSpec,
    alpha: &[f64],
    beta: &[f64],
    x0: &[f64],
    grid: &SamplingGrid,
    substeps: usize,
) -> Result<DMatrix<f64>> {
    let (p, b) = (model.p, model.beta_dim);
    let mut sig = vec![0.0; p * p];
    let mut grads = vec![0.0; b * p * p];
    let raw = simpson_over_mesh(model, alpha, x0, grid, substeps, b, |x, term| {
        let xg = model.guarded(x);
        model.big_sigma_into(beta, &xg, &mut sig);
        model.big_sigma_grad_beta_into(beta, &xg, &mut grads);
        let sigma = DMatrix::from_row_slice(p, p, &sig);
        let chol = cholesky_with_ridge(&sigma)?;
        let w: Vec<DMatrix<f64>> = (0..b)
            .map(|i| {
                let g = DMatrix::from_row_slice(p, p, &grads[i * p * p..(i + 1) * p * p]);
                chol.solve(&g)
            })
            .collect();
        for i in 0..b {
            for j in 0..b {
                term[(i, j)] = (&w[i] * &w[j]).trace();
            }
        }
        Ok(())
    })?;
    Ok(raw / (2.0 * grid.t_horizon()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::solve_flow_with;
    use crate::model::{builtin_cir, builtin_ou, builtin_sir};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use std::sync::Arc;

    /// CIR closed forms at (alpha, beta, x0, T, n).
    struct CirOracle {
        alpha: f64,
        beta: f64,
        x0: f64,
        t: f64,
        n: usize,
    }

    impl CirOracle {
        fn a(&self) -> f64 {
            (self.alpha * self.t / self.n as f64).exp()
        }
        fn i_b(&self) -> f64 {
            self.x0 * ((self.alpha * self.t).exp() - 1.0) / (self.beta * self.beta * self.alpha)
        }
        fn i_delta(&self) -> f64 {
            let a = self.a();
            self.i_b() * (a.ln() / (a - 1.0)).powi(2) * a
        }
        fn j_b(&self) -> f64 {
            let e2 = (2.0 * self.alpha * self.t).exp();
            let e3 = (3.0 * self.alpha * self.t).exp();
            3.0 * self.x0 / (4.0 * self.alpha * self.beta * self.beta) * (e2 - 1.0).powi(2)
                / (e3 - 1.0)
        }
        fn j_delta(&self) -> f64 {
            let a = self.a();
            self.j_b()
                * (4.0 * a / 3.0)
                * ((a.powi(3) - 1.0) / (a - 1.0))
                * (a.ln() / (a * a - 1.0)).powi(2)
        }
    }

    fn cir_flow(o: &CirOracle, substeps: usize) -> FlowSolution {
        let model = builtin_cir();
        let grid = SamplingGrid::new(o.t, o.n).unwrap();
        solve_flow(&model, &[o.alpha], &[o.beta], &[o.x0], &grid, substeps).unwrap()
    }

    #[test]
    fn cir_information_matches_closed_forms() {
        let o = CirOracle { alpha: 1.0, beta: 1.0, x0: 1.0, t: 1.0, n: 10 };
        let model = builtin_cir();
        let grid = SamplingGrid::new(o.t, o.n).unwrap();

        let ib = info_i_b(&model, &[o.alpha], &[o.beta], &[o.x0], &grid, 64).unwrap();
        assert_relative_eq!(ib[(0, 0)], std::f64::consts::E - 1.0, max_relative = 1e-6);
        assert_relative_eq!(ib[(0, 0)], o.i_b(), max_relative = 1e-6);

        let flow = cir_flow(&o, 64);
        let id = info_i_delta(&flow).unwrap();
        assert_relative_eq!(id[(0, 0)], o.i_delta(), max_relative = 1e-6);
        // I_Delta/I_b factor at alpha=1, Delta=0.1 is 0.999168
        assert_relative_eq!(id[(0, 0)] / ib[(0, 0)], 0.999168, epsilon = 1e-6);

        let jd = info_j_delta(&flow).unwrap();
        assert_relative_eq!(jd[(0, 0)], o.j_delta(), max_relative = 1e-6);
    }

    #[test]
    fn cir_beta_scaling_of_i_b() {
        let model = builtin_cir();
        let grid = SamplingGrid::new(1.0, 10).unwrap();
        let i1 = info_i_b(&model, &[1.0], &[1.0], &[1.0], &grid, 32).unwrap();
        let i2 = info_i_b(&model, &[1.0], &[2.0], &[1.0], &grid, 32).unwrap();
        assert_relative_eq!(i2[(0, 0)], i1[(0, 0)] / 4.0, max_relative = 1e-10);
    }

    #[test]
    fn ou_i_b_matches_trapezoid_oracle() {
        // integrand along the skeleton: x0^2 e^{2 alpha t} / beta^2
        let model = builtin_ou();
        let (alpha, beta, x0) = (0.7, 1.3, 1.0);
        let grid = SamplingGrid::new(1.0, 10).unwrap();
        let got = info_i_b(&model, &[alpha], &[beta], &[x0], &grid, 64).unwrap()[(0, 0)];

        let steps = 20_000;
        let h = 1.0 / steps as f64;
        let f = |t: f64| x0 * x0 * (2.0 * alpha * t).exp() / (beta * beta);
        let mut trap = 0.5 * (f(0.0) + f(1.0));
        for j in 1..steps {
            trap += f(j as f64 * h);
        }
        trap *= h;
        assert_relative_eq!(got, trap, max_relative = 1e-5);
        // closed form of the same integral
        assert_relative_eq!(
            got,
            x0 * x0 / (beta * beta) * ((2.0 * alpha).exp() - 1.0) / (2.0 * alpha),
            max_relative = 1e-8
        );
    }

    #[test]
    fn i_delta_tends_to_i_b_monotonically() {
        let model = builtin_cir();
        let mut ratios = Vec::new();
        for n in [5usize, 10, 20, 100] {
            let o = CirOracle { alpha: 1.0, beta: 1.0, x0: 1.0, t: 1.0, n };
            let grid = SamplingGrid::new(1.0, n).unwrap();
            let ib = info_i_b(&model, &[1.0], &[1.0], &[1.0], &grid, 32).unwrap()[(0, 0)];
            let flow = cir_flow(&o, 32);
            let id = info_i_delta(&flow).unwrap()[(0, 0)];
            ratios.push(id / ib);
        }
        for w in ratios.windows(2) {
            assert!(w[1] > w[0], "ratios not increasing: {ratios:?}");
        }
        assert!((ratios[3] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn driftless_model_has_zero_i_delta() {
        let model = ModelSpec::new(
            "driftless",
            1,
            1,
            1,
            Arc::new(|_a, _x, out| out[0] = 0.0),
            Arc::new(|_b, _x, out| out[0] = 1.0),
        );
        let grid = SamplingGrid::new(1.0, 5).unwrap();
        let flow = solve_flow(&model, &[0.5], &[1.0], &[1.0], &grid, 16).unwrap();
        assert!(info_i_delta(&flow).unwrap().amax() < 1e-18);
    }

    #[test]
    fn scalar_constant_weighting_collapses_j_to_i() {
        // p = a = 1 with constant S_k = s: both equal Delta sum D_k^2 / s
        let model = builtin_ou();
        let grid = SamplingGrid::new(1.0, 8).unwrap();
        let flow = solve_flow(&model, &[0.7], &[1.3], &[1.0], &grid, 32).unwrap();
        let i = info_i_delta(&flow).unwrap()[(0, 0)];
        let j = info_j_delta(&flow).unwrap()[(0, 0)];
        assert_relative_eq!(i, j, max_relative = 1e-10);
        let d = d_matrices(&flow).unwrap();
        let s = flow.s_mats().unwrap()[0][(0, 0)];
        let brute: f64 =
            d.iter().map(|dk| dk[(0, 0)] * dk[(0, 0)] / s).sum::<f64>() * grid.delta();
        assert_relative_eq!(i, brute, max_relative = 1e-10);
    }

    #[test]
    fn j_delta_never_exceeds_i_delta_for_cir() {
        for n in [2usize, 4, 5, 10, 20, 50, 100] {
            let o = CirOracle { alpha: 1.0, beta: 1.0, x0: 1.0, t: 1.0, n };
            let flow = cir_flow(&o, 32);
            let i = info_i_delta(&flow).unwrap()[(0, 0)];
            let j = info_j_delta(&flow).unwrap()[(0, 0)];
            assert!(j <= i * (1.0 + 1e-12), "n={n}: J={j} > I={i}");
        }
    }

    #[test]
    fn ou_i_sigma_closed_form() {
        let model = builtin_ou();
        let grid = SamplingGrid::new(1.0, 10).unwrap();
        let is = info_i_sigma(&model, &[0.7], &[1.0], &[1.0], &grid, 32).unwrap();
        assert_relative_eq!(is[(0, 0)], 2.0, max_relative = 1e-10);
        // multiplicative form: (p/2) (f'/f)^2 with f = beta^2
        let beta = 1.7;
        let is2 = info_i_sigma(&model, &[0.7], &[beta], &[1.0], &grid, 32).unwrap();
        assert_relative_eq!(is2[(0, 0)], 2.0 / (beta * beta), max_relative = 1e-10);
    }

    #[test]
    fn i_sigma_zero_rows_for_inactive_coordinates() {
        // Sigma independent of beta_2 -> second row and column vanish
        let model = ModelSpec::new(
            "halfdead",
            1,
            1,
            2,
            Arc::new(|a, x, out| out[0] = a[0] * x[0]),
            Arc::new(|b, _x, out| out[0] = b[0]),
        );
        let grid = SamplingGrid::new(1.0, 5).unwrap();
        let is = info_i_sigma(&model, &[0.5], &[1.0, 3.0], &[1.0], &grid, 16).unwrap();
        assert!(is[(0, 1)].abs() < 1e-10);
        assert!(is[(1, 0)].abs() < 1e-10);
        assert!(is[(1, 1)].abs() < 1e-10);
        assert!(is[(0, 0)] > 0.0);
    }

    #[test]
    fn multiplicative_i_sigma_general_p() {
        // p = 2, Sigma = beta^2 I: I_sigma = (p/2)(f'/f)^2 = 2 * (2/beta)^2 / 2
        let model = ModelSpec::new(
            "iso2",
            2,
            1,
            1,
            Arc::new(|_a, _x, out| {
                out[0] = 0.0;
                out[1] = 0.0;
            }),
            Arc::new(|b, _x, out| {
                out.copy_from_slice(&[b[0], 0.0, 0.0, b[0]]);
            }),
        );
        let beta = 1.4;
        let grid = SamplingGrid::new(1.0, 5).unwrap();
        let is = info_i_sigma(&model, &[0.0], &[beta], &[1.0, 1.0], &grid, 16).unwrap();
        let expected = 2.0 / 2.0 * (2.0 * beta / (beta * beta)).powi(2);
        assert_relative_eq!(is[(0, 0)], expected, max_relative = 1e-8);
    }

    fn cir_test_path(alpha0: f64, eps: f64, n: usize) -> ObservedPath {
        // deterministic pseudo-noise; any path works for the identities
        let model = builtin_cir();
        let grid = SamplingGrid::new(1.0, n).unwrap();
        let flow = solve_flow_with(
            &model,
            &[alpha0],
            CovSpec::None,
            &[1.0],
            &grid,
            32,
            false,
        )
        .unwrap();
        let obs: Vec<DVector<f64>> = flow
            .x
            .iter()
            .enumerate()
            .map(|(k, x)| x.add_scalar(eps * ((k as f64) * 1.7).sin() * 0.5))
            .collect();
        ObservedPath::new(grid, obs, eps).unwrap()
    }

    #[test]
    fn cls_recovers_truth_on_noise_free_path() {
        let model = builtin_cir();
        let grid = SamplingGrid::new(1.0, 10).unwrap();
        let flow = solve_flow_with(
            &model,
            &[1.0],
            CovSpec::None,
            &[1.0],
            &grid,
            32,
            false,
        )
        .unwrap();
        let path = ObservedPath::new(grid, flow.x.clone(), 0.05).unwrap();
        let bounds = ParamBox::new(vec![0.2], vec![2.5]).unwrap();
        let res = minimize(
            ContrastKind::Cls,
            &model,
            &model.link,
            &path,
            &bounds,
            &MinimizeOptions {
                substeps: 32,
                known_beta: Some(vec![1.0]),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((res.alpha_hat[0] - 1.0).abs() < 1e-6, "{}", res.alpha_hat[0]);
        assert!(res.optimizer.converged);
    }

    #[test]
    fn cir_cls_minimizer_equals_log_ratio_closed_form() {
        let path = cir_test_path(1.0, 0.05, 50);
        let model = builtin_cir();
        let bounds = ParamBox::new(vec![0.2], vec![2.5]).unwrap();
        let res = minimize(
            ContrastKind::Cls,
            &model,
            &model.link,
            &path,
            &bounds,
            &MinimizeOptions { substeps: 16, compute_ci: false, ..Default::default() },
        )
        .unwrap();
        let num: f64 = (1..=50).map(|k| path.obs[k][0] * path.obs[k - 1][0]).sum();
        let den: f64 = (1..=50).map(|k| path.obs[k - 1][0].powi(2)).sum();
        let closed = (num / den).ln() / path.grid.delta();
        assert!(
            (res.alpha_hat[0] - closed).abs() < 1e-5,
            "{} vs {closed}",
            res.alpha_hat[0]
        );
    }

    #[test]
    fn ou_loglik_beta_sq_minimizer_matches_mle_formula() {
        // alpha known; the loglik minimizer over beta equals the scalar MLE
        let model = builtin_ou();
        let (alpha0, eps, n) = (1.0, 0.1, 20);
        let grid = SamplingGrid::new(1.0, n).unwrap();
        let obs: Vec<DVector<f64>> = (0..=n)
            .map(|k| {
                let t = k as f64 * grid.delta();
                DVector::from_row_slice(&[(alpha0 * t).exp()
                    + eps * (0.17 * (k * k) as f64).sin() * 0.3])
            })
            .collect();
        let path = ObservedPath::new(grid, obs, eps).unwrap();
        let bounds = ParamBox::new(vec![0.05], vec![5.0]).unwrap();
        let res = minimize(
            ContrastKind::GaussianLoglik,
            &model,
            &model.link,
            &path,
            &bounds,
            &MinimizeOptions {
                substeps: 32,
                fixed_alpha: Some(vec![alpha0]),
                compute_ci: false,
                ..Default::default()
            },
        )
        .unwrap();
        let beta_hat_sq = res.beta_hat.as_ref().unwrap()[0].powi(2);

        let delta = grid.delta();
        let a = (alpha0 * delta).exp();
        let ssq: f64 = (1..=n)
            .map(|k| (path.obs[k][0] - a * path.obs[k - 1][0]).powi(2))
            .sum();
        let closed = 2.0 * alpha0 / (n as f64 * eps * eps * ((2.0 * alpha0 * delta).exp() - 1.0))
            * ssq;
        assert!(
            (beta_hat_sq - closed).abs() < 1e-6 * (1.0 + closed),
            "{beta_hat_sq} vs {closed}"
        );
        assert!(!res.alpha_estimated);
    }

    #[test]
    fn small_delta_scalar_beta_matches_calculus() {
        // p=1, Sigma = beta^2: minimizer over beta^2 is sum N_k^2/(n eps^2 Delta)
        let model = builtin_ou();
        let (alpha0, eps, n) = (0.7, 0.1, 20);
        let grid = SamplingGrid::new(1.0, n).unwrap();
        let flow = solve_flow_with(
            &model,
            &[alpha0],
            CovSpec::None,
            &[1.0],
            &grid,
            32,
            false,
        )
        .unwrap();
        let obs: Vec<DVector<f64>> = flow
            .x
            .iter()
            .enumerate()
            .map(|(k, x)| x.add_scalar(eps * (0.29 * k as f64).cos() * 0.2))
            .collect();
        let path = ObservedPath::new(grid, obs, eps).unwrap();
        let bounds = ParamBox::new(vec![0.05], vec![5.0]).unwrap();
        let res = minimize(
            ContrastKind::SmallDelta,
            &model,
            &LinkSpec::FreeBeta,
            &path,
            &bounds,
            &MinimizeOptions {
                substeps: 32,
                fixed_alpha: Some(vec![alpha0]),
                compute_ci: false,
                ..Default::default()
            },
        )
        .unwrap();
        let res_flow = residuals(&path, &flow);
        let ssq: f64 = res_flow.iter().map(|nk| nk[0] * nk[0]).sum();
        let closed = ssq / (n as f64 * eps * eps * grid.delta());
        let got = res.beta_hat.as_ref().unwrap()[0].powi(2);
        assert!((got - closed).abs() < 1e-6 * (1.0 + closed), "{got} vs {closed}");
    }

    #[test]
    fn sir_small_delta_reduces_to_alpha_search() {
        // the log-det term biases the noise-free minimizer by O(eps^2),
        // so a tiny eps keeps it below the 1e-5 check
        let model = builtin_sir();
        let grid = SamplingGrid::new(20.0, 10).unwrap();
        let truth = [0.4, 1.0 / 3.0];
        let flow = solve_flow_with(
            &model,
            &truth,
            CovSpec::None,
            &[0.99, 0.01],
            &grid,
            16,
            false,
        )
        .unwrap();
        let path = ObservedPath::new(grid, flow.x.clone(), 1e-4).unwrap();
        let bounds = ParamBox::new(vec![0.1, 0.05], vec![1.0, 1.0]).unwrap();
        let res = minimize(
            ContrastKind::SmallDelta,
            &model,
            &model.link,
            &path,
            &bounds,
            &MinimizeOptions { substeps: 16, ..Default::default() },
        )
        .unwrap();
        assert!((res.alpha_hat[0] - truth[0]).abs() < 1e-5);
        assert!((res.alpha_hat[1] - truth[1]).abs() < 1e-5);
        // identity link: beta_hat mirrors alpha_hat
        assert_eq!(res.beta_hat.as_ref().unwrap(), &res.alpha_hat);
    }

    #[test]
    fn weighted_multiplicative_recovers_truth_noise_free() {
        let model = builtin_cir();
        let grid = SamplingGrid::new(1.0, 10).unwrap();
        let flow = solve_flow_with(
            &model,
            &[1.0],
            CovSpec::None,
            &[1.0],
            &grid,
            16,
            false,
        )
        .unwrap();
        let path = ObservedPath::new(grid, flow.x.clone(), 0.05).unwrap();
        let bounds = ParamBox::new(vec![0.2], vec![2.5]).unwrap();
        let res = minimize(
            ContrastKind::WeightedMultiplicative,
            &model,
            &model.link,
            &path,
            &bounds,
            &MinimizeOptions { substeps: 16, compute_ci: false, ..Default::default() },
        )
        .unwrap();
        assert!((res.alpha_hat[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn minimize_is_deterministic() {
        let path = cir_test_path(1.0, 0.05, 20);
        let model = builtin_cir();
        let bounds = ParamBox::new(vec![0.2], vec![2.5]).unwrap();
        let opts = MinimizeOptions { substeps: 16, known_beta: Some(vec![1.0]), ..Default::default() };
        let r1 = minimize(ContrastKind::Cls, &model, &model.link, &path, &bounds, &opts).unwrap();
        let r2 = minimize(ContrastKind::Cls, &model, &model.link, &path, &bounds, &opts).unwrap();
        assert_eq!(r1.alpha_hat[0].to_bits(), r2.alpha_hat[0].to_bits());
        assert_eq!(r1.optimizer.evaluations, r2.optimizer.evaluations);
        assert!(bounds.contains(&r1.alpha_hat));
    }

    #[test]
    fn interval_scaling_in_epsilon_and_n() {
        let model = builtin_cir();
        let path = cir_test_path(1.0, 0.05, 20);
        let opts = MinimizeOptions { substeps: 16, known_beta: Some(vec![1.0]), ..Default::default() };
        let bounds = ParamBox::new(vec![0.2], vec![2.5]).unwrap();
        let mut res =
            minimize(ContrastKind::Cls, &model, &model.link, &path, &bounds, &opts).unwrap();
        let (lo, hi) = res.ci_95[0].unwrap();
        let width = hi - lo;

        // eps -> eps/10 shrinks the alpha interval tenfold
        confidence_intervals(&mut res, path.epsilon / 10.0, &path.grid).unwrap();
        let (lo2, hi2) = res.ci_95[0].unwrap();
        assert_relative_eq!((hi2 - lo2) * 10.0, width, max_relative = 1e-12);

        // beta intervals shrink like 1/sqrt(n)
        let grid4 = SamplingGrid::new(1.0, 4 * path.grid.n()).unwrap();
        let mut with_beta = res.clone();
        with_beta.beta_hat = Some(vec![1.0]);
        with_beta.info_beta = Some(DMatrix::from_element(1, 1, 2.0));
        confidence_intervals(&mut with_beta, path.epsilon, &path.grid).unwrap();
        let w1 = with_beta.ci_95[1].map(|(l, h)| h - l).unwrap();
        confidence_intervals(&mut with_beta, path.epsilon, &grid4).unwrap();
        let w2 = with_beta.ci_95[1].map(|(l, h)| h - l).unwrap();
        assert_relative_eq!(w1, 2.0 * w2, max_relative = 1e-12);
    }

    #[test]
    fn cls_interval_is_wider_than_weighted_interval() {
        // J_Delta <= I_Delta makes the J-based interval at least as wide
        let model = builtin_cir();
        let path = cir_test_path(1.0, 0.05, 20);
        let bounds = ParamBox::new(vec![0.2], vec![2.5]).unwrap();
        let opts = MinimizeOptions { substeps: 16, known_beta: Some(vec![1.0]), ..Default::default() };
        let cls =
            minimize(ContrastKind::Cls, &model, &model.link, &path, &bounds, &opts).unwrap();
        let weighted = minimize(
            ContrastKind::WeightedMultiplicative,
            &model,
            &model.link,
            &path,
            &bounds,
            &opts,
        )
        .unwrap();
        let w_cls = cls.ci_95[0].map(|(l, h)| h - l).unwrap();
        let w_wgt = weighted.ci_95[0].map(|(l, h)| h - l).unwrap();
        assert!(w_cls >= w_wgt * (1.0 - 1e-9), "{w_cls} < {w_wgt}");
    }

    #[test]
    fn box_dimension_mismatch_is_rejected() {
        let model = builtin_cir();
        let path = cir_test_path(1.0, 0.05, 10);
        let bounds = ParamBox::new(vec![0.2, 0.2], vec![2.5, 2.5]).unwrap();
        assert!(matches!(
            minimize(
                ContrastKind::Cls,
                &model,
                &model.link,
                &path,
                &bounds,
                &MinimizeOptions::default(),
            ),
            Err(Error::Dimension(_))
        ));
    }
}
