//! Closed-form oracle suite: the numerically computed resolvent, interval
//! covariance and information matrices must reproduce the exact CIR and
//! OU formulas.
//!
//! CIR (`dX = alpha X dt + eps beta sqrt(X) dB`), with `a = e^{alpha Delta}`:
//!
//! ```text
//! Phi_k   = a
//! S_k     = x0 beta^2 (a - 1)/(alpha Delta) e^{alpha k Delta}
//! I_b     = x0 (e^{alpha T} - 1) / (beta^2 alpha)
//! I_Delta = I_b (ln a / (a - 1))^2 a
//! J_b     = 3 x0 (e^{2 alpha T} - 1)^2 / (4 alpha beta^2 (e^{3 alpha T} - 1))
//! J_Delta = J_b (4a/3) ((a^3 - 1)/(a - 1)) (ln a / (a^2 - 1))^2
//! ```
//!
//! and `J_Delta <= I_Delta` for every `Delta`.

use crate::error::Result;
use crate::estimate::{info_i_b, info_i_delta, info_j_delta};
use crate::flow::{solve_flow, SamplingGrid};
use crate::model::{builtin_cir, builtin_ou};

/// Relative tolerance for the closed-form matches.
pub const ORACLE_TOL: f64 = 1e-6;

/// Outcome of one oracle check.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check_rel(name: &str, got: f64, want: f64, tol: f64) -> OracleCheck {
    let rel = (got - want).abs() / want.abs().max(1e-300);
    OracleCheck {
        name: name.to_string(),
        passed: rel <= tol,
        detail: format!("got {got:.12}, want {want:.12}, rel err {rel:.3e} (tol {tol:.0e})"),
    }
}

fn check_bool(name: &str, passed: bool, detail: String) -> OracleCheck {
    OracleCheck {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Run every closed-form check; the caller decides what a failure means.
pub fn run_oracle_suite() -> Result<Vec<OracleCheck>> {
    let mut checks = Vec::new();

    // CIR at alpha = beta = x0 = T = 1, n = 10
    let (alpha, beta, x0, t, n) = (1.0_f64, 1.0_f64, 1.0_f64, 1.0_f64, 10usize);
    let model = builtin_cir();
    let grid = SamplingGrid::new(t, n)?;
    let delta = grid.delta();
    let a = (alpha * delta).exp();
    let flow = solve_flow(&model, &[alpha], &[beta], &[x0], &grid, 64)?;

    let mut worst_phi: f64 = 0.0;
    for phi in &flow.phi {
        worst_phi = worst_phi.max((phi[(0, 0)] - a).abs() / a);
    }
    checks.push(check_bool(
        "cir resolvent e^{alpha Delta}",
        worst_phi <= ORACLE_TOL,
        format!("worst rel err {worst_phi:.3e} (tol {ORACLE_TOL:.0e})"),
    ));

    let mut worst_s: f64 = 0.0;
    for (k, s) in flow.s_mats().unwrap().iter().enumerate() {
        let want = x0 * beta * beta * (a - 1.0) / (alpha * delta)
            * (alpha * (k + 1) as f64 * delta).exp();
        worst_s = worst_s.max((s[(0, 0)] - want).abs() / want);
    }
    checks.push(check_bool(
        "cir interval covariance S_k",
        worst_s <= ORACLE_TOL,
        format!("worst rel err {worst_s:.3e} (tol {ORACLE_TOL:.0e})"),
    ));

    let i_b_closed = x0 * ((alpha * t).exp() - 1.0) / (beta * beta * alpha);
    let i_b = info_i_b(&model, &[alpha], &[beta], &[x0], &grid, 64)?[(0, 0)];
    checks.push(check_rel("cir I_b", i_b, i_b_closed, ORACLE_TOL));

    let i_delta_closed = i_b_closed * (a.ln() / (a - 1.0)).powi(2) * a;
    let i_delta = info_i_delta(&flow)?[(0, 0)];
    checks.push(check_rel("cir I_Delta identity", i_delta, i_delta_closed, ORACLE_TOL));

    let j_b_closed = 3.0 * x0 / (4.0 * alpha * beta * beta)
        * ((2.0 * alpha * t).exp() - 1.0).powi(2)
        / ((3.0 * alpha * t).exp() - 1.0);
    let j_delta_closed = j_b_closed
        * (4.0 * a / 3.0)
        * ((a.powi(3) - 1.0) / (a - 1.0))
        * (a.ln() / (a * a - 1.0)).powi(2);
    let j_delta = info_j_delta(&flow)?[(0, 0)];
    checks.push(check_rel("cir J_Delta identity", j_delta, j_delta_closed, ORACLE_TOL));

    // J <= I across the sampling-interval sweep
    let mut ordering_ok = true;
    let mut ordering_detail = String::new();
    for n in [2usize, 4, 5, 10, 20, 50, 100] {
        let grid = SamplingGrid::new(t, n)?;
        let flow = solve_flow(&model, &[alpha], &[beta], &[x0], &grid, 32)?;
        let i = info_i_delta(&flow)?[(0, 0)];
        let j = info_j_delta(&flow)?[(0, 0)];
        if j > i * (1.0 + 1e-12) {
            ordering_ok = false;
            ordering_detail = format!("violated at Delta = {}: J = {j} > I = {i}", t / n as f64);
            break;
        }
    }
    if ordering_ok {
        ordering_detail = "J_Delta <= I_Delta for Delta in [0.01, 0.5]".into();
    }
    checks.push(check_bool(
        "cir J_Delta <= I_Delta sweep",
        ordering_ok,
        ordering_detail,
    ));

    // OU at alpha = 0.7, beta = 2, Delta = 0.2
    let (alpha, beta, delta) = (0.7_f64, 2.0_f64, 0.2_f64);
    let model = builtin_ou();
    let grid = SamplingGrid::new(1.0, 5)?;
    let flow = solve_flow(&model, &[alpha], &[beta], &[1.0], &grid, 64)?;
    let a = (alpha * delta).exp();
    let mut worst_phi: f64 = 0.0;
    for phi in &flow.phi {
        worst_phi = worst_phi.max((phi[(0, 0)] - a).abs() / a);
    }
    checks.push(check_bool(
        "ou resolvent e^{alpha Delta}",
        worst_phi <= ORACLE_TOL,
        format!("worst rel err {worst_phi:.3e} (tol {ORACLE_TOL:.0e})"),
    ));

    let s_closed = beta * beta * ((2.0 * alpha * delta).exp() - 1.0) / (2.0 * alpha * delta);
    let mut worst_s: f64 = 0.0;
    for s in flow.s_mats().unwrap() {
        worst_s = worst_s.max((s[(0, 0)] - s_closed).abs() / s_closed);
    }
    checks.push(check_bool(
        "ou interval covariance",
        worst_s <= ORACLE_TOL,
        format!("worst rel err {worst_s:.3e} (tol {ORACLE_TOL:.0e})"),
    ));

    Ok(checks)
}
