//! Deterministic skeleton of the diffusion: the ODE solution `x_alpha`,
//! the resolvent `Phi_alpha(t_k, t_{k-1})` of the linearized flow, the
//! per-interval covariance `S_k`, and the parameter sensitivities feeding
//! the `D_k` matrices.
//!
//! Everything is integrated with a fixed-step classical RK4 scheme on the
//! joint system
//!
//! ```text
//! dx/dt    = b(alpha, x)
//! dPsi/dt  = (db/dx) Psi                      Psi(t_{k-1}) = I
//! dV/dt    = (db/dx) V + V (db/dx)^T + Sigma  V(t_{k-1}) = 0
//! dW/dt    = (db/dx) W + db/dalpha            W(0) = 0
//! ```
//!
//! so that `Phi_k = Psi(t_k)`, `S_k = V(t_k)/Delta` (the Lyapunov
//! reformulation of the covariance integral, symmetrized at every step)
//! and `W = dx/dalpha`. The resolvent sensitivity `dPhi/dalpha` is filled
//! by central differences of the resolvent in `alpha`, which avoids
//! requiring second derivatives of the drift.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{LinkSpec, ModelSpec};

/// Default number of internal RK4 steps per sampling interval.
pub const DEFAULT_SUBSTEPS: usize = 64;

/// Divergence threshold for the flow state.
const STATE_CAP: f64 = 1e12;

/// Step used for the resolvent sensitivity differences:
/// `PHI_FD_STEP * (1 + |alpha_i|)`.
const PHI_FD_STEP: f64 = 1e-5;

/// Regular observation grid `t_k = k Delta`, `k = 0..n`, `Delta = T/n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingGrid {
    t_horizon: f64,
    n: usize,
}

impl SamplingGrid {
    /// A grid needs `n >= 1` and a positive horizon. Estimation further
    /// requires `n >= 2`, which [`crate::estimate::minimize`] checks.
    pub fn new(t_horizon: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("grid needs at least one interval"));
        }
        if !(t_horizon > 0.0) || !t_horizon.is_finite() {
            return Err(Error::config(format!(
                "grid horizon must be positive and finite, got {t_horizon}"
            )));
        }
        Ok(SamplingGrid { t_horizon, n })
    }

    pub fn t_horizon(&self) -> f64 {
        self.t_horizon
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        self.t_horizon / self.n as f64
    }

    /// Observation times `t_0, ..., t_n`.
    pub fn times(&self) -> Vec<f64> {
        let d = self.delta();
        (0..=self.n).map(|k| k as f64 * d).collect()
    }
}

/// Which covariance (if any) to propagate alongside the skeleton.
#[derive(Clone, Copy)]
pub enum CovSpec<'a> {
    /// Skip `S_k` entirely (conditional least squares only needs `N_k`).
    None,
    /// `Sigma(beta, x)` for a concrete diffusion parameter.
    Beta(&'a [f64]),
    /// The multiplicative base `Sigma_0(x)`; gives the `S_k` with the
    /// scalar factor omitted.
    MultiplicativeBase,
}

/// Deterministic per-interval quantities of the flow at one `alpha`.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub grid: SamplingGrid,
    /// `x_alpha(t_k)` for `k = 0..n`.
    pub x: Vec<DVector<f64>>,
    /// `Phi_alpha(t_k, t_{k-1})` for `k = 1..n`.
    pub phi: Vec<DMatrix<f64>>,
    /// `S_k` for `k = 1..n`; `None` when the covariance was skipped.
    pub s_mats: Option<Vec<DMatrix<f64>>>,
    /// `dx_alpha(t_k)/dalpha` (`p x a`) for `k = 0..n`.
    pub dx_dalpha: Option<Vec<DMatrix<f64>>>,
    /// `dPhi_alpha(t_k, t_{k-1})/dalpha_i`, indexed `[k-1][i]`.
    pub dphi_dalpha: Option<Vec<Vec<DMatrix<f64>>>>,
}

impl FlowSolution {
    pub fn p(&self) -> usize {
        self.x[0].len()
    }

    /// `S_k` matrices or an error if the flow was solved without them.
    pub fn s_mats(&self) -> Result<&[DMatrix<f64>]> {
        self.s_mats
            .as_deref()
            .ok_or_else(|| Error::config("flow was solved without S_k matrices"))
    }
}

/// Substep mesh of the skeleton, for quadrature along the flow.
pub(crate) struct FlowMesh {
    pub p: usize,
    /// Node states, `(n * substeps + 1)` rows of length `p`.
    pub states: Vec<f64>,
    /// Substep width.
    pub h: f64,
}

impl FlowMesh {
    pub fn node(&self, j: usize) -> &[f64] {
        &self.states[j * self.p..(j + 1) * self.p]
    }
}

/// Offsets of the flat joint state.
struct Layout {
    p: usize,
    psi: usize,
    v: Option<usize>,
    sens: Option<usize>,
    a: usize,
    len: usize,
}

impl Layout {
    fn new(p: usize, a: usize, want_v: bool, want_sens: bool) -> Layout {
        let psi = p;
        let mut len = p + p * p;
        let v = want_v.then(|| {
            let off = len;
            len += p * p;
            off
        });
        let sens = want_sens.then(|| {
            let off = len;
            len += p * a;
            off
        });
        Layout { p, psi, v, sens, a, len }
    }
}

/// Evaluates the joint right-hand side into `dy`, with scratch buffers.
struct Rhs<'m> {
    model: &'m ModelSpec,
    alpha: &'m [f64],
    cov_beta: Option<Vec<f64>>,
    cov_base: bool,
    layout: Layout,
    jac: Vec<f64>,
    sig: Vec<f64>,
    gx: Vec<f64>,
    grad_a: Vec<f64>,
}

impl<'m> Rhs<'m> {
    fn new(
        model: &'m ModelSpec,
        alpha: &'m [f64],
        cov: CovSpec<'_>,
        want_sens: bool,
    ) -> Result<Rhs<'m>> {
        let p = model.p;
        let (cov_beta, cov_base, want_v) = match cov {
            CovSpec::None => (None, false, false),
            CovSpec::Beta(beta) => {
                if beta.len() != model.beta_dim {
                    return Err(Error::dim(format!(
                        "beta has length {}, model '{}' expects {}",
                        beta.len(),
                        model.id,
                        model.beta_dim
                    )));
                }
                (Some(beta.to_vec()), false, true)
            }
            CovSpec::MultiplicativeBase => {
                if !matches!(model.link, LinkSpec::Multiplicative { .. }) {
                    return Err(Error::config(format!(
                        "model '{}' has no multiplicative diffusion structure",
                        model.id
                    )));
                }
                (None, true, true)
            }
        };
        let layout = Layout::new(p, model.alpha_dim, want_v, want_sens);
        Ok(Rhs {
            model,
            alpha,
            cov_beta,
            cov_base,
            layout,
            jac: vec![0.0; p * p],
            sig: vec![0.0; p * p],
            gx: vec![0.0; p],
            grad_a: vec![0.0; p * model.alpha_dim],
        })
    }

    fn eval(&mut self, y: &[f64], dy: &mut [f64]) {
        let p = self.layout.p;
        let x = &y[..p];
        self.model.drift_into(self.alpha, x, &mut dy[..p]);
        self.model.drift_jac_x_into(self.alpha, x, &mut self.jac);

        // dPsi = J Psi
        let psi = &y[self.layout.psi..self.layout.psi + p * p];
        mat_mul(p, &self.jac, psi, &mut dy[self.layout.psi..self.layout.psi + p * p]);

        if let Some(off) = self.layout.v {
            self.gx.copy_from_slice(x);
            self.model.guard(&mut self.gx);
            if self.cov_base {
                // only reached for multiplicative links
                self.model.sigma_base_into(&self.gx, &mut self.sig).unwrap();
            } else {
                let beta = self.cov_beta.as_deref().unwrap();
                self.model.big_sigma_into(beta, &self.gx, &mut self.sig);
            }
            let v = &y[off..off + p * p];
            let dv = &mut dy[off..off + p * p];
            for i in 0..p {
                for j in 0..p {
                    let mut acc = self.sig[i * p + j];
                    for k in 0..p {
                        acc += self.jac[i * p + k] * v[k * p + j]
                            + v[i * p + k] * self.jac[j * p + k];
                    }
                    dv[i * p + j] = acc;
                }
            }
        }

        if let Some(off) = self.layout.sens {
            let a = self.layout.a;
            self.model.drift_grad_alpha_into(self.alpha, x, &mut self.grad_a);
            let w = &y[off..off + p * a];
            let dw = &mut dy[off..off + p * a];
            for i in 0..p {
                for j in 0..a {
                    let mut acc = self.grad_a[i * a + j];
                    for k in 0..p {
                        acc += self.jac[i * p + k] * w[k * a + j];
                    }
                    dw[i * a + j] = acc;
                }
            }
        }
    }
}

#[inline]
fn mat_mul(p: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..p {
        for j in 0..p {
            let mut acc = 0.0;
            for k in 0..p {
                acc += a[i * p + k] * b[k * p + j];
            }
            out[i * p + j] = acc;
        }
    }
}

/// RK4 working buffers, reused across steps.
struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    yt: Vec<f64>,
}

impl Rk4 {
    fn new(len: usize) -> Rk4 {
        Rk4 {
            k1: vec![0.0; len],
            k2: vec![0.0; len],
            k3: vec![0.0; len],
            k4: vec![0.0; len],
            yt: vec![0.0; len],
        }
    }

    fn step(&mut self, rhs: &mut Rhs, y: &mut [f64], h: f64) {
        let len = y.len();
        rhs.eval(y, &mut self.k1);
        for i in 0..len {
            self.yt[i] = y[i] + 0.5 * h * self.k1[i];
        }
        rhs.eval(&self.yt, &mut self.k2);
        for i in 0..len {
            self.yt[i] = y[i] + 0.5 * h * self.k2[i];
        }
        rhs.eval(&self.yt, &mut self.k3);
        for i in 0..len {
            self.yt[i] = y[i] + h * self.k3[i];
        }
        rhs.eval(&self.yt, &mut self.k4);
        let w = h / 6.0;
        for i in 0..len {
            y[i] += w * (self.k1[i] + 2.0 * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
    }
}

pub(crate) struct FlowOutput {
    pub solution: FlowSolution,
    pub mesh: Option<FlowMesh>,
}

pub(crate) fn solve_flow_core(
    model: &ModelSpec,
    alpha: &[f64],
    cov: CovSpec<'_>,
    x0: &[f64],
    grid: &SamplingGrid,
    substeps: usize,
    sensitivities: bool,
    record_mesh: bool,
) -> Result<FlowOutput> {
    let p = model.p;
    let a = model.alpha_dim;
    if alpha.len() != a {
        return Err(Error::dim(format!(
            "alpha has length {}, model '{}' expects {}",
            alpha.len(),
            model.id,
            a
        )));
    }
    if x0.len() != p {
        return Err(Error::dim(format!(
            "x0 has length {}, model '{}' expects {}",
            x0.len(),
            model.id,
            p
        )));
    }
    if substeps == 0 {
        return Err(Error::config("substeps must be at least 1"));
    }

    let mut rhs = Rhs::new(model, alpha, cov, sensitivities)?;
    let want_v = rhs.layout.v.is_some();
    let n = grid.n();
    let delta = grid.delta();
    let h = delta / substeps as f64;

    let mut y = vec![0.0; rhs.layout.len];
    y[..p].copy_from_slice(x0);
    model.guard(&mut y[..p]);

    let mut rk4 = Rk4::new(rhs.layout.len);
    let mut x_out = Vec::with_capacity(n + 1);
    let mut phi_out = Vec::with_capacity(n);
    let mut s_out = want_v.then(|| Vec::with_capacity(n));
    let mut sens_out = sensitivities.then(|| Vec::with_capacity(n + 1));
    let mut mesh = record_mesh.then(|| FlowMesh {
        p,
        states: Vec::with_capacity((n * substeps + 1) * p),
        h,
    });

    x_out.push(DVector::from_row_slice(&y[..p]));
    if let Some(sens) = sens_out.as_mut() {
        sens.push(DMatrix::zeros(p, a));
    }
    if let Some(m) = mesh.as_mut() {
        m.states.extend_from_slice(&y[..p]);
    }

    for _k in 1..=n {
        // reset per-interval blocks
        let psi = &mut y[rhs.layout.psi..rhs.layout.psi + p * p];
        psi.fill(0.0);
        for i in 0..p {
            psi[i * p + i] = 1.0;
        }
        if let Some(off) = rhs.layout.v {
            y[off..off + p * p].fill(0.0);
        }

        for _s in 0..substeps {
            rk4.step(&mut rhs, &mut y, h);
            if let Some(off) = rhs.layout.v {
                // keep V symmetric against roundoff drift
                for i in 0..p {
                    for j in (i + 1)..p {
                        let avg = 0.5 * (y[off + i * p + j] + y[off + j * p + i]);
                        y[off + i * p + j] = avg;
                        y[off + j * p + i] = avg;
                    }
                }
            }
            if let Some(m) = mesh.as_mut() {
                m.states.extend_from_slice(&y[..p]);
            }
        }

        if !linalg::all_finite(&y) || y[..p].iter().any(|v| v.abs() > STATE_CAP) {
            return Err(Error::NonFiniteState);
        }

        x_out.push(DVector::from_row_slice(&y[..p]));
        phi_out.push(DMatrix::from_row_slice(
            p,
            p,
            &y[rhs.layout.psi..rhs.layout.psi + p * p],
        ));
        if let Some(off) = rhs.layout.v {
            let mut s = DMatrix::from_row_slice(p, p, &y[off..off + p * p]);
            s /= delta;
            ensure_positive_definite(&mut s)?;
            s_out.as_mut().unwrap().push(s);
        }
        if let Some(off) = rhs.layout.sens {
            sens_out
                .as_mut()
                .unwrap()
                .push(DMatrix::from_row_slice(p, a, &y[off..off + p * a]));
        }
    }

    let dphi = if sensitivities {
        Some(resolvent_sensitivity(model, alpha, x0, grid, substeps)?)
    } else {
        None
    };

    Ok(FlowOutput {
        solution: FlowSolution {
            grid: *grid,
            x: x_out,
            phi: phi_out,
            s_mats: s_out,
            dx_dalpha: sens_out,
            dphi_dalpha: dphi,
        },
        mesh,
    })
}

/// Cholesky check with a single ridge repair applied in place.
fn ensure_positive_definite(s: &mut DMatrix<f64>) -> Result<()> {
    if nalgebra::Cholesky::new(s.clone()).is_some() {
        return Ok(());
    }
    let p = s.nrows();
    let ridge = linalg::RIDGE_SCALE * s.trace().abs() / p as f64;
    for i in 0..p {
        s[(i, i)] += ridge;
    }
    if nalgebra::Cholesky::new(s.clone()).is_some() {
        Ok(())
    } else {
        Err(Error::SingularCovariance)
    }
}

/// `dPhi(t_k, t_{k-1})/dalpha_i` by central differences of the resolvent.
fn resolvent_sensitivity(
    model: &ModelSpec,
    alpha: &[f64],
    x0: &[f64],
    grid: &SamplingGrid,
    substeps: usize,
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let a = model.alpha_dim;
    let n = grid.n();
    let mut out = vec![Vec::with_capacity(a); n];
    let mut alpha_shift = alpha.to_vec();
    for i in 0..a {
        let h = PHI_FD_STEP * (1.0 + alpha[i].abs());
        alpha_shift[i] = alpha[i] + h;
        let plus = solve_flow_core(
            model, &alpha_shift, CovSpec::None, x0, grid, substeps, false, false,
        )?;
        alpha_shift[i] = alpha[i] - h;
        let minus = solve_flow_core(
            model, &alpha_shift, CovSpec::None, x0, grid, substeps, false, false,
        )?;
        alpha_shift[i] = alpha[i];
        for k in 0..n {
            let d = (&plus.solution.phi[k] - &minus.solution.phi[k]) / (2.0 * h);
            out[k].push(d);
        }
    }
    Ok(out)
}

/// Full flow solve: skeleton, resolvent, `S_k` for the given `beta`, and
/// both parameter sensitivities.
pub fn solve_flow(
    model: &ModelSpec,
    alpha: &[f64],
    beta: &[f64],
    x0: &[f64],
    grid: &SamplingGrid,
    substeps: usize,
) -> Result<FlowSolution> {
    solve_flow_core(
        model,
        alpha,
        CovSpec::Beta(beta),
        x0,
        grid,
        substeps,
        true,
        false,
    )
    .map(|o| o.solution)
}

/// Flow solve with an explicit covariance choice and optional
/// sensitivities; the workhorse behind contrast evaluation.
pub fn solve_flow_with(
    model: &ModelSpec,
    alpha: &[f64],
    cov: CovSpec<'_>,
    x0: &[f64],
    grid: &SamplingGrid,
    substeps: usize,
    sensitivities: bool,
) -> Result<FlowSolution> {
    solve_flow_core(model, alpha, cov, x0, grid, substeps, sensitivities, false)
        .map(|o| o.solution)
}

/// The `p x a` matrices
/// `D_k = (-dx(t_k)/dalpha + Phi_k dx(t_{k-1})/dalpha) / Delta`.
pub fn d_matrices(flow: &FlowSolution) -> Result<Vec<DMatrix<f64>>> {
    let sens = flow
        .dx_dalpha
        .as_ref()
        .ok_or_else(|| Error::config("flow was solved without sensitivities"))?;
    let delta = flow.grid.delta();
    let n = flow.grid.n();
    let mut out = Vec::with_capacity(n);
    for k in 1..=n {
        let d = (&flow.phi[k - 1] * &sens[k - 1] - &sens[k]) / delta;
        out.push(d);
    }
    Ok(out)
}

/// Skeleton endpoint and resolvent over a single interval of the given
/// duration, starting from an arbitrary state. Because the drift fields
/// are autonomous this is exactly `Phi_alpha(t0 + duration, t0)` for a
/// flow passing through `x_start` at `t0`; the semigroup checks build on
/// this.
pub fn resolvent_segment(
    model: &ModelSpec,
    alpha: &[f64],
    x_start: &[f64],
    duration: f64,
    substeps: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let grid = SamplingGrid::new(duration, 1)?;
    let out = solve_flow_core(
        model,
        alpha,
        CovSpec::None,
        x_start,
        &grid,
        substeps,
        false,
        false,
    )?;
    Ok((out.solution.x[1].clone(), out.solution.phi[0].clone()))
}
