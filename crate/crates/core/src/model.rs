//! Diffusion model abstraction, parameter boxes, and the built-in models.
//!
//! A model is the pair of coefficient fields of
//! `dX_t = b(alpha, X_t) dt + eps * sigma(beta, X_t) dB_t` on a state
//! space of dimension `p`, together with enough derivative information
//! for flows, contrasts and information matrices. Derivatives the user
//! does not supply are filled by central finite differences with step
//! `1e-6 * (1 + |arg|)`.
//!
//! All coefficient callbacks write into caller-provided buffers so the
//! flow integrator can run allocation-free. Matrices are row-major.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State floor used by the built-in guards. Keeps `Sigma` invertible on
/// numerically degenerate states (the admissible set is open in theory,
/// but simulated paths can touch its boundary).
pub const DELTA_POS: f64 = 1e-8;

/// Step for derivative fill-ins: `FD_STEP * (1 + |arg|)`.
pub const FD_STEP: f64 = 1e-6;

/// Callback writing `b(alpha, x)` into `out` (length `p`).
pub type DriftFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Callback writing a row-major `p x p` matrix `d b / d x`.
pub type DriftJacFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Callback writing a row-major `p x a` matrix `d b / d alpha`.
pub type DriftGradAlphaFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Callback writing a row-major `p x p` matrix `sigma(beta, x)`.
pub type SigmaFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Callback writing `b_dim` stacked row-major `p x p` matrices
/// `d Sigma / d beta_i`.
pub type SigmaGradBetaFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Callback projecting a state in place into the admissible set.
pub type GuardFn = Arc<dyn Fn(&mut [f64]) + Send + Sync>;
/// Parameter link `beta = f(alpha)`.
pub type BetaLinkFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// Scalar factor `f(beta)` of a multiplicative diffusion coefficient.
pub type ScalarLinkFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Base matrix `Sigma_0(x)` of a multiplicative diffusion coefficient.
pub type SigmaBaseFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Hyper-rectangle for a parameter vector, with projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) {
                return Err(Error::config(format!(
                    "box requires lower[{i}] < upper[{i}], got [{lo}, {hi}]"
                )));
            }
        }
        Ok(ParamBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Clamp `theta` into the box, coordinate by coordinate.
    pub fn project(&self, theta: &mut [f64]) {
        for (t, (lo, hi)) in theta.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *t = t.clamp(*lo, *hi);
        }
    }

    /// Closed-box membership.
    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (lo, hi))| *t >= *lo && *t <= *hi)
    }

    /// Concatenation, for joint (alpha, beta) searches.
    pub fn concat(&self, other: &ParamBox) -> ParamBox {
        let mut lower = self.lower.clone();
        let mut upper = self.upper.clone();
        lower.extend_from_slice(&other.lower);
        upper.extend_from_slice(&other.upper);
        ParamBox { lower, upper }
    }
}

/// Structural information linking the diffusion parameter to the drift
/// parameter or to a fixed spatial profile.
#[derive(Clone)]
pub enum LinkSpec {
    /// No structure: beta free.
    FreeBeta,
    /// `beta = f(alpha)` with `f` known (identity for the SIR model).
    BetaEqualsFAlpha { f: BetaLinkFn },
    /// `Sigma(beta, x) = f(beta) * Sigma_0(x)` with `f > 0` known.
    Multiplicative {
        f_scalar: ScalarLinkFn,
        sigma0: SigmaBaseFn,
    },
}

impl LinkSpec {
    /// Link with `beta` pinned to a known constant (the `f == const` case).
    pub fn fixed_beta(beta: Vec<f64>) -> Self {
        LinkSpec::BetaEqualsFAlpha {
            f: Arc::new(move |_alpha| beta.clone()),
        }
    }

    /// Identity link `beta = alpha`.
    pub fn identity() -> Self {
        LinkSpec::BetaEqualsFAlpha {
            f: Arc::new(|alpha| alpha.to_vec()),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LinkSpec::FreeBeta => "free_beta",
            LinkSpec::BetaEqualsFAlpha { .. } => "beta_equals_f_alpha",
            LinkSpec::Multiplicative { .. } => "multiplicative",
        }
    }
}

impl fmt::Debug for LinkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind_name())
    }
}

/// A parametric diffusion model.
///
/// Immutable after construction and safe to share across workers; every
/// method is a pure function of its arguments.
#[derive(Clone)]
pub struct ModelSpec {
    /// State dimension.
    pub p: usize,
    /// Drift parameter dimension `a`.
    pub alpha_dim: usize,
    /// Diffusion parameter dimension `b`.
    pub beta_dim: usize,
    /// Short identifier ("ou", "cir", ...) or a user-chosen name.
    pub id: String,
    /// Reporting names for the alpha coordinates.
    pub alpha_names: Vec<String>,
    /// Reporting names for the beta coordinates.
    pub beta_names: Vec<String>,
    /// Parameter structure of the diffusion coefficient.
    pub link: LinkSpec,
    drift: DriftFn,
    drift_jac_x: Option<DriftJacFn>,
    drift_grad_alpha: Option<DriftGradAlphaFn>,
    sigma: SigmaFn,
    big_sigma: Option<SigmaFn>,
    big_sigma_grad_beta: Option<SigmaGradBetaFn>,
    guard: Option<GuardFn>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("id", &self.id)
            .field("p", &self.p)
            .field("alpha_dim", &self.alpha_dim)
            .field("beta_dim", &self.beta_dim)
            .field("link", &self.link)
            .finish()
    }
}

impl ModelSpec {
    /// Minimal model: drift and diffusion coefficient only. Derivatives
    /// default to finite differences, the guard to the identity and the
    /// link to [`LinkSpec::FreeBeta`].
    pub fn new(
        id: impl Into<String>,
        p: usize,
        alpha_dim: usize,
        beta_dim: usize,
        drift: DriftFn,
        sigma: SigmaFn,
    ) -> Self {
        let id = id.into();
        ModelSpec {
            p,
            alpha_dim,
            beta_dim,
            alpha_names: (1..=alpha_dim).map(|i| format!("alpha{i}")).collect(),
            beta_names: (1..=beta_dim).map(|i| format!("beta{i}")).collect(),
            id,
            link: LinkSpec::FreeBeta,
            drift,
            drift_jac_x: None,
            drift_grad_alpha: None,
            sigma,
            big_sigma: None,
            big_sigma_grad_beta: None,
            guard: None,
        }
    }

    pub fn with_drift_jac_x(mut self, f: DriftJacFn) -> Self {
        self.drift_jac_x = Some(f);
        self
    }

    pub fn with_drift_grad_alpha(mut self, f: DriftGradAlphaFn) -> Self {
        self.drift_grad_alpha = Some(f);
        self
    }

    pub fn with_big_sigma(mut self, f: SigmaFn) -> Self {
        self.big_sigma = Some(f);
        self
    }

    pub fn with_big_sigma_grad_beta(mut self, f: SigmaGradBetaFn) -> Self {
        self.big_sigma_grad_beta = Some(f);
        self
    }

    pub fn with_guard(mut self, f: GuardFn) -> Self {
        self.guard = Some(f);
        self
    }

    pub fn with_link(mut self, link: LinkSpec) -> Self {
        self.link = link;
        self
    }

    pub fn with_param_names(
        mut self,
        alpha_names: &[&str],
        beta_names: &[&str],
    ) -> Self {
        self.alpha_names = alpha_names.iter().map(|s| s.to_string()).collect();
        self.beta_names = beta_names.iter().map(|s| s.to_string()).collect();
        self
    }

    /// `b(alpha, x)` into `out[p]`.
    #[inline]
    pub fn drift_into(&self, alpha: &[f64], x: &[f64], out: &mut [f64]) {
        (self.drift)(alpha, x, out);
    }

    /// `d b / d x` into row-major `out[p*p]`; finite differences when the
    /// model does not supply it.
    pub fn drift_jac_x_into(&self, alpha: &[f64], x: &[f64], out: &mut [f64]) {
        if let Some(jac) = &self.drift_jac_x {
            jac(alpha, x, out);
            return;
        }
        let p = self.p;
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; p];
        let mut fm = vec![0.0; p];
        for j in 0..p {
            let h = FD_STEP * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            (self.drift)(alpha, &xp, &mut fp);
            xp[j] = x[j] - h;
            (self.drift)(alpha, &xp, &mut fm);
            xp[j] = x[j];
            for i in 0..p {
                out[i * p + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    /// `d b / d alpha` into row-major `out[p*a]`; finite differences when
    /// absent.
    pub fn drift_grad_alpha_into(&self, alpha: &[f64], x: &[f64], out: &mut [f64]) {
        if let Some(grad) = &self.drift_grad_alpha {
            grad(alpha, x, out);
            return;
        }
        let (p, a) = (self.p, self.alpha_dim);
        let mut ap = alpha.to_vec();
        let mut fp = vec![0.0; p];
        let mut fm = vec![0.0; p];
        for j in 0..a {
            let h = FD_STEP * (1.0 + alpha[j].abs());
            ap[j] = alpha[j] + h;
            (self.drift)(&ap, x, &mut fp);
            ap[j] = alpha[j] - h;
            (self.drift)(&ap, x, &mut fm);
            ap[j] = alpha[j];
            for i in 0..p {
                out[i * a + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    /// `sigma(beta, x)` into row-major `out[p*p]`.
    #[inline]
    pub fn sigma_into(&self, beta: &[f64], x: &[f64], out: &mut [f64]) {
        (self.sigma)(beta, x, out);
    }

    /// `Sigma = sigma sigma^T` into row-major `out[p*p]`; computed from
    /// `sigma` when not supplied.
    pub fn big_sigma_into(&self, beta: &[f64], x: &[f64], out: &mut [f64]) {
        if let Some(bs) = &self.big_sigma {
            bs(beta, x, out);
            return;
        }
        let p = self.p;
        let mut s = vec![0.0; p * p];
        (self.sigma)(beta, x, &mut s);
        for i in 0..p {
            for j in 0..p {
                let mut acc = 0.0;
                for k in 0..p {
                    acc += s[i * p + k] * s[j * p + k];
                }
                out[i * p + j] = acc;
            }
        }
    }

    /// `d Sigma / d beta_i` for all `i`, stacked into `out[b*p*p]`;
    /// finite differences when absent.
    pub fn big_sigma_grad_beta_into(&self, beta: &[f64], x: &[f64], out: &mut [f64]) {
        if let Some(grad) = &self.big_sigma_grad_beta {
            grad(beta, x, out);
            return;
        }
        let (p, b) = (self.p, self.beta_dim);
        let pp = p * p;
        let mut bp = beta.to_vec();
        let mut fp = vec![0.0; pp];
        let mut fm = vec![0.0; pp];
        for i in 0..b {
            let h = FD_STEP * (1.0 + beta[i].abs());
            bp[i] = beta[i] + h;
            self.big_sigma_into(&bp, x, &mut fp);
            bp[i] = beta[i] - h;
            self.big_sigma_into(&bp, x, &mut fm);
            bp[i] = beta[i];
            for j in 0..pp {
                out[i * pp + j] = (fp[j] - fm[j]) / (2.0 * h);
            }
        }
    }

    /// Project a state into the admissible set (identity by default).
    #[inline]
    pub fn guard(&self, x: &mut [f64]) {
        if let Some(g) = &self.guard {
            g(x);
        }
    }

    /// Guarded copy of a state.
    pub fn guarded(&self, x: &[f64]) -> Vec<f64> {
        let mut g = x.to_vec();
        self.guard(&mut g);
        g
    }

    /// Evaluate the multiplicative base `Sigma_0(x)`, when the link is
    /// multiplicative.
    pub fn sigma_base_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.link {
            LinkSpec::Multiplicative { sigma0, .. } => {
                sigma0(x, out);
                Ok(())
            }
            _ => Err(Error::config(format!(
                "model '{}' has no multiplicative diffusion structure",
                self.id
            ))),
        }
    }

    /// Look up a built-in model by its string id.
    pub fn by_id(id: &str) -> Result<ModelSpec> {
        match id {
            "ou" => Ok(builtin_ou()),
            "cir" => Ok(builtin_cir()),
            "two_factor" => Ok(builtin_two_factor()),
            "sir" => Ok(builtin_sir()),
            other => Err(Error::config(format!(
                "unknown model id '{other}' (expected ou, cir, two_factor or sir)"
            ))),
        }
    }
}

/// One-dimensional Ornstein-Uhlenbeck model
/// `dX = alpha X dt + eps beta dB`.
pub fn builtin_ou() -> ModelSpec {
    ModelSpec::new(
        "ou",
        1,
        1,
        1,
        Arc::new(|alpha, x, out| out[0] = alpha[0] * x[0]),
        Arc::new(|beta, _x, out| out[0] = beta[0]),
    )
    .with_drift_jac_x(Arc::new(|alpha, _x, out| out[0] = alpha[0]))
    .with_drift_grad_alpha(Arc::new(|_alpha, x, out| out[0] = x[0]))
    .with_big_sigma(Arc::new(|beta, _x, out| out[0] = beta[0] * beta[0]))
    .with_big_sigma_grad_beta(Arc::new(|beta, _x, out| out[0] = 2.0 * beta[0]))
    .with_link(LinkSpec::Multiplicative {
        f_scalar: Arc::new(|beta| beta[0] * beta[0]),
        sigma0: Arc::new(|_x, out| out[0] = 1.0),
    })
    .with_param_names(&["alpha"], &["beta"])
}

/// Cox-Ingersoll-Ross model `dX = alpha X dt + eps beta sqrt(X) dB`.
///
/// The guard floors the state at [`DELTA_POS`] so that
/// `Sigma(beta, x) = beta^2 x` stays invertible.
pub fn builtin_cir() -> ModelSpec {
    ModelSpec::new(
        "cir",
        1,
        1,
        1,
        Arc::new(|alpha, x, out| out[0] = alpha[0] * x[0]),
        Arc::new(|beta, x, out| out[0] = beta[0] * x[0].max(DELTA_POS).sqrt()),
    )
    .with_drift_jac_x(Arc::new(|alpha, _x, out| out[0] = alpha[0]))
    .with_drift_grad_alpha(Arc::new(|_alpha, x, out| out[0] = x[0]))
    .with_big_sigma(Arc::new(|beta, x, out| {
        out[0] = beta[0] * beta[0] * x[0].max(DELTA_POS)
    }))
    .with_big_sigma_grad_beta(Arc::new(|beta, x, out| {
        out[0] = 2.0 * beta[0] * x[0].max(DELTA_POS)
    }))
    .with_guard(Arc::new(|x| x[0] = x[0].max(DELTA_POS)))
    .with_link(LinkSpec::Multiplicative {
        f_scalar: Arc::new(|beta| beta[0] * beta[0]),
        sigma0: Arc::new(|x, out| out[0] = x[0].max(DELTA_POS)),
    })
    .with_param_names(&["alpha"], &["beta"])
}

/// Correlation clamp for the two-factor model.
const RHO_MAX: f64 = 0.99;

/// Two-factor model on the state `(Y, R)`:
///
/// ```text
/// dY = (R + mu1) dt           + eps kappa1 dB1
/// dR = mu2 (m - R) dt         + eps kappa2 sqrt(R) (rho dB1 + sqrt(1-rho^2) dB2)
/// ```
///
/// with `alpha = (mu1, mu2, m)` and `beta = (kappa1^2, kappa2^2, rho)`.
/// Beta is parameterized by the squared volatilities so estimates line up
/// with the usual reporting columns.
pub fn builtin_two_factor() -> ModelSpec {
    ModelSpec::new(
        "two_factor",
        2,
        3,
        3,
        Arc::new(|alpha, x, out| {
            out[0] = x[1] + alpha[0];
            out[1] = alpha[1] * (alpha[2] - x[1]);
        }),
        Arc::new(|beta, x, out| {
            let k1 = beta[0].max(0.0).sqrt();
            let k2r = (beta[1].max(0.0) * x[1].max(DELTA_POS)).sqrt();
            let rho = beta[2].clamp(-RHO_MAX, RHO_MAX);
            out[0] = k1;
            out[1] = 0.0;
            out[2] = k2r * rho;
            out[3] = k2r * (1.0 - rho * rho).sqrt();
        }),
    )
    .with_drift_jac_x(Arc::new(|alpha, _x, out| {
        out[0] = 0.0;
        out[1] = 1.0;
        out[2] = 0.0;
        out[3] = -alpha[1];
    }))
    .with_drift_grad_alpha(Arc::new(|alpha, x, out| {
        // rows: dY, dR; columns: mu1, mu2, m
        out[0] = 1.0;
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = 0.0;
        out[4] = alpha[2] - x[1];
        out[5] = alpha[1];
    }))
    .with_big_sigma(Arc::new(|beta, x, out| {
        let v1 = beta[0].max(0.0);
        let v2 = beta[1].max(0.0);
        let rho = beta[2].clamp(-RHO_MAX, RHO_MAX);
        let r = x[1].max(DELTA_POS);
        let cross = rho * (v1 * v2 * r).sqrt();
        out[0] = v1;
        out[1] = cross;
        out[2] = cross;
        out[3] = v2 * r;
    }))
    .with_big_sigma_grad_beta(Arc::new(|beta, x, out| {
        let v1 = beta[0].max(DELTA_POS);
        let v2 = beta[1].max(DELTA_POS);
        let rho = beta[2].clamp(-RHO_MAX, RHO_MAX);
        let r = x[1].max(DELTA_POS);
        let root = (v1 * v2 * r).sqrt();
        // d/d v1
        out[0] = 1.0;
        out[1] = 0.5 * rho * root / v1;
        out[2] = out[1];
        out[3] = 0.0;
        // d/d v2
        out[4] = 0.0;
        out[5] = 0.5 * rho * root / v2;
        out[6] = out[5];
        out[7] = r;
        // d/d rho
        out[8] = 0.0;
        out[9] = root;
        out[10] = root;
        out[11] = 0.0;
    }))
    .with_guard(Arc::new(|x| x[1] = x[1].max(DELTA_POS)))
    .with_param_names(&["mu1", "mu2", "m"], &["kappa1_sq", "kappa2_sq", "rho"])
}

/// SIR epidemic diffusion on normalized compartments `(s, i)`:
///
/// ```text
/// ds = -lambda s i dt
/// di = (lambda s i - gamma i) dt
/// ```
///
/// with `Sigma = [[lambda s i, -lambda s i], [-lambda s i, lambda s i + gamma i]]`,
/// `alpha = beta = (lambda, gamma)` (identity link) and noise scale
/// `eps = 1/sqrt(N)`. The guard clamps both compartments into
/// `[DELTA_POS, 1]`.
pub fn builtin_sir() -> ModelSpec {
    let guard_si = |x: &[f64]| {
        (
            x[0].clamp(DELTA_POS, 1.0),
            x[1].clamp(DELTA_POS, 1.0),
        )
    };
    ModelSpec::new(
        "sir",
        2,
        2,
        2,
        Arc::new(|alpha, x, out| {
            let inf = alpha[0] * x[0] * x[1];
            out[0] = -inf;
            out[1] = inf - alpha[1] * x[1];
        }),
        Arc::new(move |beta, x, out| {
            let (s, i) = guard_si(x);
            let root_inf = (beta[0] * s * i).sqrt();
            let root_rec = (beta[1] * i).sqrt();
            out[0] = root_inf;
            out[1] = 0.0;
            out[2] = -root_inf;
            out[3] = root_rec;
        }),
    )
    .with_drift_jac_x(Arc::new(|alpha, x, out| {
        out[0] = -alpha[0] * x[1];
        out[1] = -alpha[0] * x[0];
        out[2] = alpha[0] * x[1];
        out[3] = alpha[0] * x[0] - alpha[1];
    }))
    .with_drift_grad_alpha(Arc::new(|_alpha, x, out| {
        out[0] = -x[0] * x[1];
        out[1] = 0.0;
        out[2] = x[0] * x[1];
        out[3] = -x[1];
    }))
    .with_big_sigma(Arc::new(move |beta, x, out| {
        let (s, i) = guard_si(x);
        let inf = beta[0] * s * i;
        out[0] = inf;
        out[1] = -inf;
        out[2] = -inf;
        out[3] = inf + beta[1] * i;
    }))
    .with_big_sigma_grad_beta(Arc::new(move |_beta, x, out| {
        let (s, i) = guard_si(x);
        let si = s * i;
        out[0] = si;
        out[1] = -si;
        out[2] = -si;
        out[3] = si;
        out[4] = 0.0;
        out[5] = 0.0;
        out[6] = 0.0;
        out[7] = i;
    }))
    .with_guard(Arc::new(|x| {
        x[0] = x[0].clamp(DELTA_POS, 1.0);
        x[1] = x[1].clamp(DELTA_POS, 1.0);
    }))
    .with_link(LinkSpec::identity())
    .with_param_names(&["lambda", "gamma"], &["lambda", "gamma"])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn builtins() -> Vec<ModelSpec> {
        vec![builtin_ou(), builtin_cir(), builtin_two_factor(), builtin_sir()]
    }

    fn random_state(model: &ModelSpec, rng: &mut impl Rng) -> Vec<f64> {
        let raw: Vec<f64> = match model.id.as_str() {
            "sir" => vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            _ => (0..model.p).map(|_| rng.gen_range(0.05..3.0)).collect(),
        };
        model.guarded(&raw)
    }

    fn random_params(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(0.1..2.0)).collect()
    }

    #[test]
    fn ou_definitions() {
        let m = builtin_ou();
        let mut out = [0.0];
        m.drift_into(&[0.5], &[2.0], &mut out);
        assert_relative_eq!(out[0], 1.0);
        m.big_sigma_into(&[2.0], &[7.0], &mut out);
        assert_relative_eq!(out[0], 4.0);
        m.drift_jac_x_into(&[0.5], &[2.0], &mut out);
        assert_relative_eq!(out[0], 0.5);
    }

    #[test]
    fn cir_definitions() {
        let m = builtin_cir();
        let mut out = [0.0];
        m.big_sigma_into(&[1.0], &[4.0], &mut out);
        assert_relative_eq!(out[0], 4.0);
        m.drift_into(&[1.0], &[3.0], &mut out);
        assert_relative_eq!(out[0], 3.0);
        let guarded = m.guarded(&[-0.003]);
        assert_relative_eq!(guarded[0], DELTA_POS);
    }

    #[test]
    fn two_factor_sigma_matrix() {
        let m = builtin_two_factor();
        let mut out = [0.0; 4];
        m.big_sigma_into(&[1.0, 1.0, 0.3], &[0.0, 1.5], &mut out);
        let cross = 0.3 * 1.5f64.sqrt();
        assert_relative_eq!(out[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(out[1], cross, max_relative = 1e-12);
        assert_relative_eq!(out[2], cross, max_relative = 1e-12);
        assert_relative_eq!(out[3], 1.5, max_relative = 1e-12);

        // zero correlation gives a diagonal matrix
        m.big_sigma_into(&[1.0, 1.0, 0.0], &[0.0, 1.5], &mut out);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn two_factor_drift() {
        let m = builtin_two_factor();
        let mut out = [0.0; 2];
        m.drift_into(&[1.0, 1.0, 1.0], &[0.0, 1.5], &mut out);
        assert_relative_eq!(out[0], 2.5);
        assert_relative_eq!(out[1], -0.5);
    }

    #[test]
    fn sir_drift_and_sigma_rows() {
        let m = builtin_sir();
        let mut out = [0.0; 2];
        m.drift_into(&[0.4, 1.0 / 3.0], &[0.99, 0.01], &mut out);
        assert_relative_eq!(out[0], -0.00396, max_relative = 1e-12);
        assert_relative_eq!(out[1], 0.00396 - 0.01 / 3.0, max_relative = 1e-12);

        let mut sig = [0.0; 4];
        m.big_sigma_into(&[0.4, 1.0 / 3.0], &[0.5, 0.2], &mut sig);
        // first row is (lambda s i, -lambda s i)
        assert_relative_eq!(sig[0] + sig[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn sir_sigma_positive_definite_on_guarded_extinct_state() {
        let m = builtin_sir();
        let g = m.guarded(&[0.4, 0.0]);
        let mut sig = [0.0; 4];
        m.big_sigma_into(&[0.4, 1.0 / 3.0], &g, &mut sig);
        let mat = DMatrix::from_row_slice(2, 2, &sig);
        assert!(nalgebra::Cholesky::new(mat).is_some());
    }

    #[test]
    fn sigma_squares_to_big_sigma_and_cholesky_succeeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for model in builtins() {
            let p = model.p;
            let mut sig = vec![0.0; p * p];
            let mut big = vec![0.0; p * p];
            for _ in 0..1000 {
                let x = random_state(&model, &mut rng);
                let mut beta = random_params(model.beta_dim, &mut rng);
                if model.id == "two_factor" {
                    beta[2] = rng.gen_range(-0.9..0.9);
                }
                model.sigma_into(&beta, &x, &mut sig);
                model.big_sigma_into(&beta, &x, &mut big);
                for i in 0..p {
                    for j in 0..p {
                        let mut acc = 0.0;
                        for k in 0..p {
                            acc += sig[i * p + k] * sig[j * p + k];
                        }
                        assert!(
                            (acc - big[i * p + j]).abs() <= 1e-12 * (1.0 + acc.abs()),
                            "{}: sigma sigma^T != big_sigma",
                            model.id
                        );
                    }
                }
                let mat = DMatrix::from_row_slice(p, p, &big);
                assert!(
                    nalgebra::Cholesky::new(mat).is_some(),
                    "{}: big_sigma not positive definite at x={x:?} beta={beta:?}",
                    model.id
                );
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for model in builtins() {
            let p = model.p;
            let a = model.alpha_dim;
            let stripped = ModelSpec::new(
                model.id.clone(),
                p,
                a,
                model.beta_dim,
                model.drift.clone(),
                model.sigma.clone(),
            );
            for _ in 0..200 {
                let x = random_state(&model, &mut rng);
                let alpha = random_params(a, &mut rng);
                let mut beta = random_params(model.beta_dim, &mut rng);
                if model.id == "two_factor" {
                    beta[2] = rng.gen_range(-0.9..0.9);
                }

                let mut jac = vec![0.0; p * p];
                let mut jac_fd = vec![0.0; p * p];
                model.drift_jac_x_into(&alpha, &x, &mut jac);
                stripped.drift_jac_x_into(&alpha, &x, &mut jac_fd);
                for (u, v) in jac.iter().zip(&jac_fd) {
                    assert!((u - v).abs() <= 1e-5 * (1.0 + u.abs()), "{} jac", model.id);
                }

                let mut ga = vec![0.0; p * a];
                let mut ga_fd = vec![0.0; p * a];
                model.drift_grad_alpha_into(&alpha, &x, &mut ga);
                stripped.drift_grad_alpha_into(&alpha, &x, &mut ga_fd);
                for (u, v) in ga.iter().zip(&ga_fd) {
                    assert!((u - v).abs() <= 1e-5 * (1.0 + u.abs()), "{} grad_a", model.id);
                }

                let bb = model.beta_dim * p * p;
                let mut gs = vec![0.0; bb];
                let mut gs_fd = vec![0.0; bb];
                model.big_sigma_grad_beta_into(&beta, &x, &mut gs);
                // finite-difference route through sigma sigma^T
                let fd_model = stripped.clone();
                fd_model.big_sigma_grad_beta_into(&beta, &x, &mut gs_fd);
                for (u, v) in gs.iter().zip(&gs_fd) {
                    assert!(
                        (u - v).abs() <= 1e-4 * (1.0 + u.abs()),
                        "{} grad_sigma: {u} vs {v}",
                        model.id
                    );
                }
            }
        }
    }

    #[test]
    fn multiplicative_links_factorize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for model in [builtin_ou(), builtin_cir()] {
            let LinkSpec::Multiplicative { f_scalar, sigma0 } = &model.link else {
                panic!("expected multiplicative link");
            };
            for _ in 0..200 {
                let x = random_state(&model, &mut rng);
                let beta = random_params(1, &mut rng);
                let mut base = vec![0.0; 1];
                sigma0(&x, &mut base);
                let mut big = vec![0.0; 1];
                model.big_sigma_into(&beta, &x, &mut big);
                assert!((big[0] - f_scalar(&beta) * base[0]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn registry_resolves_ids() {
        for id in ["ou", "cir", "two_factor", "sir"] {
            assert_eq!(ModelSpec::by_id(id).unwrap().id, id);
        }
        assert!(ModelSpec::by_id("nope").is_err());
    }

    #[test]
    fn param_box_validation_and_projection() {
        assert!(ParamBox::new(vec![0.0], vec![0.0]).is_err());
        let b = ParamBox::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let mut theta = vec![2.0, -3.0];
        b.project(&mut theta);
        assert_eq!(theta, vec![1.0, -1.0]);
        assert!(b.contains(&theta));
    }

    proptest! {
        #[test]
        fn guard_is_idempotent(raw in proptest::collection::vec(-2.0f64..2.0, 2)) {
            for model in builtins() {
                let x: Vec<f64> = raw.iter().copied().take(model.p).collect();
                let once = model.guarded(&x);
                let twice = model.guarded(&once);
                prop_assert_eq!(once, twice);
            }
        }
    }
}
