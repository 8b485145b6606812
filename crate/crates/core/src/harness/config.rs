//! Experiment configuration: JSON schema and validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LinkSpec, ModelSpec, ParamBox};

/// Estimators the harness can run. `mle` is the jump-process baseline and
/// needs the full event record, so it is only valid for SIR configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    /// Jump-process MLE from all events (SIR only).
    Mle,
    /// Conditional least squares (beta unknown).
    Cls,
    /// Weighted contrast with `beta` pinned to the config's `beta0`.
    WeightedFixed,
    /// Weighted contrast through the model's `beta = f(alpha)` link.
    WeightedLink,
    /// Weighted contrast with the multiplicative scalar factored out.
    WeightedMultiplicative,
    /// Joint small-interval contrast.
    SmallDelta,
    /// Gaussian loglikelihood of the approximating process.
    GaussianLoglik,
}

impl EstimatorId {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorId::Mle => "mle",
            EstimatorId::Cls => "cls",
            EstimatorId::WeightedFixed => "weighted_fixed",
            EstimatorId::WeightedLink => "weighted_link",
            EstimatorId::WeightedMultiplicative => "weighted_multiplicative",
            EstimatorId::SmallDelta => "small_delta",
            EstimatorId::GaussianLoglik => "gaussian_loglik",
        }
    }

    /// Plot label matching the figure legend of the study this harness
    /// reproduces (0: MLE, 1: least squares, 2: weighted with known
    /// diffusion, 3: weighted through the link, 4: small-interval).
    pub fn plot_label(&self) -> Option<u8> {
        match self {
            EstimatorId::Mle => Some(0),
            EstimatorId::Cls => Some(1),
            EstimatorId::WeightedFixed | EstimatorId::WeightedMultiplicative => Some(2),
            EstimatorId::WeightedLink => Some(3),
            EstimatorId::SmallDelta => Some(4),
            EstimatorId::GaussianLoglik => None,
        }
    }
}

/// Population description for epidemic configs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SirPopulation {
    /// Population size `N`; the noise scale is `1/sqrt(N)`.
    pub n_total: u64,
    /// Initially infected count `m`.
    pub m0: u64,
}

fn default_emergence_threshold() -> f64 {
    0.10
}
fn default_sim_substeps() -> usize {
    crate::simulate::DEFAULT_SIM_SUBSTEPS
}
fn default_flow_substeps() -> usize {
    16
}
fn default_max_starts() -> usize {
    27
}

/// A Monte Carlo experiment: model, truth, grids, estimators, replicate
/// plan and optimizer knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Built-in model id: "ou", "cir", "two_factor" or "sir".
    pub model: String,
    /// True drift parameters used by the simulator.
    pub alpha0: Vec<f64>,
    /// True diffusion parameters.
    pub beta0: Vec<f64>,
    /// Initial state; for SIR it defaults to `(1 - m/N, m/N)`.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Noise scale for SDE models (SIR derives it from the population).
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Population for SIR configs (replaces `epsilon`).
    #[serde(default)]
    pub population: Option<SirPopulation>,
    pub t_horizon: f64,
    /// Observation counts to study, e.g. `[10, 20, 50, 100]`. For SDE
    /// models each must divide the largest so one simulated path serves
    /// every grid.
    pub grid_sizes: Vec<usize>,
    pub estimators: Vec<EstimatorId>,
    pub replicates: usize,
    pub base_seed: u64,
    /// Output directory for `report`; the CLI `--out` flag overrides it.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Keep only epidemics whose ever-infected count reaches the
    /// threshold (SIR).
    #[serde(default)]
    pub emergence_filter: bool,
    #[serde(default = "default_emergence_threshold")]
    pub emergence_threshold: f64,
    pub alpha_box: ParamBox,
    #[serde(default)]
    pub beta_box: Option<ParamBox>,
    /// Euler substeps per sampling interval for the simulator.
    #[serde(default = "default_sim_substeps")]
    pub sim_substeps: usize,
    /// RK4 substeps per sampling interval for estimation flows.
    #[serde(default = "default_flow_substeps")]
    pub flow_substeps: usize,
    #[serde(default = "default_max_starts")]
    pub max_starts: usize,
    /// Two-phase search budget (see `MinimizeOptions::screen_iters`).
    #[serde(default)]
    pub screen_iters: Option<usize>,
    /// Nelder-Mead iteration cap per start; 0 means `400 * dimension`.
    #[serde(default)]
    pub max_iters: usize,
    /// Free-form provenance note carried into `summary.json`.
    #[serde(default)]
    pub notes: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn is_sir(&self) -> bool {
        self.model == "sir"
    }

    /// Effective noise scale: explicit for SDE models, `1/sqrt(N)` for
    /// SIR.
    pub fn effective_epsilon(&self) -> Result<f64> {
        if let Some(pop) = &self.population {
            Ok(1.0 / (pop.n_total as f64).sqrt())
        } else {
            self.epsilon
                .ok_or_else(|| Error::config("config needs either epsilon or population"))
        }
    }

    /// Initial state, derived from the population for SIR when absent.
    pub fn effective_x0(&self) -> Result<Vec<f64>> {
        if let Some(x0) = &self.x0 {
            return Ok(x0.clone());
        }
        if let Some(pop) = &self.population {
            let m = pop.m0 as f64 / pop.n_total as f64;
            return Ok(vec![1.0 - m, m]);
        }
        Err(Error::config("config needs x0 (or a population for sir)"))
    }

    /// Resolve the model and check every cross-field invariant.
    pub fn validate(&self) -> Result<ModelSpec> {
        let model = ModelSpec::by_id(&self.model)?;
        if self.alpha0.len() != model.alpha_dim {
            return Err(Error::config(format!(
                "alpha0 has length {}, model '{}' expects {}",
                self.alpha0.len(),
                self.model,
                model.alpha_dim
            )));
        }
        if self.beta0.len() != model.beta_dim {
            return Err(Error::config(format!(
                "beta0 has length {}, model '{}' expects {}",
                self.beta0.len(),
                self.model,
                model.beta_dim
            )));
        }
        if self.replicates == 0 {
            return Err(Error::config("replicates must be at least 1"));
        }
        if self.estimators.is_empty() {
            return Err(Error::config("estimator list is empty"));
        }
        if self.grid_sizes.is_empty() {
            return Err(Error::config("grid_sizes is empty"));
        }
        for &n in &self.grid_sizes {
            if n < 2 {
                return Err(Error::config(format!(
                    "grid size {n} is too small (estimation needs n >= 2)"
                )));
            }
        }
        if !(self.t_horizon > 0.0) {
            return Err(Error::config("t_horizon must be positive"));
        }

        if self.is_sir() {
            let pop = self
                .population
                .ok_or_else(|| Error::config("sir configs need a population block"))?;
            if pop.m0 == 0 || pop.m0 >= pop.n_total {
                return Err(Error::config("population needs 0 < m0 < n_total"));
            }
        } else {
            if self.population.is_some() {
                return Err(Error::config(format!(
                    "model '{}' does not take a population; use epsilon",
                    self.model
                )));
            }
            let eps = self.effective_epsilon()?;
            if !(eps > 0.0) {
                return Err(Error::config("epsilon must be positive"));
            }
            let n_max = *self.grid_sizes.iter().max().unwrap();
            for &n in &self.grid_sizes {
                if n_max % n != 0 {
                    return Err(Error::config(format!(
                        "grid size {n} does not divide the largest ({n_max}); \
                         one simulated path must serve every grid"
                    )));
                }
            }
        }

        let x0 = self.effective_x0()?;
        if x0.len() != model.p {
            return Err(Error::config(format!(
                "x0 has length {}, model '{}' expects {}",
                x0.len(),
                self.model,
                model.p
            )));
        }

        if self.alpha_box.dim() != model.alpha_dim {
            return Err(Error::config("alpha_box dimension does not match the model"));
        }
        if !self.alpha_box.contains(&self.alpha0) {
            return Err(Error::config("alpha_box does not contain alpha0"));
        }
        if let Some(bb) = &self.beta_box {
            if bb.dim() != model.beta_dim {
                return Err(Error::config("beta_box dimension does not match the model"));
            }
            if !bb.contains(&self.beta0) {
                return Err(Error::config("beta_box does not contain beta0"));
            }
        }

        for est in &self.estimators {
            match est {
                EstimatorId::Mle => {
                    if !self.is_sir() {
                        return Err(Error::config(
                            "the mle baseline needs the jump record and is only \
                             available for sir configs",
                        ));
                    }
                }
                EstimatorId::WeightedLink => {
                    if !matches!(model.link, LinkSpec::BetaEqualsFAlpha { .. }) {
                        return Err(Error::config(format!(
                            "weighted_link needs a beta = f(alpha) link; model '{}' \
                             has {}",
                            self.model,
                            model.link.kind_name()
                        )));
                    }
                }
                EstimatorId::WeightedMultiplicative => {
                    if !matches!(model.link, LinkSpec::Multiplicative { .. }) {
                        return Err(Error::config(format!(
                            "weighted_multiplicative needs a multiplicative model; \
                             '{}' has {}",
                            self.model,
                            model.link.kind_name()
                        )));
                    }
                }
                EstimatorId::SmallDelta | EstimatorId::GaussianLoglik => {
                    let joint = !matches!(model.link, LinkSpec::BetaEqualsFAlpha { .. })
                        || *est == EstimatorId::GaussianLoglik;
                    if joint && self.beta_box.is_none() {
                        return Err(Error::config(format!(
                            "{} on model '{}' searches beta and needs a beta_box",
                            est.name(),
                            self.model
                        )));
                    }
                }
                EstimatorId::Cls | EstimatorId::WeightedFixed => {}
            }
        }
        if self.sim_substeps == 0 || self.flow_substeps == 0 {
            return Err(Error::config("substep counts must be at least 1"));
        }
        Ok(model)
    }
}

/// Configuration for a single estimation from a path CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub model: String,
    pub kind: EstimatorId,
    /// Known noise scale of the path.
    pub epsilon: f64,
    pub alpha_box: ParamBox,
    #[serde(default)]
    pub beta_box: Option<ParamBox>,
    /// Known beta: the weighting value for `weighted_fixed` and the
    /// plug-in for intervals of kinds that do not estimate beta.
    #[serde(default)]
    pub beta0: Option<Vec<f64>>,
    /// Pin alpha and estimate beta only (small_delta / gaussian_loglik).
    #[serde(default)]
    pub fixed_alpha: Option<Vec<f64>>,
    #[serde(default = "default_flow_substeps")]
    pub flow_substeps: usize,
    #[serde(default = "default_max_starts")]
    pub max_starts: usize,
    #[serde(default)]
    pub screen_iters: Option<usize>,
    #[serde(default)]
    pub max_iters: usize,
}

impl EstimateConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
