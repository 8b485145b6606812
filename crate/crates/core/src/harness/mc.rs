//! Monte Carlo orchestration: simulate, estimate, aggregate.
//!
//! Replicates fan out over a rayon pool. Replicate `r` always consumes
//! RNG stream `r` (SIR retention scans streams in order), records are
//! assembled in replicate order, and aggregation scans them in a fixed
//! order, so two runs of the same config produce byte-identical reports
//! regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrast::{ContrastKind, ObservedPath};
use crate::error::{Error, Result};
use crate::estimate::{minimize, EstimationResult, MinimizeOptions, Z_95};
use crate::flow::SamplingGrid;
use crate::harness::config::{EstimateConfig, EstimatorId, ExperimentConfig};
use crate::model::{LinkSpec, ModelSpec, ParamBox};
use crate::simulate::{
    discretize, emergence_filter, jump_mle, simulate_gillespie_sir, simulate_sde,
    JumpTrajectory, SeededRng,
};

/// Cap on stream ids scanned per retained replicate under the emergence
/// filter.
const MAX_FILTER_ATTEMPTS_PER_REPLICATE: u64 = 100;

/// One parameter estimate inside a replicate record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub param: String,
    pub value: f64,
    pub ci: Option<(f64, f64)>,
}

/// Outcome of one (replicate, estimator, grid) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub estimator: EstimatorId,
    pub n: usize,
    pub replicate: usize,
    /// RNG stream that generated this replicate's data, for replay.
    pub stream: u64,
    /// `None` on success, the error text on failure.
    pub error: Option<String>,
    pub estimates: Vec<ParamEstimate>,
}

/// One aggregated summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub kind: EstimatorId,
    pub n: usize,
    pub param: String,
    /// Empirical mean over successful replicates.
    pub mean: f64,
    /// Empirical standard deviation over successful replicates.
    pub sd: f64,
    /// Mean theoretical CI half-width (successes with an interval).
    pub ci_halfwidth: f64,
    /// Fraction of intervals containing the truth.
    pub coverage: f64,
    /// Failed replicates for this (estimator, n) cell.
    pub failures: usize,
}

/// Aggregated experiment output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub config: ExperimentConfig,
    pub rows: Vec<McRow>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub replicates: Vec<ReplicateRecord>,
}

/// Per-replicate simulated data: one fine SDE path, or one jump
/// trajectory.
enum ReplicateData {
    Sde(ObservedPath),
    Jump(JumpTrajectory),
}

/// Keep every `n`-th observation; `n` must divide the path's interval
/// count.
fn subsample(path: &ObservedPath, n: usize) -> Result<ObservedPath> {
    let n_max = path.grid.n();
    if n_max % n != 0 {
        return Err(Error::config(format!(
            "cannot subsample a grid of {n_max} intervals down to {n}"
        )));
    }
    let stride = n_max / n;
    let obs = path.obs.iter().step_by(stride).cloned().collect();
    ObservedPath::new(
        SamplingGrid::new(path.grid.t_horizon(), n)?,
        obs,
        path.epsilon,
    )
}

fn minimize_options(config: &ExperimentConfig) -> MinimizeOptions {
    MinimizeOptions {
        substeps: config.flow_substeps,
        max_iters: config.max_iters,
        max_starts: config.max_starts,
        screen_iters: config.screen_iters,
        fixed_alpha: None,
        known_beta: Some(config.beta0.clone()),
        compute_ci: true,
    }
}

/// Parameter names an estimator reports. Kinds that estimate beta as a
/// free coordinate append the beta names; a `beta = f(alpha)` link makes
/// beta derived, so only alpha is reported.
fn report_params(id: EstimatorId, model: &ModelSpec) -> Vec<String> {
    let mut names = model.alpha_names.clone();
    let free_beta_kind = matches!(id, EstimatorId::SmallDelta | EstimatorId::GaussianLoglik)
        && !matches!(model.link, LinkSpec::BetaEqualsFAlpha { .. });
    if free_beta_kind {
        names.extend(model.beta_names.iter().cloned());
    }
    names
}

fn estimates_from_result(
    id: EstimatorId,
    model: &ModelSpec,
    result: &EstimationResult,
) -> Vec<ParamEstimate> {
    let names = report_params(id, model);
    let a = result.alpha_hat.len();
    let mut out = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let (value, ci) = if i < a {
            (result.alpha_hat[i], result.ci_95.get(i).copied().flatten())
        } else {
            let beta = result.beta_hat.as_ref().expect("beta estimated");
            (beta[i - a], result.ci_95.get(i).copied().flatten())
        };
        out.push(ParamEstimate {
            param: name.clone(),
            value,
            ci,
        });
    }
    out
}

/// Jump-process MLE with observed-information intervals
/// (`rate_hat * (1 ± z/sqrt(#events))`).
fn mle_estimates(model: &ModelSpec, traj: &JumpTrajectory) -> Result<Vec<ParamEstimate>> {
    let (lambda, gamma) = jump_mle(traj);
    let lambda = lambda?;
    let gamma = gamma?;
    let ci = |rate: f64, events: u64| {
        (events > 0).then(|| {
            let half = Z_95 * rate / (events as f64).sqrt();
            (rate - half, rate + half)
        })
    };
    Ok(vec![
        ParamEstimate {
            param: model.alpha_names[0].clone(),
            value: lambda,
            ci: ci(lambda, traj.infection_count()),
        },
        ParamEstimate {
            param: model.alpha_names[1].clone(),
            value: gamma,
            ci: ci(gamma, traj.recovery_count()),
        },
    ])
}

/// Run one estimator on one path.
fn run_one(
    id: EstimatorId,
    model: &ModelSpec,
    config: &ExperimentConfig,
    path: &ObservedPath,
    traj: Option<&JumpTrajectory>,
) -> Result<Vec<ParamEstimate>> {
    if id == EstimatorId::Mle {
        let traj = traj.ok_or_else(|| Error::config("mle needs the jump record"))?;
        return mle_estimates(model, traj);
    }
    let opts = minimize_options(config);
    let fixed_link;
    let (kind, link): (ContrastKind, &LinkSpec) = match id {
        EstimatorId::Cls => (ContrastKind::Cls, &model.link),
        EstimatorId::WeightedFixed => {
            fixed_link = LinkSpec::fixed_beta(config.beta0.clone());
            (ContrastKind::WeightedLink, &fixed_link)
        }
        EstimatorId::WeightedLink => (ContrastKind::WeightedLink, &model.link),
        EstimatorId::WeightedMultiplicative => {
            (ContrastKind::WeightedMultiplicative, &model.link)
        }
        EstimatorId::SmallDelta => (ContrastKind::SmallDelta, &model.link),
        EstimatorId::GaussianLoglik => (ContrastKind::GaussianLoglik, &LinkSpec::FreeBeta),
        EstimatorId::Mle => unreachable!(),
    };
    let joint = match kind {
        ContrastKind::SmallDelta => !matches!(model.link, LinkSpec::BetaEqualsFAlpha { .. }),
        ContrastKind::GaussianLoglik => true,
        _ => false,
    };
    let bounds: ParamBox = if joint {
        let beta_box = config
            .beta_box
            .as_ref()
            .ok_or_else(|| Error::config("estimator needs a beta_box"))?;
        config.alpha_box.concat(beta_box)
    } else {
        config.alpha_box.clone()
    };
    let result = minimize(kind, model, link, path, &bounds, &opts)?;
    Ok(estimates_from_result(id, model, &result))
}

/// Simulate (or retain) the replicate data, in stream order.
fn build_replicates(
    config: &ExperimentConfig,
    model: &ModelSpec,
) -> Result<Vec<(u64, ReplicateData)>> {
    if config.is_sir() {
        let pop = config.population.expect("validated");
        let mut retained: Vec<(u64, ReplicateData)> = Vec::with_capacity(config.replicates);
        let cap = config.replicates as u64 * MAX_FILTER_ATTEMPTS_PER_REPLICATE;
        let batch = (config.replicates as u64).clamp(8, 64);
        let mut next = 0u64;
        while retained.len() < config.replicates && next < cap {
            let hi = (next + batch).min(cap);
            let sims: Vec<JumpTrajectory> = (next..hi)
                .into_par_iter()
                .map(|sid| {
                    simulate_gillespie_sir(
                        pop.n_total,
                        pop.m0,
                        config.alpha0[0],
                        config.alpha0[1],
                        config.t_horizon,
                        SeededRng::new(config.base_seed, sid),
                    )
                })
                .collect::<Result<_>>()?;
            for (sid, traj) in (next..hi).zip(sims) {
                if retained.len() == config.replicates {
                    break;
                }
                if !config.emergence_filter
                    || emergence_filter(&traj, config.emergence_threshold)
                {
                    retained.push((sid, ReplicateData::Jump(traj)));
                }
            }
            next = hi;
        }
        if retained.len() < config.replicates {
            return Err(Error::config(format!(
                "emergence filter retained only {} of {} replicates after {} attempts",
                retained.len(),
                config.replicates,
                cap
            )));
        }
        Ok(retained)
    } else {
        let n_max = *config.grid_sizes.iter().max().unwrap();
        let grid = SamplingGrid::new(config.t_horizon, n_max)?;
        let eps = config.effective_epsilon()?;
        let x0 = config.effective_x0()?;
        (0..config.replicates as u64)
            .into_par_iter()
            .map(|sid| {
                let path = simulate_sde(
                    model,
                    &config.alpha0,
                    &config.beta0,
                    eps,
                    &x0,
                    &grid,
                    config.sim_substeps,
                    SeededRng::new(config.base_seed, sid),
                )?;
                Ok((sid, ReplicateData::Sde(path)))
            })
            .collect()
    }
}

/// Run the full experiment: simulate every replicate, run every estimator
/// on every grid, aggregate. Replicates that error are counted as
/// failures and excluded from the moments; they do not abort the run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<McSummary> {
    let model = config.validate()?;
    let data = build_replicates(config, &model)?;

    let records: Vec<Vec<ReplicateRecord>> = data
        .par_iter()
        .enumerate()
        .map(|(rep, (stream, payload))| {
            let mut cell = Vec::with_capacity(config.grid_sizes.len() * config.estimators.len());
            for &n in &config.grid_sizes {
                let path = match payload {
                    ReplicateData::Sde(fine) => subsample(fine, n),
                    ReplicateData::Jump(traj) => {
                        SamplingGrid::new(config.t_horizon, n)
                            .and_then(|grid| discretize(traj, &grid, true))
                    }
                };
                for &est in &config.estimators {
                    let outcome = path.as_ref().map_err(|e| e.to_string()).and_then(|p| {
                        let traj = match payload {
                            ReplicateData::Jump(t) => Some(t),
                            ReplicateData::Sde(_) => None,
                        };
                        run_one(est, &model, config, p, traj).map_err(|e| e.to_string())
                    });
                    cell.push(match outcome {
                        Ok(estimates) => ReplicateRecord {
                            estimator: est,
                            n,
                            replicate: rep,
                            stream: *stream,
                            error: None,
                            estimates,
                        },
                        Err(msg) => ReplicateRecord {
                            estimator: est,
                            n,
                            replicate: rep,
                            stream: *stream,
                            error: Some(msg),
                            estimates: Vec::new(),
                        },
                    });
                }
            }
            cell
        })
        .collect();
    let records: Vec<ReplicateRecord> = records.into_iter().flatten().collect();

    let rows = aggregate(config, &model, &records);
    Ok(McSummary {
        config: config.clone(),
        rows,
        replicates: records,
    })
}

fn truth_of(config: &ExperimentConfig, model: &ModelSpec, param: &str) -> f64 {
    if let Some(ix) = model.alpha_names.iter().position(|n| n == param) {
        return config.alpha0[ix];
    }
    if let Some(ix) = model.beta_names.iter().position(|n| n == param) {
        return config.beta0[ix];
    }
    f64::NAN
}

fn aggregate(
    config: &ExperimentConfig,
    model: &ModelSpec,
    records: &[ReplicateRecord],
) -> Vec<McRow> {
    let mut rows = Vec::new();
    for &est in &config.estimators {
        for &n in &config.grid_sizes {
            let cell: Vec<&ReplicateRecord> = records
                .iter()
                .filter(|r| r.estimator == est && r.n == n)
                .collect();
            let failures = cell.iter().filter(|r| r.error.is_some()).count();
            for param in report_params(est, model) {
                let truth = truth_of(config, model, &param);
                let mut values = Vec::new();
                let mut halfwidths = Vec::new();
                let mut covered = 0usize;
                let mut with_ci = 0usize;
                for rec in cell.iter().filter(|r| r.error.is_none()) {
                    if let Some(pe) = rec.estimates.iter().find(|p| p.param == param) {
                        values.push(pe.value);
                        if let Some((lo, hi)) = pe.ci {
                            with_ci += 1;
                            halfwidths.push(0.5 * (hi - lo));
                            if truth >= lo && truth <= hi {
                                covered += 1;
                            }
                        }
                    }
                }
                let count = values.len() as f64;
                let mean = if values.is_empty() {
                    f64::NAN
                } else {
                    values.iter().sum::<f64>() / count
                };
                let sd = if values.len() < 2 {
                    0.0
                } else {
                    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / (count - 1.0))
                        .sqrt()
                };
                let ci_halfwidth = if halfwidths.is_empty() {
                    f64::NAN
                } else {
                    halfwidths.iter().sum::<f64>() / halfwidths.len() as f64
                };
                let coverage = if with_ci == 0 {
                    f64::NAN
                } else {
                    covered as f64 / with_ci as f64
                };
                rows.push(McRow {
                    kind: est,
                    n,
                    param,
                    mean,
                    sd,
                    ci_halfwidth,
                    coverage,
                    failures,
                });
            }
        }
    }
    rows
}

/// One estimation from an already materialized path (the CLI `estimate`
/// entry point).
pub fn run_estimate(
    cfg: &EstimateConfig,
    path: &ObservedPath,
) -> Result<EstimationResult> {
    let model = ModelSpec::by_id(&cfg.model)?;
    if path.p() != model.p {
        return Err(Error::dim(format!(
            "path has dimension {}, model '{}' has {}",
            path.p(),
            cfg.model,
            model.p
        )));
    }
    let opts = MinimizeOptions {
        substeps: cfg.flow_substeps,
        max_iters: cfg.max_iters,
        max_starts: cfg.max_starts,
        screen_iters: cfg.screen_iters,
        fixed_alpha: cfg.fixed_alpha.clone(),
        known_beta: cfg.beta0.clone(),
        compute_ci: true,
    };
    let fixed_link;
    let (kind, link): (ContrastKind, &LinkSpec) = match cfg.kind {
        EstimatorId::Mle => {
            return Err(Error::config(
                "the mle baseline needs a jump record, not a path csv",
            ))
        }
        EstimatorId::Cls => (ContrastKind::Cls, &model.link),
        EstimatorId::WeightedFixed => {
            let beta = cfg
                .beta0
                .clone()
                .ok_or_else(|| Error::config("weighted_fixed needs beta0"))?;
            fixed_link = LinkSpec::fixed_beta(beta);
            (ContrastKind::WeightedLink, &fixed_link)
        }
        EstimatorId::WeightedLink => (ContrastKind::WeightedLink, &model.link),
        EstimatorId::WeightedMultiplicative => {
            (ContrastKind::WeightedMultiplicative, &model.link)
        }
        EstimatorId::SmallDelta => (ContrastKind::SmallDelta, &model.link),
        EstimatorId::GaussianLoglik => (ContrastKind::GaussianLoglik, &LinkSpec::FreeBeta),
    };
    let needs_beta_box = match kind {
        ContrastKind::SmallDelta => {
            !matches!(model.link, LinkSpec::BetaEqualsFAlpha { .. })
        }
        ContrastKind::GaussianLoglik => true,
        _ => false,
    };
    let bounds = if cfg.fixed_alpha.is_some() {
        cfg.beta_box
            .clone()
            .ok_or_else(|| Error::config("fixed_alpha estimation needs a beta_box"))?
    } else if needs_beta_box {
        let bb = cfg
            .beta_box
            .as_ref()
            .ok_or_else(|| Error::config(format!("{} needs a beta_box", cfg.kind.name())))?;
        cfg.alpha_box.concat(bb)
    } else {
        cfg.alpha_box.clone()
    };
    minimize(kind, &model, link, path, &bounds, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::SirPopulation;
    use crate::model::builtin_cir;

    fn tiny_cir_config() -> ExperimentConfig {
        ExperimentConfig {
            model: "cir".into(),
            alpha0: vec![1.0],
            beta0: vec![1.0],
            x0: Some(vec![1.0]),
            epsilon: Some(0.05),
            population: None,
            t_horizon: 1.0,
            grid_sizes: vec![10],
            estimators: vec![EstimatorId::Cls],
            replicates: 3,
            base_seed: 42,
            out_dir: None,
            emergence_filter: false,
            emergence_threshold: 0.10,
            alpha_box: ParamBox::new(vec![0.2], vec![2.5]).unwrap(),
            beta_box: None,
            sim_substeps: 50,
            flow_substeps: 8,
            max_starts: 27,
            screen_iters: None,
            max_iters: 0,
            notes: None,
        }
    }

    #[test]
    fn single_replicate_matches_direct_estimation() {
        let mut cfg = tiny_cir_config();
        cfg.replicates = 1;
        let summary = run_experiment(&cfg).unwrap();
        assert_eq!(summary.rows.len(), 1);

        // replaying stream 0 by hand gives the identical estimate
        let model = builtin_cir();
        let grid = SamplingGrid::new(1.0, 10).unwrap();
        let path = simulate_sde(
            &model,
            &[1.0],
            &[1.0],
            0.05,
            &[1.0],
            &grid,
            50,
            SeededRng::new(42, 0),
        )
        .unwrap();
        let direct = minimize(
            ContrastKind::Cls,
            &model,
            &model.link,
            &path,
            &cfg.alpha_box,
            &minimize_options(&cfg),
        )
        .unwrap();
        assert_eq!(summary.rows[0].mean.to_bits(), direct.alpha_hat[0].to_bits());
        assert_eq!(summary.rows[0].failures, 0);
    }

    #[test]
    fn repeat_runs_are_bit_identical() {
        let cfg = tiny_cir_config();
        let s1 = run_experiment(&cfg).unwrap();
        let s2 = run_experiment(&cfg).unwrap();
        assert_eq!(s1.rows.len(), s2.rows.len());
        for (a, b) in s1.rows.iter().zip(&s2.rows) {
            assert_eq!(a.mean.to_bits(), b.mean.to_bits());
            assert_eq!(a.sd.to_bits(), b.sd.to_bits());
        }
    }

    #[test]
    fn subsample_preserves_endpoints_and_epsilon() {
        let model = builtin_cir();
        let grid = SamplingGrid::new(1.0, 100).unwrap();
        let path = simulate_sde(
            &model,
            &[1.0],
            &[1.0],
            0.05,
            &[1.0],
            &grid,
            10,
            SeededRng::new(3, 1),
        )
        .unwrap();
        let sub = subsample(&path, 20).unwrap();
        assert_eq!(sub.grid.n(), 20);
        assert_eq!(sub.epsilon, path.epsilon);
        assert_eq!(sub.obs[0], path.obs[0]);
        assert_eq!(sub.obs[20], path.obs[100]);
        assert_eq!(sub.obs[1], path.obs[5]);
        assert!(subsample(&path, 30).is_err());
    }

    #[test]
    fn sir_filtered_replicates_all_emerge() {
        let cfg = ExperimentConfig {
            model: "sir".into(),
            alpha0: vec![0.4, 1.0 / 3.0],
            beta0: vec![0.4, 1.0 / 3.0],
            x0: None,
            epsilon: None,
            population: Some(SirPopulation { n_total: 100, m0: 1 }),
            t_horizon: 50.0,
            grid_sizes: vec![10],
            estimators: vec![EstimatorId::Mle],
            replicates: 8,
            base_seed: 11,
            out_dir: None,
            emergence_filter: true,
            emergence_threshold: 0.10,
            alpha_box: ParamBox::new(vec![0.05, 0.05], vec![1.5, 1.5]).unwrap(),
            beta_box: None,
            sim_substeps: 100,
            flow_substeps: 8,
            max_starts: 27,
            screen_iters: None,
            max_iters: 0,
            notes: None,
        };
        let model = cfg.validate().unwrap();
        let data = build_replicates(&cfg, &model).unwrap();
        assert_eq!(data.len(), 8);
        let mut last = None;
        for (sid, payload) in &data {
            if let Some(prev) = last {
                assert!(*sid > prev, "streams not scanned in order");
            }
            last = Some(*sid);
            match payload {
                ReplicateData::Jump(traj) => {
                    assert!(emergence_filter(traj, 0.10));
                }
                ReplicateData::Sde(_) => panic!("expected jump data"),
            }
        }
        // with m = 1 and R0 = 1.2, some streams must have been skipped
        assert!(data.last().unwrap().0 >= 8);
    }

    #[test]
    fn failed_replicates_are_counted_not_fatal() {
        // a box that excludes every plausible alpha forces optimizer
        // failures only in degenerate cases; instead, trip the failure
        // path deterministically with an impossible grid horizon for the
        // trajectory by using a one-observation grid
        let mut cfg = tiny_cir_config();
        cfg.grid_sizes = vec![2];
        cfg.replicates = 2;
        // sabotage: max_iters = 1 cannot converge from any start
        cfg.max_iters = 1;
        let summary = run_experiment(&cfg).unwrap();
        assert_eq!(summary.rows.len(), 1);
        assert_eq!(summary.rows[0].failures, 2);
        assert!(summary.rows[0].mean.is_nan());
        let errs: Vec<_> = summary
            .replicates
            .iter()
            .filter_map(|r| r.error.as_deref())
            .collect();
        assert_eq!(errs.len(), 2);
        assert!(errs[0].contains("converge"));
    }
}
