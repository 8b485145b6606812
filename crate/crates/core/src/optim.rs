//! Derivative-free minimization: Nelder-Mead with projection onto a
//! parameter box, restarted from a deterministic quartile lattice.
//!
//! Contrast surfaces here are cheap to evaluate but have no coded
//! gradients, so a projected simplex search is the whole optimizer. Every
//! proposed vertex is clamped into the box before evaluation. A run stops
//! when the simplex diameter falls under `1e-8 * (1 + |x|)`, or when the
//! value spread across the simplex drops to relative roundoff (an
//! absolute spread cutoff would stop prematurely whenever the minimum
//! value is near zero, and a loose relative one would cap parameter
//! accuracy below what the closed-form identities require).
//!
//! Objectives return `Result<f64>`: a non-finite-state failure marks the
//! candidate as infinitely bad (divergent flows at absurd parameters are
//! recoverable), any other error aborts the search.

use crate::error::{Error, Result};
use crate::model::ParamBox;

/// Simplex diameter tolerance, relative to `1 + |x_best|`.
pub const DIAMETER_TOL: f64 = 1e-8;
/// Tolerance on the value spread across the simplex, relative to the
/// value scale; at this level further comparisons are lost in roundoff,
/// so the diameter criterion does the real work.
pub const SPREAD_TOL: f64 = 1e-14;

/// Outcome of a single Nelder-Mead run.
#[derive(Debug, Clone)]
pub struct NmRun {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Outcome of the multi-start search.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Iterations summed over every start (and the polish run, if any).
    pub iterations: usize,
    pub evaluations: usize,
    /// Number of start points actually used.
    pub restarts: usize,
    pub converged: bool,
}

/// Multi-start controls.
#[derive(Debug, Clone)]
pub struct SearchOptions {
    /// Iteration cap per run; `0` means `400 * dimension`.
    pub max_iters: usize,
    /// Cap on the number of lattice starts.
    pub max_starts: usize,
    /// When set, starts are first screened with this iteration budget and
    /// only the best is polished to full tolerance.
    pub screen_iters: Option<usize>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            max_iters: 0,
            max_starts: 27,
            screen_iters: None,
        }
    }
}

type Objective<'a> = dyn FnMut(&[f64]) -> Result<f64> + 'a;

/// Evaluate with projection already applied; integration blow-ups rank as
/// infinitely bad rather than aborting.
fn eval(f: &mut Objective, x: &[f64], evals: &mut usize) -> Result<f64> {
    *evals += 1;
    match f(x) {
        Ok(v) if v.is_nan() => Ok(f64::INFINITY),
        Ok(v) => Ok(v),
        Err(Error::NonFiniteState) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// One projected Nelder-Mead run from `start`.
pub fn nelder_mead(
    f: &mut Objective,
    start: &[f64],
    bounds: &ParamBox,
    max_iters: usize,
) -> Result<NmRun> {
    let dim = start.len();
    assert_eq!(dim, bounds.dim(), "start point does not match box dimension");
    let max_iters = if max_iters == 0 { 400 * dim } else { max_iters };
    let mut evals = 0usize;

    let project = |x: &mut Vec<f64>| bounds.project(x);

    // initial simplex: step 5% of the box width along each axis, flipped
    // when it would leave the box
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    let mut base = start.to_vec();
    project(&mut base);
    simplex.push(base.clone());
    for i in 0..dim {
        let width = bounds.upper[i] - bounds.lower[i];
        let step = 0.05 * width;
        let mut v = base.clone();
        v[i] = if v[i] + step <= bounds.upper[i] {
            v[i] + step
        } else {
            v[i] - step
        };
        simplex.push(v);
    }
    let mut values = Vec::with_capacity(dim + 1);
    for v in &simplex {
        values.push(eval(f, v, &mut evals)?);
    }

    let (mut iterations, mut converged) = (0usize, false);
    let mut order: Vec<usize> = (0..=dim).collect();
    while iterations < max_iters {
        iterations += 1;
        order.sort_by(|&a, &b| {
            values[a]
                .partial_cmp(&values[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let best = order[0];
        let worst = order[dim];
        let second_worst = order[dim - 1];

        // convergence: simplex diameter or value spread
        let xnorm = simplex[best].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut diameter: f64 = 0.0;
        for &i in &order[1..] {
            let d = simplex[i]
                .iter()
                .zip(&simplex[best])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            diameter = diameter.max(d);
        }
        let spread = values[worst] - values[best];
        let f_scale = values[worst].abs().max(values[best].abs());
        if diameter < DIAMETER_TOL * (1.0 + xnorm)
            || (spread.is_finite() && spread <= SPREAD_TOL * f_scale)
        {
            converged = true;
            break;
        }

        // centroid of all but the worst vertex
        let mut centroid = vec![0.0; dim];
        for &i in order.iter().take(dim) {
            for (c, v) in centroid.iter_mut().zip(&simplex[i]) {
                *c += v;
            }
        }
        for c in centroid.iter_mut() {
            *c /= dim as f64;
        }

        let blend = |t: f64| -> Vec<f64> {
            let mut x: Vec<f64> = centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(c, w)| c + t * (c - w))
                .collect();
            project(&mut x);
            x
        };

        let reflected = blend(1.0);
        let fr = eval(f, &reflected, &mut evals)?;
        if fr < values[best] {
            let expanded = blend(2.0);
            let fe = eval(f, &expanded, &mut evals)?;
            if fe < fr {
                simplex[worst] = expanded;
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
        } else if fr < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = fr;
        } else {
            let contracted = if fr < values[worst] {
                blend(0.5) // outside
            } else {
                blend(-0.5) // inside
            };
            let fc = eval(f, &contracted, &mut evals)?;
            if fc < values[worst].min(fr) {
                simplex[worst] = contracted;
                values[worst] = fc;
            } else {
                // shrink toward the best vertex
                let best_x = simplex[best].clone();
                for &i in order.iter().skip(1) {
                    for (v, b) in simplex[i].iter_mut().zip(&best_x) {
                        *v = b + 0.5 * (*v - *b);
                    }
                    let mut x = simplex[i].clone();
                    project(&mut x);
                    simplex[i] = x;
                    values[i] = eval(f, &simplex[i], &mut evals)?;
                }
            }
        }
    }

    let best = (0..=dim)
        .min_by(|&a, &b| {
            values[a]
                .partial_cmp(&values[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        })
        .unwrap();
    Ok(NmRun {
        x: simplex[best].clone(),
        value: values[best],
        iterations,
        evaluations: evals,
        converged,
    })
}

/// Start points: the per-dimension quartile lattice
/// `{lower + w/4, lower + w/2, lower + 3w/4}^dim`, thinned to at most
/// `cap` points by an even stride over the lexicographic enumeration.
pub fn lattice_starts(bounds: &ParamBox, cap: usize) -> Vec<Vec<f64>> {
    let dim = bounds.dim();
    let cap = cap.max(1);
    let total: u128 = 3u128.saturating_pow(dim as u32);
    let decode = |mut idx: u128| -> Vec<f64> {
        let mut point = vec![0.0; dim];
        for i in (0..dim).rev() {
            let digit = (idx % 3) as usize;
            idx /= 3;
            let w = bounds.upper[i] - bounds.lower[i];
            point[i] = bounds.lower[i] + w * 0.25 * (digit + 1) as f64;
        }
        point
    };
    if total <= cap as u128 {
        (0..total).map(decode).collect()
    } else {
        (0..cap)
            .map(|j| decode(j as u128 * (total - 1) / (cap as u128 - 1)))
            .collect()
    }
}

/// Multi-start minimization. The winner is the best converged run by
/// value, ties broken by start index; if no run converges the search
/// fails with [`Error::NoConvergence`].
pub fn multi_start(
    f: &mut Objective,
    bounds: &ParamBox,
    opts: &SearchOptions,
) -> Result<SearchResult> {
    let starts = lattice_starts(bounds, opts.max_starts);
    let restarts = starts.len();
    let mut iterations = 0usize;
    let mut evaluations = 0usize;

    if let Some(budget) = opts.screen_iters {
        // phase 1: cheap screen of every start
        let mut best: Option<NmRun> = None;
        for start in &starts {
            let run = nelder_mead(f, start, bounds, budget)?;
            iterations += run.iterations;
            evaluations += run.evaluations;
            let better = match &best {
                None => true,
                Some(b) => run.value < b.value,
            };
            if better {
                best = Some(run);
            }
        }
        // phase 2: polish the winner to full tolerance
        let winner = best.expect("at least one lattice start");
        let polish = nelder_mead(f, &winner.x, bounds, opts.max_iters)?;
        iterations += polish.iterations;
        evaluations += polish.evaluations;
        if !polish.converged {
            return Err(Error::NoConvergence);
        }
        return Ok(SearchResult {
            x: polish.x,
            value: polish.value,
            iterations,
            evaluations,
            restarts,
            converged: true,
        });
    }

    let mut best: Option<NmRun> = None;
    for start in &starts {
        let run = nelder_mead(f, start, bounds, opts.max_iters)?;
        iterations += run.iterations;
        evaluations += run.evaluations;
        if run.converged {
            let better = match &best {
                None => true,
                Some(b) => run.value < b.value,
            };
            if better {
                best = Some(run);
            }
        }
    }
    match best {
        Some(run) => Ok(SearchResult {
            x: run.x,
            value: run.value,
            iterations,
            evaluations,
            restarts,
            converged: true,
        }),
        None => Err(Error::NoConvergence),
    }
}
