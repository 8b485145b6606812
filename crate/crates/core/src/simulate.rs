//! Synthetic data generation: Euler-Maruyama diffusion paths, exact
//! Gillespie trajectories of the SIR Markov jump process, and the
//! jump-process MLE baseline.
//!
//! All randomness flows through [`SeededRng`]: a ChaCha stream cipher
//! keyed by `(base_seed, stream_id)`, so replicate `i` produces the same
//! path whether replicates run serially or in parallel, on any platform.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contrast::ObservedPath;
use crate::error::{Error, Result};
use crate::flow::SamplingGrid;
use crate::model::ModelSpec;

/// Default Euler substeps per sampling interval.
pub const DEFAULT_SIM_SUBSTEPS: usize = 100;

/// Reproducible stream-indexed generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeededRng {
    pub base_seed: u64,
    /// Replicate index; each index is an independent stream.
    pub stream_id: u64,
}

impl SeededRng {
    pub fn new(base_seed: u64, stream_id: u64) -> Self {
        SeededRng { base_seed, stream_id }
    }

    /// Materialize the generator for this `(seed, stream)` pair.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Euler-Maruyama simulation of the model SDE, recorded at every grid
/// time. States are passed through the model guard before each diffusion
/// coefficient evaluation (square roots of negative excursions are the
/// failure mode this avoids); the drift sees the raw state.
pub fn simulate_sde(
    model: &ModelSpec,
    alpha: &[f64],
    beta: &[f64],
    epsilon: f64,
    x0: &[f64],
    grid: &SamplingGrid,
    sim_substeps: usize,
    seed: SeededRng,
) -> Result<ObservedPath> {
    if sim_substeps == 0 {
        return Err(Error::config("sim_substeps must be at least 1"));
    }
    if x0.len() != model.p {
        return Err(Error::dim(format!(
            "x0 has length {}, model '{}' expects {}",
            x0.len(),
            model.id,
            model.p
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::config(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let mut rng = seed.rng();
    let p = model.p;
    let h = grid.delta() / sim_substeps as f64;
    let root_h = h.sqrt();

    let mut x = x0.to_vec();
    let mut xg = vec![0.0; p];
    let mut drift = vec![0.0; p];
    let mut sigma = vec![0.0; p * p];
    let mut z = vec![0.0; p];
    let mut obs = Vec::with_capacity(grid.n() + 1);
    obs.push(DVector::from_row_slice(&x));

    for _k in 1..=grid.n() {
        for _j in 0..sim_substeps {
            xg.copy_from_slice(&x);
            model.guard(&mut xg);
            model.drift_into(alpha, &x, &mut drift);
            model.sigma_into(beta, &xg, &mut sigma);
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for i in 0..p {
                let mut noise = 0.0;
                for j in 0..p {
                    noise += sigma[i * p + j] * z[j];
                }
                x[i] += drift[i] * h + epsilon * root_h * noise;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        obs.push(DVector::from_row_slice(&x));
    }
    // a zero-noise path still carries a positive scale for the contrasts
    ObservedPath::new(*grid, obs, if epsilon > 0.0 { epsilon } else { f64::MIN_POSITIVE })
}

/// Event type of the SIR jump process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpEvent {
    Infection,
    Recovery,
}

/// Exact trajectory of the SIR Markov jump process with transitions
/// `(S, I) -> (S-1, I+1)` at rate `lambda S I / N` and
/// `(S, I) -> (S, I-1)` at rate `gamma I`.
#[derive(Debug, Clone)]
pub struct JumpTrajectory {
    pub n_total: u64,
    pub m0: u64,
    pub t_horizon: f64,
    /// Strictly increasing event times in `(0, t_horizon]`.
    pub times: Vec<f64>,
    pub events: Vec<JumpEvent>,
    /// Post-event `(S, I)` pairs, aligned with `times`.
    pub states: Vec<(u64, u64)>,
}

impl JumpTrajectory {
    pub fn initial_state(&self) -> (u64, u64) {
        (self.n_total - self.m0, self.m0)
    }

    /// State holding at time `t` (last event at or before `t`).
    pub fn state_at(&self, t: f64) -> (u64, u64) {
        match self.times.partition_point(|&et| et <= t) {
            0 => self.initial_state(),
            idx => self.states[idx - 1],
        }
    }

    pub fn infection_count(&self) -> u64 {
        self.events
            .iter()
            .filter(|e| matches!(e, JumpEvent::Infection))
            .count() as u64
    }

    pub fn recovery_count(&self) -> u64 {
        self.events.len() as u64 - self.infection_count()
    }

    /// Ever-infected fraction `(m0 + infections) / N`.
    pub fn attack_fraction(&self) -> f64 {
        (self.m0 + self.infection_count()) as f64 / self.n_total as f64
    }
}

/// Exact stochastic simulation (direct method) of the SIR jump process,
/// stopped at the horizon or at extinction of the infectives.
pub fn simulate_gillespie_sir(
    n_total: u64,
    m0: u64,
    lambda: f64,
    gamma: f64,
    t_horizon: f64,
    seed: SeededRng,
) -> Result<JumpTrajectory> {
    if m0 == 0 || m0 >= n_total {
        return Err(Error::config(format!(
            "initial infected must satisfy 0 < m < N, got m={m0}, N={n_total}"
        )));
    }
    if !(lambda >= 0.0) || !(gamma >= 0.0) || !(t_horizon > 0.0) {
        return Err(Error::config(
            "rates must be nonnegative and the horizon positive",
        ));
    }
    let mut rng = seed.rng();
    let (mut s, mut i) = (n_total - m0, m0);
    let mut t = 0.0_f64;
    let n_f = n_total as f64;
    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut states = Vec::new();

    loop {
        let rate_inf = lambda * s as f64 * i as f64 / n_f;
        let rate_rec = gamma * i as f64;
        let total = rate_inf + rate_rec;
        if total <= 0.0 {
            break; // absorbed (I = 0, or all rates zero)
        }
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() / total;
        if t > t_horizon {
            break;
        }
        let pick: f64 = rng.gen::<f64>() * total;
        if pick < rate_inf {
            s -= 1;
            i += 1;
            events.push(JumpEvent::Infection);
        } else {
            i -= 1;
            events.push(JumpEvent::Recovery);
        }
        times.push(t);
        states.push((s, i));
    }

    Ok(JumpTrajectory {
        n_total,
        m0,
        t_horizon,
        times,
        events,
        states,
    })
}

/// Sample the trajectory on a regular grid by last-event-before-`t_k`.
///
/// With `normalize` the counts are divided by `N` and the path carries the
/// intrinsic noise scale `epsilon = 1/sqrt(N)`; otherwise raw counts are
/// returned (for inspection and export) with a unit scale.
pub fn discretize(
    traj: &JumpTrajectory,
    grid: &SamplingGrid,
    normalize: bool,
) -> Result<ObservedPath> {
    if grid.t_horizon() > traj.t_horizon * (1.0 + 1e-12) {
        return Err(Error::config(format!(
            "grid horizon {} exceeds trajectory horizon {}",
            grid.t_horizon(),
            traj.t_horizon
        )));
    }
    let scale = if normalize { 1.0 / traj.n_total as f64 } else { 1.0 };
    let epsilon = if normalize {
        1.0 / (traj.n_total as f64).sqrt()
    } else {
        1.0
    };
    // single merge pass over events and grid times
    let times = grid.times();
    let mut obs = Vec::with_capacity(times.len());
    let mut idx = 0usize;
    let mut current = traj.initial_state();
    for &tk in &times {
        while idx < traj.times.len() && traj.times[idx] <= tk {
            current = traj.states[idx];
            idx += 1;
        }
        obs.push(DVector::from_row_slice(&[
            current.0 as f64 * scale,
            current.1 as f64 * scale,
        ]));
    }
    ObservedPath::new(*grid, obs, epsilon)
}

/// Maximum likelihood estimates of `(lambda, gamma)` from the full event
/// record: `lambda_hat = N * #infections / int S I dt` and
/// `gamma_hat = #recoveries / int I dt`, each side failing independently
/// with [`Error::ZeroExposure`] when its exposure integral vanishes.
pub fn jump_mle(traj: &JumpTrajectory) -> (Result<f64>, Result<f64>) {
    let mut int_si = 0.0_f64;
    let mut int_i = 0.0_f64;
    let mut t_prev = 0.0_f64;
    let mut state = traj.initial_state();
    for (ix, &t) in traj.times.iter().enumerate() {
        let dt = t - t_prev;
        int_si += state.0 as f64 * state.1 as f64 * dt;
        int_i += state.1 as f64 * dt;
        state = traj.states[ix];
        t_prev = t;
    }
    // tail segment up to the horizon (zero if the epidemic died out)
    let dt = traj.t_horizon - t_prev;
    if dt > 0.0 {
        int_si += state.0 as f64 * state.1 as f64 * dt;
        int_i += state.1 as f64 * dt;
    }

    let lambda = if int_si > 0.0 {
        Ok(traj.n_total as f64 * traj.infection_count() as f64 / int_si)
    } else {
        Err(Error::ZeroExposure("infection"))
    };
    let gamma = if int_i > 0.0 {
        Ok(traj.recovery_count() as f64 / int_i)
    } else {
        Err(Error::ZeroExposure("recovery"))
    };
    (lambda, gamma)
}

/// Retention rule for epidemic replicates: true when the ever-infected
/// count reaches `threshold_frac` of the population.
pub fn emergence_filter(traj: &JumpTrajectory, threshold_frac: f64) -> bool {
    (traj.m0 + traj.infection_count()) as f64 >= threshold_frac * traj.n_total as f64
}

/// Write a path as CSV with header `t,x1,...,xp`.
pub fn write_path_csv<W: Write>(path: &ObservedPath, mut w: W) -> Result<()> {
    let p = path.p();
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=p).map(|i| format!("x{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (t, obs) in path.grid.times().iter().zip(&path.obs) {
        let mut row = vec![format!("{t}")];
        row.extend(obs.iter().map(|v| format!("{v}")));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Read a path CSV written by [`write_path_csv`], checking the column
/// count against the expected state dimension.
pub fn read_path_csv<R: BufRead>(r: R, expected_p: usize, epsilon: f64) -> Result<ObservedPath> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::config("path csv is empty"))??;
    let cols = header.split(',').count();
    if cols != expected_p + 1 {
        return Err(Error::config(format!(
            "path csv has {cols} columns, expected {} (t plus {expected_p} state columns)",
            expected_p + 1
        )));
    }
    let mut times = Vec::new();
    let mut obs = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::config(format!(
                "path csv row has {} columns, expected {cols}",
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::config(format!("bad number '{s}' in path csv: {e}")))
        };
        times.push(parse(fields[0])?);
        let state: Result<Vec<f64>> = fields[1..].iter().map(|s| parse(s)).collect();
        obs.push(DVector::from_row_slice(&state?));
    }
    if obs.len() < 2 {
        return Err(Error::config("path csv needs at least two rows"));
    }
    let n = obs.len() - 1;
    let t_end = *times.last().unwrap();
    let grid = SamplingGrid::new(t_end, n)?;
    let delta = grid.delta();
    for (k, t) in times.iter().enumerate() {
        if (t - k as f64 * delta).abs() > 1e-9 * (1.0 + t_end) {
            return Err(Error::config(format!(
                "path csv times are not a regular grid at row {k} (t={t})"
            )));
        }
    }
    ObservedPath::new(grid, obs, epsilon)
}

/// Write a jump trajectory as CSV `t,event,S,I`, starting with the
/// initial state.
pub fn write_jump_csv<W: Write>(traj: &JumpTrajectory, mut w: W) -> Result<()> {
    writeln!(w, "t,event,S,I")?;
    let (s0, i0) = traj.initial_state();
    writeln!(w, "0,init,{s0},{i0}")?;
    for ((t, ev), (s, i)) in traj.times.iter().zip(&traj.events).zip(&traj.states) {
        let name = match ev {
            JumpEvent::Infection => "infection",
            JumpEvent::Recovery => "recovery",
        };
        writeln!(w, "{t},{name},{s},{i}")?;
    }
    Ok(())
}
