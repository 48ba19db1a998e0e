//! Discrete-time clipped CBO with a decaying step-size schedule.
//!
//! One step moves every particle towards the clipped consensus point of the
//! current swarm and adds isotropic Gaussian noise of variance
//! `2 eta_{k+1} gamma / alpha`:
//!
//! ```text
//! X^i_{k+1} = X^i_k + eta_{k+1} (clip_R(theta_k) - X^i_k) + sqrt(2 eta_{k+1} gamma / alpha) xi^i_{k+1}
//! eta_k     = eta0 / k^zeta
//! ```
//!
//! Noise is keyed by `(seed, step, particle stream, coordinate)`, so a run is
//! a pure function of its configuration and objective.

use std::fmt::Write as _;

use ndarray::{Array2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::{clip, consensus_point, global_best, norm, softmin_weights, WeightVector};
use crate::error::{invalid, CboError, Result};
use crate::metrics::ess;
use crate::objectives::ObjectiveSpec;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CboConfig {
    pub dim: usize,
    pub n_particles: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub clip_radius: f64,
    pub eta0: f64,
    pub zeta: f64,
    pub sigma0_sq: f64,
    pub m0: Vec<f64>,
    pub seed: u64,
    pub max_iter: u64,
    /// Replaces `sqrt(2 gamma / alpha)` in the noise term. Test hook.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_scale_override: Option<f64>,
}

impl CboConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(name: &'static str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(
                    name,
                    format!("must be positive and finite, got {v}"),
                ))
            }
        }
        if self.dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if self.n_particles == 0 {
            return Err(invalid("n_particles", "must be at least 1"));
        }
        positive("alpha", self.alpha)?;
        positive("gamma", self.gamma)?;
        positive("clip_radius", self.clip_radius)?;
        if !(self.eta0 > 0.0 && self.eta0 <= 1.0) {
            return Err(invalid(
                "eta0",
                format!("must lie in (0, 1], got {}", self.eta0),
            ));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(invalid(
                "zeta",
                format!("must lie in (0, 1], got {}", self.zeta),
            ));
        }
        if !(self.sigma0_sq >= 0.0 && self.sigma0_sq.is_finite()) {
            return Err(invalid("sigma0_sq", "must be finite and non-negative"));
        }
        if self.m0.len() != self.dim {
            return Err(CboError::DimensionMismatch {
                context: "m0",
                expected: self.dim,
                got: self.m0.len(),
            });
        }
        if let Some(i) = self.m0.iter().position(|v| !v.is_finite()) {
            return Err(CboError::NonFinite {
                context: "m0",
                index: i,
            });
        }
        if let Some(s) = self.noise_scale_override {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(invalid(
                    "noise_scale_override",
                    "must be finite and non-negative",
                ));
            }
        }
        Ok(())
    }

    /// Legal configurations that fall outside the hypotheses of the
    /// convergence results.
    pub fn flags(&self, spec: &ObjectiveSpec) -> Vec<String> {
        let mut out = Vec::new();
        let floor = self.gamma / (2.0 * self.alpha);
        if self.sigma0_sq < floor {
            out.push(format!(
                "sigma0_sq = {} is below gamma/(2 alpha) = {}; the particle bounds assume sigma0_sq >= gamma/(2 alpha)",
                self.sigma0_sq, floor
            ));
        }
        let need = norm(&spec.x_star) + spec.delta;
        if self.clip_radius < need {
            out.push(format!(
                "clip_radius = {} is below |x*| + delta = {}; the mean-field rate assumes R >= |x*| + delta",
                self.clip_radius, need
            ));
        }
        out
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale_override
            .unwrap_or_else(|| (2.0 * self.gamma / self.alpha).sqrt())
    }

    /// Second moment `E|X_0|^2 = |m0|^2 + d sigma0^2` of the initial law.
    pub fn initial_second_moment(&self) -> f64 {
        self.m0.iter().map(|v| v * v).sum::<f64>() + self.dim as f64 * self.sigma0_sq
    }
}

/// `eta0 / k^zeta` for `k >= 1`.
pub fn step_size(k: u64, eta0: f64, zeta: f64) -> Result<f64> {
    if k == 0 {
        return Err(invalid("k", "step indices start at 1"));
    }
    Ok(eta0 / (k as f64).powf(zeta))
}

#[inline]
fn eta(k: u64, eta0: f64, zeta: f64) -> f64 {
    eta0 / (k as f64).powf(zeta)
}

/// `t_k = sum_{l=1..k} eta_l` by direct summation.
pub fn elapsed_time(k: u64, eta0: f64, zeta: f64) -> f64 {
    (1..=k).fold(0.0, |t, l| t + eta(l, eta0, zeta))
}

/// Smallest `k` with `t_k >= t`.
pub fn first_index_reaching(t: f64, eta0: f64, zeta: f64) -> u64 {
    let mut k = 0u64;
    let mut acc = 0.0;
    while acc < t {
        k += 1;
        acc += eta(k, eta0, zeta);
    }
    k
}

/// Exact at both endpoints: `lerp(a, b, 1) == b` and `lerp(a, a, t) == a`.
#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    pub positions: Array2<f64>,
    pub step: u64,
    pub seed: u64,
    /// Noise stream of each row. Defaults to the row index.
    pub streams: Vec<u64>,
}

impl ParticleSystem {
    pub fn from_positions(positions: Array2<f64>, seed: u64) -> Self {
        let streams = (0..positions.nrows() as u64).collect();
        Self {
            positions,
            step: 0,
            seed,
            streams,
        }
    }

    pub fn n(&self) -> usize {
        self.positions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    /// `(1/n) sum_i |X^i|^2`.
    pub fn second_moment(&self) -> f64 {
        self.positions.iter().map(|v| v * v).sum::<f64>() / self.n() as f64
    }
}

/// i.i.d. `N(m0, sigma0^2 I)` particles drawn from keyed streams.
pub fn init_particles(cfg: &CboConfig) -> Result<ParticleSystem> {
    cfg.validate()?;
    let sd = cfg.sigma0_sq.sqrt();
    let positions = Array2::from_shape_fn((cfg.n_particles, cfg.dim), |(i, j)| {
        if sd == 0.0 {
            cfg.m0[j]
        } else {
            cfg.m0[j] + sd * rng::normal(cfg.seed, Domain::Init, 0, i as u64, j as u64)
        }
    });
    Ok(ParticleSystem::from_positions(positions, cfg.seed))
}

/// Everything computed from the swarm before a step is taken.
#[derive(Debug, Clone)]
pub struct SwarmState {
    pub values: Vec<f64>,
    pub weights: WeightVector,
    pub theta: Vec<f64>,
    pub theta_clipped: Vec<f64>,
    pub best_index: usize,
    pub best_value: f64,
}

pub fn swarm_state(
    sys: &ParticleSystem,
    cfg: &CboConfig,
    spec: &ObjectiveSpec,
) -> Result<SwarmState> {
    if sys.dim() != spec.dim {
        return Err(CboError::DimensionMismatch {
            context: "particle dimension vs objective",
            expected: spec.dim,
            got: sys.dim(),
        });
    }
    let values: Vec<f64> = sys
        .positions
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|row| match row.as_slice() {
            Some(s) => spec.eval(s),
            None => spec.eval(&row.to_vec()),
        })
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(CboError::NonFiniteObjective {
            particle: i,
            step: sys.step,
        });
    }
    let weights = softmin_weights(&values, cfg.alpha)?;
    let theta = consensus_point(sys.positions.view(), &weights)?;
    let theta_clipped = clip(&theta, cfg.clip_radius);
    let (best_index, _) = global_best(sys.positions.view(), &values)?;
    let best_value = values[best_index];
    Ok(SwarmState {
        values,
        weights,
        theta,
        theta_clipped,
        best_index,
        best_value,
    })
}

/// Move every particle towards `target` with step `eta_{k+1}` and add noise.
pub fn advance(sys: &mut ParticleSystem, cfg: &CboConfig, target: &[f64]) -> Result<()> {
    let k_next = sys.step + 1;
    let eta = step_size(k_next, cfg.eta0, cfg.zeta)?;
    let amp = eta.sqrt() * cfg.noise_scale();
    let seed = sys.seed;
    let streams = &sys.streams;
    Zip::indexed(sys.positions.rows_mut()).par_for_each(|i, mut row| {
        let stream = streams[i];
        for (j, x) in row.iter_mut().enumerate() {
            let drift = lerp(*x, target[j], eta);
            *x = if amp == 0.0 {
                drift
            } else {
                drift + amp * rng::normal(seed, Domain::Step, k_next, stream, j as u64)
            };
        }
    });
    sys.step = k_next;
    Ok(())
}

/// One clipped CBO iteration.
pub fn cbo_step(
    mut sys: ParticleSystem,
    cfg: &CboConfig,
    spec: &ObjectiveSpec,
) -> Result<ParticleSystem> {
    if sys.step + 1 > cfg.max_iter {
        return Err(CboError::Precondition(format!(
            "step {} exceeds max_iter {}",
            sys.step + 1,
            cfg.max_iter
        )));
    }
    let state = swarm_state(&sys, cfg, spec)?;
    advance(&mut sys, cfg, &state.theta_clipped)?;
    Ok(sys)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordRow {
    pub k: u64,
    /// Step size that produced this state (0 for the initial state).
    pub eta: f64,
    pub t: f64,
    pub mse: f64,
    pub best_value: f64,
    pub best_index: usize,
    pub theta: Vec<f64>,
    pub theta_clipped: Vec<f64>,
    pub ess: f64,
    /// `min_i |X^i - x*|^2`.
    pub min_sq_dist: f64,
    /// `|X^best - x*|^2` for the global best particle.
    pub best_sq_dist: f64,
    pub second_moment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub objective: String,
    pub config: CboConfig,
    pub seed: u64,
    pub rows: Vec<RecordRow>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn record_row(
    k: u64,
    eta: f64,
    t: f64,
    sys: &ParticleSystem,
    state: &SwarmState,
    x_star: &[f64],
) -> RecordRow {
    let dists: Vec<f64> = sys
        .positions
        .axis_iter(Axis(0))
        .map(|r| sq_dist(r.as_slice().unwrap_or(&r.to_vec()), x_star))
        .collect();
    let mse = dists.iter().sum::<f64>() / dists.len() as f64;
    let min_sq_dist = dists.iter().copied().fold(f64::INFINITY, f64::min);
    RecordRow {
        k,
        eta,
        t,
        mse,
        best_value: state.best_value,
        best_index: state.best_index,
        theta: state.theta.clone(),
        theta_clipped: state.theta_clipped.clone(),
        ess: ess(&state.weights),
        min_sq_dist,
        best_sq_dist: dists[state.best_index],
        second_moment: sys.second_moment(),
    }
}

/// Run `max_iter` steps, recording iteration 0, every `record_every`-th
/// iteration and the final one.
pub fn run_cbo(cfg: &CboConfig, spec: &ObjectiveSpec, record_every: u64) -> Result<RunRecord> {
    if record_every == 0 {
        return Err(invalid("record_every", "must be at least 1"));
    }
    let mut sys = init_particles(cfg)?;
    let mut rows = Vec::new();
    let mut t = 0.0;
    for k in 0..=cfg.max_iter {
        let state = swarm_state(&sys, cfg, spec)?;
        if k % record_every == 0 || k == cfg.max_iter {
            let eta_k = if k == 0 {
                0.0
            } else {
                eta(k, cfg.eta0, cfg.zeta)
            };
            rows.push(record_row(k, eta_k, t, &sys, &state, &spec.x_star));
        }
        if k == cfg.max_iter {
            break;
        }
        advance(&mut sys, cfg, &state.theta_clipped)?;
        t += eta(k + 1, cfg.eta0, cfg.zeta);
    }
    Ok(RunRecord {
        objective: spec.name.clone(),
        config: cfg.clone(),
        seed: cfg.seed,
        rows,
    })
}

impl RunRecord {
    pub fn last(&self) -> &RecordRow {
        self.rows
            .last()
            .expect("a run record always holds the initial row")
    }

    /// Mean of `field` over recorded rows with `k >= (1 - fraction) max_iter`.
    pub fn tail_mean(&self, fraction: f64, field: impl Fn(&RecordRow) -> f64) -> f64 {
        let cutoff = ((1.0 - fraction) * self.config.max_iter as f64).ceil() as u64;
        let tail: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.k >= cutoff)
            .map(&field)
            .collect();
        if tail.is_empty() {
            field(self.last())
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }

    /// CSV with header `k,eta,t,mse,best_value,best_index,ess,theta_0..`.
    /// Floats use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let d = self.config.dim;
        let mut out = String::from("k,eta,t,mse,best_value,best_index,ess");
        for j in 0..d {
            let _ = write!(out, ",theta_{j}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                r.k, r.eta, r.t, r.mse, r.best_value, r.best_index, r.ess
            );
            for v in &r.theta {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> serde_json::Value {
        let last = self.last();
        serde_json::json!({
            "objective": self.objective,
            "seed": self.seed,
            "config": self.config,
            "terminal_mse": last.mse,
            "terminal_best_value": last.best_value,
            "terminal_best_index": last.best_index,
            "terminal_k": last.k,
            "terminal_t": last.t,
        })
    }
}
