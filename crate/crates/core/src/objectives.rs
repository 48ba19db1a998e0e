//! Test objectives with known minimizers and declared regularity constants.
//!
//! Each [`ObjectiveSpec`] carries the constants of the growth and local
//! strong-convexity assumptions the convergence analysis relies on:
//!
//! * `f(x) >= f* + (kappa/2) * |x - x*|^beta` everywhere,
//! * `|grad f(x)| <= lip_l * (1 + |x|^growth_a)`,
//! * `f` is `lambda`-strongly convex on the ball `B(x*, delta)`.
//!
//! The constants are declarations; [`check_growth`] and the gradient checks
//! in the tests probe them by sampling.

use std::f64::consts::{E, PI};
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CboError, Result};
use crate::rng::{self, Domain};

/// Radius stored for `delta` when the objective is strongly convex everywhere.
pub const UNBOUNDED_DELTA: f64 = 1e6;

/// Fixed quartic weight of `quartic_quad`.
pub const QUARTIC_EPS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    Quadratic,
    QuarticQuad,
    Rastrigin,
    Ackley,
}

impl Builtin {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "quadratic" => Ok(Self::Quadratic),
            "quartic_quad" => Ok(Self::QuarticQuad),
            "rastrigin" => Ok(Self::Rastrigin),
            "ackley" => Ok(Self::Ackley),
            other => Err(CboError::UnknownObjective(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Quadratic => "quadratic",
            Self::QuarticQuad => "quartic_quad",
            Self::Rastrigin => "rastrigin",
            Self::Ackley => "ackley",
        }
    }
}

type EvalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
enum Kind {
    Builtin(Builtin),
    Custom(Arc<EvalFn>),
}

/// Objective plus the constants of its regularity assumptions.
#[derive(Clone)]
pub struct ObjectiveSpec {
    pub name: String,
    pub dim: usize,
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub lambda: f64,
    pub delta: f64,
    pub kappa: f64,
    pub beta: f64,
    pub lip_l: f64,
    pub growth_a: f64,
    /// Set for objectives known to break the global growth condition.
    pub violates_growth: bool,
    kind: Kind,
}

impl fmt::Debug for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectiveSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("x_star", &self.x_star)
            .field("f_star", &self.f_star)
            .field("lambda", &self.lambda)
            .field("delta", &self.delta)
            .field("kappa", &self.kappa)
            .field("beta", &self.beta)
            .field("lip_l", &self.lip_l)
            .field("growth_a", &self.growth_a)
            .finish()
    }
}

/// Reference to a builtin objective as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveRef {
    pub name: String,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub shift: Option<Vec<f64>>,
}

impl ObjectiveRef {
    pub fn build(&self, fallback_dim: usize) -> Result<ObjectiveSpec> {
        let dim = self
            .dim
            .or_else(|| self.shift.as_ref().map(Vec::len))
            .unwrap_or(fallback_dim);
        let shift = self.shift.clone().unwrap_or_else(|| vec![0.0; dim]);
        builtin(&self.name, dim, &shift)
    }
}

fn sq_norm(u: impl Iterator<Item = f64>) -> f64 {
    u.map(|v| v * v).sum()
}

/// `|u|^beta`, using the squared norm directly when `beta == 2` so that the
/// growth bound of a pure quadratic is reproduced without rounding.
pub(crate) fn norm_pow(sq: f64, beta: f64) -> f64 {
    if beta == 2.0 {
        sq
    } else {
        sq.sqrt().powf(beta)
    }
}

fn eval_builtin(kind: Builtin, lambda: f64, x_star: &[f64], x: &[f64]) -> f64 {
    let diffs = x.iter().zip(x_star).map(|(a, b)| a - b);
    match kind {
        Builtin::Quadratic => 0.5 * lambda * sq_norm(diffs),
        Builtin::QuarticQuad => {
            let (sq, quart) = diffs.fold((0.0, 0.0), |(s, q), u| {
                let u2 = u * u;
                (s + u2, q + u2 * u2)
            });
            0.5 * lambda * sq + QUARTIC_EPS * quart
        }
        // 10 - 10 cos(2 pi u) = 20 sin^2(pi u), which avoids cancellation
        // near the minimizer.
        Builtin::Rastrigin => diffs.fold(0.0, |s, u| {
            let v = (PI * u).sin();
            s + u * u + 20.0 * v * v
        }),
        Builtin::Ackley => {
            let d = x.len() as f64;
            let (sq, cos) = diffs.fold((0.0, 0.0), |(s, c), u| {
                (s + u * u, c + (2.0 * PI * u).cos())
            });
            -20.0 * (-0.2 * (sq / d).sqrt()).exp() - (cos / d).exp() + 20.0 + E
        }
    }
}

/// Build a builtin objective whose minimizer is `shift`.
pub fn builtin(name: &str, dim: usize, shift: &[f64]) -> Result<ObjectiveSpec> {
    let kind = Builtin::parse(name)?;
    if dim == 0 {
        return Err(invalid("dim", "must be at least 1"));
    }
    if shift.len() != dim {
        return Err(CboError::DimensionMismatch {
            context: "objective shift",
            expected: dim,
            got: shift.len(),
        });
    }
    if let Some(i) = shift.iter().position(|v| !v.is_finite()) {
        return Err(CboError::NonFinite {
            context: "objective shift",
            index: i,
        });
    }
    let s = sq_norm(shift.iter().copied()).sqrt();
    let d = dim as f64;
    // Gradient bounds |grad f(x)| <= L (1 + |x|^a), derived with |x - x*| <= |x| + s.
    let (lambda, delta, kappa, beta, lip_l, growth_a, violates) = match kind {
        Builtin::Quadratic => (1.0, UNBOUNDED_DELTA, 1.0, 2.0, s.max(1.0), 1.0, false),
        Builtin::QuarticQuad => {
            let l = 2.0 * (1.0 + s) + 16.0 * QUARTIC_EPS * s.powi(3).max(1.0);
            (1.0, UNBOUNDED_DELTA, 1.0, 2.0, l, 3.0, false)
        }
        Builtin::Rastrigin => {
            let l = (2.0 * s + 20.0 * PI * d.sqrt()).max(2.0);
            (2.0, 0.05, 2.0, 2.0, l, 1.0, false)
        }
        Builtin::Ackley => {
            let l = (4.0 + 2.0 * PI * E) / d.sqrt();
            (1.0, 0.01, 0.1, 2.0, l, 1.0, true)
        }
    };
    Ok(ObjectiveSpec {
        name: kind.name().to_string(),
        dim,
        x_star: shift.to_vec(),
        f_star: 0.0,
        lambda,
        delta,
        kappa,
        beta,
        lip_l,
        growth_a,
        violates_growth: violates,
        kind: Kind::Builtin(kind),
    })
}

/// Constants attached to a user-supplied closure.
#[derive(Debug, Clone, Copy)]
pub struct DeclaredConstants {
    pub lambda: f64,
    pub delta: f64,
    pub kappa: f64,
    pub beta: f64,
    pub lip_l: f64,
    pub growth_a: f64,
}

impl ObjectiveSpec {
    /// Wrap an in-process closure. `f_star` is taken as `f(x_star)`.
    pub fn custom<F>(name: &str, x_star: Vec<f64>, constants: DeclaredConstants, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        let f_star = f(&x_star);
        Self {
            name: name.to_string(),
            dim: x_star.len(),
            x_star,
            f_star,
            lambda: constants.lambda,
            delta: constants.delta,
            kappa: constants.kappa,
            beta: constants.beta,
            lip_l: constants.lip_l,
            growth_a: constants.growth_a,
            violates_growth: false,
            kind: Kind::Custom(Arc::new(f)),
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            Kind::Builtin(b) => eval_builtin(*b, self.lambda, &self.x_star, x),
            Kind::Custom(f) => f(x),
        }
    }

    pub fn builtin_kind(&self) -> Option<Builtin> {
        match self.kind {
            Kind::Builtin(b) => Some(b),
            Kind::Custom(_) => None,
        }
    }

    /// True when `f` is exactly `(lambda/2)|x - x*|^2`, which unlocks the
    /// closed-form Gaussian tilt and proximal map.
    pub fn is_quadratic(&self) -> bool {
        self.builtin_kind() == Some(Builtin::Quadratic)
    }

    /// Central finite-difference gradient with step `1e-5 (1 + |x|)`.
    pub fn fd_gradient(&self, x: &[f64]) -> Vec<f64> {
        let h = 1e-5 * (1.0 + sq_norm(x.iter().copied()).sqrt());
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|j| {
                probe[j] = x[j] + h;
                let up = self.eval(&probe);
                probe[j] = x[j] - h;
                let down = self.eval(&probe);
                probe[j] = x[j];
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

/// Evaluate every row of `positions`; entries are returned in row order.
pub fn evaluate_batch(spec: &ObjectiveSpec, positions: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if positions.nrows() == 0 {
        return Ok(Vec::new());
    }
    if positions.ncols() != spec.dim {
        return Err(CboError::DimensionMismatch {
            context: "evaluate_batch columns",
            expected: spec.dim,
            got: positions.ncols(),
        });
    }
    if let Some((i, _)) = positions
        .axis_iter(Axis(0))
        .enumerate()
        .find(|(_, row)| row.iter().any(|v| !v.is_finite()))
    {
        return Err(CboError::NonFinite {
            context: "evaluate_batch positions",
            index: i,
        });
    }
    Ok(positions
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|row| match row.as_slice() {
            Some(s) => spec.eval(s),
            None => spec.eval(&row.to_vec()),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    pub pass: bool,
    pub worst_violation: f64,
    pub worst_point: Vec<f64>,
}

/// Uniform sample of `samples` points in the ball `B(center, radius)`.
pub fn sample_ball(center: &[f64], radius: f64, samples: usize, seed: u64) -> Array2<f64> {
    let d = center.len();
    let mut out = Array2::zeros((samples, d));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let dir: Vec<f64> = (0..d)
            .map(|j| rng::normal(seed, Domain::Sampling, i as u64, j as u64, 0))
            .collect();
        let norm = sq_norm(dir.iter().copied()).sqrt().max(f64::MIN_POSITIVE);
        let u = rng::uniform(seed, Domain::Sampling, i as u64, u64::MAX, 1);
        let r = radius * u.powf(1.0 / d as f64);
        for j in 0..d {
            row[j] = center[j] + r * dir[j] / norm;
        }
    }
    out
}

/// Probe `f(x) - f* - (kappa/2)|x - x*|^beta >= 0` on a uniform sample of
/// `B(x*, radius)`. A margin counts as a violation below `-1e-12 (1 + |f(x)|)`.
pub fn check_growth(
    spec: &ObjectiveSpec,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<GrowthReport> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(invalid("radius", "must be positive and finite"));
    }
    if samples == 0 {
        return Err(invalid("samples", "must be at least 1"));
    }
    let pts = sample_ball(&spec.x_star, radius, samples, seed);
    let mut worst = f64::INFINITY;
    let mut worst_point = spec.x_star.clone();
    let mut pass = true;
    for row in pts.axis_iter(Axis(0)) {
        let x = row.to_vec();
        let fx = spec.eval(&x);
        let sq = sq_norm(x.iter().zip(&spec.x_star).map(|(a, b)| a - b));
        let margin = fx - spec.f_star - 0.5 * spec.kappa * norm_pow(sq, spec.beta);
        if margin < -1e-12 * (1.0 + fx.abs()) {
            pass = false;
        }
        if margin < worst {
            worst = margin;
            worst_point = x;
        }
    }
    Ok(GrowthReport {
        pass,
        worst_violation: worst,
        worst_point,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn builtin_values() {
        let q = builtin("quadratic", 2, &[0.0, 0.0]).unwrap();
        assert_eq!(q.eval(&[0.0, 0.0]), 0.0);

        let r = builtin("rastrigin", 1, &[0.0]).unwrap();
        let expect = 0.25 + 10.0 - 10.0 * (PI).cos();
        assert!((r.eval(&[0.5]) - expect).abs() < 1e-12);
        assert!((r.eval(&[0.5]) - 20.25).abs() < 1e-12);

        let qq = builtin("quartic_quad", 1, &[0.0]).unwrap();
        assert!((qq.eval(&[1.0]) - 0.6).abs() < 1e-15);

        let a = builtin("ackley", 3, &[1.0, 2.0, 3.0]).unwrap();
        assert!(a.eval(&[1.0, 2.0, 3.0]).abs() < 1e-12);
        assert!(a.violates_growth);
    }

    #[test]
    fn builtin_errors() {
        assert!(matches!(
            builtin("sphere", 1, &[0.0]),
            Err(CboError::UnknownObjective(_))
        ));
        assert!(matches!(
            builtin("quadratic", 2, &[0.0]),
            Err(CboError::DimensionMismatch { .. })
        ));
        assert!(builtin("quadratic", 1, &[f64::NAN]).is_err());
        assert!(builtin("quadratic", 0, &[]).is_err());
    }

    #[test]
    fn minimizer_is_shift_and_unique_on_samples() {
        for name in ["quadratic", "quartic_quad", "rastrigin", "ackley"] {
            let spec = builtin(name, 2, &[0.3, -1.2]).unwrap();
            assert!(
                (spec.eval(&spec.x_star) - spec.f_star).abs() < 1e-12,
                "{name}"
            );
            let pts = sample_ball(&spec.x_star, 3.0, 500, 9);
            for row in pts.axis_iter(Axis(0)) {
                assert!(spec.eval(row.as_slice().unwrap()) > spec.f_star, "{name}");
            }
        }
    }

    #[test]
    fn batch_matches_rows() {
        let q = builtin("quadratic", 1, &[0.0]).unwrap();
        let v = evaluate_batch(&q, array![[0.0], [2.0]].view()).unwrap();
        assert_eq!(v, vec![0.0, 2.0]);

        let empty = Array2::<f64>::zeros((0, 1));
        assert!(evaluate_batch(&q, empty.view()).unwrap().is_empty());

        let r = builtin("rastrigin", 2, &[0.0, 0.0]).unwrap();
        let v = evaluate_batch(&r, array![[0.5, 0.5]].view()).unwrap();
        assert!((v[0] - 40.5).abs() < 1e-12);

        assert!(matches!(
            evaluate_batch(&q, array![[1.0], [f64::INFINITY]].view()),
            Err(CboError::NonFinite { index: 1, .. })
        ));
        assert!(evaluate_batch(&q, array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn growth_checks() {
        let q = builtin("quadratic", 3, &[0.5, 0.0, -0.5]).unwrap();
        let rep = check_growth(&q, 10.0, 2000, 1).unwrap();
        assert!(rep.pass);
        assert!(rep.worst_violation.abs() < 1e-9);

        for name in ["quadratic", "quartic_quad", "rastrigin"] {
            let spec = builtin(name, 2, &[1.0, -2.0]).unwrap();
            for radius in [1.0, 10.0, 100.0] {
                let rep = check_growth(&spec, radius, 2000, 4).unwrap();
                assert!(rep.pass, "{name} at radius {radius}: {rep:?}");
            }
        }

        let mut ackley = builtin("ackley", 2, &[0.0, 0.0]).unwrap();
        ackley.kappa = 0.1;
        let rep = check_growth(&ackley, 100.0, 2000, 4).unwrap();
        assert!(!rep.pass);
        assert!(rep.worst_violation < -100.0);

        assert!(check_growth(&q, 0.0, 10, 1).is_err());
        assert!(check_growth(&q, 1.0, 0, 1).is_err());
    }

    #[test]
    fn fd_gradient_obeys_declared_growth() {
        for name in ["quadratic", "quartic_quad", "rastrigin", "ackley"] {
            for shift in [vec![0.0, 0.0], vec![1.5, -0.7]] {
                let spec = builtin(name, 2, &shift).unwrap();
                let pts = sample_ball(&[0.0, 0.0], 20.0, 1000, 17);
                for row in pts.axis_iter(Axis(0)) {
                    let x = row.to_vec();
                    let g = spec.fd_gradient(&x);
                    let gn = sq_norm(g.iter().copied()).sqrt();
                    let xn = sq_norm(x.iter().copied()).sqrt();
                    let bound = spec.lip_l * (1.0 + xn.powf(spec.growth_a)) * (1.0 + 1e-3);
                    assert!(gn <= bound, "{name} at {x:?}: {gn} > {bound}");
                }
            }
        }
    }

    #[test]
    fn rastrigin_strongly_convex_on_declared_ball() {
        let spec = builtin("rastrigin", 2, &[0.2, 0.1]).unwrap();
        let pts = sample_ball(&spec.x_star, spec.delta, 300, 2);
        let rows: Vec<Vec<f64>> = pts.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
        for x in rows.iter().take(60) {
            let g = spec.fd_gradient(x);
            for y in &rows {
                let lin: f64 = g
                    .iter()
                    .zip(y.iter().zip(x))
                    .map(|(gi, (yi, xi))| gi * (yi - xi))
                    .sum();
                let sq = sq_norm(y.iter().zip(x).map(|(a, b)| a - b));
                let lhs = spec.eval(y);
                let rhs = spec.eval(x) + lin + 0.5 * spec.lambda * sq;
                assert!(lhs >= rhs - 1e-9, "{lhs} < {rhs}");
            }
        }
    }

    #[test]
    fn objective_ref_builds() {
        let r: ObjectiveRef =
            serde_json::from_str(r#"{"name":"rastrigin","shift":[1.0,2.0]}"#).unwrap();
        let spec = r.build(5).unwrap();
        assert_eq!(spec.dim, 2);
        let r: ObjectiveRef = serde_json::from_str(r#"{"name":"quadratic"}"#).unwrap();
        assert_eq!(r.build(3).unwrap().x_star, vec![0.0; 3]);
    }
}
