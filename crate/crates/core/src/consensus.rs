//! Consensus point, radial clipping and global best.
//!
//! Weights are computed in the log domain: the minimum value is subtracted
//! before exponentiation, so the best particle always has unnormalized
//! weight exactly 1 and the normalizer is at least 1. Every reduction runs
//! sequentially in index order, which keeps results bit-identical across
//! thread counts.

use ndarray::{ArrayView2, Axis};

use crate::error::{invalid, CboError, Result};

/// Normalized, non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    /// Normalize arbitrary non-negative weights.
    pub fn from_unnormalized(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(CboError::Empty("weights"));
        }
        if let Some(i) = raw.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CboError::NonFinite {
                context: "weights",
                index: i,
            });
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(invalid("weights", "all entries are zero"));
        }
        Ok(Self {
            weights: raw.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_unnormalized(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `exp(-alpha (v_i - min v))` without validation. Shared with the Monte
/// Carlo estimators, which also accept `alpha == 0`.
pub(crate) fn shifted_exp_weights(values: &[f64], alpha: f64) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    values.iter().map(|v| (-alpha * (v - min)).exp()).collect()
}

/// Weights proportional to `exp(-alpha * values)`.
pub fn softmin_weights(values: &[f64], alpha: f64) -> Result<WeightVector> {
    if values.is_empty() {
        return Err(CboError::Empty("values"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(CboError::NonFinite {
            context: "softmin values",
            index: i,
        });
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid(
            "alpha",
            format!("must be positive and finite, got {alpha}"),
        ));
    }
    WeightVector::from_unnormalized(shifted_exp_weights(values, alpha))
}

/// Weighted mean of the rows of `positions`.
///
/// The sum runs in row order. Each coordinate is then clamped to the range
/// spanned by the rows, which the exact value always satisfies.
pub fn consensus_point(positions: ArrayView2<'_, f64>, weights: &WeightVector) -> Result<Vec<f64>> {
    if positions.nrows() != weights.len() {
        return Err(CboError::DimensionMismatch {
            context: "consensus_point rows vs weights",
            expected: weights.len(),
            got: positions.nrows(),
        });
    }
    let d = positions.ncols();
    let mut theta = vec![0.0; d];
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for (row, &w) in positions.axis_iter(Axis(0)).zip(weights.as_slice()) {
        for j in 0..d {
            let x = row[j];
            theta[j] += w * x;
            lo[j] = lo[j].min(x);
            hi[j] = hi[j].max(x);
        }
    }
    for j in 0..d {
        theta[j] = theta[j].clamp(lo[j], hi[j]);
    }
    Ok(theta)
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Radial projection onto the closed ball of radius `radius`; `clip(0) = 0`.
///
/// The output norm never exceeds `radius`, so `clip` is idempotent.
pub fn clip(x: &[f64], radius: f64) -> Vec<f64> {
    let n = norm(x);
    if n <= radius {
        return x.to_vec();
    }
    let scale = radius / n;
    let mut y: Vec<f64> = x.iter().map(|v| v * scale).collect();
    while norm(&y) > radius {
        y.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
    }
    y
}

/// Index and position of the minimal value; ties go to the lowest index.
pub fn global_best(positions: ArrayView2<'_, f64>, values: &[f64]) -> Result<(usize, Vec<f64>)> {
    if values.is_empty() || positions.nrows() == 0 {
        return Err(CboError::Empty("particle system"));
    }
    if positions.nrows() != values.len() {
        return Err(CboError::DimensionMismatch {
            context: "global_best rows vs values",
            expected: values.len(),
            got: positions.nrows(),
        });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(CboError::NonFinite {
            context: "global_best values",
            index: i,
        });
    }
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    Ok((best, positions.row(best).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Domain};
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn softmin_examples() {
        assert_eq!(softmin_weights(&[5.0], 3.0).unwrap().as_slice(), &[1.0]);
        let w = softmin_weights(&[2.0, 2.0, 2.0], 7.0).unwrap();
        for v in w.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = softmin_weights(&[0.0, 1.0, 4.0], 1.0).unwrap();
        let z = 1.0 + (-1.0f64).exp() + (-4.0f64).exp();
        let expect = [1.0 / z, (-1.0f64).exp() / z, (-4.0f64).exp() / z];
        for (a, b) in w.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmin_errors() {
        assert!(matches!(softmin_weights(&[], 1.0), Err(CboError::Empty(_))));
        assert!(softmin_weights(&[1.0, f64::NAN], 1.0).is_err());
        assert!(softmin_weights(&[1.0], 0.0).is_err());
        assert!(softmin_weights(&[1.0], -1.0).is_err());
    }

    #[test]
    fn extreme_alpha_never_underflows_to_zero_total() {
        let w = softmin_weights(&[1e6, 1e6 + 1.0, 2e6], 1e9).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn consensus_examples() {
        let p = array![[3.0, -1.0]];
        let w = WeightVector::uniform(1).unwrap();
        assert_eq!(consensus_point(p.view(), &w).unwrap(), vec![3.0, -1.0]);

        let p = array![[0.0], [2.0]];
        let w = WeightVector::uniform(2).unwrap();
        assert_eq!(consensus_point(p.view(), &w).unwrap(), vec![1.0]);

        let bad = WeightVector::uniform(3).unwrap();
        assert!(consensus_point(p.view(), &bad).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(&[0.1, 0.2], 1.0), vec![0.1, 0.2]);
        let c = clip(&[3.0, 4.0], 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn global_best_examples() {
        let p = array![[0.0], [1.0], [2.0]];
        assert_eq!(global_best(p.view(), &[3.0, 1.0, 2.0]).unwrap().0, 1);
        let p2 = array![[0.0], [1.0]];
        assert_eq!(global_best(p2.view(), &[1.0, 1.0]).unwrap().0, 0);
        let empty = Array2::<f64>::zeros((0, 1));
        assert!(global_best(empty.view(), &[]).is_err());
    }

    #[test]
    fn global_best_matches_linear_scan() {
        let n = 200;
        let values: Vec<f64> = (0..n)
            .map(|i| rng::normal(4, Domain::Sampling, i, 0, 0))
            .collect();
        let p = Array2::from_shape_fn((n as usize, 1), |(i, _)| i as f64);
        let mut oracle = 0;
        for i in 0..values.len() {
            if values[i] < values[oracle] {
                oracle = i;
            }
        }
        let (idx, pt) = global_best(p.view(), &values).unwrap();
        assert_eq!(idx, oracle);
        assert_eq!(pt, vec![oracle as f64]);
    }

    proptest! {
        #[test]
        fn clip_is_nonexpansive_and_idempotent(
            x in proptest::collection::vec(-10.0f64..10.0, 3),
            y in proptest::collection::vec(-10.0f64..10.0, 3),
            r in 0.1f64..5.0,
        ) {
            let cx = clip(&x, r);
            let cy = clip(&y, r);
            prop_assert!(norm(&cx) <= r);
            let dc: Vec<f64> = cx.iter().zip(&cy).map(|(a, b)| a - b).collect();
            let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            prop_assert!(norm(&dc) <= norm(&d) + 1e-12);
            prop_assert_eq!(clip(&cx, r), cx);
        }

        #[test]
        fn weights_are_a_distribution(values in proptest::collection::vec(-50.0f64..50.0, 1..40), alpha in 0.01f64..100.0) {
            let w = softmin_weights(&values, alpha).unwrap();
            let total: f64 = w.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.as_slice().iter().all(|v| *v >= 0.0));
            prop_assert!(w.as_slice().iter().any(|v| *v > 0.0));
        }

        #[test]
        fn consensus_in_convex_hull(
            pts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 2), 1..30),
            alpha in 0.1f64..1000.0,
        ) {
            let n = pts.len();
            let p = Array2::from_shape_fn((n, 2), |(i, j)| pts[i][j]);
            let values: Vec<f64> = pts.iter().map(|r| r[0] * r[0] + (r[1] - 1.0).powi(2)).collect();
            let w = softmin_weights(&values, alpha).unwrap();
            let theta = consensus_point(p.view(), &w).unwrap();
            for j in 0..2 {
                let lo = pts.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= theta[j] && theta[j] <= hi);
            }
        }
    }
}
