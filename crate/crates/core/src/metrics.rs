//! Distances, diagnostics and fits shared by the experiments.

use ndarray::{ArrayView2, Axis};
use serde::Serialize;

use crate::consensus::WeightVector;
use crate::dynamics::{first_index_reaching, RunRecord};
use crate::error::{invalid, CboError, Result};

/// Largest point set for which `w2_exact` solves the assignment problem.
pub const W2_EXACT_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// `(1/n) sum_i |X^i - x*|^2`.
pub fn mse_to_minimizer(positions: ArrayView2<'_, f64>, x_star: &[f64]) -> Result<f64> {
    if positions.nrows() == 0 {
        return Err(CboError::Empty("positions"));
    }
    if positions.ncols() != x_star.len() {
        return Err(CboError::DimensionMismatch {
            context: "mse_to_minimizer",
            expected: x_star.len(),
            got: positions.ncols(),
        });
    }
    let total: f64 = positions
        .axis_iter(Axis(0))
        .map(|r| {
            r.iter()
                .zip(x_star)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(total / positions.nrows() as f64)
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials, O(n^3)). Returns `assign[row] = col`.
pub fn assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; index 0 is the virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Wasserstein-2 distance between two equal-size empirical measures.
pub fn w2_exact(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    let n = a.nrows();
    if b.nrows() != n {
        return Err(CboError::DimensionMismatch {
            context: "w2_exact point counts",
            expected: n,
            got: b.nrows(),
        });
    }
    if a.ncols() != b.ncols() {
        return Err(CboError::DimensionMismatch {
            context: "w2_exact dimensions",
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    if n == 0 {
        return Err(CboError::Empty("w2_exact point sets"));
    }
    if n > W2_EXACT_LIMIT {
        return Err(CboError::TooLarge {
            n,
            limit: W2_EXACT_LIMIT,
        });
    }
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| sq_dist(a.row(i), b.row(j))).collect())
        .collect();
    let assign = assignment(&cost);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((total / n as f64).sqrt())
}

/// Effective sample size `1 / sum w_i^2` of normalized weights.
pub fn ess(weights: &WeightVector) -> f64 {
    let s: f64 = weights.as_slice().iter().map(|w| w * w).sum();
    (1.0 / s).clamp(1.0, weights.len() as f64)
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    if xs.len() != ys.len() {
        return Err(CboError::DimensionMismatch {
            context: "linear_fit",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    let n = xs.len();
    if n < 2 {
        return Err(invalid("points", "a fit needs at least two points"));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("xs", "all abscissae are equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(FitResult {
        slope,
        intercept,
        r_squared,
        n_points: n,
    })
}

/// OLS on `(ln x, ln y)`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(invalid("data", "log-log fit requires positive finite data"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockFit {
    pub rho: f64,
    pub floor: f64,
    pub r_squared: f64,
    /// Recorded iteration used for each block boundary.
    pub boundaries: Vec<u64>,
    pub values: Vec<f64>,
}

pub const MIN_BLOCKS: usize = 4;

/// Fit `u_{j+1} = rho u_j + floor` to a sequence of block-boundary values.
pub fn affine_recursion_fit(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.len() < MIN_BLOCKS + 1 {
        return Err(CboError::TooFewBlocks {
            found: values.len().saturating_sub(1),
            required: MIN_BLOCKS,
        });
    }
    let fit = linear_fit(&values[..values.len() - 1], &values[1..])?;
    Ok((fit.slope, fit.intercept, fit.r_squared))
}

/// Block-wise contraction fit on the MSE column of a run.
///
/// Block `j` starts at `k_j = first_index_reaching(j T_block)`. When the
/// record skips `k_j`, the nearest recorded iteration at or after it is used.
pub fn block_contraction_fit(record: &RunRecord, t_block: f64) -> Result<BlockFit> {
    if !(t_block > 0.0 && t_block.is_finite()) {
        return Err(invalid("t_block", "must be positive and finite"));
    }
    let cfg = &record.config;
    let last_k = record.last().k;
    let mut boundaries = Vec::new();
    let mut values = Vec::new();
    for j in 0.. {
        let kj = first_index_reaching(j as f64 * t_block, cfg.eta0, cfg.zeta);
        if kj > last_k {
            break;
        }
        let row = record
            .rows
            .iter()
            .find(|r| r.k >= kj)
            .expect("last row has k >= kj");
        boundaries.push(row.k);
        values.push(row.mse);
    }
    let (rho, floor, r_squared) = affine_recursion_fit(&values)?;
    Ok(BlockFit {
        rho,
        floor,
        r_squared,
        boundaries,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProximityReport {
    pub var_in_band: bool,
    pub variances: Vec<f64>,
    pub band: (f64, f64),
    pub excess_kurtosis: f64,
}

/// Variance band `[gamma/(2 alpha), max(gamma/alpha, sigma0^2)]` with 20%
/// slack on each side, and pooled excess kurtosis.
pub fn gaussian_proximity(
    positions: ArrayView2<'_, f64>,
    alpha: f64,
    gamma: f64,
    sigma0_sq: f64,
) -> Result<ProximityReport> {
    let n = positions.nrows();
    if n < 100 {
        return Err(invalid(
            "positions",
            format!("need at least 100 particles, got {n}"),
        ));
    }
    let lo = 0.8 * gamma / (2.0 * alpha);
    let hi = 1.2 * (gamma / alpha).max(sigma0_sq);
    let nf = n as f64;
    let mut variances = Vec::new();
    let mut kurt_sum = 0.0;
    let mut kurt_count = 0usize;
    for col in positions.axis_iter(Axis(1)) {
        let mean = col.sum() / nf;
        let m2 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
        let m4 = col.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
        variances.push(m2 * nf / (nf - 1.0));
        if m2 > 0.0 {
            kurt_sum += m4 / (m2 * m2) - 3.0;
            kurt_count += 1;
        }
    }
    let var_in_band = variances.iter().all(|v| (lo..=hi).contains(v));
    let excess_kurtosis = if kurt_count == 0 {
        f64::NAN
    } else {
        kurt_sum / kurt_count as f64
    };
    Ok(ProximityReport {
        var_in_band,
        variances,
        band: (lo, hi),
        excess_kurtosis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Domain};
    use ndarray::{array, Array2};

    fn cloud(n: usize, d: usize, seed: u64) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |(i, j)| {
            rng::normal(seed, Domain::Sampling, i as u64, j as u64, 0)
        })
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    pub(crate) fn w2_brute(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let n = a.nrows();
        permutations(n)
            .iter()
            .map(|p| (0..n).map(|i| sq_dist(a.row(i), b.row(p[i]))).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            / n as f64
    }

    #[test]
    fn mse_examples() {
        let p = array![[1.0, 2.0], [1.0, 2.0]];
        assert_eq!(mse_to_minimizer(p.view(), &[1.0, 2.0]).unwrap(), 0.0);
        let p = array![[2.0, 2.0], [0.0, 2.0]];
        assert_eq!(mse_to_minimizer(p.view(), &[1.0, 2.0]).unwrap(), 1.0);
        let c = cloud(50, 3, 9);
        let xs = [0.1, -0.2, 0.3];
        let mut acc = 0.0;
        for i in 0..50 {
            for j in 0..3 {
                acc += (c[[i, j]] - xs[j]).powi(2);
            }
        }
        assert!((mse_to_minimizer(c.view(), &xs).unwrap() - acc / 50.0).abs() < 1e-12);
        assert!(mse_to_minimizer(c.view(), &[0.0]).is_err());
    }

    #[test]
    fn w2_examples() {
        let a = cloud(7, 2, 1);
        assert_eq!(w2_exact(a.view(), a.view()).unwrap(), 0.0);
        let x = array![[1.0, 2.0]];
        let y = array![[4.0, 6.0]];
        assert!((w2_exact(x.view(), y.view()).unwrap() - 5.0).abs() < 1e-15);
        let big = Array2::<f64>::zeros((513, 1));
        assert!(matches!(
            w2_exact(big.view(), big.view()),
            Err(CboError::TooLarge { .. })
        ));
        assert!(w2_exact(a.view(), x.view()).is_err());
    }

    #[test]
    fn w2_matches_brute_force() {
        for n in 1..=6 {
            for s in 0..5 {
                let a = cloud(n, 2, 100 + s);
                let b = cloud(n, 2, 200 + s);
                let exact = w2_exact(a.view(), b.view()).unwrap();
                let brute = w2_brute(&a, &b).sqrt();
                assert!((exact - brute).abs() < 1e-12, "n {n}: {exact} vs {brute}");
            }
        }
    }

    #[test]
    fn w2_is_a_metric_and_permutation_invariant() {
        for s in 0..20 {
            let a = cloud(12, 2, 300 + s);
            let b = cloud(12, 2, 400 + s);
            let c = cloud(12, 2, 500 + s);
            let ab = w2_exact(a.view(), b.view()).unwrap();
            let ba = w2_exact(b.view(), a.view()).unwrap();
            let bc = w2_exact(b.view(), c.view()).unwrap();
            let ac = w2_exact(a.view(), c.view()).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ac <= ab + bc + 1e-10);
            let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
            let pa = a.select(Axis(0), &perm);
            let pb = b.select(Axis(0), &perm);
            assert!((w2_exact(pa.view(), pb.view()).unwrap() - ab).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_is_w2_squared_to_dirac() {
        let c = cloud(40, 2, 77);
        let xs = [0.3, -0.1];
        let dirac = Array2::from_shape_fn((40, 2), |(_, j)| xs[j]);
        let w = w2_exact(c.view(), dirac.view()).unwrap();
        assert!((w * w - mse_to_minimizer(c.view(), &xs).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn ess_examples() {
        assert_eq!(ess(&WeightVector::uniform(8).unwrap()), 8.0);
        let one_hot = WeightVector::from_unnormalized(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(ess(&one_hot), 1.0);
        let w = WeightVector::from_unnormalized(vec![0.5, 0.25, 0.25]).unwrap();
        assert!((ess(&w) - 8.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn loglog_examples() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 / x).collect();
        let f = loglog_slope(&xs, &ys).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        let f = loglog_slope(&xs, &[2.0; 4]).unwrap();
        assert_eq!(f.slope, 0.0);
        assert!(loglog_slope(&xs, &[1.0, 0.0, 1.0, 1.0]).is_err());

        // Closed-form OLS via normal equations.
        let ys = [1.1, 0.55, 0.31, 0.12];
        let lx: Vec<f64> = xs.iter().map(|v: &f64| v.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|v: &f64| v.ln()).collect();
        let n = 4.0;
        let sx: f64 = lx.iter().sum();
        let sy: f64 = ly.iter().sum();
        let sxx: f64 = lx.iter().map(|v| v * v).sum();
        let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| a * b).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let intercept = (sy - slope * sx) / n;
        let f = loglog_slope(&xs, &ys).unwrap();
        assert!((f.slope - slope).abs() < 1e-12);
        assert!((f.intercept - intercept).abs() < 1e-12);
    }

    #[test]
    fn affine_recursion_examples() {
        let geo: Vec<f64> = (0..8).map(|j| 0.5f64.powi(j)).collect();
        let (rho, floor, _) = affine_recursion_fit(&geo).unwrap();
        assert!((rho - 0.5).abs() < 1e-12 && floor.abs() < 1e-12);

        let mut u = vec![3.0];
        for _ in 0..8 {
            u.push(0.5 * u.last().unwrap() + 0.1);
        }
        let (rho, floor, _) = affine_recursion_fit(&u).unwrap();
        assert!((rho - 0.5).abs() < 1e-12 && (floor - 0.1).abs() < 1e-12);

        assert!(matches!(
            affine_recursion_fit(&[1.0, 0.5, 0.25]),
            Err(CboError::TooFewBlocks { .. })
        ));
    }

    #[test]
    fn proximity_examples() {
        let (alpha, gamma) = (100.0_f64, 4.0);
        let sd = (gamma / alpha).sqrt();
        let g = Array2::from_shape_fn((10_000, 2), |(i, j)| {
            sd * rng::normal(8, Domain::Sampling, i as u64, j as u64, 0)
        });
        let r = gaussian_proximity(g.view(), alpha, gamma, gamma / alpha).unwrap();
        assert!(r.var_in_band);
        assert!(r.excess_kurtosis.abs() < 0.2, "{}", r.excess_kurtosis);

        let c = Array2::from_elem((200, 2), 0.7);
        assert!(
            !gaussian_proximity(c.view(), alpha, gamma, 0.0)
                .unwrap()
                .var_in_band
        );

        let scale = (3.0 * gamma / alpha).sqrt();
        let u = Array2::from_shape_fn((10_000, 1), |(i, _)| {
            scale * (2.0 * rng::uniform(8, Domain::Sampling, i as u64, 5, 0) - 1.0)
        });
        let r = gaussian_proximity(u.view(), alpha, gamma, gamma / alpha).unwrap();
        assert!(r.var_in_band);
        assert!(
            (r.excess_kurtosis + 1.2).abs() < 0.1,
            "{}",
            r.excess_kurtosis
        );
    }
}
