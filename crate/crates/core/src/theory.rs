//! Population-level evaluation of the asymptotic variances, the standard-error
//! ratio grids built from them, and the exact covariance of stacked-sample
//! membership indicators.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::designs::design_variance_poisson_theoretical;
use crate::error::{invalid, Error, Result};
use crate::inference::{cov_factor, design_factor, info_weights, var_beta, var_mu, VarianceComponents};
use crate::linalg::{add_outer, symmetrize};
use crate::model::{FinitePopulation, MethodKind};
use crate::propensity::links::expit;
use crate::simlab::{generate_population, Overlap};

/// Sampling fractions of the convenience sample used by the default grid.
pub const DEFAULT_F_C: [f64; 4] = [0.05, 0.19, 0.51, 0.85];
/// Sampling fractions of the reference sample used by the default grid.
pub const DEFAULT_F_R: [f64; 15] = [
    0.02, 0.03, 0.05, 0.07, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0,
];
/// Population size of the numerical study.
pub const DEFAULT_GRID_N: usize = 100_000;

#[derive(Debug, Clone)]
pub struct TheoreticalVariances {
    pub var_mu: f64,
    pub var_beta: DMatrix<f64>,
    /// `H` was numerically singular and the variances are infinite.
    pub singular: bool,
}

/// Asymptotic variances of the mean and coefficients of a one-step estimator,
/// evaluated from the true probabilities of every population unit. The design
/// variance uses the Poisson-design formula.
pub fn theoretical_variances(pop: &FinitePopulation, method: MethodKind) -> Result<TheoreticalVariances> {
    if method == MethodKind::Alp {
        return Err(invalid("asymptotic variances are only defined for the one-step estimators"));
    }
    let design = pop.design();
    let k = design.ncols();
    let n = pop.len();
    let mu = pop.mean_y();
    let (pc, pr, y) = (pop.pi_c_true(), pop.pi_r_true(), pop.y());

    let mut h = DMatrix::zeros(k, k);
    let mut a = DMatrix::zeros(k, k);
    let mut c_vec = nalgebra::DVector::zeros(k);
    let mut c_b = nalgebra::DVector::zeros(k);
    let mut var_u = 0.0;
    let mut summands = DMatrix::zeros(n, k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            row[j] = design[(i, j)];
        }
        let resid = y[i] - mu;
        var_u += (1.0 - pc[i]) / pc[i] * resid * resid;
        let (wh, wa) = info_weights(method, pc[i], pr[i]);
        add_outer(&mut h, &row, wh);
        add_outer(&mut a, &row, wa);
        let cf = cov_factor(method, pc[i], pr[i]);
        let s = design_factor(method, pc[i], pr[i]);
        for j in 0..k {
            c_vec[j] += cf * resid * row[j];
            c_b[j] += (1.0 - pc[i]) * resid * row[j];
            summands[(i, j)] = s * row[j];
        }
    }
    symmetrize(&mut h);
    symmetrize(&mut a);
    let d = design_variance_poisson_theoretical(&summands, pr.as_slice())?.matrix;
    let comps = VarianceComponents::assemble(method, h, a, d, c_vec, c_b, var_u, n as f64);
    match var_beta(&comps) {
        Some(vb) => Ok(TheoreticalVariances {
            var_mu: var_mu(&comps).0,
            var_beta: vb,
            singular: false,
        }),
        None => Ok(TheoreticalVariances {
            var_mu: f64::INFINITY,
            var_beta: DMatrix::from_element(k, k, f64::INFINITY),
            singular: true,
        }),
    }
}

/// Finds the intercept `b0` such that the mean of `expit(b0 + slope * x)`
/// over `x` equals `target`, by bisection on `[-20, 20]`.
pub fn calibrate_intercept(x: &[f64], slope: f64, target: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(invalid("no covariate values"));
    }
    let mean_at = |b0: f64| x.iter().map(|&v| expit(b0 + slope * v)).sum::<f64>() / x.len() as f64;
    let (mut lo, mut hi) = (-20.0, 20.0);
    let (mean_lo, mean_hi) = (mean_at(lo), mean_at(hi));
    if !(target > mean_lo && target < mean_hi) {
        return Err(Error::Bisection { target, lo, hi, mean_lo, mean_hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let m = mean_at(mid);
        if (m - target).abs() <= 1e-10 {
            return Ok(mid);
        }
        if m < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    let m = mean_at(mid);
    if (m - target).abs() > 1e-6 {
        return Err(Error::Bisection { target, lo, hi, mean_lo: mean_at(lo), mean_hi: mean_at(hi) });
    }
    Ok(mid)
}

/// Standard errors of one method at one grid point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MethodSe {
    pub method: MethodKind,
    /// Standard error of the slope coefficient.
    pub se_beta: f64,
    pub se_mu: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub f_c: f64,
    pub f_r: f64,
    pub overlap: Overlap,
    pub methods: Vec<MethodSe>,
}

impl GridPoint {
    pub fn get(&self, method: MethodKind) -> Option<&MethodSe> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// `se(num) / se(den)` for the slope and the mean.
    pub fn ratio(&self, num: MethodKind, den: MethodKind) -> Option<(f64, f64)> {
        let (a, b) = (self.get(num)?, self.get(den)?);
        Some((a.se_beta / b.se_beta, a.se_mu / b.se_mu))
    }
}

/// Evaluates all one-step methods on a grid of sampling fractions.
///
/// `base` supplies covariates, outcomes and reference size measures; for each
/// `f_c` the participation intercept is recalibrated (slope `beta_c1`) and for
/// each `f_r` the reference probabilities are recalibrated from the sizes.
/// Output order follows the input lists, `f_c` outermost.
pub fn se_ratio_grid(
    base: &FinitePopulation,
    beta_c1: f64,
    f_c_list: &[f64],
    f_r_list: &[f64],
    overlap: Overlap,
) -> Result<Vec<GridPoint>> {
    if f_c_list.is_empty() || f_r_list.is_empty() {
        return Err(invalid("grid lists must be nonempty"));
    }
    if base.n_covariates() != 1 {
        return Err(invalid("the numerical study uses a single covariate"));
    }
    let x: Vec<f64> = base.x().column(0).iter().copied().collect();
    let with_pc = f_c_list
        .iter()
        .map(|&f_c| {
            let b0 = calibrate_intercept(&x, beta_c1, f_c)?;
            let pc = nalgebra::DVector::from_iterator(x.len(), x.iter().map(|&v| expit(b0 + beta_c1 * v)));
            Ok((f_c, base.with_pi_c(pc)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(f64, &FinitePopulation, f64)> = with_pc
        .iter()
        .flat_map(|(f_c, pop)| f_r_list.iter().map(move |&f_r| (*f_c, pop, f_r)))
        .collect();
    jobs.par_iter()
        .map(|&(f_c, pop, f_r)| {
            let pop = pop.with_reference_fraction(f_r)?;
            let methods = MethodKind::ONE_STEP
                .iter()
                .map(|&method| {
                    let v = theoretical_variances(&pop, method)?;
                    Ok(MethodSe {
                        method,
                        se_beta: v.var_beta[(1, 1)].sqrt(),
                        se_mu: v.var_mu.sqrt(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GridPoint { f_c, f_r, overlap, methods })
        })
        .collect()
}

/// Runs [`se_ratio_grid`] for both overlap settings on populations of size
/// `n` generated from `seed`.
pub fn numerical_study(seed: u64, n: usize, f_c_list: &[f64], f_r_list: &[f64]) -> Result<Vec<GridPoint>> {
    numerical_study_for(seed, n, &[Overlap::High, Overlap::Low], f_c_list, f_r_list)
}

/// As [`numerical_study`] restricted to the given overlap settings. Each
/// overlap's population depends only on `seed` and the overlap itself.
pub fn numerical_study_for(
    seed: u64,
    n: usize,
    overlaps: &[Overlap],
    f_c_list: &[f64],
    f_r_list: &[f64],
) -> Result<Vec<GridPoint>> {
    let mut out = Vec::new();
    for &overlap in overlaps {
        let mut rng = crate::rng::stream(seed, &[crate::rng::label("numstudy"), crate::rng::label(overlap.as_str())]);
        let base = generate_population(n, 0.0, 1.0, overlap.beta_r(), &mut rng)?;
        out.extend(se_ratio_grid(&base, 1.0, f_c_list, f_r_list, overlap)?);
    }
    Ok(out)
}

/// Writes grid points as `f_c,f_r,overlap,method,se_beta,se_mu`, one row per method.
pub fn write_grid_csv<W: Write>(points: &[GridPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["f_c", "f_r", "overlap", "method", "se_beta", "se_mu"])?;
    for p in points {
        for m in &p.methods {
            w.write_record([
                p.f_c.to_string(),
                p.f_r.to_string(),
                p.overlap.as_str().to_string(),
                m.method.as_str().to_string(),
                format!("{:.10e}", m.se_beta),
                format!("{:.10e}", m.se_mu),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Exact covariance of the convenience-membership indicators of two distinct
/// records in the stacked sample, given their membership probabilities and
/// the population size.
pub fn cov_iz_exact(pi_z_i: f64, pi_z_j: f64, n: usize) -> Result<f64> {
    if !(pi_z_i > 0.0 && pi_z_i < 1.0 && pi_z_j > 0.0 && pi_z_j < 1.0) {
        return Err(invalid("membership probabilities must lie in (0,1)"));
    }
    if n < 2 {
        return Err(invalid("population size must be at least 2"));
    }
    let m = (n - 1) as f64;
    let f = 1.0 / (1.0 + ((1.0 - pi_z_i) * pi_z_j + pi_z_i * (1.0 - pi_z_j)) / m);
    let g = (1.0 + (1.0 - pi_z_j) / m) * (1.0 + (1.0 - pi_z_i) / m);
    Ok(pi_z_i * pi_z_j * f * (1.0 - f * g))
}

/// Largest population handled by [`cov_iz_bruteforce`].
pub const BRUTE_FORCE_MAX_N: usize = 6;

/// Covariance of membership indicators by exhaustive enumeration.
///
/// The doubled population holds a convenience copy and a reference copy of
/// each of the `N` units; both copies are Poisson-sampled independently. Two
/// distinct records are drawn uniformly, the first carrying the probabilities
/// of unit `k` and the second those of unit `l`, and all `2^(2N)` inclusion
/// outcomes are enumerated. Entry `(k, l)` is the covariance of the two
/// records' convenience indicators given that both are in the stacked sample.
pub fn cov_iz_bruteforce(pi_c: &[f64], pi_r: &[f64]) -> Result<DMatrix<f64>> {
    let n = pi_c.len();
    if n != pi_r.len() {
        return Err(invalid("pi_c and pi_r differ in length"));
    }
    if !(2..=BRUTE_FORCE_MAX_N).contains(&n) {
        return Err(invalid(format!(
            "exhaustive enumeration needs 2 <= N <= {BRUTE_FORCE_MAX_N}, got {n}"
        )));
    }
    if pi_c.iter().chain(pi_r).any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(invalid("probabilities must lie in (0,1]; the conditioning event would be empty"));
    }
    let records = 2 * n;
    let pair_weight = 1.0 / (records * (records - 1)) as f64;
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in 0..n {
            // accumulated probabilities of {both in S}, {a conv, both in S}, ...
            let (mut both, mut a_conv, mut b_conv, mut ab_conv) = (0.0, 0.0, 0.0, 0.0);
            for pos_a in 0..records {
                for pos_b in 0..records {
                    if pos_a == pos_b {
                        continue;
                    }
                    // record r < n is the convenience copy of unit r, else the reference copy
                    let prob = |r: usize| {
                        let unit = if r == pos_a { k } else if r == pos_b { l } else { r % n };
                        if r < n { pi_c[unit] } else { pi_r[unit] }
                    };
                    for outcome in 0u32..(1 << records) {
                        let mut p = pair_weight;
                        for r in 0..records {
                            let q = prob(r);
                            p *= if outcome >> r & 1 == 1 { q } else { 1.0 - q };
                        }
                        if p == 0.0 || outcome >> pos_a & 1 == 0 || outcome >> pos_b & 1 == 0 {
                            continue;
                        }
                        let (za, zb) = (pos_a < n, pos_b < n);
                        both += p;
                        if za {
                            a_conv += p;
                        }
                        if zb {
                            b_conv += p;
                        }
                        if za && zb {
                            ab_conv += p;
                        }
                    }
                }
            }
            out[(k, l)] = ab_conv / both - (a_conv / both) * (b_conv / both);
        }
    }
    Ok(out)
}
