//! Sampling-design primitives: size-to-probability calibration, Poisson and
//! systematic PPS selection, and design variances of weighted totals.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg::{add_outer, symmetrize};

/// Probabilities at or above this are treated as certainty selections.
pub const CERTAINTY: f64 = 1.0 - 1e-12;

/// Converts positive size measures into inclusion probabilities summing to `n`.
///
/// Probabilities proportional to size that would exceed one are capped at one
/// and the remaining expected sample size is spread over the other units,
/// repeating until no new unit crosses one.
pub fn calibrate_inclusion_probs(sizes: &[f64], n: f64) -> Result<Vec<f64>> {
    let big_n = sizes.len();
    if big_n == 0 {
        return Err(invalid("no size measures"));
    }
    if !(n >= 1.0 && n.is_finite()) {
        return Err(invalid(format!("target sample size {n} must be at least 1")));
    }
    if n > big_n as f64 {
        return Err(invalid(format!(
            "target sample size {n} exceeds population size {big_n}"
        )));
    }
    if let Some(i) = sizes.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(invalid(format!("size measure {i} is not strictly positive")));
    }

    let mut pi = vec![0.0; big_n];
    let mut capped = vec![false; big_n];
    let mut n_capped = 0usize;
    // Each pass either caps a new unit or terminates.
    for _ in 0..=big_n {
        let remaining = n - n_capped as f64;
        let open_total: f64 = sizes
            .iter()
            .zip(&capped)
            .filter(|(_, &c)| !c)
            .map(|(s, _)| s)
            .sum();
        let mut newly_capped = false;
        for i in 0..big_n {
            if capped[i] {
                continue;
            }
            let p = if open_total > 0.0 {
                remaining * sizes[i] / open_total
            } else {
                0.0
            };
            if p >= 1.0 {
                pi[i] = 1.0;
                capped[i] = true;
                n_capped += 1;
                newly_capped = true;
            } else {
                pi[i] = p;
            }
        }
        if !newly_capped {
            break;
        }
    }
    Ok(pi)
}

/// Poisson sampling: unit `i` enters independently with probability `pi[i]`.
/// Returns the selected indices in increasing order.
pub fn poisson_sample<R: Rng + ?Sized>(pi: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    if let Some(i) = pi.iter().position(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(invalid(format!("pi[{i}] = {} is not a probability", pi[i])));
    }
    Ok(pi
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| (rng.random::<f64>() < p).then_some(i))
        .collect())
}

/// Systematic PPS selection on a uniformly permuted frame.
///
/// `pi` must sum to an integer `n`; exactly `n` distinct units are returned in
/// increasing order, each with marginal inclusion probability `pi[i]`.
pub fn pps_systematic_sample<R: Rng + ?Sized>(pi: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    if let Some(i) = pi.iter().position(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(invalid(format!("pi[{i}] = {} is not in (0,1]", pi[i])));
    }
    let total: f64 = pi.iter().sum();
    let n = total.round();
    if (total - n).abs() > 1e-6 || n < 1.0 {
        return Err(invalid(format!(
            "inclusion probabilities sum to {total}, not a positive integer"
        )));
    }
    let n = n as usize;

    let mut order: Vec<usize> = (0..pi.len()).collect();
    order.shuffle(rng);

    let start: f64 = rng.random();
    let mut next = start;
    let mut cumulative = 0.0;
    let mut selected = Vec::with_capacity(n);
    let last = order.len() - 1;
    for (pos, &unit) in order.iter().enumerate() {
        cumulative += pi[unit];
        if pos == last {
            // absorb rounding drift so the final point always lands
            cumulative = n as f64;
        }
        if next < cumulative && selected.len() < n {
            selected.push(unit);
            next += 1.0;
        }
    }
    debug_assert_eq!(selected.len(), n);
    selected.sort_unstable();
    Ok(selected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DesignVarianceKind {
    HansenHurwitz,
    PoissonTheoretical,
}

/// Design variance-covariance matrix of a weighted total over the reference sample.
#[derive(Debug, Clone)]
pub struct DesignVarianceEstimate {
    pub matrix: DMatrix<f64>,
    pub estimator_kind: DesignVarianceKind,
}

fn check_summands(summands: &DMatrix<f64>, pi_r: &[f64]) -> Result<()> {
    if summands.nrows() != pi_r.len() {
        return Err(invalid(format!(
            "{} summand rows but {} inclusion probabilities",
            summands.nrows(),
            pi_r.len()
        )));
    }
    if let Some(i) = pi_r.iter().position(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(invalid(format!("pi_r[{i}] = {} is not in (0,1]", pi_r[i])));
    }
    Ok(())
}

/// With-replacement (Hansen-Hurwitz) estimator of `Var_d[sum_{S_r} a_i / pi_i]`.
///
/// With `z_i = a_i / pi_i` this is `n/(n-1) * sum_i (z_i - zbar)(z_i - zbar)^T`.
pub fn design_variance_hh(summands: &DMatrix<f64>, pi_r: &[f64]) -> Result<DesignVarianceEstimate> {
    check_summands(summands, pi_r)?;
    let n = summands.nrows();
    if n < 2 {
        return Err(Error::TooFewUnits {
            what: "a with-replacement design variance",
            got: n,
            need: 2,
        });
    }
    let k = summands.ncols();
    let mut z = summands.clone();
    for (i, &p) in pi_r.iter().enumerate() {
        z.row_mut(i).scale_mut(1.0 / p);
    }
    let mean: Vec<f64> = (0..k).map(|j| z.column(j).mean()).collect();
    let mut m = DMatrix::zeros(k, k);
    let mut centered = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            centered[j] = z[(i, j)] - mean[j];
        }
        add_outer(&mut m, &centered, 1.0);
    }
    m *= n as f64 / (n as f64 - 1.0);
    symmetrize(&mut m);
    if let Some(i) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "design variance",
            row: i,
        });
    }
    Ok(DesignVarianceEstimate {
        matrix: m,
        estimator_kind: DesignVarianceKind::HansenHurwitz,
    })
}

/// Hansen-Hurwitz design variance over the non-certainty units only.
///
/// Units selected with probability one form a census stratum and contribute
/// no design variance; a full census therefore gives the zero matrix.
pub fn design_variance_reference(
    summands: &DMatrix<f64>,
    pi_r: &[f64],
) -> Result<DesignVarianceEstimate> {
    check_summands(summands, pi_r)?;
    let keep: Vec<usize> = (0..pi_r.len()).filter(|&i| pi_r[i] < CERTAINTY).collect();
    if keep.is_empty() {
        let k = summands.ncols();
        return Ok(DesignVarianceEstimate {
            matrix: DMatrix::zeros(k, k),
            estimator_kind: DesignVarianceKind::HansenHurwitz,
        });
    }
    if keep.len() == pi_r.len() {
        return design_variance_hh(summands, pi_r);
    }
    let sub = summands.select_rows(keep.iter());
    let sub_pi: Vec<f64> = keep.iter().map(|&i| pi_r[i]).collect();
    design_variance_hh(&sub, &sub_pi)
}

/// Exact variance of `sum_U I_i a_i / pi_i` under Poisson sampling:
/// `sum_U (1 - pi_i)/pi_i a_i a_i^T`.
pub fn design_variance_poisson_theoretical(
    summands: &DMatrix<f64>,
    pi_r: &[f64],
) -> Result<DesignVarianceEstimate> {
    check_summands(summands, pi_r)?;
    let k = summands.ncols();
    let mut m = DMatrix::zeros(k, k);
    let mut row = vec![0.0; k];
    for (i, &p) in pi_r.iter().enumerate() {
        let f = (1.0 - p) / p;
        if f == 0.0 {
            continue;
        }
        for j in 0..k {
            row[j] = summands[(i, j)];
        }
        add_outer(&mut m, &row, f);
    }
    symmetrize(&mut m);
    Ok(DesignVarianceEstimate {
        matrix: m,
        estimator_kind: DesignVarianceKind::PoissonTheoretical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn calibration_examples() {
        assert_close(&calibrate_inclusion_probs(&[1.0; 4], 2.0).unwrap(), &[0.5; 4], 1e-12);
        assert_close(
            &calibrate_inclusion_probs(&[1.0, 1.0, 2.0], 2.0).unwrap(),
            &[0.5, 0.5, 1.0],
            1e-12,
        );
        assert_close(
            &calibrate_inclusion_probs(&[10.0, 1.0, 1.0], 2.0).unwrap(),
            &[1.0, 0.5, 0.5],
            1e-12,
        );
    }

    #[test]
    fn calibration_errors() {
        assert!(calibrate_inclusion_probs(&[1.0, 1.0], 3.0).is_err());
        assert!(calibrate_inclusion_probs(&[0.0, 0.0], 1.0).is_err());
        assert!(calibrate_inclusion_probs(&[1.0, -1.0], 1.0).is_err());
    }

    #[test]
    fn calibration_full_census() {
        let pi = calibrate_inclusion_probs(&[0.3, 5.0, 1.0], 3.0).unwrap();
        assert_eq!(pi, vec![1.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn calibration_sums_to_target(sizes in proptest::collection::vec(0.01f64..50.0, 2..60), frac in 0.01f64..1.0) {
            let n = (frac * sizes.len() as f64).max(1.0);
            let pi = calibrate_inclusion_probs(&sizes, n).unwrap();
            let total: f64 = pi.iter().sum();
            prop_assert!((total - n).abs() < 1e-9);
            prop_assert!(pi.iter().all(|&p| p > 0.0 && p <= 1.0));
        }

        #[test]
        fn calibration_is_monotone_in_own_size(sizes in proptest::collection::vec(0.01f64..10.0, 3..30), bump in 0.0f64..20.0, which in 0usize..30) {
            let i = which % sizes.len();
            let n = (sizes.len() / 3).max(1) as f64;
            let before = calibrate_inclusion_probs(&sizes, n).unwrap()[i];
            let mut bigger = sizes.clone();
            bigger[i] += bump;
            let after = calibrate_inclusion_probs(&bigger, n).unwrap()[i];
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn hh_permutation_invariant(vals in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.05f64..1.0), 2..20), seed in 0u64..1000) {
            let n = vals.len();
            let a = DMatrix::from_fn(n, 2, |i, j| if j == 0 { vals[i].0 } else { vals[i].1 });
            let pi: Vec<f64> = vals.iter().map(|v| v.2).collect();
            let base = design_variance_hh(&a, &pi).unwrap().matrix;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream(seed, &[]));
            let a2 = a.select_rows(perm.iter());
            let pi2: Vec<f64> = perm.iter().map(|&i| pi[i]).collect();
            let other = design_variance_hh(&a2, &pi2).unwrap().matrix;
            prop_assert!((&base - &other).abs().max() <= 1e-9 * (1.0 + other.abs().max()));
        }
    }

    #[test]
    fn poisson_degenerate_probabilities() {
        let mut rng = stream(1, &[]);
        assert_eq!(poisson_sample(&[1.0; 5], &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(poisson_sample(&[0.0; 5], &mut rng).unwrap().is_empty());
        assert!(poisson_sample(&[1.5], &mut rng).is_err());
    }

    #[test]
    fn poisson_sample_size_within_binomial_band() {
        let pi = vec![0.1; 100_000];
        let band = 5.0 * (100_000.0f64 * 0.1 * 0.9).sqrt();
        for rep in 0..20 {
            let s = poisson_sample(&pi, &mut stream(rep, &[])).unwrap();
            assert!((s.len() as f64 - 10_000.0).abs() <= band, "size {}", s.len());
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let pi = calibrate_inclusion_probs(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3.0).unwrap();
        let a = pps_systematic_sample(&pi, &mut stream(9, &[1])).unwrap();
        let b = pps_systematic_sample(&pi, &mut stream(9, &[1])).unwrap();
        assert_eq!(a, b);
        let c = poisson_sample(&pi, &mut stream(9, &[2])).unwrap();
        let d = poisson_sample(&pi, &mut stream(9, &[2])).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn pps_certainty_and_fixed_size() {
        let mut rng = stream(3, &[]);
        assert_eq!(pps_systematic_sample(&[1.0, 1.0], &mut rng).unwrap(), vec![0, 1]);
        for _ in 0..200 {
            let s = pps_systematic_sample(&[0.5; 4], &mut rng).unwrap();
            assert_eq!(s.len(), 2);
            assert!(s[0] != s[1]);
        }
        assert!(pps_systematic_sample(&[0.5, 0.7], &mut rng).is_err());
    }

    #[test]
    fn pps_marginal_inclusion_frequencies() {
        let pi = [0.2, 0.3, 0.5, 0.6, 0.4];
        let mut counts = [0usize; 5];
        let mut rng = stream(11, &[]);
        let draws = 100_000;
        for _ in 0..draws {
            for i in pps_systematic_sample(&pi, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for (c, p) in counts.iter().zip(pi) {
            let freq = *c as f64 / draws as f64;
            assert!((freq - p).abs() <= 0.01, "freq {freq} vs {p}");
        }
    }

    #[test]
    fn hh_examples() {
        let same = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let v = design_variance_hh(&same, &[0.5, 0.5, 0.5]).unwrap();
        assert!(v.matrix.abs().max() < 1e-15);

        // z = a / pi = (0, 2)
        let a = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let v = design_variance_hh(&a, &[0.5, 0.5]).unwrap();
        assert!((v.matrix[(0, 0)] - 4.0).abs() < 1e-12);

        assert!(matches!(
            design_variance_hh(&DMatrix::from_row_slice(1, 1, &[1.0]), &[0.5]),
            Err(Error::TooFewUnits { .. })
        ));
    }

    #[test]
    fn reference_variance_drops_certainty_units() {
        let a = DMatrix::from_row_slice(3, 1, &[0.0, 5.0, 9.0]);
        let census = design_variance_reference(&a, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(census.matrix[(0, 0)], 0.0);
        let mixed = design_variance_reference(&a, &[0.5, 0.5, 1.0]).unwrap();
        let only = design_variance_hh(&a.rows(0, 2).into_owned(), &[0.5, 0.5]).unwrap();
        assert_eq!(mixed.matrix, only.matrix);
    }

    /// The estimator is unbiased under with-replacement sampling; the exact
    /// variance of the expanded total is obtained by enumerating every ordered
    /// draw sequence of a tiny population.
    #[test]
    fn hh_unbiased_under_srswr() {
        let pop = [1.0, 4.0, 2.5, 7.0, 3.0];
        let big_n = pop.len();
        let n = 3;
        let pi = n as f64 / big_n as f64;
        let total_hat = |draws: &[usize]| draws.iter().map(|&i| pop[i] / pi).sum::<f64>();

        let mut all = Vec::new();
        for a in 0..big_n {
            for b in 0..big_n {
                for c in 0..big_n {
                    all.push(total_hat(&[a, b, c]));
                }
            }
        }
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let exact = all.iter().map(|t| (t - m).powi(2)).sum::<f64>() / all.len() as f64;

        let mut rng = stream(5, &[]);
        let reps = 10_000;
        let mut acc = 0.0;
        for _ in 0..reps {
            let draws: Vec<usize> = (0..n).map(|_| rng.random_range(0..big_n)).collect();
            let a = DMatrix::from_iterator(n, 1, draws.iter().map(|&i| pop[i]));
            acc += design_variance_hh(&a, &[pi; 3]).unwrap().matrix[(0, 0)];
        }
        let mean = acc / reps as f64;
        assert!((mean - exact).abs() / exact < 0.03, "mean {mean} exact {exact}");
    }

    #[test]
    fn poisson_theoretical_examples() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = design_variance_poisson_theoretical(&a, &[1.0; 3]).unwrap();
        assert_eq!(v.matrix, DMatrix::zeros(2, 2));

        let one = DMatrix::from_row_slice(1, 1, &[2.0]);
        let v = design_variance_poisson_theoretical(&one, &[0.5]).unwrap();
        assert!((v.matrix[(0, 0)] - 4.0).abs() < 1e-15);

        assert!(design_variance_poisson_theoretical(&one, &[0.0]).is_err());
    }

    /// Monte Carlo check of the Poisson formula for the CLW reference summand.
    #[test]
    fn poisson_theoretical_matches_monte_carlo() {
        use rand_distr::{Distribution, StandardNormal};
        let big_n = 2000;
        let mut rng = stream(21, &[]);
        let x: Vec<f64> = (0..big_n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let sizes: Vec<f64> = x.iter().map(|&v| 1.0 / (1.0 + (-(1.0 + v)).exp())).collect();
        let pi_r = calibrate_inclusion_probs(&sizes, 200.0).unwrap();
        let pi_c: Vec<f64> = x.iter().map(|&v| 1.0 / (1.0 + (-(-1.0 + v)).exp())).collect();
        let a = DMatrix::from_fn(big_n, 2, |i, j| pi_c[i] * if j == 0 { 1.0 } else { x[i] });
        let theory = design_variance_poisson_theoretical(&a, &pi_r).unwrap().matrix;

        let draws = 20_000;
        let mut totals = Vec::with_capacity(draws);
        for _ in 0..draws {
            let s = poisson_sample(&pi_r, &mut rng).unwrap();
            let mut t = [0.0; 2];
            for i in s {
                t[0] += a[(i, 0)] / pi_r[i];
                t[1] += a[(i, 1)] / pi_r[i];
            }
            totals.push(t);
        }
        for j in 0..2 {
            let m = totals.iter().map(|t| t[j]).sum::<f64>() / draws as f64;
            let var = totals.iter().map(|t| (t[j] - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let rel = (var - theory[(j, j)]).abs() / theory[(j, j)];
            assert!(rel < 0.05, "coordinate {j}: mc {var} theory {}", theory[(j, j)]);
        }
        assert!(min_eigenvalue(&theory) >= -1e-8 * theory.trace());
    }
}
