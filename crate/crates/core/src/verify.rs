//! Self-checks of the derived formulas, plus small synthetic fixtures used by
//! tests and benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::Serialize;

use crate::error::Result;
use crate::model::{MethodKind, ObservedData, PropensityParams};
use crate::propensity::{self, links::crisp};
use crate::rng::{label, stream};
use crate::theory::{cov_iz_bruteforce, cov_iz_exact, BRUTE_FORCE_MAX_N};

/// Random convenience/reference samples with `p` covariates.
///
/// Convenience covariates are shifted by 0.3 relative to the reference ones,
/// outcomes are `1 + sum(x) + N(0,1)`, and reference-design probabilities are
/// uniform on `[0.2, 0.8]` for both samples.
pub fn synthetic_dataset(seed: u64, n_conv: usize, n_ref: usize, p: usize) -> ObservedData {
    let mut rng = stream(seed, &[label("synthetic")]);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let pi = Uniform::new(0.2, 0.8).expect("valid range");
    let conv_x = DMatrix::from_fn(n_conv, p, |_, _| 0.3 + std.sample(&mut rng));
    let conv_y = DVector::from_fn(n_conv, |i, _| 1.0 + conv_x.row(i).sum() + std.sample(&mut rng));
    let conv_pi_r = DVector::from_fn(n_conv, |_, _| pi.sample(&mut rng));
    let ref_x = DMatrix::from_fn(n_ref, p, |_, _| std.sample(&mut rng));
    let ref_pi_r = DVector::from_fn(n_ref, |_, _| pi.sample(&mut rng));
    ObservedData::new(conv_x, conv_y, Some(conv_pi_r), ref_x, ref_pi_r)
        .expect("synthetic samples are well formed")
}

/// The 40-unit dataset (15 convenience, 25 reference, one covariate) used for
/// grid-search and pinned-value checks.
pub fn grid_fixture() -> ObservedData {
    synthetic_dataset(7, 15, 25, 1)
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    /// Largest population enumerated by brute force.
    pub n_max: usize,
    /// Random parameter vectors per method for the gradient check.
    pub gradient_instances: usize,
    pub seed: u64,
    /// Relative error injected into the exact covariance formula. Only used to
    /// confirm the checks can fail.
    pub perturbation: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_max: 4,
            gradient_instances: 100,
            seed: 20240601,
            perturbation: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest observed discrepancy.
    pub max_error: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: impl Into<String>, max_error: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: max_error <= tolerance,
        max_error,
        tolerance,
    }
}

pub const BRUTE_FORCE_TOL: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-4;

pub fn run_verification(config: &VerifyConfig) -> Result<VerificationReport> {
    let n_max = config.n_max.clamp(2, BRUTE_FORCE_MAX_N);
    let exact = |a: f64, b: f64, n: usize| cov_iz_exact(a, b, n).map(|c| c * (1.0 + config.perturbation));
    let mut checks = Vec::new();
    let mut rng = stream(config.seed, &[label("verify")]);

    for n in 2..=n_max {
        let mut worst = 0.0f64;
        for _ in 0..3 {
            let pc: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
            let pr: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
            let brute = cov_iz_bruteforce(&pc, &pr)?;
            for k in 0..n {
                for l in 0..n {
                    let e = exact(crisp(pc[k], pr[k]), crisp(pc[l], pr[l]), n)?;
                    worst = worst.max((brute[(k, l)] - e).abs());
                }
            }
        }
        checks.push(check(format!("covariance brute force N={n}"), worst, BRUTE_FORCE_TOL));
    }

    for n in [2usize, 5, 10] {
        let corr = exact(0.5, 0.5, n)? / 0.25;
        let target = -1.0 / (2.0 * n as f64 - 1.0);
        checks.push(check(format!("census correlation N={n}"), (corr - target).abs(), 1e-14));
    }
    let census = cov_iz_bruteforce(&[1.0; 2], &[1.0; 2])?;
    checks.push(check(
        "census correlation by enumeration N=2",
        (census[(0, 1)] / 0.25 + 1.0 / 3.0).abs(),
        BRUTE_FORCE_TOL,
    ));

    for method in MethodKind::ALL {
        let worst = gradient_check(method, config.gradient_instances, config.seed)?;
        checks.push(check(format!("{method} score vs finite differences"), worst, GRADIENT_TOL));
    }
    Ok(VerificationReport { checks })
}

/// Largest relative discrepancy between the analytic score and a central
/// finite difference of the log-likelihood over `instances` random problems.
pub fn gradient_check(method: MethodKind, instances: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, &[label("gradient"), label(method.as_str())]);
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let p = 1 + inst % 3;
        let data = synthetic_dataset(rng.random(), 20 + inst % 17, 30 + inst % 23, p);
        let beta: Vec<f64> = (0..=p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = PropensityParams::from_slice(&beta)?;
        let s = propensity::score(method, &data, &params)?;
        for j in 0..=p {
            let h = 1e-5 * (1.0 + beta[j].abs());
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (propensity::loglik(method, &data, &PropensityParams::from_slice(&up)?)?
                - propensity::loglik(method, &data, &PropensityParams::from_slice(&dn)?)?)
                / (2.0 * h);
            let rel = (s[j] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_verification_passes() {
        let report = run_verification(&VerifyConfig {
            gradient_instances: 10,
            ..Default::default()
        })
        .unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn injected_perturbation_is_caught() {
        let report = run_verification(&VerifyConfig {
            gradient_instances: 1,
            perturbation: 1e-6,
            ..Default::default()
        })
        .unwrap();
        assert!(!report.all_passed());
        assert!(report.checks.iter().any(|c| c.name.starts_with("covariance") && !c.passed));
    }

    #[test]
    fn fixtures_are_reproducible() {
        let a = grid_fixture();
        let b = grid_fixture();
        assert_eq!(a.n_conv(), 15);
        assert_eq!(a.n_ref(), 25);
        assert_eq!(a.conv_x(), b.conv_x());
        assert_eq!(a.ref_pi_r(), b.ref_pi_r());
        assert!(a.conv_pi_r().unwrap().iter().all(|&p| (0.2..0.8).contains(&p)));
    }
}
