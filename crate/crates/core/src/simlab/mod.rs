//! Monte Carlo engine: population generation, scenario configurations,
//! replicate execution and summary statistics.
//!
//! One population is generated per scenario and resampled `reps` times. Every
//! replicate draws from its own random stream derived from the master seed,
//! the scenario, the overlap setting and the replicate index, so results do
//! not depend on the number of worker threads or the order replicates run in.

mod report;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::designs::{poisson_sample, pps_systematic_sample};
use crate::error::{invalid, Error, Result};
use crate::inference::{infer, PlugIn, VarianceStatus};
use crate::model::{FinitePopulation, MethodKind, ObservedData, PropensityFit};
use crate::propensity::links::{clamp_prob, expit};
use crate::propensity::{fit, SolverConfig};
use crate::rng::{label, stream};

pub use report::{
    overlap_histogram, summarize, write_histogram_csv, write_replicates_csv, write_summary_csv,
    OverlapHistogram, Parameter, SummaryRow,
};

/// Normal quantile for two-sided 95% intervals.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overlap {
    High,
    Low,
}

impl Overlap {
    pub fn as_str(self) -> &'static str {
        match self {
            Overlap::High => "high",
            Overlap::Low => "low",
        }
    }

    /// Slope of the reference size model: the reference design favours the
    /// same covariate region as the convenience sample under high overlap and
    /// the opposite region under low overlap.
    pub fn beta_r(self) -> f64 {
        match self {
            Overlap::High => 1.0,
            Overlap::Low => -1.0,
        }
    }
}

impl fmt::Display for Overlap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Overlap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "high" => Ok(Overlap::High),
            "low" => Ok(Overlap::Low),
            other => Err(invalid(format!("unknown overlap `{other}`; expected high or low"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioId {
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
    S7,
    Custom,
}

impl ScenarioId {
    pub const TABLED: [ScenarioId; 7] = [
        ScenarioId::S1,
        ScenarioId::S2,
        ScenarioId::S3,
        ScenarioId::S4,
        ScenarioId::S5,
        ScenarioId::S6,
        ScenarioId::S7,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::S1 => "S1",
            ScenarioId::S2 => "S2",
            ScenarioId::S3 => "S3",
            ScenarioId::S4 => "S4",
            ScenarioId::S5 => "S5",
            ScenarioId::S6 => "S6",
            ScenarioId::S7 => "S7",
            ScenarioId::Custom => "custom",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.to_ascii_uppercase();
        ScenarioId::TABLED
            .into_iter()
            .chain([ScenarioId::Custom])
            .find(|id| id.as_str().to_ascii_uppercase() == upper)
            .ok_or_else(|| invalid(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: ScenarioId,
    pub overlap: Overlap,
    pub n_pop: usize,
    pub beta_c0: f64,
    pub beta_c1: f64,
    pub beta_r: f64,
    pub f_r_target: f64,
    pub reps: usize,
    pub master_seed: u64,
    /// Use the whole population as the reference sample with unit weights.
    pub reference_is_population: bool,
    /// Also fit the two-step ALP estimator.
    pub include_alp: bool,
    pub solver: SolverConfig,
    pub plug_in: PlugIn,
}

impl ScenarioConfig {
    /// The tabled scenario settings with 1,000 replicates.
    ///
    /// | id | N      | f_c  | f_r  | n_c | n_r   |
    /// |----|--------|------|------|-----|-------|
    /// | S1 | 60,000 | 0.01 | 0.01 | 600 | 600   |
    /// | S2 | 10,000 | 0.01 | 0.01 | 100 | 100   |
    /// | S3 | 6,000  | 0.10 | 0.10 | 600 | 600   |
    /// | S4 | 1,000  | 0.10 | 0.10 | 100 | 100   |
    /// | S5 | 10,000 | 0.01 | 0.10 | 100 | 1,000 |
    /// | S6 | 10,000 | 0.10 | 0.01 | 1,000 | 100 |
    /// | S7 | 1,000  | 0.50 | 1.00 | 500 | 1,000 |
    pub fn tabled(id: ScenarioId, overlap: Overlap, master_seed: u64) -> Result<Self> {
        // Intercepts -5.0 and -2.5 give convenience fractions of about 0.01 and 0.10.
        let (n_pop, beta_c0, f_r) = match id {
            ScenarioId::S1 => (60_000, -5.0, 0.01),
            ScenarioId::S2 => (10_000, -5.0, 0.01),
            ScenarioId::S3 => (6_000, -2.5, 0.10),
            ScenarioId::S4 => (1_000, -2.5, 0.10),
            ScenarioId::S5 => (10_000, -5.0, 0.10),
            ScenarioId::S6 => (10_000, -2.5, 0.01),
            ScenarioId::S7 => (1_000, 0.0, 1.0),
            ScenarioId::Custom => return Err(invalid("custom scenarios have no tabled settings")),
        };
        Ok(Self {
            id,
            overlap,
            n_pop,
            beta_c0,
            beta_c1: 1.0,
            beta_r: overlap.beta_r(),
            f_r_target: f_r,
            reps: 1000,
            master_seed,
            reference_is_population: id == ScenarioId::S7,
            include_alp: false,
            solver: SolverConfig::default(),
            plug_in: PlugIn::default(),
        })
    }

    pub fn with_reps(mut self, reps: usize) -> Self {
        self.reps = reps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(invalid("reps must be at least 1"));
        }
        if self.n_pop < 10 {
            return Err(invalid("population size must be at least 10"));
        }
        if !(self.f_r_target > 0.0 && self.f_r_target <= 1.0) {
            return Err(invalid("reference fraction must lie in (0,1]"));
        }
        if ![self.beta_c0, self.beta_c1, self.beta_r].iter().all(|b| b.is_finite()) {
            return Err(invalid("coefficients must be finite"));
        }
        self.solver.validate()
    }

    pub fn methods(&self) -> Vec<MethodKind> {
        let mut m = MethodKind::ONE_STEP.to_vec();
        if self.include_alp {
            m.push(MethodKind::Alp);
        }
        m
    }

    /// Seed path of the scenario population; shared by both overlap settings
    /// so that they differ only in the reference design.
    fn population_path(&self) -> [u64; 2] {
        [label("population"), label(self.id.as_str())]
    }

    fn replicate_path(&self, rep: usize) -> [u64; 4] {
        [label(self.id.as_str()), label(self.overlap.as_str()), label("replicate"), rep as u64]
    }
}

/// Draws a population of `n` units: `x ~ N(0,1)`, `y ~ N(1 + x, 1.5^2)`,
/// `logit(pi_c) = beta_c0 + beta_c1 x` and reference size `expit(1 + beta_r x)`.
///
/// Reference inclusion probabilities are set to one; calibrate them with
/// [`FinitePopulation::with_reference_fraction`].
pub fn generate_population<R: Rng + ?Sized>(
    n: usize,
    beta_c0: f64,
    beta_c1: f64,
    beta_r: f64,
    rng: &mut R,
) -> Result<FinitePopulation> {
    if n < 10 {
        return Err(invalid("population size must be at least 10"));
    }
    let noise = Normal::new(0.0, 1.5).expect("valid normal parameters");
    let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let y: Vec<f64> = x.iter().map(|&v| 1.0 + v + noise.sample(rng)).collect();
    let pi_c = x.iter().map(|&v| clamp_prob(expit(beta_c0 + beta_c1 * v)));
    let size = x.iter().map(|&v| expit(1.0 + beta_r * v));
    FinitePopulation::new(
        DMatrix::from_column_slice(n, 1, &x),
        DVector::from_vec(y),
        DVector::from_iterator(n, pi_c),
        DVector::from_iterator(n, size),
        DVector::from_element(n, 1.0),
    )
}

/// The scenario population with reference probabilities calibrated to the target fraction.
pub fn scenario_population(config: &ScenarioConfig) -> Result<FinitePopulation> {
    config.validate()?;
    let mut rng = stream(config.master_seed, &config.population_path());
    let pop = generate_population(config.n_pop, config.beta_c0, config.beta_c1, config.beta_r, &mut rng)?;
    if config.reference_is_population {
        Ok(pop)
    } else {
        pop.with_reference_fraction(config.f_r_target)
    }
}

/// Draws one pair of samples: Poisson convenience sample and PPS reference
/// sample (or the whole population).
pub fn draw_samples(pop: &FinitePopulation, config: &ScenarioConfig, rep: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = stream(config.master_seed, &config.replicate_path(rep));
    let conv = poisson_sample(pop.pi_c_true().as_slice(), &mut rng)?;
    let reference = if config.reference_is_population {
        (0..pop.len()).collect()
    } else {
        pps_systematic_sample(pop.pi_r_true().as_slice(), &mut rng)?
    };
    Ok((conv, reference))
}

/// Estimates of one method in one replicate.
#[derive(Debug, Clone, Serialize)]
pub struct MethodEstimate {
    pub method: MethodKind,
    pub converged: bool,
    pub beta_c1: f64,
    pub var_beta_c1: f64,
    pub mu_hat: f64,
    pub var_mu: f64,
    pub status: VarianceStatus,
    /// Convenience units whose estimated participation probability exceeds one.
    pub n_pi_c_above_one: usize,
}

impl MethodEstimate {
    fn failed(method: MethodKind) -> Self {
        Self {
            method,
            converged: false,
            beta_c1: f64::NAN,
            var_beta_c1: f64::NAN,
            mu_hat: f64::NAN,
            var_mu: f64::NAN,
            status: VarianceStatus::NotConverged,
            n_pi_c_above_one: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateOutcome {
    pub rep: usize,
    pub n_c: usize,
    pub n_r: usize,
    pub estimates: Vec<MethodEstimate>,
}

fn estimate_one(data: &ObservedData, method: MethodKind, config: &ScenarioConfig) -> Result<(PropensityFit, MethodEstimate)> {
    let f = fit(method, data, &config.solver)?;
    let r = infer(data, &f, config.plug_in)?;
    let est = MethodEstimate {
        method,
        converged: f.converged,
        beta_c1: f.beta_hat.0[1],
        var_beta_c1: r.var_beta[(1, 1)],
        mu_hat: r.mu_hat,
        var_mu: r.var_mu,
        status: r.status,
        n_pi_c_above_one: f.n_pi_c_above_one,
    };
    Ok((f, est))
}

/// Fits every configured method on freshly drawn samples and returns the fits too.
pub fn run_replicate_with_fits(
    pop: &FinitePopulation,
    config: &ScenarioConfig,
    rep: usize,
) -> Result<(ReplicateOutcome, Vec<Option<PropensityFit>>)> {
    let (conv, reference) = draw_samples(pop, config, rep)?;
    let methods = config.methods();
    let mut estimates = Vec::with_capacity(methods.len());
    let mut fits = Vec::with_capacity(methods.len());
    let data = if conv.is_empty() {
        None
    } else {
        Some(ObservedData::from_population(pop, &conv, &reference)?)
    };
    for method in methods {
        match data.as_ref().map(|d| estimate_one(d, method, config)) {
            Some(Ok((f, e))) => {
                estimates.push(e);
                fits.push(Some(f));
            }
            Some(Err(err)) => {
                log::warn!("replicate {rep}, {method}: {err}");
                estimates.push(MethodEstimate::failed(method));
                fits.push(None);
            }
            None => {
                estimates.push(MethodEstimate::failed(method));
                fits.push(None);
            }
        }
    }
    Ok((
        ReplicateOutcome { rep, n_c: conv.len(), n_r: reference.len(), estimates },
        fits,
    ))
}

/// One Monte Carlo replicate. A failed or diverged fit is recorded with
/// non-finite entries rather than aborting the run.
pub fn run_replicate(pop: &FinitePopulation, config: &ScenarioConfig, rep: usize) -> Result<ReplicateOutcome> {
    Ok(run_replicate_with_fits(pop, config, rep)?.0)
}

/// All replicates of a scenario plus their summary.
#[derive(Debug, Clone)]
pub struct MonteCarloRun {
    pub config: ScenarioConfig,
    /// Finite-population mean of the outcome: the target of the mean estimators.
    pub mu_true: f64,
    pub replicates: Vec<ReplicateOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl MonteCarloRun {
    pub fn row(&self, method: MethodKind, parameter: Parameter) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.parameter == parameter)
    }
}

/// Runs all replicates in parallel and summarizes them.
pub fn run_monte_carlo(config: &ScenarioConfig) -> Result<MonteCarloRun> {
    let pop = scenario_population(config)?;
    run_monte_carlo_on(&pop, config)
}

/// As [`run_monte_carlo`] on an already generated population.
pub fn run_monte_carlo_on(pop: &FinitePopulation, config: &ScenarioConfig) -> Result<MonteCarloRun> {
    config.validate()?;
    let replicates = (0..config.reps)
        .into_par_iter()
        .map(|rep| run_replicate(pop, config, rep))
        .collect::<Result<Vec<_>>>()?;
    let mu_true = pop.mean_y();
    let summary = summarize(config, mu_true, &replicates);
    for row in &summary {
        if row.n_nonconverged * 2 > config.reps {
            log::warn!(
                "{} {} {}: {} of {} fits did not converge",
                config.id,
                config.overlap,
                row.method,
                row.n_nonconverged,
                config.reps
            );
        }
    }
    Ok(MonteCarloRun { config: config.clone(), mu_true, replicates, summary })
}

/// Predicted participation probabilities of every population unit under a fit.
pub fn predict_population(pop: &FinitePopulation, fit: &PropensityFit) -> Result<Vec<f64>> {
    (0..pop.len())
        .map(|i| {
            let x: Vec<f64> = pop.x().row(i).iter().copied().collect();
            fit.predict_pi_c(&x)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_matches_generating_model() {
        let mut rng = stream(1, &[]);
        let pop = generate_population(100_000, -2.5, 1.0, 1.0, &mut rng).unwrap();
        assert!((pop.mean_y() - 1.0).abs() < 0.02);
        let mean_pc = pop.pi_c_true().mean();
        assert!((mean_pc - 0.10).abs() < 0.015, "{mean_pc}");

        let flat = generate_population(50, -1.0, 0.0, 1.0, &mut rng).unwrap();
        assert!(flat.pi_c_true().iter().all(|&p| (p - expit(-1.0)).abs() < 1e-15));
    }

    #[test]
    fn tabled_configs() {
        let s7 = ScenarioConfig::tabled(ScenarioId::S7, Overlap::High, 1).unwrap();
        assert!(s7.reference_is_population);
        assert_eq!(s7.beta_c0, 0.0);
        let s6 = ScenarioConfig::tabled(ScenarioId::S6, Overlap::Low, 1).unwrap();
        assert_eq!((s6.n_pop, s6.beta_c0, s6.beta_r, s6.f_r_target), (10_000, -2.5, -1.0, 0.01));
        assert!(ScenarioConfig::tabled(ScenarioId::Custom, Overlap::Low, 1).is_err());
        assert_eq!("s3".parse::<ScenarioId>().unwrap(), ScenarioId::S3);
        assert!("S9".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn overlaps_share_the_population() {
        let high = scenario_population(&ScenarioConfig::tabled(ScenarioId::S4, Overlap::High, 5).unwrap()).unwrap();
        let low = scenario_population(&ScenarioConfig::tabled(ScenarioId::S4, Overlap::Low, 5).unwrap()).unwrap();
        assert_eq!(high.x(), low.x());
        assert_eq!(high.y(), low.y());
        assert_ne!(high.pi_r_true(), low.pi_r_true());
    }

    #[test]
    fn census_scenario_gives_identical_ilr_and_pilr() {
        let cfg = ScenarioConfig::tabled(ScenarioId::S7, Overlap::High, 7).unwrap().with_reps(5);
        let pop = scenario_population(&cfg).unwrap();
        for rep in 0..5 {
            let out = run_replicate(&pop, &cfg, rep).unwrap();
            assert_eq!(out.n_r, 1000);
            let ilr = &out.estimates[0];
            let pilr = &out.estimates[1];
            assert_eq!((ilr.method, pilr.method), (MethodKind::Ilr, MethodKind::Pilr));
            assert_eq!(ilr.beta_c1.to_bits(), pilr.beta_c1.to_bits());
            assert_eq!(ilr.mu_hat.to_bits(), pilr.mu_hat.to_bits());
            assert_eq!(ilr.var_mu.to_bits(), pilr.var_mu.to_bits());
        }
    }

    #[test]
    fn replicates_are_reproducible_and_thread_independent() {
        let cfg = ScenarioConfig::tabled(ScenarioId::S4, Overlap::Low, 11).unwrap().with_reps(16);
        let a = run_monte_carlo(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_monte_carlo(&cfg).unwrap());
        let bits = |r: &MonteCarloRun| {
            r.replicates
                .iter()
                .flat_map(|o| o.estimates.iter().map(|e| (e.beta_c1.to_bits(), e.mu_hat.to_bits(), e.var_mu.to_bits())))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        // A replicate computed alone matches the same index inside the run.
        let pop = scenario_population(&cfg).unwrap();
        let lone = run_replicate(&pop, &cfg, 9).unwrap();
        assert_eq!(lone.estimates[0].beta_c1.to_bits(), a.replicates[9].estimates[0].beta_c1.to_bits());
    }

    #[test]
    fn convenience_size_within_poisson_band() {
        let cfg = ScenarioConfig::tabled(ScenarioId::S3, Overlap::High, 3).unwrap();
        let pop = scenario_population(&cfg).unwrap();
        let expected: f64 = pop.pi_c_true().sum();
        let sd = pop.pi_c_true().iter().map(|p| p * (1.0 - p)).sum::<f64>().sqrt();
        for rep in 0..20 {
            let (conv, reference) = draw_samples(&pop, &cfg, rep).unwrap();
            assert!((conv.len() as f64 - expected).abs() <= 5.0 * sd);
            assert_eq!(reference.len(), 600);
        }
    }
}
