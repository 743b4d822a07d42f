use std::io::Write;

use serde::Serialize;

use super::{MethodEstimate, ReplicateOutcome, ScenarioConfig, Z_95};
use crate::error::{invalid, Result};
use crate::model::{FinitePopulation, MethodKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    BetaC1,
    Mu,
}

impl Parameter {
    pub fn as_str(self) -> &'static str {
        match self {
            Parameter::BetaC1 => "beta_c1",
            Parameter::Mu => "mu",
        }
    }

    fn pick(self, e: &MethodEstimate) -> (f64, f64) {
        match self {
            Parameter::BetaC1 => (e.beta_c1, e.var_beta_c1),
            Parameter::Mu => (e.mu_hat, e.var_mu),
        }
    }
}

/// Monte Carlo summary of one method and parameter.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub overlap: String,
    pub method: MethodKind,
    pub parameter: Parameter,
    pub truth: f64,
    /// Mean of the finite estimates.
    pub mean: f64,
    /// Standard deviation of the finite estimates; NaN with fewer than two.
    pub se: f64,
    /// Square root of the mean plug-in variance; infinite if any replicate's was.
    pub se_hat: f64,
    /// Share of replicates whose 95% interval covers the truth. An infinite
    /// variance gives an unbounded interval, which covers.
    pub coverage: f64,
    pub rmse: f64,
    pub n_valid: usize,
    pub n_nonconverged: usize,
    pub n_inf_variance: usize,
    pub n_clamped: usize,
}

/// Compensated (Neumaier) sum, so aggregates do not depend on summation luck.
fn stable_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    if sum.is_finite() {
        sum + comp
    } else {
        sum
    }
}

fn summarize_one(
    config: &ScenarioConfig,
    method: MethodKind,
    parameter: Parameter,
    truth: f64,
    reps: &[ReplicateOutcome],
) -> SummaryRow {
    let picked: Vec<&MethodEstimate> = reps
        .iter()
        .filter_map(|r| r.estimates.iter().find(|e| e.method == method))
        .collect();
    let valid: Vec<(f64, f64)> = picked
        .iter()
        .map(|e| parameter.pick(e))
        .filter(|(est, _)| est.is_finite())
        .collect();
    let n = valid.len();
    let nf = n as f64;
    let mean = stable_sum(valid.iter().map(|v| v.0)) / nf;
    let se = if n >= 2 {
        (stable_sum(valid.iter().map(|v| (v.0 - mean).powi(2))) / (nf - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    let rmse = (stable_sum(valid.iter().map(|v| (v.0 - truth).powi(2))) / nf).sqrt();
    let se_hat = (stable_sum(valid.iter().map(|v| v.1)) / nf).sqrt();
    let covered = valid
        .iter()
        .filter(|(est, var)| !var.is_finite() || (est - truth).abs() <= Z_95 * var.sqrt())
        .count();
    SummaryRow {
        scenario: config.id.as_str().to_string(),
        overlap: config.overlap.as_str().to_string(),
        method,
        parameter,
        truth,
        mean,
        se,
        se_hat,
        coverage: covered as f64 / nf,
        rmse,
        n_valid: n,
        n_nonconverged: picked.iter().filter(|e| !e.converged).count(),
        n_inf_variance: valid.iter().filter(|v| v.1 == f64::INFINITY).count(),
        n_clamped: picked
            .iter()
            .filter(|e| e.status == crate::inference::VarianceStatus::ClampedToZero)
            .count(),
    }
}

/// Summary rows for every configured method, slope before mean.
pub fn summarize(config: &ScenarioConfig, mu_true: f64, reps: &[ReplicateOutcome]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for parameter in [Parameter::BetaC1, Parameter::Mu] {
        let truth = match parameter {
            Parameter::BetaC1 => config.beta_c1,
            Parameter::Mu => mu_true,
        };
        for method in config.methods() {
            rows.push(summarize_one(config, method, parameter, truth, reps));
        }
    }
    rows
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else if v == f64::INFINITY {
        "Inf".to_string()
    } else {
        "NaN".to_string()
    }
}

/// `scenario,overlap,method,parameter,mean,se,se_hat,coverage,rmse,n_flags`
/// where `n_flags` counts non-converged fits plus infinite variances.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario", "overlap", "method", "parameter", "mean", "se", "se_hat", "coverage", "rmse", "n_flags",
    ])?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.overlap.clone(),
            r.method.as_str().to_string(),
            r.parameter.as_str().to_string(),
            fmt(r.mean),
            fmt(r.se),
            fmt(r.se_hat),
            fmt(r.coverage),
            fmt(r.rmse),
            (r.n_nonconverged + r.n_inf_variance).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format replicate records for box plots of relative bias.
pub fn write_replicates_csv<W: Write>(
    config: &ScenarioConfig,
    mu_true: f64,
    reps: &[ReplicateOutcome],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario", "overlap", "rep", "method", "parameter", "estimate", "se_hat", "rel_bias", "converged", "n_c", "n_r",
    ])?;
    for r in reps {
        for e in &r.estimates {
            for parameter in [Parameter::BetaC1, Parameter::Mu] {
                let truth = match parameter {
                    Parameter::BetaC1 => config.beta_c1,
                    Parameter::Mu => mu_true,
                };
                let (est, var) = parameter.pick(e);
                w.write_record([
                    config.id.as_str().to_string(),
                    config.overlap.as_str().to_string(),
                    r.rep.to_string(),
                    e.method.as_str().to_string(),
                    parameter.as_str().to_string(),
                    fmt(est),
                    fmt(var.sqrt()),
                    fmt((est - truth) / truth),
                    e.converged.to_string(),
                    r.n_c.to_string(),
                    r.n_r.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Binned covariate counts of the two samples over the population range.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapHistogram {
    pub edges: Vec<f64>,
    pub conv_counts: Vec<usize>,
    pub ref_counts: Vec<usize>,
}

/// Histogram of the (single) covariate in each sample, on `bins` equal-width
/// bins spanning the population range.
pub fn overlap_histogram(pop: &FinitePopulation, s_c: &[usize], s_r: &[usize], bins: usize) -> Result<OverlapHistogram> {
    if bins < 2 {
        return Err(invalid("need at least two bins"));
    }
    if pop.n_covariates() != 1 {
        return Err(invalid("overlap histograms need a single covariate"));
    }
    let x = pop.x().column(0);
    let lo = x.min();
    let hi = x.max();
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|b| lo + width * b as f64).collect();
    let bin_of = |v: f64| {
        if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let count = |idx: &[usize]| -> Result<Vec<usize>> {
        let mut c = vec![0; bins];
        for &i in idx {
            if i >= pop.len() {
                return Err(invalid(format!("unit index {i} outside the population")));
            }
            c[bin_of(x[i])] += 1;
        }
        Ok(c)
    };
    Ok(OverlapHistogram { edges, conv_counts: count(s_c)?, ref_counts: count(s_r)? })
}

pub fn write_histogram_csv<W: Write>(hist: &OverlapHistogram, overlap: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["overlap", "bin_lo", "bin_hi", "conv", "ref"])?;
    for b in 0..hist.conv_counts.len() {
        w.write_record([
            overlap.to_string(),
            format!("{:.6}", hist.edges[b]),
            format!("{:.6}", hist.edges[b + 1]),
            hist.conv_counts[b].to_string(),
            hist.ref_counts[b].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
