use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::objective::{Eval, Problem, Want};
use crate::error::{invalid, Result};
use crate::linalg::solve_spd_damped;
use crate::model::IterateSummary;

/// Solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Convergence threshold on max-abs score divided by the number of stacked rows.
    pub tol_score: f64,
    /// A fit is only declared converged once the Newton step is also below
    /// this size, which keeps separated data from looking converged.
    pub tol_step: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// L2 penalty on the non-intercept coefficients.
    pub ridge: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_score: 1e-8,
            tol_step: 1e-6,
            max_iter: 100,
            max_halvings: 20,
            ridge: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_score > 0.0) || !(self.tol_step > 0.0) {
            return Err(invalid("solver tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(invalid("ridge must be a finite non-negative number"));
        }
        Ok(())
    }
}

pub(crate) struct Outcome {
    pub beta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub loglik: f64,
    pub damped_steps: usize,
    pub trace: Vec<IterateSummary>,
}

/// Relative log-likelihood decrease tolerated when accepting a step. Near the
/// optimum the true gain of a Newton step is below rounding noise.
const LOGLIK_SLACK: f64 = 1e-13;

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn penalized(problem: &Problem<'_>, beta: &DVector<f64>, ridge: f64, want: Want) -> Result<Eval> {
    let mut e = problem.eval(beta, want)?;
    if ridge > 0.0 {
        for j in 1..beta.len() {
            e.loglik -= 0.5 * ridge * beta[j] * beta[j];
            if !e.score.is_empty() {
                e.score[j] -= ridge * beta[j];
            }
            if e.info.nrows() > 0 {
                e.info[(j, j)] += ridge;
            }
        }
    }
    Ok(e)
}

/// Newton step on the observed information when it is positive definite,
/// otherwise a Fisher-scoring step on the expected information.
fn ascent_direction(
    problem: &Problem<'_>,
    beta: &DVector<f64>,
    ridge: f64,
    current: &Eval,
) -> Result<Option<(DVector<f64>, bool)>> {
    let observed = penalized(problem, beta, ridge, Want::Observed)?;
    if let Some(ch) = observed.info.cholesky() {
        return Ok(Some((ch.solve(&current.score), false)));
    }
    let expected = penalized(problem, beta, ridge, Want::Expected)?;
    Ok(solve_spd_damped(&expected.info, &current.score))
}

/// Second-order ascent from zero with step-halving on the log-likelihood.
pub(crate) fn maximize(problem: &Problem<'_>, config: &SolverConfig) -> Result<Outcome> {
    config.validate()?;
    let n_rows = problem.n_rows() as f64;
    let mut beta = DVector::zeros(problem.n_params());
    let mut current = penalized(problem, &beta, config.ridge, Want::Score)?;
    let mut trace = vec![IterateSummary {
        loglik: current.loglik,
        score_norm: max_abs(&current.score) / n_rows,
        beta_norm: 0.0,
    }];
    let mut converged = false;
    let mut iterations = 0;
    let mut damped_steps = 0;

    loop {
        let score_norm = max_abs(&current.score) / n_rows;
        let Some((step, damped)) = ascent_direction(problem, &beta, config.ridge, &current)? else {
            log::debug!("information matrix could not be factorized; stopping");
            break;
        };
        if score_norm <= config.tol_score && max_abs(&step) <= config.tol_step {
            converged = true;
            break;
        }
        if iterations == config.max_iter {
            break;
        }
        if damped {
            damped_steps += 1;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let candidate = &beta + &step * t;
            if let Ok(e) = penalized(problem, &candidate, config.ridge, Want::Score) {
                if e.loglik >= current.loglik - LOGLIK_SLACK * (1.0 + current.loglik.abs()) {
                    accepted = Some((candidate, e));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next_beta, next)) = accepted else {
            log::debug!("step-halving failed to increase the log-likelihood");
            break;
        };
        beta = next_beta;
        current = next;
        iterations += 1;
        trace.push(IterateSummary {
            loglik: current.loglik,
            score_norm: max_abs(&current.score) / n_rows,
            beta_norm: beta.norm(),
        });
    }

    Ok(Outcome {
        score_norm: max_abs(&current.score) / n_rows,
        loglik: current.loglik,
        beta,
        converged,
        iterations,
        damped_steps,
        trace,
    })
}

/// Expected information without the ridge term.
pub(crate) fn unpenalized_info(problem: &Problem<'_>, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(problem.eval(beta, Want::Expected)?.info)
}
