//! Participation-probability estimators: log-likelihoods, analytic scores and
//! information matrices, the Newton fit, and the two-step ALP baseline.
//!
//! For [`MethodKind::Alp`] the coefficient vector parameterizes the logistic
//! model of `pi_delta`, and the likelihood functions evaluate the weighted
//! logistic pseudo-likelihood of that first step.

pub mod links;
mod objective;
mod solver;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::model::{MethodKind, ObservedData, PropensityFit, PropensityParams};
use objective::{Problem, Want};

pub use solver::SolverConfig;

/// Log-likelihood (or pseudo-log-likelihood) of `method` at `beta`.
pub fn loglik(method: MethodKind, data: &ObservedData, beta: &PropensityParams) -> Result<f64> {
    Ok(Problem::new(method, data)?.eval(&beta.0, Want::Loglik)?.loglik)
}

/// Analytic gradient of [`loglik`] with respect to `beta`.
pub fn score(method: MethodKind, data: &ObservedData, beta: &PropensityParams) -> Result<DVector<f64>> {
    Ok(Problem::new(method, data)?.eval(&beta.0, Want::Score)?.score)
}

/// Expected information on the stacked sample: the negative Hessian with each
/// row's membership indicator replaced by its fitted probability. Positive
/// semidefinite at every `beta`; this is what the solver scores with.
pub fn fisher_info(method: MethodKind, data: &ObservedData, beta: &PropensityParams) -> Result<DMatrix<f64>> {
    Ok(Problem::new(method, data)?.eval(&beta.0, Want::Expected)?.info)
}

/// Negative Hessian of [`loglik`].
pub fn observed_info(method: MethodKind, data: &ObservedData, beta: &PropensityParams) -> Result<DMatrix<f64>> {
    Ok(Problem::new(method, data)?.eval(&beta.0, Want::Observed)?.info)
}

/// Fits `method` from `beta = 0` by Newton steps on the observed information,
/// falling back to Fisher scoring where that matrix is not positive definite.
///
/// Non-convergence is reported through `converged = false` rather than as an
/// error; the last accepted iterate is returned with its diagnostics.
pub fn fit(method: MethodKind, data: &ObservedData, config: &SolverConfig) -> Result<PropensityFit> {
    if method == MethodKind::Alp {
        return alp_two_step(data, config);
    }
    let problem = Problem::new(method, data)?;
    let out = solver::maximize(&problem, config)?;
    let info = solver::unpenalized_info(&problem, &out.beta)?;
    let eta = data.conv_design() * &out.beta;
    let pi_c = eta.map(|e| links::LinkEval::new(e, 1.0).pi_c);
    if !out.converged {
        log::debug!(
            "{method} fit did not converge after {} iterations (score {:.3e})",
            out.iterations,
            out.score_norm
        );
    }
    Ok(PropensityFit {
        method,
        beta_hat: PropensityParams(out.beta),
        pi_c_hat_conv: pi_c,
        converged: out.converged,
        iterations: out.iterations,
        score_norm: out.score_norm,
        loglik: out.loglik,
        info_matrix: info,
        damped_steps: out.damped_steps,
        n_pi_c_above_one: 0,
        n_delta_saturated: 0,
        trace: out.trace,
    })
}

/// Two-step ALP: weighted logistic regression for `pi_delta` (convenience rows
/// weight 1, reference rows weight `w_r`), then `pi_c = pi_delta / (1 - pi_delta)`.
///
/// The inverted probabilities are not clamped at one; `n_pi_c_above_one`
/// counts the convenience rows where they exceed it.
pub fn alp_two_step(data: &ObservedData, config: &SolverConfig) -> Result<PropensityFit> {
    let problem = Problem::new(MethodKind::Alp, data)?;
    let out = solver::maximize(&problem, config)?;
    let info = solver::unpenalized_info(&problem, &out.beta)?;
    let eta_c = data.conv_design() * &out.beta;
    let eta_r = data.ref_design() * &out.beta;
    let pi_c = eta_c.map(links::alp_pi_c_from_eta);
    let saturated = |e: &f64| {
        let p = links::expit(links::clamp_eta(*e));
        p <= links::PROB_EPS || p >= 1.0 - links::PROB_EPS
    };
    let n_delta_saturated = eta_c.iter().chain(eta_r.iter()).filter(|e| saturated(e)).count();
    let n_above = pi_c.iter().filter(|&&p| p > 1.0).count();
    if n_above > 0 {
        log::debug!("ALP produced {n_above} participation probabilities above one");
    }
    Ok(PropensityFit {
        method: MethodKind::Alp,
        beta_hat: PropensityParams(out.beta),
        pi_c_hat_conv: pi_c,
        converged: out.converged,
        iterations: out.iterations,
        score_norm: out.score_norm,
        loglik: out.loglik,
        info_matrix: info,
        damped_steps: out.damped_steps,
        n_pi_c_above_one: n_above,
        n_delta_saturated,
        trace: out.trace,
    })
}
