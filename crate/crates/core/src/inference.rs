//! Hájek inverse-probability-weighted mean and sandwich variances.
//!
//! The variance of the mean combines four pieces for each estimator: the
//! variance `Var[U(mu)]` of the mean's estimating function, the sensitivity
//! `H` of the propensity score, the model variance `A` and design variance `D`
//! of that score, and the covariance `C` between the two estimating functions.
//! Population sums are replaced by inverse-probability weighted sample sums.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::designs::design_variance_reference;
use crate::error::{invalid, Error, Result};
use crate::linalg::{add_outer, checked_inverse, condition_number, symmetrize};
use crate::model::{MethodKind, ObservedData, PropensityFit};
use crate::propensity::links::{crisp, delta_link, LinkEval};

/// Information matrices with a condition number above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Hájek mean `sum(y/pi) / sum(1/pi)` and the estimated population size `sum(1/pi)`.
///
/// Any positive probability is accepted so that two-step estimates above one
/// can still be used as weights.
pub fn hajek_mean(y: &[f64], pi_c_hat: &[f64]) -> Result<(f64, f64)> {
    if y.is_empty() {
        return Err(invalid("cannot take the mean of an empty sample"));
    }
    if y.len() != pi_c_hat.len() {
        return Err(invalid("outcome and probability vectors differ in length"));
    }
    if let Some(i) = pi_c_hat.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(invalid(format!("estimated probability {i} is not positive")));
    }
    let mut n_hat = 0.0;
    let mut total = 0.0;
    for (&yi, &p) in y.iter().zip(pi_c_hat) {
        n_hat += 1.0 / p;
        total += yi / p;
    }
    Ok((total / n_hat, n_hat))
}

/// How population sums of outcome-free matrices are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PlugIn {
    /// Every population sum over the convenience sample with weights `1/pi_c_hat`.
    #[default]
    ConvenienceWeighted,
    /// `H` and `A` over the reference sample with weights `w_r`; the outcome
    /// terms necessarily stay on the convenience sample.
    ReferenceWeighted,
}

/// Per-unit scalar weights `(h, a)` such that `H = sum h x x^T` and `A = sum a x x^T`.
pub(crate) fn info_weights(method: MethodKind, pi_c: f64, pi_r: f64) -> (f64, f64) {
    let qc = 1.0 - pi_c;
    match method {
        MethodKind::Clw | MethodKind::Alp => {
            let h = pi_c * qc;
            (h, h)
        }
        MethodKind::Ilr => {
            let pz = crisp(pi_c, pi_r);
            let core = pz * (1.0 - pz) * qc * qc;
            let h = (pi_c + pi_r) * core;
            (h, h - (pi_r + 1.0) * pi_c * core)
        }
        MethodKind::Pilr => {
            let pd = delta_link(pi_c);
            let core = pd * (1.0 - pd) * qc * qc;
            let h = (pi_c + 1.0) * core;
            (h, h - 2.0 * pi_c * core)
        }
    }
}

/// Per-unit factor `c` such that `C = sum c (y - mu) x`.
pub(crate) fn cov_factor(method: MethodKind, pi_c: f64, pi_r: f64) -> f64 {
    let qc = 1.0 - pi_c;
    match method {
        MethodKind::Clw | MethodKind::Alp => qc,
        MethodKind::Ilr => (1.0 - crisp(pi_c, pi_r)) * qc * qc,
        MethodKind::Pilr => (1.0 - delta_link(pi_c)) * qc * qc,
    }
}

/// Per-unit factor `s` of the reference-sample score total, before expansion
/// by `1/pi_r`: `D = Var_d[sum_{S_r} (s / pi_r) x]`.
pub(crate) fn design_factor(method: MethodKind, pi_c: f64, pi_r: f64) -> f64 {
    let qc = 1.0 - pi_c;
    match method {
        MethodKind::Clw | MethodKind::Alp => pi_c,
        // ILR reference rows carry weight one, so the expansion is undone here
        MethodKind::Ilr => pi_r * crisp(pi_c, pi_r) * qc,
        MethodKind::Pilr => delta_link(pi_c) * qc,
    }
}

/// Plug-in estimates of the sandwich ingredients.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceComponents {
    pub method: MethodKind,
    #[serde(skip)]
    pub h: DMatrix<f64>,
    #[serde(skip)]
    pub a: DMatrix<f64>,
    #[serde(skip)]
    pub d: DMatrix<f64>,
    /// Method-specific covariance between the mean and propensity estimating functions.
    #[serde(skip)]
    pub c_vec: DVector<f64>,
    /// `sum (1 - pi_c)(y - mu) x`, the sensitivity of the mean to the coefficients.
    #[serde(skip)]
    pub c_b: DVector<f64>,
    /// `H^{-1} c_b`; NaN when `H` is singular.
    #[serde(skip)]
    pub b: DVector<f64>,
    pub var_u_mu: f64,
    pub n_hat: f64,
    pub h_condition: f64,
    #[serde(skip)]
    pub h_inv: Option<DMatrix<f64>>,
}

impl VarianceComponents {
    /// Assembles the components from already-estimated pieces.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        method: MethodKind,
        h: DMatrix<f64>,
        a: DMatrix<f64>,
        d: DMatrix<f64>,
        c_vec: DVector<f64>,
        c_b: DVector<f64>,
        var_u_mu: f64,
        n_hat: f64,
    ) -> Self {
        let h_condition = condition_number(&h);
        let h_inv = checked_inverse(&h, MAX_CONDITION);
        let b = match &h_inv {
            Some(inv) => inv * &c_b,
            None => DVector::from_element(c_b.len(), f64::NAN),
        };
        Self {
            method,
            h,
            a,
            d,
            c_vec,
            c_b,
            b,
            var_u_mu,
            n_hat,
            h_condition,
            h_inv,
        }
    }

    pub fn is_singular(&self) -> bool {
        self.h_inv.is_none()
    }
}

/// Plug-in variance components for a fitted one-step estimator.
pub fn variance_components(
    method: MethodKind,
    data: &ObservedData,
    fit: &PropensityFit,
    mu_hat: f64,
    plug_in: PlugIn,
) -> Result<VarianceComponents> {
    if method == MethodKind::Alp {
        return Err(invalid("sandwich variances are only defined for the one-step estimators"));
    }
    if fit.method != method {
        return Err(invalid(format!("fit is for {}, not {method}", fit.method)));
    }
    data.check_method(method)?;
    let k = data.n_params();
    let conv = data.conv_design();
    let y = data.conv_y();
    let conv_pi_r = |i: usize| data.conv_pi_r().map(|p| p[i]).unwrap_or(1.0);

    let mut h = DMatrix::zeros(k, k);
    let mut a = DMatrix::zeros(k, k);
    let mut c_vec = DVector::zeros(k);
    let mut c_b = DVector::zeros(k);
    let mut var_u = 0.0;
    let mut n_hat = 0.0;
    let mut row = vec![0.0; k];

    for i in 0..data.n_conv() {
        let pc = fit.pi_c_hat_conv[i];
        if !(pc > 0.0 && pc < 1.0) {
            return Err(Error::NonFinite { context: "estimated participation probability", row: i });
        }
        let inv = 1.0 / pc;
        let resid = y[i] - mu_hat;
        n_hat += inv;
        var_u += inv * (1.0 - pc) * inv * resid * resid;
        for j in 0..k {
            row[j] = conv[(i, j)];
        }
        let cf = cov_factor(method, pc, conv_pi_r(i));
        for j in 0..k {
            c_vec[j] += inv * cf * resid * row[j];
            c_b[j] += inv * (1.0 - pc) * resid * row[j];
        }
        if plug_in == PlugIn::ConvenienceWeighted {
            let (wh, wa) = info_weights(method, pc, conv_pi_r(i));
            add_outer(&mut h, &row, inv * wh);
            add_outer(&mut a, &row, inv * wa);
        }
    }

    let reference = data.ref_design();
    let eta_r = reference * &fit.beta_hat.0;
    let mut summands = DMatrix::zeros(data.n_ref(), k);
    for i in 0..data.n_ref() {
        let pc = LinkEval::new(eta_r[i], 1.0).pi_c;
        let pr = data.ref_pi_r()[i];
        let s = design_factor(method, pc, pr);
        for j in 0..k {
            row[j] = reference[(i, j)];
            summands[(i, j)] = s * row[j];
        }
        if plug_in == PlugIn::ReferenceWeighted {
            let w = data.ref_w()[i];
            let (wh, wa) = info_weights(method, pc, pr);
            add_outer(&mut h, &row, w * wh);
            add_outer(&mut a, &row, w * wa);
        }
    }
    symmetrize(&mut h);
    symmetrize(&mut a);
    let d = design_variance_reference(&summands, data.ref_pi_r().as_slice())?.matrix;
    Ok(VarianceComponents::assemble(method, h, a, d, c_vec, c_b, var_u, n_hat))
}

/// `N^-2 (Var[U] - 2 b^T C + b^T (A + D) b)`. Returns the value and whether a
/// negative plug-in estimate was clamped to zero; infinite when `H` is singular.
pub fn var_mu(c: &VarianceComponents) -> (f64, bool) {
    if c.is_singular() {
        return (f64::INFINITY, false);
    }
    let ad = &c.a + &c.d;
    let raw = (c.var_u_mu - 2.0 * c.b.dot(&c.c_vec) + c.b.dot(&(&ad * &c.b))) / (c.n_hat * c.n_hat);
    if raw < 0.0 {
        (0.0, true)
    } else {
        (raw, false)
    }
}

/// `H^-1 (A + D) H^-1`; `None` when `H` is singular.
pub fn var_beta(c: &VarianceComponents) -> Option<DMatrix<f64>> {
    let inv = c.h_inv.as_ref()?;
    let mut v = inv * (&c.a + &c.d) * inv;
    symmetrize(&mut v);
    Some(v)
}

/// Two-sided normal interval `mu ± z sqrt(var)`; `None` for a non-finite or
/// negative variance.
pub fn confidence_interval(mu_hat: f64, var_mu: f64, level: f64) -> Option<(f64, f64)> {
    if !(var_mu.is_finite() && var_mu >= 0.0) || !(level > 0.0 && level < 1.0) {
        return None;
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let half = z * var_mu.sqrt();
    Some((mu_hat - half, mu_hat + half))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceStatus {
    Ok,
    /// The plug-in variance of the mean was negative and set to zero.
    ClampedToZero,
    /// `H` is numerically singular; variances are infinite.
    Singular,
    /// The propensity fit did not converge; variances are infinite.
    NotConverged,
    /// No closed form is implemented for this estimator.
    Unsupported,
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub mu_hat: f64,
    pub n_hat: f64,
    pub var_mu: f64,
    pub se_mu: f64,
    pub var_beta: DMatrix<f64>,
    pub ci: Option<(f64, f64)>,
    pub status: VarianceStatus,
    pub components: Option<VarianceComponents>,
}

impl InferenceResult {
    /// Standard error of coefficient `j`.
    pub fn se_beta(&self, j: usize) -> f64 {
        self.var_beta[(j, j)].max(0.0).sqrt()
    }

    pub fn variance_is_finite(&self) -> bool {
        self.var_mu.is_finite()
    }
}

/// Hájek mean plus sandwich variances and a 95% interval for a fitted model.
pub fn infer(data: &ObservedData, fit: &PropensityFit, plug_in: PlugIn) -> Result<InferenceResult> {
    let (mu_hat, n_hat) = hajek_mean(data.conv_y().as_slice(), fit.pi_c_hat_conv.as_slice())?;
    let k = data.n_params();
    let flagged = |status: VarianceStatus, fill: f64, components| InferenceResult {
        mu_hat,
        n_hat,
        var_mu: fill,
        se_mu: fill,
        var_beta: DMatrix::from_element(k, k, fill),
        ci: None,
        status,
        components,
    };
    if fit.method == MethodKind::Alp {
        return Ok(flagged(VarianceStatus::Unsupported, f64::NAN, None));
    }
    if !fit.converged {
        return Ok(flagged(VarianceStatus::NotConverged, f64::INFINITY, None));
    }
    let components = variance_components(fit.method, data, fit, mu_hat, plug_in)?;
    let Some(vb) = var_beta(&components) else {
        return Ok(flagged(VarianceStatus::Singular, f64::INFINITY, Some(components)));
    };
    let (vm, clamped) = var_mu(&components);
    if clamped {
        log::warn!("negative plug-in variance of the {} mean clamped to zero", fit.method);
    }
    Ok(InferenceResult {
        mu_hat,
        n_hat,
        var_mu: vm,
        se_mu: vm.sqrt(),
        var_beta: vb,
        ci: confidence_interval(mu_hat, vm, 0.95),
        status: if clamped { VarianceStatus::ClampedToZero } else { VarianceStatus::Ok },
        components: Some(components),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propensity::{fit, SolverConfig};
    use crate::verify::synthetic_dataset;
    use proptest::prelude::*;

    #[test]
    fn hajek_examples() {
        let (m, _) = hajek_mean(&[1.0, 2.0, 6.0], &[0.3, 0.3, 0.3]).unwrap();
        assert!((m - 3.0).abs() < 1e-14);
        let (m, _) = hajek_mean(&[4.5; 3], &[0.1, 0.5, 0.9]).unwrap();
        assert!((m - 4.5).abs() < 1e-14);
        let (m, n) = hajek_mean(&[1.0, 3.0], &[0.5, 0.25]).unwrap();
        assert!((m - 14.0 / 6.0).abs() < 1e-14);
        assert!((n - 6.0).abs() < 1e-14);
        assert!(hajek_mean(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn hajek_invariant_to_weight_scale(
            rows in proptest::collection::vec((-10.0f64..10.0, 0.01f64..0.99), 1..40),
            scale in 0.1f64..0.99,
        ) {
            let y: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let p: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let scaled: Vec<f64> = p.iter().map(|v| v * scale).collect();
            let (a, _) = hajek_mean(&y, &p).unwrap();
            let (b, _) = hajek_mean(&y, &scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            let resid: f64 = y.iter().zip(&p).map(|(yi, pi)| (yi - a) / pi).sum();
            let scale_ref: f64 = y.iter().zip(&p).map(|(yi, pi)| yi.abs() / pi).sum::<f64>() + 1.0;
            prop_assert!(resid.abs() <= 1e-9 * scale_ref);
        }
    }

    #[test]
    fn interval_examples() {
        assert_eq!(confidence_interval(2.0, 0.0, 0.95), Some((2.0, 2.0)));
        let (lo, hi) = confidence_interval(1.0, 0.01, 0.95).unwrap();
        assert!((lo - 0.804).abs() < 5e-4 && (hi - 1.196).abs() < 5e-4);
        assert!(confidence_interval(1.0, f64::INFINITY, 0.95).is_none());
    }

    fn components_with(c_vec: DVector<f64>, c_b: DVector<f64>, var_u: f64, n_hat: f64) -> VarianceComponents {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        VarianceComponents::assemble(
            MethodKind::Ilr,
            h.clone(),
            h * 0.8,
            DMatrix::identity(2, 2) * 0.1,
            c_vec,
            c_b,
            var_u,
            n_hat,
        )
    }

    #[test]
    fn var_mu_without_propensity_penalty() {
        let c = components_with(DVector::zeros(2), DVector::zeros(2), 50.0, 10.0);
        let (v, clamped) = var_mu(&c);
        assert!(!clamped);
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn var_mu_clamps_negative() {
        let c = components_with(DVector::from_vec(vec![100.0, 0.0]), DVector::from_vec(vec![1.0, 0.0]), 1.0, 10.0);
        assert_eq!(var_mu(&c), (0.0, true));
    }

    #[test]
    fn var_beta_reduces_to_inverse_information() {
        let h = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let c = VarianceComponents::assemble(
            MethodKind::Clw,
            h.clone(),
            h.clone(),
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            DVector::zeros(2),
            0.0,
            1.0,
        );
        let v = var_beta(&c).unwrap();
        let inv = h.try_inverse().unwrap();
        assert!((v - inv).abs().max() < 1e-14);
    }

    #[test]
    fn singular_information_gives_infinite_variance() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = VarianceComponents::assemble(
            MethodKind::Clw,
            h.clone(),
            h,
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            DVector::zeros(2),
            1.0,
            1.0,
        );
        assert!(var_beta(&c).is_none());
        assert_eq!(var_mu(&c).0, f64::INFINITY);
    }

    #[test]
    fn centered_outcome_has_no_mean_variance_terms() {
        let base = synthetic_dataset(3, 20, 30, 1);
        let data = ObservedData::new(
            base.conv_x().clone(),
            DVector::from_element(20, 2.5),
            base.conv_pi_r().cloned(),
            base.ref_x().clone(),
            base.ref_pi_r().clone(),
        )
        .unwrap();
        for method in MethodKind::ONE_STEP {
            let f = fit(method, &data, &SolverConfig::default()).unwrap();
            let c = variance_components(method, &data, &f, 2.5, PlugIn::default()).unwrap();
            assert_eq!(c.var_u_mu, 0.0);
            assert!(c.c_vec.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn census_reference_has_zero_design_variance() {
        let base = synthetic_dataset(4, 20, 60, 1);
        let data = ObservedData::new(
            base.conv_x().clone(),
            base.conv_y().clone(),
            Some(DVector::from_element(20, 1.0)),
            base.ref_x().clone(),
            DVector::from_element(60, 1.0),
        )
        .unwrap();
        for method in MethodKind::ONE_STEP {
            let f = fit(method, &data, &SolverConfig::default()).unwrap();
            let c = variance_components(method, &data, &f, 0.0, PlugIn::default()).unwrap();
            assert_eq!(c.d, DMatrix::zeros(2, 2));
        }
    }

    #[test]
    fn fitted_variances_are_symmetric_psd_and_grow_with_design_variance() {
        for seed in 0..100 {
            let data = synthetic_dataset(600 + seed, 30, 40, 1);
            for method in MethodKind::ONE_STEP {
                let f = fit(method, &data, &SolverConfig::default()).unwrap();
                let r = infer(&data, &f, PlugIn::default()).unwrap();
                assert_eq!(r.status, VarianceStatus::Ok, "{method} seed {seed}");
                let v = &r.var_beta;
                assert!((v - v.transpose()).abs().max() <= 1e-10 * v.abs().max());
                let mut c = r.components.clone().unwrap();
                c.d = DMatrix::zeros(2, 2);
                let without = var_beta(&c).unwrap();
                let diff = v - &without;
                assert!(crate::linalg::min_eigenvalue(&diff) >= -1e-10 * v.abs().max());
                let (lo, hi) = r.ci.unwrap();
                assert!(lo <= r.mu_hat && r.mu_hat <= hi);
                assert!(r.n_hat >= data.n_conv() as f64);
            }
        }
    }

    #[test]
    fn alp_and_nonconverged_fits_are_flagged() {
        let data = synthetic_dataset(5, 20, 30, 1);
        let f = fit(MethodKind::Alp, &data, &SolverConfig::default()).unwrap();
        let r = infer(&data, &f, PlugIn::default()).unwrap();
        assert_eq!(r.status, VarianceStatus::Unsupported);
        assert!(r.mu_hat.is_finite());

        let cfg = SolverConfig { max_iter: 1, ..SolverConfig::default() };
        let f = fit(MethodKind::Ilr, &data, &cfg).unwrap();
        assert!(!f.converged);
        let r = infer(&data, &f, PlugIn::default()).unwrap();
        assert_eq!(r.status, VarianceStatus::NotConverged);
        assert_eq!(r.var_mu, f64::INFINITY);
    }
}
